"""Weekly surveillance series shared by the simulator, observation model and dataset code."""
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np


@dataclass
class SurveillanceSeries:
    """A weekly nonnegative case series.

    ``kind`` is ``"tc"`` (total cases) or ``"vac"`` (variant-attributable
    cases, with ``variant_id`` set).  Realizations produced by the observation
    model also carry ``realization_id`` and the noise/outlier flags.
    """

    values: np.ndarray
    series_id: str = ""
    kind: str = "tc"
    variant_id: int = -1
    realization_id: Optional[int] = None
    noised: bool = False
    outliered: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size < 1:
            raise ValueError("series values must be a nonempty 1-D array")
        if not np.all(np.isfinite(values)):
            raise ValueError(f"series {self.series_id!r} has non-finite values")
        if np.any(values < 0):
            raise ValueError(f"series {self.series_id!r} has negative values")
        if self.kind not in ("tc", "vac"):
            raise ValueError(f"unknown series kind {self.kind!r}")
        self.values = values

    def __len__(self):
        return self.values.shape[0]

    def with_values(self, values, **changes) -> "SurveillanceSeries":
        return replace(self, values=np.asarray(values, dtype=np.float64), meta=dict(self.meta), **changes)

    @property
    def key(self) -> str:
        parts = [self.series_id, self.kind]
        if self.kind == "vac":
            parts.append(f"v{self.variant_id}")
        if self.realization_id is not None:
            parts.append(f"z{self.realization_id}")
        return ":".join(parts)
