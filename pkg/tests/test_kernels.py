import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from varcast import kernels
from varcast._jit import USE_NUMBA, python_func


def test_poisson_moments():
    rng = np.random.default_rng(1)
    for lam in (0.3, 4.0, 130.0):
        draws = np.array([kernels.poisson_draw(rng, lam) for _ in range(20000)])
        se = math.sqrt(lam / draws.size)
        assert abs(draws.mean() - lam) < 5 * se
        assert abs(draws.var() / lam - 1) < 0.08


def test_binomial_moments_and_edges():
    rng = np.random.default_rng(2)
    n, p = 40, 0.1
    draws = np.array([kernels.binomial_draw(rng, n, p) for _ in range(20000)])
    assert draws.min() >= 0 and draws.max() <= n
    assert abs(draws.mean() - n * p) < 5 * math.sqrt(n * p * (1 - p) / draws.size)
    assert kernels.binomial_draw(rng, 0, 0.5) == 0
    assert kernels.binomial_draw(rng, 7, 0.0) == 0
    assert kernels.binomial_draw(rng, 7, 1.0) == 7


def test_gamma_mean():
    rng = np.random.default_rng(3)
    draws = np.array([kernels.gamma_int_shape(rng, 2, 0.06) for _ in range(20000)])
    assert draws.min() > 0
    # Gamma(2, 0.03): mean 0.06, var 2 * 0.03**2
    assert abs(draws.mean() - 0.06) < 5 * math.sqrt(2 * 0.03 ** 2 / draws.size)


def test_sampler_parity_with_interpreted_body():
    """Compiled and interpreted samplers consume the same stream identically."""
    for fn, args in ((kernels.poisson_draw, (3.7,)), (kernels.binomial_draw, (25, 0.2)),
                     (kernels.gamma_int_shape, (2, 1.5))):
        a = np.random.default_rng(9)
        b = np.random.default_rng(9)
        fast = [fn(a, *args) for _ in range(200)]
        slow = [python_func(fn)(b, *args) for _ in range(200)]
        np.testing.assert_array_equal(fast, slow)


def test_sum_inverse_cdf_matches_numpy_twin(rng):
    levels = np.linspace(0.01, 0.99, 27)
    values = np.sort(rng.gamma(2.0, 5.0, size=(3, 27)), axis=1)
    u = rng.random((5000, 3))
    got = kernels.sum_inverse_cdf(levels, values, u)
    want = kernels._sum_inverse_cdf_numpy(levels, values, u)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    slow = python_func(kernels._sum_inverse_cdf_jit)(levels, values, u[:200])
    np.testing.assert_allclose(slow, want[:200], rtol=1e-12, atol=1e-12)


def test_gather_kernels_match_numpy(rng):
    sums = rng.random((3, 5, 11))
    loc = rng.integers(0, 5, size=(40, 5))
    start = rng.integers(0, 11, size=(40, 5, 9))
    np.testing.assert_allclose(kernels.gather_block_sums(sums, loc, start),
                               kernels._gather_block_sums_numpy(sums, loc, start), rtol=1e-12)
    cells = rng.random((3, 100))
    idx = rng.integers(0, 100, size=(40, 60))
    np.testing.assert_allclose(kernels.gather_cells(cells, idx), cells[:, idx].sum(axis=2).T, rtol=1e-12)


_SIM_SNIPPET = """
import json, numpy as np
from varcast.sim import SimParams, run_sim
from varcast._jit import USE_NUMBA
p = SimParams(population_size=800, end_day=140, initial_i_prop=0.02, beta=0.8, lambda_antigenic=0.02)
out = run_sim(p, seed=77, chunk_days=30)
ids, mat = out.vac_matrix()
print(json.dumps({"numba": USE_NUMBA, "tc": out.tc.values.tolist(), "ids": ids,
                  "vac": mat.tolist(), "pos": out.strain_positions.tolist()}))
"""


def test_simulator_bit_identical_across_backends():
    outs = {}
    for flag in ("1", "0"):
        res = subprocess.run([sys.executable, "-c", _SIM_SNIPPET], capture_output=True, text=True,
                             env={**os.environ, "VARCAST_NUMBA": flag})
        assert res.returncode == 0, res.stderr
        outs[flag] = json.loads(res.stdout.strip().splitlines()[-1])
    assert outs["1"]["numba"] is True and outs["0"]["numba"] is False
    for key in ("tc", "ids", "vac", "pos"):
        assert outs["1"][key] == outs["0"][key]


@pytest.mark.skipif(not USE_NUMBA, reason="numba disabled")
def test_kernels_are_compiled():
    assert hasattr(kernels.sim_advance, "py_func")
