import numpy as np
import pandas as pd
import pytest

from varcast import io
from varcast.cli import EXIT_CHECKSUM, EXIT_CONFIG, EXIT_MISSING, EXIT_OK, main
from varcast.config import ConfigError, load_config

FAST = ["--desk", "--set", "train.updates=20", "--set", "forecast.n_draws=500", "--set", "bootstrap.n_reps=50",
        "--set", "sim.end_day=700", "-q"]


def test_config_precedence(tmp_path):
    ini = tmp_path / "c.ini"
    ini.write_text("[model]\nd_model = 48\nd_ff = 96\n[train]\nupdates = 7\n")
    cfg = load_config(ini, ["train.updates=9"], desk=True)
    assert cfg.model.d_model == 48          # file beats preset
    assert cfg.train.updates == 9           # flag beats file
    assert cfg.sim.design_size == 16        # preset beats default
    assert load_config().sim.design_size == 4000


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(overrides=["nope.x=1"])
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(overrides=["train.seed=1"])
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(overrides=["train.updates=many"])
    with pytest.raises(ConfigError):
        load_config(overrides=["model.n_heads=3"])
    with pytest.raises(ConfigError):
        load_config(overrides=["data.context=10"])
    bad = tmp_path / "bad.ini"
    bad.write_text("no section header\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_config_ini_round_trip(tmp_path):
    cfg = load_config(desk=True, overrides=["score.alphas=0.5, 0.1"])
    path = tmp_path / "r.ini"
    path.write_text(cfg.to_ini())
    assert load_config(path) == cfg
    assert load_config(path).hash() == cfg.hash()


def test_exit_codes_without_inputs(tmp_path):
    assert main(["score", "-q", "-w", str(tmp_path)]) == EXIT_MISSING
    assert main(["train", "-q", "-w", str(tmp_path)]) == EXIT_MISSING
    assert main(["score", "-q", "-w", str(tmp_path), "--set", "score.alphas=0.5,0.9"]) == EXIT_CONFIG
    assert main(["simulate", "-q", "-w", str(tmp_path), "-c", str(tmp_path / "missing.ini")]) == EXIT_MISSING


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    work = tmp_path_factory.mktemp("pipe")
    assert main(["pipeline", "-w", str(work), *FAST]) == EXIT_OK
    return work


def test_pipeline_outputs(small_run):
    for name in ("design.csv", "sim_series.csv", "augmented.csv", "checkpoint.vckpt", "truth.csv", "scores.csv",
                 "bootstrap.csv", "bootstrap_ci.csv"):
        assert (small_run / name).exists(), name
    for stage in ("simulate", "augment", "train", "forecast", "score", "bootstrap"):
        man = io.read_json(small_run / f"{stage}_manifest.json")
        assert man["config_hash"] and man["versions"]["numpy"]
        for rel, digest in man["outputs"].items():
            assert io.sha256(small_run / rel) == digest
    models = {p.stem for p in (small_run / "forecasts").glob("*.csv")}
    assert models == {"persistence", "qt-tc", "qt-vac"}
    scores = pd.read_csv(small_run / "scores.csv")
    assert set(scores["model"]) == models


def test_forecast_csv_format(small_run):
    f = pd.read_csv(small_run / "forecasts" / "qt-tc.csv", keep_default_na=False)
    assert list(f.columns) == io.FORECAST_COLUMNS
    assert set(f["target"]) == {f"{h} wk ahead cases" for h in range(1, 5)}
    assert (f["quantile_level"] == "NA").sum() == len(f) // 8
    q = f[f["quantile_level"] != "NA"].copy()
    q["quantile_level"] = q["quantile_level"].astype(float)
    for _, g in q.groupby(["location", "forecast_date", "target"]):
        assert np.all(np.diff(g.sort_values("quantile_level")["value"].to_numpy()) >= 0)


def test_sim_series_sums(small_run):
    df = pd.read_csv(small_run / "sim_series.csv")
    tc = df[df.kind == "tc"].set_index(["series_id", "week"])["value"]
    vac = df[df.kind == "vac"].groupby(["series_id", "week"])["value"].sum()
    np.testing.assert_allclose(vac.reindex(tc.index, fill_value=0.0), tc)


def test_stage_rerun_and_checksum(small_run, tmp_path):
    before = (small_run / "scores.csv").read_bytes()
    assert main(["score", "-w", str(small_run), *FAST]) == EXIT_OK
    assert (small_run / "scores.csv").read_bytes() == before
    # external forecasts and truth bypass manifest verification
    out = tmp_path / "external"
    assert main(["score", "-w", str(out), "--forecasts", str(small_run / "forecasts"),
                 "--truth", str(small_run / "truth.csv"), *FAST]) == EXIT_OK
    assert (out / "scores.csv").read_bytes() == before
    truth = small_run / "truth.csv"
    original = truth.read_bytes()
    try:
        truth.write_bytes(original + b"x0,0,0\n")
        assert main(["score", "-w", str(small_run), *FAST]) == EXIT_CHECKSUM
    finally:
        truth.write_bytes(original)
