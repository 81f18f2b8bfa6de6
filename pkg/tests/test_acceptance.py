"""Acceptance criteria, one test each; the summary prints a PASS/FAIL line per criterion."""
import time

import numpy as np
import pandas as pd
import pytest

from conftest import run_cli
from varcast import model as qt
from varcast.bootstrap import BootstrapConfig, bootstrap
from varcast.dataset import EVAL_LEVELS, QUANTILE_LEVELS, WindowCorpus, enumerate_windows, validation_windows
from varcast.forecast import forecast_tc, forecast_vac, sample_sum
from varcast.obs import realize_tc
from varcast.rng import derive_seed
from varcast.scoring import quantile_columns, wis
from varcast.series import SurveillanceSeries
from varcast.sim import LHS_BOUNDS, RunStatus, SimParams, lhs_sample, run_sim
from varcast.training import Checkpoint, TrainConfig, constant_mean_loss, grad_check, train

criterion = pytest.mark.criterion


@criterion("quantile non-crossing over 10,000 parameter draws")
def test_non_crossing(record):
    cfg = qt.ModelConfig(d_model=8, n_layers=1, n_heads=2, d_ff=16)
    rng = np.random.default_rng(0)
    violations, checked = 0, 0
    for _ in range(10_000):
        params = qt.init_params(cfg, rng)
        gain = 10.0 ** rng.uniform(-2, 2)
        for k in params:
            params[k] = params[k] * gain + rng.normal(0, 0.1 * gain, size=params[k].shape)
        z = rng.uniform(0, 1, size=(2, cfg.context)) * 10.0 ** rng.uniform(-3, 3)
        q = qt.to_quantiles(qt.forward(params, z, cfg))
        violations += int(np.sum(np.diff(q, axis=-1) < 0))
        checked += q.size
    record(f"{violations} violations in {checked} quantile values")
    assert violations == 0


@criterion("gradient check d=16: max relative error < 1e-4 in < 60 s")
def test_gradient_check(record):
    cfg = qt.ModelConfig(d_model=16, n_layers=2, n_heads=4, d_ff=32)
    t0 = time.perf_counter()
    err, per_group = grad_check(cfg, seed=0)
    elapsed = time.perf_counter() - t0
    record(f"max error {err:.2e}, {elapsed:.1f} s")
    assert err < 1e-4, per_group
    assert elapsed < 60


@criterion("WIS oracles: perfect = 0, y=0 vs all-ones = 1, decomposition")
def test_wis_oracles(record):
    assert wis(3.0, np.full(7, 3.0)) == 0.0
    one = wis(0.0, np.ones(7))
    assert abs(one - 1.0) < 1e-12
    # WIS equals the sum of pinball losses over all 2K+1 quantiles divided by K + 1/2
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(2000):
        y = rng.gamma(1.5, 20.0) * (rng.random() < 0.9)
        q = np.sort(rng.gamma(2.0, 15.0, size=7))
        pin = np.sum(np.maximum(EVAL_LEVELS * (y - q), (EVAL_LEVELS - 1) * (y - q)))
        worst = max(worst, abs(wis(y, q) - pin / 3.5) / max(1.0, pin))
    record(f"WIS(0, ones) = {one:.15f}; decomposition error {worst:.1e}")
    assert worst < 1e-12


@criterion("observation model over 1e5 realizations")
def test_observation_model_distributions(record):
    rng = np.random.default_rng(2)
    n_inputs = 5000
    ratio_bad = count_bad = n_out = n_real = 0
    noised_ok = True
    for i in range(n_inputs):
        t = int(rng.integers(60, 160))
        y = SurveillanceSeries(rng.gamma(2.0, 100.0, size=t) + 1.0, series_id=f"s{i}")
        reals = realize_tc(y, rng)
        noised_ok &= sum(r.noised for r in reals) == 10 and len(reals) == 20
        for r in reals:
            n_real += 1
            if r.noised:
                eps = r.meta["noise"]
                ratio_bad += int(np.sum((eps < 1 / 3.5) | (eps > 3.5)))
            if r.outliered:
                n_out += 1
                k = r.meta["high_outliers"].size + r.meta["low_outliers"].size
                count_bad += int(not 5 <= k <= 10)
    freq = n_out / n_real
    record(f"{n_real} realizations; ratio violations {ratio_bad}; count violations {count_bad}; "
           f"outlier frequency {freq:.4f}")
    assert n_real == 100_000
    assert ratio_bad == 0 and count_bad == 0
    assert abs(freq - 0.25) <= 0.02
    assert noised_ok


@criterion("window enumeration: T=100 gives 77, brute force on 1,000 triples")
def test_window_enumeration(record):
    assert enumerate_windows(100, 20, 4) == 77
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(1000):
        t, c, h = int(rng.integers(0, 400)), int(rng.integers(1, 60)), int(rng.integers(1, 20))
        brute = sum(1 for s in range(t) if s + c + h <= t)
        mismatches += enumerate_windows(t, c, h) != brute
        corpus = WindowCorpus([np.ones(t)], context=c, horizon=h) if t else None
        if corpus is not None:
            mismatches += corpus.total != brute
    record(f"{mismatches} mismatches")
    assert mismatches == 0


def _segment_density(levels, values, grid):
    """Histogram (on ``grid`` bin edges) of Q(U) for the clamped piecewise-linear quantile function Q."""
    mass = np.zeros(grid.size - 1)
    width = grid[1] - grid[0]
    for tau, v in ((levels[0], values[0]), (1 - levels[-1], values[-1])):
        mass[min(int((v - grid[0]) / width), mass.size - 1)] += tau
    for k in range(levels.size - 1):
        lo, hi, p = values[k], values[k + 1], levels[k + 1] - levels[k]
        if hi - lo < width:
            mass[min(int(((lo + hi) / 2 - grid[0]) / width), mass.size - 1)] += p
            continue
        # uniform on [lo, hi]: overlap of each bin with the segment
        left = np.clip(grid[:-1], lo, hi)
        right = np.clip(grid[1:], lo, hi)
        mass += p * (right - left) / (hi - lo)
    return mass


@criterion("VAC aggregation: single variant = TC within 1%, point masses sum, 2-variant convolution within 2%")
def test_vac_aggregation(record):
    cfg = qt.ModelConfig.desk()
    params = qt.init_params(cfg, np.random.default_rng(4))
    # lift the base quantile so every level is strictly positive and relative error is defined
    base = params["out_b"].reshape(cfg.horizon, cfg.n_quantiles)
    base[:, 0] += 2.0
    ckpt = Checkpoint(cfg, params, 0, 0.0)
    ctx = 200.0 + 100.0 * np.sin(np.arange(20) / 3.0)
    direct = forecast_tc(ckpt, ctx).values
    mc = forecast_vac(ckpt, ctx[None, :], n_draws=100_000, seed=5).values
    rel = np.max(np.abs(mc - direct) / np.abs(direct))

    point = sample_sum(QUANTILE_LEVELS, np.stack([np.full(27, 3.0), np.full(27, 4.0)]), 1000, seed=0)
    assert np.all(point == 7.0)

    a = np.quantile(np.random.default_rng(6).gamma(3.0, 10.0, 200_000), QUANTILE_LEVELS)
    b = np.quantile(np.random.default_rng(7).normal(80.0, 15.0, 200_000).clip(0), QUANTILE_LEVELS)
    grid = np.linspace(0.0, 250.0, 25_001)
    dens = np.convolve(_segment_density(QUANTILE_LEVELS, a, grid), _segment_density(QUANTILE_LEVELS, b, grid))
    centers = grid[0] + (np.arange(dens.size) + 1.0) * (grid[1] - grid[0])
    oracle_median = centers[np.searchsorted(np.cumsum(dens), 0.5)]
    mc_median = np.median(sample_sum(QUANTILE_LEVELS, np.stack([a, b]), 100_000, seed=8))
    conv_rel = abs(mc_median - oracle_median) / oracle_median
    record(f"single-variant max rel diff {rel:.4f}; convolution median rel diff {conv_rel:.4f}")
    assert rel < 0.01
    assert conv_rel < 0.02


@criterion("simulator conservation over 100 parameter draws")
def test_simulator_conservation(record):
    design = lhs_sample(LHS_BOUNDS, 100, seed=9)
    pop_bad = vac_bad = 0
    for i in range(100):
        out = run_sim(design.params(i), seed=derive_seed(9, "cons", i), track_population=True)
        pop_bad += int(np.sum(out.population.sum(axis=1) != out.params.population_size))
        _, mat = out.vac_matrix()
        vac_bad += int(np.sum(mat.sum(axis=1) != out.tc.values))
        assert out.population.shape[0] == out.days_simulated
    record(f"population violations {pop_bad}; VAC-sum violations {vac_bad}")
    assert pop_bad == 0 and vac_bad == 0


@criterion("subcritical extinction >= 95% of 200 runs in < 10 min")
def test_subcritical_extinction(record):
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    extinct = 0
    for i in range(200):
        nu = rng.uniform(*LHS_BOUNDS["nu"])
        beta = nu * rng.uniform(0.1, 0.6)
        p = SimParams(beta=beta, nu=nu, external_migration=0.0,
                      initial_i_prop=rng.uniform(*LHS_BOUNDS["initial_i_prop"]))
        extinct += run_sim(p, seed=derive_seed(10, "sub", i)).status is RunStatus.EXTINCT
    elapsed = time.perf_counter() - t0
    record(f"{extinct}/200 extinct in {elapsed:.1f} s")
    assert extinct >= 190
    assert elapsed < 600


@criterion("LHS stratification at n=4000")
def test_lhs_stratification(record):
    n = 4000
    design = lhs_sample(LHS_BOUNDS, n, seed=11)
    bad = []
    for j, (name, (lo, hi)) in enumerate(LHS_BOUNDS.items()):
        col = design.points[:, j]
        if hi == lo:
            # a fixed dimension has no strata to fill
            if not np.all(col == lo):
                bad.append(name)
            continue
        strata = np.floor((col - lo) / (hi - lo) * n).astype(int)
        if not np.array_equal(np.sort(strata), np.arange(n)):
            bad.append(name)
    record(f"dimensions failing: {bad or 'none'}")
    assert not bad


def _correlated_records(rng, n_loc=6, n_dates=45, rho=0.85):
    rows = []
    for loc in range(n_loc):
        offset = rng.normal(0, 8)
        err = np.zeros(n_dates)
        for d in range(1, n_dates):
            err[d] = rho * err[d - 1] + rng.normal(0, 4)
        for m, extra in (("model", 0.0), ("base", 3.0)):
            for d in range(n_dates):
                for h in (1, 2):
                    y = 50.0
                    center = y + offset + err[d] + extra + rng.normal(0, 0.5)
                    q = np.sort(center + np.linspace(-6, 6, 7))
                    rows.append([m, f"L{loc}", d, h, y, *q])
    return pd.DataFrame(rows, columns=["model", "location", "forecast_date", "horizon", "y"] + quantile_columns())


@criterion("block bootstrap CI >= iid CI in >= 90% of 50 scenarios")
def test_bootstrap_width_ordering(record):
    rng = np.random.default_rng(12)
    wider = 0
    for s in range(50):
        rec = _correlated_records(rng)
        block = bootstrap(rec, "base", BootstrapConfig(n_reps=1000, mode="block"), seed=s)
        iid = bootstrap(rec, "base", BootstrapConfig(n_reps=1000, mode="iid"), seed=s)
        wider += block.ci_width("wis", "model") >= iid.ci_width("wis", "model")
    record(f"block wider in {wider}/50 scenarios")
    assert wider >= 45


@pytest.mark.slow
@criterion("desk training: d=32, 2000 updates, >= 50 series, < 30 min, beats initial and constant-mean")
def test_desk_training(record):
    design = lhs_sample(LHS_BOUNDS, 8, seed=13)
    runs = []
    for i in range(8):
        out = run_sim(design.params(i), seed=derive_seed(13, "desk", i), series_id=f"r{i}")
        if out.status is RunStatus.COMPLETED and out.tc.values.sum() > 0:
            runs.append(out)
        if len(runs) == 4:
            break
    assert len(runs) == 4
    rng = np.random.default_rng(14)
    train_series = [s for o in runs[:3] for s in realize_tc(o.tc, rng)]
    val_series = realize_tc(runs[3].tc, rng)
    corpus = WindowCorpus(train_series)
    val = validation_windows(WindowCorpus(val_series), 1024, seed=15)
    cfg = qt.ModelConfig.desk()
    t0 = time.perf_counter()
    res = train(corpus, val, cfg, TrainConfig(updates=2000, seed=16))
    elapsed = time.perf_counter() - t0
    final = res.checkpoint.val_loss
    const = constant_mean_loss(val)
    record(f"{len(train_series)} series, {elapsed:.0f} s, val loss {res.initial_val_loss:.4f} -> {final:.4f} "
           f"(constant-mean {const:.4f}, last EMA {res.history[-1]['ema_val_loss']:.4f})")
    assert cfg.d_model == 32 and len(train_series) >= 50
    assert not res.diverged
    assert elapsed < 1800
    assert final < res.initial_val_loss and final < const


@pytest.mark.slow
@criterion("pipeline --desk rerun gives byte-identical scores.csv")
def test_pipeline_determinism(tmp_path, record):
    digests = []
    for k in range(2):
        work = tmp_path / f"run{k}"
        res = run_cli(["pipeline", "--desk", "-q", "-w", str(work)])
        assert res.returncode == 0, res.stderr
        digests.append((work / "scores.csv").read_bytes())
        for name in ("design.csv", "sim_series.csv", "augmented.csv", "checkpoint.vckpt", "bootstrap.csv",
                     "bootstrap_ci.csv"):
            assert (work / name).exists()
    record(f"scores.csv {len(digests[0])} bytes, identical={digests[0] == digests[1]}")
    assert digests[0] == digests[1]
