import numpy as np
import pytest

from varcast.series import SurveillanceSeries
from varcast.sim import (LHS_BOUNDS, PARAM_NAMES, RunStatus, SimOutput, SimParams, classify_turnover,
                         dominance_runs, lhs_sample, replicate_sweep, run_sim)

SMALL = dict(population_size=1500, end_day=364, initial_i_prop=0.01)


def test_params_validation():
    with pytest.raises(ValueError, match="beta"):
        SimParams(beta=0.0)
    with pytest.raises(ValueError, match="swap_demography"):
        SimParams(swap_demography=False)
    with pytest.raises(ValueError, match="initial_i_prop"):
        SimParams(initial_i_prop=1.5)


def test_params_round_trip():
    p = SimParams(beta=1.1, nu=0.1)
    assert SimParams.from_dict(p.to_dict()) == p
    x = [p.sampled()[k] for k in PARAM_NAMES]
    assert SimParams.from_vector(x) == p


def test_lhs_strata_small():
    d = lhs_sample(LHS_BOUNDS, 37, seed=4)
    for j, (lo, hi) in enumerate(LHS_BOUNDS.values()):
        col = d.points[:, j]
        assert np.all((col >= lo) & (col <= hi))
        if hi > lo:
            strata = np.floor((col - lo) / (hi - lo) * 37).astype(int)
            assert sorted(strata) == list(range(37))
    np.testing.assert_array_equal(d.points, lhs_sample(LHS_BOUNDS, 37, seed=4).points)


def test_lhs_rejects_bad_bounds():
    with pytest.raises(ValueError):
        lhs_sample({"a": (1.0, 0.0)}, 5, seed=0)
    with pytest.raises(ValueError):
        lhs_sample({"a": (0.0, 1.0)}, 0, seed=0)


def test_run_is_deterministic_and_conserves():
    p = SimParams(beta=0.9, lambda_antigenic=5e-3, **SMALL)
    a = run_sim(p, seed=5, track_population=True)
    b = run_sim(p, seed=5)
    np.testing.assert_array_equal(a.tc.values, b.tc.values)
    assert a.status is RunStatus.COMPLETED
    assert len(a.tc) == SMALL["end_day"] // 7
    assert np.all(a.population.sum(axis=1) == p.population_size)
    ids, mat = a.vac_matrix()
    np.testing.assert_array_equal(mat.sum(axis=1), a.tc.values)
    assert len(ids) == len(set(ids))


def test_different_seeds_differ():
    p = SimParams(beta=0.9, **SMALL)
    assert not np.array_equal(run_sim(p, seed=1).tc.values, run_sim(p, seed=2).tc.values)


def test_strain_tree_is_consistent():
    p = SimParams(beta=1.2, lambda_antigenic=2e-2, **SMALL)
    out = run_sim(p, seed=3)
    parents = out.strain_parents
    assert parents[0] == -1
    assert np.all(parents[1:] < np.arange(1, parents.size))
    assert out.strain_positions.size == parents.size


def test_no_external_force_can_go_extinct():
    p = SimParams(beta=0.05, nu=0.25, external_migration=0.0, **SMALL)
    out = run_sim(p, seed=0)
    assert out.status is RunStatus.EXTINCT
    assert out.days_simulated < SMALL["end_day"]
    assert not out.turnover_flag


def test_wall_time_cutoff():
    p = SimParams(population_size=20000, end_day=3650, beta=1.5)
    out = run_sim(p, seed=0, wall_budget=1e-9, chunk_days=7)
    assert out.status is RunStatus.WALL_TIME_EXCEEDED
    assert out.days_simulated < p.end_day
    with pytest.raises(ValueError):
        run_sim(p, seed=0, wall_budget=0.0)


def _fake_output(leaders):
    """Output whose weekly leader sequence is ``leaders`` (None = no cases)."""
    n_types = max(x for x in leaders if x is not None) + 1
    mat = np.zeros((len(leaders), n_types))
    for w, who in enumerate(leaders):
        if who is not None:
            mat[w, who] = 10.0
            mat[w, (who + 1) % n_types] += 1.0 if n_types > 1 else 0.0
    tc = SurveillanceSeries(mat.sum(axis=1), series_id="x")
    vacs = {v: SurveillanceSeries(mat[:, v], series_id="x", kind="vac", variant_id=v) for v in range(n_types)}
    return SimOutput(tc, vacs, RunStatus.COMPLETED, False, SimParams(), 0)


def test_turnover_classification():
    assert classify_turnover(_fake_output([0] * 8 + [1] * 8), w_min=8)
    assert not classify_turnover(_fake_output([0] * 8 + [1] * 7), w_min=8)
    # a gap with no cases breaks the run
    assert not classify_turnover(_fake_output([0] * 8 + [1] * 4 + [None] + [1] * 4), w_min=8)
    # the same type leading twice is not turnover
    assert not classify_turnover(_fake_output([0] * 8 + [1] * 2 + [0] * 8), w_min=8)
    assert dominance_runs(_fake_output([0, 0, 1, None, 1])) == [(0, 2), (1, 1), (1, 1)]


def test_sweep_seeds_do_not_depend_on_workers():
    design = lhs_sample(LHS_BOUNDS, 3, seed=1)
    fixed = dict(end_day=140, population_size=1000)
    s1, r1 = replicate_sweep(design, 1, 60.0, master_seed=9, fixed=fixed, workers=1, w_min=1)
    s2, r2 = replicate_sweep(design, 1, 60.0, master_seed=9, fixed=fixed, workers=2, w_min=1)
    for a, b in zip(s1 + r1, s2 + r2):
        assert a.series_id == b.series_id and a.seed == b.seed
        np.testing.assert_array_equal(a.tc.values, b.tc.values)
    assert {o.replicate for o in s1} == {-1}


def test_turnover_examples():
    assert classify_turnover(_fake_output([0] * 20 + [1] * 20))
    assert not classify_turnover(_fake_output([0] * 40))
    assert not classify_turnover(_fake_output([0] * 20 + [1] + [0] * 19))


def test_zero_keepers_gives_no_replicates():
    design = lhs_sample(LHS_BOUNDS, 2, seed=0)
    fixed = dict(end_day=28, population_size=500)
    screen, reps = replicate_sweep(design, 2, 60.0, fixed=fixed, workers=1, w_min=1000)
    assert len(screen) == 2 and reps == []


def test_doubling_beta_does_not_lower_first_wave_peak():
    base = dict(population_size=2000, end_day=364, initial_i_prop=0.005, nu=0.2, lambda_antigenic=0.0,
                external_migration=0.0)
    peaks = {}
    for beta in (0.3, 0.6):
        p = SimParams(beta=beta, **base)
        peaks[beta] = np.mean([run_sim(p, seed=s).tc.values.max() for s in range(100)])
    assert peaks[0.6] >= peaks[0.3]
