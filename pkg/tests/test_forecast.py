import numpy as np
import pytest

from varcast import model as qt
from varcast.dataset import EVAL_LEVELS, QUANTILE_LEVELS
from varcast.forecast import (QuantileForecast, dense_quantiles, forecast_tc, forecast_vac, invert_cdf,
                              sample_sum)
from varcast.training import Checkpoint


@pytest.fixture(scope="module")
def ckpt():
    cfg = qt.ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32)
    return Checkpoint(cfg, qt.init_params(cfg, np.random.default_rng(0)), 0, 0.0)


def test_quantile_forecast_validation():
    with pytest.raises(ValueError):
        QuantileForecast("a", 0, [0.1, 0.9], [[2.0, 1.0]])
    f = QuantileForecast("a", 0, [0.1, 0.5, 0.9], [[1.0, 2.0, 3.0]])
    assert f.median.tolist() == [2.0]


def test_dense_quantiles_scale_equivariance(ckpt):
    ctx = np.random.default_rng(1).gamma(3.0, 20.0, size=(3, 20))
    a = dense_quantiles(ckpt, ctx)
    b = dense_quantiles(ckpt, 10 * ctx)
    np.testing.assert_allclose(b, 10 * a, rtol=1e-10)
    assert np.all(a >= 0) and np.all(np.diff(a, axis=-1) >= 0)


def test_dense_quantiles_input_checks(ckpt):
    with pytest.raises(ValueError):
        dense_quantiles(ckpt, np.ones((1, 19)))
    with pytest.raises(ValueError):
        dense_quantiles(ckpt, -np.ones((1, 20)))
    with pytest.raises(ValueError):
        dense_quantiles(ckpt, np.full((1, 20), np.nan))


def test_zero_context_forecast_is_finite(ckpt):
    f = forecast_tc(ckpt, np.zeros(20))
    assert np.all(np.isfinite(f.values)) and np.all(f.values >= 0)


def test_invert_cdf_clamps_and_validates():
    levels = np.array([0.1, 0.5, 0.9])
    vals = np.array([1.0, 2.0, 4.0])
    np.testing.assert_allclose(invert_cdf(levels, vals, [0.0, 0.3, 0.7, 1.0]), [1.0, 1.5, 3.0, 4.0])
    with pytest.raises(ValueError):
        invert_cdf(levels, vals[::-1], 0.5)


def test_sample_sum_reproducible_and_stream_separated():
    vals = np.sort(np.random.default_rng(2).random((2, 27)), axis=1)
    a = sample_sum(QUANTILE_LEVELS, vals, 5000, seed=4, chunk=1000)
    b = sample_sum(QUANTILE_LEVELS, vals, 5000, seed=4, chunk=1000)
    c = sample_sum(QUANTILE_LEVELS, vals, 5000, seed=4, chunk=1000, stream=(1,))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    # a longer request extends the shorter one chunk by chunk
    np.testing.assert_array_equal(sample_sum(QUANTILE_LEVELS, vals, 7000, seed=4, chunk=1000)[:5000], a)


def test_forecast_vac_shapes_and_monotone(ckpt):
    ctx = np.random.default_rng(3).gamma(2.0, 30.0, size=(4, 20))
    f = forecast_vac(ckpt, ctx, n_draws=4000, seed=1)
    assert f.values.shape == (4, len(EVAL_LEVELS))
    assert np.all(np.diff(f.values, axis=1) >= 0)
    g = forecast_vac(ckpt, ctx, n_draws=4000, seed=1)
    np.testing.assert_array_equal(f.values, g.values)
