import csv

import numpy as np
import pytest

from lvmi.data import Dataset
from lvmi.fit import SAConfig, fit, step_size
from lvmi.model import ModelError, ModelSpec


def _one_factor(N=800, seed=0):
    rng = np.random.default_rng(seed)
    eta = rng.standard_normal(N)
    a0, a, s = np.array([1.0, -0.5, 0.2]), np.array([0.9, 0.7, 1.2]), np.array([0.5, 0.6, 0.4])
    y = a0 + np.outer(eta, a) + s * rng.standard_normal((N, 3))
    y[rng.random(y.shape) < 0.1] = np.nan
    return Dataset(y), a0, a, s


def test_step_size_schedule():
    cfg = SAConfig(A=2.0, c=0.6)
    assert step_size(1, cfg) == 2.0
    assert step_size(32, cfg) == pytest.approx(2.0 * 32**-0.6)
    with pytest.raises(ValueError):
        step_size(0, cfg)


@pytest.mark.parametrize("kw", [dict(T=10, T0=10), dict(c=0.5), dict(A=0.0), dict(gradient="x"),
                                dict(workers=0)])
def test_config_validation(kw):
    with pytest.raises(ModelError):
        SAConfig(**kw)


def test_recovers_one_factor_model():
    ds, a0, a, s = _one_factor()
    spec = ModelSpec.from_kinds(["continuous"] * 3, K1=1)
    res = fit(ds, spec, SAConfig(T=600, T0=300, seed=1))
    psi = res.psi_hat
    assert np.allclose(psi.alpha0, a0, atol=0.1)
    # the factor sign is not identified; variances are
    assert np.allclose(psi.loadings[:, 0] ** 2 + psi.sigma**2, a**2 + s**2, rtol=0.15)
    assert np.allclose(np.abs(psi.loadings[:, 0]), a, atol=0.15)
    assert res.diagnostics["clipped_after_burnin"] == 0


def test_fit_is_deterministic_and_worker_free():
    ds, *_ = _one_factor(N=300)
    spec = ModelSpec.from_kinds(["continuous"] * 3, K1=1)
    a = fit(ds, spec, SAConfig(T=40, T0=20, seed=5, block_size=64))
    b = fit(ds, spec, SAConfig(T=40, T0=20, seed=5, block_size=64, workers=3))
    c = fit(ds, spec, SAConfig(T=40, T0=20, seed=6, block_size=64))
    assert np.array_equal(a.psi_hat.values, b.psi_hat.values)
    assert not np.array_equal(a.psi_hat.values, c.psi_hat.values)


def test_trace_written(tmp_path):
    ds, *_ = _one_factor(N=100)
    spec = ModelSpec.from_kinds(["continuous"] * 3, K1=1)
    res = fit(ds, spec, SAConfig(T=12, T0=6, keep_trace=True))
    res.write_trace(tmp_path / "trace.csv")
    with open(tmp_path / "trace.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 13
    assert rows[0][1:] == list(spec.layout.names)


def test_callback_sees_every_iteration():
    ds, *_ = _one_factor(N=100)
    seen = []
    fit(ds, ModelSpec.from_kinds(["continuous"] * 3, K1=1), SAConfig(T=10, T0=5),
        callback=lambda t, psi: seen.append(t))
    assert seen == list(range(1, 11))
