import math

import numpy as np
import pytest
from scipy.stats import norm

from lvmi.data import Dataset
from lvmi.fit import SAConfig
from lvmi.model import ModelError, ModelSpec, Psi
from lvmi.selection import (bic, count_free_params, estimate_observed_loglik, lr_test_from_fits,
                            select_dimensions)


def _gaussian_case(N=200, seed=1):
    spec = ModelSpec.from_kinds(["continuous"], K1=1, p=1)
    psi = Psi.from_arrays(spec, alpha0=np.array([0.3]), loadings=np.array([[0.8]]),
                          sigma=np.array([0.6]), beta=np.array([[0.5]]))
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(N, 1))
    y = 0.3 + 0.8 * (0.5 * x[:, 0] + rng.standard_normal(N)) + 0.6 * rng.standard_normal(N)
    y[:7] = np.nan
    ds = Dataset(y[:, None], x)
    exact = norm.logpdf(y[7:], 0.3 + 0.8 * 0.5 * x[7:, 0], 1.0).sum()
    return ds, psi, exact


@pytest.mark.parametrize("proposal", ["conditional", "prior"])
def test_gaussian_marginal_oracle(proposal):
    ds, psi, exact = _gaussian_case()
    value, se = estimate_observed_loglik(ds, psi, 5000, 0, proposal)
    assert abs(value - exact) < 3 * se + 1e-9


def test_constant_integrand_is_exact():
    spec = ModelSpec.from_kinds(["binary"], K1=1)
    psi = Psi.from_arrays(spec, alpha0=np.array([0.4]), loadings=np.array([[0.0]]))
    y = (np.arange(50) % 3 == 0).astype(float)
    value, se = estimate_observed_loglik(Dataset(y[:, None]), psi, 1000, 0, "prior")
    exact = np.sum(y * 0.4 - np.logaddexp(0, 0.4))
    assert value == pytest.approx(exact, abs=1e-10)
    assert se < 1e-6


def _mixed_case():
    spec = ModelSpec.from_kinds(["binary", "binary", "continuous"], K1=1, K2=1, ignorable=False)
    psi = Psi.from_arrays(spec, alpha0=np.array([0.2, -0.4, 0.0]),
                          loadings=np.array([[1.2], [0.8], [0.9]]), sigma=np.array([1.0, 1.0, 0.7]),
                          gamma0=np.full(3, 1.5), gamma=np.full((3, 1), 0.6),
                          kappa=np.array([[1.0]]))
    rng = np.random.default_rng(3)
    y = np.column_stack([rng.integers(0, 2, 150), rng.integers(0, 2, 150),
                         rng.normal(size=150)]).astype(float)
    y[rng.random(y.shape) < 0.2] = np.nan
    return Dataset(y), psi


def test_seeds_agree_within_error():
    ds, psi = _mixed_case()
    a, sa = estimate_observed_loglik(ds, psi, 2000, 1)
    b, sb = estimate_observed_loglik(ds, psi, 2000, 2)
    assert abs(a - b) < 3 * math.hypot(sa, sb)


def test_se_shrinks_like_inverse_root_S():
    ds, psi = _mixed_case()
    _, s1 = estimate_observed_loglik(ds, psi, 1000, 0, "prior")
    _, s4 = estimate_observed_loglik(ds, psi, 4000, 0, "prior")
    assert 1.6 <= s1 / s4 <= 2.5


def test_common_random_numbers_are_reproducible():
    ds, psi = _mixed_case()
    assert estimate_observed_loglik(ds, psi, 1000, 9) == estimate_observed_loglik(ds, psi, 1000, 9)


def test_needs_enough_draws():
    ds, psi, _ = _gaussian_case()
    with pytest.raises(ModelError):
        estimate_observed_loglik(ds, psi, 500)


def test_bic_penalty_monotone():
    assert bic(-100.0, 5, 200) < bic(-100.0, 6, 200)
    assert bic(-100.0, 5, 200) == pytest.approx(200 + 5 * math.log(200))


def test_one_cell_grid_and_recomputable_bic():
    ds, _ = _mixed_case()
    spec = ModelSpec.from_kinds(["binary", "binary", "continuous"], K1=1, K2=1, ignorable=False)
    table, best = select_dimensions(ds, spec, [(1, 1)], SAConfig(T=30, T0=15), S=1000)
    assert len(table) == 1 and best is table[0]
    assert best.nparams == count_free_params(spec)
    assert best.bic == pytest.approx(-2 * best.loglik + math.log(ds.N) * best.nparams)


def test_failed_cell_recorded():
    ds, _ = _mixed_case()
    spec = ModelSpec.from_kinds(["binary", "binary", "continuous"], K1=1, K2=1, ignorable=False)
    table, best = select_dimensions(ds, spec, [(1, 1), (0, 1)], SAConfig(T=30, T0=15), S=1000)
    assert [r.K1 for r in table] == [1, 0]
    assert table[1].error and best.K1 == 1


def test_tie_break_prefers_smaller_model(monkeypatch):
    import lvmi.selection as sel
    ds, _ = _mixed_case()
    spec = ModelSpec.from_kinds(["binary", "binary", "continuous"], K1=1, K2=1, ignorable=False)
    monkeypatch.setattr(sel, "fit", lambda d, s, c: type("R", (), {"psi_hat": s})())
    monkeypatch.setattr(sel, "estimate_observed_loglik", lambda d, p, S, seed: (0.0, 0.0))
    monkeypatch.setattr(sel, "count_free_params", lambda s: 10)
    _, best = sel.select_dimensions(ds, spec, [(2, 1), (1, 2), (1, 1)], SAConfig(T=2, T0=1))
    assert (best.K1, best.K2) == (1, 1)
    _, best = sel.select_dimensions(ds, spec, [(2, 1), (1, 2)], SAConfig(T=2, T0=1))
    assert (best.K1, best.K2) == (1, 2)


def test_lr_statistic_and_df():
    ds, psi = _mixed_case()
    null = Psi.from_arrays(psi.spec.with_dims(ignorable=True),
                           **{k: v for k, v in psi.arrays().items() if k != "kappa"})
    res = lr_test_from_fits(ds, psi, null, 1000, 0)
    assert res.df == 1
    assert res.stat == pytest.approx(2 * (res.loglik_full - res.loglik_null))
    assert 0.0 <= res.p_value <= 1.0
    with pytest.raises(ModelError):
        lr_test_from_fits(ds, null, psi, 1000, 0)


def test_lr_warm_start_shares_pilot_and_seed(monkeypatch):
    import lvmi.selection as sel
    ds, psi = _mixed_case()
    calls = []

    def fake_fit(d, spec, cfg, psi0=None):
        calls.append((spec.ignorable, cfg.seed, psi0))
        out = Psi.from_arrays(spec, **{k: v for k, v in psi.arrays().items()
                                      if k != "kappa" or not spec.ignorable})
        return type("R", (), {"psi_hat": out})()

    monkeypatch.setattr(sel, "fit", fake_fit)
    res = sel.lr_test_ignorability(ds, psi.spec, 1, 1, SAConfig(T=2, T0=1, seed=5), S=1000)
    (ign0, seed0, start0), (ign1, seed1, start1), (ign2, seed2, start2) = calls
    assert ign0 and ign1 and not ign2
    assert start0 is None and seed1 == seed2 != seed0
    assert np.allclose(start2.kappa, 0.0) and np.allclose(start2.alpha0, start1.alpha0)
    assert res.df == 1


def test_grid_mixing_missingness_models_rejected():
    ds, _ = _mixed_case()
    spec = ModelSpec.from_kinds(["binary", "binary", "continuous"], K1=1, K2=1, ignorable=False)
    with pytest.raises(ModelError, match="K2 = 0"):
        select_dimensions(ds, spec, [(1, 0), (1, 1)], SAConfig(T=30, T0=15), S=1000)
