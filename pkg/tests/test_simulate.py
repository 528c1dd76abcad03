import numpy as np
import pytest
from scipy.special import expit

from lvmi.model import ModelError
from lvmi.samplers import RngStream, stream_id
from lvmi.simulate import (GGM_PRECISION, ISING_COUPLING, STUDIES, SCALES, StudyIConfig,
                           StudyIIIConfig, binary_marginal_mean, gen_data_latent,
                           gen_data_study_III, gen_params_study_I, graphical_truth,
                           ising_probabilities, ising_states, sample_ggm, study_data, summarize,
                           validate_precision)


def test_study_I_parameter_recipe():
    psi = gen_params_study_I(StudyIConfig(ignorable_truth=False), RngStream(1))
    assert np.all(psi.sigma[:10] == 0.5)  # the ten continuous items
    assert np.all((psi.kappa >= 1.0) & (psi.kappa <= 2.0))
    free = psi.loadings[4:]  # rows past the triangular block are unconstrained
    assert np.all((free >= 0.5) & (free <= 1.5))
    psi0 = gen_params_study_I(StudyIConfig(ignorable_truth=True), RngStream(1))
    assert np.all(psi0.kappa == 0)


def test_study_I_missing_rate_near_seven_percent():
    cfg = StudyIConfig(N=2000, ignorable_truth=True)
    psi = gen_params_study_I(cfg, RngStream(0, stream_id(1)))
    rates = [gen_data_latent(psi, 2000, RngStream(0, stream_id(2, r))).dataset.missing_rate
             for r in range(10)]
    assert 0.04 <= np.mean(rates) <= 0.10


def test_continuous_truth_is_intercept():
    psi = gen_params_study_I(StudyIConfig(), RngStream(2))
    sim = gen_data_latent(psi, 50, RngStream(3))
    for j in range(10):
        assert sim.truth[f"mean[{j}]"] == psi.alpha0[j]


def test_binary_truth_quadrature_matches_monte_carlo():
    rng = np.random.default_rng(4)
    a0, a = 0.7, np.array([1.1, 0.6, 0.9, 1.3])
    mc = expit(a0 + rng.standard_normal((1_000_000, 4)) @ a).mean()
    assert binary_marginal_mean(a0, a) == pytest.approx(mc, abs=1e-3)
    assert binary_marginal_mean(a0, a, nodes=21) == pytest.approx(binary_marginal_mean(a0, a),
                                                                 abs=1e-4)


def test_tables_valid():
    P = validate_precision(GGM_PRECISION)
    assert np.allclose(P, P.T) and np.linalg.eigvalsh(P).min() > 0
    assert np.allclose(ISING_COUPLING, ISING_COUPLING.T)
    assert np.all(np.diag(ISING_COUPLING) == 0)


def test_non_spd_precision_rejected():
    with pytest.raises(ModelError):
        validate_precision(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_ising_enumeration():
    p = ising_probabilities(ISING_COUPLING)
    assert p.shape == (32,) and p.sum() == pytest.approx(1.0)
    states = ising_states()
    # all-zero state has weight exp(0); its probability is 1 / partition function
    Z = np.exp(0.5 * np.einsum("si,ij,sj->s", states, ISING_COUPLING, states)).sum()
    assert p[0] == pytest.approx(1 / Z)


def test_ggm_covariance():
    y = sample_ggm(GGM_PRECISION, 200_000, np.random.default_rng(5))
    assert np.allclose(np.cov(y.T), np.linalg.inv(GGM_PRECISION), atol=0.02)


def test_study_III_data():
    cfg = StudyIIIConfig(N=3000)
    rates = []
    for r in range(5):
        sim = gen_data_study_III(cfg, 3000, RngStream(6, r))
        assert not np.isnan(sim.dataset.y[:, 9]).any()
        rates.append(sim.dataset.missing_rate)
    assert 0.14 <= np.mean(rates) <= 0.20
    truth = graphical_truth(cfg)
    assert all(truth[f"mean[{j}]"] == 0.0 for j in range(5))


def test_study_data_shares_truth_within_family():
    a, spec_a = study_data("II-1", 0, 100, 3)
    b, spec_b = study_data("II-2", 0, 100, 3)
    assert np.array_equal(a.complete, b.complete)
    assert spec_a.ignorable and not spec_b.ignorable
    c, _ = study_data("II-2", 1, 100, 3)
    assert not np.array_equal(a.complete, c.complete)
    with pytest.raises(ModelError):
        study_data("IV", 0, 10, 0)


def test_generators_deterministic():
    a, _ = study_data("III-K4", 2, 50, 9)
    b, _ = study_data("III-K4", 2, 50, 9)
    assert np.array_equal(a.dataset.y, b.dataset.y, equal_nan=True)


def test_summary_arithmetic():
    raw = [dict(replicate=r, estimand="m", truth=1.0, estimate=1.0 + d, se=0.1,
                ci_lo=0.0, ci_hi=1.05 + d, covered=int(d < 0.1))
           for r, d in enumerate([0.0, 0.2, -0.1, 0.05])]
    s = summarize("I-1", raw, [])
    row = s.rows[0]
    assert row["bias"] == pytest.approx(np.mean([0.0, 0.2, -0.1, 0.05]))
    assert row["coverage"] == 0.75 and row["n_replicates"] == 4
    assert s.coverage == 0.75


def test_scales():
    assert SCALES["desk"].M == 10 and SCALES["desk"].N == 2000
    assert SCALES["paper"].N == 5000 and SCALES["paper"].R == 100
    assert set(STUDIES) == {"I-1", "I-2", "II-1", "II-2", "III-K1", "III-K4"}
