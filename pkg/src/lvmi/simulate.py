"""Simulation studies: data generators and the replication driver.

Two families of truths are provided.  The latent family draws data from the
imputation model itself (10 continuous and 10 binary items, four substantive
factors, one missingness factor) with ``kappa`` either zero or positive.  The
graphical family draws five continuous items from a sparse Gaussian graphical
model and five binary items from a sparse Ising model, with missingness of the
first nine items driven by the fully observed tenth.

Studies
-------
``I-1``   latent truth with ignorable missingness, ignorable imputer
``I-2``   latent truth with ignorable missingness, non-ignorable imputer
``II-1``  latent truth with non-ignorable missingness, ignorable imputer
``II-2``  latent truth with non-ignorable missingness, non-ignorable imputer
``III-K1``, ``III-K4``  graphical truth, non-ignorable imputer with K1 = 1 or 4
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit

from .analysis import analyze, builtin_conditional_mean, builtin_mean
from .data import Dataset
from .fit import SAConfig, fit
from .gibbs import sample_responses
from .impute import ImputeConfig, impute
from .model import Kind, ModelError, ModelSpec, Psi
from .samplers import RngStream, stream_id

log = logging.getLogger(__name__)

GGM_PRECISION = np.array([
    [2.92, 0.00, 0.00, -0.46, 2.36],
    [0.00, 0.79, -0.69, 0.00, 0.00],
    [0.00, -0.69, 2.01, -1.22, 0.00],
    [-0.46, 0.00, -1.22, 1.78, 0.00],
    [2.36, 0.00, 0.00, 0.00, 2.46],
])

ISING_COUPLING = np.array([
    [0.00, 0.51, -0.76, 0.61, -0.47],
    [0.51, 0.00, 0.00, 0.00, 0.72],
    [-0.76, 0.00, 0.00, 0.00, 0.97],
    [0.61, 0.00, 0.00, 0.00, 0.00],
    [-0.47, 0.72, 0.97, 0.00, 0.00],
])

STUDIES = ("I-1", "I-2", "II-1", "II-2", "III-K1", "III-K4")

# stream-id tags
_PARAMS, _DATA, _FIT, _IMPUTE = 101, 102, 103, 104


@dataclass(frozen=True)
class StudyIConfig:
    N: int = 5000
    J_C: int = 10
    J_B: int = 10
    K1: int = 4
    K2: int = 1
    ignorable_truth: bool = True

    def spec(self, ignorable: bool | None = None) -> ModelSpec:
        kinds = ["continuous"] * self.J_C + ["binary"] * self.J_B
        ign = self.ignorable_truth if ignorable is None else ignorable
        return ModelSpec.from_kinds(kinds, K1=self.K1, K2=self.K2, ignorable=ign)


@dataclass(frozen=True)
class StudyIIIConfig:
    N: int = 5000
    precision_gaussian: np.ndarray = field(default_factory=lambda: GGM_PRECISION.copy())
    ising_coupling: np.ndarray = field(default_factory=lambda: ISING_COUPLING.copy())
    missing_probs: tuple[float, float] = (0.1, 0.4)  # P(missing | y10 = 1), P(missing | y10 = 0)

    def __post_init__(self):
        object.__setattr__(self, "precision_gaussian", validate_precision(self.precision_gaussian))
        S = np.asarray(self.ising_coupling, dtype=float)
        if not np.allclose(S, S.T) or np.any(np.diag(S) != 0):
            raise ModelError("Ising couplings must be symmetric with zero diagonal")
        object.__setattr__(self, "ising_coupling", S)

    def spec(self, K1: int, K2: int = 1, ignorable: bool = False) -> ModelSpec:
        return ModelSpec.from_kinds(["continuous"] * 5 + ["binary"] * 5, K1=K1, K2=K2,
                                    ignorable=ignorable)


def validate_precision(P) -> np.ndarray:
    """Symmetrize a precision matrix and check it is positive definite."""
    P = np.asarray(P, dtype=float)
    sym = 0.5 * (P + P.T)
    delta = float(np.max(np.abs(sym - P)))
    if delta > 0:
        log.info("precision matrix symmetrized (max change %.3g)", delta)
    if np.linalg.eigvalsh(sym).min() <= 0:
        raise ModelError("precision matrix is not positive definite")
    return sym


@dataclass
class SimData:
    dataset: Dataset
    complete: np.ndarray
    truth: dict  # estimand name -> true value


# ---------------------------------------------------------------------------
# latent-model truth


def gen_params_study_I(cfg: StudyIConfig, rng) -> Psi:
    """True parameters for the latent studies.

    Intercepts N(0, 1), loadings U(0.5, 1.5), residual SDs 0.5 and, for
    non-ignorable truths, kappa U(1, 2).  The nonresponse intercepts are
    drawn from N(-3, 0.5^2) and the nonresponse loadings from U(0.2, 1.2) as
    log-odds of a cell being *missing*, which gives the intended ~7% missing
    rate; since the model parameterizes the log-odds of being observed, both
    are stored with flipped sign.
    """
    gen = rng.generator if isinstance(rng, RngStream) else rng
    spec = cfg.spec()
    J = cfg.J_C + cfg.J_B
    return Psi.from_arrays(
        spec,
        alpha0=gen.standard_normal(J),
        loadings=gen.uniform(0.5, 1.5, (J, cfg.K1)),
        sigma=np.full(J, 0.5),
        gamma0=-gen.normal(-3.0, 0.5, J),
        gamma=-gen.uniform(0.2, 1.2, (J, cfg.K2)),
        kappa=None if cfg.ignorable_truth else gen.uniform(1.0, 2.0, (cfg.K2, cfg.K1)),
    )


def binary_marginal_mean(intercept: float, loading, nodes: int = 80) -> float:
    """E[expit(intercept + loading' eta)] for eta ~ N(0, I) by Gauss-Hermite quadrature."""
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    s = float(np.linalg.norm(loading))
    return float(w @ expit(intercept + s * x) / math.sqrt(2 * math.pi))


def latent_truth(psi: Psi) -> dict:
    truth = {}
    for var in psi.spec.variables:
        j = var.index
        if var.kind is Kind.CONTINUOUS:
            truth[f"mean[{j}]"] = float(psi.alpha0[j])
        elif var.kind is Kind.BINARY:
            truth[f"mean[{j}]"] = binary_marginal_mean(psi.alpha0[j], psi.loadings[j])
        else:
            raise ModelError("latent truths are only defined for continuous and binary items")
    return truth


def gen_data_latent(psi: Psi, N: int, rng) -> SimData:
    """Draw eta, xi, responses and response indicators from the model (no covariates)."""
    gen = rng.generator if isinstance(rng, RngStream) else rng
    spec = psi.spec
    eta = gen.standard_normal((N, spec.K1))
    xi = eta @ psi.kappa.T + gen.standard_normal((N, spec.K2))
    y = sample_responses(psi, eta, gen)
    p_obs = expit(psi.gamma0[None, :] + xi @ psi.gamma.T)
    z = gen.random((N, spec.J)) < p_obs
    return SimData(Dataset(np.where(z, y, np.nan)), y, latent_truth(psi))


# ---------------------------------------------------------------------------
# graphical-model truth


def ising_states(n: int = 5) -> np.ndarray:
    return np.array(list(itertools.product((0, 1), repeat=n)), dtype=float)


def ising_probabilities(S: np.ndarray) -> np.ndarray:
    """Exact state probabilities, ``P(y) ∝ exp(y' S y / 2)`` over {0,1}^n."""
    states = ising_states(S.shape[0])
    logw = 0.5 * np.einsum("si,ij,sj->s", states, S, states)
    w = np.exp(logw - logw.max())
    return w / w.sum()


def sample_ising(S: np.ndarray, N: int, rng) -> np.ndarray:
    gen = rng.generator if isinstance(rng, RngStream) else rng
    states = ising_states(S.shape[0])
    return states[gen.choice(states.shape[0], size=N, p=ising_probabilities(S))]


def sample_ggm(precision: np.ndarray, N: int, rng) -> np.ndarray:
    """Zero-mean Gaussian rows with the given precision matrix."""
    gen = rng.generator if isinstance(rng, RngStream) else rng
    L = np.linalg.cholesky(precision)
    eps = gen.standard_normal((precision.shape[0], N))
    return solve_triangular(L.T, eps, lower=False).T


def graphical_truth(cfg: StudyIIIConfig) -> dict:
    truth = {f"mean[{j}]": 0.0 for j in range(5)}
    states = ising_states(5)
    marg = ising_probabilities(cfg.ising_coupling) @ states
    for k in range(5):
        truth[f"mean[{5 + k}]"] = float(marg[k])
    return truth


def gen_data_study_III(cfg: StudyIIIConfig, N: int, rng) -> SimData:
    gen = rng.generator if isinstance(rng, RngStream) else rng
    y = np.hstack([sample_ggm(cfg.precision_gaussian, N, gen),
                   sample_ising(cfg.ising_coupling, N, gen)])
    p_miss = np.where(y[:, 9] == 1, cfg.missing_probs[0], cfg.missing_probs[1])
    missing = gen.random((N, 10)) < p_miss[:, None]
    missing[:, 9] = False
    return SimData(Dataset(np.where(missing, np.nan, y)), y, graphical_truth(cfg))


# ---------------------------------------------------------------------------
# replication driver


@dataclass(frozen=True)
class Scale:
    N: int
    R: int
    T_fit: int
    T0_fit: int
    T_imp: int
    T0_imp: int
    k: int

    @property
    def M(self) -> int:
        return (self.T_imp - self.T0_imp) // self.k


SCALES = {
    "desk": Scale(N=2000, R=20, T_fit=1500, T0_fit=500, T_imp=1500, T0_imp=500, k=100),
    "paper": Scale(N=5000, R=100, T_fit=3000, T0_fit=1000, T_imp=3000, T0_imp=1000, k=100),
}


@dataclass
class ReplicationSummary:
    study: str
    rows: list[dict]        # one per estimand
    raw: list[dict]         # one per (replicate, estimand)
    failures: list[tuple[int, str]]

    @property
    def coverage(self) -> float:
        covered = [r["covered"] for r in self.raw]
        return float(np.mean(covered)) if covered else float("nan")

    @property
    def max_abs_bias(self) -> float:
        return max(abs(r["bias"]) for r in self.rows)


RAW_COLUMNS = ["replicate", "estimand", "truth", "estimate", "se", "ci_lo", "ci_hi", "covered"]
SUMMARY_COLUMNS = ["estimand", "truth", "mean_estimate", "bias", "emp_sd", "mc_se", "mean_se",
                   "coverage", "n_replicates"]


def study_data(study: str, replicate: int, N: int, seed: int) -> tuple[SimData, ModelSpec]:
    """Data for one replicate and the imputation model the study fits to it.

    Studies sharing a truth (I-1/I-2, II-1/II-2, III-K1/III-K4) see identical
    data for the same replicate and seed.
    """
    if study not in STUDIES:
        raise ModelError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    family = study.split("-")[0]
    fam_id = {"I": 1, "II": 2, "III": 3}[family]
    data_rng = RngStream(seed, stream_id(_DATA, fam_id, replicate))
    if family in ("I", "II"):
        cfg = StudyIConfig(N=N, ignorable_truth=(family == "I"))
        psi = gen_params_study_I(cfg, RngStream(seed, stream_id(_PARAMS, fam_id)))
        sim = gen_data_latent(psi, N, data_rng)
        return sim, cfg.spec(ignorable=study.endswith("-1"))
    cfg = StudyIIIConfig(N=N)
    sim = gen_data_study_III(cfg, N, data_rng)
    return sim, cfg.spec(K1=1 if study == "III-K1" else 4)


def run_one(study: str, replicate: int, scale: Scale, seed: int,
            conditional: bool = False) -> list[dict]:
    """Generate, fit, impute and analyze one replicate; returns raw rows."""
    sim, spec = study_data(study, replicate, scale.N, seed)
    sa = SAConfig(T=scale.T_fit, T0=scale.T0_fit, seed=stream_id(seed, _FIT, replicate))
    psi_hat = fit(sim.dataset, spec, sa).psi_hat
    ic = ImputeConfig(T=scale.T_imp, T0=scale.T0_imp, k=scale.k,
                      seed=stream_id(seed, _IMPUTE, replicate))
    imp = impute(sim.dataset, psi_hat, ic)
    J = spec.J
    models = [(builtin_mean(range(J)), sim.truth)]
    if conditional:
        last = J - 1
        others = [j for j in range(J) if j != last]
        for v in (0.0, 1.0):
            ef = builtin_conditional_mean(last, v, others, spec.kinds)
            by_index = conditional_truth(study, last, v, others, seed)
            models.append((ef, {n: by_index[j] for n, j in zip(ef.names, others)}))
    rows = []
    for ef, truth in models:
        res = analyze(imp, ef)
        for name, est, se, lo, hi in zip(res.names, res.theta_hat, res.se, res.ci_lower,
                                         res.ci_upper):
            t = truth[name]
            rows.append(dict(replicate=replicate, estimand=name, truth=float(t),
                             estimate=float(est), se=float(se), ci_lo=float(lo),
                             ci_hi=float(hi), covered=int(lo <= t <= hi)))
    return rows


def latent_conditional_truth(psi: Psi, given: int, value: float, others, nodes: int = 60) -> dict:
    """E[y_j | y_given = value] under a latent truth, by Gauss-Hermite quadrature.

    With ``a`` the unit vector along the conditioning item's loadings, write
    ``eta = a u + r`` with ``u ~ N(0, 1)`` independent of ``r``; each item
    then depends on ``r`` only through a scalar normal.
    """
    x, w = np.polynomial.hermite_e.hermegauss(nodes)
    w = w / w.sum()
    lg = psi.loadings[given]
    a = lg / np.linalg.norm(lg)
    p1 = expit(psi.alpha0[given] + np.linalg.norm(lg) * x)
    pv = p1 if value == 1 else 1.0 - p1
    post = w * pv / (w @ pv)  # weights of u given the conditioning value
    out = {}
    for j in others:
        c = float(psi.loadings[j] @ a)
        rest = math.sqrt(max(float(psi.loadings[j] @ psi.loadings[j]) - c * c, 0.0))
        if psi.spec.variables[j].kind is Kind.CONTINUOUS:
            out[j] = float(psi.alpha0[j] + c * (post @ x))
        else:
            inner = expit(psi.alpha0[j] + c * x[:, None] + rest * x[None, :]) @ w
            out[j] = float(post @ inner)
    return out


def conditional_truth(study, given, value, others, seed) -> dict:
    """True conditional means given the last (binary) item, keyed by item index."""
    family = study.split("-")[0]
    if family == "III":
        cfg = StudyIIIConfig()
        states = ising_states(5)
        p = ising_probabilities(cfg.ising_coupling)
        sel = states[:, 4] == value
        cond = (p[sel] @ states[sel]) / p[sel].sum()
        # continuous and binary blocks are independent
        return {j: 0.0 if j < 5 else float(cond[j - 5]) for j in others}
    fam_id = {"I": 1, "II": 2}[family]
    cfg = StudyIConfig(ignorable_truth=(family == "I"))
    psi = gen_params_study_I(cfg, RngStream(seed, stream_id(_PARAMS, fam_id)))
    return latent_conditional_truth(psi, given, value, others)


def _run_one_safe(args):
    study, r, scale, seed, conditional = args
    try:
        return r, run_one(study, r, scale, seed, conditional), None
    except Exception as e:  # noqa: BLE001 -- failures are reported per replicate
        log.warning("replicate %d failed: %s", r, e)
        return r, [], f"{type(e).__name__}: {e}"


def summarize(study: str, raw: list[dict], failures) -> ReplicationSummary:
    rows = []
    names = list(dict.fromkeys(r["estimand"] for r in raw))
    for name in names:
        sub = [r for r in raw if r["estimand"] == name]
        est = np.array([r["estimate"] for r in sub])
        R = est.size
        sd = float(est.std(ddof=1)) if R > 1 else float("nan")
        truth = sub[0]["truth"]
        rows.append(dict(
            estimand=name, truth=truth, mean_estimate=float(est.mean()),
            bias=float(est.mean() - truth), emp_sd=sd,
            mc_se=sd / math.sqrt(R) if R > 1 else float("nan"),
            mean_se=float(np.mean([r["se"] for r in sub])),
            coverage=float(np.mean([r["covered"] for r in sub])), n_replicates=R,
        ))
    return ReplicationSummary(study, rows, raw, list(failures))


def run_replication(study: str, R: int | None = None, scale: Scale | str = "desk",
                    seed: int = 0, workers: int = 1, conditional: bool = False,
                    **overrides) -> ReplicationSummary:
    """Run ``R`` replicates of a study and aggregate bias, SE calibration and coverage.

    ``overrides`` replace fields of the scale (``N``, ``T_fit`` and so on).
    Replicates run in separate processes when ``workers > 1``; results do
    not depend on the worker count.
    """
    if isinstance(scale, str):
        scale = SCALES[scale]
    if R is not None:
        overrides["R"] = R
    scale = replace(scale, **overrides)
    if scale.R < 1:
        raise ModelError("need at least one replicate")
    if study not in STUDIES:
        raise ModelError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    jobs = [(study, r, scale, seed, conditional) for r in range(scale.R)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_one_safe, jobs))
    else:
        results = [_run_one_safe(j) for j in jobs]
    results.sort(key=lambda t: t[0])
    raw = [row for _, rows, _ in results for row in rows]
    failures = [(r, err) for r, _, err in results if err]
    return summarize(study, raw, failures)
