"""Model choice: BIC over factor dimensions and the likelihood-ratio test of kappa = 0.

Both rest on a Monte Carlo estimate of the observed-data log-likelihood
``log f(y_obs, z | x)``.  Missing responses drop out exactly (each measurement
density integrates to one).  With the default ``"conditional"`` proposal,
observed continuous items are integrated analytically and the remaining
binary, ordinal and response-indicator terms are averaged over draws of
``eta`` from its Gaussian posterior given the continuous items and of ``xi``
from its prior given ``eta``.  The ``"prior"`` proposal draws both latent
vectors from their prior and averages every observed term.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from .data import Dataset, validate
from .fit import SAConfig, fit
from .model import (LOG_2PI, Kind, ModelError, ModelSpec, Psi, apply_constraints,
                    measurement_logprob, missingness_logprob)
from .samplers import RngStream, stream_id

log = logging.getLogger(__name__)

_LOGLIK = 201
_SELECT = 202
_LR = 203


def count_free_params(spec: ModelSpec) -> int:
    """Number of free parameters (intercepts or thresholds, unconstrained
    loadings, residual SDs, nonresponse parameters, beta, zeta and kappa)."""
    return spec.layout.size


PROPOSALS = ("conditional", "prior")


def _unit_chunk(psi: Psi, y, z, x, S: int, gen, proposal: str = "conditional"):
    """Per-unit log-likelihood and delta-method variance for a chunk of units."""
    spec = psi.spec
    n = y.shape[0]
    K1, K2 = spec.K1, spec.K2
    if proposal == "conditional":
        cont = spec.indices(Kind.CONTINUOUS)
        other = [v for v in spec.variables if v.kind is not Kind.CONTINUOUS]
    else:
        cont = np.zeros(0, int)
        other = list(spec.variables)

    mu0 = x @ psi.beta.T  # prior mean of eta, (n, K1)
    P = np.broadcast_to(np.eye(K1), (n, K1, K1)).copy()
    h = mu0.copy()
    exact = np.zeros(n)
    if cont.size:
        A = psi.loadings[cont]
        s = psi.sigma[cont]
        obs = z[:, cont]
        prec = obs / s**2
        r = np.where(obs > 0, y[:, cont] - psi.alpha0[cont], 0.0)
        P += np.einsum("nj,jk,jl->nkl", prec, A, A)
        h += (r * prec) @ A
        L = np.linalg.cholesky(P)
        m = np.linalg.solve(P, h[..., None])[..., 0]
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        n_obs = obs.sum(axis=1)
        exact = (-0.5 * n_obs * LOG_2PI - (obs * np.log(s)).sum(axis=1) - 0.5 * logdet
                 - 0.5 * ((r**2 * prec).sum(axis=1) + (mu0**2).sum(axis=1) - (h * m).sum(axis=1)))
    else:
        L = np.linalg.cholesky(P)
        m = mu0
    eps = gen.standard_normal((n, S, K1))
    # eta = m + L^-T eps
    LT_inv = np.linalg.inv(np.swapaxes(L, 1, 2))
    eta = m[:, None, :] + np.einsum("nkl,nsl->nsk", LT_inv, eps)
    logw = np.zeros((n, S))
    for var in other:
        j = var.index
        seen = z[:, j] > 0
        if not seen.any():
            continue
        yj = np.where(seen, y[:, j], 0.0)
        lp = measurement_logprob(var, psi.measurement(j), np.repeat(yj[:, None], S, axis=1), eta)
        logw += np.where(seen[:, None], lp, 0.0)
    if K2:
        xi = (x @ psi.zeta.T)[:, None, :] + eta @ psi.kappa.T + gen.standard_normal((n, S, K2))
        for j in range(spec.J):
            logw += missingness_logprob(psi.missingness(j), z[:, j][:, None], xi)
    lse = logsumexp(logw, axis=1)
    if np.any(~np.isfinite(lse)):
        bad = int(np.flatnonzero(~np.isfinite(lse))[0])
        raise FloatingPointError(f"all importance weights underflow for unit {bad} of the chunk")
    est = exact + lse - math.log(S)
    wn = np.exp(logw - lse[:, None])  # normalized weights, sum to one per unit
    # var(log mean w) ~ var(w) / (S mean(w)^2) = (S sum wn^2 - 1) / S
    var = np.maximum(S * (wn**2).sum(axis=1) - 1.0, 0.0) / S
    return est, var


def estimate_observed_loglik(dataset: Dataset, psi: Psi, S: int = 5000, seed: int = 0,
                             proposal: str = "conditional", chunk: int = 32
                             ) -> tuple[float, float]:
    """Monte Carlo observed-data log-likelihood and its standard error.

    Parameters
    ----------
    dataset, psi
        Data and fitted parameters.
    S
        Importance draws per unit (at least 1000).
    seed
        Draws use streams keyed by ``(seed, chunk index)``, so two models
        evaluated with the same ``seed`` and ``S`` share random numbers.
    proposal
        ``"conditional"`` (continuous items integrated exactly) or ``"prior"``.

    Returns
    -------
    (value, se)
        The summed per-unit log estimates and a delta-method standard error.
    """
    if S < 1000:
        raise ModelError(f"need S >= 1000 importance draws, got {S}")
    if proposal not in PROPOSALS:
        raise ModelError(f"proposal must be one of {PROPOSALS}, got {proposal!r}")
    validate(dataset, psi.spec)
    z = (~np.isnan(dataset.y)).astype(float)
    y = np.nan_to_num(dataset.y)
    total, var = 0.0, 0.0
    for c, start in enumerate(range(0, dataset.N, chunk)):
        sl = slice(start, min(start + chunk, dataset.N))
        gen = RngStream(seed, stream_id(_LOGLIK, c)).generator
        try:
            est, v = _unit_chunk(psi, y[sl], z[sl], dataset.x[sl], S, gen, proposal)
        except FloatingPointError as e:
            raise ModelError(f"{e} (units start at {start})") from None
        total += est.sum()
        var += v.sum()
    return float(total), float(math.sqrt(var))


@dataclass
class BicRow:
    K1: int
    K2: int
    loglik: float = float("nan")
    se: float = float("nan")
    nparams: int = 0
    bic: float = float("nan")
    error: str = ""

    def as_dict(self) -> dict:
        return dict(K1=self.K1, K2=self.K2, loglik=self.loglik, se=self.se,
                    nparams=self.nparams, bic=self.bic, error=self.error)


def bic(loglik: float, nparams: int, N: int) -> float:
    return -2.0 * loglik + math.log(N) * nparams


def select_dimensions(dataset: Dataset, spec: ModelSpec, grid, sa_cfg: SAConfig = SAConfig(),
                      S: int = 5000, seed: int = 0, ignorable: bool | None = None
                      ) -> tuple[list[BicRow], BicRow | None]:
    """Fit every ``(K1, K2)`` in ``grid`` and rank by BIC.

    ``spec`` supplies the variables; its ``ignorable`` flag applies to cells
    with ``K2 >= 1`` unless ``ignorable`` is given.  Cells with ``K2 = 0`` and
    ``K2 >= 1`` cannot share a grid.  Returns the table sorted
    by BIC (failed cells last) and the best row, ties going to the smaller
    ``K1 + K2`` and then the smaller ``K1``.
    """
    grid = [tuple(int(v) for v in g) for g in grid]
    if not grid:
        raise ModelError("the dimension grid is empty")
    if len({K2 == 0 for _, K2 in grid}) > 1:
        # K2 = 0 drops the response indicators from the likelihood, so its
        # log-likelihood is of y_obs alone and not comparable with K2 >= 1
        raise ModelError("the grid mixes K2 = 0 (no missingness model) with K2 >= 1; their "
                         "likelihoods are of different data, so compare them separately")
    ign = spec.ignorable if ignorable is None else ignorable
    rows = []
    for K1, K2 in grid:
        row = BicRow(K1, K2)
        try:
            cell = spec.with_dims(K1=K1, K2=K2, ignorable=ign or K2 == 0)
            row.nparams = count_free_params(cell)
            cfg = SAConfig(**{**sa_cfg.__dict__, "seed": stream_id(sa_cfg.seed, _SELECT, K1, K2)})
            psi = fit(dataset, cell, cfg).psi_hat
            row.loglik, row.se = estimate_observed_loglik(dataset, psi, S, seed)
            row.bic = bic(row.loglik, row.nparams, dataset.N)
        except (ModelError, ArithmeticError, np.linalg.LinAlgError) as e:
            row.error = f"{type(e).__name__}: {e}"
            log.warning("grid cell (%d, %d) failed: %s", K1, K2, e)
        rows.append(row)
    ok = [r for r in rows if not r.error]
    key = lambda r: (r.bic, r.K1 + r.K2, r.K1)  # noqa: E731
    best = min(ok, key=key) if ok else None
    table = sorted(ok, key=key) + [r for r in rows if r.error]
    return table, best


@dataclass
class LRTest:
    stat: float
    df: int
    p_value: float
    loglik_full: float
    loglik_null: float
    se_full: float
    se_null: float
    suspicious: bool = False  # negative beyond Monte Carlo noise
    psi_full: Psi | None = field(default=None, repr=False)
    psi_null: Psi | None = field(default=None, repr=False)


def lr_test_from_fits(dataset: Dataset, psi_full: Psi, psi_null: Psi, S: int = 5000,
                      seed: int = 0) -> LRTest:
    """LR statistic for two already fitted models, with common random numbers."""
    if psi_full.spec.ignorable or not psi_null.spec.ignorable:
        raise ModelError("need a non-ignorable full model and an ignorable null model")
    l1, s1 = estimate_observed_loglik(dataset, psi_full, S, seed)
    l0, s0 = estimate_observed_loglik(dataset, psi_null, S, seed)
    stat = 2.0 * (l1 - l0)
    df = psi_full.spec.K1 * psi_full.spec.K2
    combined = 2.0 * math.hypot(s1, s0)
    suspicious = stat < -3.0 * combined
    if suspicious:
        log.warning("LR statistic %.3f is negative beyond Monte Carlo noise (SE %.3f)", stat,
                    combined)
    return LRTest(stat, df, float(chi2.sf(max(stat, 0.0), df)), l1, l0, s1, s0, suspicious,
                  psi_full, psi_null)


def lr_test_ignorability(dataset: Dataset, spec: ModelSpec, K1: int, K2: int,
                         sa_cfg: SAConfig = SAConfig(), S: int = 5000, seed: int = 0,
                         warm_start: bool = True) -> LRTest:
    """Fit the model with and without kappa and compare observed log-likelihoods.

    The statistic is referred to chi-square with ``K1 * K2`` degrees of freedom.

    With ``warm_start`` a pilot fit of the null model is run first, and both
    models are then fitted from it (kappa starting at zero) with the same
    seed.  The two fits get the same iteration budget and share their Monte
    Carlo noise, so optimization error largely cancels in the difference of
    log-likelihoods.  Without it the two models are fitted independently
    from default starting values.
    """
    if K2 < 1:
        raise ModelError("the ignorability test needs K2 >= 1")
    full = spec.with_dims(K1=K1, K2=K2, ignorable=False)
    null = spec.with_dims(K1=K1, K2=K2, ignorable=True)
    if not warm_start:
        psi_full = fit(dataset, full, sa_cfg).psi_hat
        psi_null = fit(dataset, null, sa_cfg).psi_hat
        return lr_test_from_fits(dataset, psi_full, psi_null, S, seed)
    pilot = fit(dataset, null, sa_cfg).psi_hat
    cont = SAConfig(**{**sa_cfg.__dict__, "seed": stream_id(sa_cfg.seed, _LR)})
    psi_null = fit(dataset, null, cont, psi0=pilot).psi_hat
    psi_full = fit(dataset, full, cont, psi0=apply_constraints(pilot, full)).psi_hat
    return lr_test_from_fits(dataset, psi_full, psi_null, S, seed)
