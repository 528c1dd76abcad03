"""Stochastic-approximation maximum likelihood with trajectory averaging.

Each iteration runs one Gibbs sweep for every unit under the current
parameters, then takes a Robbins-Monro step along the average complete-data
score on the unconstrained scale (log sigma, first threshold plus log gaps).
The estimate is the average of the iterates after burn-in.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logit

from .data import Dataset, initial_fill, validate
from .gibbs import SweepPlan, block_slices, init_chain, sweep_chain
from .model import (Kind, ModelError, ModelSpec, Psi, apply_constraints, complete_score,
                    from_internal, internal_gradient, to_internal)
from .samplers import RngStream, _gen, stream_id

log = logging.getLogger(__name__)

PHASE_INIT = 1
PHASE_FIT = 2
PHASE_IMPUTE = 3


class NumericError(ArithmeticError):
    """A non-finite quantity appeared during fitting or imputation."""


@dataclass(frozen=True)
class SAConfig:
    T: int = 3000
    T0: int = 1000
    A: float = 3.0
    c: float = 0.51
    seed: int = 0
    block_size: int = 1024
    workers: int = 1
    keep_trace: bool = False
    gradient: str = "mean"  # "mean" of unit scores, or their "sum"
    clip: float | None = 10.0  # update norm bound, times sqrt(dim); None disables

    def __post_init__(self):
        if not 0 < self.T0 < self.T:
            raise ModelError(f"need 0 < T0 < T, got T0={self.T0}, T={self.T}")
        if not 0.5 < self.c <= 1:
            raise ModelError(f"step exponent c must lie in (0.5, 1], got {self.c}")
        if self.A <= 0:
            raise ModelError("step scale A must be positive")
        if self.gradient not in ("sum", "mean"):
            raise ModelError(f"gradient must be 'sum' or 'mean', got {self.gradient!r}")
        if self.block_size < 1 or self.workers < 1:
            raise ModelError("block_size and workers must be >= 1")


@dataclass
class FitResult:
    psi_hat: Psi
    diagnostics: dict
    trace: np.ndarray | None = field(default=None, repr=False)
    config: SAConfig | None = None

    def write_trace(self, path) -> None:
        if self.trace is None:
            raise ValueError("fit was run without keep_trace")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", *self.psi_hat.spec.layout.names])
            for t, row in enumerate(self.trace, start=1):
                w.writerow([t, *(repr(float(v)) for v in row)])


def step_size(t: int, cfg: SAConfig) -> float:
    """Robbins-Monro gain ``A * t**(-c)``."""
    if t < 1:
        raise ValueError("iteration index starts at 1")
    return cfg.A * float(t) ** (-cfg.c)


def init_psi(dataset: Dataset, spec: ModelSpec, rng) -> Psi:
    """Starting parameters from observed marginals plus small random loadings."""
    gen = _gen(rng)
    J, K1, K2, p = spec.J, spec.K1, spec.K2, spec.p
    alpha0 = np.zeros(J)
    sigma = np.ones(J)
    thresholds = {}
    for var in spec.variables:
        j = var.index
        obs = dataset.y[:, j]
        obs = obs[~np.isnan(obs)]
        if var.kind is Kind.CONTINUOUS:
            alpha0[j] = obs.mean()
            sigma[j] = max(obs.std(), 1e-3)
        elif var.kind is Kind.BINARY:
            alpha0[j] = np.clip(logit(np.clip(obs.mean(), 1e-12, 1 - 1e-12)), -3.0, 3.0)
        else:
            # P(y >= k) = F(-tau_k) at eta = 0, so tau_k = -logit of the exceedance rate
            exceed = np.array([(obs >= k).mean() for k in range(1, var.n_categories)])
            tau = -logit(np.clip(exceed, 1e-3, 1 - 1e-3))
            tau = np.maximum.accumulate(tau + 1e-3 * np.arange(tau.size))
            thresholds[j] = tau
    loadings = gen.uniform(-0.5, 0.5, (J, K1))
    gamma0 = np.zeros(J)
    if K2:
        rate = np.clip((~np.isnan(dataset.y)).mean(axis=0), 1e-3, 1 - 1e-3)
        gamma0 = logit(rate)
    arrays = dict(
        alpha0=alpha0, loadings=loadings, sigma=sigma, thresholds=thresholds, gamma0=gamma0,
        gamma=gen.uniform(-0.1, 0.1, (J, K2)), beta=gen.uniform(-0.1, 0.1, (K1, p)),
        zeta=gen.uniform(-0.1, 0.1, (K2, p)), kappa=gen.uniform(-0.1, 0.1, (K2, K1)),
    )
    return apply_constraints(arrays, spec)


def _block_names(spec: ModelSpec) -> dict[str, np.ndarray]:
    lay = spec.layout
    size = lay.size

    def live(a):
        a = np.asarray(a).reshape(-1)
        return np.unique(a[a < size])

    blocks = {
        "intercept": live(lay.intercept),
        "thresholds": live(np.concatenate([np.zeros(0, int), *lay.thresholds.values()])),
        "loadings": live(lay.loadings),
        "sigma": live(lay.sigma),
        "gamma0": live(lay.gamma0),
        "gamma": live(lay.gamma),
        "beta": live(lay.beta),
        "zeta": live(lay.zeta),
        "kappa": live(lay.kappa),
    }
    return {k: v for k, v in blocks.items() if v.size}


def _offending_block(spec: ModelSpec, bad: np.ndarray) -> str:
    names = [k for k, idx in _block_names(spec).items() if np.any(bad[idx])]
    return ", ".join(names) or "unknown"


class ChainPool:
    """Per-block chains with their own RNG streams; sweeps may run on threads."""

    def __init__(self, dataset: Dataset, spec: ModelSpec, psi: Psi, seed: int, phase: int,
                 block_size: int, workers: int):
        fill = initial_fill(dataset, spec)
        self.slices = block_slices(dataset.N, block_size)
        self.chains = [init_chain(dataset, spec, psi, s, fill) for s in self.slices]
        self.streams = [RngStream(seed, stream_id(phase, b)) for b in range(len(self.slices))]
        self.plan = SweepPlan.for_spec(spec)
        self.workers = workers
        self._executor = ThreadPoolExecutor(workers) if workers > 1 else None

    def map(self, fn):
        """Apply ``fn(chain, stream)`` to every block; results come back in block order."""
        if self._executor is None:
            return [fn(c, s) for c, s in zip(self.chains, self.streams)]
        return list(self._executor.map(fn, self.chains, self.streams))

    def sweep(self, psi: Psi, after=None):
        def one(chain, stream):
            sweep_chain(chain, psi, self.plan, stream)
            return None if after is None else after(chain)
        return self.map(one)

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def fit(dataset: Dataset, spec: ModelSpec, cfg: SAConfig = SAConfig(),
        psi0: Psi | None = None, callback=None) -> FitResult:
    """Estimate the imputation-model parameters.

    Parameters
    ----------
    dataset, spec
        Data and model; the data are validated against the model first.
    cfg
        Iteration counts, gain sequence and seed.
    psi0
        Starting values; drawn by :func:`init_psi` when omitted.
    callback
        Optional ``callback(t, psi)`` invoked after every update.
    """
    validate(dataset, spec)
    if psi0 is None:
        psi0 = init_psi(dataset, spec, RngStream(cfg.seed, stream_id(PHASE_INIT)))
    D = spec.layout.size
    theta = to_internal(spec, psi0.values)
    psi = psi0
    clip = None if cfg.clip is None else cfg.clip * np.sqrt(D)
    n_avg = cfg.T - cfg.T0
    avg = np.zeros(D)
    trace = np.empty((cfg.T, D)) if cfg.keep_trace else None
    tail = min(500, cfg.T)
    recent = np.empty((tail, D))
    clipped = 0
    clipped_after_burnin = 0

    with ChainPool(dataset, spec, psi, cfg.seed, PHASE_FIT, cfg.block_size, cfg.workers) as pool:
        for t in range(1, cfg.T + 1):
            parts = pool.sweep(psi, after=lambda ch, psi=psi: complete_score(psi, ch.unit).sum(axis=0))
            grad = np.zeros(D)
            for g in parts:
                grad += g
            if cfg.gradient == "mean":
                grad /= dataset.N
            g_int = internal_gradient(spec, psi.values, grad)
            if not np.all(np.isfinite(g_int)):
                raise NumericError(
                    f"non-finite gradient at iteration {t} in block(s) "
                    f"{_offending_block(spec, ~np.isfinite(g_int))}"
                )
            update = step_size(t, cfg) * g_int
            norm = float(np.linalg.norm(update))
            if clip is not None and norm > clip:
                update *= clip / norm
                clipped += 1
                clipped_after_burnin += t > cfg.T0
            theta = theta + update
            values = from_internal(spec, theta)
            if not np.all(np.isfinite(values)):
                raise NumericError(
                    f"non-finite parameters at iteration {t} in block(s) "
                    f"{_offending_block(spec, ~np.isfinite(values))}"
                )
            psi = Psi(spec, values)
            if t > cfg.T0:
                avg += theta / n_avg
            if trace is not None:
                trace[t - 1] = values
            recent[(t - 1) % tail] = values
            if callback is not None:
                callback(t, psi)

    psi_hat = Psi(spec, from_internal(spec, avg))
    # restore chronological order of the last window
    start = cfg.T % tail
    recent = np.roll(recent, -start, axis=0)
    half = tail // 2
    diagnostics = {
        "iterations": cfg.T,
        "burnin": cfg.T0,
        "clip_threshold": clip,
        "clipped_updates": clipped,
        "clipped_after_burnin": int(clipped_after_burnin),
        "blocks": {},
    }
    for name, idx in _block_names(spec).items():
        w = recent[:, idx]
        diagnostics["blocks"][name] = {
            "trace_mean": float(w.mean()),
            "half_window_drift": float(np.max(np.abs(w[half:].mean(0) - w[:half].mean(0)))),
        }
    log.info("fit finished: %d updates clipped (%d after burn-in)", clipped, clipped_after_burnin)
    return FitResult(psi_hat, diagnostics, trace, cfg)
