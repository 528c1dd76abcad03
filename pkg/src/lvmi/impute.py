"""MCMC multiple imputation at fixed parameters.

Runs the per-unit Gibbs chains at ``psi_hat``, keeps every ``k``-th state
after burn-in as an imputed dataset, and accumulates what the variance
estimator needs: complete-data scores at the retained states, the per-unit
posterior mean score and Louis's observed information.
"""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, validate
from .fit import PHASE_IMPUTE, ChainPool, NumericError
from .model import ModelError, Psi, score_and_hessian_sum

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class ImputeConfig:
    T: int = 3000
    T0: int = 1000
    k: int = 100
    seed: int = 0
    block_size: int = 1024
    workers: int = 1

    def __post_init__(self):
        if not 0 <= self.T0 < self.T:
            raise ModelError(f"need 0 <= T0 < T, got T0={self.T0}, T={self.T}")
        if self.k < 1 or (self.T - self.T0) % self.k:
            raise ModelError(f"T - T0 = {self.T - self.T0} must be a multiple of k = {self.k}")
        if self.M < 2:
            raise ModelError(f"need at least 2 imputations, got M = {self.M}")

    @property
    def M(self) -> int:
        return (self.T - self.T0) // self.k


@dataclass(eq=False)
class ImputationOutput:
    """Imputed datasets and the per-unit score quantities.

    Attributes
    ----------
    datasets : (M, N, J) completed response matrices
    eta, xi : (M, N, K1) and (M, N, K2) latent states at the retained iterations
    scores_m : (M, N, D) complete-data scores at the retained iterations
    s_bar_obs : (N, D) posterior mean score of each unit over t > T0
    i_obs : (D, D) Louis estimate of the per-unit observed information
    """

    psi_hat: Psi
    datasets: np.ndarray
    eta: np.ndarray
    xi: np.ndarray
    scores_m: np.ndarray
    s_bar_obs: np.ndarray
    i_obs: np.ndarray
    mask: np.ndarray  # True where observed
    x: np.ndarray
    weights: np.ndarray
    columns: tuple[str, ...]
    config: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return self.datasets.shape[0]

    @property
    def N(self) -> int:
        return self.datasets.shape[1]

    # -- persistence ---------------------------------------------------------

    def write_csvs(self, directory, prefix: str = "imputed") -> list[Path]:
        """One CSV per imputation plus ``mask.csv`` (1 = observed)."""
        from .io import write_matrix_csv

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = []
        for m in range(self.M):
            path = directory / f"{prefix}_{m + 1}.csv"
            write_matrix_csv(path, self.columns, self.datasets[m])
            paths.append(path)
        write_matrix_csv(directory / "mask.csv", self.columns, self.mask.astype(int), integer=True)
        return paths

    def to_json(self) -> dict:
        from .io import spec_to_dict

        return {
            "schema": "lvmi.imputation",
            "schema_version": SCHEMA_VERSION,
            "spec": spec_to_dict(self.psi_hat.spec),
            "columns": list(self.columns),
            "psi_hat": _pack(self.psi_hat.values),
            "datasets": _pack(self.datasets),
            "eta": _pack(self.eta),
            "xi": _pack(self.xi),
            "scores_m": _pack(self.scores_m),
            "s_bar_obs": _pack(self.s_bar_obs),
            "i_obs": _pack(self.i_obs),
            "mask": _pack(self.mask.astype(float)),
            "x": _pack(self.x),
            "weights": _pack(self.weights),
            "config": self.config,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path) -> "ImputationOutput":
        from .io import spec_from_dict

        doc = json.loads(Path(path).read_text())
        if doc.get("schema") != "lvmi.imputation":
            raise ModelError(f"{path} is not an imputation container")
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ModelError(
                f"unsupported container version {doc.get('schema_version')} "
                f"(expected {SCHEMA_VERSION})"
            )
        spec = spec_from_dict(doc["spec"])
        return cls(
            psi_hat=Psi(spec, _unpack(doc["psi_hat"])),
            datasets=_unpack(doc["datasets"]),
            eta=_unpack(doc["eta"]),
            xi=_unpack(doc["xi"]),
            scores_m=_unpack(doc["scores_m"]),
            s_bar_obs=_unpack(doc["s_bar_obs"]),
            i_obs=_unpack(doc["i_obs"]),
            mask=_unpack(doc["mask"]).astype(bool),
            x=_unpack(doc["x"]),
            weights=_unpack(doc["weights"]),
            columns=tuple(doc["columns"]),
            config=doc.get("config", {}),
        )


def _pack(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"dtype": "float64-le", "shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _unpack(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).copy()


def louis_information(sum_s: np.ndarray, sum_h_plus_ss: np.ndarray, n_draws: int) -> np.ndarray:
    """Louis's observed information from accumulated per-unit score sums.

    Parameters
    ----------
    sum_s : (N, D)
        Per-unit sums of complete-data scores over the retained draws.
    sum_h_plus_ss : (D, D)
        Sum over draws and units of ``H_i + S_i S_i'``.
    n_draws : int
        Number of draws accumulated.
    """
    N = sum_s.shape[0]
    s_bar = sum_s / n_draws
    info = (s_bar.T @ s_bar - sum_h_plus_ss / n_draws) / N
    return 0.5 * (info + info.T)


def impute(dataset: Dataset, psi_hat: Psi, cfg: ImputeConfig = ImputeConfig()) -> ImputationOutput:
    """Generate ``M = (T - T0) / k`` imputed datasets at fixed ``psi_hat``."""
    spec = psi_hat.spec
    validate(dataset, spec)
    N, J, D, M = dataset.N, spec.J, spec.layout.size, cfg.M
    datasets = np.empty((M, N, J))
    eta = np.empty((M, N, spec.K1))
    xi = np.empty((M, N, spec.K2))
    scores_m = np.empty((M, N, D))
    sum_s = np.zeros((N, D))
    sum_hss = np.zeros((D, D))
    n_draws = cfg.T - cfg.T0

    with ChainPool(dataset, spec, psi_hat, cfg.seed, PHASE_IMPUTE, cfg.block_size,
                   cfg.workers) as pool:
        for t in range(1, cfg.T + 1):
            if t <= cfg.T0:
                pool.sweep(psi_hat)
                continue

            def moments(chain):
                S, Hsum = score_and_hessian_sum(psi_hat, chain.unit)
                return S, Hsum + S.T @ S

            parts = pool.sweep(psi_hat, after=moments)
            for sl, (S, hss) in zip(pool.slices, parts):
                sum_s[sl] += S
                sum_hss += hss
            if (t - cfg.T0) % cfg.k == 0:
                m = (t - cfg.T0) // cfg.k - 1
                for sl, chain, (S, _) in zip(pool.slices, pool.chains, parts):
                    datasets[m, sl] = chain.unit.y
                    eta[m, sl] = chain.unit.eta
                    xi[m, sl] = chain.unit.xi
                    scores_m[m, sl] = S
            if not np.all(np.isfinite(sum_hss)):
                bad = np.argwhere(~np.isfinite(sum_s).all(axis=1)).ravel()
                where = f"unit {int(bad[0])}" if bad.size else "information accumulator"
                raise NumericError(f"non-finite score quantities at iteration {t} ({where})")

    return ImputationOutput(
        psi_hat=psi_hat,
        datasets=datasets,
        eta=eta,
        xi=xi,
        scores_m=scores_m,
        s_bar_obs=sum_s / n_draws,
        i_obs=louis_information(sum_s, sum_hss, n_draws),
        mask=~np.isnan(dataset.y),
        x=np.array(dataset.x),
        weights=np.array(dataset.weights),
        columns=tuple(dataset.columns),
        config={"T": cfg.T, "T0": cfg.T0, "k": cfg.k, "seed": cfg.seed},
    )
