"""Dataset container and validation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import Kind, ModelError, ModelSpec


@dataclass(frozen=True, eq=False)
class Dataset:
    """``N x J`` responses (NaN where missing), ``N x p`` covariates and weights."""

    y: np.ndarray
    x: np.ndarray | None = None
    weights: np.ndarray | None = None
    columns: tuple[str, ...] | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float)
        if y.ndim != 2:
            raise ModelError("responses must be a 2-D array")
        N = y.shape[0]
        x = np.zeros((N, 0)) if self.x is None else np.array(self.x, dtype=float).reshape(N, -1)
        w = np.ones(N) if self.weights is None else np.array(self.weights, dtype=float).reshape(N)
        if not np.all(np.isfinite(x)):
            raise ModelError("covariates must be fully observed")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise ModelError("weights must be finite and strictly positive")
        for a in (y, x, w):
            a.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "weights", w)
        if self.columns is None:
            object.__setattr__(self, "columns", tuple(f"y{j + 1}" for j in range(y.shape[1])))

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def J(self) -> int:
        return self.y.shape[1]

    @property
    def z(self) -> np.ndarray:
        return (~np.isnan(self.y)).astype(float)

    @property
    def missing_rate(self) -> float:
        return float(np.isnan(self.y).mean())

    def subset(self, rows) -> "Dataset":
        return Dataset(self.y[rows], self.x[rows], self.weights[rows], self.columns)


def validate(dataset: Dataset, spec: ModelSpec) -> None:
    """Check that the data match the model's variable kinds and dimensions."""
    if dataset.J != spec.J:
        raise ModelError(f"data have {dataset.J} variables, model has {spec.J}")
    if dataset.x.shape[1] != spec.p:
        raise ModelError(f"data have {dataset.x.shape[1]} covariates, model has p={spec.p}")
    for var in spec.variables:
        j = var.index
        name = dataset.columns[j]
        col = dataset.y[:, j]
        obs = col[~np.isnan(col)]
        if obs.size == 0:
            raise ModelError(f"variable {name!r} has no observed values")
        if not np.all(np.isfinite(obs)):
            raise ModelError(f"variable {name!r} has non-finite values")
        if var.kind is not Kind.CONTINUOUS:
            bad = (obs < 0) | (obs >= var.n_categories) | (obs != np.round(obs))
            if bad.any():
                raise ModelError(
                    f"variable {name!r} ({var.kind.value}) has values outside "
                    f"0..{var.n_categories - 1}"
                )
        if np.ptp(obs) == 0:
            raise ModelError(
                f"variable {name!r} has zero observed variance; its loadings are not identified"
            )


def initial_fill(dataset: Dataset, spec: ModelSpec) -> np.ndarray:
    """Starting values for missing cells: mean, mode or median category."""
    fill = np.zeros(spec.J)
    for var in spec.variables:
        obs = dataset.y[:, var.index]
        obs = obs[~np.isnan(obs)]
        if var.kind is Kind.CONTINUOUS:
            fill[var.index] = obs.mean()
        elif var.kind is Kind.BINARY:
            fill[var.index] = float(obs.mean() > 0.5)
        else:
            fill[var.index] = np.floor(np.median(obs))
    return fill
