"""Joint latent-variable imputation model.

Measurement models for continuous, binary and ordinal responses given the
substantive factors ``eta``, logistic response-indicator models given the
missingness factors ``xi``, and the Gaussian latent prior

    eta | x ~ N(beta x, I),    xi | eta, x ~ N(zeta x + kappa eta, I).

All parameters live in one flat natural-scale vector whose layout is fixed by
:class:`Layout`.  Constrained entries (``alpha[j, k] = 0`` and
``gamma[j, k] = 0`` for ``k > j``, ``kappa = 0`` for ignorable models) are not
part of the vector.

Flat layout
-----------
For each variable ``j`` in index order: intercept (continuous/binary) or the
``M_j`` thresholds (ordinal), the free loadings, then ``sigma_j`` for
continuous variables.  Then, for each ``j``, ``gamma0_j`` and the free
``gamma_j`` entries (only when ``K2 >= 1``).  Then ``beta``, ``zeta`` and
``kappa``, each flattened row-major.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit

LOG_2PI = float(np.log(2.0 * np.pi))


class Kind(str, enum.Enum):
    CONTINUOUS = "continuous"
    BINARY = "binary"
    ORDINAL = "ordinal"


class ModelError(ValueError):
    """Invalid model specification, parameters or data."""


@dataclass(frozen=True)
class VariableSpec:
    index: int
    kind: Kind
    n_categories: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind is Kind.ORDINAL:
            if self.n_categories is None or self.n_categories < 3:
                raise ModelError(
                    f"ordinal variable {self.index} needs n_categories >= 3; "
                    "two-category variables must be declared binary"
                )
        elif self.kind is Kind.BINARY:
            object.__setattr__(self, "n_categories", 2)
        else:
            object.__setattr__(self, "n_categories", None)

    @property
    def n_thresholds(self) -> int:
        return self.n_categories - 1 if self.kind is Kind.ORDINAL else 0


@dataclass(frozen=True)
class ModelSpec:
    variables: tuple[VariableSpec, ...]
    K1: int
    K2: int = 0
    p: int = 0
    ignorable: bool = True

    def __post_init__(self):
        variables = tuple(sorted(self.variables, key=lambda v: v.index))
        object.__setattr__(self, "variables", variables)
        if len(variables) < 1:
            raise ModelError("a model needs at least one variable")
        if [v.index for v in variables] != list(range(len(variables))):
            raise ModelError("variable indices must be a permutation of 0..J-1")
        if self.K1 < 1:
            raise ModelError("K1 must be >= 1")
        if self.K2 < 0 or self.p < 0:
            raise ModelError("K2 and p must be non-negative")
        if self.K2 == 0 and not self.ignorable:
            raise ModelError("K2 = 0 (no missingness model) requires ignorable=True")

    @classmethod
    def from_kinds(cls, kinds: Sequence, K1: int, K2: int = 0, p: int = 0,
                   ignorable: bool = True, n_categories: Mapping[int, int] | None = None):
        """Build a spec from a list of kinds such as ``["continuous", "binary"]``."""
        n_categories = n_categories or {}
        variables = tuple(
            VariableSpec(j, Kind(k), n_categories.get(j)) for j, k in enumerate(kinds)
        )
        return cls(variables, K1=K1, K2=K2, p=p, ignorable=ignorable)

    @property
    def J(self) -> int:
        return len(self.variables)

    @property
    def kinds(self) -> tuple[Kind, ...]:
        return tuple(v.kind for v in self.variables)

    def indices(self, kind: Kind) -> np.ndarray:
        return np.array([v.index for v in self.variables if v.kind is Kind(kind)], dtype=int)

    def with_dims(self, K1: int | None = None, K2: int | None = None,
                  ignorable: bool | None = None) -> "ModelSpec":
        K1 = self.K1 if K1 is None else K1
        K2 = self.K2 if K2 is None else K2
        ignorable = self.ignorable if ignorable is None else ignorable
        return ModelSpec(self.variables, K1=K1, K2=K2, p=self.p, ignorable=ignorable)

    @cached_property
    def layout(self) -> "Layout":
        return Layout(self)


class Layout:
    """Index bookkeeping for the flat parameter vector.

    Every structured parameter array has a companion integer array of the same
    shape holding its position in the flat vector; constrained entries point at
    ``size`` (one past the end), so gathering from a zero-padded vector returns
    zero and scattering into a padded buffer discards them.
    """

    def __init__(self, spec: ModelSpec):
        J, K1, K2, p = spec.J, spec.K1, spec.K2, spec.p
        self.spec = spec
        names: list[str] = []
        sink = -1  # patched to size once counted

        def take(name):
            names.append(name)
            return len(names) - 1

        self.intercept = np.full(J, sink, dtype=int)
        self.loadings = np.full((J, K1), sink, dtype=int)
        self.sigma = np.full(J, sink, dtype=int)
        self.thresholds: dict[int, np.ndarray] = {}
        for v in spec.variables:
            j = v.index
            if v.kind is Kind.ORDINAL:
                self.thresholds[j] = np.array(
                    [take(f"tau[{j},{k}]") for k in range(1, v.n_thresholds + 1)]
                )
            else:
                self.intercept[j] = take(f"alpha0[{j}]")
            for k in range(K1):
                if k <= j:
                    self.loadings[j, k] = take(f"alpha[{j},{k}]")
            if v.kind is Kind.CONTINUOUS:
                self.sigma[j] = take(f"sigma[{j}]")
        self.n_measurement = len(names)

        self.gamma0 = np.full(J, sink, dtype=int)
        self.gamma = np.full((J, K2), sink, dtype=int)
        if K2 >= 1:
            for j in range(J):
                self.gamma0[j] = take(f"gamma0[{j}]")
                for k in range(K2):
                    if k <= j:
                        self.gamma[j, k] = take(f"gamma[{j},{k}]")

        self.beta = np.array(
            [[take(f"beta[{k},{l}]") for l in range(p)] for k in range(K1)], dtype=int
        ).reshape(K1, p)
        self.zeta = np.array(
            [[take(f"zeta[{k},{l}]") for l in range(p)] for k in range(K2)], dtype=int
        ).reshape(K2, p)
        if K2 >= 1 and not spec.ignorable:
            self.kappa = np.array(
                [[take(f"kappa[{k},{m}]") for m in range(K1)] for k in range(K2)], dtype=int
            ).reshape(K2, K1)
        else:
            self.kappa = np.full((K2, K1), sink, dtype=int)

        self.names = tuple(names)
        self.size = len(names)
        for arr in [self.intercept, self.loadings, self.sigma, self.gamma0, self.gamma,
                    self.beta, self.zeta, self.kappa, *self.thresholds.values()]:
            arr[arr == sink] = self.size

        self.sigma_positions = self.sigma[self.sigma < self.size]

    def __len__(self):
        return self.size


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class MeasurementParams:
    """Parameters of one measurement model ``g_j``."""

    kind: Kind
    loading: np.ndarray
    intercept: float = 0.0
    sigma: float = 1.0
    thresholds: np.ndarray | None = None


@dataclass(frozen=True)
class MissingnessParams:
    intercept: float
    loading: np.ndarray


@dataclass(frozen=True, eq=False)
class Psi:
    """Imputation-model parameters as a flat natural-scale vector."""

    spec: ModelSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != self.spec.layout.size:
            raise ModelError(
                f"expected {self.spec.layout.size} parameters, got {values.size}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        lay = self.spec.layout
        if np.any(values[lay.sigma_positions] <= 0):
            raise ModelError("residual standard deviations must be positive")
        for j, idx in lay.thresholds.items():
            if np.any(np.diff(values[idx]) <= 0):
                raise ModelError(f"thresholds of variable {j} must be strictly increasing")

    def __eq__(self, other):
        return (isinstance(other, Psi) and self.spec == other.spec
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.spec, self.values.tobytes()))

    @property
    def padded(self) -> np.ndarray:
        return np.append(self.values, 0.0)

    @cached_property
    def alpha0(self) -> np.ndarray:
        """Intercepts, zero for ordinal variables (which use thresholds)."""
        return self.padded[self.spec.layout.intercept]

    @cached_property
    def loadings(self) -> np.ndarray:
        return self.padded[self.spec.layout.loadings]

    @cached_property
    def sigma(self) -> np.ndarray:
        """Residual SDs; 1.0 placeholder for non-continuous variables."""
        lay = self.spec.layout
        out = np.ones(self.spec.J)
        has = lay.sigma < lay.size
        out[has] = self.values[lay.sigma[has]]
        return out

    @cached_property
    def thresholds(self) -> dict[int, np.ndarray]:
        return {j: self.values[idx] for j, idx in self.spec.layout.thresholds.items()}

    @cached_property
    def gamma0(self) -> np.ndarray:
        return self.padded[self.spec.layout.gamma0]

    @cached_property
    def gamma(self) -> np.ndarray:
        return self.padded[self.spec.layout.gamma]

    @cached_property
    def beta(self) -> np.ndarray:
        return self.padded[self.spec.layout.beta]

    @cached_property
    def zeta(self) -> np.ndarray:
        return self.padded[self.spec.layout.zeta]

    @cached_property
    def kappa(self) -> np.ndarray:
        return self.padded[self.spec.layout.kappa]

    def measurement(self, j: int) -> MeasurementParams:
        kind = self.spec.variables[j].kind
        return MeasurementParams(
            kind=kind,
            loading=self.loadings[j],
            intercept=float(self.alpha0[j]),
            sigma=float(self.sigma[j]),
            thresholds=self.thresholds.get(j),
        )

    def missingness(self, j: int) -> MissingnessParams:
        return MissingnessParams(float(self.gamma0[j]), self.gamma[j])

    def arrays(self) -> dict:
        return dict(alpha0=self.alpha0, loadings=self.loadings, sigma=self.sigma,
                    thresholds=self.thresholds, gamma0=self.gamma0, gamma=self.gamma,
                    beta=self.beta, zeta=self.zeta, kappa=self.kappa)

    @classmethod
    def from_arrays(cls, spec: ModelSpec, *, alpha0=None, loadings=None, sigma=None,
                    thresholds=None, gamma0=None, gamma=None, beta=None, zeta=None,
                    kappa=None) -> "Psi":
        """Gather the free entries of structured arrays; constrained entries are dropped.

        Missing arrays default to zeros (``sigma`` to ones, thresholds to an
        evenly spaced grid on [-1, 1]).
        """
        lay = spec.layout
        J, K1, K2, p = spec.J, spec.K1, spec.K2, spec.p
        out = np.zeros(lay.size + 1)

        def put(idx, arr, shape, default=0.0):
            arr = np.full(shape, default) if arr is None else np.asarray(arr, float).reshape(shape)
            out[idx] = arr

        put(lay.intercept, alpha0, (J,))
        put(lay.loadings, loadings, (J, K1))
        put(lay.sigma, sigma, (J,), 1.0)
        put(lay.gamma0, gamma0, (J,))
        put(lay.gamma, gamma, (J, K2))
        put(lay.beta, beta, (K1, p))
        put(lay.zeta, zeta, (K2, p))
        put(lay.kappa, kappa, (K2, K1))
        thresholds = thresholds or {}
        for j, idx in lay.thresholds.items():
            t = thresholds.get(j)
            out[idx] = np.linspace(-1.0, 1.0, idx.size) if t is None else np.asarray(t, float)
        return cls(spec, out[:-1])

    def replace(self, **arrays) -> "Psi":
        current = self.arrays()
        current.update(arrays)
        return Psi.from_arrays(self.spec, **current)


def apply_constraints(psi: Psi | Mapping, spec: ModelSpec) -> Psi:
    """Project parameters onto the identified parameter space of ``spec``.

    Zeroes ``alpha[j, k]`` and ``gamma[j, k]`` for ``k > j``, zeroes ``kappa``
    for ignorable specs, and passes sigma and thresholds through the internal
    (log-SD, log-gap) parameterization so both stay valid.
    """
    arrays = dict(psi.arrays() if isinstance(psi, Psi) else psi)
    sigma = arrays.get("sigma")
    if sigma is not None:
        sigma = np.asarray(sigma, float)
        arrays["sigma"] = np.exp(np.log(np.maximum(np.abs(sigma), 1e-8)))
    thresholds = arrays.get("thresholds")
    if thresholds:
        fixed = {}
        for j, t in thresholds.items():
            t = np.sort(np.asarray(t, float))
            gaps = np.maximum(np.diff(t), 1e-8)
            fixed[j] = np.concatenate([[t[0]], t[0] + np.cumsum(np.exp(np.log(gaps)))])
        arrays["thresholds"] = fixed
    if spec.ignorable:
        arrays["kappa"] = None
    # dimension changes (e.g. a Psi fitted under another K2) keep what fits
    for key, shape in (("gamma", (spec.J, spec.K2)), ("zeta", (spec.K2, spec.p)),
                       ("kappa", (spec.K2, spec.K1)), ("loadings", (spec.J, spec.K1)),
                       ("beta", (spec.K1, spec.p))):
        arr = arrays.get(key)
        if arr is not None and np.shape(arr) != shape:
            arrays[key] = None
    return Psi.from_arrays(spec, **arrays)


# ---------------------------------------------------------------------------
# internal unconstrained parameterization


def to_internal(spec: ModelSpec, values: np.ndarray) -> np.ndarray:
    """Natural scale -> unconstrained (log sigma, first threshold + log gaps)."""
    lay = spec.layout
    theta = np.array(values, dtype=float)
    theta[lay.sigma_positions] = np.log(theta[lay.sigma_positions])
    for idx in lay.thresholds.values():
        t = values[idx]
        theta[idx[1:]] = np.log(np.diff(t))
    return theta


def from_internal(spec: ModelSpec, theta: np.ndarray) -> np.ndarray:
    lay = spec.layout
    values = np.array(theta, dtype=float)
    values[lay.sigma_positions] = np.exp(theta[lay.sigma_positions])
    for idx in lay.thresholds.values():
        values[idx] = theta[idx[0]] + np.concatenate([[0.0], np.cumsum(np.exp(theta[idx[1:]]))])
    return values


def internal_gradient(spec: ModelSpec, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Chain rule from a natural-scale gradient to the internal scale.

    ``grad`` may be a single vector or have parameters on its last axis.
    """
    lay = spec.layout
    out = np.array(grad, dtype=float)
    pos = lay.sigma_positions
    out[..., pos] = grad[..., pos] * values[pos]
    for idx in lay.thresholds.values():
        g = grad[..., idx]
        # tail sums: d/dt1 = sum_k g_k; d/d(log gap_k) = gap_k * sum_{k' >= k} g_k'
        tail = np.flip(np.cumsum(np.flip(g, -1), -1), -1)
        gaps = np.diff(values[idx])
        out[..., idx[0]] = tail[..., 0]
        out[..., idx[1:]] = tail[..., 1:] * gaps
    return out


# ---------------------------------------------------------------------------
# unit state


@dataclass
class UnitState:
    """Data and latent state of one unit, or of a batch when arrays are 2-D.

    ``y`` holds observed values with missing slots carrying current
    imputations; ``z`` is 1 where observed.
    """

    y: np.ndarray
    z: np.ndarray
    x: np.ndarray
    eta: np.ndarray
    xi: np.ndarray
    weight: float | np.ndarray = 1.0

    def batch(self) -> "UnitState":
        return UnitState(np.atleast_2d(self.y).astype(float), np.atleast_2d(self.z).astype(float),
                         _rows(self.x, self.y), np.atleast_2d(self.eta).astype(float),
                         _rows(self.xi, self.y), self.weight)

    @property
    def is_single(self) -> bool:
        return np.ndim(self.y) == 1


def _rows(a, like):
    n = np.atleast_2d(like).shape[0]
    if a is None:
        return np.zeros((n, 0))
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        return a.reshape(1, -1) if a.size else np.zeros((n, 0))
    return a


def _squeeze(out, unit: UnitState):
    return out[0] if unit.is_single else out


# ---------------------------------------------------------------------------
# log densities


def _check_support(var: VariableSpec, y):
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ModelError(f"non-finite value for variable {var.index}")
    if var.kind is not Kind.CONTINUOUS:
        if np.any((y < 0) | (y >= var.n_categories) | (y != np.round(y))):
            raise ModelError(
                f"value outside support {{0..{var.n_categories - 1}}} for variable {var.index}"
            )
    return y


def _ordinal_bounds(thresholds: np.ndarray, y: np.ndarray):
    cut = np.concatenate([[-np.inf], thresholds, [np.inf]])
    yi = y.astype(int)
    return cut[yi], cut[yi + 1]


def _ordinal_parts(u, lo, hi):
    """Stable pieces of P = F(u - lo) - F(u - hi) for the graded response model."""
    x1 = u - lo
    x2 = u - hi
    with np.errstate(invalid="ignore"):
        gap = np.where(np.isinf(lo) | np.isinf(hi), -np.inf, lo - hi)
    E = -np.expm1(gap)
    logp = log_expit(x1) + log_expit(-x2) + np.log(E)
    A, B = expit(x1), expit(x2)
    one_minus_A, one_minus_B = expit(-x1), expit(-x2)
    rA = one_minus_A / (one_minus_B * E)   # f(x1) / P
    rB = B / (A * E)                       # f(x2) / P
    return logp, A, B, rA, rB


def measurement_logprob(var: VariableSpec, params: MeasurementParams, y_val, eta) -> np.ndarray:
    """log g_j(y | eta) for one variable; vectorized over leading axes."""
    y = _check_support(var, y_val)
    eta = np.asarray(eta, dtype=float)
    u = eta @ np.asarray(params.loading, float)
    if var.kind is Kind.CONTINUOUS:
        r = y - params.intercept - u
        return -0.5 * LOG_2PI - np.log(params.sigma) - 0.5 * (r / params.sigma) ** 2
    if var.kind is Kind.BINARY:
        psi_ = params.intercept + u
        return y * psi_ + log_expit(-psi_)
    lo, hi = _ordinal_bounds(np.asarray(params.thresholds, float), y)
    return _ordinal_parts(u, lo, hi)[0]


def missingness_logprob(params: MissingnessParams, z_val, xi) -> np.ndarray:
    """log h_j(z | xi) under the logistic response-indicator model."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape[-1] == 0:
        raise ModelError("missingness model needs K2 >= 1")
    z = np.asarray(z_val, dtype=float)
    phi = params.intercept + xi @ np.asarray(params.loading, float)
    return z * phi + log_expit(-phi)


def latent_prior_logpdf(psi: Psi, eta, xi, x) -> np.ndarray | float:
    """log pi(eta, xi | x) = log N(eta; beta x, I) + log N(xi; zeta x + kappa eta, I)."""
    single = np.ndim(eta) == 1
    eta = np.atleast_2d(np.asarray(eta, float))
    x = _rows(x, eta)
    xi = _rows(xi, eta)
    r_eta = eta - x @ psi.beta.T
    out = -0.5 * psi.spec.K1 * LOG_2PI - 0.5 * np.sum(r_eta**2, axis=1)
    if psi.spec.K2:
        e_xi = xi - x @ psi.zeta.T - eta @ psi.kappa.T
        out = out - 0.5 * psi.spec.K2 * LOG_2PI - 0.5 * np.sum(e_xi**2, axis=1)
    return out[0] if single else out


def _latent_prior(psi: Psi, b: UnitState) -> np.ndarray:
    return latent_prior_logpdf(psi, b.eta, b.xi, b.x)


def complete_loglik(psi: Psi, unit: UnitState) -> np.ndarray | float:
    """Complete-data log-likelihood log f(y, z, eta, xi | x) per unit."""
    b = unit.batch()
    spec = psi.spec
    total = _latent_prior(psi, b)
    for var in spec.variables:
        j = var.index
        total = total + measurement_logprob(var, psi.measurement(j), b.y[:, j], b.eta)
    if spec.K2:
        for j in range(spec.J):
            total = total + missingness_logprob(psi.missingness(j), b.z[:, j], b.xi)
    return _squeeze(total, unit)


# ---------------------------------------------------------------------------
# score and Hessian


def _measurement_blocks(psi: Psi, b: UnitState):
    """Per-variable local gradients and Hessians.

    Yields ``(columns, grad (n, d), hess (n, d, d))`` where ``columns`` are
    flat positions (constrained loadings point at the sink).
    """
    lay = psi.spec.layout
    n = b.y.shape[0]
    ones = np.ones((n, 1))
    for var in psi.spec.variables:
        j = var.index
        load = psi.loadings[j]
        u = b.eta @ load
        y = b.y[:, j]
        if var.kind is Kind.CONTINUOUS:
            s = psi.sigma[j]
            r = y - psi.alpha0[j] - u
            v = np.hstack([ones, b.eta])
            cols = np.concatenate([[lay.intercept[j]], lay.loadings[j], [lay.sigma[j]]])
            g = np.hstack([v * (r / s**2)[:, None], (-1.0 / s + r**2 / s**3)[:, None]])
            d = v.shape[1] + 1
            H = np.empty((n, d, d))
            H[:, :-1, :-1] = -v[:, :, None] * v[:, None, :] / s**2
            H[:, :-1, -1] = -2.0 * v * (r / s**3)[:, None]
            H[:, -1, :-1] = H[:, :-1, -1]
            H[:, -1, -1] = 1.0 / s**2 - 3.0 * r**2 / s**4
            yield cols, g, H
        elif var.kind is Kind.BINARY:
            prob = expit(psi.alpha0[j] + u)
            v = np.hstack([ones, b.eta])
            cols = np.concatenate([[lay.intercept[j]], lay.loadings[j]])
            g = v * (y - prob)[:, None]
            H = -(prob * (1 - prob))[:, None, None] * v[:, :, None] * v[:, None, :]
            yield cols, g, H
        else:
            tau = psi.thresholds[j]
            M = tau.size
            lo, hi = _ordinal_bounds(tau, y)
            _, A, B, rA, rB = _ordinal_parts(u, lo, hi)
            # derivatives in (u, a_lo, a_hi)
            g3 = np.stack([rA - rB, -rA, rB], axis=1)
            cA = rA * (1 - 2 * A)
            cB = rB * (1 - 2 * B)
            P2 = np.zeros((n, 3, 3))
            P2[:, 0, 0] = cA - cB
            P2[:, 0, 1] = P2[:, 1, 0] = -cA
            P2[:, 0, 2] = P2[:, 2, 0] = cB
            P2[:, 1, 1] = cA
            P2[:, 2, 2] = -cB
            H3 = P2 - g3[:, :, None] * g3[:, None, :]
            # Jacobian from (u, a_lo, a_hi) to (tau_1..tau_M, alpha)
            yi = y.astype(int)
            Jm = np.zeros((n, 3, M + psi.spec.K1))
            Jm[:, 0, M:] = b.eta
            rows = np.arange(n)
            has_lo = yi >= 1
            has_hi = yi <= M - 1
            Jm[rows[has_lo], 1, yi[has_lo] - 1] = 1.0
            Jm[rows[has_hi], 2, yi[has_hi]] = 1.0
            cols = np.concatenate([lay.thresholds[j], lay.loadings[j]])
            g = np.einsum("na,nad->nd", g3, Jm)
            H = np.einsum("nad,nab,nbe->nde", Jm, H3, Jm)
            yield cols, g, H


def _missingness_blocks(psi: Psi, b: UnitState):
    lay = psi.spec.layout
    n = b.z.shape[0]
    v = np.hstack([np.ones((n, 1)), b.xi])
    outer = v[:, :, None] * v[:, None, :]
    for j in range(psi.spec.J):
        prob = expit(psi.gamma0[j] + b.xi @ psi.gamma[j])
        cols = np.concatenate([[lay.gamma0[j]], lay.gamma[j]])
        yield cols, v * (b.z[:, j] - prob)[:, None], -(prob * (1 - prob))[:, None, None] * outer


def _prior_blocks(psi: Psi, b: UnitState):
    spec, lay = psi.spec, psi.spec.layout
    n = b.eta.shape[0]
    if spec.p:
        r_eta = b.eta - b.x @ psi.beta.T
        xx = -b.x[:, :, None] * b.x[:, None, :]
        for k in range(spec.K1):
            yield lay.beta[k], r_eta[:, [k]] * b.x, xx
    if spec.K2:
        e_xi = b.xi - b.x @ psi.zeta.T - b.eta @ psi.kappa.T
        w = np.hstack([b.x, b.eta])
        ww = -w[:, :, None] * w[:, None, :]
        for k in range(spec.K2):
            cols = np.concatenate([lay.zeta[k], lay.kappa[k]])
            yield cols, e_xi[:, [k]] * w, ww


def _blocks(psi: Psi, b: UnitState):
    yield from _measurement_blocks(psi, b)
    if psi.spec.K2:
        yield from _missingness_blocks(psi, b)
    yield from _prior_blocks(psi, b)


def complete_score(psi: Psi, unit: UnitState) -> np.ndarray:
    """Gradient of :func:`complete_loglik` over the free parameters, shape (n, D) or (D,)."""
    b = unit.batch()
    return _squeeze(_score_matrix(psi, b), unit)


def _score_matrix(psi: Psi, b: UnitState) -> np.ndarray:
    """Per-unit scores with continuous and binary items handled in one pass."""
    spec, lay = psi.spec, psi.spec.layout
    n = b.y.shape[0]
    D = lay.size
    out = np.zeros((n, D + 1))
    for kind in (Kind.CONTINUOUS, Kind.BINARY):
        cols = spec.indices(kind)
        if not cols.size:
            continue
        lin = psi.alpha0[cols] + b.eta @ psi.loadings[cols].T
        if kind is Kind.CONTINUOUS:
            s = psi.sigma[cols]
            r = b.y[:, cols] - lin
            g = r / s**2
            out[:, lay.sigma[cols]] = -1.0 / s + r**2 / s**3
        else:
            g = b.y[:, cols] - expit(lin)
        out[:, lay.intercept[cols]] = g
        out[:, lay.loadings[cols].ravel()] = (g[:, :, None] * b.eta[:, None, :]).reshape(n, -1)
    for j in spec.indices(Kind.ORDINAL):
        tau = psi.thresholds[j]
        M = tau.size
        y = b.y[:, j]
        lo, hi = _ordinal_bounds(tau, y)
        _, _, _, rA, rB = _ordinal_parts(b.eta @ psi.loadings[j], lo, hi)
        yi = y.astype(int)
        rows = np.arange(n)
        dtau = np.zeros((n, M + 1))
        dtau[rows, np.where(yi >= 1, yi - 1, M)] += -rA
        dtau[rows, np.where(yi <= M - 1, yi, M)] += rB
        out[:, lay.thresholds[j]] = dtau[:, :M]
        out[:, lay.loadings[j]] += (rA - rB)[:, None] * b.eta
    if spec.K2:
        g = b.z - expit(psi.gamma0[None, :] + b.xi @ psi.gamma.T)
        out[:, lay.gamma0] = g
        out[:, lay.gamma.ravel()] = (g[:, :, None] * b.xi[:, None, :]).reshape(n, -1)
    for cols, g, _ in _prior_blocks(psi, b):
        out[:, cols] += g
    return out[:, :D]


def complete_hessian(psi: Psi, unit: UnitState) -> np.ndarray:
    """Hessian of :func:`complete_loglik`, shape (n, D, D) or (D, D)."""
    b = unit.batch()
    D = psi.spec.layout.size
    out = np.zeros((b.y.shape[0], D + 1, D + 1))
    for cols, _, H in _blocks(psi, b):
        out[:, cols[:, None], cols[None, :]] += H
    out = out[:, :D, :D]
    out = 0.5 * (out + out.transpose(0, 2, 1))
    return _squeeze(out, unit)


def score_and_hessian_sum(psi: Psi, unit: UnitState) -> tuple[np.ndarray, np.ndarray]:
    """Per-unit scores (n, D) together with the Hessian summed over units (D, D).

    Avoids materializing per-unit Hessians.
    """
    b = unit.batch()
    D = psi.spec.layout.size
    S = np.zeros((b.y.shape[0], D + 1))
    Hs = np.zeros((D + 1, D + 1))
    for cols, g, H in _blocks(psi, b):
        S[:, cols] += g
        Hs[cols[:, None], cols[None, :]] += H.sum(axis=0)
    Hs = Hs[:D, :D]
    return S[:, :D], 0.5 * (Hs + Hs.T)
