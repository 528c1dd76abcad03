"""Gibbs sweeps over the latent factors, auxiliary variables and missing responses.

Every operation works on a batch of units at once: ``UnitState`` arrays are
``(n, .)`` and the augmented variables are ``(n, .)`` as well.  Units never
interact, so splitting a batch into blocks changes nothing but the random
numbers each block consumes.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .data import Dataset, initial_fill
from .model import Kind, ModelSpec, Psi, UnitState
from .samplers import _gen, sample_mvn_precision, sample_pg, sample_truncnorm


class Step(str, enum.Enum):
    AUX_BINARY = "aux_binary"
    AUX_ORDINAL = "aux_ordinal"
    ETA = "eta"
    AUX_MISSINGNESS = "aux_missingness"
    XI = "xi"
    MISSING_Y = "missing_y"


@dataclass(frozen=True)
class SweepPlan:
    """Fixed order of the Gibbs steps within one sweep."""

    steps: tuple[Step, ...]
    model_missingness: bool
    ignorable: bool

    @classmethod
    def for_spec(cls, spec: ModelSpec) -> "SweepPlan":
        steps = []
        if spec.indices(Kind.BINARY).size:
            steps.append(Step.AUX_BINARY)
        if spec.indices(Kind.ORDINAL).size:
            steps.append(Step.AUX_ORDINAL)
        steps.append(Step.ETA)
        if spec.K2:
            steps += [Step.AUX_MISSINGNESS, Step.XI]
        steps.append(Step.MISSING_Y)
        return cls(tuple(steps), spec.K2 > 0, spec.ignorable)


@dataclass
class AugmentedState:
    """Pólya-Gamma and latent-response auxiliaries for a batch of units.

    Columns of ``omega_b`` follow the binary variables in index order,
    ``W`` and ``omega_o`` the ordinal ones; ``omega_z`` has one column per
    variable (none when ``K2 = 0``).
    """

    omega_b: np.ndarray
    W: np.ndarray
    omega_o: np.ndarray
    omega_z: np.ndarray

    def copy(self) -> "AugmentedState":
        return AugmentedState(self.omega_b.copy(), self.W.copy(), self.omega_o.copy(),
                              self.omega_z.copy())


@dataclass
class ChainState:
    """Current state of a block of per-unit chains."""

    unit: UnitState
    aug: AugmentedState
    missing: np.ndarray  # bool (n, J), True where y was not observed

    @property
    def n(self) -> int:
        return self.unit.y.shape[0]


# ---------------------------------------------------------------------------
# initialization


def _interval(psi: Psi, j: int, y: np.ndarray):
    cut = np.concatenate([[-np.inf], psi.thresholds[j], [np.inf]])
    yi = y.astype(int)
    return cut[yi], cut[yi + 1]


def initial_aug(spec: ModelSpec, psi: Psi, y: np.ndarray) -> AugmentedState:
    """Sweep-0 auxiliaries: all omegas 0.5, W at the interval midpoint.

    For unbounded intervals W sits one unit beyond the finite threshold.
    """
    n = y.shape[0]
    ordinal = spec.indices(Kind.ORDINAL)
    W = np.zeros((n, ordinal.size))
    for c, j in enumerate(ordinal):
        lo, hi = _interval(psi, j, y[:, j])
        W[:, c] = np.where(np.isinf(lo), hi - 1.0, np.where(np.isinf(hi), lo + 1.0, 0.5 * (lo + hi)))
    return AugmentedState(
        omega_b=np.full((n, spec.indices(Kind.BINARY).size), 0.5),
        W=W,
        omega_o=np.full((n, ordinal.size), 0.5),
        omega_z=np.full((n, spec.J if spec.K2 else 0), 0.5),
    )


def init_chain(dataset: Dataset, spec: ModelSpec, psi: Psi, rows=slice(None),
               fill: np.ndarray | None = None) -> ChainState:
    """Start chains for ``dataset.y[rows]``.

    Missing cells get ``fill`` (by default the observed mean, mode or median
    category of the whole column); latent factors start at zero.
    """
    if fill is None:
        fill = initial_fill(dataset, spec)
    y = np.array(dataset.y[rows], dtype=float)
    missing = np.isnan(y)
    y = np.where(missing, fill[None, :], y)
    n = y.shape[0]
    unit = UnitState(
        y=y,
        z=(~missing).astype(float),
        x=np.array(dataset.x[rows], dtype=float),
        eta=np.zeros((n, spec.K1)),
        xi=np.zeros((n, spec.K2)),
        weight=np.array(dataset.weights[rows], dtype=float),
    )
    return ChainState(unit, initial_aug(spec, psi, y), missing)


# ---------------------------------------------------------------------------
# auxiliary variables


def draw_aux_binary(unit: UnitState, aug: AugmentedState, psi: Psi, rng) -> AugmentedState:
    """omega_b ~ PG(1, |alpha0 + alpha' eta|) for every binary variable."""
    cols = psi.spec.indices(Kind.BINARY)
    if cols.size:
        lin = psi.alpha0[cols] + unit.eta @ psi.loadings[cols].T
        aug.omega_b = sample_pg(1, np.abs(lin), rng)
    return aug


def draw_aux_ordinal(unit: UnitState, aug: AugmentedState, psi: Psi, rng) -> AugmentedState:
    """W ~ TN(alpha' eta, 1/omega_o) on the category interval, then omega_o ~ PG(2, |alpha' eta - W|)."""
    cols = psi.spec.indices(Kind.ORDINAL)
    if not cols.size:
        return aug
    u = unit.eta @ psi.loadings[cols].T
    lo = np.empty_like(u)
    hi = np.empty_like(u)
    for c, j in enumerate(cols):
        lo[:, c], hi[:, c] = _interval(psi, j, unit.y[:, j])
    aug.W = sample_truncnorm(u, 1.0 / np.sqrt(aug.omega_o), lo, hi, rng)
    aug.omega_o = sample_pg(2, np.abs(u - aug.W), rng)
    return aug


def draw_aux_missingness(unit: UnitState, aug: AugmentedState, psi: Psi, rng) -> AugmentedState:
    """omega_z ~ PG(1, |gamma0 + gamma' xi|) for every response indicator."""
    if psi.spec.K2:
        lin = psi.gamma0[None, :] + unit.xi @ psi.gamma.T
        aug.omega_z = sample_pg(1, np.abs(lin), rng)
    return aug


# ---------------------------------------------------------------------------
# latent factors


def eta_precision(unit: UnitState, aug: AugmentedState, psi: Psi):
    """Precision ``A' D A + kappa' kappa + I`` and linear term of eta's full conditional."""
    spec = psi.spec
    n = unit.y.shape[0]
    A = psi.loadings
    D = np.zeros((n, spec.J))
    m = np.zeros((n, spec.J))
    cont = spec.indices(Kind.CONTINUOUS)
    if cont.size:
        s2 = psi.sigma[cont] ** 2
        D[:, cont] = 1.0 / s2
        m[:, cont] = (unit.y[:, cont] - psi.alpha0[cont]) / s2
    binary = spec.indices(Kind.BINARY)
    if binary.size:
        D[:, binary] = aug.omega_b
        m[:, binary] = (unit.y[:, binary] - 0.5) - aug.omega_b * psi.alpha0[binary]
    ordinal = spec.indices(Kind.ORDINAL)
    if ordinal.size:
        D[:, ordinal] = aug.omega_o
        m[:, ordinal] = aug.omega_o * aug.W
    kappa = psi.kappa
    P = np.einsum("nj,jk,jl->nkl", D, A, A) + kappa.T @ kappa + np.eye(spec.K1)
    h = m @ A + unit.x @ psi.beta.T
    if spec.K2:
        h = h + (unit.xi - unit.x @ psi.zeta.T) @ kappa
    return P, h


def draw_eta(unit: UnitState, aug: AugmentedState, psi: Psi, rng) -> np.ndarray:
    """Exact draw of eta from its Gaussian full conditional."""
    P, h = eta_precision(unit, aug, psi)
    return sample_mvn_precision(h, P, rng)


def xi_precision(unit: UnitState, aug: AugmentedState, psi: Psi):
    """Precision ``G' D_z G + I`` and linear term of xi's full conditional."""
    G = psi.gamma
    P = np.einsum("nj,jk,jl->nkl", aug.omega_z, G, G) + np.eye(psi.spec.K2)
    zt = unit.z - 0.5 - aug.omega_z * psi.gamma0[None, :]
    h = zt @ G + unit.x @ psi.zeta.T + unit.eta @ psi.kappa.T
    return P, h


def draw_xi(unit: UnitState, aug: AugmentedState, psi: Psi, rng) -> np.ndarray:
    """Exact draw of xi from its Gaussian full conditional."""
    P, h = xi_precision(unit, aug, psi)
    return sample_mvn_precision(h, P, rng)


# ---------------------------------------------------------------------------
# missing responses


def sample_responses(psi: Psi, eta: np.ndarray, rng) -> np.ndarray:
    """Draw a full ``(n, J)`` response matrix from the measurement models given eta."""
    gen = _gen(rng)
    spec = psi.spec
    n = eta.shape[0]
    u = eta @ psi.loadings.T
    normal = gen.standard_normal((n, spec.J))
    unif = gen.random((n, spec.J))
    y = np.empty((n, spec.J))
    for var in spec.variables:
        j = var.index
        if var.kind is Kind.CONTINUOUS:
            y[:, j] = psi.alpha0[j] + u[:, j] + psi.sigma[j] * normal[:, j]
        elif var.kind is Kind.BINARY:
            y[:, j] = (unif[:, j] < expit(psi.alpha0[j] + u[:, j])).astype(float)
        else:
            # P(y >= k) = F(u - tau_k) is decreasing in k, so y counts the exceedances
            upper = expit(u[:, j, None] - psi.thresholds[j][None, :])
            y[:, j] = (unif[:, j, None] < upper).sum(axis=1)
    return y


def draw_missing_y(unit: UnitState, psi: Psi, rng, missing: np.ndarray | None = None) -> np.ndarray:
    """Redraw every missing slot from its measurement model; observed slots are kept."""
    if missing is None:
        missing = unit.z == 0
    fresh = sample_responses(psi, unit.eta, rng)
    return np.where(missing, fresh, unit.y)


# ---------------------------------------------------------------------------
# sweep


def gibbs_sweep(unit: UnitState, aug: AugmentedState, psi: Psi, plan: SweepPlan, rng,
                missing: np.ndarray | None = None) -> tuple[UnitState, AugmentedState]:
    """One full sweep in plan order; ``unit`` and ``aug`` are updated in place."""
    gen = _gen(rng)
    for step in plan.steps:
        if step is Step.AUX_BINARY:
            draw_aux_binary(unit, aug, psi, gen)
        elif step is Step.AUX_ORDINAL:
            draw_aux_ordinal(unit, aug, psi, gen)
        elif step is Step.ETA:
            unit.eta = draw_eta(unit, aug, psi, gen)
        elif step is Step.AUX_MISSINGNESS:
            draw_aux_missingness(unit, aug, psi, gen)
        elif step is Step.XI:
            unit.xi = draw_xi(unit, aug, psi, gen)
        elif step is Step.MISSING_Y:
            unit.y = draw_missing_y(unit, psi, gen, missing)
    return unit, aug


def sweep_chain(state: ChainState, psi: Psi, plan: SweepPlan, rng) -> ChainState:
    gibbs_sweep(state.unit, state.aug, psi, plan, rng, state.missing)
    return state


def block_slices(N: int, block_size: int) -> list[slice]:
    """Contiguous unit blocks; each block owns one RNG stream per phase."""
    return [slice(s, min(s + block_size, N)) for s in range(0, N, block_size)]
