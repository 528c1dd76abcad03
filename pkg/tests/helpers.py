"""Shared builders for random specs, parameters and unit states."""
from __future__ import annotations

import numpy as np

from lvmi.model import Kind, ModelSpec, Psi, UnitState

ACCEPTANCE: dict[int, str] = {}  # criterion number -> result line


def report(number: int, passed: bool, detail: str, seconds: float, budget: str) -> None:
    """Record and print one acceptance line."""
    line = (f"ACCEPTANCE {number:>2} {'PASS' if passed else 'FAIL'}: {detail} "
            f"[{seconds:.1f} s; target {budget}]")
    ACCEPTANCE[number] = line
    print(line, flush=True)


MIXED_KINDS = ["continuous", "binary", "ordinal", "ordinal", "binary", "continuous"]
MIXED_CATS = {2: 4, 3: 3}


def mixed_spec(K1=2, K2=1, p=1, ignorable=False) -> ModelSpec:
    return ModelSpec.from_kinds(MIXED_KINDS, K1=K1, K2=K2, p=p, ignorable=ignorable or K2 == 0,
                                n_categories=MIXED_CATS)


def random_psi(spec: ModelSpec, rng, scale: float = 0.5) -> Psi:
    lay = spec.layout
    v = rng.normal(size=lay.size) * scale
    v[lay.sigma_positions] = rng.uniform(0.5, 1.2, lay.sigma_positions.size)
    for idx in lay.thresholds.values():
        v[idx] = np.sort(rng.normal(size=idx.size)) + 0.3 * np.arange(idx.size)
    return Psi(spec, v)


def random_y(spec: ModelSpec, n: int, rng) -> np.ndarray:
    cols = []
    for var in spec.variables:
        if var.kind is Kind.CONTINUOUS:
            cols.append(rng.normal(size=n))
        elif var.kind is Kind.BINARY:
            cols.append(rng.integers(0, 2, n).astype(float))
        else:
            cols.append(rng.integers(0, var.n_categories, n).astype(float))
    return np.column_stack(cols)


def random_units(spec: ModelSpec, n: int, rng) -> UnitState:
    return UnitState(
        random_y(spec, n, rng),
        rng.integers(0, 2, (n, spec.J)).astype(float),
        rng.normal(size=(n, spec.p)),
        rng.normal(size=(n, spec.K1)),
        rng.normal(size=(n, spec.K2)),
    )


def unit(units: UnitState, i: int) -> UnitState:
    return UnitState(units.y[i], units.z[i], units.x[i], units.eta[i], units.xi[i])


def fd_gradient(f, v, h=1e-6):
    """Central differences of ``f`` at ``v``; row ``d`` is the derivative along ``v[d]``.

    ``f`` may return a scalar or an array (giving a Jacobian, transposed).
    """
    rows = []
    for d in range(v.size):
        e = np.zeros_like(v)
        e[d] = h
        rows.append((np.asarray(f(v + e)) - np.asarray(f(v - e))) / (2 * h))
    return np.array(rows)


def fake_imputation(rng, M=4, N=60, J=3, D=5, p=1, weights=None, missing=0.2):
    """An ImputationOutput with random contents, for analysis-layer algebra."""
    from lvmi.impute import ImputationOutput

    spec = ModelSpec.from_kinds(["continuous"] * (J - 1) + ["binary"], K1=1)
    base = rng.normal(size=(N, J))
    base[:, -1] = (base[:, -1] > 0).astype(float)
    mask = rng.random((N, J)) > missing
    datasets = np.repeat(base[None], M, axis=0)
    noise = rng.normal(size=(M, N, J))
    noise[..., -1] = 0.0
    flips = rng.random((M, N)) < 0.5
    datasets[..., :-1] += np.where(mask[None, :, :-1], 0.0, noise[..., :-1])
    datasets[..., -1] = np.where(mask[None, :, -1], datasets[..., -1],
                                 np.where(flips, 1 - datasets[..., -1], datasets[..., -1]))
    scores = rng.normal(size=(M, N, D))
    A = rng.normal(size=(D, D))
    return ImputationOutput(
        psi_hat=Psi(spec, np.ones(spec.layout.size)), datasets=datasets,
        eta=np.zeros((M, N, 1)), xi=np.zeros((M, N, 0)), scores_m=scores,
        s_bar_obs=scores.mean(axis=0) + 0.1 * rng.normal(size=(N, D)),
        i_obs=A @ A.T / D + np.eye(D), mask=mask, x=rng.normal(size=(N, p)),
        weights=np.ones(N) if weights is None else weights,
        columns=tuple(f"y{j + 1}" for j in range(J)),
    )
