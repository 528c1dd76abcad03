"""Pooled estimating equations on imputed data and their sandwich variance.

An analysis model is a weighted estimating equation ``sum_i w_i U(y_i, x_i;
theta) = 0``.  With ``M`` imputations the pooled estimator solves the same
equation with ``U`` replaced by its average over imputations.  Its variance
adds to the usual sandwich a term for the uncertainty in the imputation-model
parameters, assembled from the per-unit scores kept by the imputer.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import norm

from .impute import ImputationOutput
from .model import ModelError

COND_LIMIT = 1e12


class AnalysisError(ModelError):
    """The analysis model cannot be solved on these data."""


@dataclass(frozen=True)
class EstimatingFunction:
    """A vectorized estimating function.

    ``evaluate(Y, X, theta)`` maps ``(n, J)`` responses and ``(n, p)``
    covariates to ``(n, q)`` contributions; ``jacobian`` returns the
    ``(n, q, q)`` derivatives ``dU / dtheta'``.  ``closed_form(Y, X, w)``,
    when given, returns the weighted root directly.
    """

    q: int
    evaluate: Callable
    jacobian: Callable
    names: tuple[str, ...]
    closed_form: Callable | None = None
    validate: Callable | None = None

    @property
    def solve_hint(self) -> str:
        return "closed-form" if self.closed_form is not None else "newton"


# ---------------------------------------------------------------------------
# built-in analysis models


def builtin_mean(columns: Sequence[int], transform: Callable | None = None,
                 names: Sequence[str] | None = None) -> EstimatingFunction:
    """Weighted means of ``r(y_j)`` for each listed column, ``U = r(y) - theta``.

    ``transform`` defaults to the identity; an indicator such as
    ``lambda y: (y <= 2).astype(float)`` turns the estimand into a proportion.
    """
    cols = np.asarray(columns, dtype=int)
    r = transform or (lambda v: v)
    q = cols.size

    def evaluate(Y, X, theta):
        return r(Y[:, cols]) - theta[None, :]

    def jacobian(Y, X, theta):
        return np.broadcast_to(-np.eye(q), (Y.shape[0], q, q))

    def closed_form(Y, X, w):
        return w @ r(Y[:, cols]) / w.sum()

    names = tuple(names) if names else tuple(f"mean[{c}]" for c in cols)
    return EstimatingFunction(q, evaluate, jacobian, names, closed_form)


def builtin_conditional_mean(given: int, value: float, columns: Sequence[int],
                             kinds: Sequence[str] | None = None,
                             names: Sequence[str] | None = None) -> EstimatingFunction:
    """Means of the listed columns among units with ``y_given == value``.

    ``U = 1(y_given = value) (y - theta)``.  The conditioning variable must be
    binary; pass the model's ``kinds`` to have that checked.
    """
    cols = np.asarray(columns, dtype=int)
    q = cols.size
    if kinds is not None and str(getattr(kinds[given], "value", kinds[given])) != "binary":
        raise ModelError(
            f"conditional means need a binary conditioning variable; variable {given} is "
            f"{getattr(kinds[given], 'value', kinds[given])}"
        )

    def indicator(Y):
        return (Y[:, given] == value).astype(float)

    def evaluate(Y, X, theta):
        return indicator(Y)[:, None] * (Y[:, cols] - theta[None, :])

    def jacobian(Y, X, theta):
        return -indicator(Y)[:, None, None] * np.eye(q)[None]

    def closed_form(Y, X, w):
        wi = w * indicator(Y)
        return wi @ Y[:, cols] / wi.sum()

    def validate(Ys):
        for m, Y in enumerate(Ys):
            if not np.any(Y[:, given] == value):
                raise AnalysisError(
                    f"imputed dataset {m + 1} has no unit with variable {given} equal to "
                    f"{value}; the conditional mean is undefined there"
                )

    names = tuple(names) if names else tuple(f"mean[{c}|{given}={value:g}]" for c in cols)
    return EstimatingFunction(q, evaluate, jacobian, names, closed_form, validate)


def builtin_correlation(j1: int, j2: int) -> EstimatingFunction:
    """Pearson correlation through the moment system for ``(mu1, mu2, s1, s2, rho)``."""

    def evaluate(Y, X, theta):
        mu1, mu2, s1, s2, rho = theta
        d1, d2 = Y[:, j1] - mu1, Y[:, j2] - mu2
        return np.column_stack([d1, d2, d1**2 - s1, d2**2 - s2, d1 * d2 - rho * np.sqrt(s1 * s2)])

    def jacobian(Y, X, theta):
        mu1, mu2, s1, s2, rho = theta
        d1, d2 = Y[:, j1] - mu1, Y[:, j2] - mu2
        n = Y.shape[0]
        Jm = np.zeros((n, 5, 5))
        Jm[:, 0, 0] = -1.0
        Jm[:, 1, 1] = -1.0
        Jm[:, 2, 0] = -2.0 * d1
        Jm[:, 2, 2] = -1.0
        Jm[:, 3, 1] = -2.0 * d2
        Jm[:, 3, 3] = -1.0
        Jm[:, 4, 0] = -d2
        Jm[:, 4, 1] = -d1
        Jm[:, 4, 2] = -0.5 * rho * np.sqrt(s2 / s1)
        Jm[:, 4, 3] = -0.5 * rho * np.sqrt(s1 / s2)
        Jm[:, 4, 4] = -np.sqrt(s1 * s2)
        return Jm

    def closed_form(Y, X, w):
        W = w.sum()
        mu1, mu2 = w @ Y[:, j1] / W, w @ Y[:, j2] / W
        d1, d2 = Y[:, j1] - mu1, Y[:, j2] - mu2
        s1, s2 = w @ d1**2 / W, w @ d2**2 / W
        if s1 <= 0 or s2 <= 0:
            raise AnalysisError("correlation undefined: a variable is constant in the imputed data")
        return np.array([mu1, mu2, s1, s2, (w @ (d1 * d2) / W) / np.sqrt(s1 * s2)])

    names = (f"mean[{j1}]", f"mean[{j2}]", f"var[{j1}]", f"var[{j2}]", f"corr[{j1},{j2}]")
    return EstimatingFunction(5, evaluate, jacobian, names, closed_form)


def builtin_linear_regression(response: int, regressors: Sequence[int] = (),
                              covariates: Sequence[int] = (),
                              intercept: bool = True) -> EstimatingFunction:
    """Least squares of ``y_response`` on other responses and covariates.

    ``U = (y - theta' X) X`` with ``X = (1, y_regressors, x_covariates)``.
    """
    regressors = list(regressors)
    covariates = list(covariates)

    def design(Y, X):
        parts = [np.ones((Y.shape[0], 1))] if intercept else []
        if regressors:
            parts.append(Y[:, regressors])
        if covariates:
            parts.append(X[:, covariates])
        return np.hstack(parts)

    q = int(intercept) + len(regressors) + len(covariates)
    if q == 0:
        raise ModelError("a regression needs at least one term")

    def evaluate(Y, X, theta):
        Z = design(Y, X)
        return (Y[:, response] - Z @ theta)[:, None] * Z

    def jacobian(Y, X, theta):
        Z = design(Y, X)
        return -Z[:, :, None] * Z[:, None, :]

    def closed_form(Y, X, w):
        Z = design(Y, X)
        A = Z.T @ (w[:, None] * Z)
        return np.linalg.solve(A, Z.T @ (w * Y[:, response]))

    names = (("intercept",) if intercept else ()) + tuple(f"y[{r}]" for r in regressors) \
        + tuple(f"x[{c}]" for c in covariates)
    return EstimatingFunction(q, evaluate, jacobian, tuple(f"coef[{n}]" for n in names),
                              closed_form)


# ---------------------------------------------------------------------------
# pooled estimation


def _weights(imp: ImputationOutput, weights) -> np.ndarray:
    w = imp.weights if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.shape != (imp.N,):
        raise ModelError(f"need {imp.N} weights, got {w.size}")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ModelError("weights must be finite and strictly positive")
    return w


def pooled_terms(imp: ImputationOutput, ef: EstimatingFunction, theta):
    """Per-imputation contributions ``U_i^m`` (M, N, q) and mean Jacobians (N, q, q)."""
    theta = np.asarray(theta, dtype=float)
    U = np.stack([ef.evaluate(Y, imp.x, theta) for Y in imp.datasets])
    dU = np.mean([ef.jacobian(Y, imp.x, theta) for Y in imp.datasets], axis=0)
    return U, dU


def solve_pooled(imp: ImputationOutput, ef: EstimatingFunction, weights=None,
                 theta_init=None, tol: float = 1e-10, max_iter: int = 100):
    """Solve ``sum_i w_i mean_m U_i^m(theta) = 0``.

    Returns ``(theta_hat, newton_iterations)``; zero iterations means the
    closed form was used and already met the tolerance.
    """
    w = _weights(imp, weights)
    if ef.validate is not None:
        ef.validate(imp.datasets)
    M = imp.M
    if ef.closed_form is not None:
        stacked_Y = imp.datasets.reshape(-1, imp.datasets.shape[-1])
        stacked_X = np.tile(imp.x, (M, 1))
        theta = np.asarray(ef.closed_form(stacked_Y, stacked_X, np.tile(w, M) / M), dtype=float)
    elif theta_init is not None:
        theta = np.asarray(theta_init, dtype=float)
    else:
        theta = np.zeros(ef.q)
    bound = tol * w.sum()
    for it in range(max_iter + 1):
        U, dU = pooled_terms(imp, ef, theta)
        G = w @ U.mean(axis=0)
        if np.linalg.norm(G) < bound:
            return theta, it
        if it == max_iter:
            break
        Jm = np.einsum("n,nab->ab", w, dU)
        try:
            step = np.linalg.solve(Jm, G)
        except np.linalg.LinAlgError:
            raise AnalysisError("singular Jacobian in the pooled estimating equations") from None
        theta = theta - step
    raise AnalysisError(
        f"Newton iterations did not converge in {max_iter} steps "
        f"(residual norm {np.linalg.norm(G):.3e})"
    )


@dataclass
class VarianceComponents:
    tau_hat: np.ndarray
    omega_c_hat: np.ndarray
    omega_hat: np.ndarray
    kappa_hat: np.ndarray
    lambda_hat: np.ndarray
    d_i: np.ndarray
    sigma_hat: np.ndarray
    w_eff: float
    pinv_used: bool = False


@dataclass
class AnalysisResult:
    names: tuple[str, ...]
    theta_hat: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    level: float
    components: VarianceComponents = field(repr=False)
    newton_iterations: int = 0

    def to_dict(self, include_components: bool = True) -> dict:
        out = {
            "names": list(self.names),
            "theta_hat": self.theta_hat.tolist(),
            "se": self.se.tolist(),
            "ci_lower": self.ci_lower.tolist(),
            "ci_upper": self.ci_upper.tolist(),
            "level": self.level,
            "flags": {"pinv_used": self.components.pinv_used,
                      "newton_iterations": self.newton_iterations},
            "w_eff": self.components.w_eff,
        }
        if include_components:
            c = self.components
            out["components"] = {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in (("tau_hat", c.tau_hat), ("omega_c_hat", c.omega_c_hat),
                             ("omega_hat", c.omega_hat), ("kappa_hat", c.kappa_hat),
                             ("lambda_hat", c.lambda_hat), ("sigma_hat", c.sigma_hat))
            }
        return out

    def rows(self) -> list[dict]:
        return [dict(estimand=n, estimate=float(t), se=float(s), ci_lower=float(lo),
                     ci_upper=float(hi))
                for n, t, s, lo, hi in zip(self.names, self.theta_hat, self.se,
                                           self.ci_lower, self.ci_upper)]


def _inverse_information(i_obs: np.ndarray) -> tuple[np.ndarray, bool]:
    """Inverse of the Louis information, or a spectral pseudo-inverse.

    The Monte Carlo estimate can be indefinite in weakly identified
    directions.  Eigenvalues within the noise floor ``|min eigenvalue|`` of
    zero are then indistinguishable from zero, so those directions are
    dropped rather than inverted.  The same truncation, at
    ``max eigenvalue / COND_LIMIT``, handles a numerically singular matrix.
    """
    ev, V = np.linalg.eigh(0.5 * (i_obs + i_obs.T))
    floor = max(-ev[0], ev[-1] / COND_LIMIT)
    if ev[0] > floor:
        return np.linalg.inv(i_obs), False
    keep = ev > floor
    warnings.warn(
        f"observed information is {'indefinite' if ev[0] < 0 else 'numerically singular'}; "
        f"using a pseudo-inverse over {int(keep.sum())} of {ev.size} directions",
        RuntimeWarning, stacklevel=3)
    return (V[:, keep] / ev[keep]) @ V[:, keep].T, True


def sandwich_variance(imp: ImputationOutput, ef: EstimatingFunction, theta_hat,
                      weights=None, level: float = 0.95, newton_iterations: int = 0
                      ) -> AnalysisResult:
    """Sandwich variance accounting for estimation of the imputation model.

    With ``Ubar_i`` the imputation average of ``U_i^m``::

        tau   = -(sum w)^-1 sum_i w_i dUbar_i/dtheta'
        kappa = (MN)^-1 sum_i sum_m U_i^m (S_i^m - Sbar_i)'
        D_i   = I_obs^-1 Sbar_i
        psi_i = Ubar_i + kappa D_i
        Omega = (sum w^2)^-1 sum_i w_i^2 psi_i psi_i'
        Sigma = tau^-1 Omega tau^-T,   se = sqrt(diag(Sigma) / W_N)

    where ``W_N = (sum w)^2 / sum w^2``.
    """
    w = _weights(imp, weights)
    theta_hat = np.asarray(theta_hat, dtype=float)
    U, dU = pooled_terms(imp, ef, theta_hat)
    M, N = U.shape[:2]
    Ubar = U.mean(axis=0)
    sw, sw2 = w.sum(), (w**2).sum()
    tau = -np.einsum("n,nab->ab", w, dU) / sw
    S_dev = imp.scores_m - imp.s_bar_obs[None]
    kappa = np.einsum("mna,mnb->ab", U, S_dev) / (M * N)
    i_inv, pinv_used = _inverse_information(imp.i_obs)
    D = imp.s_bar_obs @ i_inv.T
    lam = D.T @ D / N
    psi = Ubar + D @ kappa.T
    w2 = w**2
    omega_c = (Ubar * w2[:, None]).T @ Ubar / sw2
    omega = (psi * w2[:, None]).T @ psi / sw2
    tau_inv = np.linalg.inv(tau)
    sigma = tau_inv @ omega @ tau_inv.T
    sigma = 0.5 * (sigma + sigma.T)
    w_eff = sw**2 / sw2
    se = np.sqrt(np.maximum(np.diag(sigma), 0.0) / w_eff)
    z = norm.ppf(0.5 + level / 2)
    comps = VarianceComponents(tau, omega_c, omega, kappa, lam, D, sigma, float(w_eff), pinv_used)
    return AnalysisResult(ef.names, theta_hat, se, theta_hat - z * se, theta_hat + z * se,
                          level, comps, newton_iterations)


def analyze(imp: ImputationOutput, ef: EstimatingFunction, weights=None, level: float = 0.95,
            theta_init=None) -> AnalysisResult:
    """Pooled estimate plus sandwich variance in one call."""
    theta, iters = solve_pooled(imp, ef, weights, theta_init)
    return sandwich_variance(imp, ef, theta, weights, level, iters)
