"""Random variate generation.

Pólya-Gamma PG(b, c) for b in {1, 2}, truncated normal by inverse transform,
multivariate normal from a precision matrix, and counter-based RNG streams.
All samplers are vectorized over their parameter arrays.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit, log_ndtr, ndtr, ndtri

_TRUNC = 0.64
_PI2 = np.pi**2
_MASK64 = (1 << 64) - 1


class RngStream:
    """A Philox counter-based stream keyed by ``(master_seed, stream_id)``.

    Draws depend only on the key and on how many numbers were consumed, so
    equal keys reproduce equal sequences whatever the execution order of
    other streams.
    """

    def __init__(self, master_seed: int, stream_id: int = 0):
        self.master_seed = int(master_seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = self.master_seed | (self.stream_id << 64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    @property
    def counter(self) -> int:
        state = self.generator.bit_generator.state["state"]
        counter = state["counter"]
        return int(sum(int(c) << (64 * i) for i, c in enumerate(counter)))

    def __repr__(self):
        return f"RngStream(master_seed={self.master_seed}, stream_id={self.stream_id})"


def stream_id(*parts: int) -> int:
    """Deterministic 64-bit id for a tuple of small non-negative integers."""
    seq = np.random.SeedSequence([int(p) for p in parts])
    return int(seq.generate_state(1, np.uint64)[0])


def _gen(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


# ---------------------------------------------------------------------------
# Pólya-Gamma


def _a_coef(n: int, x: np.ndarray) -> np.ndarray:
    """n-th term of the alternating series for the J*(1, z) density."""
    K = (n + 0.5) * np.pi
    out = np.empty_like(x)
    big = x > _TRUNC
    out[big] = K * np.exp(-0.5 * K * K * x[big])
    xs = x[~big]
    with np.errstate(divide="ignore"):
        expnt = -1.5 * (np.log(0.5 * np.pi) + np.log(xs)) + np.log(K) - 2.0 * (n + 0.5) ** 2 / xs
    out[~big] = np.where(xs > 0, np.exp(expnt), 0.0)
    return out


def _mass_texpon(z: np.ndarray) -> np.ndarray:
    t = _TRUNC
    fz = 0.125 * _PI2 + 0.5 * z * z
    b = np.sqrt(1.0 / t) * (t * z - 1.0)
    a = -np.sqrt(1.0 / t) * (t * z + 1.0)
    x0 = np.log(fz) + fz * t
    xb = x0 - z + log_ndtr(b)
    xa = x0 + z + log_ndtr(a)
    # p / (p + q) with q / p = 4/pi (e^xb + e^xa), evaluated on the log scale
    return expit(-np.log(4.0 / np.pi) - np.logaddexp(xb, xa))


def _rtigauss(z: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Inverse-Gaussian(1/z, 1) truncated to (0, 0.64]."""
    t = _TRUNC
    out = np.empty_like(z)
    small = z < 1.0 / t
    # mean above the truncation point: proposal from the 1/z = 0 limit
    pending = np.flatnonzero(small)
    while pending.size:
        m = pending.size
        E1 = gen.standard_exponential(m)
        E2 = gen.standard_exponential(m)
        bad = E1 * E1 > 2.0 * E2 / t
        while bad.any():
            k = int(bad.sum())
            E1[bad] = gen.standard_exponential(k)
            E2[bad] = gen.standard_exponential(k)
            bad = E1 * E1 > 2.0 * E2 / t
        X = t / (1.0 + E1 * t) ** 2
        zz = z[pending]
        ok = gen.random(m) <= np.exp(-0.5 * zz * zz * X)
        out[pending[ok]] = X[ok]
        pending = pending[~ok]
    pending = np.flatnonzero(~small)
    while pending.size:
        m = pending.size
        mu = 1.0 / z[pending]
        Y = gen.standard_normal(m) ** 2
        muY = mu * Y
        X = mu + 0.5 * mu * muY - 0.5 * mu * np.sqrt(4.0 * muY + muY * muY)
        flip = gen.random(m) > mu / (mu + X)
        X[flip] = mu[flip] ** 2 / X[flip]
        ok = X <= t
        out[pending[ok]] = X[ok]
        pending = pending[~ok]
    return out


def _pg1(c: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Exact PG(1, c) by the alternating-series accept/reject method."""
    z = 0.5 * np.abs(c)
    out = np.empty_like(z)
    pending = np.arange(z.size)
    while pending.size:
        zz = z[pending]
        m = zz.size
        fz = 0.125 * _PI2 + 0.5 * zz * zz
        X = np.empty(m)
        use_exp = gen.random(m) < _mass_texpon(zz)
        k = int(use_exp.sum())
        X[use_exp] = _TRUNC + gen.standard_exponential(k) / fz[use_exp]
        X[~use_exp] = _rtigauss(zz[~use_exp], gen)
        S = _a_coef(0, X)
        Y = gen.random(m) * S
        accepted = np.zeros(m, dtype=bool)
        active = np.arange(m)
        n = 0
        while active.size:
            n += 1
            Xa = X[active]
            if n % 2 == 1:
                S[active] -= _a_coef(n, Xa)
                hit = Y[active] <= S[active]
                accepted[active[hit]] = True
                active = active[~hit]
            else:
                S[active] += _a_coef(n, Xa)
                active = active[Y[active] <= S[active]]
        out[pending[accepted]] = 0.25 * X[accepted]
        pending = pending[~accepted]
    return out


def sample_pg(b: int, c, rng) -> np.ndarray:
    """Draw from PG(b, c) for ``b`` in {1, 2}; ``c`` may be an array.

    PG(2, c) is the sum of two independent PG(1, c) draws.
    """
    if b not in (1, 2):
        raise ValueError(f"PG(b, c) is only supported for b in {{1, 2}}, got b={b}")
    gen = _gen(rng)
    c = np.asarray(c, dtype=float)
    if not np.all(np.isfinite(c)):
        raise ValueError("PG tilting parameter must be finite")
    flat = c.reshape(-1)
    out = _pg1(flat, gen)
    if b == 2:
        out = out + _pg1(flat, gen)
    return out.reshape(c.shape) if c.ndim else float(out[0])


def sample_pg_series(b: float, c, rng, terms: int = 200) -> np.ndarray:
    """PG(b, c) from the Gamma-series representation truncated at ``terms``.

    Biased low by the omitted tail; kept as an independent reference.
    """
    gen = _gen(rng)
    c = np.atleast_1d(np.asarray(c, dtype=float))
    k = np.arange(1, terms + 1)
    denom = (k - 0.5) ** 2 + c[:, None] ** 2 / (4.0 * _PI2)
    g = gen.gamma(b, 1.0, size=denom.shape)
    return (g / denom).sum(axis=1) / (2.0 * _PI2)


def pg_mean(b: float, c) -> np.ndarray:
    """E[PG(b, c)] = b / (2c) tanh(c / 2), with limit b / 4 at c = 0."""
    c = np.abs(np.asarray(c, dtype=float))
    safe = np.where(c < 1e-8, 1.0, c)
    return np.where(c < 1e-8, b / 4.0, b / (2.0 * safe) * np.tanh(safe / 2.0))


def pg_var(b: float, c) -> np.ndarray:
    """Var[PG(b, c)] = b (sinh c - c) / (4 c^3 cosh^2(c/2)), limit b / 24 at 0."""
    c = np.abs(np.asarray(c, dtype=float))
    safe = np.where(c < 1e-4, 1.0, c)
    full = b * (np.sinh(safe) - safe) / (4.0 * safe**3 * np.cosh(safe / 2.0) ** 2)
    return np.where(c < 1e-4, b / 24.0, full)


# ---------------------------------------------------------------------------
# truncated normal


def _tail_exponential(c: np.ndarray, upper: np.ndarray, gen) -> np.ndarray:
    """Standard normal restricted to (c, upper] with c large; exponential proposal."""
    out = np.empty_like(c)
    pending = np.arange(c.size)
    while pending.size:
        cc = c[pending]
        lam = 0.5 * (cc + np.sqrt(cc * cc + 4.0))
        x = cc + gen.standard_exponential(pending.size) / lam
        ok = (gen.random(pending.size) <= np.exp(-0.5 * (x - lam) ** 2)) & (x <= upper[pending])
        out[pending[ok]] = x[ok]
        pending = pending[~ok]
    return out


def sample_truncnorm(mu, sigma, lower, upper, rng) -> np.ndarray:
    """Draw from N(mu, sigma^2) restricted to (lower, upper].

    Inverse-CDF transform ``mu + sigma * Phi^-1(U (q(upper) - q(lower)) + q(lower))``
    evaluated in whichever tail keeps the CDF values accurate; an exponential
    tail sampler takes over when the interval mass underflows.
    """
    gen = _gen(rng)
    mu, sigma, lower, upper = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (mu, sigma, lower, upper))
    )
    shape = mu.shape
    mu, sigma, lower, upper = (v.reshape(-1) for v in (mu, sigma, lower, upper))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if np.any(~(lower < upper)):
        raise ValueError("truncation bounds need lower < upper")
    a = (lower - mu) / sigma
    b = (upper - mu) / sigma
    # reflect intervals in the upper tail so Phi is evaluated where it is precise
    flip = a > 0
    sign = np.where(flip, -1.0, 1.0)
    a, b = np.where(flip, -b, a), np.where(flip, -a, b)
    qa, qb = ndtr(a), ndtr(b)
    mass = qb - qa
    U = gen.random(mu.size)
    x = np.empty(mu.size)
    ok = mass > 1e-300
    with np.errstate(invalid="ignore"):
        x[ok] = ndtri(U[ok] * mass[ok] + qa[ok])
    bad = ~ok | ~np.isfinite(x)
    if bad.any():
        # far lower tail: sample -x from the upper tail (-b, -a]
        x[bad] = -_tail_exponential(-b[bad], -a[bad], gen)
    x = np.clip(x, np.nextafter(a, np.inf), b)
    w = mu + sigma * sign * x
    # reflection flips the open end; keep draws inside (lower, upper]
    w = np.clip(w, np.nextafter(lower, np.inf), upper)
    return w.reshape(shape) if shape else float(w[0])


# ---------------------------------------------------------------------------
# multivariate normal


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, minor: int, unit: int | None = None):
        self.minor = minor
        self.unit = unit
        where = "" if unit is None else f" (batch item {unit})"
        super().__init__(f"precision matrix not positive definite: leading minor {minor} fails{where}")


def _leading_minor_failure(P: np.ndarray) -> int:
    for k in range(1, P.shape[0] + 1):
        try:
            np.linalg.cholesky(P[:k, :k])
        except np.linalg.LinAlgError:
            return k
    return P.shape[0]


def sample_mvn_precision(h, P, rng) -> np.ndarray:
    """Draw from N(P^-1 h, P^-1); batched over leading axes of ``h`` and ``P``."""
    gen = _gen(rng)
    h = np.asarray(h, dtype=float)
    P = np.asarray(P, dtype=float)
    single = h.ndim == 1
    h2 = h.reshape(-1, h.shape[-1])
    P2 = P.reshape(-1, P.shape[-1], P.shape[-1])
    try:
        L = np.linalg.cholesky(P2)
    except np.linalg.LinAlgError:
        for i, Pi in enumerate(P2):
            try:
                np.linalg.cholesky(Pi)
            except np.linalg.LinAlgError:
                raise CholeskyError(_leading_minor_failure(Pi), None if single else i) from None
        raise
    eps = gen.standard_normal(h2.shape)
    # mean via the factor: P^-1 h = L^-T L^-1 h
    Lt = np.swapaxes(L, -1, -2)
    w = np.linalg.solve(L, h2[..., None])
    draw = np.linalg.solve(Lt, w + eps[..., None])[..., 0]
    return draw[0] if single else draw.reshape(h.shape)
