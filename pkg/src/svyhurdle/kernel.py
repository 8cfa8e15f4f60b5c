"""Beta-binomial count kernel in mean-precision form, with zero truncation.

The parameterization is (n, mu, kappa) with shape parameters a = mu*kappa,
b = (1-mu)*kappa. Everything that feeds likelihoods or derivatives is
evaluated in log space; the truncation auxiliary sums are closed forms in
digamma/trigamma differences, so no per-observation j-loops appear on hot
paths.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln

from .specfun import digamma, log1mexp, trigamma

__all__ = [
    "MU_LO",
    "MU_HI",
    "KAPPA_LO",
    "KAPPA_HI",
    "ClampWarning",
    "BetaBinParams",
    "IntensityReport",
    "TruncatedMoments",
    "VarianceDecomposition",
    "log_pmf",
    "pmf",
    "zero_prob",
    "log_zero_prob_arrays",
    "moments",
    "factorial_moment",
    "truncated_moments",
    "intensity_report",
    "variance_decomposition",
    "dominance_threshold",
    "sample_ztbb",
    "sample_ztbb_arrays",
]

MU_LO = 1e-12
MU_HI = 1.0 - 1e-12
KAPPA_LO = 1e-8
KAPPA_HI = 1e8


class ClampWarning(UserWarning):
    """Raised (as a warning) when mu or kappa is pulled back into range."""


def _clamped(value: float, lo: float, hi: float, name: str) -> float:
    if value < lo or value > hi:
        warnings.warn(
            f"{name}={value!r} clamped into [{lo!r}, {hi!r}]",
            ClampWarning,
            stacklevel=3,
        )
        return min(max(value, lo), hi)
    return value


@dataclass(frozen=True)
class BetaBinParams:
    """One beta-binomial cell: trial count n, mean fraction mu, precision kappa.

    mu must lie in (0, 1) and kappa must be positive; values inside the open
    domain but outside the numerical box [1e-12, 1-1e-12] x [1e-8, 1e8] are
    clamped with a ClampWarning. n must be a positive integer.
    """

    n: int
    mu: float
    kappa: float

    def __post_init__(self):
        n = self.n
        if not (np.isscalar(n) or isinstance(n, np.integer)) or int(n) != n or int(n) < 1:
            raise ValueError(f"n must be a positive integer, got {n!r}")
        object.__setattr__(self, "n", int(n))
        mu = float(self.mu)
        kappa = float(self.kappa)
        if not np.isfinite(mu) or mu <= 0.0 or mu >= 1.0:
            raise ValueError(f"mu must lie strictly inside (0, 1), got {mu!r}")
        if not np.isfinite(kappa) or kappa <= 0.0:
            raise ValueError(f"kappa must be positive, got {kappa!r}")
        object.__setattr__(self, "mu", _clamped(mu, MU_LO, MU_HI, "mu"))
        object.__setattr__(self, "kappa", _clamped(kappa, KAPPA_LO, KAPPA_HI, "kappa"))

    @property
    def a(self) -> float:
        return self.mu * self.kappa

    @property
    def b(self) -> float:
        return (1.0 - self.mu) * self.kappa


def _check_counts(p: BetaBinParams, y) -> np.ndarray:
    arr = np.asarray(y)
    if arr.size and (np.any(arr != np.floor(arr)) or np.any(arr < 0) or np.any(arr > p.n)):
        raise ValueError(f"counts must be integers in [0, {p.n}]")
    return arr.astype(float)


def log_pmf(p: BetaBinParams, y) -> float | np.ndarray:
    """Log pmf of the (untruncated) beta-binomial at count y.

    Accepts a scalar or array of counts in [0, n].
    """
    arr = _check_counts(p, y)
    scalar = arr.ndim == 0
    arr = np.atleast_1d(arr)
    n, a, b = p.n, p.a, p.b
    out = (
        gammaln(n + 1.0)
        - gammaln(arr + 1.0)
        - gammaln(n - arr + 1.0)
        + betaln(arr + a, n - arr + b)
        - betaln(a, b)
    )
    return float(out[0]) if scalar else out


def pmf(p: BetaBinParams, y) -> float | np.ndarray:
    return np.exp(log_pmf(p, y))


def zero_prob(p: BetaBinParams) -> float:
    """P(Y = 0) as the running product prod_{j<n} ((1-mu)kappa + j)/(kappa + j).

    Evaluated as a log-space sum so large n cannot underflow prematurely.
    """
    j = np.arange(p.n, dtype=float)
    return float(np.exp(np.sum(np.log(p.b + j) - np.log(p.kappa + j))))


def log_zero_prob_arrays(n, mu, kappa) -> np.ndarray:
    """Vectorized log P(Y=0) via the equivalent log-gamma ratio form.

    log p0 = lgam(b+n) - lgam(b) - lgam(kappa+n) + lgam(kappa). Agrees with
    :func:`zero_prob` to float precision; used on array paths.
    """
    n = np.asarray(n, dtype=float)
    mu = np.asarray(mu, dtype=float)
    kappa = np.asarray(kappa, dtype=float)
    b = (1.0 - mu) * kappa
    return gammaln(b + n) - gammaln(b) - gammaln(kappa + n) + gammaln(kappa)


def moments(p: BetaBinParams) -> tuple[float, float]:
    """Mean and variance of the untruncated beta-binomial."""
    mean = p.n * p.mu
    var = p.n * p.mu * (1.0 - p.mu) * (p.n + p.kappa) / (1.0 + p.kappa)
    return mean, var


def factorial_moment(p: BetaBinParams, r: int) -> float:
    """E[Y(Y-1)...(Y-r+1)], the r-th falling factorial moment.

    Equals n^(r-falling) * rising(a, r) / rising(kappa, r) and is exactly
    zero once r exceeds n.
    """
    if int(r) != r or r < 1:
        raise ValueError(f"r must be a positive integer, got {r!r}")
    r = int(r)
    if r > p.n:
        return 0.0
    t = np.arange(r, dtype=float)
    falling = np.prod(p.n - t)
    return float(falling * np.prod((p.a + t) / (p.kappa + t)))


@dataclass(frozen=True)
class TruncatedMoments:
    mean: float
    var: float


def truncated_moments(p: BetaBinParams) -> TruncatedMoments:
    """Mean and variance of Y conditional on Y > 0."""
    lp0 = log_zero_prob_arrays(p.n, p.mu, p.kappa)
    p0 = float(np.exp(lp0))
    pos = float(-np.expm1(lp0))  # 1 - p0, stable near both ends
    m = p.n * p.mu
    _, v = moments(p)
    mean = m / pos
    var = (v * pos - m * m * p0) / (pos * pos)
    return TruncatedMoments(mean=mean, var=var)


@dataclass(frozen=True)
class IntensityReport:
    """Zero-truncation geometry of one cell.

    h is the truncated-to-untruncated mean ratio mu/(1-p0) ("intensity per
    trial"), elasticity = d log h / d log mu, omega = 1 - elasticity, and
    lam/lam2 are the truncation auxiliary sums
    kappa * sum_{j<n} 1/(b+j) and kappa^2 * sum_{j<n} 1/(b+j)^2.
    """

    p0: float
    h: float
    lam: float
    lam2: float
    dh_dmu: float
    elasticity: float
    omega: float


def intensity_report(p: BetaBinParams) -> IntensityReport:
    n, mu, kappa, b = p.n, p.mu, p.kappa, p.b
    if n == 1:
        # one-trial cells are purely extensive: h is identically 1
        lam = kappa / b
        lam2 = (kappa / b) ** 2
        return IntensityReport(
            p0=b / kappa,
            h=1.0,
            lam=lam,
            lam2=lam2,
            dh_dmu=0.0,
            elasticity=0.0,
            omega=1.0,
        )
    lp0 = float(log_zero_prob_arrays(n, mu, kappa))
    p0 = np.exp(lp0)
    pos = -np.expm1(lp0)
    lam = kappa * (digamma(b + n) - digamma(b))
    lam2 = kappa * kappa * (trigamma(b) - trigamma(b + n))
    h = mu / pos
    omega = mu * p0 * lam / pos
    dh = (pos - mu * p0 * lam) / (pos * pos)
    return IntensityReport(
        p0=float(p0),
        h=float(h),
        lam=float(lam),
        lam2=float(lam2),
        dh_dmu=float(dh),
        elasticity=float(1.0 - omega),
        omega=float(omega),
    )


@dataclass(frozen=True)
class VarianceDecomposition:
    """Hurdle-level moment summary at occupancy probability q."""

    mean: float
    var_total: float
    var_conditional: float
    binary_component: float
    variance_ratio: float
    overdispersion: float
    cv_sq_conditional: float
    cv_sq_total: float


def variance_decomposition(p: BetaBinParams, q: float) -> VarianceDecomposition:
    """Moments of the hurdle variable: 0 w.p. 1-q, zero-truncated BB w.p. q.

    variance_ratio is Var(Y)/E[Y]; overdispersion is Var(Y) relative to a
    binomial with success probability pi = q*h.
    """
    q = float(q)
    if not np.isfinite(q) or q <= 0.0 or q > 1.0:
        raise ValueError(f"occupancy probability q must lie in (0, 1], got {q!r}")
    tm = truncated_moments(p)
    rep = intensity_report(p)
    mean = q * tm.mean
    binary = q * (1.0 - q) * tm.mean**2
    var_total = q * tm.var + binary
    vr = var_total / mean
    pi = q * rep.h
    if pi >= 1.0:
        raise ValueError("q*h reached 1; binomial benchmark undefined")
    od = var_total / (p.n * pi * (1.0 - pi))
    cv_cond = tm.var / tm.mean**2
    cv_total = (cv_cond + 1.0 - q) / q
    return VarianceDecomposition(
        mean=mean,
        var_total=var_total,
        var_conditional=tm.var,
        binary_component=binary,
        variance_ratio=vr,
        overdispersion=od,
        cv_sq_conditional=cv_cond,
        cv_sq_total=cv_total,
    )


def dominance_threshold(p: BetaBinParams, q: float) -> float:
    """Coefficient ratio |beta/alpha| above which the intensive margin
    dominates the log-mean response: (1-mu) * elasticity / (1-q).
    """
    q = float(q)
    if not np.isfinite(q) or q <= 0.0 or q >= 1.0:
        raise ValueError(f"q must lie strictly inside (0, 1), got {q!r}")
    rep = intensity_report(p)
    return (1.0 - p.mu) * rep.elasticity / (1.0 - q)


@dataclass(frozen=True)
class ZtbbCellDerivs:
    """Zero-truncated log-density and its derivatives, per cell.

    Derivatives are with respect to mu and c = log kappa (the natural
    coordinates one chain-rules from). Second-order fields are None unless
    requested.
    """

    ll: np.ndarray
    d_mu: np.ndarray
    d_c: np.ndarray
    d_mumu: np.ndarray | None = None
    d_muc: np.ndarray | None = None
    d_cc: np.ndarray | None = None


def ztbb_cell_derivs(y, n, mu, kappa: float, order: int = 1) -> ZtbbCellDerivs:
    """Evaluate the zero-truncated beta-binomial log pmf and its mu / log-kappa
    derivatives for arrays of cells sharing kappa.

    All truncation sums are closed forms in digamma/trigamma differences:
    sum 1/(b+j) = psi(b+n)-psi(b), sum 1/(b+j)^2 = psi1(b)-psi1(b+n), and the
    weighted sum behind the log-kappa score reduces by partial fractions to
    digamma differences at kappa and b.
    """
    y = np.asarray(y, dtype=float)
    n = np.asarray(n, dtype=float)
    mu = np.asarray(mu, dtype=float)
    kappa = float(kappa)
    a = mu * kappa
    b = (1.0 - mu) * kappa

    lp0 = gammaln(b + n) - gammaln(b) - gammaln(kappa + n) + gammaln(kappa)
    p0 = np.exp(lp0)
    pos = -np.expm1(lp0)
    ll = (
        gammaln(n + 1.0)
        - gammaln(y + 1.0)
        - gammaln(n - y + 1.0)
        + betaln(y + a, n - y + b)
        - betaln(a, b)
        - log1mexp(lp0)
    )

    pya = digamma(y + a)
    pnyb = digamma(n - y + b)
    pa = digamma(a)
    pb = digamma(b)
    pbn = digamma(b + n)
    pk = digamma(np.full_like(n, kappa))
    pkn = digamma(kappa + n)
    dA = pya - pa
    dB = pnyb - pb
    G = pbn - pb
    dK0 = pkn - pk

    Rp = p0 / pos
    lam = kappa * G
    S = kappa * (dA - dB)
    d_mu = S - Rp * lam
    W = kappa * ((1.0 - mu) * G - dK0)
    u0 = kappa * (mu * dA + (1.0 - mu) * dB - dK0)
    d_c = u0 + Rp * W

    if order < 2:
        return ZtbbCellDerivs(ll=ll, d_mu=d_mu, d_c=d_c)

    qya = trigamma(y + a)
    qnyb = trigamma(n - y + b)
    qa = trigamma(a)
    qb = trigamma(b)
    qbn = trigamma(b + n)
    qk = trigamma(np.full_like(n, kappa))
    qkn = trigamma(kappa + n)
    G2 = qb - qbn
    K2 = qk - qkn
    lam2 = kappa * kappa * G2

    Sp = kappa * kappa * (qya + qnyb - qa - qb)
    Tp = Rp * (lam2 - lam * lam / pos)
    d_mumu = Sp - Tp

    dS_dc = S + kappa * kappa * (mu * (qya - qa) - (1.0 - mu) * (qnyb - qb))
    dT_dc = Rp * (lam * W / pos + lam - kappa * kappa * (1.0 - mu) * G2)
    d_muc = dS_dc - dT_dc

    du0_dc = u0 + kappa * kappa * (
        mu * mu * (qya - qa) + (1.0 - mu) * (1.0 - mu) * (qnyb - qb) + K2
    )
    dW_dc = W + kappa * kappa * (K2 - (1.0 - mu) * (1.0 - mu) * G2)
    d_cc = du0_dc + Rp * (W * W / pos + dW_dc)

    return ZtbbCellDerivs(
        ll=ll, d_mu=d_mu, d_c=d_c, d_mumu=d_mumu, d_muc=d_muc, d_cc=d_cc
    )


def sample_ztbb(p: BetaBinParams, rng: np.random.Generator, max_tries: int = 10_000) -> int:
    """One zero-truncated beta-binomial draw by rejection."""
    for _ in range(max_tries):
        prob = rng.beta(p.a, p.b)
        y = int(rng.binomial(p.n, prob))
        if y > 0:
            return y
    raise RuntimeError(
        f"zero-truncated rejection cap {max_tries} exhausted at cell "
        f"(n={p.n}, mu={p.mu}, kappa={p.kappa})"
    )


def sample_ztbb_arrays(
    n,
    mu,
    kappa: float,
    rng: np.random.Generator,
    max_tries: int = 10_000,
) -> np.ndarray:
    """Vectorized zero-truncated sampling over cell arrays (shared kappa).

    Rejection proceeds in rounds over the still-pending cells; a cell that
    exhausts max_tries raises, naming the first offending cell.
    """
    n = np.asarray(n, dtype=np.int64)
    mu = np.asarray(mu, dtype=float)
    if n.shape != mu.shape:
        raise ValueError("n and mu must have matching shapes")
    a = mu * kappa
    b = (1.0 - mu) * kappa
    out = np.zeros(n.shape, dtype=np.int64)
    pending = np.ones(n.shape, dtype=bool)
    for _ in range(max_tries):
        if not pending.any():
            return out
        idx = np.flatnonzero(pending)
        prob = rng.beta(a[idx], b[idx])
        draw = rng.binomial(n[idx], prob)
        hit = draw > 0
        out[idx[hit]] = draw[hit]
        pending[idx[hit]] = False
    first = int(np.flatnonzero(pending)[0])
    raise RuntimeError(
        f"zero-truncated rejection cap {max_tries} exhausted at cell index "
        f"{first} (n={int(n.flat[first])}, mu={float(mu.flat[first])}, kappa={kappa})"
    )
