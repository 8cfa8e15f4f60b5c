"""Hierarchical two-part model: data containers, parameters, likelihood, priors.

Structure: a logistic occupancy margin and a zero-truncated beta-binomial
count margin share covariates; state-level deviations on a configurable
subset of coefficients are built from scaled, correlated standard-normal
auxiliaries (non-centered), optionally regressed on a state policy matrix.

Free-vector layout (the order every optimizer/sampler sees):

    alpha (P) | beta (P) | log_kappa | log_tau (2q) | corr CPC coords |
    z_aux (state-major, 2q per state) | vec(gamma_ext) | vec(gamma_int)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import betaln as _betaln
from scipy.special import expit, gammaln

from . import kernel
from .specfun import log1mexp

__all__ = [
    "VARIANTS",
    "Observation",
    "Dataset",
    "ModelStructure",
    "ParamVector",
    "LoglikParts",
    "MarginalEffect",
    "PovertyExpansion",
    "n_free",
    "param_names",
    "fixed_names",
    "flatten",
    "unflatten",
    "linear_predictors",
    "loglik",
    "log_prior",
    "log_posterior_and_grad",
    "lae_lie",
    "lae_lie_components",
    "ame_decompose",
    "poverty_expansion",
    "reversal_probability",
]

VARIANTS = ("m0", "m1", "m2", "m3a", "m3b")

ALPHA_SD = 2.0
LOGKAPPA_MEAN = 2.0
LOGKAPPA_SD = 1.5
GAMMA_SD = 1.0
GAMMA_INTERCEPT_SD = 0.5
LKJ_ETA = 2.0

_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# data containers


@dataclass(frozen=True)
class Observation:
    """A single cell: y events out of n trials, covariates x, design labels."""

    y: int
    n: int
    x: np.ndarray
    state: int = 0
    stratum: int = 0
    psu: int = 0
    weight: float = 1.0

    def __post_init__(self):
        if int(self.n) < 1:
            raise ValueError(f"n must be >= 1, got {self.n!r}")
        if not 0 <= int(self.y) <= int(self.n):
            raise ValueError(f"y must lie in [0, n], got y={self.y!r}, n={self.n!r}")
        if self.weight <= 0 or not np.isfinite(self.weight):
            raise ValueError(f"weight must be positive, got {self.weight!r}")
        x = np.asarray(self.x, dtype=float)
        if x.ndim != 1 or not np.all(np.isfinite(x)):
            raise ValueError("x must be a finite 1-d vector")
        object.__setattr__(self, "x", x)


class Dataset:
    """Column-oriented view of the observations.

    Validation on construction: n >= 1 everywhere (zero-trial rows are
    rejected), 0 <= y <= n, finite covariates, positive raw weights. Rows
    with y > 0 and n < 3 are counted and warned about, since the count
    margin's precision is not identified from such cells alone.
    """

    def __init__(self, y, n, X, state=None, stratum=None, psu=None, weight=None,
                 columns: Sequence[str] | None = None):
        y = np.asarray(y, dtype=np.int64)
        n = np.asarray(n, dtype=np.int64)
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.shape[0] or n.shape != y.shape:
            raise ValueError("y, n, X must have matching first dimensions")
        if np.any(n < 1):
            raise ValueError("zero-trial rows are not allowed; drop n=0 cells upstream")
        if np.any(y < 0) or np.any(y > n):
            raise ValueError("counts must satisfy 0 <= y <= n")
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates must be finite")
        N = y.shape[0]
        self.y = y
        self.n = n
        self.X = X
        self.state = self._index_col(state, N, "state")
        self.stratum = self._index_col(stratum, N, "stratum")
        if psu is None:
            psu = np.arange(N)
        self.psu = self._index_col(psu, N, "psu")
        if weight is None:
            weight = np.ones(N)
        self.weight = np.asarray(weight, dtype=float)
        if self.weight.shape != (N,) or np.any(~np.isfinite(self.weight)) or np.any(self.weight <= 0):
            raise ValueError("weights must be finite and strictly positive")
        self.columns = list(columns) if columns is not None else [f"x{j+1}" for j in range(X.shape[1])]
        if len(self.columns) != X.shape[1]:
            raise ValueError("column names must match covariate count")
        thin = int(np.sum((y > 0) & (n < 3)))
        if thin:
            warnings.warn(
                f"{thin} positive-count rows have n < 3; the count margin's "
                "precision is weakly identified from such cells",
                UserWarning,
                stacklevel=2,
            )

    @staticmethod
    def _index_col(values, N, name):
        if values is None:
            return np.zeros(N, dtype=np.int64)
        arr = np.asarray(values, dtype=np.int64)
        if arr.shape != (N,) or np.any(arr < 0):
            raise ValueError(f"{name} must be nonnegative integer codes of length {N}")
        return arr

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]

    @property
    def n_cov(self) -> int:
        return self.X.shape[1]

    @property
    def n_states(self) -> int:
        return int(self.state.max()) + 1 if len(self) else 0

    def row(self, i: int) -> Observation:
        return Observation(
            y=int(self.y[i]),
            n=int(self.n[i]),
            x=self.X[i].copy(),
            state=int(self.state[i]),
            stratum=int(self.stratum[i]),
            psu=int(self.psu[i]),
            weight=float(self.weight[i]),
        )

    @classmethod
    def from_observations(cls, rows: Sequence[Observation]) -> "Dataset":
        return cls(
            y=[r.y for r in rows],
            n=[r.n for r in rows],
            X=np.vstack([r.x for r in rows]),
            state=[r.state for r in rows],
            stratum=[r.stratum for r in rows],
            psu=[r.psu for r in rows],
            weight=[r.weight for r in rows],
        )


# ---------------------------------------------------------------------------
# model structure


@dataclass(frozen=True)
class ModelStructure:
    """Dimensions and wiring of one model variant.

    q is the number of deviation coordinates per margin (0: none, 1:
    intercepts, P: every coefficient). cross_margin couples the two margins'
    deviations through one joint correlation block; otherwise each margin
    carries its own block. policy (S x Q, first column an intercept) enables
    the policy regression on the deviations.
    """

    variant: str
    P: int
    S: int
    q: int
    cross_margin: bool = False
    policy: np.ndarray | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.policy is not None:
            pol = np.asarray(self.policy, dtype=float)
            if pol.ndim != 2 or pol.shape[0] != self.S:
                raise ValueError("policy matrix must be S x Q")
            if not np.allclose(pol[:, 0], 1.0):
                raise ValueError("policy matrix must carry an intercept first column")
            object.__setattr__(self, "policy", pol)

    @classmethod
    def for_variant(cls, variant: str, P: int, S: int,
                    policy: np.ndarray | None = None) -> "ModelStructure":
        if variant == "m0":
            return cls(variant, P, S, q=0)
        if variant == "m1":
            return cls(variant, P, S, q=1)
        if variant == "m2":
            return cls(variant, P, S, q=P)
        if variant == "m3a":
            return cls(variant, P, S, q=P, cross_margin=True)
        if variant == "m3b":
            if policy is None:
                raise ValueError("m3b requires a state policy matrix")
            return cls(variant, P, S, q=P, cross_margin=True, policy=policy)
        raise ValueError(f"unknown variant {variant!r}")

    @property
    def Q(self) -> int:
        return 0 if self.policy is None else self.policy.shape[1]

    @property
    def n_cpc(self) -> int:
        if self.q == 0:
            return 0
        if self.cross_margin:
            K = 2 * self.q
            return K * (K - 1) // 2
        return self.q * (self.q - 1)  # two blocks of q(q-1)/2

    @property
    def deviation_cols(self) -> np.ndarray:
        """Covariate columns that receive state deviations (first q)."""
        return np.arange(self.q)


class LoglikParts(NamedTuple):
    total: float
    extensive: float
    intensive: float


# ---------------------------------------------------------------------------
# CPC (canonical partial correlation) parameterization of correlation Cholesky


def _chol_from_cpc_block(z: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Build a correlation Cholesky factor from partial-correlation coords.

    z is the row-major lower triangle (length K(K-1)/2), each entry in
    (-1, 1). Returns (L, C) where C holds the running sqrt products needed
    by the reverse pass: C[i, j] = prod_{m<j} sqrt(1 - z_im^2), C[i, i] = L[i, i].
    """
    L = np.eye(K)
    C = np.ones((K, K))
    pos = 0
    for i in range(1, K):
        c = 1.0
        for j in range(i):
            C[i, j] = c
            zij = z[pos]
            L[i, j] = zij * c
            c = c * np.sqrt(1.0 - zij * zij)
            pos += 1
        L[i, i] = c
        C[i, i] = c
    return L, C


def _cpc_from_chol_block(L: np.ndarray) -> np.ndarray:
    K = L.shape[0]
    out = np.empty(K * (K - 1) // 2)
    pos = 0
    for i in range(1, K):
        c = 1.0
        for j in range(i):
            zij = L[i, j] / c
            out[pos] = zij
            c = c * np.sqrt(1.0 - zij * zij)
            pos += 1
    return out


def _cpc_vjp_block(Lbar: np.ndarray, z: np.ndarray, L: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. L back to the partial-correlation coords."""
    K = L.shape[0]
    out = np.zeros_like(z)
    pos = 0
    for i in range(1, K):
        for j in range(i):
            zij = z[pos]
            tail = float(np.dot(Lbar[i, j + 1 : i + 1], L[i, j + 1 : i + 1]))
            out[pos] = C[i, j] * Lbar[i, j] - zij / (1.0 - zij * zij) * tail
            pos += 1
    return out


def _cpc_blocks(ms: ModelStructure) -> list[int]:
    if ms.q == 0:
        return []
    return [2 * ms.q] if ms.cross_margin else [ms.q, ms.q]


def _chol_from_cpc(ms: ModelStructure, z: np.ndarray):
    """Assemble the (2q x 2q) Cholesky factor from all blocks' coords."""
    K = 2 * ms.q
    L = np.eye(K)
    auxes = []
    off_coord = 0
    off_dim = 0
    for k in _cpc_blocks(ms):
        m = k * (k - 1) // 2
        Lb, Cb = _chol_from_cpc_block(z[off_coord : off_coord + m], k)
        L[off_dim : off_dim + k, off_dim : off_dim + k] = Lb
        auxes.append((off_coord, off_dim, k, Cb))
        off_coord += m
        off_dim += k
    return L, auxes


def _cpc_exponent_alphas(K: int, eta: float = LKJ_ETA) -> np.ndarray:
    """Beta shape per CPC coordinate for an LKJ(eta) block of size K.

    The coordinate in column j (0-based) is a partial correlation given j
    earlier variables and carries shape eta + (K - 2 - j)/2.
    """
    alphas = np.empty(K * (K - 1) // 2)
    pos = 0
    for i in range(1, K):
        for j in range(i):
            alphas[pos] = eta + 0.5 * (K - 2 - j)
            pos += 1
    return alphas


def _cpc_all_alphas(ms: ModelStructure) -> np.ndarray:
    parts = [_cpc_exponent_alphas(k) for k in _cpc_blocks(ms)]
    return np.concatenate(parts) if parts else np.empty(0)


# ---------------------------------------------------------------------------
# parameter vector


@dataclass
class ParamVector:
    """Structured parameters of one variant.

    tau holds the 2q deviation scales (extensive first), corr_chol the
    (2q x 2q) correlation Cholesky factor, z_aux the S x 2q standard-normal
    auxiliaries, and gamma_ext/gamma_int the q x Q policy loadings (m3b
    only, None otherwise).
    """

    alpha: np.ndarray
    beta: np.ndarray
    log_kappa: float
    tau: np.ndarray = field(default_factory=lambda: np.empty(0))
    corr_chol: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    z_aux: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    gamma_ext: np.ndarray | None = None
    gamma_int: np.ndarray | None = None

    @property
    def kappa(self) -> float:
        return float(np.exp(self.log_kappa))

    @classmethod
    def zeros(cls, ms: ModelStructure, log_kappa: float = LOGKAPPA_MEAN,
              tau0: float = 0.25) -> "ParamVector":
        two_q = 2 * ms.q
        return cls(
            alpha=np.zeros(ms.P),
            beta=np.zeros(ms.P),
            log_kappa=log_kappa,
            tau=np.full(two_q, tau0),
            corr_chol=np.eye(two_q),
            z_aux=np.zeros((ms.S, two_q)),
            gamma_ext=np.zeros((ms.q, ms.Q)) if ms.variant == "m3b" else None,
            gamma_int=np.zeros((ms.q, ms.Q)) if ms.variant == "m3b" else None,
        )

    def deltas(self, ms: ModelStructure) -> np.ndarray:
        """State deviation matrix (S x 2q): diag(tau) L z_s plus policy part."""
        if ms.q == 0:
            return np.zeros((ms.S, 0))
        scaled = self.z_aux @ self.corr_chol.T * self.tau[None, :]
        if ms.variant == "m3b":
            scaled = scaled.copy()
            scaled[:, : ms.q] += ms.policy @ self.gamma_ext.T
            scaled[:, ms.q :] += ms.policy @ self.gamma_int.T
        return scaled


def n_free(ms: ModelStructure) -> int:
    return 2 * ms.P + 1 + 2 * ms.q + ms.n_cpc + ms.S * 2 * ms.q + 2 * ms.q * ms.Q


def _offsets(ms: ModelStructure) -> dict[str, slice]:
    P, q = ms.P, ms.q
    two_q = 2 * q
    ofs = {}
    pos = 0
    for name, size in [
        ("alpha", P),
        ("beta", P),
        ("log_kappa", 1),
        ("log_tau", two_q),
        ("cpc", ms.n_cpc),
        ("z_aux", ms.S * two_q),
        ("gamma_ext", q * ms.Q),
        ("gamma_int", q * ms.Q),
    ]:
        ofs[name] = slice(pos, pos + size)
        pos += size
    return ofs


def flatten(theta: ParamVector, ms: ModelStructure) -> np.ndarray:
    out = np.empty(n_free(ms))
    ofs = _offsets(ms)
    out[ofs["alpha"]] = theta.alpha
    out[ofs["beta"]] = theta.beta
    out[ofs["log_kappa"]] = theta.log_kappa
    if ms.q:
        out[ofs["log_tau"]] = np.log(theta.tau)
        if ms.n_cpc:
            zs = []
            off = 0
            for k in _cpc_blocks(ms):
                zs.append(_cpc_from_chol_block(theta.corr_chol[off : off + k, off : off + k]))
                off += k
            out[ofs["cpc"]] = np.arctanh(np.concatenate(zs))
        out[ofs["z_aux"]] = theta.z_aux.reshape(-1)
        if ms.variant == "m3b":
            out[ofs["gamma_ext"]] = theta.gamma_ext.reshape(-1)
            out[ofs["gamma_int"]] = theta.gamma_int.reshape(-1)
    return out


def unflatten(vec: np.ndarray, ms: ModelStructure) -> ParamVector:
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (n_free(ms),):
        raise ValueError(f"expected free vector of length {n_free(ms)}, got {vec.shape}")
    ofs = _offsets(ms)
    two_q = 2 * ms.q
    tau = np.exp(vec[ofs["log_tau"]])
    if ms.n_cpc:
        L, _ = _chol_from_cpc(ms, np.tanh(vec[ofs["cpc"]]))
    else:
        L = np.eye(two_q)
    return ParamVector(
        alpha=vec[ofs["alpha"]].copy(),
        beta=vec[ofs["beta"]].copy(),
        log_kappa=float(vec[ofs["log_kappa"]][0]),
        tau=tau,
        corr_chol=L,
        z_aux=vec[ofs["z_aux"]].reshape(ms.S, two_q).copy(),
        gamma_ext=vec[ofs["gamma_ext"]].reshape(ms.q, ms.Q).copy() if ms.variant == "m3b" else None,
        gamma_int=vec[ofs["gamma_int"]].reshape(ms.q, ms.Q).copy() if ms.variant == "m3b" else None,
    )


def param_names(ms: ModelStructure, columns: Sequence[str] | None = None) -> list[str]:
    cols = list(columns) if columns is not None else [f"x{j+1}" for j in range(ms.P)]
    names = [f"alpha_{c}" for c in cols] + [f"beta_{c}" for c in cols] + ["log_kappa"]
    dev = [cols[j] for j in range(ms.q)]
    names += [f"log_tau_ext_{c}" for c in dev] + [f"log_tau_int_{c}" for c in dev]
    names += [f"cpc_{i}" for i in range(ms.n_cpc)]
    for s in range(ms.S):
        names += [f"z_ext_{c}_s{s}" for c in dev] + [f"z_int_{c}_s{s}" for c in dev]
    if ms.variant == "m3b":
        names += [f"gamma_ext_{c}_p{r}" for c in dev for r in range(ms.Q)]
        names += [f"gamma_int_{c}_p{r}" for c in dev for r in range(ms.Q)]
    return names


def fixed_names(ms: ModelStructure, columns: Sequence[str] | None = None) -> list[str]:
    """Names of the fixed-effect block (alpha, beta, log_kappa)."""
    return param_names(ms, columns)[: 2 * ms.P + 1]


# ---------------------------------------------------------------------------
# predictors and likelihood


def linear_predictors(theta: ParamVector, ds: Dataset, ms: ModelStructure):
    """Both margins' linear predictors for every observation."""
    deltas = theta.deltas(ms)
    eta_ext = ds.X @ theta.alpha
    eta_int = ds.X @ theta.beta
    if ms.q:
        Xr = ds.X[:, ms.deviation_cols]
        eta_ext = eta_ext + np.sum(Xr * deltas[ds.state, : ms.q], axis=1)
        eta_int = eta_int + np.sum(Xr * deltas[ds.state, ms.q :], axis=1)
    return eta_ext, eta_int


def _norm_weights(ds: Dataset, weights) -> np.ndarray:
    if weights is None:
        return np.ones(len(ds))
    w = np.asarray(weights, dtype=float)
    if w.shape != (len(ds),):
        raise ValueError("weights must match the number of observations")
    if np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and strictly positive")
    if abs(w.sum() - len(ds)) > 1e-6 * len(ds):
        raise ValueError(
            "weights must be normalized to sum to the observation count "
            "(use survey.normalize_weights)"
        )
    return w


def _mu_from_eta(eta: np.ndarray) -> np.ndarray:
    return np.clip(expit(eta), kernel.MU_LO, kernel.MU_HI)


def loglik(theta: ParamVector, ds: Dataset, ms: ModelStructure, weights=None) -> LoglikParts:
    """Weighted log-likelihood, split by margin; total is their exact sum."""
    w = _norm_weights(ds, weights)
    eta_ext, eta_int = linear_predictors(theta, ds, ms)
    z = (ds.y > 0).astype(float)
    ll_ext = float(np.sum(w * (z * eta_ext - np.logaddexp(0.0, eta_ext))))
    pos = ds.y > 0
    mu = _mu_from_eta(eta_int[pos])
    kap = float(np.clip(theta.kappa, kernel.KAPPA_LO, kernel.KAPPA_HI))
    yp, np_ = ds.y[pos].astype(float), ds.n[pos].astype(float)
    a, b = mu * kap, (1.0 - mu) * kap
    log_bb = (
        gammaln(np_ + 1.0)
        - gammaln(yp + 1.0)
        - gammaln(np_ - yp + 1.0)
        + _betaln(yp + a, np_ - yp + b)
        - _betaln(a, b)
    )
    lp0 = kernel.log_zero_prob_arrays(np_, mu, kap)
    ll_int = float(np.sum(w[pos] * (log_bb - log1mexp(lp0))))
    return LoglikParts(total=ll_ext + ll_int, extensive=ll_ext, intensive=ll_int)


def log_prior(theta: ParamVector, ms: ModelStructure, free_jacobian: bool = False) -> float:
    """Joint log prior density of the structured parameters.

    Gaussians on alpha, beta, log kappa and the policy loadings; standard
    half-normals on the deviation scales; LKJ(2) on each correlation block,
    expressed through its independent partial-correlation factorization;
    standard normals on the auxiliaries. With free_jacobian=True the change
    of variables to the optimizer's coordinates (log tau, atanh CPC) is
    included.
    """
    def _normal(v, sd, mean=0.0):
        v = np.atleast_1d(np.asarray(v, dtype=float))
        return float(np.sum(-0.5 * ((v - mean) / sd) ** 2 - np.log(sd) - 0.5 * _LOG_2PI))

    out = _normal(theta.alpha, ALPHA_SD) + _normal(theta.beta, ALPHA_SD)
    out += _normal(theta.log_kappa, LOGKAPPA_SD, LOGKAPPA_MEAN)
    if ms.q:
        tau = np.asarray(theta.tau, dtype=float)
        if np.any(tau <= 0):
            raise ValueError("tau must be positive")
        out += float(np.sum(0.5 * np.log(2.0 / np.pi) - 0.5 * tau**2))
        out += _normal(theta.z_aux, 1.0)
        if ms.n_cpc:
            zs = []
            off = 0
            for k in _cpc_blocks(ms):
                zs.append(_cpc_from_chol_block(theta.corr_chol[off : off + k, off : off + k]))
                off += k
            z = np.concatenate(zs)
            alphas = _cpc_all_alphas(ms)
            out += float(
                np.sum(
                    (alphas - 1.0) * np.log1p(-z * z)
                    - (2.0 * alphas - 1.0) * np.log(2.0)
                    - _betaln(alphas, alphas)
                )
            )
            if free_jacobian:
                out += float(np.sum(np.log1p(-z * z)))
        if free_jacobian:
            out += float(np.sum(np.log(tau)))
    if ms.variant == "m3b":
        sds = np.full(ms.Q, GAMMA_SD)
        sds[0] = GAMMA_INTERCEPT_SD
        for g in (theta.gamma_ext, theta.gamma_int):
            for col in range(ms.Q):
                out += _normal(g[:, col], sds[col])
    return out


def log_posterior_and_grad(vec: np.ndarray, ds: Dataset, ms: ModelStructure,
                           weights=None) -> tuple[float, np.ndarray]:
    """Log posterior (likelihood + prior + transform Jacobians) and its
    gradient in free coordinates. This is the objective every engine drives.
    """
    vec = np.asarray(vec, dtype=float)
    ofs = _offsets(ms)
    P, q, S = ms.P, ms.q, ms.S
    two_q = 2 * q
    w = _norm_weights(ds, weights)

    alpha = vec[ofs["alpha"]]
    beta = vec[ofs["beta"]]
    c = float(vec[ofs["log_kappa"]][0])
    log_tau = vec[ofs["log_tau"]]
    tau = np.exp(log_tau)
    y_cpc = vec[ofs["cpc"]]
    z_cpc = np.tanh(y_cpc)
    Z = vec[ofs["z_aux"]].reshape(S, two_q)

    if ms.n_cpc:
        L, auxes = _chol_from_cpc(ms, z_cpc)
    else:
        L, auxes = np.eye(two_q), []
    scaledL = L * tau[:, None]  # rows scaled: diag(tau) @ L
    Delta = Z @ scaledL.T
    if ms.variant == "m3b":
        Ge = vec[ofs["gamma_ext"]].reshape(q, ms.Q)
        Gi = vec[ofs["gamma_int"]].reshape(q, ms.Q)
        Delta = Delta.copy()
        Delta[:, :q] += ms.policy @ Ge.T
        Delta[:, q:] += ms.policy @ Gi.T

    eta_ext = ds.X @ alpha
    eta_int = ds.X @ beta
    if q:
        Xr = ds.X[:, : q]
        eta_ext = eta_ext + np.sum(Xr * Delta[ds.state, :q], axis=1)
        eta_int = eta_int + np.sum(Xr * Delta[ds.state, q:], axis=1)

    zind = (ds.y > 0).astype(float)
    qprob = expit(eta_ext)
    val = float(np.sum(w * (zind * eta_ext - np.logaddexp(0.0, eta_ext))))
    r_ext = w * (zind - qprob)

    pos = ds.y > 0
    mu = _mu_from_eta(eta_int[pos])
    kap = float(np.clip(np.exp(c), kernel.KAPPA_LO, kernel.KAPPA_HI))
    cell = kernel.ztbb_cell_derivs(ds.y[pos], ds.n[pos], mu, kap, order=1)
    wpos = w[pos]
    val += float(np.sum(wpos * cell.ll))
    mu1m = mu * (1.0 - mu)
    r_int_pos = wpos * cell.d_mu * mu1m
    dc_lik = float(np.sum(wpos * cell.d_c))

    grad = np.zeros_like(vec)
    grad[ofs["alpha"]] = ds.X.T @ r_ext - alpha / ALPHA_SD**2
    r_int = np.zeros(len(ds))
    r_int[pos] = r_int_pos
    grad[ofs["beta"]] = ds.X.T @ r_int - beta / ALPHA_SD**2
    grad[ofs["log_kappa"]] = dc_lik - (c - LOGKAPPA_MEAN) / LOGKAPPA_SD**2

    val += float(
        np.sum(-0.5 * (alpha / ALPHA_SD) ** 2 - np.log(ALPHA_SD) - 0.5 * _LOG_2PI)
        + np.sum(-0.5 * (beta / ALPHA_SD) ** 2 - np.log(ALPHA_SD) - 0.5 * _LOG_2PI)
        - 0.5 * ((c - LOGKAPPA_MEAN) / LOGKAPPA_SD) ** 2
        - np.log(LOGKAPPA_SD)
        - 0.5 * _LOG_2PI
    )

    if q:
        # accumulate dL/dDelta by state
        dDelta = np.zeros((S, two_q))
        np.add.at(dDelta[:, :q], ds.state, r_ext[:, None] * Xr)
        np.add.at(dDelta[:, q:], ds.state[pos], r_int_pos[:, None] * Xr[pos])

        # z_aux: prior N(0,1) plus likelihood chain
        grad[ofs["z_aux"]] = (dDelta @ scaledL - Z).reshape(-1)
        val += float(np.sum(-0.5 * Z * Z - 0.5 * _LOG_2PI))

        # tau: likelihood chain (structural) times tau, half-normal prior,
        # log-scale Jacobian
        Lz = Z @ L.T
        dtau_struct = np.sum(dDelta * Lz, axis=0)
        grad[ofs["log_tau"]] = dtau_struct * tau - tau * tau + 1.0
        val += float(np.sum(0.5 * np.log(2.0 / np.pi) - 0.5 * tau**2 + log_tau))

        if ms.n_cpc:
            Lbar = (dDelta * tau[None, :]).T @ Z
            alphas = _cpc_all_alphas(ms)
            zbar = np.zeros_like(z_cpc)
            for off_coord, off_dim, k, Cb in auxes:
                m = k * (k - 1) // 2
                sl = slice(off_coord, off_coord + m)
                blk = slice(off_dim, off_dim + k)
                zbar[sl] = _cpc_vjp_block(Lbar[blk, blk], z_cpc[sl], L[blk, blk], Cb)
            grad[ofs["cpc"]] = (1.0 - z_cpc**2) * zbar - 2.0 * z_cpc * alphas
            val += float(
                np.sum(
                    alphas * np.log1p(-z_cpc**2)
                    - (2.0 * alphas - 1.0) * np.log(2.0)
                    - _betaln(alphas, alphas)
                )
            )

    if ms.variant == "m3b":
        sds = np.full(ms.Q, GAMMA_SD)
        sds[0] = GAMMA_INTERCEPT_SD
        dGe = dDelta[:, :q].T @ ms.policy - Ge / sds[None, :] ** 2
        dGi = dDelta[:, q:].T @ ms.policy - Gi / sds[None, :] ** 2
        grad[ofs["gamma_ext"]] = dGe.reshape(-1)
        grad[ofs["gamma_int"]] = dGi.reshape(-1)
        for g in (Ge, Gi):
            val += float(
                np.sum(-0.5 * (g / sds[None, :]) ** 2 - np.log(sds[None, :]) - 0.5 * _LOG_2PI)
            )

    return val, grad


# ---------------------------------------------------------------------------
# effect decompositions


@dataclass(frozen=True)
class MarginalEffect:
    """Log-scale decomposition of one covariate's effect on E[Y]."""

    covariate: int
    lae: float
    lie: float

    @property
    def total(self) -> float:
        return self.lae + self.lie

    @property
    def extensive_share(self) -> float:
        denom = abs(self.lae) + abs(self.lie)
        return abs(self.lae) / denom if denom else np.nan


def lae_lie_components(q: float, mu: float, elasticity: float,
                       alpha_k: float, beta_k: float, covariate: int = 0) -> MarginalEffect:
    """Pure arithmetic of the decomposition given the cell-level inputs:
    LAE = (1-q) alpha_k, LIE = (1-mu) elasticity beta_k.
    """
    return MarginalEffect(
        covariate=covariate,
        lae=(1.0 - q) * alpha_k,
        lie=(1.0 - mu) * elasticity * beta_k,
    )


def _cell_geometry(theta: ParamVector, obs: Observation, ms: ModelStructure):
    ds = Dataset.from_observations([obs])
    eta_ext, eta_int = linear_predictors(theta, ds, ms)
    qprob = float(expit(eta_ext[0]))
    mu = float(_mu_from_eta(eta_int[:1])[0])
    rep = kernel.intensity_report(kernel.BetaBinParams(obs.n, mu, theta.kappa))
    return qprob, mu, rep


def _state_total_coefs(theta: ParamVector, ms: ModelStructure, state: int, k: int):
    alpha_k = float(theta.alpha[k])
    beta_k = float(theta.beta[k])
    if ms.q and k < ms.q:
        deltas = theta.deltas(ms)
        alpha_k += float(deltas[state, k])
        beta_k += float(deltas[state, ms.q + k])
    return alpha_k, beta_k


def lae_lie(theta: ParamVector, obs: Observation, ms: ModelStructure, k: int) -> MarginalEffect:
    """Decompose d log E[Y] / d x_k at one observation's cell into the
    occupancy (extensive) and conditional-intensity (intensive) channels.
    """
    qprob, mu, rep = _cell_geometry(theta, obs, ms)
    alpha_k, beta_k = _state_total_coefs(theta, ms, obs.state, k)
    return lae_lie_components(qprob, mu, rep.elasticity, alpha_k, beta_k, covariate=k)


def ame_decompose(draws: np.ndarray, ds: Dataset, ms: ModelStructure,
                  covariates: Sequence[int] | None = None,
                  level: float = 0.90):
    """Average marginal effects of x_k on the per-trial mean q*h, split into
    margin channels and averaged over observations, with posterior bands.

    draws: (M, n_free) matrix of free vectors. Returns a pandas DataFrame
    with one row per covariate and channel.
    """
    import pandas as pd

    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if covariates is None:
        covariates = list(range(ms.P))
    lo_q, hi_q = 0.5 - level / 2.0, 0.5 + level / 2.0
    M = draws.shape[0]
    ext_acc = np.empty((M, len(covariates)))
    int_acc = np.empty((M, len(covariates)))
    for m in range(M):
        theta = unflatten(draws[m], ms)
        eta_ext, eta_int = linear_predictors(theta, ds, ms)
        qprob = expit(eta_ext)
        mu = _mu_from_eta(eta_int)
        kap = theta.kappa
        lp0 = kernel.log_zero_prob_arrays(ds.n, mu, kap)
        posmass = -np.expm1(lp0)
        h = mu / posmass
        b = (1.0 - mu) * kap
        from .specfun import digamma as _dg
        lam = kap * (_dg(b + ds.n) - _dg(b))
        omega = mu * np.exp(lp0) * lam / posmass
        omega = np.where(ds.n == 1, 1.0, omega)
        eps = 1.0 - omega
        deltas = theta.deltas(ms)
        for ci, k in enumerate(covariates):
            a_k = np.full(len(ds), theta.alpha[k])
            b_k = np.full(len(ds), theta.beta[k])
            if ms.q and k < ms.q:
                a_k = a_k + deltas[ds.state, k]
                b_k = b_k + deltas[ds.state, ms.q + k]
            ext_acc[m, ci] = np.mean(h * qprob * (1.0 - qprob) * a_k)
            int_acc[m, ci] = np.mean(qprob * h * eps * (1.0 - mu) * b_k)
    rows = []
    for ci, k in enumerate(covariates):
        for label, acc in [("extensive", ext_acc[:, ci]), ("intensive", int_acc[:, ci]),
                           ("total", ext_acc[:, ci] + int_acc[:, ci])]:
            rows.append({
                "covariate": ds.columns[k],
                "channel": label,
                "mean": float(np.mean(acc)),
                "lo": float(np.quantile(acc, lo_q)),
                "hi": float(np.quantile(acc, hi_q)),
            })
    return pd.DataFrame(rows)


@dataclass(frozen=True)
class PovertyExpansion:
    """State coefficient split: national + policy-explained + residual."""

    national_ext: float
    policy_ext: float
    residual_ext: float
    national_int: float
    policy_int: float
    residual_int: float

    @property
    def total_ext(self) -> float:
        return self.national_ext + self.policy_ext + self.residual_ext

    @property
    def total_int(self) -> float:
        return self.national_int + self.policy_int + self.residual_int


def poverty_expansion(theta: ParamVector, ms: ModelStructure, state: int,
                      k: int = 1) -> PovertyExpansion:
    """Decompose a state's total coefficient on covariate k into the national
    coefficient, the policy-regression part, and the residual deviation.
    Requires the policy-augmented variant.
    """
    if ms.variant != "m3b":
        raise ValueError("policy expansion requires the policy-augmented variant")
    if not 0 <= k < ms.q:
        raise ValueError(f"covariate {k} carries no state deviation")
    v = ms.policy[state]
    pol_ext = float(theta.gamma_ext[k] @ v)
    pol_int = float(theta.gamma_int[k] @ v)
    scaled = (theta.z_aux[state] @ theta.corr_chol.T) * theta.tau
    return PovertyExpansion(
        national_ext=float(theta.alpha[k]),
        policy_ext=pol_ext,
        residual_ext=float(scaled[k]),
        national_int=float(theta.beta[k]),
        policy_int=pol_int,
        residual_int=float(scaled[ms.q + k]),
    )


def reversal_probability(draws: np.ndarray, ms: ModelStructure, k: int = 1,
                         state: int | None = None) -> float:
    """Posterior probability that the extensive and intensive coefficients
    on covariate k pull in opposite directions (alpha < 0 < beta), nationally
    or for one state's total coefficients.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    hits = 0
    for m in range(draws.shape[0]):
        theta = unflatten(draws[m], ms)
        if state is None:
            a_k, b_k = float(theta.alpha[k]), float(theta.beta[k])
        else:
            a_k, b_k = _state_total_coefs(theta, ms, state, k)
        hits += (a_k < 0.0) and (b_k > 0.0)
    return hits / draws.shape[0]
