"""Design diagnostics and design-based variance machinery.

Everything here treats the fitted model as a pseudo-likelihood estimator
under a stratified, clustered, unequal-probability design: Kish effective
sample size, weight-spread diagnostics, the clustered score covariance
("meat"), the sandwich variance, design-effect ratios, the draw calibration
that imprints the sandwich covariance on a posterior sample, and the
informativeness tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import expit, ndtr

from .model import (
    ALPHA_SD,
    LOGKAPPA_SD,
    Dataset,
    ModelStructure,
    ParamVector,
)

__all__ = [
    "SurveyDesign",
    "normalize_weights",
    "KishReport",
    "kish",
    "BvmReport",
    "bvm_weight_diagnostic",
    "meat_cluster",
    "design_dof",
    "sandwich",
    "DerReport",
    "der",
    "der_exact",
    "der_heuristic",
    "SandwichReport",
    "design_sandwich",
    "cholesky_calibrate",
    "PfeffermannResult",
    "pfeffermann_test",
    "HausmanResult",
    "hausman",
]


def normalize_weights(w) -> np.ndarray:
    """Scale raw weights to sum to the sample size."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a nonempty vector")
    if np.any(~np.isfinite(w)) or np.any(w <= 0):
        raise ValueError("weights must be finite and strictly positive")
    return w * (w.size / w.sum())


@dataclass(frozen=True)
class SurveyDesign:
    """Stratum and PSU labels plus normalized weights for one sample."""

    stratum: np.ndarray
    psu: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        stratum = np.asarray(self.stratum, dtype=np.int64)
        psu = np.asarray(self.psu, dtype=np.int64)
        weight = normalize_weights(self.weight)
        if not (stratum.shape == psu.shape == weight.shape):
            raise ValueError("stratum, psu, weight must share one length")
        object.__setattr__(self, "stratum", stratum)
        object.__setattr__(self, "psu", psu)
        object.__setattr__(self, "weight", weight)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "SurveyDesign":
        return cls(stratum=ds.stratum, psu=ds.psu, weight=ds.weight)

    def psus_per_stratum(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for h in np.unique(self.stratum):
            out[int(h)] = len(np.unique(self.psu[self.stratum == h]))
        return out


@dataclass(frozen=True)
class KishReport:
    n: int
    cv_sq: float
    deff: float
    ess: float


def kish(w) -> KishReport:
    """Kish design effect 1 + CV^2(w) and the implied effective sample size."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    m = w.mean()
    cv_sq = float(np.mean(w * w) / (m * m) - 1.0)
    deff = 1.0 + cv_sq
    return KishReport(n=w.size, cv_sq=cv_sq, deff=deff, ess=w.size / deff)


@dataclass(frozen=True)
class BvmReport:
    ratio: float
    delta: float
    flagged: bool


def bvm_weight_diagnostic(w, n_total: int | None = None, threshold: float = 0.5) -> BvmReport:
    """Weight-spread growth exponent log(w_max/w_min)/log N.

    Values above the threshold signal that the weighted pseudo-posterior's
    large-sample normality argument is strained.
    """
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise ValueError("weights must be positive")
    N = int(n_total) if n_total is not None else w.size
    if N < 2:
        raise ValueError("need at least two observations")
    ratio = float(w.max() / w.min())
    delta = float(np.log(ratio) / np.log(N))
    return BvmReport(ratio=ratio, delta=delta, flagged=delta > threshold)


def _group_totals(scores: np.ndarray, design: SurveyDesign):
    key = design.stratum.astype(np.int64) << 32 | design.psu.astype(np.int64)
    uniq, inv = np.unique(key, return_inverse=True)
    p = scores.shape[1]
    totals = np.zeros((uniq.size, p))
    np.add.at(totals, inv, scores * design.weight[:, None])
    strata = (uniq >> 32).astype(np.int64)
    return totals, strata


def meat_cluster(scores: np.ndarray, design: SurveyDesign,
                 collapse_single: bool = False) -> np.ndarray:
    """Between-PSU covariance of weighted score totals.

    J = sum_h C_h/(C_h - 1) sum_c (s_hc - s_h)(s_hc - s_h)' with s_hc the
    weighted score total of PSU c in stratum h. A stratum with a single PSU
    is an error unless collapse_single merges it into its neighbor stratum.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[0] != design.weight.size:
        raise ValueError("scores must be N x p aligned with the design")
    totals, strata = _group_totals(scores, design)
    counts = {int(h): int(np.sum(strata == h)) for h in np.unique(strata)}
    singles = [h for h, c in counts.items() if c < 2]
    if singles and not collapse_single:
        raise ValueError(
            f"strata {singles} contain a single PSU; merge them into a "
            "neighboring stratum (collapse_single=True) or fix the design"
        )
    if singles:
        order = np.sort(np.unique(strata))
        remap = {}
        for h in order:
            remap[h] = h
        for h in singles:
            pos = int(np.where(order == h)[0][0])
            target = order[pos - 1] if pos > 0 else order[pos + 1]
            while target in singles and target != remap[target]:
                target = remap[target]
            remap[h] = int(target)
        strata = np.array([remap[int(h)] for h in strata])
    p = scores.shape[1]
    J = np.zeros((p, p))
    for h in np.unique(strata):
        block = totals[strata == h]
        C = block.shape[0]
        centered = block - block.mean(axis=0, keepdims=True)
        J += (C / (C - 1.0)) * centered.T @ centered
    return J


def design_dof(design: SurveyDesign) -> int:
    """Design degrees of freedom: sum over strata of (PSU count - 1)."""
    return int(sum(c - 1 for c in design.psus_per_stratum().values()))


def sandwich(H: np.ndarray, J: np.ndarray) -> np.ndarray:
    """V = H^-1 J H^-1 with H the observed information."""
    H = np.asarray(H, dtype=float)
    J = np.asarray(J, dtype=float)
    try:
        c = cho_factor(0.5 * (H + H.T))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"observed information is not positive definite (cond ~ "
            f"{np.linalg.cond(H):.2e})"
        ) from exc
    V = cho_solve(c, cho_solve(c, J).T)
    return 0.5 * (V + V.T)


@dataclass(frozen=True)
class DerReport:
    values: np.ndarray
    labels: list[str]

    def worst(self) -> float:
        return float(np.max(self.values))


_DER_BANDS = ((1.2, "insensitive"), (1.5, "moderate"))


def der(V: np.ndarray, H: np.ndarray) -> DerReport:
    """Design-effect ratio per coordinate: sandwich variance over the naive
    inverse-information variance, labeled by sensitivity band.
    """
    Hinv = np.linalg.inv(np.asarray(H, dtype=float))
    vals = np.diag(np.asarray(V, dtype=float)) / np.diag(Hinv)
    labels = []
    for v in vals:
        for cut, lab in _DER_BANDS:
            if v <= cut:
                labels.append(lab)
                break
        else:
            labels.append("sensitive")
    return DerReport(values=np.asarray(vals, dtype=float), labels=labels)


def der_exact(lam: float, deff: float) -> float:
    """Exact design-effect ratio of the conjugate location family with prior
    to likelihood information ratio lam and Kish design effect deff."""
    return (1.0 + lam * deff) / (1.0 + lam) ** 2


def der_heuristic(lam: float, deff: float) -> float:
    """First-order approximation 1 + lam (deff - 1); never below the exact value."""
    return 1.0 + lam * (deff - 1.0)


@dataclass(frozen=True)
class SandwichReport:
    """Clustered sandwich variance for a weighted fit.

    Coordinates are the fixed effects followed by the per-state deviations,
    so interval corrections propagate shrinkage uncertainty instead of
    treating the state effects as known.
    """

    names: list[str]
    H: np.ndarray
    J: np.ndarray
    V: np.ndarray
    der: DerReport
    dof: int

    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.V), 0.0, None))


def _prior_curvature(theta: ParamVector, ms: ModelStructure, dim: int) -> np.ndarray:
    """Negative Hessian of the log prior in fixed-plus-deviation coordinates.

    Fixed effects carry independent normal priors; each state's deviation
    block carries the shrinkage precision implied by the fitted scale and
    correlation factors, evaluated at the plug-in estimates.
    """
    P = np.zeros((dim, dim))
    nf = 2 * ms.P + 1
    diag = np.full(nf, 1.0 / ALPHA_SD**2)
    diag[nf - 1] = 1.0 / LOGKAPPA_SD**2
    P[:nf, :nf] = np.diag(diag)
    if ms.q == 0:
        return P
    A = theta.tau[:, None] * theta.corr_chol
    Sinv = np.linalg.inv(A @ A.T)
    Sinv = 0.5 * (Sinv + Sinv.T)
    k = 2 * ms.q
    for s in range(ms.S):
        sl = slice(nf + s * k, nf + (s + 1) * k)
        P[sl, sl] = Sinv
    return P


def design_sandwich(theta: ParamVector, ds: Dataset, ms: ModelStructure,
                    weights: np.ndarray | None = None,
                    design: SurveyDesign | None = None,
                    collapse_single: bool = False) -> SandwichReport:
    """Full design-based variance pipeline for a weighted penalized fit.

    Bread is the observed curvature of the weighted objective (data plus
    prior) over fixed effects and state deviations; meat is the stratified
    between-PSU covariance of the weighted score totals. Defaults pull
    weights and design structure from the dataset itself.
    """
    from .scores import hessian, score_coordinate_names, score_matrix

    w = ds.weight if weights is None else np.asarray(weights, dtype=float)
    if design is None:
        design = SurveyDesign.from_dataset(ds)
    names = score_coordinate_names(ms, columns=ds.columns, include_deviations=True)
    S_mat = score_matrix(theta, ds, ms, include_deviations=True)
    J = meat_cluster(S_mat, design, collapse_single=collapse_single)
    H = hessian(theta, ds, ms, weights=w, include_deviations=True)
    H = H + _prior_curvature(theta, ms, H.shape[0])
    V = sandwich(H, J)
    return SandwichReport(names=names, H=H, J=J, V=V, der=der(V, H),
                          dof=design_dof(design))


def cholesky_calibrate(draws: np.ndarray, theta_hat: np.ndarray, V: np.ndarray,
                       block: np.ndarray | None = None) -> np.ndarray:
    """Affinely recalibrate posterior draws so the block covariance equals V.

    The map is theta* = theta_hat + L_V L_draws^-1 (theta - mean(draws)) on
    the selected block, leaving other coordinates untouched. Centering at
    the empirical draw mean and re-centering at theta_hat makes the output
    mean exactly theta_hat and the empirical covariance exactly V.
    """
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    theta_hat = np.asarray(theta_hat, dtype=float)
    if block is None:
        block = np.arange(draws.shape[1])
    block = np.asarray(block, dtype=np.int64)
    sub = draws[:, block]
    mean = sub.mean(axis=0)
    cov = np.cov(sub, rowvar=False, ddof=1)
    cov = np.atleast_2d(cov)
    L_m = np.linalg.cholesky(cov)
    L_v = np.linalg.cholesky(np.asarray(V, dtype=float))
    centered = sub - mean[None, :]
    # theta* = hat + L_v L_m^-1 (theta - mean)
    tmp = solve_triangular(L_m, centered.T, lower=True)
    out = draws.copy()
    out[:, block] = theta_hat[block][None, :] + (L_v @ tmp).T
    return out


# ---------------------------------------------------------------------------
# informativeness tests


def _irls_logistic(X: np.ndarray, z: np.ndarray, max_iter: int = 100,
                   tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Plain logistic regression; returns coefficients and covariance.
    Falls back to a small ridge when the information matrix degenerates
    (perfect separation)."""
    p = X.shape[1]
    beta = np.zeros(p)
    ridge = 0.0
    for _ in range(max_iter):
        eta = X @ beta
        prob = expit(eta)
        wdiag = prob * (1.0 - prob)
        info = X.T @ (X * wdiag[:, None]) + ridge * np.eye(p)
        grad = X.T @ (z - prob) - ridge * beta
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            ridge = max(ridge * 10.0, 1e-6)
            continue
        beta = beta + step
        if np.abs(step).max() < tol:
            break
        if np.abs(X @ beta).max() > 30.0 and ridge == 0.0:
            ridge = 1e-6
    eta = X @ beta
    wdiag = expit(eta) * (1.0 - expit(eta))
    info = X.T @ (X * wdiag[:, None]) + ridge * np.eye(p)
    return beta, np.linalg.inv(info)


@dataclass(frozen=True)
class PfeffermannResult:
    margin: str
    gamma: float
    se: float
    z: float
    p_value: float


def pfeffermann_test(ds: Dataset, margin: str,
                     columns: list[int] | None = None) -> PfeffermannResult:
    """Weight-informativeness test: regress the outcome on covariates
    augmented with log(weight) and test the log-weight coefficient.

    margin="extensive" uses logistic regression of the any-event indicator;
    margin="intensive" uses least squares on the event share over positive
    rows. Raw weights must vary, else the added column is collinear.
    """
    if margin not in ("extensive", "intensive"):
        raise ValueError("margin must be 'extensive' or 'intensive'")
    logw = np.log(ds.weight)
    if np.ptp(logw) < 1e-12:
        raise ValueError("weights are constant; the informativeness test is undefined")
    cols = list(columns) if columns is not None else list(range(ds.n_cov))
    Xa = np.column_stack([ds.X[:, cols], logw])
    if margin == "extensive":
        z = (ds.y > 0).astype(float)
        beta, cov = _irls_logistic(Xa, z)
        g, se = beta[-1], float(np.sqrt(cov[-1, -1]))
    else:
        pos = ds.y > 0
        Xp = Xa[pos]
        share = ds.y[pos] / ds.n[pos]
        coef, res, rank, _ = np.linalg.lstsq(Xp, share, rcond=None)
        if rank < Xp.shape[1]:
            raise ValueError("augmented design is rank deficient on positive rows")
        resid = share - Xp @ coef
        dof = Xp.shape[0] - Xp.shape[1]
        sigma2 = float(resid @ resid) / dof
        cov = sigma2 * np.linalg.inv(Xp.T @ Xp)
        g, se = coef[-1], float(np.sqrt(cov[-1, -1]))
    zstat = float(g / se)
    return PfeffermannResult(
        margin=margin,
        gamma=float(g),
        se=se,
        z=zstat,
        p_value=float(2.0 * (1.0 - ndtr(abs(zstat)))),
    )


@dataclass(frozen=True)
class HausmanResult:
    names: list[str]
    est_unweighted: np.ndarray
    est_weighted: np.ndarray
    z: np.ndarray
    p_value: np.ndarray
    negative_gap: np.ndarray


def hausman(est_uw, est_wt, var_uw, var_wt, names: list[str] | None = None) -> HausmanResult:
    """Coefficient-contrast test: Z = (wt - uw)/sqrt(Var_wt - Var_uw).

    Entries with a nonpositive variance gap are flagged and reported with a
    NaN statistic rather than a fabricated one.
    """
    est_uw = np.asarray(est_uw, dtype=float)
    est_wt = np.asarray(est_wt, dtype=float)
    var_uw = np.asarray(var_uw, dtype=float)
    var_wt = np.asarray(var_wt, dtype=float)
    gap = var_wt - var_uw
    bad = gap <= 0
    z = np.where(bad, np.nan, (est_wt - est_uw) / np.sqrt(np.where(bad, 1.0, gap)))
    p = np.where(np.isnan(z), np.nan, 2.0 * (1.0 - ndtr(np.abs(z))))
    if names is None:
        names = [f"coef_{i}" for i in range(est_uw.size)]
    return HausmanResult(
        names=list(names),
        est_unweighted=est_uw,
        est_weighted=est_wt,
        z=z,
        p_value=p,
        negative_gap=bad,
    )
