"""Per-observation scores, observed information, and gradient certification.

Score rows are gradients of each observation's own (unweighted) log density;
design weights enter later, when the cluster meat aggregates rows. The
coordinate system is the fixed-effect block (alpha, beta, log_kappa),
optionally extended by every state's deviation coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernel
from .model import (
    ALPHA_SD,
    LOGKAPPA_MEAN,
    LOGKAPPA_SD,
    Dataset,
    ModelStructure,
    Observation,
    ParamVector,
    _mu_from_eta,
    _norm_weights,
    fixed_names,
    linear_predictors,
    log_prior,
    loglik,
)

__all__ = [
    "score_coordinate_names",
    "score_matrix",
    "score_obs",
    "hessian",
    "CheckGradReport",
    "check_grad",
]


def score_coordinate_names(ms: ModelStructure, columns=None,
                           include_deviations: bool = False) -> list[str]:
    names = list(fixed_names(ms, columns))
    if include_deviations:
        cols = columns if columns is not None else [f"x{j+1}" for j in range(ms.P)]
        for s in range(ms.S):
            names += [f"dev_ext_{cols[j]}_s{s}" for j in range(ms.q)]
            names += [f"dev_int_{cols[j]}_s{s}" for j in range(ms.q)]
    return names


def _margin_derivs(theta: ParamVector, ds: Dataset, ms: ModelStructure, order: int = 1):
    """Shared per-observation pieces: occupancy residual and count-margin
    eta/log-kappa derivatives (zero on zero-count rows)."""
    eta_ext, eta_int = linear_predictors(theta, ds, ms)
    qprob = expit(eta_ext)
    zind = (ds.y > 0).astype(float)
    d_ext = zind - qprob

    N = len(ds)
    d_int = np.zeros(N)
    d_c = np.zeros(N)
    out2 = {}
    pos = ds.y > 0
    mu = _mu_from_eta(eta_int[pos])
    kap = float(np.clip(theta.kappa, kernel.KAPPA_LO, kernel.KAPPA_HI))
    cell = kernel.ztbb_cell_derivs(ds.y[pos], ds.n[pos], mu, kap, order=order)
    mu1m = mu * (1.0 - mu)
    d_int[pos] = cell.d_mu * mu1m
    d_c[pos] = cell.d_c
    if order >= 2:
        h_ee = -qprob * (1.0 - qprob)
        h_ii = np.zeros(N)
        h_ic = np.zeros(N)
        h_cc = np.zeros(N)
        h_ii[pos] = cell.d_mumu * mu1m**2 + cell.d_mu * mu1m * (1.0 - 2.0 * mu)
        h_ic[pos] = cell.d_muc * mu1m
        h_cc[pos] = cell.d_cc
        out2 = {"h_ee": h_ee, "h_ii": h_ii, "h_ic": h_ic, "h_cc": h_cc}
    return d_ext, d_int, d_c, out2


def score_matrix(theta: ParamVector, ds: Dataset, ms: ModelStructure,
                 include_deviations: bool = False) -> np.ndarray:
    """One row per observation: the gradient of that observation's log
    density. Intensive-margin columns are exactly zero on zero-count rows.
    """
    d_ext, d_int, d_c, _ = _margin_derivs(theta, ds, ms, order=1)
    N, P = len(ds), ms.P
    p = 2 * P + 1 + (ms.S * 2 * ms.q if include_deviations else 0)
    out = np.zeros((N, p))
    out[:, :P] = ds.X * d_ext[:, None]
    out[:, P : 2 * P] = ds.X * d_int[:, None]
    out[:, 2 * P] = d_c
    if include_deviations and ms.q:
        Xr = ds.X[:, : ms.q]
        base = 2 * P + 1
        cols_ext = base + ds.state[:, None] * 2 * ms.q + np.arange(ms.q)[None, :]
        cols_int = cols_ext + ms.q
        rows = np.arange(N)[:, None]
        out[rows, cols_ext] = Xr * d_ext[:, None]
        out[rows, cols_int] = Xr * d_int[:, None]
    return out


def score_obs(theta: ParamVector, obs: Observation, ms: ModelStructure,
              include_deviations: bool = False) -> np.ndarray:
    ds = Dataset.from_observations([obs])
    # reuse the matrix path; deviation columns come back in full S-width
    full = score_matrix(theta, ds, ms, include_deviations=False)[0]
    if not include_deviations:
        return full
    out = np.zeros(2 * ms.P + 1 + ms.S * 2 * ms.q)
    out[: 2 * ms.P + 1] = full
    if ms.q:
        d_ext, d_int, _, _ = _margin_derivs(theta, ds, ms, order=1)
        xr = obs.x[: ms.q]
        base = 2 * ms.P + 1 + obs.state * 2 * ms.q
        out[base : base + ms.q] = xr * d_ext[0]
        out[base + ms.q : base + 2 * ms.q] = xr * d_int[0]
    return out


def hessian(theta: ParamVector, ds: Dataset, ms: ModelStructure, weights=None,
            include_deviations: bool = False) -> np.ndarray:
    """Observed information of the weighted log-likelihood: the negative
    Hessian at theta, prior curvature excluded. The alpha block is exactly
    sum_i w_i q_i (1-q_i) x_i x_i'.
    """
    w = _norm_weights(ds, weights)
    _, _, _, H2 = _margin_derivs(theta, ds, ms, order=2)
    P = ms.P
    p = 2 * P + 1 + (ms.S * 2 * ms.q if include_deviations else 0)
    H = np.zeros((p, p))
    X = ds.X
    H[:P, :P] = -(X * (w * H2["h_ee"])[:, None]).T @ X
    H[P : 2 * P, P : 2 * P] = -(X * (w * H2["h_ii"])[:, None]).T @ X
    bc = -(X * (w * H2["h_ic"])[:, None]).sum(axis=0)
    H[P : 2 * P, 2 * P] = bc
    H[2 * P, P : 2 * P] = bc
    H[2 * P, 2 * P] = -float(np.sum(w * H2["h_cc"]))
    if include_deviations and ms.q:
        Xr = X[:, : ms.q]
        base = 2 * P + 1
        two_q = 2 * ms.q
        for s in range(ms.S):
            rows = ds.state == s
            if not rows.any():
                continue
            ws = w[rows]
            Xs = X[rows]
            Xrs = Xr[rows]
            o = base + s * two_q
            see = -(Xrs * (ws * H2["h_ee"][rows])[:, None]).T @ Xrs
            sii = -(Xrs * (ws * H2["h_ii"][rows])[:, None]).T @ Xrs
            sic = -(Xrs * (ws * H2["h_ic"][rows])[:, None]).sum(axis=0)
            H[o : o + ms.q, o : o + ms.q] = see
            H[o + ms.q : o + two_q, o + ms.q : o + two_q] = sii
            H[o + ms.q : o + two_q, 2 * P] = sic
            H[2 * P, o + ms.q : o + two_q] = sic
            cross_ea = -(Xrs * (ws * H2["h_ee"][rows])[:, None]).T @ Xs
            cross_ib = -(Xrs * (ws * H2["h_ii"][rows])[:, None]).T @ Xs
            H[o : o + ms.q, :P] = cross_ea
            H[:P, o : o + ms.q] = cross_ea.T
            H[o + ms.q : o + two_q, P : 2 * P] = cross_ib
            H[P : 2 * P, o + ms.q : o + two_q] = cross_ib.T
    return H


@dataclass(frozen=True)
class CheckGradReport:
    max_rel_err: float
    worst_coordinate: str
    rel_errs: dict[str, float]


def check_grad(theta: ParamVector, ds: Dataset, ms: ModelStructure, weights=None,
               step: float = 1e-6) -> CheckGradReport:
    """Certify the analytic fixed-effect score sum plus prior gradient
    against central finite differences of loglik + log_prior.
    """
    w = _norm_weights(ds, weights)
    S = score_matrix(theta, ds, ms)
    analytic = S.T @ w
    analytic[: ms.P] -= theta.alpha / ALPHA_SD**2
    analytic[ms.P : 2 * ms.P] -= theta.beta / ALPHA_SD**2
    analytic[2 * ms.P] -= (theta.log_kappa - LOGKAPPA_MEAN) / LOGKAPPA_SD**2

    names = fixed_names(ms, ds.columns if ds.n_cov == ms.P else None)
    errs = {}

    def objective(th):
        return loglik(th, ds, ms, weights=w).total + log_prior(th, ms)

    import copy

    for j, name in enumerate(names):
        th_p = copy.deepcopy(theta)
        th_m = copy.deepcopy(theta)
        if j < ms.P:
            h = step * (1.0 + abs(theta.alpha[j]))
            th_p.alpha = theta.alpha.copy(); th_p.alpha[j] += h
            th_m.alpha = theta.alpha.copy(); th_m.alpha[j] -= h
        elif j < 2 * ms.P:
            h = step * (1.0 + abs(theta.beta[j - ms.P]))
            th_p.beta = theta.beta.copy(); th_p.beta[j - ms.P] += h
            th_m.beta = theta.beta.copy(); th_m.beta[j - ms.P] -= h
        else:
            h = step * (1.0 + abs(theta.log_kappa))
            th_p.log_kappa = theta.log_kappa + h
            th_m.log_kappa = theta.log_kappa - h
        fd = (objective(th_p) - objective(th_m)) / (2.0 * h)
        errs[name] = abs(analytic[j] - fd) / max(1.0, abs(fd))
    worst = max(errs, key=errs.get)
    return CheckGradReport(max_rel_err=errs[worst], worst_coordinate=worst, rel_errs=errs)
