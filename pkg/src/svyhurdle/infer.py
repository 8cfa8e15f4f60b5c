"""Posterior engines: penalized mode + Laplace, and Hamiltonian Monte Carlo.

Both engines drive the same free-coordinate objective
(model.log_posterior_and_grad). The Laplace precision matrix is assembled
analytically for the no-deviation and intercept-deviation variants, where
the extra coordinates enter the predictors linearly; richer variants fall
back to central differences of the analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, ndtri
from scipy.stats import rankdata

from . import kernel
from .model import (
    ALPHA_SD,
    LOGKAPPA_MEAN,
    LOGKAPPA_SD,
    Dataset,
    ModelStructure,
    ParamVector,
    _mu_from_eta,
    _norm_weights,
    _offsets,
    flatten,
    linear_predictors,
    log_posterior_and_grad,
    n_free,
    unflatten,
)

__all__ = [
    "NonConvergenceError",
    "FitResult",
    "fit_map",
    "mode_hessian",
    "laplace_draws",
    "McmcConfig",
    "McmcResult",
    "sample_mcmc",
    "hmc_sample",
    "split_rhat",
    "ess_bulk",
    "ess_tail",
]


class NonConvergenceError(RuntimeError):
    """Optimizer stopped without certifying the gradient norm; carries the
    best iterate found as .result."""

    def __init__(self, message: str, result: "FitResult"):
        super().__init__(message)
        self.result = result


@dataclass
class FitResult:
    vec: np.ndarray
    theta: ParamVector
    ms: ModelStructure
    objective: float
    grad_norm: float
    converged: bool
    n_iter: int
    mode_hessian: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def fit_map(ds: Dataset, ms: ModelStructure, weights=None, init: ParamVector | None = None,
            tol: float = 1e-6, maxiter: int = 4000) -> FitResult:
    """Maximize the log posterior in free coordinates with L-BFGS.

    Convergence is our own certificate: the gradient infinity-norm must fall
    below tol * (1 + |objective|). Anything less raises NonConvergenceError
    carrying the best iterate.
    """
    w = _norm_weights(ds, weights)
    x0 = flatten(init if init is not None else ParamVector.zeros(ms), ms)

    def negated(v):
        val, grad = log_posterior_and_grad(v, ds, ms, weights=w)
        return -val, -grad

    res = minimize(
        negated,
        x0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": maxiter, "maxcor": 30, "ftol": 1e-14, "gtol": 1e-10},
    )
    val, grad = log_posterior_and_grad(res.x, ds, ms, weights=w)
    gnorm = float(np.max(np.abs(grad)))
    ok = gnorm <= tol * (1.0 + abs(val))
    fit = FitResult(
        vec=res.x.copy(),
        theta=unflatten(res.x, ms),
        ms=ms,
        objective=float(val),
        grad_norm=gnorm,
        converged=bool(ok),
        n_iter=int(res.nit),
        meta={"engine": "map", "weighted": weights is not None},
    )
    if not ok:
        raise NonConvergenceError(
            f"gradient norm {gnorm:.3e} above {tol:.1e}*(1+|f|) after {res.nit} iterations",
            fit,
        )
    return fit


# ---------------------------------------------------------------------------
# mode curvature


def _mode_hessian_analytic(vec: np.ndarray, ds: Dataset, ms: ModelStructure,
                           weights=None) -> np.ndarray:
    """Negative Hessian of the log posterior for variants whose deviations
    are state intercepts (q <= 1, no CPC coordinates)."""
    if ms.n_cpc or ms.q > 1 or ms.variant == "m3b":
        raise ValueError("analytic mode curvature covers the q<=1 variants only")
    w = _norm_weights(ds, weights)
    ofs = _offsets(ms)
    theta = unflatten(vec, ms)
    P, S, q = ms.P, ms.S, ms.q
    nf = n_free(ms)

    eta_ext, eta_int = linear_predictors(theta, ds, ms)
    qprob = expit(eta_ext)
    v_e = qprob * (1.0 - qprob)
    r_e = (ds.y > 0).astype(float) - qprob

    pos = ds.y > 0
    mu = _mu_from_eta(eta_int[pos])
    kap = float(np.clip(theta.kappa, kernel.KAPPA_LO, kernel.KAPPA_HI))
    cell = kernel.ztbb_cell_derivs(ds.y[pos], ds.n[pos], mu, kap, order=2)
    mu1m = mu * (1.0 - mu)
    N = len(ds)
    h_ii = np.zeros(N)
    h_ic = np.zeros(N)
    h_cc = np.zeros(N)
    d_i = np.zeros(N)
    h_ii[pos] = cell.d_mumu * mu1m**2 + cell.d_mu * mu1m * (1.0 - 2.0 * mu)
    h_ic[pos] = cell.d_muc * mu1m
    h_cc[pos] = cell.d_cc
    d_i[pos] = cell.d_mu * mu1m

    H = np.zeros((nf, nf))  # Hessian of log posterior, negated at the end
    X = ds.X
    sa, sb = ofs["alpha"], ofs["beta"]
    ic = ofs["log_kappa"].start
    H[sa, sa.start : sa.stop] += -(X * (w * v_e)[:, None]).T @ X
    H[sb, sb.start : sb.stop] += (X * (w * h_ii)[:, None]).T @ X
    bc = (X * (w * h_ic)[:, None]).sum(axis=0)
    H[sb, ic] += bc
    H[ic, sb] += bc
    H[ic, ic] += float(np.sum(w * h_cc))

    if q == 1:
        st = ofs["log_tau"]
        sz = ofs["z_aux"]
        tau1, tau2 = float(theta.tau[0]), float(theta.tau[1])
        z1 = theta.z_aux[:, 0]
        z2 = theta.z_aux[:, 1]
        zi1 = z1[ds.state]
        zi2 = z2[ds.state]

        wv = w * v_e
        wh_ii = w * h_ii
        wh_ic = w * h_ic
        wr_e = w * r_e
        wd_i = w * d_i

        # per-state aggregates
        agg = lambda vals: np.bincount(ds.state, weights=vals, minlength=S)
        A_v = agg(wv)             # sum w q(1-q)
        A_vx = np.vstack([agg(wv * X[:, j]) for j in range(P)])
        A_r = agg(wr_e)
        A_h = agg(wh_ii)
        A_hx = np.vstack([agg(wh_ii * X[:, j]) for j in range(P)])
        A_hc = agg(wh_ic)
        A_d = agg(wd_i)

        it1, it2 = st.start, st.start + 1
        iz1 = sz.start + 2 * np.arange(S)
        iz2 = iz1 + 1

        # extensive margin chains (coordinates t1 and z_s1)
        H[sa, it1] += -(A_vx @ (tau1 * z1))
        H[it1, sa] += -(A_vx @ (tau1 * z1))
        for j in range(P):
            H[sa.start + j, iz1] += -A_vx[j] * tau1
            H[iz1, sa.start + j] += -A_vx[j] * tau1
        H[it1, it1] += float(-(A_v @ (tau1 * z1) ** 2) + (A_r @ (tau1 * z1)))
        H[it1, iz1] += -A_v * tau1 * z1 * tau1 + A_r * tau1
        H[iz1, it1] += -A_v * tau1 * z1 * tau1 + A_r * tau1
        H[iz1, iz1] += -A_v * tau1 * tau1

        # intensive margin chains (t2 and z_s2) plus log-kappa couplings
        H[sb, it2] += A_hx @ (tau2 * z2)
        H[it2, sb] += A_hx @ (tau2 * z2)
        for j in range(P):
            H[sb.start + j, iz2] += A_hx[j] * tau2
            H[iz2, sb.start + j] += A_hx[j] * tau2
        H[ic, it2] += float(A_hc @ (tau2 * z2))
        H[it2, ic] += float(A_hc @ (tau2 * z2))
        H[ic, iz2] += A_hc * tau2
        H[iz2, ic] += A_hc * tau2
        H[it2, it2] += float((A_h @ (tau2 * z2) ** 2) + (A_d @ (tau2 * z2)))
        H[it2, iz2] += A_h * tau2 * z2 * tau2 + A_d * tau2
        H[iz2, it2] += A_h * tau2 * z2 * tau2 + A_d * tau2
        H[iz2, iz2] += A_h * tau2 * tau2

        # priors on the hierarchy coordinates
        H[it1, it1] += -2.0 * tau1 * tau1
        H[it2, it2] += -2.0 * tau2 * tau2
        H[iz1, iz1] += -1.0
        H[iz2, iz2] += -1.0

    # fixed-effect priors
    H[sa, sa.start : sa.stop] += -np.eye(P) / ALPHA_SD**2
    H[sb, sb.start : sb.stop] += -np.eye(P) / ALPHA_SD**2
    H[ic, ic] += -1.0 / LOGKAPPA_SD**2
    return -H


def _mode_hessian_fd(vec: np.ndarray, ds: Dataset, ms: ModelStructure, weights=None,
                     step: float = 1e-5) -> np.ndarray:
    w = _norm_weights(ds, weights)
    nf = vec.shape[0]
    H = np.empty((nf, nf))
    for j in range(nf):
        h = step * (1.0 + abs(vec[j]))
        e = np.zeros(nf)
        e[j] = h
        _, gp = log_posterior_and_grad(vec + e, ds, ms, weights=w)
        _, gm = log_posterior_and_grad(vec - e, ds, ms, weights=w)
        H[:, j] = -(gp - gm) / (2.0 * h)
    return 0.5 * (H + H.T)


def mode_hessian(fit: FitResult, ds: Dataset, weights=None) -> np.ndarray:
    """Negative Hessian of the log posterior at the mode (cached on the fit)."""
    if fit.mode_hessian is not None:
        return fit.mode_hessian
    ms = fit.ms
    if ms.variant in ("m0", "m1"):
        H = _mode_hessian_analytic(fit.vec, ds, ms, weights=weights)
    else:
        H = _mode_hessian_fd(fit.vec, ds, ms, weights=weights)
    fit.mode_hessian = H
    return H


def laplace_draws(fit: FitResult, ds: Dataset, M: int, seed: int, weights=None) -> np.ndarray:
    """Gaussian draws from the Laplace approximation at the mode."""
    H = mode_hessian(fit, ds, weights=weights)
    n = H.shape[0]
    jitter = 0.0
    for attempt in range(6):
        try:
            C = np.linalg.cholesky(H + jitter * np.eye(n))
            break
        except np.linalg.LinAlgError:
            jitter = 10.0 ** (-10 + 2 * attempt) * float(np.abs(np.diag(H)).max())
    else:
        raise np.linalg.LinAlgError("mode curvature is not positive definite")
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((M, n))
    from scipy.linalg import solve_triangular

    # cov = H^-1 = C^-T C^-1, so draws are mode + C^-T xi
    dev = solve_triangular(C, xi.T, lower=True, trans="T").T
    return fit.vec[None, :] + dev


# ---------------------------------------------------------------------------
# Hamiltonian Monte Carlo


@dataclass
class McmcConfig:
    chains: int = 4
    warmup: int = 500
    draws: int = 1000
    target_accept: float = 0.8
    max_leapfrog: int = 48
    divergence_energy: float = 1000.0
    init_jitter: float = 0.1
    seed: int = 0


@dataclass
class McmcResult:
    draws: np.ndarray          # (chains, draws, dim)
    divergences: int
    accept_rate: float
    step_size: float
    mass_diag: np.ndarray

    def stacked(self) -> np.ndarray:
        return self.draws.reshape(-1, self.draws.shape[-1])


def _leapfrog(logp_grad, x, p, eps, steps, mass_inv):
    val, grad = logp_grad(x)
    for _ in range(steps):
        p = p + 0.5 * eps * grad
        x = x + eps * mass_inv * p
        val, grad = logp_grad(x)
        p = p + 0.5 * eps * grad
    return x, p, val, grad


def _find_initial_step(logp_grad, x, mass_inv, rng):
    eps = 1.0
    val0, _ = logp_grad(x)
    p = rng.standard_normal(x.shape[0]) / np.sqrt(mass_inv)
    h0 = val0 - 0.5 * float(p @ (mass_inv * p))
    x1, p1, val1, _ = _leapfrog(logp_grad, x, p, eps, 1, mass_inv)
    h1 = val1 - 0.5 * float(p1 @ (mass_inv * p1))
    ratio = np.exp(h1 - h0) if np.isfinite(h1) else 0.0
    direction = 1.0 if ratio > 0.5 else -1.0
    for _ in range(60):
        eps *= 2.0**direction
        x1, p1, val1, _ = _leapfrog(logp_grad, x, p, eps, 1, mass_inv)
        h1 = val1 - 0.5 * float(p1 @ (mass_inv * p1))
        ratio = np.exp(h1 - h0) if np.isfinite(h1) else 0.0
        if (direction == 1.0 and ratio <= 0.5) or (direction == -1.0 and ratio >= 0.5):
            break
    return eps


def hmc_sample(logp_grad, x0: np.ndarray, config: McmcConfig, rng: np.random.Generator):
    """One HMC chain with dual-averaged step size and a diagonal mass matrix
    estimated from the first warmup half. Returns (draws, divergences,
    accept_rate, eps, mass_diag).
    """
    dim = x0.shape[0]
    x = x0.copy()
    mass = np.ones(dim)
    mass_inv = 1.0 / mass

    def run_phase(n_iter, eps_state, adapt, collect=None):
        nonlocal x
        mu_l, log_eps, log_eps_bar, h_bar, t = eps_state
        divergences = 0
        accepts = []
        for it in range(n_iter):
            p = rng.standard_normal(dim) * np.sqrt(mass)
            val0, _ = logp_grad(x)
            h0 = val0 - 0.5 * float(p @ (mass_inv * p))
            steps = int(rng.integers(1, config.max_leapfrog + 1))
            x1, p1, val1, _ = _leapfrog(logp_grad, x, p, np.exp(log_eps), steps, mass_inv)
            h1 = val1 - 0.5 * float(p1 @ (mass_inv * p1))
            delta_h = h1 - h0
            if not np.isfinite(delta_h) or -delta_h > config.divergence_energy:
                divergences += 1
                alpha = 0.0
            else:
                alpha = min(1.0, float(np.exp(delta_h)))
                if rng.random() < alpha:
                    x = x1
            accepts.append(alpha)
            if adapt:
                t += 1
                h_bar = (1.0 - 1.0 / (t + 10.0)) * h_bar + (config.target_accept - alpha) / (t + 10.0)
                log_eps = mu_l - np.sqrt(t) / 0.05 * h_bar
                w_t = t ** (-0.75)
                log_eps_bar = w_t * log_eps + (1.0 - w_t) * log_eps_bar
            if collect is not None:
                collect.append(x.copy())
        return (mu_l, log_eps, log_eps_bar, h_bar, t), divergences, accepts

    eps0 = _find_initial_step(logp_grad, x, mass_inv, rng)
    state = (np.log(10.0 * eps0), np.log(eps0), np.log(eps0), 0.0, 0)

    half = config.warmup // 2
    phase1: list[np.ndarray] = []
    state, div1, _ = run_phase(half, state, adapt=True, collect=phase1)
    if len(phase1) > 10:
        tail = np.asarray(phase1[len(phase1) // 2 :])
        var = tail.var(axis=0, ddof=1)
        n_t = tail.shape[0]
        mass_inv = (n_t * var + 1e-3 * 5.0) / (n_t + 5.0)
        mass_inv = np.maximum(mass_inv, 1e-8)
        mass = 1.0 / mass_inv
    eps0 = _find_initial_step(logp_grad, x, mass_inv, rng)
    state = (np.log(10.0 * eps0), np.log(eps0), np.log(eps0), 0.0, 0)
    state, div2, _ = run_phase(config.warmup - half, state, adapt=True)

    eps_final = float(np.exp(state[2]))
    state = (state[0], np.log(eps_final), np.log(eps_final), 0.0, 0)
    kept: list[np.ndarray] = []
    _, div3, accepts = run_phase(config.draws, state, adapt=False, collect=kept)
    return (
        np.asarray(kept),
        div3,
        float(np.mean(accepts)) if accepts else 0.0,
        eps_final,
        mass,
    )


def sample_mcmc(ds: Dataset, ms: ModelStructure, weights=None,
                config: McmcConfig | None = None,
                init: np.ndarray | None = None) -> McmcResult:
    """Multi-chain HMC over the free coordinates, initialized near the mode."""
    config = config or McmcConfig()
    w = _norm_weights(ds, weights)

    def logp_grad(v):
        return log_posterior_and_grad(v, ds, ms, weights=w)

    if init is None:
        try:
            init = fit_map(ds, ms, weights=w).vec
        except NonConvergenceError as exc:
            init = exc.result.vec
    rng = np.random.default_rng(config.seed)
    all_draws = []
    total_div = 0
    acc = []
    eps_last, mass_last = np.nan, np.ones(init.shape[0])
    for _ in range(config.chains):
        x0 = init + config.init_jitter * rng.standard_normal(init.shape[0])
        draws, div, a, eps_last, mass_last = hmc_sample(logp_grad, x0, config, rng)
        all_draws.append(draws)
        total_div += div
        acc.append(a)
    return McmcResult(
        draws=np.asarray(all_draws),
        divergences=total_div,
        accept_rate=float(np.mean(acc)),
        step_size=float(eps_last),
        mass_diag=mass_last,
    )


# ---------------------------------------------------------------------------
# chain diagnostics


def _split_chains(x: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    m, n = x.shape
    half = n // 2
    return np.vstack([x[:, :half], x[:, half : 2 * half]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    flat = x.reshape(-1)
    ranks = rankdata(flat, method="average")
    z = ndtri((ranks - 0.375) / (flat.size + 0.25))
    return z.reshape(x.shape)


def _rhat_basic(x: np.ndarray) -> float:
    m, n = x.shape
    means = x.mean(axis=1)
    B = n * means.var(ddof=1)
    W = x.var(axis=1, ddof=1).mean()
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def split_rhat(chains: np.ndarray) -> float:
    """Rank-normalized split-Rhat of one scalar quantity, chains x draws."""
    x = _split_chains(chains)
    return _rhat_basic(_rank_normalize(x))


def _ess_from_chains(x: np.ndarray) -> float:
    m, n = x.shape
    if n < 4:
        return float("nan")
    means = x.mean(axis=1, keepdims=True)
    centered = x - means
    acov = np.empty((m, n))
    for c in range(m):
        full = np.correlate(centered[c], centered[c], mode="full")[n - 1 :]
        acov[c] = full / n
    W = x.var(axis=1, ddof=1).mean()
    B_over_n = x.mean(axis=1).var(ddof=1)
    var_plus = (n - 1) / n * W + B_over_n
    if var_plus <= 0:
        return float("nan")
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # Geyer initial monotone positive sequence on paired sums
    t = 1
    total = 0.0
    prev_pair = None
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        if prev_pair is not None:
            pair = min(pair, prev_pair)
        total += pair
        prev_pair = pair
        t += 2
    ess = m * n / (1.0 + 2.0 * total)
    return float(min(ess, m * n * np.log10(max(m * n, 10))))


def ess_bulk(chains: np.ndarray) -> float:
    x = _split_chains(chains)
    return _ess_from_chains(_rank_normalize(x))


def ess_tail(chains: np.ndarray) -> float:
    x = _split_chains(chains)
    flat = x.reshape(-1)
    lo, hi = np.quantile(flat, [0.05, 0.95])
    ess_lo = _ess_from_chains(_rank_normalize((x <= lo).astype(float)))
    ess_hi = _ess_from_chains(_rank_normalize((x >= hi).astype(float)))
    return float(np.nanmin([ess_lo, ess_hi]))
