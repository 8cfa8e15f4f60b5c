"""Design-calibrated Monte Carlo harness.

Builds synthetic populations with a state hierarchy, draws stratified
cluster samples whose inclusion probabilities can be tilted toward the
expected outcome, fits the hurdle model three ways (unweighted, weighted,
weighted with the sandwich correction) and aggregates repeated-sampling
metrics: relative bias, RMSE, interval coverage, width ratios.

The frame is synthetic but shaped like a national establishment survey:
unequal state sizes, strata formed from contiguous state groups, PSUs cut
along within-state urbanicity quantiles and carrying their own outcome
intercepts, lognormal weight noise at unit, PSU and state level, and a
Poisson sampling stage with an outcome-linked tilt.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.optimize import minimize_scalar
from scipy.special import expit, ndtri

from . import scores as scores_mod
from . import survey as survey_mod
from .infer import NonConvergenceError, fit_map, mode_hessian
from .kernel import log_zero_prob_arrays, sample_ztbb_arrays
from .model import Dataset, ModelStructure, _offsets

__all__ = [
    "TruthConfig",
    "FramePlan",
    "Scenario",
    "scenario",
    "scenario_config",
    "SCENARIO_NAMES",
    "TRACKED_PARAMS",
    "ESTIMATORS",
    "Population",
    "generate_population",
    "SampleMeta",
    "draw_sample",
    "run_replication",
    "aggregate_metrics",
    "run_campaign",
]

COVARIATE_NAMES = ["const", "poverty", "urban", "black", "hispanic"]
TRACKED_PARAMS = ["alpha_poverty", "beta_poverty", "log_kappa", "tau_ext", "tau_int"]
ESTIMATORS = ["unweighted", "weighted", "sandwich"]


@dataclass(frozen=True)
class TruthConfig:
    """Generating values for the population process.

    The state-varying poverty slopes are a fixed attribute of the generating
    process, drawn once from slope_seed, exactly like the coefficient table
    itself: every replication shares the same realized slopes. Leaving them
    out of the fitted model then produces a systematic, repeatable bias
    rather than noise that averages away across replications.
    """

    alpha: tuple = (0.696, -0.119, 0.253, -0.070, -0.139)
    beta: tuple = (-0.032, 0.057, -0.018, 0.080, 0.040)
    log_kappa: float = 1.655
    tau_ext: float = 0.577
    tau_int: float = 0.208
    rho_cross: float = 0.285
    slope_sd_ext: float = 0.0
    slope_sd_int: float = 0.0
    slope_seed: int = 2344247

    def tracked_values(self) -> dict[str, float]:
        return {
            "alpha_poverty": self.alpha[1],
            "beta_poverty": self.beta[1],
            "log_kappa": self.log_kappa,
            "tau_ext": self.tau_ext,
            "tau_int": self.tau_int,
        }


@dataclass(frozen=True)
class FramePlan:
    """Shape of the synthetic frame and of the sampling design.

    Two separate design features produce the baseline design effect when the
    informativeness dial is off. First, PSU-level random intercepts on both
    margins (psu_effect_sd_*) put genuine cluster structure in the outcome
    that the fitted model does not represent; their variance leaks into the
    apparent between-state heterogeneity of any fit, and a weighted fit,
    whose claimed per-state information is distorted by the weight noise,
    inflates the scale parameters well past the unweighted fit. Second,
    lognormal weight noise with unit, PSU and state components sets the
    Kish design effect of the weights themselves. gain() maps the nominal
    informativeness dial onto the log-inclusion tilt; it is the per-build
    rescaling that keeps the realized design effects inside the published
    bands for this frame.
    """

    n_states: int = 51
    n_strata: int = 10
    psus_per_stratum: int = 8
    share_spread: float = 0.85
    trials_median: float = 48.0
    trials_sigma: float = 0.68
    trials_min: int = 4
    trials_max: int = 378
    psu_effect_sd_ext: float = 0.75
    psu_effect_sd_int: float = 0.30
    unit_noise_var: float = 0.72
    psu_noise_var: float = 0.12
    state_noise_var: float = 0.03
    weight_trim_multiple: float = 20.0
    gain_scale: float = 1.92
    gain_rate: float = 6.0
    poverty_cv: float = 0.48
    poverty_shift_sd: float = 0.30
    poverty_size_link: float = 0.7
    urban_rate: float = 0.93

    def gain(self, rho_inc: float) -> float:
        return self.gain_scale * (1.0 - math.exp(-self.gain_rate * rho_inc))


@dataclass(frozen=True)
class Scenario:
    """One cell of the coverage study: informativeness dial, truth, sizes."""

    name: str
    rho_inc: float
    truth: TruthConfig = field(default_factory=TruthConfig)
    population_size: int = 10_000
    target_n: int = 1_000
    replications: int = 50
    nominal_level: float = 0.90

    @property
    def misspecified(self) -> bool:
        return self.truth.slope_sd_ext > 0 or self.truth.slope_sd_int > 0


_SCENARIO_DIALS = {"S0": 0.0, "S3": 0.15, "S4": 0.50, "B5": 0.15}
SCENARIO_NAMES = list(_SCENARIO_DIALS)
_SCENARIO_INDEX = {name: i for i, name in enumerate(SCENARIO_NAMES)}


def scenario(name: str, truth: TruthConfig | None = None,
             full: bool = False) -> Scenario:
    """Registry of the coverage-study settings.

    S0 has noisy but outcome-independent weights; S3 and S4 tilt the
    inclusion probabilities toward the expected outcome with increasing
    strength; B5 combines the moderate tilt with state-varying poverty
    slopes that the fitted model leaves out. Desk sizes by default; full=True
    switches to the large frame.
    """
    if name not in _SCENARIO_DIALS:
        raise KeyError(f"unknown scenario {name!r}; choose from {SCENARIO_NAMES}")
    base = truth if truth is not None else TruthConfig()
    if name == "B5":
        base = replace(base, slope_sd_ext=0.15, slope_sd_int=0.10)
    sizes = {"population_size": 50_000, "target_n": 7_000, "replications": 200} \
        if full else {}
    return Scenario(name=name, rho_inc=_SCENARIO_DIALS[name], truth=base, **sizes)


def scenario_config(name: str, full: bool = False) -> dict:
    """JSON-ready description of one scenario cell."""
    sc = scenario(name, full=full)
    doc = asdict(sc)
    doc["misspecified"] = sc.misspecified
    return doc


# ---------------------------------------------------------------------------
# population synthesis


@dataclass
class Population:
    X: np.ndarray
    y: np.ndarray
    n: np.ndarray
    state: np.ndarray
    stratum: np.ndarray
    psu: np.ndarray
    ystar: np.ndarray
    meta: dict

    def __len__(self) -> int:
        return self.y.size


def _state_layout(plan: FramePlan):
    """State shares, stratum membership and the per-state PSU counts."""
    S = plan.n_states
    quant = ndtri((np.arange(S) + 0.5) / S)
    shares = np.exp(plan.share_spread * quant)
    shares = shares / shares.sum()
    # contiguous groups of states form strata; sizes as even as possible
    bounds = np.linspace(0, S, plan.n_strata + 1).round().astype(int)
    stratum_of_state = np.zeros(S, dtype=int)
    for h in range(plan.n_strata):
        stratum_of_state[bounds[h] : bounds[h + 1]] = h
    # PSU blocks: one per state, remaining quota split among the largest
    # states in the stratum
    blocks = np.ones(S, dtype=int)
    for h in range(plan.n_strata):
        members = np.where(stratum_of_state == h)[0]
        extra = plan.psus_per_stratum - members.size
        if extra > 0:
            order = members[np.argsort(shares[members])[::-1]]
            for j in range(extra):
                blocks[order[j % members.size]] += 1
    return shares, stratum_of_state, blocks


def _state_slopes(truth: TruthConfig, n_states: int) -> tuple[np.ndarray, np.ndarray]:
    """Realized state-varying poverty slopes; deterministic given the truth."""
    if truth.slope_sd_ext == 0.0 and truth.slope_sd_int == 0.0:
        z = np.zeros(n_states)
        return z, z
    srng = np.random.default_rng(np.random.SeedSequence(truth.slope_seed))
    slope_ext = truth.slope_sd_ext * srng.standard_normal(n_states)
    slope_int = truth.slope_sd_int * srng.standard_normal(n_states)
    return slope_ext, slope_int


def generate_population(truth: TruthConfig, size: int, plan: FramePlan,
                        rng: np.random.Generator) -> Population:
    """Draw one finite population from the generating process."""
    if size < 20 * plan.n_states:
        raise ValueError(
            f"population size {size} too small for {plan.n_states} states; "
            f"need at least {20 * plan.n_states}"
        )
    N = size
    shares, stratum_of_state, blocks = _state_layout(plan)
    state = rng.choice(plan.n_states, size=N, p=shares)

    # covariates; everything except the intercept is standardized so the
    # generating coefficients act on comparable scales
    shape = 1.0 / plan.poverty_cv**2
    # state-level poverty scale: random dispersion plus a size link, so the
    # larger (more internally heterogeneous) states carry a wider poverty
    # distribution and hence a larger share of the slope information
    shift_log = rng.normal(0.0, plan.poverty_shift_sd, plan.n_states)
    if plan.poverty_size_link:
        rel = np.log(shares) - np.log(shares).mean()
        shift_log = shift_log + plan.poverty_size_link * rel
    state_shift = np.exp(shift_log)
    poverty_raw = rng.gamma(shape, scale=state_shift[state] / shape)
    urban_raw = (rng.random(N) < plan.urban_rate).astype(float)
    mix = rng.random(N) < 0.15
    black_raw = np.where(mix, rng.beta(5.0, 3.0, N), rng.beta(1.2, 10.0, N))
    mix2 = rng.random(N) < 0.20
    hisp_raw = np.where(mix2, rng.beta(6.0, 3.0, N), rng.beta(1.0, 8.0, N))

    raw = np.column_stack([poverty_raw, urban_raw, black_raw, hisp_raw])
    mean = raw.mean(axis=0)
    sd = raw.std(axis=0)
    X = np.column_stack([np.ones(N), (raw - mean) / sd])

    n = np.exp(rng.normal(math.log(plan.trials_median), plan.trials_sigma, N))
    n = np.clip(np.rint(n), plan.trials_min, plan.trials_max).astype(int)

    # PSU blocks along within-state quantiles of an urbanicity index (urban
    # indicator plus the race-share covariates); poverty stays mostly
    # within-PSU so its slope is not the coordinate that absorbs the
    # cluster design effect
    urbanicity = X[:, 2] + X[:, 3] + X[:, 4]
    psu = np.zeros(N, dtype=int)
    next_id = 0
    for s in range(plan.n_states):
        rows = np.where(state == s)[0]
        B = blocks[s]
        if rows.size == 0:
            next_id += B
            continue
        order = rows[np.argsort(urbanicity[rows], kind="stable")]
        cuts = np.array_split(order, B)
        for c in cuts:
            psu[c] = next_id
            next_id += 1
    n_psus = next_id

    # state deviations on both margins, correlated across margins; the
    # optional state-varying slopes come from the fixed truth realization;
    # PSU-level intercepts supply cluster structure the model leaves out
    sd_vec = np.array([truth.tau_ext, truth.tau_int])
    corr = np.array([[1.0, truth.rho_cross], [truth.rho_cross, 1.0]])
    cov = np.outer(sd_vec, sd_vec) * corr
    deltas = rng.multivariate_normal(np.zeros(2), cov, size=plan.n_states)
    slope_ext, slope_int = _state_slopes(truth, plan.n_states)
    b_ext = rng.normal(0.0, plan.psu_effect_sd_ext, n_psus)
    b_int = rng.normal(0.0, plan.psu_effect_sd_int, n_psus)

    eta_ext = (X @ np.asarray(truth.alpha) + deltas[state, 0]
               + slope_ext[state] * X[:, 1] + b_ext[psu])
    eta_int = (X @ np.asarray(truth.beta) + deltas[state, 1]
               + slope_int[state] * X[:, 1] + b_int[psu])
    q = expit(eta_ext)
    mu = expit(eta_int)
    kappa = math.exp(truth.log_kappa)

    z = rng.random(N) < q
    y = np.zeros(N, dtype=int)
    if z.any():
        y[z] = sample_ztbb_arrays(n[z], mu[z], kappa, rng)

    # outcome index for the informative sampling stage: the standardized
    # expected enrollment q * n * mu / (1 - p0), built from the same
    # state-level predictors that generate the outcome. Any state-varying
    # structure the fitted model omits therefore feeds the inclusion tilt
    # directly, which is what makes the unweighted fit genuinely
    # inconsistent when the dial is on.
    log_p0 = log_zero_prob_arrays(n, mu, kappa)
    expected = q * n * mu / (1.0 - np.exp(log_p0))
    size_index = np.log(expected)
    ystar = (size_index - size_index.mean()) / size_index.std()

    meta = {
        "zero_rate": float(np.mean(y == 0)),
        "structural_zero_rate": float(np.mean(~z)),
        "covariate_means": dict(zip(COVARIATE_NAMES[1:], mean.tolist())),
        "covariate_sds": dict(zip(COVARIATE_NAMES[1:], sd.tolist())),
        "n_psus": int(n_psus),
        "state_shares": shares.tolist(),
    }
    return Population(
        X=X, y=y, n=n, state=state,
        stratum=stratum_of_state[state], psu=psu, ystar=ystar, meta=meta,
    )


# ---------------------------------------------------------------------------
# sampling stage


@dataclass(frozen=True)
class SampleMeta:
    n_sample: int
    deff: float
    ess: float
    clip_fraction: float
    c0: float
    design_dof: int
    ht_population: float
    ht_se: float


def _solve_offset(score: np.ndarray, target: float) -> float:
    """Bisection for the intercept that hits the expected sample size under
    Poisson sampling with probabilities min(exp(c0 + score), 1). Solving on
    the clipped sum directly is the fixed point of clip-and-resolve."""
    lo, hi = -40.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        tot = np.minimum(np.exp(mid + score), 1.0).sum()
        if tot > target:
            hi = mid
        else:
            lo = mid
        if hi - lo < 1e-12:
            break
    return 0.5 * (lo + hi)


def draw_sample(pop: Population, rho_inc: float, target_n: int,
                rng: np.random.Generator,
                plan: FramePlan | None = None) -> tuple[Dataset, SampleMeta]:
    """Poisson sample with two-component weight noise and an optional tilt
    of log-inclusion toward the expected outcome. Weights are inverse
    probabilities, normalized to the realized sample size."""
    plan = plan or FramePlan()
    if target_n >= len(pop):
        raise ValueError("target sample size must be below the population size")
    rho_eff = plan.gain(rho_inc)
    n_psus = pop.meta["n_psus"]
    n_states = int(pop.state.max()) + 1
    u_state = rng.normal(0.0, math.sqrt(plan.state_noise_var), n_states)
    u_psu = rng.normal(0.0, math.sqrt(plan.psu_noise_var), n_psus)
    # unit noise is truncated at two sigma: untruncated tails combine with
    # the outcome tilt into a handful of extreme weights per draw, which
    # makes the realized design effect swing far outside its scenario band
    sd_u = math.sqrt(plan.unit_noise_var)
    e_unit = np.clip(rng.normal(0.0, sd_u, len(pop)), -2.0 * sd_u, 2.0 * sd_u)
    score = rho_eff * pop.ystar + u_state[pop.state] + u_psu[pop.psu] + e_unit
    c0 = _solve_offset(score, float(target_n))
    pi = np.minimum(np.exp(c0 + score), 1.0)
    take = rng.random(len(pop)) < pi
    if take.sum() < 50:
        raise RuntimeError("sampling stage returned a degenerate sample")
    pi_t = pi[take]
    w_raw = 1.0 / pi_t
    # analysis weights are trimmed at a multiple of the median: a handful of
    # near-zero inclusion probabilities otherwise dominate the weight
    # variance of a draw; the population total below keeps the untrimmed
    # inverse probabilities
    w_trim = np.minimum(w_raw, plan.weight_trim_multiple * np.median(w_raw))
    ds = Dataset(
        y=pop.y[take], n=pop.n[take], X=pop.X[take], state=pop.state[take],
        stratum=pop.stratum[take], psu=pop.psu[take],
        weight=w_trim * take.sum() / w_trim.sum(),
        columns=COVARIATE_NAMES,
    )
    kr = survey_mod.kish(ds.weight)
    design = survey_mod.SurveyDesign.from_dataset(ds)
    meta = SampleMeta(
        n_sample=int(take.sum()),
        deff=kr.deff,
        ess=kr.ess,
        clip_fraction=float(np.mean(pi >= 1.0)),
        c0=c0,
        design_dof=survey_mod.design_dof(design),
        ht_population=float(w_raw.sum()),
        ht_se=float(math.sqrt(np.sum((1.0 - pi_t) / pi_t**2))),
    )
    return ds, meta


# ---------------------------------------------------------------------------
# one replication: three estimators, Wald intervals on tracked parameters


def _tracked_slots(ms: ModelStructure) -> dict[str, int]:
    off = _offsets(ms)
    a = off["alpha"].start
    b = off["beta"].start
    return {
        "alpha_poverty": a + 1,
        "beta_poverty": b + 1,
        "log_kappa": off["log_kappa"].start,
        "tau_ext": off["log_tau"].start,
        "tau_int": off["log_tau"].start + 1,
    }


def _marginal_tau(theta, ds: Dataset, ms: ModelStructure,
                  weights) -> dict[str, tuple[float, float]]:
    """Scale parameters from the Laplace-marginal random-effects step.

    The joint mode of a non-centered hierarchy is degenerate in the scale
    parameters, so the simulation estimator replaces them: per-state
    deviation estimates and their curvature-based variances are read off the
    mode (the stationarity of the auxiliary coordinates gives the unshrunk
    estimate delta_s + z_s/(tau I_s)), then tau maximizes the marginal
    normal-normal likelihood with the half-normal prior. Returns
    {"tau_ext"/"tau_int": (log_tau_hat, se_log_tau)}.
    """
    w = np.ones(len(ds)) if weights is None else np.asarray(weights, dtype=float)
    _, _, _, H2 = scores_mod._margin_derivs(theta, ds, ms, order=2)
    out = {}
    for key, hcol, m in (("tau_ext", "h_ee", 0), ("tau_int", "h_ii", 1)):
        info = np.zeros(ms.S)
        np.add.at(info, ds.state, -w * H2[hcol])
        tau_m = float(theta.tau[m])
        used = info > 1e-8
        z_m = theta.z_aux[used, m]
        I_s = info[used]
        delta_hat = tau_m * z_m + z_m / (tau_m * I_s)
        v_s = 1.0 / I_s

        def neg_marginal(lt):
            t2 = math.exp(2.0 * lt)
            tot = t2 + v_s
            val = -0.5 * np.sum(np.log(tot) + delta_hat**2 / tot)
            val += -0.5 * t2 + lt  # half-normal prior and log-scale jacobian
            return -val

        res = minimize_scalar(neg_marginal, bounds=(math.log(1e-3), math.log(50.0)),
                              method="bounded", options={"xatol": 1e-10})
        lt_hat = float(res.x)
        h = 1e-4
        curv = (neg_marginal(lt_hat + h) - 2.0 * neg_marginal(lt_hat)
                + neg_marginal(lt_hat - h)) / h**2
        se = 1.0 / math.sqrt(curv) if curv > 1e-8 else float("nan")
        out[key] = (lt_hat, se)
    return out


def _interval_rows(name: str, vec: np.ndarray, var_diag: np.ndarray,
                   slots: dict[str, int], truth: dict[str, float],
                   level: float, failed: bool,
                   replacements: dict[str, tuple[float | None, float]] | None = None):
    """Wald rows for every tracked parameter. Scale parameters are tracked on
    the natural scale with intervals mapped through exp. replacements maps a
    parameter to (free-scale point estimate or None to keep, standard error).
    """
    zq = ndtri(0.5 + level / 2.0)
    rows = []
    for param, slot in slots.items():
        se = math.sqrt(var_diag[slot])
        est_free = vec[slot]
        if replacements and param in replacements:
            rep_est, rep_se = replacements[param]
            if rep_est is not None:
                est_free = rep_est
            if math.isfinite(rep_se):
                se = rep_se
        lo, hi = est_free - zq * se, est_free + zq * se
        if param.startswith("tau_"):
            est, lo, hi = math.exp(est_free), math.exp(lo), math.exp(hi)
        else:
            est = est_free
        t0 = truth[param]
        rows.append({
            "estimator": name,
            "param": param,
            "truth": t0,
            "est": est,
            "se": se,
            "lo": lo,
            "hi": hi,
            "covered": bool(lo <= t0 <= hi),
            "width": hi - lo,
            "failed": failed,
        })
    return rows


def run_replication(sc: Scenario, plan: FramePlan, rep: int, base_seed: int,
                    engine: str = "map") -> list[dict]:
    """Fresh population, one sample, three estimators, tracked-parameter rows.

    The three estimators share one dataset: the naive unweighted fit, the
    weighted pseudo-likelihood fit with its naive variance, and the weighted
    fit with clustered sandwich standard errors on the fixed effects (scale
    parameters keep the weighted intervals, so their widths match exactly).
    """
    if engine != "map":
        raise ValueError(f"unsupported simulation engine {engine!r}; use 'map'")
    ss = np.random.SeedSequence(entropy=base_seed,
                                spawn_key=(_SCENARIO_INDEX[sc.name], rep))
    rng = np.random.default_rng(ss)
    pop = generate_population(sc.truth, sc.population_size, plan, rng)
    ds, smeta = draw_sample(pop, sc.rho_inc, sc.target_n, rng, plan)
    ms = ModelStructure.for_variant("m1", P=ds.n_cov, S=plan.n_states)
    slots = _tracked_slots(ms)
    truth = sc.truth.tracked_values()
    level = sc.nominal_level

    rows: list[dict] = []
    fits = {}
    tau_reps = {}
    for est, weights in (("unweighted", None), ("weighted", ds.weight)):
        failed = False
        try:
            fit = fit_map(ds, ms, weights=weights)
        except NonConvergenceError as exc:
            fit = exc.result
            failed = True
        H = mode_hessian(fit, ds, weights=weights)
        var_diag = np.maximum(np.diag(np.linalg.inv(H)), 1e-12)
        fits[est] = (fit, var_diag, failed)
        tau_reps[est] = _marginal_tau(fit.theta, ds, ms, weights)
        rows += _interval_rows(est, fit.vec, var_diag, slots, truth, level,
                               failed, replacements=tau_reps[est])

    # sandwich correction reuses the weighted fit; fixed effects get
    # design-based standard errors propagated through the deviation block,
    # scale parameters keep the weighted ones
    fit_w, var_w, failed_w = fits["weighted"]
    P = ms.P
    replacements = dict(tau_reps["weighted"])
    failed_sw = failed_w
    try:
        rep_sw = survey_mod.design_sandwich(fit_w.theta, ds, ms, weights=ds.weight)
        V = rep_sw.V
        replacements.update({
            "alpha_poverty": (None, math.sqrt(V[1, 1])),
            "beta_poverty": (None, math.sqrt(V[P + 1, P + 1])),
            "log_kappa": (None, math.sqrt(V[2 * P, 2 * P])),
        })
    except np.linalg.LinAlgError:
        failed_sw = True
    rows += _interval_rows("sandwich", fit_w.vec, var_w, slots, truth, level,
                           failed_sw, replacements=replacements)

    for r in rows:
        r.update({
            "scenario": sc.name,
            "rep": rep,
            "nominal": level,
            "n_sample": smeta.n_sample,
            "deff": smeta.deff,
            "clip_fraction": smeta.clip_fraction,
        })
    return rows


# ---------------------------------------------------------------------------
# aggregation


def aggregate_metrics(records: pd.DataFrame) -> pd.DataFrame:
    """Per (scenario, estimator, parameter): relative bias in percent, RMSE,
    coverage with its Monte Carlo standard error, median interval width, the
    width ratio of the sandwich intervals to the weighted ones, a flag for
    coverage off nominal by more than twice the MCSE, and the count of
    excluded failed fits. Output is deterministic under record permutation.
    """
    out = []
    for (scn, est, par), g in records.groupby(["scenario", "estimator", "param"]):
        g = g.sort_values("rep")
        ok = g[~g["failed"]]
        n_failed = int(g["failed"].sum())
        if len(ok) < 2:
            raise ValueError(
                f"cell ({scn}, {est}, {par}) has {len(ok)} successful "
                "replications; need at least 2"
            )
        t0 = float(ok["truth"].iloc[0])
        nominal = float(ok["nominal"].iloc[0])
        est_vals = ok["est"].to_numpy()
        cov = float(ok["covered"].mean())
        R = len(ok)
        mcse = math.sqrt(max(cov * (1.0 - cov), 1e-12) / R)
        out.append({
            "scenario": scn,
            "estimator": est,
            "param": par,
            "n_reps": R,
            "n_failed": n_failed,
            "truth": t0,
            "mean_est": float(est_vals.mean()),
            "rel_bias_pct": 100.0 * (est_vals.mean() - t0) / abs(t0),
            "rmse": float(np.sqrt(np.mean((est_vals - t0) ** 2))),
            "coverage": cov,
            "coverage_mcse": mcse,
            "coverage_flagged": bool(abs(cov - nominal) > 2.0 * mcse),
            "median_width": float(ok["width"].median()),
            "mean_deff": float(ok["deff"].mean()),
        })
    df = pd.DataFrame(out).sort_values(["scenario", "estimator", "param"])
    df = df.reset_index(drop=True)
    wt = df[df["estimator"] == "weighted"].set_index(["scenario", "param"])["median_width"]
    ratios = []
    for _, row in df.iterrows():
        key = (row["scenario"], row["param"])
        if row["estimator"] == "sandwich" and key in wt.index:
            ratios.append(row["median_width"] / wt.loc[key])
        else:
            ratios.append(np.nan)
    df["width_ratio"] = ratios
    return df


def run_campaign(scenario_names: list[str], reps: int | None = None,
                 plan: FramePlan | None = None, base_seed: int = 20_260_815,
                 workers: int = 1, full: bool = False,
                 progress=None) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Run the scenario grid and return (records, metrics).

    Each replication gets an independent stream derived from the base seed
    and its (scenario, replication) index, so the grid is reproducible for
    any worker count and the aggregation is a deterministic fold.
    """
    plan = plan or FramePlan()
    jobs = []
    for nm in scenario_names:
        sc = scenario(nm, full=full)
        R = reps if reps is not None else sc.replications
        jobs += [(sc, r) for r in range(R)]
    rows: list[dict] = []
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(run_replication, sc, plan, r, base_seed)
                    for sc, r in jobs]
            for k, f in enumerate(futs):
                rows += f.result()
                if progress:
                    progress(k + 1, len(jobs))
    else:
        for k, (sc, r) in enumerate(jobs):
            rows += run_replication(sc, plan, r, base_seed)
            if progress:
                progress(k + 1, len(jobs))
    records = pd.DataFrame(rows)
    return records, aggregate_metrics(records)
