"""Shared fixtures for the svyhurdle test suite."""

import numpy as np
import pytest
from scipy.special import expit

from svyhurdle.kernel import sample_ztbb_arrays
from svyhurdle.model import Dataset, ModelStructure, n_free
from svyhurdle import simlab


# ---------------------------------------------------------------------------
# Synthetic data builders
# ---------------------------------------------------------------------------


def make_dataset(n_obs=400, variant="m0", seed=0, n_cov=3, n_states=4,
                 weight_mode="uniform", tau=(0.35, 0.20), alpha=None, beta=None,
                 log_kappa=1.8, n_strata=2):
    """Draw a dataset from the hurdle model itself.

    The generating coefficients are returned alongside the data so recovery
    tests can compare against the exact truth. Weights are either uniform or
    a positive function of a covariate ("informative" makes them correlate
    with the linear predictors through x1).
    """
    rng = np.random.default_rng(seed)
    if alpha is None:
        alpha = np.array([0.6, -0.4, 0.25][:n_cov] + [0.1] * max(0, n_cov - 3))
    if beta is None:
        beta = np.array([-0.2, 0.3, -0.15][:n_cov] + [0.05] * max(0, n_cov - 3))
    X = np.column_stack([np.ones(n_obs), rng.standard_normal((n_obs, n_cov - 1))])
    state = rng.integers(0, n_states, n_obs)
    psu = state * 3 + rng.integers(0, 3, n_obs)
    stratum = (state * n_strata) // n_states
    n = rng.integers(3, 40, n_obs)

    dev_ext = np.zeros(n_states)
    dev_int = np.zeros(n_states)
    if variant != "m0":
        dev_ext = tau[0] * rng.standard_normal(n_states)
        dev_int = tau[1] * rng.standard_normal(n_states)
    q = expit(X @ alpha + dev_ext[state])
    mu = expit(X @ beta + dev_int[state])
    kappa = float(np.exp(log_kappa))

    z = rng.random(n_obs) < q
    y = np.zeros(n_obs, dtype=int)
    if z.any():
        y[z] = sample_ztbb_arrays(n[z], mu[z], kappa, rng)

    if weight_mode == "uniform":
        w = np.ones(n_obs)
    elif weight_mode == "varied":
        w = np.exp(0.5 * rng.standard_normal(n_obs))
    elif weight_mode == "informative":
        w = np.exp(0.8 * X[:, 1] + 0.3 * rng.standard_normal(n_obs))
        w = np.clip(w, 0.1, 20.0)
    else:
        raise ValueError(weight_mode)

    columns = ["intercept"] + [f"x{j}" for j in range(1, n_cov)]
    ds = Dataset(y=y, n=n, X=X, state=state, stratum=stratum, psu=psu,
                 weight=w, columns=columns)
    truth = {"alpha": alpha, "beta": beta, "log_kappa": log_kappa,
             "dev_ext": dev_ext, "dev_int": dev_int}
    return ds, truth


def random_free_vector(ms: ModelStructure, seed=0, scale=0.5) -> np.ndarray:
    """A random but well-conditioned point in free coordinates.

    Free coordinates are unconstrained by construction, so any draw maps to
    a valid parameter point through unflatten.
    """
    rng = np.random.default_rng(seed)
    vec = scale * rng.standard_normal(n_free(ms))
    # keep kappa and tau in a numerically comfortable range
    vec[2 * ms.P] = 1.5 + 0.4 * rng.standard_normal()
    return vec


# ---------------------------------------------------------------------------
# Session fixtures
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def m0_data():
    return make_dataset(n_obs=400, variant="m0", seed=11)


@pytest.fixture(scope="session")
def m1_data():
    return make_dataset(n_obs=900, variant="m1", seed=23, n_states=8)


@pytest.fixture(scope="session")
def s3_sample():
    """One S3 population/sample draw with its survey design intact."""
    plan = simlab.FramePlan()
    sc = simlab.scenario("S3")
    ss = np.random.SeedSequence(entropy=20_260_815,
                                spawn_key=(simlab._SCENARIO_INDEX["S3"], 0))
    rng = np.random.default_rng(ss)
    pop = simlab.generate_population(sc.truth, sc.population_size, plan, rng)
    ds, meta = simlab.draw_sample(pop, sc.rho_inc, sc.target_n, rng, plan)
    return ds, meta, pop, sc


@pytest.fixture(scope="session")
def s4_sample():
    """One S4 draw; the strongest inclusion tilt, used for power checks."""
    plan = simlab.FramePlan()
    sc = simlab.scenario("S4")
    ss = np.random.SeedSequence(entropy=20_260_815,
                                spawn_key=(simlab._SCENARIO_INDEX["S4"], 0))
    rng = np.random.default_rng(ss)
    pop = simlab.generate_population(sc.truth, sc.population_size, plan, rng)
    ds, meta = simlab.draw_sample(pop, sc.rho_inc, sc.target_n, rng, plan)
    return ds, meta, pop, sc


@pytest.fixture(scope="session")
def campaign50():
    """The desk-scale coverage campaign shared by the acceptance gate.

    One run of S0, S3 and B5 at R = 50 with the default seed path; several
    test modules read different margins of the same records, so this runs
    once per session.
    """
    records, metrics = simlab.run_campaign(["S0", "S3", "B5"], reps=50)
    return records, metrics
