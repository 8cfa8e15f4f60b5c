"""Measure the true census bias map: gamma_ext[s] -> alpha_pov bias."""
import sys
import numpy as np
from dataclasses import replace
from svyhurdle import simlab
from svyhurdle.model import ModelStructure, Dataset
from svyhurdle.infer import fit_map

plan = simlab.FramePlan()
sc = simlab.scenario("B5")
S = plan.n_states
DELTA = 0.15
REPS = 4
CHANNEL = sys.argv[1] if len(sys.argv) > 1 else "ext"

GAMMA = np.zeros(S)

def fake_slopes(truth, n_states):
    z = np.zeros(n_states)
    if CHANNEL == "ext":
        return GAMMA.copy(), z
    return z, GAMMA.copy()

simlab._state_slopes = fake_slopes

v = np.zeros((REPS, S))
for rep in range(REPS):
    ss = np.random.SeedSequence(entropy=20_260_815, spawn_key=(simlab._SCENARIO_INDEX["B5"], rep))
    # baseline census fit at gamma = 0
    GAMMA[:] = 0.0
    rng = np.random.default_rng(ss)
    pop = simlab.generate_population(sc.truth, sc.population_size, plan, rng)
    dsc = Dataset(y=pop.y, n=pop.n, X=pop.X, state=pop.state,
                  stratum=pop.stratum, psu=pop.psu, columns=simlab.COVARIATE_NAMES)
    ms = ModelStructure.for_variant("m1", P=dsc.n_cov, S=S)
    fit0 = fit_map(dsc, ms)
    b0 = fit0.vec[1]
    for s in range(S):
        GAMMA[:] = 0.0
        GAMMA[s] = DELTA
        rng = np.random.default_rng(ss)
        pop = simlab.generate_population(sc.truth, sc.population_size, plan, rng)
        dsc = Dataset(y=pop.y, n=pop.n, X=pop.X, state=pop.state,
                      stratum=pop.stratum, psu=pop.psu, columns=simlab.COVARIATE_NAMES)
        fs = fit_map(dsc, ms, init=fit0.theta)
        v[rep, s] = (fs.vec[1] - b0) / DELTA
    print(f"rep {rep}: done, row norm {np.linalg.norm(v[rep]):.4f}", flush=True)

vbar = v.mean(axis=0)
np.save(f"/root/pkg/vmap_{CHANNEL}.npy", vbar)
print("channel", CHANNEL)
print("norm(vbar)", np.linalg.norm(vbar))
print("per-rep sd of projection basis:", v.std(axis=0).mean())
print("top5 states:", np.argsort(vbar)[::-1][:5], np.sort(vbar)[::-1][:5])
print("sum(vbar):", vbar.sum())
