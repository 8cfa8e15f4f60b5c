from dataclasses import replace
import numpy as np
from svyhurdle import simlab
from svyhurdle.model import ModelStructure, Dataset
from svyhurdle.infer import fit_map

plan = simlab.FramePlan()
for seed in (7, 7400):
    sc = simlab.scenario("B5")
    sc = replace(sc, truth=replace(sc.truth, slope_seed=seed))
    cen, uw, wt = [], [], []
    for rep in range(6):
        ss = np.random.SeedSequence(entropy=20_260_815, spawn_key=(simlab._SCENARIO_INDEX[sc.name], rep))
        rng = np.random.default_rng(ss)
        pop = simlab.generate_population(sc.truth, sc.population_size, plan, rng)
        ds, meta = simlab.draw_sample(pop, sc.rho_inc, sc.target_n, rng, plan)
        keep = pop.n >= 1
        dsc = Dataset(y=pop.y, n=pop.n, X=pop.X, state=pop.state,
                      stratum=pop.stratum, psu=pop.psu, columns=simlab.COVARIATE_NAMES)
        ms = ModelStructure.for_variant("m1", P=dsc.n_cov, S=plan.n_states)
        fit_c = fit_map(dsc, ms)
        fit_u = fit_map(ds, ms)
        fit_w = fit_map(ds, ms, weights=ds.weight)
        cen.append(fit_c.vec[1]); uw.append(fit_u.vec[1]); wt.append(fit_w.vec[1])
    a0 = sc.truth.alpha[1]
    cen, uw, wt = map(np.array, (cen, uw, wt))
    print(f"seed {seed}: census bias {cen.mean()-a0:+.4f} (sd {cen.std():.4f})  "
          f"UW-census {np.mean(uw-cen):+.4f} (sd {np.std(uw-cen):.4f})  "
          f"WT-census {np.mean(wt-cen):+.4f} (sd {np.std(wt-cen):.4f})")
