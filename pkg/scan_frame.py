import numpy as np
from svyhurdle import simlab

plan = simlab.FramePlan()
for name in ("S0", "S3", "S4", "B5"):
    sc = simlab.scenario(name)
    deffs, zr, szr, clip, ns = [], [], [], [], []
    for rep in range(8):
        ss = np.random.SeedSequence(entropy=20_260_815, spawn_key=(simlab._SCENARIO_INDEX[sc.name], rep))
        rng = np.random.default_rng(ss)
        pop = simlab.generate_population(sc.truth, sc.population_size, plan, rng)
        ds, meta = simlab.draw_sample(pop, sc.rho_inc, sc.target_n, rng, plan)
        deffs.append(meta.deff); zr.append(pop.meta["zero_rate"])
        szr.append(pop.meta["structural_zero_rate"]); clip.append(meta.clip_fraction)
        ns.append(meta.n_sample)
    print(f"{name}: deff mean {np.mean(deffs):.2f} range [{min(deffs):.2f},{max(deffs):.2f}]  "
          f"zero {np.mean(zr):.3f} struct {np.mean(szr):.3f} clip {max(clip):.4f} n [{min(ns)},{max(ns)}]")
