import numpy as np
from scipy.special import expit
from svyhurdle import simlab

plan = simlab.FramePlan()
truth = simlab.TruthConfig()
sc = simlab.scenario("B5")
pvecs = []
for rep in range(4):
    ss = np.random.SeedSequence(entropy=20_260_815, spawn_key=(3, rep))
    rng = np.random.default_rng(ss)
    pop = simlab.generate_population(sc.truth, sc.population_size, plan, rng)
    q = None
    # poverty info by state: x_pov^2 * q(1-q) under the generating process
    eta = pop.X @ np.asarray(sc.truth.alpha)
    qv = expit(eta)
    info = pop.X[:, 1] ** 2 * qv * (1 - qv)
    p = np.bincount(pop.state, weights=info, minlength=plan.n_states)
    p = p / p.sum()
    pvecs.append(p)
p = np.mean(pvecs, axis=0)
print("poverty-info share: norm", round(float(np.linalg.norm(p)), 4),
      "max", round(float(p.max()), 4), "sigma_C", round(0.15 * float(np.linalg.norm(p)), 4))
np.save("pinfo.npy", p)
