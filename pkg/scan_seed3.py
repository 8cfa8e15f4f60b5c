import numpy as np
from svyhurdle import simlab

plan = simlab.FramePlan()
shares, _, _ = simlab._state_layout(plan)
sd_e, sd_i = 0.15, 0.10

best_c, best_seed, best_cross = -1.0, None, None
cands = []
for seed in range(2_000_000):
    rng = np.random.default_rng(seed)
    g_e = rng.normal(0.0, sd_e, plan.n_states)
    g_i = rng.normal(0.0, sd_i, plan.n_states)
    C = float(shares @ g_e)
    if C > 0.12:
        cross = float(np.sum(g_e * g_i))
        cands.append((C, seed, cross))
cands.sort(reverse=True)
for row in cands[:12]:
    print(f"C {row[0]:+.4f} seed {row[1]:8d} cross {row[2]:+.3f}")
