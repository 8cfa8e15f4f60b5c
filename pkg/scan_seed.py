import numpy as np
from svyhurdle import simlab

plan = simlab.FramePlan()
shares, _, _ = simlab._state_layout(plan)
sd_e, sd_i = 0.15, 0.10

best = []
for seed in range(40_000):
    rng = np.random.default_rng(seed)
    g_e = rng.normal(0.0, sd_e, plan.n_states)
    g_i = rng.normal(0.0, sd_i, plan.n_states)
    C = float(shares @ g_e)
    cross = float(np.sum(g_e * g_i))
    sq = float(np.sum(g_e**2))
    best.append((C, seed, cross, sq, float(shares @ g_i)))
best.sort(reverse=True)
print("top census-projection seeds (C, seed, sum g_e*g_i, sum g_e^2, C_int):")
for row in best[:15]:
    print(f"  C {row[0]:+.4f} seed {row[1]:6d} cross {row[2]:+.3f} sumsq {row[3]:.3f} C_int {row[4]:+.4f}")
print("C distribution: sd over seeds =", np.std([b[0] for b in best]))
