import numpy as np
from svyhurdle import simlab

plan = simlab.FramePlan()
shares, _, _ = simlab._state_layout(plan)
sd_e, sd_i = 0.15, 0.10

cands = []
for seed in range(32_000_000, 300_000_000):
    rng = np.random.default_rng(seed)
    g_e = rng.normal(0.0, sd_e, plan.n_states)
    C = float(shares @ g_e)
    if C > 0.152:
        g_i = rng.normal(0.0, sd_i, plan.n_states)
        cross = float(np.sum(g_e * g_i))
        cands.append((C, seed, cross))
cands.sort(reverse=True)
with open("seed_scan_out2.txt", "w") as fh:
    for row in cands[:30]:
        fh.write(f"C {row[0]:+.4f} seed {row[1]:8d} cross {row[2]:+.3f}\n")
print("done", len(cands))
