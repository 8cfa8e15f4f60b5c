import numpy as np

p = np.load("pinfo.npy")
S = p.size
sd_e, sd_i = 0.15, 0.10
cands = []
for seed in range(400_000):
    rng = np.random.default_rng(seed)
    g_e = rng.normal(0.0, sd_e, S)
    C = float(p @ g_e)
    if C > 0.20:
        g_i = rng.normal(0.0, sd_i, S)
        cross = float(np.sum(g_e * g_i))
        cands.append((C, seed, cross, float(g_e[np.argmax(p)])))
cands.sort(reverse=True)
print("C      seed     cross   gamma_in_top_state")
for row in cands[:14]:
    print(f"{row[0]:+.4f} {row[1]:7d} {row[2]:+.3f} {row[3]:+.3f}")
