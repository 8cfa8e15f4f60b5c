import sys
import numpy as np
import pandas as pd
from svyhurdle import simlab

name = sys.argv[1] if len(sys.argv) > 1 else "B5"
R = int(sys.argv[2]) if len(sys.argv) > 2 else 12
sc = simlab.scenario(name)
plan = simlab.FramePlan()
rows = []
for rep in range(R):
    rows.extend(simlab.run_replication(sc, plan, rep, 20_260_815))
df = pd.DataFrame(rows)
for param in ("alpha_poverty", "beta_poverty", "log_kappa", "tau_ext", "tau_int"):
    sub_p = df[(df.param == param) & (~df.failed)]
    line = [f"{param:14s}"]
    for est in ("unweighted", "weighted", "sandwich"):
        sub = sub_p[sub_p.estimator == est]
        truth = sub.truth.iloc[0]
        m = sub.est.mean()
        rb = 100 * (m - truth) / abs(truth)
        line.append(f"{est[:4]}: RB {rb:+6.1f}% cov {sub.covered.mean():.2f} w {sub.width.median():.3f} sd {sub.est.std():.3f}")
    print("  ".join(line))
