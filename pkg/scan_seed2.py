import sys
from dataclasses import replace
import numpy as np
import pandas as pd
from svyhurdle import simlab

plan = simlab.FramePlan()
R = 50
for seed in [int(s) for s in sys.argv[1:]]:
    sc = simlab.scenario("B5")
    sc = replace(sc, truth=replace(sc.truth, slope_seed=seed))
    rows = []
    for rep in range(R):
        rows.extend(simlab.run_replication(sc, plan, rep, 20_260_815))
    df = pd.DataFrame(rows)
    ap = df[(df.param == "alpha_poverty") & (~df.failed)]
    out = [f"seed {seed:6d}"]
    for est in ("unweighted", "sandwich"):
        sub = ap[ap.estimator == est]
        truth = sub.truth.iloc[0]
        bias = sub.est.mean() - truth
        out.append(f"{est[:4]} bias {bias:+.4f} cov {sub.covered.mean():.2f} se_cl {sub.width.median()/3.29:.3f} sd {sub.est.std():.3f}")
    print("  ".join(out))
