"""Scratch pilot for the simulation harness (not part of the package)."""
import sys
import time

import numpy as np
import pandas as pd

from svyhurdle import simlab

pd.set_option("display.width", 200)
pd.set_option("display.max_columns", 50)

names = sys.argv[1].split(",") if len(sys.argv) > 1 else ["S0"]
reps = int(sys.argv[2]) if len(sys.argv) > 2 else 20

t0 = time.time()
records, metrics = simlab.run_campaign(names, reps=reps)
elapsed = time.time() - t0
print(f"{len(records)} rows in {elapsed:.1f}s ({elapsed/(reps*len(names)):.2f}s/rep)")
cols = ["scenario", "estimator", "param", "rel_bias_pct", "rmse", "coverage",
        "median_width", "width_ratio", "mean_deff", "n_failed"]
print(metrics[cols].to_string(index=False))

wt = records[(records.estimator == "weighted") & (records.param == "tau_ext")]
uw = records[(records.estimator == "unweighted") & (records.param == "tau_ext")]
m = wt.merge(uw, on=["scenario", "rep"], suffixes=("_wt", "_uw"))
frac = (m.est_wt > m.est_uw).groupby(m.scenario).mean()
print("\nfrac tau_wt > tau_uw:", frac.to_dict())
