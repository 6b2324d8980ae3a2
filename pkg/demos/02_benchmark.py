"""Compare every adaptation method on one seed of the synthetic benchmark.

    python3 demos/02_benchmark.py [seed]

Takes roughly four minutes on one core. The acceptance suite runs the same
protocol over three seeds.
"""
import sys

import torch

from constradapt.benchmark import run_benchmark

torch.set_num_threads(1)
seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

methods = ["NoAdap", "Constraint50", "Constraint25", "Constraint10", "ConstraintAdap",
           "ConstraintAdapNoTag", "ConstraintLit", "KLAdap", "Oracle"]
result = run_benchmark(seed, methods)

# %% Results
# Target-val DSC is measured at the epoch chosen on that same split; test DSC
# reuses the chosen model on held-out target subjects.
print(f"{'method':22s} {'val DSC':>8s} {'test DSC':>9s} {'HD95':>6s} {'s/batch':>8s}")
for name, r in result["methods"].items():
    print(f"{name:22s} {100 * r['val_dsc']:8.1f} {100 * r['test_dsc']:9.1f} "
          f"{r['test_hd95']:6.2f} {r['seconds_per_batch']:8.4f}")

# %% Regressor quality
for kind, reg in result["regressors"].items():
    f = reg["record"].final
    print(f"{kind:9s} regressor: median |relative error| {f['median_abs_rel_error']:.2f}, "
          f"median estimate on empty slices {f['median_absent_estimate']:.2f} px")
