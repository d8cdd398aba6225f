"""Which view earns its keep? Drop one view at a time and compare.

    python3 demos/02_ablation.py

Variants:
  full  temporal windows, spatial convolution, inter-type attention, GP features
  -t    windows collapsed to their mean token (no temporal modelling)
  -ct   no inter-type attention; each row keeps its own temporal state only
  -v    no per-request GP / workload features

Then the same comparison on a city where every type has its own crew. With no
shared capacity there is little cross-type signal to exploit, so the gap
between full and -ct should shrink. Six models at the default training
schedule: expect five to ten minutes.
"""

from servicetime.config import RunConfig, apply_override
from servicetime.evaluation import Experiment, run_ablation
from servicetime.synth import SimConfig, simulate

config = apply_override(RunConfig(), "gpr.use_season", False)

shared = Experiment.from_dataset(simulate().dataset(), 0.8)
report, _ = run_ablation(shared, config)
print("shared crews")
print(report.table("MAPE"))

separate = Experiment.from_dataset(simulate(SimConfig().separate_departments()).dataset(), 0.8)
sep_report, _ = run_ablation(separate, config, variants=("full", "-ct"), baselines=False)
print("\nseparate crews")
print(sep_report.table("MAPE"))


def gap(r):
    return r.get("ALL", "-ct")["MAPE"] - r.get("ALL", "full")["MAPE"]


print(f"\nMAPE cost of dropping inter-type attention: shared {gap(report):+.2f} pts, "
      f"separate {gap(sep_report):+.2f} pts")
