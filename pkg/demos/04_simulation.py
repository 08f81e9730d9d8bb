"""A small robustness sweep and its box plots.

The full studies use 1000 replicates per column (see the bundled n1000 and
n500 configurations); here 100 replicates of a 1000-study population keep
the run to a few seconds per column. Each replicate draws its own random
stream from (seed, replicate index), so the numbers do not depend on how
many worker processes run them.
"""
import sys
from dataclasses import replace
from pathlib import Path

from truncount.cli import main
from truncount.simulation import SimConfig, robustness_sweep

cfg = replace(SimConfig(), replicates=100)
reports = robustness_sweep(cfg, [0.0, 0.005, 0.02], workers=1)
print(f"{'outliers':>9} {'est':>4} {'accuracy':>10} {'precision':>10} {'coverage':>9}")
for prop, rep in reports.items():
    for key, m in rep.metrics.items():
        print(f"{100 * prop:8.1f}% {key:>4} {m.accuracy:10.1f} {m.precision:10.1f} {m.coverage:8.1f}%")

# The same sweep through the command line writes CSV/JSON tables and the
# per-replicate file that the plot command turns into SVG box plots.
out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_output")
cfg_file = out / "sweep.yaml"
out.mkdir(exist_ok=True)
cfg_file.write_text("replicates: 100\nproportions: [0.0, 0.005, 0.02]\n")
main(["simulate", "--config", str(cfg_file), "--out", str(out)])
main(["plot", "--data", str(out / "replicates.csv"), "--out", str(out)])
