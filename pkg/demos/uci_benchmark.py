"""Run a small UCI comparison from Python instead of the CLI.

Trains the heteroscedastic NLL baseline and the hybrid model on a few
Boston Housing splits, prints the RMSE table and the interval metrics of
the total variance, then writes the full report to ``demo_results/``.

    python demos/uci_benchmark.py [n_splits]
"""

import sys
from pathlib import Path

from hybridflow import runner

ROOT = Path(__file__).resolve().parents[1]
n_splits = int(sys.argv[1]) if len(sys.argv) > 1 else 3

cfg = runner.ExperimentConfig(
    datasets=["boston_housing"],
    methods=["nll", "hybridflow"],
    repeats=n_splits,
    manifest=str(ROOT / "data" / "uci" / "manifest.ini"),
)
records = runner.run_experiment(cfg, cache_dir=ROOT / "demo_results" / "flow_cache")
agg = runner.aggregate(records)

print(runner.rmse_table(agg))
for row in agg:
    print(
        f"{row['method']:>10}: total PICP {row['total_picp_mean']:.3f}, "
        f"MPIW {row['total_mpiw_mean']:.2f}, Winkler {row['total_winkler_mean']:.2f}, "
        f"CRPS {row['total_crps_mean']:.3f}"
    )

for row in runner.disentanglement_report(records):
    print(f"{row['method']}: aleatoric/epistemic Spearman {row['spearman']}")

paths = runner.emit_report(records, ROOT / "demo_results", cfg)
print(f"\nreport written to {paths['records'].parent}")
