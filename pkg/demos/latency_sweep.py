"""Train the tiny preset and print AP@0.5 for every system across a latency sweep.

    python demos/latency_sweep.py [out_dir]
"""
import sys
from pathlib import Path

from latsync.config import load_config
from latsync.evaluation import SYSTEMS, results_table
from latsync.experiment import eval_experiment, load_systems, train_experiment


def main(out="runs/demo-sweep"):
    # longer pre-training than the bare preset so the detectors find something
    cfg = load_config("tiny", ["eval.taus=[0, 1, 2, 3, 4]", "train.pretrain_epochs=30", "train.epochs=10",
                               "train.batches_per_epoch=4", "eval.n_test_scenarios=4"])
    out = Path(out)
    train_experiment(cfg, out)
    systems = load_systems(cfg, out / "checkpoint")
    rows = eval_experiment(cfg, systems, SYSTEMS, cfg.eval.taus, out / "eval")
    ap = results_table(rows)
    print("tau  " + "  ".join(f"{name:>15}" for name in SYSTEMS))
    for tau in cfg.eval.taus:
        print(f"{tau:>3}  " + "  ".join(f"{ap[(name, tau, 0.5)]:>15.3f}" for name in SYSTEMS))


if __name__ == "__main__":
    main(*sys.argv[1:])
