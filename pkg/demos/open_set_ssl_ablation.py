"""Paired ablations on open-set semi-supervised learning.

Run: python demos/open_set_ssl_ablation.py [num_seeds]

For each seed the same data is used for three models: full training, the
plain bound without the cross-branch regularisers, and no benign samples.
Roughly half a minute per seed on one CPU core.
"""
import sys

from hood import TrainConfig, open_set_ssl_task, run_task

SPEC = {"within_class_spread": 0.45, "num_labeled": 60}
ARMS = {"full": {}, "w/o disentanglement": {"use_disentanglement": False}, "w/o benign": {"use_benign": False}}

seeds = range(int(sys.argv[1]) if len(sys.argv) > 1 else 3)
task = open_set_ssl_task(**SPEC)
print(f"{'seed':>4} {'arm':<22} {'clean':>6} {'corrupted':>9} {'AUROC':>6}")
for seed in seeds:
    for name, extra in ARMS.items():
        r = run_task(task, TrainConfig(seed=seed, **extra), probe=False).report
        print(f"{seed:>4} {name:<22} {r.closed_set_accuracy:6.3f} {r.corrupted_accuracy:9.3f} {r.auroc:6.3f}")
