"""How the size of the style pool changes corrupted accuracy.

Run: python demos/augmentation_sweep.py [seed]

Same as ``python -m hood sweep --augmentations 2..6`` but prints a small
text chart.
"""
import sys

from hood import TrainConfig, open_set_ssl_task
from hood.tasks import interior_optimum, sweep_augmentations

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
rows = sweep_augmentations(open_set_ssl_task(within_class_spread=0.45, num_labeled=60), TrainConfig(seed=seed))
lo = min(r["metric"] for r in rows)
for r in rows:
    bar = "#" * int(1 + 200 * (r["metric"] - lo))
    print(f"pool size {r['num_augmentations']}: corrupted acc {r['metric']:.3f} {bar}")
print("interior optimum" if interior_optimum(rows) else "optimum at an endpoint")
