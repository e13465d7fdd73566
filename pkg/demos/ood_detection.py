"""Train on the synthetic benchmark and look at what the model learned.

Run: python demos/ood_detection.py [seed]

Prints the closed-set accuracy and AUROC, the cross-prediction grid (content
should predict the class and nothing else, style the domain and nothing
else) and the mean OOD score of the benign and malign pools.
"""
import sys

import numpy as np

from hood import TrainConfig, ood_detection_task, ova_score, run_task

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
run = run_task(ood_detection_task(), TrainConfig(seed=seed))
rep = run.report
print(f"closed-set accuracy {rep.closed_set_accuracy:.3f}   AUROC {rep.auroc:.3f}")
print(f"unknown recall at the 0.5 threshold {rep.unknown_recall:.3f}")

cp = rep.cross_prediction
print("\ncross-prediction            class head   domain head")
print(f"  content latent            {cp.content_class:9.3f}   {cp.content_domain:11.3f}")
print(f"  style latent              {cp.style_class:9.3f}   {cp.style_domain:11.3f}")
print(f"  chance                    {cp.class_chance:9.3f}   {cp.domain_chance:11.3f}")

params, pools = run.result.params, run.result.pools
ben = ova_score(pools.benign.x_aug, params)
mal = ova_score(pools.malign.x_aug, params)
print(f"\nOOD score: benign {ben.mean():.3f} ({np.mean(ben >= 0.5):.0%} flagged), "
      f"malign {mal.mean():.3f} ({np.mean(mal >= 0.5):.0%} flagged)")

print("\nper class (test split)")
for row in rep.per_class:
    acc = "  -  " if row["accuracy"] is None else f"{row['accuracy']:.3f}"
    tag = "known  " if row["known"] else "unknown"
    print(f"  class {row['class']} {tag} n={row['count']:4d} acc {acc}  flagged {row['flagged_ood']:.3f}")
