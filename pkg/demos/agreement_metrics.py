"""
Scoring a segmentation
======================

Class quality is measured with per-class IOU and point accuracy. Instance
quality is measured against the ground-truth partition with NMI, AMI and
ARI. Object accuracy needs both at once: a cluster must overlap an object
with IoU of at least 0.5 and carry its majority class.
"""

import numpy as np

from mcpseg import CLASS_NAMES, EvalPair, ami, ari, evaluate, nmi

rng = np.random.default_rng(0)

# three objects: a bookcase (10), a table (7) and a wall (2)
gt_instance = np.repeat([0, 1, 2], [40, 25, 60])
gt_class = np.array([10, 7, 2])[gt_instance]

# a segmentation that splits the wall in two and mislabels part of the table as bookcase
pred_instance = gt_instance.copy()
pred_instance[95:] = 3
pred_class = gt_class.copy()
pred_class[40:52] = 10

rep = evaluate(EvalPair(gt_class, pred_class, gt_instance, pred_instance))
for c in np.nonzero(~np.isnan(rep.per_class_iou))[0]:
    print(f"IOU {CLASS_NAMES[c]:>8}: {rep.per_class_iou[c]:.3f}")
for k, v in rep.summary().items():
    print(f"{k:>8}: {v:.3f}")

# NMI is not corrected for chance, the adjusted scores are
u, v = rng.integers(0, 10, 300), rng.integers(0, 10, 300)
print(f"random labelings: NMI {nmi(u, v):.3f}  AMI {ami(u, v):+.3f}  ARI {ari(u, v):+.3f}")
