"""
Bipartite matching and the set-prediction loss
==============================================

Each ground-truth instance must be claimed by exactly one prediction slot.
The match cost combines classification confidence, L1 interval error and
temporal IoU; the Hungarian solver finds the cheapest injective assignment
and an exhaustive oracle double-checks it here.
"""

import numpy as np

from tadlab import autodiff as ad
from tadlab.matching import (MatchCostConfig, assignment_total,
                             brute_force_assignment, cost_matrix, detr_loss,
                             hungarian)

cfg = MatchCostConfig()  # lambda_cls=2, lambda_l1=5, lambda_iou=2
rng = np.random.default_rng(7)

# Three ground truths, five prediction slots (center/width in [0,1]).
gt_classes = np.array([0, 2, 1])
gt_intervals = np.array([[0.20, 0.10], [0.55, 0.20], [0.80, 0.12]])
pred_probs = rng.dirichlet(np.ones(4), size=5)      # 3 classes + background
pred_intervals = np.column_stack([rng.uniform(0.1, 0.9, 5),
                                  rng.uniform(0.05, 0.3, 5)])

cost = cost_matrix(gt_classes, gt_intervals, pred_probs, pred_intervals, cfg)
print("cost matrix (rows = ground truths, cols = prediction slots):")
print(np.round(cost, 3))

fast = hungarian(cost)
slow = brute_force_assignment(cost)
print(f"\nhungarian assignment:    gt i -> slot {fast.tolist()}")
print(f"exhaustive assignment:   gt i -> slot {slow.tolist()}")
print(f"total costs equal: {assignment_total(cost, fast) == assignment_total(cost, slow)}"
      f" ({assignment_total(cost, fast):.6f})")

# The loss takes the assignment as a frozen input: unmatched slots are pushed
# toward the background class, matched slots toward their interval and label.
probs_t = ad.softmax(ad.Tensor(rng.normal(size=(5, 4)), requires_grad=True), axis=-1)
intervals_t = ad.sigmoid(ad.Tensor(rng.normal(size=(5, 2)), requires_grad=True))
loss = detr_loss(gt_classes, gt_intervals, probs_t, intervals_t, fast, cfg)
print(f"\ndetr_loss at random predictions: {float(loss.data):.4f}")

# Perfect predictions drive the interval terms to zero and the class terms
# to -log of a near-one probability.
ideal_probs = np.full((5, 4), 1e-6)
ideal_probs[:, 3] = 1.0                      # everything background...
for gi, slot in enumerate(fast):
    ideal_probs[slot] = 1e-6
    ideal_probs[slot, gt_classes[gi]] = 1.0  # ...except the matched slots
ideal_probs /= ideal_probs.sum(axis=1, keepdims=True)
ideal_intervals = np.tile([0.5, 0.1], (5, 1))
ideal_intervals[fast] = gt_intervals
ideal = detr_loss(gt_classes, gt_intervals, ad.as_tensor(ideal_probs),
                  ad.as_tensor(ideal_intervals), fast, cfg)
print(f"detr_loss at ideal predictions:  {float(ideal.data):.6f} (near zero)")
