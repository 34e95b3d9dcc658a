"""
Scoring detections: AP, mAP over tIoU grids, and sensitivity buckets
====================================================================

Detections are (video, category, start, end, score); ground truth drops the
score.  AP walks the score-ranked list, each prediction may claim at most
one ground truth at or above the tIoU threshold, and mAP averages AP over
categories, then over a threshold grid.
"""

import numpy as np

from tadlab.evalkit import (Detection, EvalProtocol, GroundTruth,
                            average_precision, detad_sensitivity,
                            map_over_thresholds, tiou)

print(f"tiou([0.0, 1.0], [0.5, 1.5]) = {float(tiou((0.0, 1.0), (0.5, 1.5))):.4f}")

# Hand-checkable AP: two ground truths, three predictions ranked
# hit, miss, hit -> precision at the hits is 1/1 and 2/3, AP = their mean.
gts = [GroundTruth("v", 0, 0.1, 0.3), GroundTruth("v", 0, 0.5, 0.7)]
preds = [Detection("v", 0, 0.1, 0.3, 0.9),
         Detection("v", 0, 0.75, 0.95, 0.8),
         Detection("v", 0, 0.5, 0.7, 0.7)]
ap = average_precision(preds, gts, threshold=0.5)
print(f"hit/miss/hit AP @0.5 = {ap:.4f}  (expected (1 + 2/3)/2 = 0.8333)")

# mAP under the two shipped protocols.  The prediction set is deliberately
# imperfect: one category localized tightly, the other loosely.
gts = [GroundTruth("a", 0, 0.10, 0.30), GroundTruth("a", 1, 0.50, 0.80),
       GroundTruth("b", 0, 0.20, 0.60), GroundTruth("b", 1, 0.70, 0.90)]
preds = [Detection("a", 0, 0.10, 0.30, 0.95),   # exact
         Detection("b", 0, 0.22, 0.58, 0.90),   # tight
         Detection("a", 1, 0.45, 0.95, 0.80),   # sloppy
         Detection("b", 1, 0.55, 0.88, 0.70)]   # sloppy
for protocol in (EvalProtocol.anet_style(), EvalProtocol.thumos_style()):
    table = map_over_thresholds(preds, gts, protocol)
    points = {t: round(table["per_threshold"][t], 3) for t in protocol.report_points}
    print(f"\n{protocol.name}: avg mAP {table['average']:.4f}")
    print(f"  report points {points}")
    print("  sloppy intervals survive low thresholds and die at high ones")

# DETAD-style sensitivity: the same metric restricted to coverage buckets
# (instance length / video length) and instance-count buckets.
rng = np.random.default_rng(3)
gts, preds = [], []
for v in range(8):
    video = f"v{v}"
    for start, end in ((0.05, 0.12), (0.3, 0.75)):      # one XS, one L per video
        gts.append(GroundTruth(video, 0, start, end))
        if rng.random() < 0.9:
            jitter = float(rng.normal(0, 0.01 if end - start < 0.2 else 0.05))
            preds.append(Detection(video, 0, start + jitter, end + jitter,
                                   float(rng.random())))
report = detad_sensitivity(preds, gts, EvalProtocol.thumos_style())
print(f"\nsensitivity by coverage bucket: "
      f"{ {k: round(v, 3) for k, v in report['coverage'].items()} }")
print(f"sensitivity by instance count:  "
      f"{ {k: round(v, 3) for k, v in report['instance_count'].items()} }")
