"""Detection metrics: tIoU, average precision, mAP grids, sensitivity tables.

All intervals here are [start, end] normalized to the video length, so an
instance's coverage ratio is simply its length.  Matching is greedy by
descending score: each prediction claims the unused same-video ground truth
with the highest tIoU above the threshold.  No suppression heuristics run
anywhere; a set predictor owns its duplicates.
"""

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, FormatError

COVERAGE_EDGES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
COVERAGE_NAMES = ("XS", "S", "M", "L", "XL")
COUNT_NAMES = ("XS", "S", "M", "L")


@dataclass(frozen=True)
class Detection:
    video_id: str
    category: int
    start: float
    end: float
    score: float


@dataclass(frozen=True)
class GroundTruth:
    video_id: str
    category: int
    start: float
    end: float


@dataclass(frozen=True)
class EvalProtocol:
    name: str
    thresholds: tuple
    report_points: tuple = ()

    def validate(self):
        ts = self.thresholds
        if not ts or any(not 0 < t < 1 for t in ts) or any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError(f"thresholds must be strictly increasing in (0,1), got {ts}")
        return self

    @staticmethod
    def anet_style():
        return EvalProtocol("anet_style", tuple(np.round(np.arange(0.5, 0.96, 0.05), 2)),
                            (0.5, 0.75, 0.95)).validate()

    @staticmethod
    def thumos_style():
        return EvalProtocol("thumos_style", (0.3, 0.4, 0.5, 0.6, 0.7),
                            (0.3, 0.4, 0.5, 0.6, 0.7)).validate()

    @staticmethod
    def by_name(name):
        if name == "anet_style":
            return EvalProtocol.anet_style()
        if name == "thumos_style":
            return EvalProtocol.thumos_style()
        raise ConfigError(f"unknown protocol {name!r}")


def tiou(a, b):
    """Intersection over union of [start, end] pairs; broadcasts leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a[..., 1] <= a[..., 0]) or np.any(b[..., 1] <= b[..., 0]):
        raise ConfigError("zero-length or inverted interval")
    inter = np.maximum(0.0, np.minimum(a[..., 1], b[..., 1]) - np.maximum(a[..., 0], b[..., 0]))
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    return inter / union


def _match_flags(preds, gts, threshold):
    """True/false positive flags for score-sorted predictions of one category."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, preds[i].start,
                                                     preds[i].end, preds[i].video_id))
    by_video = {}
    for gi, gt in enumerate(gts):
        by_video.setdefault(gt.video_id, []).append(gi)
    used = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(preds), dtype=bool)
    for rank, pi in enumerate(order):
        pred = preds[pi]
        best_iou, best_gi = 0.0, -1
        for gi in by_video.get(pred.video_id, ()):
            if used[gi]:
                continue
            iou = float(tiou((pred.start, pred.end), (gts[gi].start, gts[gi].end)))
            # ties keep the first candidate in ground-truth order
            if iou >= threshold and iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi >= 0:
            used[best_gi] = True
            flags[rank] = True
    return flags


def average_precision(preds, gts, threshold):
    """Area under the precision-recall step curve for one category.

    Returns None when the category has no ground truth (excluded from mAP).
    """
    if not gts:
        return None
    if not preds:
        return 0.0
    flags = _match_flags(preds, gts, threshold)
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, len(flags) + 1)
    return float(precision[flags].sum() / len(gts))


def map_at_threshold(preds, gts, threshold):
    """Mean AP over every category present in the ground truth."""
    categories = sorted({gt.category for gt in gts})
    if not categories:
        raise ConfigError("ground truth is empty")
    by_cat_preds = {c: [] for c in categories}
    by_cat_gts = {c: [] for c in categories}
    for p in preds:
        if p.category in by_cat_preds:
            by_cat_preds[p.category].append(p)
    for g in gts:
        by_cat_gts[g.category].append(g)
    aps = [average_precision(by_cat_preds[c], by_cat_gts[c], threshold) for c in categories]
    return float(np.mean(aps))


def map_over_thresholds(preds, gts, protocol: EvalProtocol):
    """Per-threshold mAP plus the average over the whole grid."""
    protocol.validate()
    table = {float(t): map_at_threshold(preds, gts, float(t)) for t in protocol.thresholds}
    return {"per_threshold": table, "average": float(np.mean(list(table.values())))}


# -- sensitivity ----------------------------------------------------------


def coverage_bucket(ratio):
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"coverage ratio {ratio} outside (0, 1]")
    for name, hi in zip(COVERAGE_NAMES, COVERAGE_EDGES[1:]):
        if ratio <= hi:
            return name
    return COVERAGE_NAMES[-1]


def instance_count_bucket(count):
    if count < 1:
        raise ConfigError(f"instance count {count} < 1")
    if count == 1:
        return "XS"
    if count <= 4:
        return "S"
    if count <= 8:
        return "M"
    return "L"


def detad_sensitivity(preds, gts, protocol: EvalProtocol):
    """Average mAP per characteristic bucket, one axis at a time.

    Each bucket restricts the ground truth to its members and re-evaluates
    all predictions against that subset; empty buckets are omitted.
    """
    counts = {}
    for gt in gts:
        counts[gt.video_id] = counts.get(gt.video_id, 0) + 1
    axes = {
        "coverage": lambda gt: coverage_bucket(gt.end - gt.start),
        "instance_count": lambda gt: instance_count_bucket(counts[gt.video_id]),
    }
    names = {"coverage": COVERAGE_NAMES, "instance_count": COUNT_NAMES}
    report = {}
    for axis, key in axes.items():
        membership = {}
        for gt in gts:
            membership.setdefault(key(gt), []).append(gt)
        report[axis] = {
            bucket: map_over_thresholds(preds, membership[bucket], protocol)["average"]
            for bucket in names[axis] if bucket in membership
        }
    return report


# -- record IO ---------------------------------------------------------------


def save_detections(path, detections):
    with open(path, "w", encoding="utf-8") as fh:
        for det in detections:
            fh.write(json.dumps(asdict(det), sort_keys=True) + "\n")


def load_detections(path):
    return [Detection(**rec) for rec in _read_jsonl(path, ("video_id", "category",
                                                           "start", "end", "score"))]


def save_ground_truth(path, gts):
    with open(path, "w", encoding="utf-8") as fh:
        for gt in gts:
            fh.write(json.dumps(asdict(gt), sort_keys=True) + "\n")


def load_ground_truth(path):
    return [GroundTruth(**rec) for rec in _read_jsonl(path, ("video_id", "category",
                                                             "start", "end"))]


def _read_jsonl(path, required):
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        offset = 0
        for line_no, line in enumerate(fh, 1):
            stripped = line.strip()
            if stripped:
                try:
                    rec = json.loads(stripped)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"line {line_no} is not JSON: {exc.msg}",
                                      offset=offset + exc.pos)
                missing = [key for key in required if key not in rec]
                if missing:
                    raise FormatError(f"line {line_no} missing keys {missing}", offset=offset)
                records.append({k: rec[k] for k in required})
            offset += len(line.encode("utf-8"))
    return records


# -- reports -----------------------------------------------------------------


def write_report(base_path, rows, meta=None):
    """Emit `rows` (list of flat dicts, shared keys) as CSV plus a JSON twin."""
    if not rows:
        raise ConfigError("report needs at least one row")
    fields = list(rows[0].keys())
    for row in rows:
        if list(row.keys()) != fields:
            raise ConfigError("report rows must share one schema")
    csv_path = str(base_path) + ".csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    json_path = str(base_path) + ".json"
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump({"meta": meta or {}, "rows": rows}, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return csv_path, json_path
