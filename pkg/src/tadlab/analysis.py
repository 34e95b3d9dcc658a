"""Attention collapse metrics.

An attention map that has degenerated to identical rows is rank 1; its
distance from the best rank-1 approximation with an all-ones left factor
measures how much query-specific structure survives.  Distance is the
geometric mean of the induced l1 and l-inf norms of the residual.

The exact minimizing row vector has no closed form under this norm, so
`rank1_fit` scores a small candidate set (every row, column median, column
mean) and then polishes the leaders with deterministic coordinate-descent
sweeps; a brute-force grid search backs it in tests.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError, UsageError

COMPONENTS = ("encoder_self", "decoder_self", "decoder_cross")


def composite_norm(matrix):
    """sqrt(max abs column sum * max abs row sum); zero for empty matrices."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.size == 0:
        return 0.0
    if not np.all(np.isfinite(matrix)):
        raise ConfigError("matrix entries must be finite")
    magnitudes = np.abs(matrix)
    return float(np.sqrt(magnitudes.sum(axis=0).max() * magnitudes.sum(axis=1).max()))


def _residual(matrix, row_vector):
    return composite_norm(matrix - row_vector[None, :])


def _coordinate_polish(matrix, vector, sweeps=8):
    """Greedy per-column descent of the residual norm; strict moves only.

    Each column's update scans the column's own values plus a fixed uniform
    subdivision of their range, so the result is deterministic and the
    starting vector survives untouched whenever no strict improvement exists.
    """
    n, m = matrix.shape
    v = np.array(vector, dtype=np.float64)
    dev = np.abs(matrix - v[None, :])
    col_sums = dev.sum(axis=0)
    row_sums = dev.sum(axis=1)
    best = float(np.sqrt(col_sums.max() * row_sums.max()))
    for _ in range(sweeps):
        improved = False
        for j in range(m):
            col = matrix[:, j]
            points = np.unique(np.concatenate(
                [col, np.linspace(col.min(), col.max(), 65), v[j:j + 1]]))
            d = np.abs(col[None, :] - points[:, None])
            other = np.delete(col_sums, j).max() if m > 1 else 0.0
            f = np.maximum(other, d.sum(axis=1))
            stripped = row_sums - dev[:, j]
            g = (stripped[None, :] + d).max(axis=1)
            scores = np.sqrt(f * g)
            k = int(np.argmin(scores))
            if scores[k] < best - 1e-12:
                v[j] = points[k]
                dev[:, j] = d[k]
                col_sums[j] = d[k].sum()
                row_sums = stripped + d[k]
                best = float(scores[k])
                improved = True
        if not improved:
            break
    return v, best


def _coarse_grid_start(matrix, resolution=0.05):
    """Best vector on a per-column value grid; narrow maps only.

    Escapes the local minima that pure descent from the candidate set can
    get stuck in; a coordinate polish afterwards recovers the lost
    resolution.
    """
    n, m = matrix.shape
    axes = []
    for j in range(m):
        lo, hi = float(matrix[:, j].min()), float(matrix[:, j].max())
        ticks = int(np.ceil((hi - lo) / resolution)) + 1 if hi > lo else 1
        axes.append(np.linspace(lo, hi, max(ticks, 1)))
    col_tables = [np.abs(matrix[:, j][None, :] - axes[j][:, None]).sum(axis=1)
                  for j in range(m)]
    row_tables = [np.abs(matrix[:, j][None, :] - axes[j][:, None]) for j in range(m)]
    grids = np.meshgrid(*[np.arange(len(a)) for a in axes], indexing="ij")
    idx = [axis.reshape(-1) for axis in grids]
    col_max = col_tables[0][idx[0]]
    row_sum = row_tables[0][idx[0]]
    for j in range(1, m):
        col_max = np.maximum(col_max, col_tables[j][idx[j]])
        row_sum = row_sum + row_tables[j][idx[j]]
    best = int(np.argmin(np.sqrt(col_max * row_sum.max(axis=1))))
    return np.array([axes[j][idx[j][best]] for j in range(m)])


def rank1_fit(matrix):
    """Best row vector from {rows, column median, column mean}, then polished.

    The raw candidate winner is kept on ties, so degenerate cases (identical
    rows, the 2x2 identity) return an exact candidate vector.  Maps of up to
    three columns get one extra polish seeded from a coarse grid.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    candidates = [matrix[i] for i in range(matrix.shape[0])]
    candidates.append(np.median(matrix, axis=0))
    candidates.append(matrix.mean(axis=0))
    scores = [_residual(matrix, cand) for cand in candidates]
    best_idx = int(np.argmin(scores))
    best_vector = candidates[best_idx].copy()
    best_score = scores[best_idx]
    # polish the best row and both aggregate candidates
    starts = [candidates[i] for i in sorted({int(np.argmin(scores[:matrix.shape[0]])),
                                             len(candidates) - 2,
                                             len(candidates) - 1})]
    if matrix.shape[1] <= 3:
        starts.append(_coarse_grid_start(matrix))
    for start in starts:
        polished, score = _coordinate_polish(matrix, start)
        if score < best_score - 1e-12:
            best_vector, best_score = polished, score
    return best_vector


def rank1_fit_grid(matrix, resolution=0.01):
    """Exhaustive grid oracle over [0,1]^m; only sensible for m <= 3."""
    matrix = np.asarray(matrix, dtype=np.float64)
    n, m = matrix.shape
    if m > 3:
        raise ConfigError(f"grid oracle limited to 3 columns, got {m}")
    ticks = np.round(np.arange(0.0, 1.0 + resolution / 2, resolution), 10)
    g = len(ticks)
    # per-column tables: column sums depend on one coordinate each
    col_tables = [np.abs(matrix[:, j][None, :] - ticks[:, None]).sum(axis=1) for j in range(m)]
    row_tables = [np.abs(matrix[:, j][None, :] - ticks[:, None]) for j in range(m)]  # (g, n)

    grids = np.meshgrid(*[np.arange(g)] * m, indexing="ij")
    idx = [axis.reshape(-1) for axis in grids]
    col_max = col_tables[0][idx[0]]
    for j in range(1, m):
        col_max = np.maximum(col_max, col_tables[j][idx[j]])
    row_sum = row_tables[0][idx[0]]
    for j in range(1, m):
        row_sum = row_sum + row_tables[j][idx[j]]
    norms = np.sqrt(col_max * row_sum.max(axis=1))
    best = int(np.argmin(norms))
    return ticks[[i[best] for i in idx]], float(norms[best])


def diversity(matrix):
    """Residual norm after removing the best broadcast row; 0 means collapsed."""
    matrix = np.asarray(matrix, dtype=np.float64)
    return _residual(matrix, rank1_fit(matrix))


@dataclass
class DiversityReport:
    """Mean diversity per (component, layer), with per-video raw values."""
    means: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    map_shapes: dict = field(default_factory=dict)

    def rows(self):
        out = []
        for (component, layer), value in sorted(self.means.items()):
            out.append({"component": component, "layer": layer,
                        "mean_diversity": value,
                        "map_shape": "x".join(map(str, self.map_shapes[(component, layer)]))})
        return out


def profile_from_captures(captures):
    """Aggregate diversity over forward results that carry attention maps."""
    report = DiversityReport()
    for result in captures:
        groups = (("encoder_self", result.encoder_maps),
                  ("decoder_self", result.decoder_self_maps),
                  ("decoder_cross", result.decoder_cross_maps))
        for component, maps in groups:
            if maps is None:
                raise UsageError("forward pass ran without attention capture")
            for layer, attn in enumerate(maps):
                key = (component, layer)
                report.raw.setdefault(key, []).append(diversity(attn))
                report.map_shapes[key] = tuple(attn.shape)
    if not report.raw:
        raise UsageError("no captures supplied")
    report.means = {key: float(np.mean(vals)) for key, vals in report.raw.items()}
    return report


def layer_diversity_profile(model, feature_iter, queries=None):
    """Forward every video with capture on and aggregate per layer."""
    captures = []
    with ad.no_grad():
        for features in feature_iter:
            captures.append(model.forward(features, queries=queries, capture=True))
    return profile_from_captures(captures)


# -- attention dump format ---------------------------------------------------

_INDEX_NAME = "attention_index.json"
_MAPS_NAME = "attention.bin"


def save_attention_dump(directory, entries):
    """entries: iterable of (video_id, component, layer, matrix)."""
    os.makedirs(directory, exist_ok=True)
    index = []
    offset = 0
    with open(os.path.join(directory, _MAPS_NAME), "wb") as fh:
        for video_id, component, layer, matrix in entries:
            blob = np.ascontiguousarray(matrix, dtype="<f4").tobytes()
            index.append({"video_id": video_id, "component": component, "layer": layer,
                          "shape": list(np.asarray(matrix).shape), "byte_offset": offset})
            fh.write(blob)
            offset += len(blob)
    with open(os.path.join(directory, _INDEX_NAME), "w", encoding="utf-8") as fh:
        json.dump({"dtype": "f32le", "maps": index}, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_attention_dump(directory):
    try:
        with open(os.path.join(directory, _INDEX_NAME), "r", encoding="utf-8") as fh:
            index = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"{directory} has no {_INDEX_NAME}")
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed attention index: {exc.msg}", offset=exc.pos)
    with open(os.path.join(directory, _MAPS_NAME), "rb") as fh:
        payload = fh.read()
    out = []
    for rec in index.get("maps", []):
        shape = tuple(rec["shape"])
        start = rec["byte_offset"]
        end = start + 4 * int(np.prod(shape))
        if end > len(payload):
            raise FormatError(f"attention.bin truncated for {rec['video_id']}", offset=start)
        matrix = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        out.append((rec["video_id"], rec["component"], rec["layer"], matrix))
    return out
