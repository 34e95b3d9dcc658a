"""Long-form sequence synthesis from a trimmed-clip bank.

A synthesized sample is a background template of non-target clips with
randomly cropped target-category clips written over it at random positions.
Later insertions overwrite earlier rows; same-category insertions that
overlap or touch are grouped into one instance; an insertion whose rows are
all overwritten by later ones is dropped.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LookupFailure
from .featbank import ClipFeatures, FeatureBank, sample_clip
from .seeding import rng_from

SCALE_BUCKETS = ("XS", "S", "L", "XL")

_SAMPLE_TAG = 3


def assign_scale_bucket(ratio: float) -> str:
    """Bucket a duration-to-length ratio: XS < 0.25 <= S < 0.50 <= L < 0.75 <= XL."""
    if not 0.0 < ratio <= 1.0:
        raise ConfigError(f"duration ratio must be in (0, 1], got {ratio}")
    if ratio < 0.25:
        return "XS"
    if ratio < 0.50:
        return "S"
    if ratio < 0.75:
        return "L"
    return "XL"


@dataclass(frozen=True)
class SynthesisParams:
    target_len: int = 192
    num_background: int = 16
    target_count_range: tuple[int, int] = (1, 6)
    crop_fraction_range: tuple[float, float] = (0.25, 1.0)
    max_instances: int = 12
    seed: int = 0

    def validate(self):
        if self.target_len < 1 or self.num_background < 1 or self.max_instances < 1:
            raise ConfigError("target_len, num_background and max_instances must be positive")
        lo, hi = self.target_count_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad target_count_range {self.target_count_range}")
        if hi > self.max_instances:
            raise ConfigError(f"target_count_range max {hi} exceeds max_instances {self.max_instances}")
        flo, fhi = self.crop_fraction_range
        if not 0.0 < flo <= fhi <= 1.0:
            raise ConfigError(f"crop_fraction_range must be a subrange of (0, 1], got {self.crop_fraction_range}")
        return self


@dataclass(frozen=True)
class ActionInstance:
    category: int
    start: int  # feature steps, half-open [start, end)
    end: int
    ordinal: int  # 1-based rank by start among same-category instances
    ratio: float  # (end - start) / target_len

    def normalized(self, target_len: int) -> tuple[float, float]:
        return self.start / target_len, self.end / target_len


@dataclass(frozen=True)
class SynthesizedSample:
    features: np.ndarray  # target_len x D float32
    target_category: int
    instances: tuple  # ActionInstance, target category only, merged, sorted by start
    background_spans: tuple  # (start, end) per background clip segment


def build_background(bank: FeatureBank, target_category: int, num_background: int,
                     target_len: int, rng) -> tuple[np.ndarray, tuple]:
    """Concatenate non-target clips into a template of exactly target_len rows.

    The concatenation is cycled if too short and tail-cropped if too long, so
    the template always has the requested length.  Returns the template and
    the (start, end) span of every clip segment placed on it.
    """
    others = [k for k in range(bank.num_categories) if k != target_category]
    return build_background_from_pool(bank, others, num_background, target_len, rng)


def sample_targets(bank: FeatureBank, target_category: int, count: int, rng) -> list:
    """Draw `count` clips of the target category uniformly with replacement."""
    if count < 1:
        raise ConfigError(f"need at least one target clip, got count={count}")
    if not bank.clips_of(target_category):
        raise LookupFailure(f"category {target_category} has no clips")
    return [sample_clip(bank, target_category, rng) for _ in range(count)]


def crop_random(clip: ClipFeatures, fraction_range: tuple[float, float], rng) -> ClipFeatures:
    """Take a contiguous slice of round(fraction * T) rows, fraction uniform."""
    t = clip.features.shape[0]
    lo, hi = fraction_range
    fraction = float(rng.uniform(lo, hi))
    length = int(np.floor(fraction * t + 0.5))
    if length < 1:
        raise ConfigError(f"crop fraction {fraction:.4f} of {t} rows yields an empty clip")
    start = int(rng.integers(0, t - length + 1))
    return ClipFeatures(category=clip.category, features=clip.features[start : start + length].copy())


def merge_overlaps(intervals) -> list:
    """Merge overlapping or touching [start, end) intervals into their hulls."""
    merged = []
    for start, end in sorted(intervals):
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def place_insertions(template: np.ndarray, insertions) -> tuple[np.ndarray, list]:
    """Write (category, rows, start) insertions onto a copy of the template.

    Later insertions overwrite earlier rows.  An insertion is dropped when no
    row of it survives to the end; survivors keep their full original
    interval.  Returns (features, [(category, start, end), ...]) in
    insertion order.
    """
    features = template.copy()
    stamps = np.full(template.shape[0], -1, dtype=np.int64)
    spans = []
    for idx, (category, rows, start) in enumerate(insertions):
        end = start + rows.shape[0]
        if start < 0 or end > template.shape[0]:
            raise ConfigError(f"insertion [{start}, {end}) exceeds template of {template.shape[0]} rows")
        features[start:end] = rows
        stamps[start:end] = idx
        spans.append((category, start, end))
    surviving = [spans[i] for i in sorted(set(stamps[stamps >= 0].tolist()))]
    return features, surviving


def _to_instances(spans, category, target_len):
    merged = merge_overlaps([(s, e) for _, s, e in spans])
    return tuple(
        ActionInstance(category=category, start=s, end=e, ordinal=i + 1, ratio=(e - s) / target_len)
        for i, (s, e) in enumerate(merged)
    )


def synthesize_sample(bank: FeatureBank, params: SynthesisParams, rng,
                      target_category: int | None = None,
                      categories=None) -> SynthesizedSample:
    """Build one long-form sample: background template + cropped target clips.

    `categories` restricts both the target choice and the background pool
    (defaults to every bank category).  Deterministic given the rng state.
    """
    params.validate()
    pool = list(categories) if categories is not None else list(range(bank.num_categories))
    if target_category is None:
        target_category = pool[int(rng.integers(len(pool)))]
    elif target_category not in pool:
        raise LookupFailure(f"target category {target_category} not in candidate pool")
    if params.target_len < bank.config.clip_len_range[1]:
        raise ConfigError("target_len shorter than the longest bank clip")

    others_pool = [k for k in pool if k != target_category]
    template, background_spans = build_background_from_pool(
        bank, others_pool, params.num_background, params.target_len, rng
    )

    lo, hi = params.target_count_range
    count = int(rng.integers(lo, hi + 1))
    insertions = []
    for clip in sample_targets(bank, target_category, count, rng):
        cropped = crop_random(clip, params.crop_fraction_range, rng)
        length = cropped.features.shape[0]
        start = int(rng.integers(0, params.target_len - length + 1))
        insertions.append((target_category, cropped.features, start))

    features, surviving = place_insertions(template, insertions)
    instances = _to_instances(surviving, target_category, params.target_len)
    if not 1 <= len(instances) <= params.max_instances:
        raise ConfigError(f"sample ended with {len(instances)} instances, outside [1, {params.max_instances}]")
    return SynthesizedSample(
        features=features,
        target_category=target_category,
        instances=instances,
        background_spans=background_spans,
    )


def build_background_from_pool(bank, pool, num_background, target_len, rng):
    """Background template drawn from an explicit category pool."""
    if not pool:
        raise ConfigError("background needs at least one non-target category")
    pieces = []
    total = 0
    for _ in range(num_background):
        cat = pool[int(rng.integers(len(pool)))]
        clip = sample_clip(bank, cat, rng)
        pieces.append(clip.features)
        total += clip.features.shape[0]
    idx = 0
    while total < target_len:
        pieces.append(pieces[idx])
        total += pieces[idx].shape[0]
        idx += 1
    template = np.empty((target_len, bank.feature_dim), dtype=np.float32)
    spans = []
    cursor = 0
    for piece in pieces:
        if cursor >= target_len:
            break
        take = min(piece.shape[0], target_len - cursor)
        template[cursor : cursor + take] = piece[:take]
        spans.append((cursor, cursor + take))
        cursor += take
    return template, tuple(spans)


def synthesize_indexed(bank: FeatureBank, params: SynthesisParams, index: int,
                       categories=None) -> SynthesizedSample:
    """Sample number `index` of the stream keyed by params.seed.

    Each index gets its own derived rng, so any subset of indices can be
    generated in any order (or in parallel) with identical results.
    """
    rng = rng_from(params.seed, _SAMPLE_TAG, index)
    return synthesize_sample(bank, params, rng, categories=categories)


def validate_sample(sample: SynthesizedSample, params: SynthesisParams) -> list:
    """Return a list of invariant violations (empty when the sample is clean)."""
    problems = []
    length = sample.features.shape[0]
    if length != params.target_len:
        problems.append(f"feature length {length} != {params.target_len}")
    inst = sample.instances
    if not 1 <= len(inst) <= params.max_instances:
        problems.append(f"instance count {len(inst)} outside [1, {params.max_instances}]")
    for a in inst:
        if not 0 <= a.start < a.end <= params.target_len:
            problems.append(f"interval [{a.start}, {a.end}) out of bounds")
        if a.ratio != (a.end - a.start) / params.target_len:
            problems.append(f"ratio {a.ratio} inexact for [{a.start}, {a.end})")
        if a.category != sample.target_category:
            problems.append(f"instance category {a.category} != target {sample.target_category}")
    ordered = sorted(inst, key=lambda a: a.start)
    if [a.ordinal for a in ordered] != list(range(1, len(inst) + 1)):
        problems.append("ordinals not contiguous 1..n by start")
    for prev, nxt in zip(ordered, ordered[1:]):
        if nxt.start <= prev.end:
            problems.append(f"instances [{prev.start},{prev.end}) and [{nxt.start},{nxt.end}) not disjoint")
    if sum(a.ratio for a in inst) > 1.0 + 1e-9:
        problems.append("total duration ratio exceeds 1")
    return problems
