"""Pretext conditions: encode them, sample them, and apply them.

A condition always names a target category (one-hot block) and may
additionally restrict the wanted instances by ordinal range or by scale
bucket.  Encoded blocks concatenate to a single vector which a small MLP
projects to the decoder query dimension; the projection is added to every
query row.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, FormatError, ShapeError
from .model import Affine
from .synthesis import SCALE_BUCKETS, assign_scale_bucket


@dataclass(frozen=True)
class Condition:
    target_category: int
    ordinal_range: tuple | None = None   # (o1, o2), 1-based inclusive
    scale_bucket: str | None = None

    @property
    def ordinal_enabled(self):
        return self.ordinal_range is not None

    @property
    def scale_enabled(self):
        return self.scale_bucket is not None

    def validate(self, max_instances, allow_joint=False):
        if self.ordinal_enabled:
            o1, o2 = self.ordinal_range
            if not 1 <= o1 <= o2 <= max_instances:
                raise ConfigError(f"bad ordinal range {self.ordinal_range} for cap {max_instances}")
        if self.scale_enabled and self.scale_bucket not in SCALE_BUCKETS:
            raise ConfigError(f"unknown scale bucket {self.scale_bucket!r}")
        if not allow_joint and self.ordinal_enabled and self.scale_enabled:
            raise ConfigError("ordinal and scale conditions are mutually exclusive")
        return self


@dataclass(frozen=True)
class ConditionVector:
    basic: np.ndarray     # one-hot, length n_target
    ordinal: np.ndarray   # length 2*max_instances + 1
    scale: np.ndarray     # length 5

    def concat(self):
        return np.concatenate([self.basic, self.ordinal, self.scale])

    @staticmethod
    def dim(n_target, max_instances):
        return n_target + (2 * max_instances + 1) + 5


def encode_basic(target_category, n_target):
    if not 0 <= target_category < n_target:
        raise ConfigError(f"category {target_category} outside [0, {n_target})")
    vec = np.zeros(n_target)
    vec[target_category] = 1.0
    return vec


def encode_ordinal(enabled, o1, o2, max_instances):
    """Indicator channel, then one-hot start ordinal, then one-hot end ordinal."""
    vec = np.zeros(2 * max_instances + 1)
    if not enabled:
        return vec
    if o1 is None or o2 is None or not 1 <= o1 <= o2 <= max_instances:
        raise ConfigError(f"bad ordinal range ({o1}, {o2}) for cap {max_instances}")
    vec[0] = 1.0
    vec[o1] = 1.0
    vec[max_instances + o2] = 1.0
    return vec


def encode_scale(enabled, bucket):
    """Indicator channel, then one-hot bucket in (XS, S, L, XL) order."""
    vec = np.zeros(5)
    if not enabled:
        return vec
    if bucket not in SCALE_BUCKETS:
        raise ConfigError(f"unknown scale bucket {bucket!r}")
    vec[0] = 1.0
    vec[1 + SCALE_BUCKETS.index(bucket)] = 1.0
    return vec


def encode_condition(condition: Condition, n_target, max_instances):
    o1, o2 = condition.ordinal_range if condition.ordinal_enabled else (None, None)
    return ConditionVector(
        basic=encode_basic(condition.target_category, n_target),
        ordinal=encode_ordinal(condition.ordinal_enabled, o1, o2, max_instances),
        scale=encode_scale(condition.scale_enabled, condition.scale_bucket),
    )


def _one_hot_index(block, what):
    hot = np.flatnonzero(block)
    if hot.size != 1:
        raise FormatError(f"{what} block must have exactly one active channel, found {hot.size}")
    return int(hot[0])


def parse_condition(vector, n_target, max_instances):
    """Inverse of encode_condition; accepts a flat vector or a ConditionVector."""
    if isinstance(vector, ConditionVector):
        vector = vector.concat()
    vector = np.asarray(vector)
    if vector.shape != (ConditionVector.dim(n_target, max_instances),):
        raise FormatError(f"condition vector has shape {vector.shape}, "
                          f"expected ({ConditionVector.dim(n_target, max_instances)},)")
    basic = vector[:n_target]
    ordinal = vector[n_target:n_target + 2 * max_instances + 1]
    scale = vector[n_target + 2 * max_instances + 1:]

    category = _one_hot_index(basic, "basic")
    ordinal_range = None
    if ordinal[0] != 0:
        o1 = _one_hot_index(ordinal[1:1 + max_instances], "ordinal start") + 1
        o2 = _one_hot_index(ordinal[1 + max_instances:], "ordinal end") + 1
        ordinal_range = (o1, o2)
    elif np.any(ordinal != 0):
        raise FormatError("ordinal indicator off but block not all-zero")
    bucket = None
    if scale[0] != 0:
        bucket = SCALE_BUCKETS[_one_hot_index(scale[1:], "scale")]
    elif np.any(scale != 0):
        raise FormatError("scale indicator off but block not all-zero")
    cond = Condition(category, ordinal_range, bucket)
    return cond.validate(max_instances, allow_joint=True)


def sample_condition(sample, condition_prob, rng, allow_joint=False):
    """Draw a condition for one synthesized sample.

    Active with probability `condition_prob`; an active draw picks ordinal
    or scale (never both unless `allow_joint`).  Ranges and buckets come
    from the sample itself so the filtered target set is never empty.
    """
    if not 0.0 <= condition_prob <= 1.0:
        raise ConfigError(f"condition_prob {condition_prob} outside [0, 1]")
    category = sample.target_category
    if rng.random() >= condition_prob:
        return Condition(category)
    n = len(sample.instances)
    if n < 1:
        raise ConfigError("cannot condition on a sample with no instances")
    if allow_joint:
        want_ordinal, want_scale = ((True, True), (True, False), (False, True))[int(rng.integers(3))]
    else:
        want_ordinal = bool(rng.integers(2))
        want_scale = not want_ordinal
    ordinal_range = None
    if want_ordinal:
        o1 = int(rng.integers(1, n + 1))
        length = int(rng.integers(1, n - o1 + 2))
        ordinal_range = (o1, o1 + length - 1)
    bucket = None
    if want_scale:
        pick = sample.instances[int(rng.integers(n))]
        bucket = assign_scale_bucket(pick.ratio)
    return Condition(category, ordinal_range, bucket)


def filter_targets(instances, condition: Condition):
    """Keep only the instances the condition asks for, order preserved."""
    kept = list(instances)
    if condition.ordinal_enabled:
        o1, o2 = condition.ordinal_range
        kept = [inst for inst in kept if o1 <= inst.ordinal <= o2]
    if condition.scale_enabled:
        kept = [inst for inst in kept
                if assign_scale_bucket(inst.ratio) == condition.scale_bucket]
    return kept


def condition_to_record(condition: Condition):
    return {
        "ordinal": list(condition.ordinal_range) if condition.ordinal_enabled else None,
        "scale": condition.scale_bucket,
    }


def record_to_condition(record, target_category):
    ordinal = record.get("ordinal")
    return Condition(target_category,
                     tuple(ordinal) if ordinal is not None else None,
                     record.get("scale"))


class TaskEncoder:
    """Three affine layers with ReLU between, condition vector -> query space."""

    def __init__(self, rng, n_target, max_instances, out_dim):
        self.n_target = n_target
        self.max_instances = max_instances
        in_dim = ConditionVector.dim(n_target, max_instances)
        self.layers = [Affine(rng, in_dim, out_dim), Affine(rng, out_dim, out_dim),
                       Affine(rng, out_dim, out_dim)]

    def __call__(self, vector):
        if isinstance(vector, ConditionVector):
            vector = vector.concat()
        x = ad.as_tensor(vector)
        x = ad.relu(self.layers[0](x))
        x = ad.relu(self.layers[1](x))
        return self.layers[2](x)

    def params(self, prefix="task_encoder"):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.params(f"{prefix}.{i}")
        return out

    def param_tensors(self):
        return [t for _, t in self.params()]


def condition_queries(queries, vector, encoder: TaskEncoder):
    """Add the projected condition to every decoder query row."""
    boost = encoder(vector)
    queries = ad.as_tensor(queries)
    if queries.shape[-1] != boost.shape[-1]:
        raise ShapeError(f"query dim {queries.shape[-1]} != condition projection "
                         f"dim {boost.shape[-1]}")
    return queries + boost
