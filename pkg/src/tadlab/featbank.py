"""Synthetic trimmed-clip feature bank.

Stands in for a frozen video feature extractor: each category gets a unit
prototype vector, and each clip is a short sequence of unit-normalized rows
built from that prototype plus a smooth random walk and white noise.  The
bank is fully determined by its config (seed included) and is immutable
after generation.

On-disk layout of a bank directory:
    manifest.json   num_categories, D, dtype ("f32le"), per-clip records
                    {category, length, byte_offset}, plus the generating
                    config and the float64 prototypes for exact round-trip
    clips.bin       concatenated row-major T x D float32 little-endian
"""

import dataclasses
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError, LookupFailure
from .seeding import rng_from

_PROTO_TAG = 1
_CLIP_TAG = 2


@dataclass(frozen=True)
class BankConfig:
    num_categories: int = 40
    feature_dim: int = 64
    clips_per_category: int = 50
    clip_len_range: tuple[int, int] = (8, 16)
    prototype_noise: float = 0.3
    drift_amplitude: float = 0.2
    seed: int = 0

    def validate(self):
        lo, hi = self.clip_len_range
        if self.num_categories < 2:
            raise ConfigError(f"num_categories must be >= 2, got {self.num_categories}")
        if self.feature_dim < 1 or self.clips_per_category < 1:
            raise ConfigError("feature_dim and clips_per_category must be positive")
        if lo < 2 or hi < lo:
            raise ConfigError(f"clip_len_range must satisfy 2 <= lo <= hi, got {self.clip_len_range}")
        if self.prototype_noise < 0 or self.drift_amplitude < 0:
            raise ConfigError("noise and drift amplitudes must be nonnegative")
        return self


@dataclass(frozen=True)
class ClipFeatures:
    category: int
    features: np.ndarray  # T x D float32, rows unit L2 norm

    def __eq__(self, other):
        if not isinstance(other, ClipFeatures):
            return NotImplemented
        return self.category == other.category and np.array_equal(self.features, other.features)


@dataclass(frozen=True)
class FeatureBank:
    config: BankConfig
    clips: tuple  # clips[k] = tuple of ClipFeatures with category k
    prototypes: np.ndarray  # num_categories x D float64, unit rows

    @property
    def num_categories(self):
        return self.config.num_categories

    @property
    def feature_dim(self):
        return self.config.feature_dim

    def clips_of(self, category: int):
        if not 0 <= category < self.num_categories:
            raise LookupFailure(f"category {category} not in bank of {self.num_categories} categories")
        return self.clips[category]

    def __eq__(self, other):
        if not isinstance(other, FeatureBank):
            return NotImplemented
        return (
            self.config == other.config
            and np.array_equal(self.prototypes, other.prototypes)
            and self.clips == other.clips
        )


def _smooth_walk(rng, length, dim):
    """Cumulative Gaussian walk, low-passed with a 3-tap moving average."""
    walk = np.cumsum(rng.standard_normal((length, dim)), axis=0)
    kernel = np.ones(3) / 3.0
    out = np.empty_like(walk)
    for d in range(dim):
        out[:, d] = np.convolve(walk[:, d], kernel, mode="same")
    return out


def _make_clip(prototype, cfg, rng):
    lo, hi = cfg.clip_len_range
    length = int(rng.integers(lo, hi + 1))
    rows = prototype[None, :] + cfg.drift_amplitude * _smooth_walk(rng, length, cfg.feature_dim)
    rows = rows + cfg.prototype_noise * rng.standard_normal((length, cfg.feature_dim))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return rows.astype(np.float32)


def generate_bank(config: BankConfig) -> FeatureBank:
    """Generate a bank deterministically from its config.

    Each clip row is unit-normalize(prototype_k + drift + noise); clips are
    keyed by (seed, category, clip index) so content does not depend on
    generation order.
    """
    config.validate()
    proto_rng = rng_from(config.seed, _PROTO_TAG)
    prototypes = proto_rng.standard_normal((config.num_categories, config.feature_dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)

    clips = []
    for k in range(config.num_categories):
        per_cat = []
        for i in range(config.clips_per_category):
            rng = rng_from(config.seed, _CLIP_TAG, k, i)
            per_cat.append(ClipFeatures(category=k, features=_make_clip(prototypes[k], config, rng)))
        clips.append(tuple(per_cat))
    return FeatureBank(config=config, clips=tuple(clips), prototypes=prototypes)


def sample_clip(bank: FeatureBank, category: int, rng: np.random.Generator) -> ClipFeatures:
    """Pick one clip of `category` uniformly at random (bank untouched)."""
    pool = bank.clips_of(category)
    if not pool:
        raise LookupFailure(f"category {category} has no clips")
    return pool[int(rng.integers(len(pool)))]


def save_bank(bank: FeatureBank, path):
    """Write manifest.json + clips.bin under directory `path`."""
    os.makedirs(path, exist_ok=True)
    records = []
    offset = 0
    flat = []
    for per_cat in bank.clips:
        for clip in per_cat:
            t = clip.features.shape[0]
            records.append({"category": clip.category, "length": t, "byte_offset": offset})
            offset += t * bank.feature_dim * 4
            flat.append(np.ascontiguousarray(clip.features, dtype="<f4"))
    manifest = {
        "num_categories": bank.num_categories,
        "D": bank.feature_dim,
        "dtype": "f32le",
        "clips": records,
        "config": dataclasses.asdict(bank.config),
        "prototypes": bank.prototypes.tolist(),
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
    with open(os.path.join(path, "clips.bin"), "wb") as fh:
        for arr in flat:
            fh.write(arr.tobytes())


def load_bank(path) -> FeatureBank:
    """Read a bank directory back; inverse of save_bank, bit-exact."""
    manifest_path = os.path.join(path, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read bank manifest {manifest_path}: {exc}") from exc
    if not raw.strip():
        raise FormatError(f"empty bank manifest {manifest_path}", offset=0)
    try:
        manifest = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed bank manifest: {exc.msg}", offset=exc.pos) from exc

    for key in ("num_categories", "D", "dtype", "clips", "config", "prototypes"):
        if key not in manifest:
            raise FormatError(f"bank manifest missing key {key!r}")
    if manifest["dtype"] != "f32le":
        raise FormatError(f"unsupported dtype {manifest['dtype']!r}")

    cfg_dict = dict(manifest["config"])
    cfg_dict["clip_len_range"] = tuple(cfg_dict["clip_len_range"])
    config = BankConfig(**cfg_dict)
    dim = int(manifest["D"])
    if dim != config.feature_dim or int(manifest["num_categories"]) != config.num_categories:
        raise FormatError("manifest header disagrees with embedded config")

    payload_path = os.path.join(path, "clips.bin")
    with open(payload_path, "rb") as fh:
        payload = fh.read()

    per_cat = [[] for _ in range(config.num_categories)]
    for rec in manifest["clips"]:
        cat, length, off = int(rec["category"]), int(rec["length"]), int(rec["byte_offset"])
        if not 0 <= cat < config.num_categories:
            raise FormatError(f"clip record category {cat} out of range", offset=off)
        nbytes = length * dim * 4
        if off + nbytes > len(payload):
            raise FormatError(
                f"clips.bin truncated: need {off + nbytes} bytes, have {len(payload)}", offset=len(payload)
            )
        rows = np.frombuffer(payload[off : off + nbytes], dtype="<f4").reshape(length, dim)
        per_cat[cat].append(ClipFeatures(category=cat, features=rows.copy()))

    expected = sum(int(r["length"]) for r in manifest["clips"]) * dim * 4
    if expected != len(payload):
        raise FormatError(
            f"clips.bin size {len(payload)} does not match manifest total {expected}", offset=expected
        )

    prototypes = np.asarray(manifest["prototypes"], dtype=np.float64)
    if prototypes.shape != (config.num_categories, dim):
        raise FormatError(f"prototype matrix has shape {prototypes.shape}, expected {(config.num_categories, dim)}")
    return FeatureBank(config=config, clips=tuple(tuple(c) for c in per_cat), prototypes=prototypes)
