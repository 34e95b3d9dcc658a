"""On-disk sample sets: fixed-shape feature tensors plus JSONL labels.

Layout of a dataset directory:
  samples.bin            float32 little-endian, row-major, one (L, D) block
                         per sample, in index order
  labels.jsonl           one record per sample (category, instances,
                         condition, background spans)
  dataset_manifest.json  generation parameters, master seed, count

Generation is deterministic per index, so a thread pool produces the exact
bytes serial generation does; order comes from the index, not the workers.
"""

import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import ConfigError, FormatError
from .pretext import condition_to_record, record_to_condition, sample_condition
from .seeding import rng_from
from .synthesis import SynthesisParams, synthesize_indexed, validate_sample

_COND_TAG = 11

_SAMPLES_NAME = "samples.bin"
_LABELS_NAME = "labels.jsonl"
_MANIFEST_NAME = "dataset_manifest.json"


def _instance_record(inst):
    return {"start": inst.start, "end": inst.end, "ordinal": inst.ordinal,
            "r": inst.ratio}


def make_labeled_sample(bank, params: SynthesisParams, index, condition_prob,
                        categories=None, allow_joint=False):
    """Synthesize sample `index` and draw its condition; fully index-driven."""
    sample = synthesize_indexed(bank, params, index, categories=categories)
    cond_rng = rng_from(params.seed, _COND_TAG, index)
    condition = sample_condition(sample, condition_prob, cond_rng, allow_joint=allow_joint)
    label = {
        "index": index,
        "category": sample.target_category,
        "instances": [_instance_record(inst) for inst in sample.instances],
        "condition": condition_to_record(condition),
        "background_spans": [list(span) for span in sample.background_spans],
    }
    return sample, condition, label


def generate_dataset(bank, params: SynthesisParams, count, out_dir, condition_prob,
                     categories=None, allow_joint=False, threads=1):
    """Write `count` synthesized samples to `out_dir`; returns the manifest."""
    if count < 1:
        raise ConfigError(f"count must be positive, got {count}")
    os.makedirs(out_dir, exist_ok=True)

    def produce(index):
        sample, _, label = make_labeled_sample(bank, params, index, condition_prob,
                                               categories=categories, allow_joint=allow_joint)
        problems = validate_sample(sample, params)
        if problems:
            raise ConfigError(f"sample {index} violates invariants: {problems}")
        return sample.features.astype("<f4").tobytes(), label

    with open(os.path.join(out_dir, _SAMPLES_NAME), "wb") as bin_fh, \
            open(os.path.join(out_dir, _LABELS_NAME), "w", encoding="utf-8") as label_fh:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                for blob, label in pool.map(produce, range(count), chunksize=8):
                    bin_fh.write(blob)
                    label_fh.write(json.dumps(label, sort_keys=True) + "\n")
        else:
            for index in range(count):
                blob, label = produce(index)
                bin_fh.write(blob)
                label_fh.write(json.dumps(label, sort_keys=True) + "\n")

    manifest = {
        "kind": "synthesized_samples",
        "count": count,
        "feature_dim": bank.feature_dim,
        "target_len": params.target_len,
        "dtype": "f32le",
        "condition_prob": condition_prob,
        "categories": sorted(categories) if categories is not None else None,
        "allow_joint": bool(allow_joint),
        "params": dataclasses.asdict(params),
        "seed": params.seed,
    }
    with open(os.path.join(out_dir, _MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


def dataset_fingerprint(bank, params: SynthesisParams, count, condition_prob,
                        categories=None, allow_joint=False, threads=1):
    """SHA-256 over the exact bytes generate_dataset would write, without disk."""
    feature_hash = hashlib.sha256()
    label_hash = hashlib.sha256()

    def produce(index):
        sample, _, label = make_labeled_sample(bank, params, index, condition_prob,
                                               categories=categories, allow_joint=allow_joint)
        return sample.features.astype("<f4").tobytes(), label

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = pool.map(produce, range(count), chunksize=8)
            for blob, label in results:
                feature_hash.update(blob)
                label_hash.update((json.dumps(label, sort_keys=True) + "\n").encode())
    else:
        for index in range(count):
            blob, label = produce(index)
            feature_hash.update(blob)
            label_hash.update((json.dumps(label, sort_keys=True) + "\n").encode())
    return feature_hash.hexdigest(), label_hash.hexdigest()


def write_video_set(out_dir, features_list, labels, extra=None):
    """Persist pre-built videos (e.g. a downstream benchmark split).

    Same container as generate_dataset; label records may carry extra keys
    such as per-instance categories for multi-class videos.
    """
    if not features_list or len(features_list) != len(labels):
        raise ConfigError("need matching non-empty features and labels")
    length, dim = features_list[0].shape
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, _SAMPLES_NAME), "wb") as bin_fh, \
            open(os.path.join(out_dir, _LABELS_NAME), "w", encoding="utf-8") as label_fh:
        for feats, label in zip(features_list, labels):
            if feats.shape != (length, dim):
                raise ConfigError(f"all videos must share shape {(length, dim)}, "
                                  f"got {feats.shape}")
            bin_fh.write(np.ascontiguousarray(feats, dtype="<f4").tobytes())
            label_fh.write(json.dumps(label, sort_keys=True) + "\n")
    manifest = {"kind": "untrimmed_videos", "count": len(labels), "feature_dim": dim,
                "target_len": length, "dtype": "f32le"}
    manifest.update(extra or {})
    with open(os.path.join(out_dir, _MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest


class SampleDataset:
    """Read-only view over a dataset directory; features stay memory-mapped."""

    def __init__(self, directory):
        self.directory = directory
        try:
            with open(os.path.join(directory, _MANIFEST_NAME), "r", encoding="utf-8") as fh:
                self.manifest = json.load(fh)
        except FileNotFoundError:
            raise FormatError(f"{directory} has no {_MANIFEST_NAME}")
        except json.JSONDecodeError as exc:
            raise FormatError(f"malformed {_MANIFEST_NAME}: {exc.msg}", offset=exc.pos)
        for key in ("count", "feature_dim", "target_len", "dtype"):
            if key not in self.manifest:
                raise FormatError(f"{_MANIFEST_NAME} missing key {key!r}")
        if self.manifest["dtype"] != "f32le":
            raise FormatError(f"unsupported dtype {self.manifest['dtype']!r}")
        count = self.manifest["count"]
        length, dim = self.manifest["target_len"], self.manifest["feature_dim"]
        path = os.path.join(directory, _SAMPLES_NAME)
        expected = count * length * dim * 4
        actual = os.path.getsize(path)
        if actual != expected:
            raise FormatError(f"{_SAMPLES_NAME} holds {actual} bytes, expected {expected}",
                              offset=min(actual, expected))
        self.features = np.memmap(path, dtype="<f4", mode="r", shape=(count, length, dim))
        self.labels = []
        with open(os.path.join(directory, _LABELS_NAME), "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh):
                try:
                    self.labels.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise FormatError(f"labels.jsonl line {line_no + 1}: {exc.msg}",
                                      offset=exc.pos)
        if len(self.labels) != count:
            raise FormatError(f"labels.jsonl has {len(self.labels)} records, "
                              f"manifest says {count}")

    def __len__(self):
        return self.manifest["count"]

    def features_of(self, index):
        return np.ascontiguousarray(self.features[index])

    def label_of(self, index):
        return self.labels[index]

    def condition_of(self, index):
        label = self.labels[index]
        return record_to_condition(label["condition"], label["category"])
