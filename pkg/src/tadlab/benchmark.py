"""Category-split transfer benchmark.

The bank's categories are divided into a pre-training pool and a held-out
downstream set.  Downstream "videos" are untrimmed multi-category feature
sequences: background assembled from pre-training categories, with several
held-out-category segments of deliberately spread lengths written on top.
Labels use local class ids 0..C-1 (manifest records the source bank ids).

`run_directional_comparison` is the end-to-end desk experiment: pre-train,
fine-tune warm and scratch under identical schedules, evaluate, and compare
attention diversity.
"""

import os
import zlib
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import autodiff as ad
from .analysis import layer_diversity_profile
from .datasets import SampleDataset, write_video_set
from .errors import ConfigError
from .evalkit import Detection, EvalProtocol, GroundTruth, map_over_thresholds
from .featbank import BankConfig, generate_bank, sample_clip
from .matching import interval_to_span
from .model import ModelConfig
from .seeding import rng_from
from .synthesis import SynthesisParams, build_background_from_pool, merge_overlaps, place_insertions
from .trainer import TrainConfig, finetune, pretrain

_SPLIT_TAG = 31
_VIDEO_TAG = 32
_BANK_TAG = 33
_SYNTH_TAG = 34
_TRAIN_TAG = 35

# instance lengths drawn per coverage band so every scale bucket occurs
_RATIO_BANDS = ((0.06, 0.18), (0.2, 0.38), (0.42, 0.58), (0.62, 0.85))


@dataclass(frozen=True)
class CategorySplit:
    pretrain: tuple
    downstream: tuple


def split_categories(num_categories, num_downstream, seed):
    """Disjoint pretrain/downstream category sets from one permutation."""
    if not 0 < num_downstream < num_categories:
        raise ConfigError(f"need 0 < downstream < {num_categories}, got {num_downstream}")
    perm = rng_from(seed, _SPLIT_TAG).permutation(num_categories)
    down = tuple(sorted(int(c) for c in perm[:num_downstream]))
    rest = tuple(sorted(int(c) for c in perm[num_downstream:]))
    return CategorySplit(pretrain=rest, downstream=down)


@dataclass(frozen=True)
class VideoSetConfig:
    video_len: int = 96
    num_background: int = 8
    instances_range: tuple = (2, 8)
    min_instance_rows: int = 4

    def validate(self):
        lo, hi = self.instances_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad instances_range {self.instances_range}")
        if self.video_len < 2 * self.min_instance_rows:
            raise ConfigError("video_len too small for any instance")
        return self


def _assemble_segment(bank, category, rows_needed, rng):
    pieces = []
    total = 0
    while total < rows_needed:
        clip = sample_clip(bank, category, rng)
        pieces.append(clip.features)
        total += clip.features.shape[0]
    return np.concatenate(pieces, axis=0)[:rows_needed]


def build_video(bank, split: CategorySplit, cfg: VideoSetConfig, rng):
    """One untrimmed video; returns (features, instance dicts with local ids)."""
    cfg.validate()
    length = cfg.video_len
    template, _ = build_background_from_pool(bank, list(split.pretrain),
                                             cfg.num_background, length, rng)
    lo, hi = cfg.instances_range
    count = int(rng.integers(lo, hi + 1))
    insertions = []
    for _ in range(count):
        local = int(rng.integers(len(split.downstream)))
        band = _RATIO_BANDS[int(rng.integers(len(_RATIO_BANDS)))]
        ratio = float(rng.uniform(*band))
        rows = min(length, max(cfg.min_instance_rows, int(round(ratio * length))))
        segment = _assemble_segment(bank, split.downstream[local], rows, rng)
        start = int(rng.integers(0, length - rows + 1))
        insertions.append((local, segment, start))
    features, surviving = place_insertions(template, insertions)
    instances = []
    for local in sorted({c for c, _, _ in surviving}):
        for s, e in merge_overlaps([(s, e) for c, s, e in surviving if c == local]):
            instances.append({"category": local, "start": s / length, "end": e / length,
                              "r": (e - s) / length})
    instances.sort(key=lambda rec: (rec["start"], rec["category"]))
    return features, instances


def build_video_set(bank, split: CategorySplit, cfg: VideoSetConfig, count, out_dir,
                    seed, name):
    """Write `count` videos for one benchmark split to `out_dir`."""
    features_list, labels = [], []
    name_tag = zlib.crc32(name.encode("utf-8"))
    for i in range(count):
        rng = rng_from(seed, _VIDEO_TAG, name_tag, i)
        feats, instances = build_video(bank, split, cfg, rng)
        features_list.append(feats)
        labels.append({"video_id": f"{name}_{i:05d}", "category": None,
                       "instances": instances})
    return write_video_set(out_dir, features_list, labels, extra={
        "split": name, "seed": seed, "source_categories": list(split.downstream),
        "num_classes": len(split.downstream), "video_config": asdict(cfg)})


def ground_truth_of(dataset: SampleDataset):
    out = []
    for i in range(len(dataset)):
        label = dataset.label_of(i)
        for inst in label["instances"]:
            out.append(GroundTruth(label["video_id"], int(inst["category"]),
                                   float(inst["start"]), float(inst["end"])))
    return out


def predict_dataset(model, dataset: SampleDataset):
    """One detection per query per video: argmax real class, score = its prob."""
    detections = []
    with ad.no_grad():
        for i in range(len(dataset)):
            label = dataset.label_of(i)
            result = model.forward(dataset.features_of(i))
            probs = result.class_probs.data
            spans = interval_to_span(result.intervals.data)
            classes = np.argmax(probs[:, :-1], axis=1)
            for q in range(probs.shape[0]):
                detections.append(Detection(label["video_id"], int(classes[q]),
                                            float(spans[q, 0]), float(spans[q, 1]),
                                            float(probs[q, classes[q]])))
    return detections


def evaluate_model(model, dataset: SampleDataset, protocol: EvalProtocol):
    return map_over_thresholds(predict_dataset(model, dataset),
                               ground_truth_of(dataset), protocol)


# -- desk-scale directional experiment ----------------------------------------


@dataclass(frozen=True)
class DirectionalConfig:
    """Everything the desk transfer experiment needs, sized for one CPU."""
    bank: BankConfig = BankConfig()
    num_downstream: int = 8
    video: VideoSetConfig = VideoSetConfig()
    train_videos: int = 160
    test_videos: int = 80
    synth_len: int = 96
    synth_background: int = 8
    pretrain_epochs: int = 6
    pretrain_samples_per_epoch: int = 768
    pretrain_batch: int = 32
    finetune_epochs: int = 12
    finetune_batch: int = 16
    base_lr: float = 1e-4
    warmup_epochs: int = 2
    fractions: tuple = (1.0, 0.25)
    diversity_videos: int = 24


def run_directional_comparison(workdir, seed, cfg: DirectionalConfig = DirectionalConfig(),
                               protocol: EvalProtocol = None):
    """Pre-train once, fine-tune warm vs scratch, report mAP gaps and diversity."""
    protocol = protocol or EvalProtocol.anet_style()
    os.makedirs(workdir, exist_ok=True)
    bank = generate_bank(replace(cfg.bank, seed=int(rng_from(seed, _BANK_TAG).integers(2 ** 31))))
    split = split_categories(bank.num_categories, cfg.num_downstream, seed)

    synth = SynthesisParams(target_len=cfg.synth_len, num_background=cfg.synth_background,
                            seed=int(rng_from(seed, _SYNTH_TAG).integers(2 ** 31)))
    model_cfg = ModelConfig.for_profile("desk", num_classes=len(split.downstream),
                                        feature_dim=bank.feature_dim)

    pre_cfg = TrainConfig(phase="pretrain", epochs=cfg.pretrain_epochs,
                          batch_size=cfg.pretrain_batch,
                          samples_per_epoch=cfg.pretrain_samples_per_epoch,
                          base_lr=cfg.base_lr, warmup_epochs=cfg.warmup_epochs,
                          seed=int(rng_from(seed, _TRAIN_TAG, 0).integers(2 ** 31)))
    pre_out = os.path.join(workdir, "pretrain")
    pre_result = pretrain(bank, synth, model_cfg, pre_cfg, pre_out,
                          categories=list(split.pretrain))

    train_dir = os.path.join(workdir, "videos_train")
    test_dir = os.path.join(workdir, "videos_test")
    build_video_set(bank, split, cfg.video, cfg.train_videos, train_dir, seed, "train")
    build_video_set(bank, split, cfg.video, cfg.test_videos, test_dir, seed, "test")
    train_set = SampleDataset(train_dir)
    test_set = SampleDataset(test_dir)

    report = {"seed": seed, "maps": {}, "gaps": {}}
    models = {}
    for fraction in cfg.fractions:
        scores = {}
        for mode in ("ltp", "scratch"):
            ft_cfg = TrainConfig(phase="finetune", epochs=cfg.finetune_epochs,
                                 batch_size=cfg.finetune_batch, base_lr=cfg.base_lr,
                                 warmup_epochs=cfg.warmup_epochs,
                                 train_fraction=fraction,
                                 seed=int(rng_from(seed, _TRAIN_TAG, 1).integers(2 ** 31)))
            out = os.path.join(workdir, f"finetune_{mode}_{int(fraction * 100):03d}")
            result = finetune(train_set, model_cfg, ft_cfg, out,
                              checkpoint_dir=pre_result.checkpoint_dir
                              if mode == "ltp" else None)
            scores[mode] = evaluate_model(result.model, test_set, protocol)["average"]
            models[(mode, fraction)] = result.model
            report["maps"][f"{mode}_{fraction}"] = scores[mode]
        report["gaps"][fraction] = scores["ltp"] - scores["scratch"]

    full = max(cfg.fractions)
    sample_count = min(cfg.diversity_videos, len(test_set))
    feats = [test_set.features_of(i) for i in range(sample_count)]
    last = model_cfg.encoder_layers - 1
    report["encoder_diversity"] = {
        mode: layer_diversity_profile(models[(mode, full)], feats).means[("encoder_self", last)]
        for mode in ("ltp", "scratch")
    }
    return report
