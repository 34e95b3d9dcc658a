"""Training loops: streamed pre-training and downstream fine-tuning.

Pre-training never materializes a dataset; every sample is synthesized from
its global index, so a run is a pure function of (bank, synthesis params,
train config) and resuming from a checkpoint replays the exact remaining
stream.  Fine-tuning consumes an on-disk video set, re-initializes the
classification head, and never conditions the queries.

Batches accumulate gradients one sample at a time (losses are scaled by
1/batch before backward), which keeps the live graph at single-sample size.
"""

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from .datasets import SampleDataset, make_labeled_sample
from .errors import CheckpointError, ConfigError, TrainingFailure
from .matching import (MatchCostConfig, binary_relabel, detr_loss, match_predictions,
                       span_to_interval)
from .model import (DetectionTransformer, ModelConfig, load_archive, load_into_model,
                    save_archive)
from .pretext import TaskEncoder, condition_queries, encode_condition, filter_targets
from .seeding import rng_from

_MODEL_TAG = 21
_TASK_ENC_TAG = 22
_HEAD_TAG = 23
_ORDER_TAG = 24
_FRACTION_TAG = 25

SCHEDULES = ("cosine_warmup", "step")
PHASES = ("pretrain", "finetune")


@dataclass(frozen=True)
class TrainConfig:
    phase: str
    epochs: int
    batch_size: int
    samples_per_epoch: int = 0        # pretrain stream size; ignored on finetune
    base_lr: float = 1e-4
    schedule: str = "cosine_warmup"
    warmup_epochs: int = 5
    milestones: tuple = (80, 100)
    factor: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    condition_prob: float = 0.5
    seed: int = 0
    train_fraction: float = 1.0

    def validate(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.phase == "pretrain" and self.samples_per_epoch < 1:
            raise ConfigError("pretrain needs samples_per_epoch >= 1")
        if not 0.0 <= self.condition_prob <= 1.0:
            raise ConfigError(f"condition_prob {self.condition_prob} outside [0, 1]")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"train_fraction {self.train_fraction} outside (0, 1]")
        if self.base_lr <= 0 or self.weight_decay < 0 or self.warmup_epochs < 0:
            raise ConfigError("base_lr must be positive; decay and warmup nonnegative")
        if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {self.milestones}")
        if not 0.0 < self.factor < 1.0:
            raise ConfigError(f"factor must lie in (0, 1), got {self.factor}")
        return self


def lr_at(step, cfg: TrainConfig, steps_per_epoch, total_steps):
    """Learning rate for a 0-based optimizer step."""
    if step < 0:
        raise ConfigError(f"step must be nonnegative, got {step}")
    if cfg.schedule == "step":
        epoch = step // steps_per_epoch
        passed = sum(1 for ms in cfg.milestones if epoch >= ms)
        return cfg.base_lr * cfg.factor ** passed
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    if step < warmup_steps:
        return cfg.base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def data_fraction_split(count, fraction, seed):
    """Nested subsets: a prefix of one seeded permutation, then sorted."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction {fraction} outside (0, 1]")
    keep = math.ceil(fraction * count)
    perm = rng_from(seed, _FRACTION_TAG).permutation(count)
    return np.sort(perm[:keep])


class AdamW:
    """Adaptive moments with decoupled weight decay (beta 0.9/0.999, eps 1e-8)."""

    def __init__(self, named_params, weight_decay=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def clip_gradients(self, max_norm):
        """Scale all gradients so their global l2 norm is at most max_norm."""
        total_sq = 0.0
        for _, p in self.named:
            if p.grad is not None:
                total_sq += float((p.grad * p.grad).sum())
        total = math.sqrt(total_sq)
        if max_norm > 0 and total > max_norm:
            scale = max_norm / total
            for _, p in self.named:
                if p.grad is not None:
                    p.grad *= scale
        return total

    def step(self, lr):
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, p in self.named:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            update = lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - update - lr * self.weight_decay * p.data

    def zero_grads(self):
        for _, p in self.named:
            p.zero_grad()

    def state_arrays(self):
        out = []
        for name, _ in self.named:
            out.append((f"opt.m.{name}", self.m[name]))
            out.append((f"opt.v.{name}", self.v[name]))
        return out

    def load_state(self, arrays, t):
        self.t = t
        for name, p in self.named:
            for slot, store in (("m", self.m), ("v", self.v)):
                key = f"opt.{slot}.{name}"
                if key not in arrays:
                    raise CheckpointError(f"checkpoint missing optimizer state {key!r}")
                if arrays[key].shape != p.data.shape:
                    raise CheckpointError(f"optimizer state {key!r} has shape "
                                          f"{arrays[key].shape}, expected {p.data.shape}")
                store[name] = arrays[key].copy()


@dataclass
class TrainResult:
    model: DetectionTransformer
    task_encoder: TaskEncoder | None
    steps_run: int
    final_epoch: int
    final_loss: float
    checkpoint_dir: str
    log_path: str


class _Logger:
    def __init__(self, path, append):
        self.path = path
        self._fh = open(path, "a" if append else "w", encoding="utf-8")

    def record(self, **fields):
        self._fh.write(json.dumps(fields, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self):
        self._fh.close()


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


def _save_state(directory, model, task_encoder, optimizer, extra):
    arrays = list(model.params())
    if task_encoder is not None:
        arrays += task_encoder.params()
    arrays += optimizer.state_arrays()
    save_archive(directory, arrays, extra=extra)


def _abort(out_dir, logger, payload):
    dump_path = os.path.join(out_dir, "diagnostic.json")
    with open(dump_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")
    logger.close()
    raise TrainingFailure(f"non-finite loss at step {payload['step']}; "
                          f"diagnostics in {dump_path}")


def pretrain(bank, synth_params, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir,
             categories=None, cost_cfg=None, allow_joint=False, resume=False,
             stop_after_epoch=None):
    """Class-agnostic pre-training on the synthesized stream.

    The model always gets a single foreground class; `categories` restricts
    which bank categories appear (e.g. the pre-training half of a split).
    """
    train_cfg.validate()
    if train_cfg.phase != "pretrain":
        raise ConfigError(f"pretrain called with phase {train_cfg.phase!r}")
    cost_cfg = (cost_cfg or MatchCostConfig()).validate()
    os.makedirs(out_dir, exist_ok=True)

    if model_cfg.num_classes != 1:
        model_cfg = ModelConfig(**{**asdict(model_cfg), "num_classes": 1})
    model = DetectionTransformer(model_cfg, rng_from(train_cfg.seed, _MODEL_TAG))
    n_target = bank.num_categories
    task_encoder = TaskEncoder(rng_from(train_cfg.seed, _TASK_ENC_TAG), n_target,
                               synth_params.max_instances, model_cfg.hidden_dim)
    optimizer = AdamW(model.params() + task_encoder.params(),
                      weight_decay=train_cfg.weight_decay)

    checkpoint_dir = os.path.join(out_dir, "checkpoint")
    start_epoch = 0
    if resume:
        arrays, extra = load_archive(checkpoint_dir)
        _check_dims(extra, model_cfg)
        load_into_model(model, arrays)
        for name, tensor in task_encoder.params():
            if name not in arrays:
                raise CheckpointError(f"checkpoint missing parameter {name!r}")
            tensor.data = arrays[name].copy()
        optimizer.load_state(arrays, extra["optimizer_steps"])
        start_epoch = extra["epochs_completed"]

    steps_per_epoch = math.ceil(train_cfg.samples_per_epoch / train_cfg.batch_size)
    total_steps = steps_per_epoch * train_cfg.epochs
    log_path = os.path.join(out_dir, "train_log.jsonl")
    logger = _Logger(log_path, append=resume)
    step = start_epoch * steps_per_epoch
    last_loss = math.nan

    for epoch in range(start_epoch, train_cfg.epochs):
        first = epoch * train_cfg.samples_per_epoch
        indices = range(first, first + train_cfg.samples_per_epoch)
        for chunk in _chunks(list(indices), train_cfg.batch_size):
            optimizer.zero_grads()
            losses = []
            for idx in chunk:
                sample, condition, _ = make_labeled_sample(
                    bank, synth_params, idx, train_cfg.condition_prob,
                    categories=categories, allow_joint=allow_joint)
                kept = filter_targets(sample.instances, condition)
                classes = binary_relabel(kept)
                spans = np.array([inst.normalized(synth_params.target_len) for inst in kept],
                                 dtype=np.float64).reshape(len(kept), 2)
                gt_cw = span_to_interval(spans)
                vector = encode_condition(condition, n_target, synth_params.max_instances)
                queries = condition_queries(model.queries, vector, task_encoder)
                result = model.forward(sample.features, queries=queries)
                assignment = match_predictions(classes, gt_cw, result, cost_cfg)
                loss = detr_loss(classes, gt_cw, result.class_probs, result.intervals,
                                 assignment, cost_cfg)
                (loss * (1.0 / len(chunk))).backward()
                losses.append(float(loss.data))
            batch_loss = float(np.mean(losses))
            lr = lr_at(step, train_cfg, steps_per_epoch, total_steps)
            if not math.isfinite(batch_loss):
                _abort(out_dir, logger, {"phase": "pretrain", "step": step, "epoch": epoch,
                                         "sample_indices": list(chunk),
                                         "seed": train_cfg.seed, "loss": repr(batch_loss)})
            optimizer.clip_gradients(train_cfg.grad_clip)
            optimizer.step(lr)
            logger.record(step=step, epoch=epoch, loss=batch_loss, lr=lr, phase="pretrain")
            step += 1
            last_loss = batch_loss
        _save_state(checkpoint_dir, model, task_encoder, optimizer, extra={
            "phase": "pretrain", "epochs_completed": epoch + 1, "step": step,
            "optimizer_steps": optimizer.t, "model_config": asdict(model_cfg),
            "train_config": asdict(train_cfg), "synthesis_params": asdict(synth_params),
            "categories": sorted(categories) if categories is not None else None,
        })
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    logger.close()
    return TrainResult(model, task_encoder, step, epoch + 1, last_loss,
                       checkpoint_dir, log_path)


def _check_dims(extra, model_cfg: ModelConfig):
    stored = extra.get("model_config", {})
    for key in ("hidden_dim", "heads", "ffn_dim", "encoder_layers", "decoder_layers",
                "num_queries", "feature_dim"):
        if key in stored and stored[key] != getattr(model_cfg, key):
            raise CheckpointError(f"checkpoint {key}={stored[key]} incompatible with "
                                  f"model {key}={getattr(model_cfg, key)}")


def _video_targets(label):
    classes = [inst["category"] for inst in label["instances"]]
    spans = [(inst["start"], inst["end"]) for inst in label["instances"]]
    return np.asarray(classes, dtype=np.intp), np.asarray(spans, dtype=np.float64)


def warm_start_model(model_cfg: ModelConfig, checkpoint_dir, seed):
    """Model for fine-tuning: pre-trained weights, fresh classification head."""
    arrays, extra = load_archive(checkpoint_dir)
    _check_dims(extra, model_cfg)
    model = DetectionTransformer(model_cfg, rng_from(seed, _MODEL_TAG))
    pretrain_cfg = ModelConfig(**{**asdict(model_cfg), "num_classes": 1})
    donor = DetectionTransformer(pretrain_cfg, rng_from(seed, _MODEL_TAG))
    load_into_model(donor, arrays)
    for (name, src), (_, dst) in zip(donor.params(), model.params()):
        if not name.startswith("class_head"):
            dst.data = src.data.copy()
    model.reinit_class_head(rng_from(seed, _HEAD_TAG), model_cfg.num_classes)
    return model


def finetune(dataset: SampleDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
             out_dir, checkpoint_dir=None, cost_cfg=None, resume=False,
             stop_after_epoch=None):
    """Fine-tune on an untrimmed video set; `checkpoint_dir=None` is scratch.

    Warm starts load every pre-trained weight except the classification
    head, which is rebuilt for the downstream label space.  Queries are
    used raw; the task encoder never runs here.  Scratch runs see the same
    data order, schedule, and loss, isolating the warm start itself.
    """
    train_cfg.validate()
    if train_cfg.phase != "finetune":
        raise ConfigError(f"finetune called with phase {train_cfg.phase!r}")
    cost_cfg = (cost_cfg or MatchCostConfig()).validate()
    os.makedirs(out_dir, exist_ok=True)

    if checkpoint_dir is not None:
        model = warm_start_model(model_cfg, checkpoint_dir, train_cfg.seed)
    else:
        model = DetectionTransformer(model_cfg, rng_from(train_cfg.seed, _MODEL_TAG))

    optimizer = AdamW(model.params(), weight_decay=train_cfg.weight_decay)
    own_checkpoint = os.path.join(out_dir, "checkpoint")
    start_epoch = 0
    if resume:
        arrays, extra = load_archive(own_checkpoint)
        _check_dims(extra, model_cfg)
        load_into_model(model, arrays)
        optimizer.load_state(arrays, extra["optimizer_steps"])
        start_epoch = extra["epochs_completed"]

    subset = data_fraction_split(len(dataset), train_cfg.train_fraction, train_cfg.seed)
    batches_per_epoch = math.ceil(len(subset) / train_cfg.batch_size)
    total_steps = batches_per_epoch * train_cfg.epochs
    log_path = os.path.join(out_dir, "train_log.jsonl")
    logger = _Logger(log_path, append=resume)
    step = start_epoch * batches_per_epoch
    last_loss = math.nan

    targets = {int(i): _video_targets(dataset.label_of(int(i))) for i in subset}
    for epoch in range(start_epoch, train_cfg.epochs):
        order = rng_from(train_cfg.seed, _ORDER_TAG, epoch).permutation(subset)
        for chunk in _chunks(list(order), train_cfg.batch_size):
            optimizer.zero_grads()
            losses = []
            for vid in chunk:
                classes, spans = targets[int(vid)]
                gt_cw = span_to_interval(spans.reshape(len(classes), 2))
                result = model.forward(dataset.features_of(int(vid)))
                assignment = match_predictions(classes, gt_cw, result, cost_cfg)
                loss = detr_loss(classes, gt_cw, result.class_probs, result.intervals,
                                 assignment, cost_cfg)
                (loss * (1.0 / len(chunk))).backward()
                losses.append(float(loss.data))
            batch_loss = float(np.mean(losses))
            lr = lr_at(step, train_cfg, batches_per_epoch, total_steps)
            if not math.isfinite(batch_loss):
                _abort(out_dir, logger, {"phase": "finetune", "step": step, "epoch": epoch,
                                         "video_indices": [int(v) for v in chunk],
                                         "seed": train_cfg.seed, "loss": repr(batch_loss)})
            optimizer.clip_gradients(train_cfg.grad_clip)
            optimizer.step(lr)
            logger.record(step=step, epoch=epoch, loss=batch_loss, lr=lr, phase="finetune")
            step += 1
            last_loss = batch_loss
        _save_state(own_checkpoint, model, None, optimizer, extra={
            "phase": "finetune", "epochs_completed": epoch + 1, "step": step,
            "optimizer_steps": optimizer.t, "model_config": asdict(model_cfg),
            "train_config": asdict(train_cfg),
            "train_subset_size": int(len(subset)),
            "warm_start": checkpoint_dir is not None,
        })
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break
    logger.close()
    return TrainResult(model, None, step, epoch + 1, last_loss, own_checkpoint, log_path)
