"""Schedules, optimizer mechanics, and the two training loops end to end."""

import json
import math
import os

import numpy as np
import pytest

from tadlab import autodiff as ad
from tadlab import trainer
from tadlab.datasets import SampleDataset, write_video_set
from tadlab.errors import CheckpointError, ConfigError, TrainingFailure
from tadlab.model import ModelConfig, load_archive
from tadlab.synthesis import SynthesisParams
from tadlab.trainer import (AdamW, TrainConfig, data_fraction_split, finetune, lr_at,
                            pretrain, warm_start_model)

BASE = dict(phase="pretrain", epochs=15, batch_size=4, samples_per_epoch=40)


def cfg(**over):
    return TrainConfig(**{**BASE, **over}).validate()


# -- learning rate schedule ----------------------------------------------------


def test_warmup_is_linear_and_ends_at_base():
    c = cfg(base_lr=2e-3, warmup_epochs=5)
    assert lr_at(0, c, 10, 150) == pytest.approx(2e-3 / 50)
    assert lr_at(24, c, 10, 150) == pytest.approx(2e-3 * 25 / 50)
    assert lr_at(49, c, 10, 150) == pytest.approx(2e-3)


def test_cosine_hits_half_and_zero():
    c = cfg(base_lr=1e-3, warmup_epochs=5)
    # after warmup the cosine spans the remaining 100 steps
    assert lr_at(50, c, 10, 150) == pytest.approx(1e-3)
    assert lr_at(100, c, 10, 150) == pytest.approx(0.5e-3)
    assert lr_at(150, c, 10, 150) == pytest.approx(0.0, abs=1e-18)


def test_cosine_decreases_monotonically_after_warmup():
    c = cfg(base_lr=1e-3, warmup_epochs=2)
    values = [lr_at(s, c, 10, 200) for s in range(20, 201)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_step_schedule_drops_at_milestones():
    c = cfg(schedule="step", base_lr=1e-2, milestones=(80, 100), factor=0.1)
    assert lr_at(799, c, 10, 0) == pytest.approx(1e-2)       # epoch 79
    assert lr_at(800, c, 10, 0) == pytest.approx(1e-3)       # epoch 80
    assert lr_at(1000, c, 10, 0) == pytest.approx(1e-4)      # epoch 100
    assert lr_at(5000, c, 10, 0) == pytest.approx(1e-4)


def test_negative_step_rejected():
    with pytest.raises(ConfigError):
        lr_at(-1, cfg(), 10, 100)


def test_config_validation():
    bad = [dict(phase="train"), dict(schedule="linear"), dict(epochs=0),
           dict(batch_size=0), dict(samples_per_epoch=0),
           dict(condition_prob=1.5), dict(train_fraction=0.0),
           dict(base_lr=0.0), dict(milestones=(100, 80)), dict(factor=1.0)]
    for over in bad:
        with pytest.raises(ConfigError):
            cfg(**over)


# -- data fractions --------------------------------------------------------


def test_full_fraction_is_identity():
    assert np.array_equal(data_fraction_split(20, 1.0, seed=4), np.arange(20))


def test_fraction_sizes_round_up():
    subset = data_fraction_split(10, 0.5, seed=4)
    assert subset.shape == (5,)
    assert np.array_equal(subset, np.sort(subset))
    assert data_fraction_split(10, 0.01, seed=4).shape == (1,)


def test_fractions_are_nested():
    quarter = set(data_fraction_split(40, 0.25, seed=8).tolist())
    half = set(data_fraction_split(40, 0.5, seed=8).tolist())
    assert quarter < half
    assert half < set(range(40))


def test_fraction_range_checked():
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ConfigError):
            data_fraction_split(10, bad, seed=0)


# -- optimizer ---------------------------------------------------------------


def _param(values):
    return ad.Tensor(np.array(values, dtype=np.float64), requires_grad=True)


def test_adamw_decay_shrinks_without_gradients():
    p = _param([2.0, -4.0])
    opt = AdamW([("w", p)], weight_decay=0.1)
    opt.step(lr=0.5)
    # no gradient ever arrived, so the update is pure decoupled decay
    assert np.allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.5 * 0.1))
    opt.step(lr=0.5)
    assert np.allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.5 * 0.1) ** 2)


def test_adamw_first_step_moves_by_lr():
    p = _param([1.0, 1.0])
    opt = AdamW([("w", p)], weight_decay=0.0)
    p.grad = np.array([3.0, -0.5])
    opt.step(lr=1e-3)
    # bias-corrected m/sqrt(v) is sign(grad) on the first step
    assert np.allclose(p.data, [1.0 - 1e-3, 1.0 + 1e-3], rtol=1e-6)


def test_clip_gradients_scales_global_norm():
    a, b = _param([0.0]), _param([0.0])
    opt = AdamW([("a", a), ("b", b)])
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])
    assert opt.clip_gradients(1.0) == pytest.approx(5.0)
    assert np.allclose(a.grad, [0.6])
    assert np.allclose(b.grad, [0.8])
    assert opt.clip_gradients(10.0) == pytest.approx(1.0)   # already under the cap
    assert np.allclose(a.grad, [0.6])


def test_zero_grads_clears_everything():
    p = _param([1.0])
    opt = AdamW([("w", p)])
    p.grad = np.array([2.0])
    opt.zero_grads()
    assert p.grad is None


def test_load_state_validates_keys_and_shapes():
    p = _param([1.0, 2.0])
    opt = AdamW([("w", p)])
    good = {name: arr.copy() for name, arr in opt.state_arrays()}
    opt.load_state(good, t=3)
    assert opt.t == 3
    with pytest.raises(CheckpointError):
        opt.load_state({"opt.m.w": np.zeros(2)}, t=1)
    with pytest.raises(CheckpointError):
        opt.load_state({"opt.m.w": np.zeros(3), "opt.v.w": np.zeros(3)}, t=1)


# -- pretraining loop ---------------------------------------------------------


TINY_SYNTH = SynthesisParams(target_len=48, num_background=4,
                             target_count_range=(1, 2), max_instances=4, seed=5)


def tiny_model_cfg(num_classes=1):
    return ModelConfig(num_classes=num_classes, feature_dim=16, hidden_dim=16,
                       num_queries=6, encoder_layers=1, decoder_layers=1,
                       heads=2, ffn_dim=32).validate()


def tiny_pre_cfg(**over):
    return cfg(**{**dict(epochs=2, batch_size=4, samples_per_epoch=8,
                         warmup_epochs=1, seed=9), **over})


def _log_records(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


def test_pretrain_writes_checkpoint_and_log(tiny_bank, tmp_path):
    result = pretrain(tiny_bank, TINY_SYNTH, tiny_model_cfg(), tiny_pre_cfg(),
                      str(tmp_path / "run"))
    assert result.steps_run == 4 and result.final_epoch == 2
    assert math.isfinite(result.final_loss)
    assert os.path.exists(os.path.join(result.checkpoint_dir, "weights.bin"))
    records = _log_records(result.log_path)
    assert [r["step"] for r in records] == [0, 1, 2, 3]
    assert all(r["phase"] == "pretrain" and math.isfinite(r["loss"]) for r in records)
    _, extra = load_archive(result.checkpoint_dir)
    assert extra["epochs_completed"] == 2
    assert extra["optimizer_steps"] == 4


def test_pretrain_rejects_wrong_phase(tiny_bank, tmp_path):
    ft = TrainConfig(phase="finetune", epochs=1, batch_size=2)
    with pytest.raises(ConfigError):
        pretrain(tiny_bank, TINY_SYNTH, tiny_model_cfg(), ft, str(tmp_path))


def test_pretrain_is_deterministic(tiny_bank, tmp_path):
    kwargs = dict(categories=[0, 2, 4])
    a = pretrain(tiny_bank, TINY_SYNTH, tiny_model_cfg(), tiny_pre_cfg(),
                 str(tmp_path / "a"), **kwargs)
    b = pretrain(tiny_bank, TINY_SYNTH, tiny_model_cfg(), tiny_pre_cfg(),
                 str(tmp_path / "b"), **kwargs)
    for name in ("weights.bin", "checkpoint.json"):
        with open(os.path.join(a.checkpoint_dir, name), "rb") as fh:
            blob_a = fh.read()
        with open(os.path.join(b.checkpoint_dir, name), "rb") as fh:
            assert blob_a == fh.read()
    _, extra = load_archive(a.checkpoint_dir)
    assert extra["categories"] == [0, 2, 4]


def test_pretrain_stop_and_resume_matches_straight_run(tiny_bank, tmp_path):
    straight = pretrain(tiny_bank, TINY_SYNTH, tiny_model_cfg(), tiny_pre_cfg(),
                        str(tmp_path / "straight"))
    split_dir = str(tmp_path / "split")
    first = pretrain(tiny_bank, TINY_SYNTH, tiny_model_cfg(), tiny_pre_cfg(),
                     split_dir, stop_after_epoch=1)
    assert first.final_epoch == 1
    second = pretrain(tiny_bank, TINY_SYNTH, tiny_model_cfg(), tiny_pre_cfg(),
                      split_dir, resume=True)
    assert second.final_epoch == 2
    with open(os.path.join(straight.checkpoint_dir, "weights.bin"), "rb") as fh:
        reference = fh.read()
    with open(os.path.join(second.checkpoint_dir, "weights.bin"), "rb") as fh:
        assert fh.read() == reference
    assert _log_records(second.log_path) == _log_records(straight.log_path)


def test_training_failure_dumps_diagnostics(tiny_bank, tmp_path, monkeypatch):
    monkeypatch.setattr(trainer, "detr_loss",
                        lambda *a, **k: ad.Tensor(np.array(float("nan"))))
    out = str(tmp_path / "run")
    with pytest.raises(TrainingFailure) as err:
        pretrain(tiny_bank, TINY_SYNTH, tiny_model_cfg(), tiny_pre_cfg(), out)
    assert "diagnostic.json" in str(err.value)
    with open(os.path.join(out, "diagnostic.json"), "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    assert payload["step"] == 0 and payload["phase"] == "pretrain"
    assert payload["sample_indices"] == [0, 1, 2, 3]
    assert payload["seed"] == 9


# -- warm starts ---------------------------------------------------------------


@pytest.fixture(scope="module")
def pretrained_dir(tiny_bank, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("pre"))
    result = pretrain(tiny_bank, TINY_SYNTH, tiny_model_cfg(), tiny_pre_cfg(epochs=1),
                      out)
    return result.checkpoint_dir


def test_warm_start_keeps_trunk_and_rebuilds_head(pretrained_dir):
    model = warm_start_model(tiny_model_cfg(num_classes=5), pretrained_dir, seed=9)
    arrays, _ = load_archive(pretrained_dir)
    checked = 0
    for name, tensor in model.params():
        if name.startswith("class_head"):
            assert tensor.data.shape[-1] == 6      # 5 classes + background
        else:
            assert np.array_equal(tensor.data, arrays[name])
            checked += 1
    assert checked > 10


def test_warm_start_rejects_dimension_mismatch(pretrained_dir):
    wrong = ModelConfig(num_classes=5, feature_dim=16, hidden_dim=32, num_queries=6,
                        encoder_layers=1, decoder_layers=1, heads=2, ffn_dim=32)
    with pytest.raises(CheckpointError):
        warm_start_model(wrong, pretrained_dir, seed=9)


# -- fine-tuning loop --------------------------------------------------------


def _video_set(path, count=6, length=32, dim=16):
    rng = np.random.default_rng(17)
    features, labels = [], []
    for i in range(count):
        features.append(rng.normal(size=(length, dim)))
        labels.append({"video_id": f"v{i}", "category": None, "instances": [
            {"start": 0.125, "end": 0.375, "category": i % 2},
            {"start": 0.5, "end": 0.875, "category": (i + 1) % 2},
        ]})
    write_video_set(path, features, labels, extra={"num_classes": 2})
    return SampleDataset(path)


def tiny_ft_cfg(**over):
    return TrainConfig(**{**dict(phase="finetune", epochs=2, batch_size=3,
                                 warmup_epochs=1, seed=13), **over}).validate()


def test_finetune_scratch_runs_and_checkpoints(tmp_path):
    dataset = _video_set(str(tmp_path / "videos"))
    result = finetune(dataset, tiny_model_cfg(num_classes=2), tiny_ft_cfg(),
                      str(tmp_path / "run"))
    assert result.steps_run == 4 and result.task_encoder is None
    _, extra = load_archive(result.checkpoint_dir)
    assert extra["warm_start"] is False
    assert extra["train_subset_size"] == 6
    records = _log_records(result.log_path)
    assert len(records) == 4 and all(r["phase"] == "finetune" for r in records)


def test_finetune_warm_start_flag_and_fraction(tmp_path, pretrained_dir):
    dataset = _video_set(str(tmp_path / "videos"))
    result = finetune(dataset, tiny_model_cfg(num_classes=2),
                      tiny_ft_cfg(train_fraction=0.5), str(tmp_path / "run"),
                      checkpoint_dir=pretrained_dir)
    _, extra = load_archive(result.checkpoint_dir)
    assert extra["warm_start"] is True
    assert extra["train_subset_size"] == 3


def test_finetune_stop_and_resume_matches_straight_run(tmp_path):
    dataset = _video_set(str(tmp_path / "videos"))
    straight = finetune(dataset, tiny_model_cfg(num_classes=2), tiny_ft_cfg(),
                        str(tmp_path / "straight"))
    split_dir = str(tmp_path / "split")
    finetune(dataset, tiny_model_cfg(num_classes=2), tiny_ft_cfg(), split_dir,
             stop_after_epoch=1)
    second = finetune(dataset, tiny_model_cfg(num_classes=2), tiny_ft_cfg(),
                      split_dir, resume=True)
    with open(os.path.join(straight.checkpoint_dir, "weights.bin"), "rb") as fh:
        reference = fh.read()
    with open(os.path.join(second.checkpoint_dir, "weights.bin"), "rb") as fh:
        assert fh.read() == reference
    assert _log_records(second.log_path) == _log_records(straight.log_path)


def test_finetune_rejects_wrong_phase(tmp_path):
    dataset = _video_set(str(tmp_path / "videos"))
    with pytest.raises(ConfigError):
        finetune(dataset, tiny_model_cfg(num_classes=2), tiny_pre_cfg(),
                 str(tmp_path / "run"))
