"""Category splits, untrimmed video builds, and model evaluation plumbing."""

import os
from dataclasses import replace

import numpy as np
import pytest

from tadlab.benchmark import (CategorySplit, DirectionalConfig, VideoSetConfig,
                              build_video, build_video_set, evaluate_model,
                              ground_truth_of, predict_dataset,
                              run_directional_comparison, split_categories)
from tadlab.datasets import SampleDataset
from tadlab.errors import ConfigError
from tadlab.evalkit import EvalProtocol, coverage_bucket
from tadlab.featbank import BankConfig
from tadlab.model import DetectionTransformer, ModelConfig
from tadlab.seeding import rng_from

VIDEO_CFG = VideoSetConfig(video_len=100, num_background=6, instances_range=(2, 5))


def small_split():
    return CategorySplit(pretrain=(0, 1, 2, 3), downstream=(4, 5))


# -- splits ------------------------------------------------------------------


def test_split_partitions_categories():
    split = split_categories(10, 3, seed=5)
    assert len(split.downstream) == 3 and len(split.pretrain) == 7
    assert set(split.downstream) | set(split.pretrain) == set(range(10))
    assert not set(split.downstream) & set(split.pretrain)
    assert list(split.downstream) == sorted(split.downstream)
    assert list(split.pretrain) == sorted(split.pretrain)


def test_split_deterministic_but_seed_sensitive():
    assert split_categories(12, 4, seed=1) == split_categories(12, 4, seed=1)
    others = {split_categories(12, 4, seed=s).downstream for s in range(8)}
    assert len(others) > 1


def test_split_bounds_checked():
    for bad in (0, 10, 11):
        with pytest.raises(ConfigError):
            split_categories(10, bad, seed=0)


def test_video_config_validation():
    with pytest.raises(ConfigError):
        VideoSetConfig(instances_range=(3, 2)).validate()
    with pytest.raises(ConfigError):
        VideoSetConfig(video_len=6, min_instance_rows=4).validate()


# -- video assembly -----------------------------------------------------------


def test_build_video_shape_and_labels(tiny_bank):
    features, instances = build_video(tiny_bank, small_split(), VIDEO_CFG,
                                      rng_from(3))
    assert features.shape == (100, tiny_bank.feature_dim)
    assert 1 <= len(instances) <= 5
    for inst in instances:
        assert inst["category"] in (0, 1)      # local downstream ids
        assert 0.0 <= inst["start"] < inst["end"] <= 1.0
        assert inst["r"] == pytest.approx(inst["end"] - inst["start"])
    keys = [(inst["start"], inst["category"]) for inst in instances]
    assert keys == sorted(keys)


def test_build_video_merges_same_category(tiny_bank):
    for seed in range(12):
        _, instances = build_video(tiny_bank, small_split(), VIDEO_CFG,
                                   rng_from(seed))
        for cat in (0, 1):
            spans = [(i["start"], i["end"]) for i in instances if i["category"] == cat]
            for (_, e1), (s2, _) in zip(spans, spans[1:]):
                assert s2 > e1      # sorted and non-touching after the merge


def test_build_video_deterministic(tiny_bank):
    a = build_video(tiny_bank, small_split(), VIDEO_CFG, rng_from(9))
    b = build_video(tiny_bank, small_split(), VIDEO_CFG, rng_from(9))
    assert np.array_equal(a[0], b[0])
    assert a[1] == b[1]


def test_length_bands_reach_every_coverage_bucket(tiny_bank):
    seen = set()
    for seed in range(40):
        _, instances = build_video(tiny_bank, small_split(), VIDEO_CFG,
                                   rng_from(seed))
        seen |= {coverage_bucket(inst["r"]) for inst in instances}
    assert {"XS", "S", "M", "L"} <= seen


# -- video sets ---------------------------------------------------------------


@pytest.fixture(scope="module")
def video_set(tiny_bank, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("videos"))
    build_video_set(tiny_bank, small_split(), VIDEO_CFG, 5, out, seed=2,
                    name="train")
    return SampleDataset(out)


def test_video_set_manifest(video_set):
    assert video_set.manifest["kind"] == "untrimmed_videos"
    assert video_set.manifest["num_classes"] == 2
    assert video_set.manifest["source_categories"] == [4, 5]
    assert len(video_set) == 5
    assert video_set.label_of(3)["video_id"] == "train_00003"


def test_video_set_rewrites_identically(tiny_bank, tmp_path):
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    build_video_set(tiny_bank, small_split(), VIDEO_CFG, 3, out_a, seed=2, name="x")
    build_video_set(tiny_bank, small_split(), VIDEO_CFG, 3, out_b, seed=2, name="x")
    for name in ("samples.bin", "labels.jsonl"):
        with open(os.path.join(out_a, name), "rb") as fh:
            blob = fh.read()
        with open(os.path.join(out_b, name), "rb") as fh:
            assert fh.read() == blob


def test_split_name_changes_content(tiny_bank, tmp_path):
    out_a, out_b = str(tmp_path / "a"), str(tmp_path / "b")
    build_video_set(tiny_bank, small_split(), VIDEO_CFG, 3, out_a, seed=2, name="train")
    build_video_set(tiny_bank, small_split(), VIDEO_CFG, 3, out_b, seed=2, name="test")
    with open(os.path.join(out_a, "samples.bin"), "rb") as fh:
        blob = fh.read()
    with open(os.path.join(out_b, "samples.bin"), "rb") as fh:
        assert fh.read() != blob


def test_ground_truth_mirrors_labels(video_set):
    gts = ground_truth_of(video_set)
    per_label = sum(len(video_set.label_of(i)["instances"])
                    for i in range(len(video_set)))
    assert len(gts) == per_label
    first = video_set.label_of(0)["instances"][0]
    assert gts[0].video_id == "train_00000"
    assert gts[0].category == first["category"]
    assert gts[0].start == first["start"]


# -- prediction ----------------------------------------------------------------


def _model(num_classes=2, dim=16):
    cfg = ModelConfig(num_classes=num_classes, feature_dim=dim, hidden_dim=16,
                      num_queries=6, encoder_layers=1, decoder_layers=1,
                      heads=2, ffn_dim=32)
    return DetectionTransformer(cfg.validate(), rng_from(8))


def test_predict_one_detection_per_query(video_set):
    model = _model()
    preds = predict_dataset(model, video_set)
    assert len(preds) == len(video_set) * 6
    for det in preds:
        assert det.video_id.startswith("train_")
        assert det.category in (0, 1)
        assert 0.0 <= det.start < det.end <= 1.0
        assert 0.0 < det.score < 1.0


def test_predict_deterministic(video_set):
    model = _model()
    assert predict_dataset(model, video_set) == predict_dataset(model, video_set)


def test_evaluate_model_reports_grid(video_set):
    table = evaluate_model(_model(), video_set, EvalProtocol.thumos_style())
    assert set(table["per_threshold"]) == {0.3, 0.4, 0.5, 0.6, 0.7}
    assert 0.0 <= table["average"] <= 1.0


# -- directional smoke ---------------------------------------------------------


def test_directional_comparison_structure(tmp_path):
    cfg = DirectionalConfig(
        bank=BankConfig(num_categories=6, feature_dim=16, clips_per_category=4,
                        seed=0),
        num_downstream=2,
        video=VideoSetConfig(video_len=48, num_background=4, instances_range=(1, 3)),
        train_videos=6, test_videos=4, synth_len=48, synth_background=4,
        pretrain_epochs=1, pretrain_samples_per_epoch=16, pretrain_batch=8,
        finetune_epochs=1, finetune_batch=4, warmup_epochs=1,
        fractions=(1.0,), diversity_videos=2)
    report = run_directional_comparison(str(tmp_path), seed=0, cfg=cfg,
                                        protocol=EvalProtocol.thumos_style())
    assert set(report["maps"]) == {"ltp_1.0", "scratch_1.0"}
    assert set(report["encoder_diversity"]) == {"ltp", "scratch"}
    assert report["gaps"][1.0] == pytest.approx(
        report["maps"]["ltp_1.0"] - report["maps"]["scratch_1.0"])
    assert all(0.0 <= v <= 1.0 for v in report["maps"].values())
    assert all(v >= 0.0 for v in report["encoder_diversity"].values())
