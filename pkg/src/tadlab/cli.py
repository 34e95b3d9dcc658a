"""Command-line pipeline driver.

One subcommand per pipeline stage.  Every invocation resolves its config
(defaults <- config file <- --set overrides <- dedicated flags), writes a
RunManifest into the output directory before any other artifact, then runs.
Exit codes: 0 success, 2 usage or config problems, 3 runtime failure.

--threads caps BLAS pools via environment variables, which only works when
numpy is not yet imported; heavy modules are therefore imported inside the
command handlers, after the cap is in place.
"""

import argparse
import json
import os
import sys
import time

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _set_thread_env(threads):
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)


def default_config():
    return {
        "bank": {"num_categories": 40, "feature_dim": 64, "clips_per_category": 50,
                 "clip_len_range": [8, 16], "prototype_noise": 0.3,
                 "drift_amplitude": 0.2, "seed": 0},
        "synthesis": {"target_len": 192, "num_background": 16,
                      "target_count_range": [1, 6], "crop_fraction_range": [0.25, 1.0],
                      "max_instances": 12, "seed": 0},
        "model": {"profile": "desk"},
        "pretrain": {"phase": "pretrain", "epochs": 15, "batch_size": 32,
                     "samples_per_epoch": 2000, "base_lr": 1e-4,
                     "schedule": "cosine_warmup", "warmup_epochs": 5,
                     "milestones": [80, 100], "factor": 0.1, "weight_decay": 1e-4,
                     "grad_clip": 0.1, "condition_prob": 0.5, "seed": 0,
                     "train_fraction": 1.0},
        "finetune": {"phase": "finetune", "epochs": 20, "batch_size": 16,
                     "samples_per_epoch": 0, "base_lr": 1e-4,
                     "schedule": "cosine_warmup", "warmup_epochs": 5,
                     "milestones": [80, 100], "factor": 0.1, "weight_decay": 1e-4,
                     "grad_clip": 0.1, "condition_prob": 0.0, "seed": 0,
                     "train_fraction": 1.0},
        "cost": {"lambda_cls": 2.0, "lambda_l1": 5.0, "lambda_iou": 2.0},
        "data": {"count": 2000, "condition_prob": 0.5, "allow_joint": False},
    }


def _deep_merge(base, override):
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_merge(base[key], value)
        else:
            base[key] = value
    return base


def resolve_config(args):
    from .errors import ConfigError

    config = default_config()
    path = getattr(args, "config", None)
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            try:
                user = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(user, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        _deep_merge(config, user)
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = config
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ConfigError(f"--set path {dotted!r} does not exist")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"--set key {dotted!r} does not exist")
        try:
            node[keys[-1]] = json.loads(raw)
        except json.JSONDecodeError:
            node[keys[-1]] = raw
    if getattr(args, "seed", None) is not None:
        for section in ("bank", "synthesis", "pretrain", "finetune"):
            config[section]["seed"] = args.seed
    if getattr(args, "train_fraction", None) is not None:
        config["finetune"]["train_fraction"] = args.train_fraction
    if getattr(args, "profile", None) is not None:
        config["model"]["profile"] = args.profile
    return config


def write_manifest(out_dir, command, argv, config, inputs, outputs):
    """Atomically persist everything needed to reproduce this run."""
    from . import __version__

    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "wall_clock": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = os.path.join(out_dir, "run_manifest.json")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _tuplize(mapping, *keys):
    out = dict(mapping)
    for key in keys:
        if key in out and isinstance(out[key], list):
            out[key] = tuple(out[key])
    return out


def _bank_config(config):
    from .featbank import BankConfig
    return BankConfig(**_tuplize(config["bank"], "clip_len_range")).validate()


def _synth_params(config):
    from .synthesis import SynthesisParams
    return SynthesisParams(**_tuplize(config["synthesis"], "target_count_range",
                                      "crop_fraction_range")).validate()


def _train_config(section):
    from .trainer import TrainConfig
    return TrainConfig(**_tuplize(section, "milestones")).validate()


def _cost_config(config):
    from .matching import MatchCostConfig
    return MatchCostConfig(**config["cost"]).validate()


def _model_for_checkpoint(checkpoint_dir):
    """Rebuild a model exactly as a checkpoint describes it."""
    from .model import DetectionTransformer, ModelConfig, load_archive, load_into_model
    from .seeding import rng_from

    arrays, extra = load_archive(checkpoint_dir)
    cfg = ModelConfig(**extra["model_config"]).validate()
    model = DetectionTransformer(cfg, rng_from(0))
    load_into_model(model, arrays)
    return model, extra


# -- command handlers ---------------------------------------------------------


def cmd_gen_bank(args, argv):
    config = resolve_config(args)
    from .featbank import generate_bank, save_bank

    cfg = _bank_config(config)
    write_manifest(args.out, "gen-bank", argv, config, inputs={},
                   outputs={"bank": args.out})
    save_bank(generate_bank(cfg), args.out)
    print(f"bank written to {args.out}")
    return 0


def cmd_gen_data(args, argv):
    config = resolve_config(args)
    from .datasets import generate_dataset
    from .featbank import load_bank

    bank = load_bank(args.bank)
    params = _synth_params(config)
    data_cfg = config["data"]
    write_manifest(args.out, "gen-data", argv, config, inputs={"bank": args.bank},
                   outputs={"dataset": args.out})
    manifest = generate_dataset(bank, params, int(data_cfg["count"]), args.out,
                                float(data_cfg["condition_prob"]),
                                allow_joint=bool(data_cfg["allow_joint"]),
                                threads=args.threads)
    print(f"dataset of {manifest['count']} samples written to {args.out}")
    return 0


def cmd_pretrain(args, argv):
    config = resolve_config(args)
    from .featbank import load_bank
    from .model import ModelConfig
    from .trainer import pretrain

    bank = load_bank(args.bank)
    params = _synth_params(config)
    train_cfg = _train_config(config["pretrain"])
    model_cfg = ModelConfig.for_profile(config["model"]["profile"], num_classes=1,
                                        feature_dim=bank.feature_dim)
    categories = None
    if args.categories:
        categories = sorted(int(c) for c in args.categories.split(","))
    write_manifest(args.out, "pretrain", argv, config,
                   inputs={"bank": args.bank, "categories": categories},
                   outputs={"checkpoint": os.path.join(args.out, "checkpoint"),
                            "log": os.path.join(args.out, "train_log.jsonl")})
    result = pretrain(bank, params, model_cfg, train_cfg, args.out,
                      categories=categories, cost_cfg=_cost_config(config),
                      resume=args.resume, stop_after_epoch=args.stop_after_epoch)
    print(f"pretrain done: {result.steps_run} steps, final loss {result.final_loss:.4f}")
    return 0


def cmd_finetune(args, argv):
    config = resolve_config(args)
    from .datasets import SampleDataset
    from .errors import ConfigError
    from .model import ModelConfig
    from .trainer import finetune

    if args.scratch == (args.checkpoint is not None):
        raise ConfigError("pass exactly one of --checkpoint DIR or --scratch")
    dataset = SampleDataset(args.data)
    num_classes = dataset.manifest.get("num_classes")
    if num_classes is None:
        raise ConfigError(f"{args.data} manifest lacks num_classes; not a video set")
    train_cfg = _train_config(config["finetune"])
    model_cfg = ModelConfig.for_profile(config["model"]["profile"],
                                        num_classes=int(num_classes),
                                        feature_dim=int(dataset.manifest["feature_dim"]))
    write_manifest(args.out, "finetune", argv, config,
                   inputs={"data": args.data, "checkpoint": args.checkpoint,
                           "scratch": args.scratch,
                           "train_fraction": train_cfg.train_fraction},
                   outputs={"checkpoint": os.path.join(args.out, "checkpoint"),
                            "log": os.path.join(args.out, "train_log.jsonl")})
    result = finetune(dataset, model_cfg, train_cfg, args.out,
                      checkpoint_dir=args.checkpoint, cost_cfg=_cost_config(config),
                      resume=args.resume, stop_after_epoch=args.stop_after_epoch)
    print(f"finetune done: {result.steps_run} steps, final loss {result.final_loss:.4f}")
    return 0


def cmd_eval(args, argv):
    config = resolve_config(args)
    from .benchmark import ground_truth_of, predict_dataset
    from .datasets import SampleDataset
    from .evalkit import (EvalProtocol, detad_sensitivity, map_over_thresholds,
                          save_detections, write_report)

    model, extra = _model_for_checkpoint(args.checkpoint)
    dataset = SampleDataset(args.data)
    protocol = EvalProtocol.by_name(args.protocol)
    write_manifest(args.out, "eval", argv, config,
                   inputs={"checkpoint": args.checkpoint, "data": args.data,
                           "protocol": args.protocol},
                   outputs={"map_report": os.path.join(args.out, "map_report.csv"),
                            "sensitivity_report": os.path.join(args.out,
                                                               "sensitivity_report.csv"),
                            "predictions": os.path.join(args.out, "predictions.jsonl")})
    preds = predict_dataset(model, dataset)
    gts = ground_truth_of(dataset)
    save_detections(os.path.join(args.out, "predictions.jsonl"), preds)

    table = map_over_thresholds(preds, gts, protocol)
    meta = {"protocol": protocol.name, "checkpoint": args.checkpoint, "data": args.data,
            "train_fraction": extra.get("train_config", {}).get("train_fraction"),
            "warm_start": extra.get("warm_start")}
    rows = [{"threshold": f"{t:.2f}", "map": v} for t, v in
            sorted(table["per_threshold"].items())]
    rows.append({"threshold": "average", "map": table["average"]})
    write_report(os.path.join(args.out, "map_report"), rows, meta=meta)

    sens = detad_sensitivity(preds, gts, protocol)
    sens_rows = [{"axis": axis, "bucket": bucket, "avg_map": value}
                 for axis, buckets in sorted(sens.items())
                 for bucket, value in buckets.items()]
    write_report(os.path.join(args.out, "sensitivity_report"), sens_rows, meta=meta)
    print(f"average mAP {table['average']:.4f} over {len(protocol.thresholds)} thresholds")
    return 0


def cmd_analyze(args, argv):
    config = resolve_config(args)
    from .analysis import profile_from_captures, save_attention_dump
    from .autodiff import no_grad
    from .datasets import SampleDataset
    from .evalkit import write_report

    model, _ = _model_for_checkpoint(args.checkpoint)
    dataset = SampleDataset(args.data)
    write_manifest(args.out, "analyze", argv, config,
                   inputs={"checkpoint": args.checkpoint, "data": args.data},
                   outputs={"diversity_report": os.path.join(args.out,
                                                             "diversity_report.csv"),
                            "attention_dump": os.path.join(args.out, "attention")})
    captures = []
    dump_entries = []
    limit = len(dataset) if args.limit is None else min(args.limit, len(dataset))
    with no_grad():
        for i in range(limit):
            result = model.forward(dataset.features_of(i), capture=True)
            captures.append(result)
            video_id = dataset.label_of(i).get("video_id", f"sample_{i:05d}")
            for component, maps in (("encoder_self", result.encoder_maps),
                                    ("decoder_self", result.decoder_self_maps),
                                    ("decoder_cross", result.decoder_cross_maps)):
                for layer, attn in enumerate(maps):
                    dump_entries.append((video_id, component, layer, attn))
    report = profile_from_captures(captures)
    write_report(os.path.join(args.out, "diversity_report"), report.rows(),
                 meta={"checkpoint": args.checkpoint, "data": args.data,
                       "videos": limit})
    save_attention_dump(os.path.join(args.out, "attention"), dump_entries)
    print(f"diversity over {limit} videos: "
          + ", ".join(f"{c}[{l}]={v:.3f}" for (c, l), v in sorted(report.means.items())))
    return 0


def cmd_report(args, argv):
    from .errors import ConfigError
    from .evalkit import write_report

    runs = []
    for run_dir in args.runs:
        path = os.path.join(run_dir, "map_report.json")
        if not os.path.exists(path):
            raise ConfigError(f"{run_dir} has no map_report.json (run `eval` first)")
        with open(path, "r", encoding="utf-8") as fh:
            runs.append((os.path.basename(os.path.normpath(run_dir)), json.load(fh)))
    protocols = {meta["meta"].get("protocol") for _, meta in runs}
    if len(protocols) > 1:
        raise ConfigError(f"cannot merge runs with different protocols: {sorted(protocols)}")
    rows = []
    for run_id, payload in runs:
        meta = payload["meta"]
        average = next(row["map"] for row in payload["rows"]
                       if row["threshold"] == "average")
        rows.append({"run": run_id,
                     "train_fraction": meta.get("train_fraction"),
                     "warm_start": meta.get("warm_start"),
                     "average_map": average})
    rows.sort(key=lambda r: (r["train_fraction"] is None, r["train_fraction"], r["run"]))
    write_manifest(args.out, "report", argv, {"runs": list(args.runs)},
                   inputs={"runs": list(args.runs)},
                   outputs={"comparison": os.path.join(args.out, "comparison.csv")})
    write_report(os.path.join(args.out, "comparison"), rows,
                 meta={"protocol": protocols.pop(), "runs": len(rows)})
    print(f"merged {len(rows)} runs into {args.out}/comparison.csv")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="tadlab",
                                     description="synthetic temporal action "
                                                 "detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override every section seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--threads", type=int, default=1,
                       help="worker and BLAS thread cap (1 = bit-exact reference)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (JSON-parsed value)")
        p.add_argument("--profile", choices=("desk", "paper"), help="model size profile")

    p = sub.add_parser("gen-bank", help="generate a trimmed-clip feature bank")
    common(p)
    p.set_defaults(handler=cmd_gen_bank)

    p = sub.add_parser("gen-data", help="synthesize a labeled sample set")
    common(p)
    p.add_argument("--bank", required=True, help="bank directory")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("pretrain", help="class-agnostic pre-training")
    common(p)
    p.add_argument("--bank", required=True, help="bank directory")
    p.add_argument("--categories", help="comma-separated bank category subset")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint")
    p.add_argument("--stop-after-epoch", type=int, help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune on a downstream video set")
    common(p)
    p.add_argument("--data", required=True, help="video set directory")
    p.add_argument("--checkpoint", help="pre-training checkpoint directory")
    p.add_argument("--scratch", action="store_true", help="train from scratch")
    p.add_argument("--train-fraction", type=float, dest="train_fraction",
                   help="fraction of training videos to use")
    p.add_argument("--resume", action="store_true", help="continue from checkpoint")
    p.add_argument("--stop-after-epoch", type=int, help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_finetune)

    p = sub.add_parser("eval", help="mAP and sensitivity reports")
    common(p)
    p.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint directory")
    p.add_argument("--data", required=True, help="video set directory")
    p.add_argument("--protocol", default="anet_style",
                   choices=("anet_style", "thumos_style"))
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("analyze", help="attention diversity report")
    common(p)
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="video set directory")
    p.add_argument("--limit", type=int, help="cap the number of videos profiled")
    p.set_defaults(handler=cmd_analyze)

    p = sub.add_parser("report", help="merge eval runs into one comparison table")
    common(p)
    p.add_argument("runs", nargs="+", help="eval output directories")
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv=None):
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    _set_thread_env(args.threads)

    from .errors import (CheckpointError, ConfigError, FormatError, LookupFailure,
                         TadlabError, UsageError)

    try:
        return args.handler(args, argv)
    except (ConfigError, UsageError, FormatError, CheckpointError, LookupFailure,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TadlabError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
