"""`ct` command line: synth, train, segment, evaluate, benchmark.

Every subcommand takes --config <json> (defaults apply when omitted)
plus targeted overrides. Exit codes: 0 success, 2 config error, 3
runtime failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import read_image_png, read_mask_png, read_tensor, write_mask_png
from .flowfollow import segment
from .harness import (config_from_dict, config_to_dict, export_scenes,
                      make_datasets, predict_features, run_ablation,
                      run_benchmark, run_kshot_sweep, save_overlay,
                      write_csv, _ap_key, _metric_fields)
from .metrics import aji, average_precision, object_f1, pixel_f1
from .model import load_checkpoint, save_checkpoint
from .trainer import adapt, build_crop_pool, extract_shots, finetune, pretrain


class ConfigError(ValueError):
    pass


def _load_config(args):
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from e
    try:
        cfg = config_from_dict(data)
        if getattr(args, "seed", None) is not None:
            d = config_to_dict(cfg)
            d["seeds"] = [args.seed]
            cfg = config_from_dict(d)
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid config: {e}") from e
    return cfg


def build_parser():
    p = argparse.ArgumentParser(prog="ct", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="override the seed list")
        sp.add_argument("--out", required=True, help="output directory/file")

    sp = sub.add_parser("synth", help="generate synthetic datasets")
    common(sp)

    sp = sub.add_parser("pretrain", help="pretrain on source scenes")
    common(sp)

    sp = sub.add_parser("adapt", help="K-shot adaptation of a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("finetune", help="fine-tune a checkpoint on shots")
    common(sp)
    sp.add_argument("--checkpoint", required=True)

    sp = sub.add_parser("segment", help="segment an image or feature map")
    sp.add_argument("--config", help="experiment config JSON")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out", required=True, help="output mask PNG")
    sp.add_argument("--checkpoint", help="model checkpoint directory")
    sp.add_argument("--image", help="input image PNG")
    sp.add_argument("--features", help="input feature-map CTT1")
    sp.add_argument("--overlay", help="optional overlay PNG path")

    sp = sub.add_parser("eval", help="score prediction masks against gt")
    sp.add_argument("--config", help="experiment config JSON")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--pred", required=True, help="directory of predicted masks")
    sp.add_argument("--gt", required=True, help="directory of ground-truth masks")
    sp.add_argument("--out", required=True, help="output CSV")

    sp = sub.add_parser("benchmark", help="unadapted-vs-adapted benchmark")
    common(sp)

    sp = sub.add_parser("ablation", help="loss ablation study")
    common(sp)

    sp = sub.add_parser("ksweep", help="K-shot sweep")
    common(sp)
    sp.add_argument("--k", default="1,2,3,5,10",
                    help="comma-separated shot counts")
    return p


def _cmd_synth(cfg, args):
    source, target_train, target_test = make_datasets(cfg)
    out = Path(args.out)
    export_scenes(source, out / "source", "source")
    export_scenes(target_train, out / "target_train", "target_train",
                  shift=cfg.shift)
    export_scenes(target_test, out / "target_test", "target_test",
                  shift=cfg.shift)


def _cmd_pretrain(cfg, args):
    source, _, _ = make_datasets(cfg)
    tcfg = cfg.train.reseeded(cfg.seeds[0])
    params, rows = pretrain(source, tcfg)
    save_checkpoint(args.out, params, meta={"stage": "pretrain",
                                            "seed": cfg.seeds[0]})
    write_csv(Path(args.out) / "pretrain_log.csv",
              ["epoch", "lr", "loss_is"], rows)


def _cmd_adapt(cfg, args):
    source, target_train, _ = make_datasets(cfg)
    tcfg = cfg.train.reseeded(cfg.seeds[0])
    params, _ = load_checkpoint(args.checkpoint)
    pool = build_crop_pool(source, tcfg)
    shots = extract_shots(target_train, tcfg)
    params, rows = adapt(params, pool, shots, tcfg)
    save_checkpoint(args.out, params, meta={"stage": "adapt",
                                            "seed": cfg.seeds[0]})
    write_csv(Path(args.out) / "adapt_log.csv",
              ["step", "epoch", "lr", "loss_is", "loss_cf", "loss_cm",
               "total"], rows)


def _cmd_finetune(cfg, args):
    _, target_train, _ = make_datasets(cfg)
    tcfg = cfg.train.reseeded(cfg.seeds[0])
    params, _ = load_checkpoint(args.checkpoint)
    shots = extract_shots(target_train, tcfg)
    params, rows = finetune(params, shots, tcfg)
    save_checkpoint(args.out, params, meta={"stage": "finetune",
                                            "seed": cfg.seeds[0]})
    write_csv(Path(args.out) / "finetune_log.csv",
              ["step", "epoch", "lr", "loss_is"], rows)


def _cmd_segment(cfg, args):
    if args.features:
        feats = read_tensor(args.features).astype(np.float32)
    elif args.image and args.checkpoint:
        img = read_image_png(args.image)
        params, _ = load_checkpoint(args.checkpoint)
        feats = predict_features(params, img, cfg.train.patch,
                                 cfg.eval_overlap)
    else:
        raise ConfigError("segment needs --features or --image + --checkpoint")
    mask = segment(feats, cfg.follow)
    write_mask_png(args.out, mask)
    if args.overlay:
        if args.image:
            img = read_image_png(args.image)
        else:
            img = np.clip(feats[..., 2], 0.0, 1.0)
        save_overlay(args.overlay, img, mask)


def _cmd_eval(cfg, args):
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    if not names:
        raise ConfigError(f"no PNG masks found in {pred_dir}")
    rows = []
    for name in names:
        gt_path = gt_dir / name
        if not gt_path.exists():
            raise ConfigError(f"missing ground truth for {name}")
        pred = read_mask_png(pred_dir / name).astype(np.int32)
        gt = read_mask_png(gt_path).astype(np.int32)
        row = {"image": name, "aji": aji(pred, gt),
               "pixel_f1": pixel_f1(pred, gt),
               "object_f1": object_f1(pred, gt)}
        aps = average_precision(pred, gt, cfg.iou_thresholds)
        for t, ap in zip(cfg.iou_thresholds, aps):
            row[_ap_key(t)] = ap
        rows.append(row)
    agg = {"image": "aggregate"}
    for key in rows[0]:
        if key != "image":
            agg[key] = float(np.mean([r[key] for r in rows]))
    rows.append(agg)
    write_csv(args.out, ["image"] + _metric_fields(cfg), rows)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    try:
        if args.command == "synth":
            _cmd_synth(cfg, args)
        elif args.command == "pretrain":
            _cmd_pretrain(cfg, args)
        elif args.command == "adapt":
            _cmd_adapt(cfg, args)
        elif args.command == "finetune":
            _cmd_finetune(cfg, args)
        elif args.command == "segment":
            _cmd_segment(cfg, args)
        elif args.command == "eval":
            _cmd_eval(cfg, args)
        elif args.command == "benchmark":
            run_benchmark(cfg, args.out)
        elif args.command == "ablation":
            run_ablation(cfg, args.out)
        elif args.command == "ksweep":
            ks = [int(v) for v in str(args.k).split(",") if v]
            run_kshot_sweep(cfg, ks, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
