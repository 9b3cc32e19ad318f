"""End-to-end experiment orchestration and reporting.

The pipeline: generate a sharp source dataset and a covariate-shifted
target dataset, pretrain on source, extract K annotated target cells,
adapt + fine-tune, and evaluate instance metrics on a held-out target
split. Reports are deterministic CSVs (byte-identical across repeated
runs with the same config); wall times go to a separate timings file.
"""

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from ._kernels import backend_name
from .core import cut_tiles, stitch, tile_image, write_image_png, write_mask_png
from .flowfollow import FollowConfig, segment
from .losses import ContrastiveConfig
from .metrics import aji, average_precision, object_f1, pixel_f1
from .model import forward, load_checkpoint, save_checkpoint
from .synthgen import SHIFT_PRESETS, SceneConfig, ShiftParams, apply_domain_shift, generate_scene
from .trainer import TrainConfig, adapt, build_crop_pool, extract_shot, finetune, pick_shot_cells, pretrain

DEFAULT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(9))

_SPLIT_SOURCE, _SPLIT_TRAIN, _SPLIT_TRAIN_SHIFT, _SPLIT_TEST, _SPLIT_TEST_SHIFT = range(5)


class StageError(RuntimeError):
    """A pipeline stage failed; partial outputs are left in place."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    shift: ShiftParams = field(
        default_factory=lambda: SHIFT_PRESETS["focus_shift"])
    shift_name: str = "focus_shift"
    train: TrainConfig = field(default_factory=TrainConfig)
    follow: FollowConfig = field(default_factory=FollowConfig)
    seeds: tuple = (0, 1, 2)
    source_scenes: int = 12
    target_train_scenes: int = 3
    target_test_scenes: int = 5
    eval_overlap: int = 84
    iou_thresholds: tuple = DEFAULT_THRESHOLDS

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one seed")


def config_to_dict(cfg):
    d = asdict(cfg)
    return d


def config_from_dict(d):
    d = dict(d)
    scene = SceneConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in d.get("scene", {}).items()})
    shift_raw = d.get("shift", d.get("shift_name", "focus_shift"))
    if isinstance(shift_raw, str):
        name = shift_raw
        shift = SHIFT_PRESETS[shift_raw]
    else:
        name = d.get("shift_name", "custom")
        shift = ShiftParams(**shift_raw)
    tr = dict(d.get("train", {}))
    contr = tr.pop("contrastive", {})
    train = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in tr.items()},
                        contrastive=ContrastiveConfig(**contr))
    follow = FollowConfig(**d.get("follow", {}))
    kwargs = {}
    for key in ("source_scenes", "target_train_scenes", "target_test_scenes",
                "eval_overlap"):
        if key in d:
            kwargs[key] = d[key]
    if "seeds" in d:
        kwargs["seeds"] = tuple(d["seeds"])
    if "iou_thresholds" in d:
        kwargs["iou_thresholds"] = tuple(d["iou_thresholds"])
    return ExperimentConfig(scene=scene, shift=shift, shift_name=name,
                            train=train, follow=follow, **kwargs)


def config_hash(cfg):
    payload = json.dumps(config_to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


# ---------------------------------------------------------------------------
# data


def _scene_seed(cfg, split, index):
    ss = np.random.SeedSequence((cfg.scene.seed, split, index))
    return int(ss.generate_state(1)[0])


def make_datasets(cfg):
    """Generate (source, target_train, target_test) scene lists.

    Source scenes stay sharp; both target splits receive the configured
    shift. Scene content is fixed by the scene seed, independent of the
    per-run training seeds.
    """
    source = [generate_scene(cfg.scene.reseeded(_scene_seed(cfg, _SPLIT_SOURCE, i)))
              for i in range(cfg.source_scenes)]

    def shifted(split, shift_split, count):
        out = []
        for i in range(count):
            img, mask = generate_scene(
                cfg.scene.reseeded(_scene_seed(cfg, split, i)))
            img = apply_domain_shift(img, cfg.shift,
                                     seed=_scene_seed(cfg, shift_split, i))
            out.append((img, mask))
        return out

    target_train = shifted(_SPLIT_TRAIN, _SPLIT_TRAIN_SHIFT,
                           cfg.target_train_scenes)
    target_test = shifted(_SPLIT_TEST, _SPLIT_TEST_SHIFT,
                          cfg.target_test_scenes)
    return source, target_train, target_test


# ---------------------------------------------------------------------------
# inference + evaluation


def predict_features(params, img, patch, overlap):
    """Tiled forward pass stitched back to image size."""
    layout = tile_image(img, patch, overlap)
    tiles = cut_tiles(img, layout)
    feats = []
    for i in range(0, len(tiles), 4):
        z, _ = forward(params, np.stack(tiles[i:i + 4]), want_cache=False)
        feats.extend(np.asarray(z))
    return stitch(feats, layout)


def predict_mask(params, img, cfg):
    feats = predict_features(params, img, cfg.train.patch, cfg.eval_overlap)
    return segment(feats, cfg.follow)


def evaluate_params(params, scenes, cfg):
    """Aggregate metrics of a model over a scene list.

    Returns (aggregate row, per-image rows): AP per IoU threshold
    (dataset AP = mean of per-image AP), AJI, pixel F1, object F1.
    """
    per_image = []
    for idx, (img, gt) in enumerate(scenes):
        pred = predict_mask(params, img, cfg)
        aps = average_precision(pred, gt, cfg.iou_thresholds)
        row = {"image": idx, "aji": aji(pred, gt),
               "pixel_f1": pixel_f1(pred, gt), "object_f1": object_f1(pred, gt)}
        for t, ap in zip(cfg.iou_thresholds, aps):
            row[_ap_key(t)] = ap
        per_image.append(row)
    agg = {}
    for key in per_image[0]:
        if key != "image":
            agg[key] = float(np.mean([r[key] for r in per_image]))
    return agg, per_image


def _ap_key(t):
    return f"ap{int(round(t * 100)):03d}"


# ---------------------------------------------------------------------------
# reporting


def write_csv(path, fieldnames, rows):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})


def _metric_fields(cfg):
    return ([_ap_key(t) for t in cfg.iou_thresholds]
            + ["aji", "pixel_f1", "object_f1"])


def render_overlay(img, mask):
    """RGB render: grayscale image with colored instance boundaries."""
    g = np.clip(np.asarray(img) * 255.0, 0, 255).astype(np.uint8)
    rgb = np.stack([g, g, g], axis=2)
    m = np.asarray(mask)
    boundary = np.zeros(m.shape, bool)
    for shift_ax, d in ((0, 1), (0, -1), (1, 1), (1, -1)):
        rolled = np.roll(m, d, axis=shift_ax)
        boundary |= (m != rolled)
    boundary &= m > 0
    ids = m[boundary]
    hues = (ids.astype(np.float64) * 0.61803398875) % 1.0
    rgb[boundary] = _hsv_to_rgb(hues)
    return rgb


def _hsv_to_rgb(h, s=0.95, v=1.0):
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    table = np.stack([
        np.stack([np.full_like(f, v), t, np.full_like(f, p)], 1),
        np.stack([q, np.full_like(f, v), np.full_like(f, p)], 1),
        np.stack([np.full_like(f, p), np.full_like(f, v), t], 1),
        np.stack([np.full_like(f, p), q, np.full_like(f, v)], 1),
        np.stack([t, np.full_like(f, p), np.full_like(f, v)], 1),
        np.stack([np.full_like(f, v), np.full_like(f, p), q], 1),
    ])
    out = table[i, np.arange(i.size)]
    return np.clip(np.round(out * 255), 0, 255).astype(np.uint8)


def save_overlay(path, img, mask):
    Image.fromarray(render_overlay(img, mask), mode="RGB").save(path)


def write_manifest(out, cfg):
    manifest = {"config": config_to_dict(cfg), "config_hash": config_hash(cfg),
                "seeds": list(cfg.seeds), "version": __version__,
                "kernel_backend": backend_name()}
    with open(Path(out) / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# variant engine


def _variant_train_cfg(cfg, seed, variant):
    tcfg = cfg.train.reseeded(seed)
    over = {}
    if variant.get("flow_weight") is not None:
        over["flow_weight"] = variant["flow_weight"]
    if variant.get("mask_weight") is not None:
        over["mask_weight"] = variant["mask_weight"]
    if over:
        tcfg = replace(tcfg, contrastive=replace(tcfg.contrastive, **over))
    if variant.get("k") is not None:
        tcfg = replace(tcfg, shots=variant["k"])
    return tcfg


def _pretrained(cfg, seed, source, ckpt_root, timings):
    """Pretrain once per seed; later calls in the same out dir reload."""
    path = Path(ckpt_root) / f"pretrain_seed{seed}"
    tcfg = cfg.train.reseeded(seed)
    if (path / "index.json").exists():
        params, meta = load_checkpoint(path)
        if meta.get("config_hash") != config_hash(cfg):
            raise StageError("pretrain", f"checkpoint {path} belongs to a "
                                         "different config")
        return params
    t0 = time.perf_counter()
    params, rows = pretrain(source, tcfg)
    timings.append({"seed": seed, "variant": "-", "stage": "pretrain",
                    "seconds": round(time.perf_counter() - t0, 3)})
    save_checkpoint(path, params, meta={"config_hash": config_hash(cfg),
                                        "seed": seed, "stage": "pretrain"})
    write_csv(path / "pretrain_log.csv", ["epoch", "lr", "loss_is"], rows)
    return params


def _adapted(cfg, seed, variant, base_params, pool, shots, ckpt_root,
             timings):
    path = Path(ckpt_root) / f"{variant['name']}_seed{seed}"
    if (path / "index.json").exists():
        params, meta = load_checkpoint(path)
        if meta.get("config_hash") != config_hash(cfg):
            raise StageError("adapt", f"checkpoint {path} belongs to a "
                                      "different config")
        return params
    tcfg = _variant_train_cfg(cfg, seed, variant)
    k = tcfg.shots
    t0 = time.perf_counter()
    params, adapt_rows = adapt(base_params, pool, shots[:k], tcfg)
    adapt_secs = time.perf_counter() - t0
    t1 = time.perf_counter()
    params, ft_rows = finetune(params, shots[:k], tcfg)
    ft_secs = time.perf_counter() - t1
    timings.append({"seed": seed, "variant": variant["name"],
                    "stage": "adapt", "seconds": round(adapt_secs, 3)})
    timings.append({"seed": seed, "variant": variant["name"],
                    "stage": "finetune", "seconds": round(ft_secs, 3)})
    save_checkpoint(path, params, meta={"config_hash": config_hash(cfg),
                                        "seed": seed,
                                        "variant": variant["name"]})
    write_csv(path / "adapt_log.csv",
              ["step", "epoch", "lr", "loss_is", "loss_cf", "loss_cm",
               "total"], adapt_rows)
    write_csv(path / "finetune_log.csv", ["step", "epoch", "lr", "loss_is"],
              ft_rows)
    return params


def _run_variants(cfg, variants, out):
    """Shared engine: pretrain/adapt/evaluate every (seed, variant).

    Returns (report rows, timing rows). Checkpoints are cached under
    out/checkpoints keyed by seed and variant name, so entry points
    called on the same directory share work.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_root = out / "checkpoints"
    overlays = out / "overlays"
    overlays.mkdir(exist_ok=True)
    try:
        source, target_train, target_test = make_datasets(cfg)
    except Exception as e:  # noqa: BLE001 - stage tagging
        raise StageError("synth", e) from e
    max_k = max([v.get("k") or cfg.train.shots for v in variants
                 if v["name"] != "unadapted"], default=cfg.train.shots)
    rows = []
    timings = []
    for seed in cfg.seeds:
        tcfg = cfg.train.reseeded(seed)
        try:
            base = _pretrained(cfg, seed, source, ckpt_root, timings)
        except StageError:
            raise
        except Exception as e:  # noqa: BLE001
            raise StageError("pretrain", e) from e
        pool = shots = None
        for variant in variants:
            name = variant["name"]
            if name == "unadapted":
                params = base
            else:
                if pool is None:
                    pool = build_crop_pool(source, tcfg)
                    shots = [extract_shot(target_train[si][0],
                                          target_train[si][1], cid, tcfg)
                             for si, cid in pick_shot_cells(target_train,
                                                            max_k)]
                try:
                    params = _adapted(cfg, seed, variant, base, pool, shots,
                                      ckpt_root, timings)
                except StageError:
                    raise
                except Exception as e:  # noqa: BLE001
                    raise StageError("adapt", e) from e
            try:
                agg, _ = evaluate_params(params, target_test, cfg)
            except Exception as e:  # noqa: BLE001
                raise StageError("eval", e) from e
            rows.append({"seed": seed, "variant": name, **agg})
            img0, _gt0 = target_test[0]
            pred0 = predict_mask(params, img0, cfg)
            save_overlay(overlays / f"{name}_seed{seed}.png", img0, pred0)
    return rows, timings


def _write_reports(cfg, out, rows, timings, report_name):
    out = Path(out)
    fields = ["seed", "variant"] + _metric_fields(cfg)
    write_csv(out / report_name, fields, rows)
    # AP-vs-IoU curve, median over seeds per variant
    curve = []
    variants = []
    for r in rows:
        if r["variant"] not in variants:
            variants.append(r["variant"])
    for name in variants:
        for t in cfg.iou_thresholds:
            vals = [r[_ap_key(t)] for r in rows if r["variant"] == name]
            curve.append({"variant": name, "iou": t,
                          "ap": float(np.median(vals))})
    write_csv(out / "ap_curve.csv", ["variant", "iou", "ap"], curve)
    write_csv(out / "timings.csv", ["seed", "variant", "stage", "seconds"],
              timings)
    write_manifest(out, cfg)


def run_benchmark(cfg, out=None):
    """Unadapted vs adapted on the shifted target; writes report.csv,
    ap_curve.csv, overlay PNGs, manifest.json."""
    out = Path(out or "runs/benchmark")
    variants = [{"name": "unadapted"}, {"name": "adapted"}]
    rows, timings = _run_variants(cfg, variants, out)
    _write_reports(cfg, out, rows, timings, "report.csv")
    return rows


ABLATION_VARIANTS = (
    {"name": "full"},
    {"name": "no_flow_loss", "flow_weight": 0.0},
    {"name": "no_mask_loss", "mask_weight": 0.0},
    {"name": "no_adapt_losses", "flow_weight": 0.0, "mask_weight": 0.0},
    {"name": "unadapted"},
)


def run_ablation(cfg, out=None):
    """Loss ablation on identical seeds and shots; writes report.csv
    with one row per (seed, variant)."""
    out = Path(out or "runs/ablation")
    rows, timings = _run_variants(cfg, list(ABLATION_VARIANTS), out)
    _write_reports(cfg, out, rows, timings, "report.csv")
    return rows


def run_kshot_sweep(cfg, k_values, out=None):
    """Adapt per K with nested shot sets sharing one pretrained
    checkpoint; writes ap_vs_k.csv."""
    if not k_values:
        raise ValueError("k_values must be nonempty")
    out = Path(out or "runs/ksweep")
    variants = [{"name": f"k{k}", "k": int(k)} for k in sorted(k_values)]
    rows, timings = _run_variants(cfg, variants, out)
    _write_reports(cfg, out, rows, timings, "report.csv")
    curve = []
    for k in sorted(k_values):
        for t in cfg.iou_thresholds:
            vals = [r[_ap_key(t)] for r in rows if r["variant"] == f"k{k}"]
            curve.append({"k": int(k), "iou": t,
                          "ap": float(np.median(vals))})
    write_csv(Path(out) / "ap_vs_k.csv", ["k", "iou", "ap"], curve)
    return rows


def export_scenes(scenes, out_dir, prefix, shift=None, seeds=None):
    """Persist scenes as PNG pairs + flow-target CTT1 + manifest."""
    from .core import write_tensor
    from .synthgen import compute_flow_targets

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (img, mask) in enumerate(scenes):
        stem = f"{prefix}_{i:03d}"
        write_image_png(out / f"{stem}_image.png", img)
        write_mask_png(out / f"{stem}_mask.png", mask)
        tgt = compute_flow_targets(mask)
        z = np.stack([tgt.flow_x, tgt.flow_y,
                      tgt.fg.astype(np.float32)], axis=2)
        write_tensor(out / f"{stem}_labels.ctt", z)
        entries.append({"stem": stem,
                        "seed": None if seeds is None else int(seeds[i])})
    manifest = {"prefix": prefix, "count": len(scenes),
                "shift": None if shift is None else asdict(shift),
                "entries": entries}
    with open(out / f"{prefix}_manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
