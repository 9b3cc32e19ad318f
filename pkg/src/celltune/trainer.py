"""Training stages: source pretraining, K-shot adaptation, fine-tuning.

All randomness is derived from (master seed, purpose, epoch, step), so
runs are bit-reproducible. During optimization the combined objective
is rescaled by 1/(patch area), turning the pixel-summed instance term
into a per-pixel mean without changing relative term weights; the
stated learning rates are stable under that convention. Shot patches
are re-augmented (random crop factor, translation, flips) on every
use, with flow labels recomputed from the transformed mask.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .core import bbox_cell_size, compact_mask
from .losses import ContrastiveConfig, PairBatch, adaptation_loss, instance_loss
from .model import OptimizerState, backward, clone_params, forward, init_params, sgd_step
from .synthgen import FlowTarget, compute_flow_targets

# rng purpose tags
_INIT, _POOL, _PRE_EPOCH, _PRE_AUG, _ADAPT_EPOCH, _ADAPT_AUG, _FT_EPOCH, _FT_AUG = range(8)


@dataclass(frozen=True)
class TrainConfig:
    patch: int = 112                  # network input side (w)
    nominal_cell_size: float = 30.0   # cells are rescaled to this size
    beta_max: float = 1.25
    crop_factor_range: tuple = (0.75, 1.25)
    lr0: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-5
    batch_size: int = 2
    adapt_epochs: int = 5
    finetune_epochs: int = 5
    shots: int = 3                    # K
    seed: int = 0
    pool_size: int = 512
    pretrain_epochs: int = 20
    pretrain_crops_per_epoch: int = 256
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)

    def reseeded(self, seed):
        return replace(self, seed=int(seed))


@dataclass(frozen=True)
class ShotPatch:
    """One annotated target cell: rescaled crop plus provenance."""

    image: np.ndarray     # (patch, patch) f32
    mask: np.ndarray      # (patch, patch) instance labels after resize
    labels: FlowTarget    # recomputed on the resized mask
    cell_id: int
    cell_size: float      # measured bbox size before rescaling
    crop_side: int        # crop side at original resolution


@dataclass
class CropPool:
    """Fixed set of pre-extracted source training crops."""

    images: np.ndarray    # (n, patch, patch) f32
    masks: list
    labels: list

    def __len__(self):
        return self.images.shape[0]


def _rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def lr_for_epoch(cfg, epoch):
    """Learning rate for global epoch 0..(adapt+finetune-1): decays by
    10x per adaptation epoch, then stays at the final value."""
    return cfg.lr0 * 10.0 ** (-min(epoch, cfg.adapt_epochs - 1))


def _resize_bilinear(img, out_side):
    h, w = img.shape
    if h == out_side and w == out_side:
        return img.astype(np.float32, copy=True)
    ys = (np.arange(out_side) + 0.5) * (h / out_side) - 0.5
    xs = (np.arange(out_side) + 0.5) * (w / out_side) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    img = img.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _resize_nearest(mask, out_side):
    h, w = mask.shape
    if h == out_side and w == out_side:
        return mask.copy()
    ys = np.clip(np.floor((np.arange(out_side) + 0.5) * (h / out_side)
                          ).astype(np.int64), 0, h - 1)
    xs = np.clip(np.floor((np.arange(out_side) + 0.5) * (w / out_side)
                          ).astype(np.int64), 0, w - 1)
    return mask[np.ix_(ys, xs)]


def extract_shot(img, mask, cell_id, cfg):
    """Cut one annotated cell into a nominal-size training patch.

    The crop side is round(beta_max * m_c * patch / m_n) centered on
    the instance box (clamped inside the image, zero-padded if the crop
    is larger than the image); the crop is resized to the patch size
    and flow labels are recomputed from the resized mask.
    """
    m_c = bbox_cell_size(mask, cell_id)
    side = max(8, int(round(cfg.beta_max * m_c * cfg.patch
                            / cfg.nominal_cell_size)))
    rs, cs = np.nonzero(mask == cell_id)
    cr = (int(rs.min()) + int(rs.max()) + 1) / 2.0
    cc = (int(cs.min()) + int(cs.max()) + 1) / 2.0
    h, w = mask.shape
    r0 = int(round(cr - side / 2.0))
    c0 = int(round(cc - side / 2.0))
    if side <= h:
        r0 = min(max(r0, 0), h - side)
    if side <= w:
        c0 = min(max(c0, 0), w - side)
    img_crop = np.zeros((side, side), np.float32)
    mask_crop = np.zeros((side, side), mask.dtype)
    sr0, sr1 = max(r0, 0), min(r0 + side, h)
    sc0, sc1 = max(c0, 0), min(c0 + side, w)
    img_crop[sr0 - r0:sr1 - r0, sc0 - c0:sc1 - c0] = img[sr0:sr1, sc0:sc1]
    mask_crop[sr0 - r0:sr1 - r0, sc0 - c0:sc1 - c0] = mask[sr0:sr1, sc0:sc1]
    image = _resize_bilinear(img_crop, cfg.patch)
    small = compact_mask(_resize_nearest(mask_crop, cfg.patch))
    return ShotPatch(image=image, mask=small,
                     labels=compute_flow_targets(small),
                     cell_id=int(cell_id), cell_size=m_c, crop_side=side)


def pick_shot_cells(scenes, k):
    """Choose k (scene index, cell id) pairs whose measured size is
    closest to the dataset median; prefixes are nested across k."""
    entries = []
    for si, (_, mask) in enumerate(scenes):
        for cid in np.unique(mask):
            if cid:
                entries.append((si, int(cid), bbox_cell_size(mask, int(cid))))
    if not entries:
        raise ValueError("no cells available for shot extraction")
    med = float(np.median([e[2] for e in entries]))
    entries.sort(key=lambda e: (abs(e[2] - med), e[0], e[1]))
    if k > len(entries):
        raise ValueError(f"requested {k} shots, only {len(entries)} cells")
    return [(si, cid) for si, cid, _ in entries[:k]]


def extract_shots(scenes, cfg, k=None):
    k = cfg.shots if k is None else k
    return [extract_shot(scenes[si][0], scenes[si][1], cid, cfg)
            for si, cid in pick_shot_cells(scenes, k)]


def augment(image, mask, rng, cfg):
    """Scale crop + translation + flips; labels recomputed.

    A crop factor f in crop_factor_range selects a round(patch*f)
    sub-window (zoom in, f < 1) or a zero-padded canvas (zoom out,
    f > 1) at a random offset, resized back to the patch; factor
    exactly 1 with zero offset and no flips is the identity.
    """
    w = cfg.patch
    factor = rng.uniform(*cfg.crop_factor_range)
    s = int(round(w * factor))
    r_off = int(rng.integers(0, abs(w - s) + 1))
    c_off = int(rng.integers(0, abs(w - s) + 1))
    if s == w:
        img2, mask2 = image, mask
    elif s < w:
        img2 = image[r_off:r_off + s, c_off:c_off + s]
        mask2 = mask[r_off:r_off + s, c_off:c_off + s]
    else:
        img2 = np.zeros((s, s), np.float32)
        mask2 = np.zeros((s, s), mask.dtype)
        img2[r_off:r_off + w, c_off:c_off + w] = image
        mask2[r_off:r_off + w, c_off:c_off + w] = mask
    img2 = _resize_bilinear(img2, w)
    mask2 = _resize_nearest(mask2, w)
    if rng.random() < 0.5:
        img2 = img2[:, ::-1]
        mask2 = mask2[:, ::-1]
    if rng.random() < 0.5:
        img2 = img2[::-1]
        mask2 = mask2[::-1]
    mask2 = compact_mask(np.ascontiguousarray(mask2))
    return np.ascontiguousarray(img2), mask2, compute_flow_targets(mask2)


def _flip_only(image, labels, rng):
    # analytic label transform; flips commute with the flow construction
    img = image
    fx, fy, fg = labels.flow_x, labels.flow_y, labels.fg
    if rng.random() < 0.5:
        img = img[:, ::-1]
        fx = -fx[:, ::-1]
        fy = fy[:, ::-1]
        fg = fg[:, ::-1]
    if rng.random() < 0.5:
        img = img[::-1]
        fx = fx[::-1]
        fy = -fy[::-1]
        fg = fg[::-1]
    return (np.ascontiguousarray(img),
            FlowTarget(np.ascontiguousarray(fx), np.ascontiguousarray(fy),
                       np.ascontiguousarray(fg)))


def build_crop_pool(scenes, cfg, size=None):
    """Pre-extract `size` random patch crops (each with at least one
    cell pixel) and compute their flow labels once."""
    size = cfg.pool_size if size is None else size
    rng = _rng(cfg.seed, _POOL)
    images, masks, labels = [], [], []
    attempts = 0
    while len(images) < size:
        attempts += 1
        if attempts > 100 * size:
            raise RuntimeError("could not fill crop pool with cell pixels")
        img, mask = scenes[int(rng.integers(0, len(scenes)))]
        r0 = int(rng.integers(0, img.shape[0] - cfg.patch + 1))
        c0 = int(rng.integers(0, img.shape[1] - cfg.patch + 1))
        mcrop = mask[r0:r0 + cfg.patch, c0:c0 + cfg.patch]
        if not (mcrop > 0).any():
            continue
        mcrop = compact_mask(mcrop)
        images.append(img[r0:r0 + cfg.patch, c0:c0 + cfg.patch].copy())
        masks.append(mcrop)
        labels.append(compute_flow_targets(mcrop))
    return CropPool(images=np.stack(images), masks=masks, labels=labels)


def _chunks(seq, n):
    for i in range(0, len(seq), n):
        yield seq[i:i + n]


def pretrain(scenes, cfg, epochs=None, pool=None):
    """Train from scratch on source crops with the instance loss.

    Returns (params, per-epoch log rows). Flip augmentation on top of
    the randomly translated pool crops; constant lr0.
    """
    if not scenes:
        raise ValueError("pretraining needs at least one source scene")
    epochs = cfg.pretrain_epochs if epochs is None else epochs
    params = init_params(_rng(cfg.seed, _INIT).integers(2 ** 63))
    if pool is None:
        pool = build_crop_pool(scenes, cfg)
    opt = OptimizerState(lr=cfg.lr0, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay)
    scale = 1.0 / (cfg.patch * cfg.patch)
    rows = []
    step = 0
    for epoch in range(epochs):
        order = _rng(cfg.seed, _PRE_EPOCH, epoch).permutation(len(pool))
        order = order[:min(cfg.pretrain_crops_per_epoch, len(pool))]
        total = 0.0
        count = 0
        for batch in _chunks(list(order), cfg.batch_size):
            imgs, labs = [], []
            for j, idx in enumerate(batch):
                img, lab = _flip_only(pool.images[idx], pool.labels[idx],
                                      _rng(cfg.seed, _PRE_AUG, epoch, step, j))
                imgs.append(img)
                labs.append(lab)
            z, cache = forward(params, np.stack(imgs))
            dz = np.zeros_like(z)
            for j, lab in enumerate(labs):
                val, g = instance_loss(z[j], lab, cfg.contrastive.bce_weight)
                total += val * scale
                count += 1
                dz[j] = (scale / len(batch)) * g
            grads = backward(params, cache, dz)
            sgd_step(params, grads, opt)
            step += 1
        rows.append({"epoch": epoch, "lr": opt.lr,
                     "loss_is": total / max(count, 1)})
    return params, rows


def adapt(params, pool, shots, cfg):
    """K-shot adaptation: each epoch partitions the source pool into K
    groups, pairs every source crop with its group's shot, and steps on
    the combined objective with a 10x-per-epoch lr decay.

    Returns (new params, per-step log rows).
    """
    if not shots:
        raise ValueError("adaptation needs at least one shot")
    k = len(shots)
    params = clone_params(params)
    opt = OptimizerState(lr=lr_for_epoch(cfg, 0), momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay)
    scale = 1.0 / (cfg.patch * cfg.patch)
    ccfg = cfg.contrastive
    rows = []
    step = 0
    for epoch in range(cfg.adapt_epochs):
        opt.lr = lr_for_epoch(cfg, epoch)
        rng_e = _rng(cfg.seed, _ADAPT_EPOCH, epoch)
        perm = rng_e.permutation(len(pool))
        pairs = [(int(ci), ki)
                 for ki, grp in enumerate(np.array_split(perm, k))
                 for ci in grp]
        rng_e.shuffle(pairs)
        for batch in _chunks(pairs, cfg.batch_size):
            t_imgs, t_labs = [], []
            for j, (_, ki) in enumerate(batch):
                rng_a = _rng(cfg.seed, _ADAPT_AUG, epoch, step, j)
                img, _, lab = augment(shots[ki].image, shots[ki].mask,
                                      rng_a, cfg)
                t_imgs.append(img)
                t_labs.append(lab)
            s_imgs = np.stack([pool.images[ci] for ci, _ in batch])
            zt, cache = forward(params, np.stack(t_imgs))
            zs, _ = forward(params, s_imgs, want_cache=False)
            dz = np.zeros_like(zt)
            sums = {"loss_is": 0.0, "loss_cm": 0.0, "loss_cf": 0.0,
                    "total": 0.0}
            for j, (ci, _) in enumerate(batch):
                pair = PairBatch(target_labels=t_labs[j],
                                 target_features=zt[j],
                                 source_labels=pool.labels[ci],
                                 source_features=zs[j])
                total, comps, g = adaptation_loss(pair, ccfg, scale=scale)
                dz[j] = g.astype(dz.dtype) / len(batch)
                sums["loss_is"] += comps["loss_is"] * scale
                sums["loss_cm"] += comps["loss_cm"]
                sums["loss_cf"] += comps["loss_cf"]
                sums["total"] += total
            grads = backward(params, cache, dz)
            sgd_step(params, grads, opt)
            rows.append({"step": step, "epoch": epoch, "lr": opt.lr,
                         **{key: v / len(batch) for key, v in sums.items()}})
            step += 1
    return params, rows


def finetune(params, shots, cfg):
    """Polish on the augmented shots alone with the instance loss at
    the schedule's final constant learning rate."""
    params = clone_params(params)
    if cfg.finetune_epochs == 0 or not shots:
        return params, []
    lr = lr_for_epoch(cfg, cfg.adapt_epochs)
    opt = OptimizerState(lr=lr, momentum=cfg.momentum,
                         weight_decay=cfg.weight_decay)
    batch_size = min(cfg.batch_size, len(shots))
    scale = 1.0 / (cfg.patch * cfg.patch)
    rows = []
    step = 0
    for epoch in range(cfg.finetune_epochs):
        order = _rng(cfg.seed, _FT_EPOCH, epoch).permutation(len(shots))
        for batch in _chunks(list(order), batch_size):
            imgs, labs = [], []
            for j, ki in enumerate(batch):
                rng_a = _rng(cfg.seed, _FT_AUG, epoch, step, j)
                img, _, lab = augment(shots[ki].image, shots[ki].mask,
                                      rng_a, cfg)
                imgs.append(img)
                labs.append(lab)
            z, cache = forward(params, np.stack(imgs))
            dz = np.zeros_like(z)
            total = 0.0
            for j, lab in enumerate(labs):
                val, g = instance_loss(z[j], lab, cfg.contrastive.bce_weight)
                total += val * scale
                dz[j] = (scale / len(batch)) * g
            grads = backward(params, cache, dz)
            sgd_step(params, grads, opt)
            rows.append({"step": step, "epoch": epoch, "lr": lr,
                         "loss_is": total / len(batch)})
            step += 1
    return params, rows
