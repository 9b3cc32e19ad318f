"""Training objectives and their analytic feature-map gradients.

Three losses drive adaptation:

* `instance_loss` - squared flow error plus weighted BCE on the mask
  logit, summed over pixels.
* `contrastive_flow_loss` - per foreground target pixel, a softmax
  contrast between the cosine similarity to one positive source flow
  (the predicted source flow best matching the target's label) and to
  hard-mined negatives (source flows just outside the delta similarity
  cone of the positive).
* `contrastive_mask_loss` - same-position logit pairs, squared
  alignment for same-label pairs, margin hinge for opposite-label
  pairs.

Source features are treated as constants: gradients flow only into the
target feature map. All reductions accumulate in f64.
"""

from dataclasses import dataclass

import numpy as np

from .core import ShapeError


class NoPositiveError(RuntimeError):
    """No eligible source pixel for positive selection."""


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.1     # tau
    delta: float = 0.05          # negative cone threshold
    n_neg: int = 20              # negatives per anchor
    margin: float = 10.0         # logit separation margin
    separation_weight: float = 1.0   # lambda
    mask_weight: float = 0.05    # gamma_1
    flow_weight: float = 2.0     # gamma_2
    bce_weight: float = 0.04     # nu


@dataclass(frozen=True)
class PairBatch:
    """One target patch and one source patch with labels and features."""

    target_labels: object        # FlowTarget
    target_features: np.ndarray  # (h, w, 3)
    source_labels: object
    source_features: np.ndarray

    def __post_init__(self):
        if self.target_features.shape != self.source_features.shape:
            raise ShapeError("target/source feature shapes differ")
        if self.target_labels.shape != self.target_features.shape[:2]:
            raise ShapeError("target labels do not match features")


def instance_loss(features, labels, bce_weight=0.04):
    """Pixelwise segmentation loss, summed over the patch.

    Per pixel: (z1-gx)^2 + (z2-gy)^2 + nu * BCE(fg, sigmoid(z3)).
    Returns (value, gradient w.r.t. the feature map).
    """
    z = np.asarray(features)
    if z.shape[:2] != labels.shape or z.shape[2] != 3:
        raise ShapeError(f"features {z.shape} vs labels {labels.shape}")
    z = z.astype(np.float64)
    gx = labels.flow_x.astype(np.float64)
    gy = labels.flow_y.astype(np.float64)
    m = labels.fg.astype(np.float64)
    dx = z[..., 0] - gx
    dy = z[..., 1] - gy
    logit = z[..., 2]
    # BCE(m, sigmoid(z)) = softplus(z) - m*z, numerically stable
    bce = np.logaddexp(0.0, logit) - m * logit
    value = float(np.sum(dx * dx + dy * dy + bce_weight * bce))
    grad = np.empty_like(z)
    grad[..., 0] = 2.0 * dx
    grad[..., 1] = 2.0 * dy
    sig = 1.0 / (1.0 + np.exp(-logit))
    grad[..., 2] = bce_weight * (sig - m)
    return value, grad


def _unit_rows(v, eps=1e-12):
    n = np.sqrt(v[:, 0] ** 2 + v[:, 1] ** 2)
    ok = n > eps
    out = np.zeros_like(v)
    out[ok] = v[ok] / n[ok, None]
    return out, n, ok


def select_positive(target_label, source_features, source_fg):
    """Flat index of the foreground source pixel whose predicted flow
    best matches `target_label` by cosine similarity (first index wins
    ties)."""
    lab = np.asarray(target_label, np.float64)
    nl = np.sqrt(lab[0] ** 2 + lab[1] ** 2)
    if nl == 0.0:
        raise NoPositiveError("zero-norm target label")
    flows = np.asarray(source_features, np.float64)[..., :2].reshape(-1, 2)
    fg = np.asarray(source_fg).reshape(-1) > 0
    unit, _, ok = _unit_rows(flows)
    eligible = fg & ok
    if not eligible.any():
        raise NoPositiveError("no foreground source pixel with nonzero flow")
    sims = unit @ (lab / nl)
    sims[~eligible] = -np.inf
    return int(np.argmax(sims))


def _top_negatives(sims, eligible, n_neg):
    """Indices of the n_neg highest sims among eligible, strictly-ordered
    by (similarity desc, index asc); exact under value ties."""
    masked = np.where(eligible, sims, -np.inf)
    avail = int(eligible.sum())
    k = min(int(n_neg), avail)
    if k == 0:
        return np.empty(0, np.int64)
    part = np.argpartition(masked, masked.size - k)[masked.size - k:]
    vk = masked[part].min()
    above = np.flatnonzero(masked > vk)
    ties = np.flatnonzero(masked == vk)
    picked = np.concatenate([above, ties[:k - above.size]])
    return picked[np.lexsort((picked, -masked[picked]))]


def mine_negatives(z_plus, source_features, source_fg, delta=0.05, n_neg=20):
    """Hard negatives for one positive flow: foreground source pixels
    with cosine similarity to `z_plus` strictly below `delta`, keeping
    the n_neg most similar (closest to the cone boundary)."""
    zp = np.asarray(z_plus, np.float64)
    np_norm = np.sqrt(zp[0] ** 2 + zp[1] ** 2)
    if np_norm == 0.0:
        raise ValueError("zero-norm positive flow")
    flows = np.asarray(source_features, np.float64)[..., :2].reshape(-1, 2)
    fg = np.asarray(source_fg).reshape(-1) > 0
    unit, _, ok = _unit_rows(flows)
    sims = unit @ (zp / np_norm)
    eligible = fg & ok & (sims < delta)
    return _top_negatives(sims, eligible, n_neg)


def contrastive_flow_loss(batch, cfg):
    """Mean softmax contrast over target foreground pixels (Returns
    value and gradient w.r.t. the target flow channels, (h, w, 2)).

    Anchors whose positive search fails (zero-norm label or predicted
    flow, or no eligible source pixel) are skipped and do not count
    toward the mean. Source features receive no gradient.
    """
    h, w = batch.target_labels.shape
    grad = np.zeros((h, w, 2), np.float64)
    tau = cfg.temperature

    t_fg = batch.target_labels.fg.reshape(-1) > 0
    lab = np.stack([batch.target_labels.flow_x.reshape(-1),
                    batch.target_labels.flow_y.reshape(-1)],
                   axis=1).astype(np.float64)
    zt = np.asarray(batch.target_features,
                    np.float64)[..., :2].reshape(-1, 2)
    lab_unit, _, lab_ok = _unit_rows(lab)
    zt_unit, zt_norm, zt_ok = _unit_rows(zt)
    anchors = np.flatnonzero(t_fg & lab_ok & zt_ok)
    if anchors.size == 0:
        return 0.0, grad

    s_fg = batch.source_labels.fg.reshape(-1) > 0
    zs = np.asarray(batch.source_features,
                    np.float64)[..., :2].reshape(-1, 2)
    zs_unit, _, zs_ok = _unit_rows(zs)
    eligible = np.flatnonzero(s_fg & zs_ok)
    if eligible.size == 0:
        return 0.0, grad
    es = zs_unit[eligible]  # (S, 2)

    # positive per anchor: source flow best matching the target label
    pos_of = np.argmax(lab_unit[anchors] @ es.T, axis=1)
    uniq_pos, inv = np.unique(pos_of, return_inverse=True)

    # negatives are shared by every anchor with the same positive
    pos_sims = es[uniq_pos] @ es.T  # (U, S)
    n_neg = cfg.n_neg
    neg_idx = np.full((uniq_pos.size, n_neg), -1, np.int64)
    neg_cnt = np.zeros(uniq_pos.size, np.int64)
    for u in range(uniq_pos.size):
        picked = _top_negatives(pos_sims[u], pos_sims[u] < cfg.delta, n_neg)
        neg_idx[u, :picked.size] = picked
        neg_cnt[u] = picked.size

    a_unit = zt_unit[anchors]                     # (A, 2)
    e_pos = es[pos_of]                            # (A, 2)
    s_pos = np.sum(a_unit * e_pos, axis=1)        # (A,)
    negs = neg_idx[inv]                           # (A, n_neg)
    valid = negs >= 0
    e_neg = es[np.where(valid, negs, 0)]          # (A, n_neg, 2)
    s_neg = np.einsum("ak,ank->an", a_unit, e_neg)
    s_neg[~valid] = -np.inf

    logits = np.concatenate([(s_pos / tau)[:, None], s_neg / tau], axis=1)
    mx = logits.max(axis=1)
    ex = np.exp(logits - mx[:, None])
    denom = ex.sum(axis=1)
    per_anchor = mx + np.log(denom) - s_pos / tau
    value = float(per_anchor.sum() / anchors.size)

    # d per_anchor / d s_k: softmax prob / tau, minus 1/tau on the positive
    probs = ex / denom[:, None]
    w_pos = (probs[:, 0] - 1.0) / tau
    w_neg = np.where(valid, probs[:, 1:], 0.0) / tau
    # d cos(z, v) / dz = (v_hat - cos * z_hat) / |z|
    coeff = w_pos[:, None] * (e_pos - s_pos[:, None] * a_unit)
    s_negz = np.where(valid, s_neg, 0.0)
    coeff += np.einsum("an,ank->ak", w_neg,
                       e_neg - s_negz[..., None] * a_unit[:, None, :])
    coeff /= zt_norm[anchors, None]
    coeff /= anchors.size
    flat = grad.reshape(-1, 2)
    flat[anchors] = coeff
    return value, grad


def contrastive_mask_loss(batch, cfg):
    """Same-position logit alignment/separation between the patches.

    Same-label pixel pairs pull the target logit toward the source
    logit; opposite-label pairs push it away up to the margin. Returns
    (value, gradient w.r.t. the target mask logit, (h, w)).
    """
    zt = np.asarray(batch.target_features, np.float64)[..., 2]
    zs = np.asarray(batch.source_features, np.float64)[..., 2]
    same = batch.target_labels.fg.astype(bool) == batch.source_labels.fg.astype(bool)
    diff = zt - zs
    grad = np.zeros_like(zt)
    value = 0.0
    n_pos = int(same.sum())
    if n_pos:
        d = diff[same]
        value += 0.5 * float(np.sum(d * d)) / n_pos
        grad[same] = d / n_pos
    n_neg = int(same.size - n_pos)
    if n_neg:
        lam = cfg.separation_weight
        d = diff[~same]
        hinge = np.maximum(0.0, cfg.margin - np.abs(d))
        value += lam * 0.5 * float(np.sum(hinge * hinge)) / n_neg
        grad[~same] = lam * (-hinge * np.sign(d)) / n_neg
    return value, grad


def adaptation_loss(batch, cfg, scale=1.0):
    """Combined per-pair objective:
    scale * (L_inst(target) + gamma_1 * L_mask + gamma_2 * L_flow).

    Returns (total, components, gradient w.r.t. the target feature
    map). `scale` rescales the whole objective uniformly (the trainer
    uses 1/(h*w), turning the pixel-summed instance term into a mean
    without disturbing the relative term weights); components are
    reported unscaled.
    """
    l_is, g_is = instance_loss(batch.target_features, batch.target_labels,
                               cfg.bce_weight)
    l_cm, g_cm = contrastive_mask_loss(batch, cfg)
    l_cf, g_cf = contrastive_flow_loss(batch, cfg)
    total = scale * (l_is + cfg.mask_weight * l_cm + cfg.flow_weight * l_cf)
    grad = scale * g_is
    grad[..., :2] += (scale * cfg.flow_weight) * g_cf
    grad[..., 2] += (scale * cfg.mask_weight) * g_cm
    components = {"loss_is": l_is, "loss_cm": l_cm, "loss_cf": l_cf}
    return total, components, grad
