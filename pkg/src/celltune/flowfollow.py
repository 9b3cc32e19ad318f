"""Instance assembly from a feature map by gradient-flow following.

Foreground pixels (mask logit above threshold) are advected along the
predicted flow field; trajectories accumulate at cell centers, whose
basins become instances: endpoints are binned on a coarse grid, marked
bins are merged by 8-connectivity, and undersized instances dropped.

`segment_reference` is an intentionally naive scalar implementation of
the same pipeline (kept arithmetically identical) used as the oracle
for the optimized path and as the benchmark baseline.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import _kernels as kernels
from .core import compact_mask, validate_mask


@dataclass(frozen=True)
class FollowConfig:
    steps: int = 200
    step_size: float = 1.0
    logit_threshold: float = 0.0
    bin_size: int = 2
    min_size: int = 15

    def __post_init__(self):
        if self.steps < 1 or self.bin_size < 1:
            raise ValueError(f"invalid follow config {self}")


def follow_flows(features, cfg=FollowConfig()):
    """Integrate every foreground pixel through the flow field.

    Returns (rows, cols, fg_flat_indices): final f64 positions for each
    pixel with mask logit above the threshold, in row-major order.
    """
    z = np.asarray(features, np.float32)
    h, w = z.shape[:2]
    fg = np.flatnonzero(z[..., 2].reshape(-1) > cfg.logit_threshold)
    if fg.size == 0:
        return (np.empty(0), np.empty(0), fg)
    start_r = (fg // w).astype(np.float64)
    start_c = (fg % w).astype(np.float64)
    rows, cols = kernels.follow_field(
        np.ascontiguousarray(z[..., 0]), np.ascontiguousarray(z[..., 1]),
        start_r, start_c, cfg.steps, cfg.step_size)
    return rows, cols, fg


def cluster_endpoints(rows, cols, fg, shape, cfg=FollowConfig()):
    """Bin endpoints, label 8-connected marked bins, assign pixels.

    Instance ids are compacted to 1..N in first-touch row-major order
    of the image pixels.
    """
    h, w = shape
    mask = np.zeros(h * w, np.int32)
    if fg.size == 0:
        return mask.reshape(h, w)
    b = cfg.bin_size
    br = np.floor(rows).astype(np.int64) // b
    bc = np.floor(cols).astype(np.int64) // b
    grid = np.zeros(((h + b - 1) // b, (w + b - 1) // b), bool)
    grid[br, bc] = True
    comp, _ = ndimage.label(grid, structure=np.ones((3, 3), int))
    mask[fg] = comp[br, bc]
    return compact_mask(mask.reshape(h, w))


def remove_small(mask, min_size):
    """Drop instances under min_size pixels and re-compact ids."""
    mask = validate_mask(mask)
    if mask.max(initial=0) == 0:
        return mask.copy()
    counts = np.bincount(mask.ravel())
    small = np.flatnonzero(counts < min_size)
    out = mask.copy()
    out[np.isin(mask, small[small > 0])] = 0
    return compact_mask(out)


def segment(features, cfg=FollowConfig()):
    """Feature map -> instance label mask."""
    z = np.asarray(features)
    rows, cols, fg = follow_flows(z, cfg)
    mask = cluster_endpoints(rows, cols, fg, z.shape[:2], cfg)
    return remove_small(mask, cfg.min_size)


# ---------------------------------------------------------------------------
# naive reference


def _follow_one(fx, fy, r, c, h, w, steps, step):
    # scalar twin of kernels.follow_field: same formulas, same order
    for _ in range(steps):
        r0 = int(math.floor(r))
        c0 = int(math.floor(c))
        fr = r - r0
        fc = c - c0
        r1 = min(r0 + 1, h - 1)
        c1 = min(c0 + 1, w - 1)
        wa = (1.0 - fr) * (1.0 - fc)
        wb = fr * (1.0 - fc)
        wc = (1.0 - fr) * fc
        wd = fr * fc
        vx = ((float(fx[r0, c0]) * wa + float(fx[r1, c0]) * wb)
              + float(fx[r0, c1]) * wc) + float(fx[r1, c1]) * wd
        vy = ((float(fy[r0, c0]) * wa + float(fy[r1, c0]) * wb)
              + float(fy[r0, c1]) * wc) + float(fy[r1, c1]) * wd
        n = math.sqrt(vx * vx + vy * vy)
        if n < 1e-6:
            break
        r = min(max(r + step * (vy / n), 0.0), h - 1.0)
        c = min(max(c + step * (vx / n), 0.0), w - 1.0)
    return r, c


def segment_reference(features, cfg=FollowConfig()):
    """Slow scalar reference for `segment` (loops and dicts only)."""
    z = np.asarray(features, np.float32)
    h, w = z.shape[:2]
    fx = z[..., 0]
    fy = z[..., 1]
    endpoints = {}
    for r in range(h):
        for c in range(w):
            if float(z[r, c, 2]) > cfg.logit_threshold:
                endpoints[(r, c)] = _follow_one(fx, fy, float(r), float(c),
                                                h, w, cfg.steps,
                                                cfg.step_size)
    # bin endpoints and merge 8-connected marked bins by flood fill
    b = cfg.bin_size
    bins = {}
    for pix, (er, ec) in endpoints.items():
        bins.setdefault((int(math.floor(er)) // b,
                         int(math.floor(ec)) // b), []).append(pix)
    bin_comp = {}
    n_comp = 0
    for key in sorted(bins):
        if key in bin_comp:
            continue
        n_comp += 1
        stack = [key]
        bin_comp[key] = n_comp
        while stack:
            by, bx = stack.pop()
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    nb = (by + dy, bx + dx)
                    if nb in bins and nb not in bin_comp:
                        bin_comp[nb] = n_comp
                        stack.append(nb)
    mask = np.zeros((h, w), np.int32)
    for key, pixels in bins.items():
        for r, c in pixels:
            mask[r, c] = bin_comp[key]
    # first-touch row-major relabel, then drop undersized instances
    relabel = {}
    for r in range(h):
        for c in range(w):
            v = int(mask[r, c])
            if v and v not in relabel:
                relabel[v] = len(relabel) + 1
    for r in range(h):
        for c in range(w):
            if mask[r, c]:
                mask[r, c] = relabel[int(mask[r, c])]
    sizes = {}
    for v in mask.ravel():
        if v:
            sizes[int(v)] = sizes.get(int(v), 0) + 1
    keep = {v for v, n in sizes.items() if n >= cfg.min_size}
    final = {}
    for r in range(h):
        for c in range(w):
            v = int(mask[r, c])
            if v in keep:
                if v not in final:
                    final[v] = len(final) + 1
                mask[r, c] = final[v]
            else:
                mask[r, c] = 0
    return mask
