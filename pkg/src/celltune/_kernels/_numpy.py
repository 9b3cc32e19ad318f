"""Vectorized numpy fallback for the compiled kernels.

Every expression here mirrors the operation order of `_native.pyx`
exactly (same parenthesization, f64 arithmetic, no fused multiply-add),
so both backends return bit-identical arrays.
"""

import numpy as np


def im2col3(x, out):
    """Fill `out` (B*H*W, 9*C) with zero-padded 3x3 windows of x
    (B, H, W, C), window-major (dy, dx, c) row order."""
    b, h, w, c = x.shape
    if out.shape != (b * h * w, 9 * c):
        raise ValueError("bad im2col output shape")
    xp = np.zeros((b, h + 2, w + 2, c), x.dtype)
    xp[:, 1:h + 1, 1:w + 1, :] = x
    cols = out.reshape(b, h, w, 9, c)
    k = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, :, k, :] = xp[:, dy:dy + h, dx:dx + w, :]
            k += 1
    return out


def heat_diffusion(inside, center_r, center_c, niter):
    """Iterate the masked 4-neighbor heat average on one instance.

    `inside` is a uint8/bool map with a guaranteed one-pixel zero border.
    Each iteration first pins the center to (field max over the instance)
    + 1, then replaces every instance pixel by the mean of its four
    neighbors (non-instance neighbors contribute zero).
    """
    ins = np.asarray(inside, dtype=bool)
    rs, cs = np.nonzero(ins)
    t = np.zeros(ins.shape, np.float64)
    t_next = np.zeros(ins.shape, np.float64)
    for _ in range(int(niter)):
        t[center_r, center_c] = t[rs, cs].max() + 1.0
        t_next[rs, cs] = (((t[rs - 1, cs] + t[rs + 1, cs]) + t[rs, cs - 1])
                          + t[rs, cs + 1]) * 0.25
        t, t_next = t_next, t
    return t


def follow_field(flow_x, flow_y, rows, cols, steps, step_size):
    """Euler-integrate trajectories through a bilinearly sampled flow.

    Positions are f64, clamped to the field after every step; a sampled
    flow with norm < 1e-6 freezes its trajectory. Returns final (rows,
    cols).
    """
    fx = np.asarray(flow_x, np.float32)
    fy = np.asarray(flow_y, np.float32)
    h, w = fx.shape
    r = np.asarray(rows, np.float64).copy()
    c = np.asarray(cols, np.float64).copy()
    idx = np.arange(r.shape[0])
    step = float(step_size)
    for _ in range(int(steps)):
        if idx.size == 0:
            break
        ra = r[idx]
        ca = c[idx]
        r0 = np.floor(ra).astype(np.int64)
        c0 = np.floor(ca).astype(np.int64)
        fr = ra - r0
        fc = ca - c0
        r1 = np.minimum(r0 + 1, h - 1)
        c1 = np.minimum(c0 + 1, w - 1)
        wa = (1.0 - fr) * (1.0 - fc)
        wb = fr * (1.0 - fc)
        wc = (1.0 - fr) * fc
        wd = fr * fc
        vx = ((fx[r0, c0] * wa + fx[r1, c0] * wb)
              + fx[r0, c1] * wc) + fx[r1, c1] * wd
        vy = ((fy[r0, c0] * wa + fy[r1, c0] * wb)
              + fy[r0, c1] * wc) + fy[r1, c1] * wd
        n = np.sqrt(vx * vx + vy * vy)
        alive = n >= 1e-6
        if not alive.all():
            keep = idx[alive]
            ra = ra[alive]
            ca = ca[alive]
            vx = vx[alive]
            vy = vy[alive]
            n = n[alive]
            idx = keep
            if idx.size == 0:
                break
        rn = ra + step * (vy / n)
        cn = ca + step * (vx / n)
        r[idx] = np.minimum(np.maximum(rn, 0.0), h - 1.0)
        c[idx] = np.minimum(np.maximum(cn, 0.0), w - 1.0)
    return r, c
