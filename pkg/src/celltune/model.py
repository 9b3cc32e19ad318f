"""A small fixed encoder-decoder predicting (flow_x, flow_y, mask_logit).

Architecture (all convs stride 1, zero padded; channels-last layout):

    enc1: 3x3 conv 1->16, relu
    enc2: 3x3 conv 16->16, relu        (skip connection source)
    2x2 max pool
    mid1: 3x3 conv 16->32, relu
    mid2: 3x3 conv 32->32, relu
    2x nearest upsample, concat with enc2 output (48 channels)
    dec:  3x3 conv 48->16, relu
    head: 1x1 conv 16->3, linear

Forward/backward are written against im2col + matmul so the heavy
lifting stays in BLAS; gradients are exact reverse-mode and verified
against finite differences in the test suite. Weights for 3x3 convs are
stored as (9 * c_in, c_out) GEMM matrices with window-major (dy, dx,
c_in) row order; biases as (c_out,).
"""

import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as kernels
from .core import ShapeError, read_tensor, write_tensor

# (name, kernel, c_in, c_out)
LAYERS = (
    ("enc1", 3, 1, 16),
    ("enc2", 3, 16, 16),
    ("mid1", 3, 16, 32),
    ("mid2", 3, 32, 32),
    ("dec", 3, 48, 16),
    ("head", 1, 16, 3),
)

PARAM_KEYS = tuple(f"{name}_{kind}" for name, _, _, _ in LAYERS
                   for kind in ("w", "b"))


def init_params(seed):
    """Kaiming-uniform kernels (bound sqrt(6 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, k, cin, cout in LAYERS:
        fan_in = k * k * cin
        bound = np.sqrt(6.0 / fan_in)
        params[f"{name}_w"] = rng.uniform(
            -bound, bound, size=(k * k * cin, cout)).astype(np.float32)
        params[f"{name}_b"] = np.zeros(cout, np.float32)
    return params


# scratch im2col buffers, reused by cache-free forwards and backward;
# cached forwards allocate fresh so later calls cannot clobber a cache
_SCRATCH = threading.local()


def _im2col3(x, scratch=False):
    """(B, H, W, C) -> (B*H*W, 9*C) patch matrix, window-major rows."""
    b, h, w, c = x.shape
    shape = (b * h * w, 9 * c)
    if scratch:
        pool = getattr(_SCRATCH, "pool", None)
        if pool is None:
            pool = _SCRATCH.pool = {}
        key = (shape, x.dtype.str)
        out = pool.get(key)
        if out is None:
            out = pool.setdefault(key, np.empty(shape, x.dtype))
    else:
        out = np.empty(shape, x.dtype)
    return kernels.im2col3(np.ascontiguousarray(x), out)


def _conv3(x, w, b, scratch=False):
    cols = _im2col3(x, scratch=scratch)
    y = cols @ w
    y += b
    return y.reshape(x.shape[:3] + (w.shape[1],)), cols


def _flip_kernel(w, cin, cout):
    # (9*cin, cout) -> (9*cout, cin) kernel of the transposed convolution
    k = w.reshape(3, 3, cin, cout)[::-1, ::-1].transpose(0, 1, 3, 2)
    return np.ascontiguousarray(k).reshape(9 * cout, cin)


def _pool2(x):
    b, h, w, c = x.shape
    xr = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    xr = np.ascontiguousarray(xr).reshape(b, h // 2, w // 2, 4, c)
    idx = xr.argmax(axis=3)  # first max wins ties
    out = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, idx


def _unpool2(dp, idx, h, w):
    b, hh, ww, c = dp.shape
    z = np.zeros((b, hh, ww, 4, c), dp.dtype)
    np.put_along_axis(z, idx[:, :, :, None, :], dp[:, :, :, None, :], axis=3)
    z = z.reshape(b, hh, ww, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(z).reshape(b, h, w, c)


def forward(params, img, want_cache=True):
    """Run the network; returns (feature map, cache for backward).

    `img` may be one (h, w) image or a (B, h, w) batch with even h, w;
    output matches with a trailing channel axis (flow_x, flow_y,
    mask_logit). dtype follows the parameters.
    """
    x = np.asarray(img)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] % 2 or x.shape[2] % 2 or min(x.shape[1:]) < 4:
        raise ShapeError(f"need (B, h, w) with even h, w >= 4, got {x.shape}")
    dt = params["enc1_w"].dtype
    x = x.astype(dt, copy=False)[..., None]
    b, h, w, _ = x.shape

    scratch = not want_cache
    a1, c1 = _conv3(x, params["enc1_w"], params["enc1_b"], scratch=scratch)
    np.maximum(a1, 0, out=a1)
    a2, c2 = _conv3(a1, params["enc2_w"], params["enc2_b"], scratch=scratch)
    np.maximum(a2, 0, out=a2)
    p, pool_idx = _pool2(a2)
    a3, c3 = _conv3(p, params["mid1_w"], params["mid1_b"], scratch=scratch)
    np.maximum(a3, 0, out=a3)
    a4, c4 = _conv3(a3, params["mid2_w"], params["mid2_b"], scratch=scratch)
    np.maximum(a4, 0, out=a4)
    up = a4.repeat(2, axis=1).repeat(2, axis=2)
    cat = np.concatenate([up, a2], axis=3)
    a5, c5 = _conv3(cat, params["dec_w"], params["dec_b"], scratch=scratch)
    np.maximum(a5, 0, out=a5)
    z = a5.reshape(-1, 16) @ params["head_w"] + params["head_b"]
    z = z.reshape(b, h, w, 3)

    cache = None
    if want_cache:
        cache = {"shape": (b, h, w), "cols": (c1, c2, c3, c4, c5),
                 "acts": (a1, a2, a3, a4, a5), "pool_idx": pool_idx}
    return (z[0] if single else z), cache


def backward(params, cache, d_z):
    """Exact gradients of every parameter given dLoss/dOutput."""
    if cache is None:
        raise ValueError("forward was run without want_cache")
    b, h, w = cache["shape"]
    c1, c2, c3, c4, c5 = cache["cols"]
    a1, a2, a3, a4, a5 = cache["acts"]
    dz = np.asarray(d_z)
    if dz.ndim == 3:
        dz = dz[None]
    if dz.shape != (b, h, w, 3):
        raise ShapeError(f"gradient shape {dz.shape} != {(b, h, w, 3)}")
    dz = dz.astype(a5.dtype, copy=False)
    grads = {}

    dzf = dz.reshape(-1, 3)
    a5f = a5.reshape(-1, 16)
    grads["head_w"] = a5f.T @ dzf
    grads["head_b"] = dzf.sum(axis=0)
    da5 = (dzf @ params["head_w"].T).reshape(b, h, w, 16)
    da5 *= a5 > 0

    grads["dec_w"] = c5.T @ da5.reshape(-1, 16)
    grads["dec_b"] = da5.sum(axis=(0, 1, 2))
    dcat = (_im2col3(da5, scratch=True) @ _flip_kernel(params["dec_w"], 48, 16))
    dcat = dcat.reshape(b, h, w, 48)
    dup = dcat[..., :32]
    da2 = dcat[..., 32:].copy()

    da4 = dup.reshape(b, h // 2, 2, w // 2, 2, 32).sum(axis=(2, 4))
    da4 *= a4 > 0
    grads["mid2_w"] = c4.T @ da4.reshape(-1, 32)
    grads["mid2_b"] = da4.sum(axis=(0, 1, 2))
    da3 = (_im2col3(da4, scratch=True) @ _flip_kernel(params["mid2_w"], 32, 32))
    da3 = da3.reshape(b, h // 2, w // 2, 32)
    da3 *= a3 > 0
    grads["mid1_w"] = c3.T @ da3.reshape(-1, 32)
    grads["mid1_b"] = da3.sum(axis=(0, 1, 2))
    dp = (_im2col3(da3, scratch=True) @ _flip_kernel(params["mid1_w"], 16, 32))
    dp = dp.reshape(b, h // 2, w // 2, 16)

    da2 += _unpool2(dp, cache["pool_idx"], h, w)
    da2 *= a2 > 0
    grads["enc2_w"] = c2.T @ da2.reshape(-1, 16)
    grads["enc2_b"] = da2.sum(axis=(0, 1, 2))
    da1 = (_im2col3(da2, scratch=True) @ _flip_kernel(params["enc2_w"], 16, 16))
    da1 = da1.reshape(b, h, w, 16)
    da1 *= a1 > 0
    grads["enc1_w"] = c1.T @ da1.reshape(-1, 16)
    grads["enc1_b"] = da1.sum(axis=(0, 1, 2))
    return grads


@dataclass
class OptimizerState:
    """SGD with momentum and weight decay; one buffer per param block."""

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    buffers: dict = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")


def sgd_step(params, grads, state):
    """buf <- momentum*buf + grad + wd*param; param <- param - lr*buf."""
    if state.buffers is None:
        state.buffers = {k: np.zeros_like(v) for k, v in params.items()}
    for k, p in params.items():
        buf = state.buffers[k]
        if buf.shape != p.shape or grads[k].shape != p.shape:
            raise ValueError(f"shape mismatch on block {k}")
        buf *= state.momentum
        buf += grads[k]
        if state.weight_decay:
            buf += state.weight_decay * p
        p -= state.lr * buf
    return params, state


def clone_params(params):
    return {k: v.copy() for k, v in params.items()}


def save_checkpoint(path, params, meta=None):
    """One CTT1 file per parameter block plus a JSON index."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = {"blocks": [], "meta": meta or {}}
    for key in PARAM_KEYS:
        arr = params[key].astype(np.float32)
        write_tensor(path / f"{key}.ctt", arr)
        index["blocks"].append({"name": key, "shape": list(arr.shape)})
    with open(path / "index.json", "w") as f:
        json.dump(index, f, indent=1, sort_keys=True)


def load_checkpoint(path):
    path = Path(path)
    with open(path / "index.json") as f:
        index = json.load(f)
    params = {}
    for block in index["blocks"]:
        arr = read_tensor(path / f"{block['name']}.ctt")
        if list(arr.shape) != block["shape"]:
            raise ValueError(f"checkpoint block {block['name']} has shape "
                             f"{arr.shape}, index says {block['shape']}")
        params[block["name"]] = arr
    return params, index["meta"]
