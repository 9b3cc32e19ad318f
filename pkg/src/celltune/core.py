"""Shared containers, geometry helpers, tiling, and file formats.

Conventions used across the package:

* an image is a float32 (h, w) array with intensities nominally in [0, 1]
* a label mask is an integer (h, w) array, 0 = background, instances
  labeled 1..N without gaps
* a feature map is a float32 (h, w, 3) array with channels
  (flow_x, flow_y, mask_logit)
"""

import struct
from dataclasses import dataclass

import numpy as np
from PIL import Image

CTT1_MAGIC = b"CTT1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<u2"), 2: np.dtype("<u4")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.uint16): 1,
                  np.dtype(np.uint32): 2}


class ShapeError(ValueError):
    """Raised when array dimensions do not match an operation contract."""


class NotFoundError(KeyError):
    """Raised when a requested instance id is absent from a mask."""


def validate_image(img):
    img = np.asarray(img)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ShapeError(f"image must be 2-d and nonempty, got {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError("image contains non-finite values")
    return img


def validate_mask(mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-d, got {mask.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise ValueError(f"mask must be integer, got {mask.dtype}")
    if mask.min(initial=0) < 0:
        raise ValueError("mask ids must be non-negative")
    return mask


def compact_mask(mask):
    """Relabel nonzero ids to 1..N preserving first-touch row-major order."""
    mask = validate_mask(mask)
    ids = mask.ravel()
    order = ids[ids > 0]
    if order.size == 0:
        return np.zeros_like(mask)
    # np.unique(return_index) gives first occurrence in row-major order
    uniq, first = np.unique(order, return_index=True)
    remap = np.zeros(int(uniq.max()) + 1, dtype=mask.dtype)
    for new_id, old in enumerate(uniq[np.argsort(first)], start=1):
        remap[old] = new_id
    return remap[mask]


# ---------------------------------------------------------------------------
# geometry


def cosine_similarity(u, v):
    """Cosine of the angle between two 2-vectors.

    Raises ValueError on zero-norm input.
    """
    u = np.asarray(u, np.float64)
    v = np.asarray(v, np.float64)
    nu = np.sqrt(u[0] * u[0] + u[1] * u[1])
    nv = np.sqrt(v[0] * v[0] + v[1] * v[1])
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine similarity undefined for zero-norm vectors")
    s = (u[0] * v[0] + u[1] * v[1]) / (nu * nv)
    return float(min(1.0, max(-1.0, s)))


def bbox_cell_size(mask, instance_id):
    """Cell size as sqrt(bounding-box width * height) of one instance."""
    mask = validate_mask(mask)
    rs, cs = np.nonzero(mask == instance_id)
    if rs.size == 0:
        raise NotFoundError(f"instance id {instance_id} not in mask")
    h = int(rs.max()) - int(rs.min()) + 1
    w = int(cs.max()) - int(cs.min()) + 1
    return float(np.sqrt(h * w))


def estimate_dataset_cell_size(masks):
    """Median bbox cell size over every instance in the given masks."""
    sizes = []
    for mask in masks:
        mask = validate_mask(mask)
        for instance_id in np.unique(mask):
            if instance_id == 0:
                continue
            sizes.append(bbox_cell_size(mask, int(instance_id)))
    if not sizes:
        raise ValueError("no instances in any mask")
    return float(np.median(sizes))


# ---------------------------------------------------------------------------
# tiling


@dataclass(frozen=True)
class TileLayout:
    """Placement of overlapping square tiles over a (padded) image."""

    tile: int
    anchors: tuple  # ((row, col), ...) top-left corners on the padded grid
    padded_shape: tuple
    image_shape: tuple
    pad_offset: tuple  # (row, col) of the original image inside the padding

    def coverage(self):
        """Per-pixel count of covering tiles on the padded grid."""
        cov = np.zeros(self.padded_shape, np.int32)
        w = self.tile
        for r, c in self.anchors:
            cov[r:r + w, c:c + w] += 1
        return cov


def _axis_anchors(side, w, min_overlap):
    if side == w:
        return [0]
    n = int(np.ceil((side - w) / (w - min_overlap))) + 1
    return [int(round(a)) for a in np.linspace(0.0, side - w, n)]


def tile_image(img, w, min_overlap):
    """Compute a tile layout covering `img` with stride <= w - min_overlap.

    Images smaller than the tile are zero-padded symmetrically; the
    padding offset is recorded so `stitch` can crop it away.
    """
    img = validate_image(img)
    if not 0 <= min_overlap < w:
        raise ValueError(f"need 0 <= min_overlap < w, got {min_overlap}, {w}")
    h, wid = img.shape
    ph, pw = max(h, w), max(wid, w)
    off = ((ph - h) // 2, (pw - wid) // 2)
    rows = _axis_anchors(ph, w, min_overlap)
    cols = _axis_anchors(pw, w, min_overlap)
    anchors = tuple((r, c) for r in rows for c in cols)
    return TileLayout(tile=w, anchors=anchors, padded_shape=(ph, pw),
                      image_shape=(h, wid), pad_offset=off)


def cut_tiles(img, layout):
    """Extract the layout's tiles from an image (zero-padding as needed)."""
    img = np.asarray(img)
    h, w = layout.image_shape
    if img.shape[:2] != (h, w):
        raise ShapeError(f"image {img.shape} does not match layout {(h, w)}")
    padded_shape = layout.padded_shape + img.shape[2:]
    padded = np.zeros(padded_shape, img.dtype)
    r0, c0 = layout.pad_offset
    padded[r0:r0 + h, c0:c0 + w] = img
    t = layout.tile
    return [padded[r:r + t, c:c + t].copy() for r, c in layout.anchors]


def stitch(tiles, layout):
    """Blend overlapping tile predictions back into one feature map.

    Overlaps are averaged uniformly (each covering tile weighs
    1/coverage); accumulation runs in f64. Padding introduced by
    `tile_image` is cropped away.
    """
    if len(tiles) != len(layout.anchors):
        raise ShapeError(f"{len(tiles)} tiles for {len(layout.anchors)} anchors")
    t = layout.tile
    extra = np.asarray(tiles[0]).shape[2:]
    acc = np.zeros(layout.padded_shape + extra, np.float64)
    for tile, (r, c) in zip(tiles, layout.anchors):
        tile = np.asarray(tile)
        if tile.shape != (t, t) + extra:
            raise ShapeError(f"tile shape {tile.shape} != {(t, t) + extra}")
        acc[r:r + t, c:c + t] += tile
    cov = layout.coverage()
    acc /= cov.reshape(cov.shape + (1,) * len(extra))
    r0, c0 = layout.pad_offset
    h, w = layout.image_shape
    out = acc[r0:r0 + h, c0:c0 + w]
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# CTT1 tensor format: magic, u8 dtype code (0=f32, 1=u16, 2=u32), u8 rank,
# rank x u64 little-endian dims, row-major little-endian payload.


def write_tensor(path, arr):
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("=")
    if np.dtype(dt) not in _DTYPE_TO_CODE:
        raise ValueError(f"unsupported CTT1 dtype {arr.dtype}")
    code = _DTYPE_TO_CODE[np.dtype(dt)]
    with open(path, "wb") as f:
        f.write(CTT1_MAGIC)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        f.write(np.ascontiguousarray(arr, _DTYPE_CODES[code]).tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CTT1_MAGIC:
            raise ValueError(f"bad magic {magic!r} in {path}")
        code, rank = struct.unpack("<BB", f.read(2))
        if code not in _DTYPE_CODES:
            raise ValueError(f"unknown dtype code {code} in {path}")
        dims = struct.unpack(f"<{rank}Q", f.read(8 * rank))
        dt = _DTYPE_CODES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = f.read(n * dt.itemsize)
    arr = np.frombuffer(payload, dt).reshape(dims)
    return arr.astype(arr.dtype.newbyteorder("="))


# ---------------------------------------------------------------------------
# PNG import/export


def read_image_png(path):
    """Load an 8- or 16-bit grayscale PNG as float32 in [0, 1]."""
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ShapeError(f"expected grayscale PNG, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32) / 65535.0


def write_image_png(path, img):
    img = validate_image(img)
    q = np.clip(np.round(img * 65535.0), 0, 65535).astype(np.uint16)
    Image.fromarray(q, mode="I;16").save(path)


def read_mask_png(path):
    """Load a 16-bit grayscale PNG of instance ids."""
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise ShapeError(f"expected grayscale PNG, got shape {arr.shape}")
    return arr.astype(np.uint16)


def write_mask_png(path, mask):
    mask = validate_mask(mask)
    if mask.max(initial=0) > 65535:
        raise ValueError("more than 65535 instances cannot go in 16-bit PNG")
    Image.fromarray(mask.astype(np.uint16), mode="I;16").save(path)
