"""Shared numeric/image primitives.

Grids are numpy float64 arrays unless stated otherwise. Images are stored
interleaved H x W x C with (0, 0) at the top-left corner and x = column.
Resampling uses corner-aligned bilinear interpolation for upsampling and
exact area averaging for downsampling; both are separable and are built
from explicit 1-D weight matrices so the same kernels can be reused by the
differentiable pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image


# ---------------------------------------------------------------------------
# Query points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class QueryPoint:
    """A clicked pixel (x = column, y = row) in a reference resolution."""

    x: int
    y: int
    ref_width: int
    ref_height: int

    def __post_init__(self):
        if not (0 <= self.x < self.ref_width):
            raise ValueError(f"query x={self.x} outside [0, {self.ref_width})")
        if not (0 <= self.y < self.ref_height):
            raise ValueError(f"query y={self.y} outside [0, {self.ref_height})")


def map_pixel_to_cell(q: QueryPoint, grid_h: int, grid_w: int) -> tuple[int, int]:
    """Locate a clicked pixel in a coarser (or finer) cell grid.

    Uses floor of proportional scaling, which is monotone in both
    coordinates and lands in-bounds for any valid query.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid must be at least 1x1")
    row = (q.y * grid_h) // q.ref_height
    col = (q.x * grid_w) // q.ref_width
    return row, col


# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------

def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator; equal (seed, stream) gives an
    identical byte stream on every platform.

    Extra integers name independent substreams, e.g.
    ``make_rng(seed, scene_index)``.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *stream))))


# ---------------------------------------------------------------------------
# Resampling kernels
# ---------------------------------------------------------------------------

def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D corner-aligned linear-interpolation weights, shape (n_out, n_in).

    Output sample i reads source coordinate i*(n_in-1)/(n_out-1); the first
    and last samples map exactly onto the source corners. A single output
    sample reads the source midpoint. Rows are convex (nonnegative, sum 1).
    """
    if n_in < 1 or n_out < 1:
        raise ValueError("resample sizes must be >= 1")
    w = np.zeros((n_out, n_in))
    if n_in == 1:
        w[:, 0] = 1.0
        return w
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.clip(np.floor(src).astype(int), 0, n_in - 2)
    frac = src - lo
    w[np.arange(n_out), lo] = 1.0 - frac
    w[np.arange(n_out), lo + 1] = frac
    return w


def area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D area-averaging weights for downsampling, shape (n_out, n_in).

    Output cell i covers the source interval [i*s, (i+1)*s) with
    s = n_in/n_out; each source cell contributes its overlap fraction.
    Handles non-integer ratios exactly.
    """
    if n_out > n_in:
        raise ValueError(f"area resampling cannot upscale ({n_in} -> {n_out}); use bilinear")
    if n_out < 1:
        raise ValueError("resample sizes must be >= 1")
    s = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        a, b = i * s, (i + 1) * s
        first, last = int(np.floor(a)), int(np.ceil(b)) - 1
        for j in range(first, min(last, n_in - 1) + 1):
            w[i, j] = min(b, j + 1) - max(a, j)
    return w / s


def box3_matrix(n: int) -> np.ndarray:
    """Edge-clamped 3-tap box average, shape (n, n).

    Row i averages the valid entries in [i-1, i+1]; at the borders the
    window shrinks, so a corner of a 2-D grid averages its 4 valid cells.
    """
    w = np.zeros((n, n))
    for i in range(n):
        lo, hi = max(0, i - 1), min(n - 1, i + 1)
        w[i, lo:hi + 1] = 1.0 / (hi - lo + 1)
    return w


def _apply_rows_cols(grid: np.ndarray, row_m: np.ndarray, col_m: np.ndarray) -> np.ndarray:
    """Apply separable 1-D weight matrices along axes 0 and 1 of an
    (H, W) or (H, W, C) grid."""
    out = np.tensordot(row_m, grid, axes=([1], [0]))
    out = np.moveaxis(np.tensordot(col_m, out, axes=([1], [1])), 0, 1)
    return out


def _check_finite(grid: np.ndarray, what: str) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float64)
    if not np.all(np.isfinite(grid)):
        raise ValueError(f"{what} contains non-finite values")
    return grid


def resample_bilinear(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of an (H, W[, C]) grid.

    Every output value is a convex combination of the 4 nearest input
    samples; resampling to the input shape is the exact identity.
    """
    grid = _check_finite(grid, "resample input")
    if grid.ndim not in (2, 3):
        raise ValueError("expected an (H, W) or (H, W, C) grid")
    h, w = grid.shape[:2]
    return _apply_rows_cols(grid, bilinear_matrix(h, target_h), bilinear_matrix(w, target_w))


def resample_area(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Area-weighted downsampling of an (H, W[, C]) grid.

    Each output cell is the mean of the input area it covers. Upscaling
    requests are rejected; use :func:`resample_bilinear` for those.
    """
    grid = _check_finite(grid, "resample input")
    if grid.ndim not in (2, 3):
        raise ValueError("expected an (H, W) or (H, W, C) grid")
    h, w = grid.shape[:2]
    return _apply_rows_cols(grid, area_matrix(h, target_h), area_matrix(w, target_w))


def resample_auto(grid: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Per-axis policy used across the pipeline: bilinear when enlarging,
    area when shrinking, identity weights when the size matches."""
    grid = _check_finite(grid, "resample input")
    h, w = grid.shape[:2]
    row_m = bilinear_matrix(h, target_h) if target_h >= h else area_matrix(h, target_h)
    col_m = bilinear_matrix(w, target_w) if target_w >= w else area_matrix(w, target_w)
    return _apply_rows_cols(grid, row_m, col_m)


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def threshold_mask(scores: np.ndarray, t: float) -> np.ndarray:
    """Binarize a score grid in [0, 1] at threshold t (inclusive >=).

    The inclusive rule makes behavior at exactly 0.5, the default
    threshold, deterministic.
    """
    if not (0.0 < t < 1.0):
        raise ValueError(f"threshold must lie in (0, 1), got {t}")
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)) or scores.min() < 0.0 or scores.max() > 1.0:
        raise ValueError("scores must be finite and within [0, 1]")
    return (scores >= t).astype(np.uint8)


def check_binary(mask: np.ndarray, what: str = "mask") -> np.ndarray:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError(f"{what} must be strictly binary")
    return mask.astype(np.uint8)


# ---------------------------------------------------------------------------
# sRGB transfer and PNG I/O
# ---------------------------------------------------------------------------

def srgb_encode(linear: np.ndarray) -> np.ndarray:
    """Linear [0,1] -> sRGB [0,1]."""
    linear = np.clip(linear, 0.0, 1.0)
    return np.where(linear <= 0.0031308,
                    12.92 * linear,
                    1.055 * np.power(linear, 1.0 / 2.4) - 0.055)


def srgb_decode(encoded: np.ndarray) -> np.ndarray:
    """sRGB [0,1] -> linear [0,1]."""
    encoded = np.clip(encoded, 0.0, 1.0)
    return np.where(encoded <= 0.04045,
                    encoded / 12.92,
                    np.power((encoded + 0.055) / 1.055, 2.4))


def write_image_png(path, image: np.ndarray) -> None:
    """Write a linear [0,1] H x W x 3 image as 8-bit sRGB PNG."""
    image = _check_finite(image, "image")
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError("expected an H x W x 3 image")
    data = np.round(srgb_encode(image) * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_image_png(path) -> np.ndarray:
    """Read an 8-bit PNG into a linear [0,1] H x W x 3 array."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(data)


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Decode in-memory PNG bytes into a linear [0,1] H x W x 3 array."""
    import io

    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_decode(arr)


def write_mask_png(path, mask: np.ndarray) -> None:
    """Write a binary mask as 8-bit single-channel PNG with values {0, 255}."""
    mask = check_binary(mask)
    Image.fromarray(mask * np.uint8(255), mode="L").save(path, format="PNG")


def read_mask_png(path) -> np.ndarray:
    """Read a {0, 255} mask PNG back into a {0, 1} uint8 grid."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"))
    return (data >= 128).astype(np.uint8)


def encode_mask_bytes(mask: np.ndarray) -> bytes:
    import io

    mask = check_binary(mask)
    buf = io.BytesIO()
    Image.fromarray(mask * np.uint8(255), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def decode_mask_bytes(data: bytes) -> np.ndarray:
    import io

    with Image.open(io.BytesIO(data)) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def encode_scores_bytes(scores: np.ndarray) -> bytes:
    """Quantize a [0,1] score grid to an 8-bit grayscale PNG."""
    import io

    scores = _check_finite(scores, "scores")
    data = np.round(np.clip(scores, 0.0, 1.0) * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def write_id_grid_png(path, ids: np.ndarray) -> None:
    """Write an integer ID grid as 16-bit single-channel PNG."""
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() > 0xFFFF:
        raise ValueError("IDs must fit in uint16")
    Image.fromarray(ids.astype(np.uint16)).save(path, format="PNG")


def read_id_grid_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint16).astype(np.int64)
