"""Multi-resolution pyramid: tiling, per-tile encoding, and cross-resolution
feature aggregation.

Level 1 is the whole image at the encoder's native resolution r; level i is
the image at 2^(i-1)·r per side, split into a 2^(i-1) x 2^(i-1) grid of
r x r tiles (non-overlapping, exactly covering the level image). Feature
maps from all levels are resampled to a per-tap target resolution and
concatenated along channels in level order, level 1 first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from matselect import autodiff as ad
from matselect import core
from matselect.autodiff import Tensor
from matselect.encoder import Encoder, EncoderConfig, EncoderOutput


@dataclass(frozen=True)
class PyramidConfig:
    """Number of resolution levels and per-tap aggregation targets.

    ``tap_targets`` of None means every tap aggregates at the highest
    reassembled feature resolution, 2^(levels-1) · r/ps per side.
    """

    levels: int = 2
    tap_targets: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("pyramid needs at least one level")

    def target_side(self, encoder_config: EncoderConfig, tap_index: int) -> int:
        if self.tap_targets is not None:
            return self.tap_targets[tap_index]
        return 2 ** (self.levels - 1) * encoder_config.grid

    def to_dict(self) -> dict:
        return {"levels": self.levels,
                "tap_targets": None if self.tap_targets is None else list(self.tap_targets)}

    @classmethod
    def from_dict(cls, d: dict) -> "PyramidConfig":
        targets = d.get("tap_targets")
        return cls(levels=d["levels"],
                   tap_targets=None if targets is None else tuple(targets))


@dataclass
class PyramidLevels:
    """Resized level images plus their row-major r x r tiles."""

    level_images: list[np.ndarray]
    tiles: list[list[tuple[int, int, np.ndarray]]]


def build_pyramid(image: np.ndarray, config: PyramidConfig,
                  encoder_config: EncoderConfig) -> PyramidLevels:
    """Resize (anisotropically if needed) to each level's square side and
    split into non-overlapping native-resolution tiles."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError("expected a nonempty H x W x 3 image")
    r = encoder_config.native_resolution
    level_images: list[np.ndarray] = []
    tiles: list[list[tuple[int, int, np.ndarray]]] = []
    for level in range(1, config.levels + 1):
        k = 2 ** (level - 1)
        side = k * r
        resized = image if image.shape[:2] == (side, side) else core.resample_auto(image, side, side)
        level_images.append(resized)
        level_tiles = [(row, col, resized[row * r:(row + 1) * r, col * r:(col + 1) * r])
                       for row in range(k) for col in range(k)]
        tiles.append(level_tiles)
    return PyramidLevels(level_images=level_images, tiles=tiles)


def split_tiles(grid: np.ndarray, k: int) -> list[tuple[int, int, np.ndarray]]:
    """Split an (k·s, k·s, ...) grid into a row-major k x k tile list."""
    s = grid.shape[0] // k
    return [(r, c, grid[r * s:(r + 1) * s, c * s:(c + 1) * s])
            for r in range(k) for c in range(k)]


def encode_pyramid(levels: PyramidLevels, encoder: Encoder) -> list[list[tuple[int, int, EncoderOutput]]]:
    """Encode every tile of every level in one batched pass.

    Returns, per level, the (row, col, EncoderOutput) triples in the same
    row-major order the pyramid produced.
    """
    stack = []
    for level_tiles in levels.tiles:
        for _, _, tile in level_tiles:
            stack.append(tile)
    outputs = encoder.encode_batch(np.stack(stack))
    encoded: list[list[tuple[int, int, EncoderOutput]]] = []
    i = 0
    for level_tiles in levels.tiles:
        level_out = []
        for row, col, _ in level_tiles:
            level_out.append((row, col, outputs[i]))
            i += 1
        encoded.append(level_out)
    return encoded


def reassemble_tiles(tile_features: list[tuple[int, int, Tensor]]) -> Tensor:
    """Stitch a k x k grid of (h, w, d) maps back into one (k·h, k·w, d) map,
    preserving the original image layout regardless of list order."""
    k = int(round(np.sqrt(len(tile_features))))
    if k * k != len(tile_features):
        raise ValueError(f"expected a square tile grid, got {len(tile_features)} tiles")
    by_pos = {(r, c): t for r, c, t in tile_features}
    if len(by_pos) != len(tile_features):
        raise ValueError("duplicate tile positions")
    shape = next(iter(by_pos.values())).shape
    for t in by_pos.values():
        if t.shape != shape:
            raise ValueError("inconsistent tile shapes")
    rows = []
    for r in range(k):
        if any((r, c) not in by_pos for c in range(k)):
            raise ValueError("missing tile positions")
        rows.append(ad.concat([by_pos[(r, c)] for c in range(k)], axis=1))
    return ad.concat(rows, axis=0) if k > 1 else rows[0]


def resample_features(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Differentiable resampling of an (H, W, C) map: bilinear when
    enlarging, area when shrinking, untouched when the size matches."""
    h, w = x.shape[0], x.shape[1]
    if target_h != h:
        m = core.bilinear_matrix(h, target_h) if target_h > h else core.area_matrix(h, target_h)
        x = ad.apply_matrix(x, m, axis=0)
    if target_w != w:
        m = core.bilinear_matrix(w, target_w) if target_w > w else core.area_matrix(w, target_w)
        x = ad.apply_matrix(x, m, axis=1)
    return x


def aggregate(level_maps: list[Tensor], target_h: int, target_w: int) -> Tensor:
    """Resample each level's map to the target and concatenate along
    channels in level order (level 1 first)."""
    resampled = [resample_features(m, target_h, target_w) for m in level_maps]
    return resampled[0] if len(resampled) == 1 else ad.concat(resampled, axis=2)


def aggregate_pyramid(encoded: list[list[tuple[int, int, EncoderOutput]]],
                      config: PyramidConfig,
                      encoder_config: EncoderConfig) -> list[Tensor]:
    """Full per-tap aggregation: reassemble each level's tiles, resample to
    the tap target, concatenate across levels. Returns one
    (target, target, levels·d) map per tap."""
    n_taps = len(encoder_config.tap_blocks)
    per_tap: list[Tensor] = []
    for j in range(n_taps):
        level_maps = []
        for level_out in encoded:
            tiles = [(r, c, out.features[j]) for r, c, out in level_out]
            level_maps.append(reassemble_tiles(tiles))
        side = config.target_side(encoder_config, j)
        per_tap.append(aggregate(level_maps, side, side))
    return per_tap
