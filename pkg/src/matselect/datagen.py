"""Procedural generator of desk-scale scenes with dual-level material
annotations.

Every reflectance, pattern, and region is a deterministic function of
continuous canvas coordinates, seeded through counter-based hashing, so a
scene can be evaluated under any camera crop/zoom and regenerated
bit-identically from its seed. Scenes composite z-ordered shape regions,
each assigned either a plain reflectance (subtexture id == texture id) or
a texture material (a binary pattern mask alpha-combining two reflectance
maps: the texture grid stores the texture id, the subtexture grid stores
the visible component's reflectance id). A multiplicative low-frequency
shading field entangles lighting with albedo without touching the labels.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from matselect import core

FORMAT_VERSION = 1
REFL_ID_BASE = 1
TEXTURE_ID_BASE = 4096

REFLECTANCE_FAMILIES = ("solid", "value_noise", "stripes", "dots", "speckle")
PATTERN_FAMILIES = ("checker", "stripes", "noise_threshold", "voronoi", "dots", "blobs")


class OccupancyError(ValueError):
    """A pattern family kept producing masks below the 5% class-balance floor."""


# ---------------------------------------------------------------------------
# Counter-based lattice noise
# ---------------------------------------------------------------------------

def _mix64(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64).copy()
    with np.errstate(over="ignore"):
        x ^= x >> np.uint64(33)
        x *= np.uint64(0xFF51AFD7ED558CCD)
        x ^= x >> np.uint64(33)
        x *= np.uint64(0xC4CEB9FE1A85EC53)
        x ^= x >> np.uint64(33)
    return x


def hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic uniform [0,1) value per integer lattice point."""
    with np.errstate(over="ignore"):
        h = _mix64(np.asarray(ix, dtype=np.int64).astype(np.uint64)
                   + np.uint64(0x9E3779B97F4A7C15) * np.asarray(iy, dtype=np.int64).astype(np.uint64)
                   + np.uint64(0x2545F4914F6CDD1D) * np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _smooth(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise01(x: np.ndarray, y: np.ndarray, seed: int, scale: float) -> np.ndarray:
    """Smoothly interpolated lattice noise with cell size ``scale`` pixels."""
    u, v = np.asarray(x) / scale, np.asarray(y) / scale
    iu, iv = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    fu, fv = _smooth(u - iu), _smooth(v - iv)
    n00 = hash01(iu, iv, seed)
    n10 = hash01(iu + 1, iv, seed)
    n01 = hash01(iu, iv + 1, seed)
    n11 = hash01(iu + 1, iv + 1, seed)
    return (n00 * (1 - fu) + n10 * fu) * (1 - fv) + (n01 * (1 - fu) + n11 * fu) * fv


def fbm01(x, y, seed: int, scale: float, octaves: int = 3) -> np.ndarray:
    total, amp, norm = 0.0, 1.0, 0.0
    for o in range(octaves):
        total = total + amp * value_noise01(x, y, seed + 101 * o, scale / (2 ** o))
        norm += amp
        amp *= 0.5
    return total / norm


# ---------------------------------------------------------------------------
# Reflectance maps (stationary base materials)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReflectanceMap:
    """A stationary material patch with a unique ID."""

    id: int
    family: str
    params: dict

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.params
        base = np.asarray(p["color"])
        shape = np.broadcast_shapes(np.shape(x), np.shape(y))
        if self.family == "solid":
            return np.broadcast_to(base, shape + (3,)).copy()
        if self.family == "value_noise":
            t = value_noise01(x, y, p["seed"], p["scale"])[..., None]
            return base * (1 - t) + np.asarray(p["color2"]) * t
        if self.family == "stripes":
            s = (np.asarray(x) * np.cos(p["angle"]) + np.asarray(y) * np.sin(p["angle"])) / p["period"]
            on = (s - np.floor(s)) < p["duty"]
            return np.where(on[..., None], base, np.asarray(p["color2"]))
        if self.family == "dots":
            sp = p["spacing"]
            cx = (np.floor(np.asarray(x) / sp) + 0.5) * sp
            cy = (np.floor(np.asarray(y) / sp) + 0.5) * sp
            inside = (x - cx) ** 2 + (y - cy) ** 2 < p["radius"] ** 2
            return np.where(inside[..., None], np.asarray(p["color2"]), base)
        if self.family == "speckle":
            n = hash01(np.floor(x).astype(np.int64), np.floor(y).astype(np.int64), p["seed"])
            return np.clip(base + p["amplitude"] * (n[..., None] - 0.5), 0.0, 1.0)
        raise ValueError(f"unknown reflectance family {self.family!r}")

    def patch(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        return self.evaluate(xx, yy)

    def to_dict(self) -> dict:
        return {"id": self.id, "family": self.family, "params": _jsonable(self.params)}


def _pick_color(rng: np.random.Generator, avoid: list | None = None,
                separation: float = 0.0) -> np.ndarray:
    """Saturated-ish colors inside [0.05, 0.95]; with ``avoid``/``separation``
    set, rejection-samples until the color clears every listed color."""
    for _ in range(200):
        color = 0.05 + 0.9 * rng.random(3)
        if not avoid or not separation:
            return color
        if all(np.linalg.norm(color - c) >= separation for c in avoid):
            return color
    return color


def gen_reflectance(family: str, rng: np.random.Generator, refl_id: int,
                    params: dict | None = None, scale: float = 1.0,
                    avoid_colors: list | None = None,
                    color_separation: float = 0.0) -> ReflectanceMap:
    if family not in REFLECTANCE_FAMILIES:
        raise ValueError(f"unknown reflectance family {family!r}")
    if params is None:
        params = {"color": _pick_color(rng, avoid_colors, color_separation)}
        if family == "value_noise":
            params.update(color2=_pick_color(rng), scale=float(scale * rng.uniform(6, 20)),
                          seed=int(rng.integers(1 << 31)))
        elif family == "stripes":
            params.update(color2=_pick_color(rng), period=float(scale * rng.uniform(4, 12)),
                          angle=float(rng.uniform(0, np.pi)), duty=float(rng.uniform(0.35, 0.65)))
        elif family == "dots":
            spacing = float(scale * rng.uniform(6, 14))
            params.update(color2=_pick_color(rng), spacing=spacing,
                          radius=float(spacing * rng.uniform(0.2, 0.4)))
        elif family == "speckle":
            params.update(amplitude=float(rng.uniform(0.08, 0.25)),
                          seed=int(rng.integers(1 << 31)))
    return ReflectanceMap(id=refl_id, family=family, params=params)


# ---------------------------------------------------------------------------
# Pattern masks (binary alpha channels)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatternMask:
    id: int
    family: str
    params: dict

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.params
        if self.family == "checker":
            cell = p["cell"]
            return ((np.floor(np.asarray(x) / cell) + np.floor(np.asarray(y) / cell)) % 2) == 0
        if self.family == "stripes":
            s = (np.asarray(x) * np.cos(p["angle"]) + np.asarray(y) * np.sin(p["angle"])) / p["period"]
            return (s - np.floor(s)) < p["duty"]
        if self.family == "noise_threshold":
            return value_noise01(x, y, p["seed"], p["scale"]) >= p["threshold"]
        if self.family == "voronoi":
            return _voronoi_parity(x, y, p["seed"], p["spacing"])
        if self.family == "dots":
            sp = p["spacing"]
            cx = (np.floor(np.asarray(x) / sp) + 0.5) * sp
            cy = (np.floor(np.asarray(y) / sp) + 0.5) * sp
            return (x - cx) ** 2 + (y - cy) ** 2 < p["radius"] ** 2
        if self.family == "blobs":
            return fbm01(x, y, p["seed"], p["scale"], octaves=3) >= p["threshold"]
        raise ValueError(f"unknown pattern family {self.family!r}")

    def grid(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        return self.evaluate(xx, yy).astype(np.uint8)

    def to_dict(self) -> dict:
        return {"id": self.id, "family": self.family, "params": _jsonable(self.params)}


def _voronoi_parity(x, y, seed: int, spacing: float) -> np.ndarray:
    """Nearest jittered lattice site wins; its hash parity colors the cell."""
    u, v = np.asarray(x) / spacing, np.asarray(y) / spacing
    iu, iv = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    best = np.full(np.broadcast_shapes(u.shape, v.shape), np.inf)
    label = np.zeros_like(best, dtype=bool)
    for du in (-1, 0, 1):
        for dv in (-1, 0, 1):
            cu, cv = iu + du, iv + dv
            px = cu + hash01(cu, cv, seed + 7)
            py = cv + hash01(cu, cv, seed + 13)
            d = (u - px) ** 2 + (v - py) ** 2
            closer = d < best
            best = np.where(closer, d, best)
            label = np.where(closer, hash01(cu, cv, seed + 29) >= 0.5, label)
    return label


def _sample_pattern_params(family: str, rng: np.random.Generator,
                           scale: float = 1.0) -> dict:
    if family == "checker":
        return {"cell": float(scale * rng.uniform(6, 16))}
    if family == "stripes":
        return {"period": float(scale * rng.uniform(6, 18)), "angle": float(rng.uniform(0, np.pi)),
                "duty": float(rng.uniform(0.3, 0.7))}
    if family == "noise_threshold":
        return {"scale": float(scale * rng.uniform(8, 24)), "threshold": float(rng.uniform(0.35, 0.65)),
                "seed": int(rng.integers(1 << 31))}
    if family == "voronoi":
        return {"spacing": float(scale * rng.uniform(8, 20)), "seed": int(rng.integers(1 << 31))}
    if family == "dots":
        spacing = float(scale * rng.uniform(8, 16))
        return {"spacing": spacing, "radius": float(spacing * rng.uniform(0.25, 0.45))}
    if family == "blobs":
        return {"scale": float(scale * rng.uniform(10, 28)), "threshold": float(rng.uniform(0.4, 0.6)),
                "seed": int(rng.integers(1 << 31))}
    raise ValueError(f"unknown pattern family {family!r}")


def gen_pattern_mask(family: str, rng: np.random.Generator, pattern_id: int,
                     size: int = 112, params: dict | None = None,
                     min_occupancy: float = 0.05, retries: int = 10,
                     scale: float = 1.0) -> PatternMask:
    """Sample a binary pattern whose classes both cover >= 5% of pixels,
    resampling parameters up to ``retries`` times before giving up."""
    if family not in PATTERN_FAMILIES:
        raise ValueError(f"unknown pattern family {family!r}")
    fixed = params is not None
    last = None
    for _ in range(retries):
        last = params if fixed else _sample_pattern_params(family, rng, scale)
        mask = PatternMask(id=pattern_id, family=family, params=last)
        cover = mask.grid(size).mean()
        if min_occupancy <= cover <= 1.0 - min_occupancy:
            return mask
        if fixed:
            break
    raise OccupancyError(
        f"pattern family {family!r} with params {last} failed the "
        f"{min_occupancy:.0%} occupancy floor after {retries} tries")


# ---------------------------------------------------------------------------
# Texture materials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TextureMaterial:
    """Two reflectance maps combined through a binary pattern mask."""

    texture_id: int
    mask: PatternMask
    refl_a: ReflectanceMap
    refl_b: ReflectanceMap

    def albedo(self, x, y) -> np.ndarray:
        m = self.mask.evaluate(x, y)[..., None]
        return np.where(m, self.refl_a.evaluate(x, y), self.refl_b.evaluate(x, y))

    def subtexture_ids(self, x, y) -> np.ndarray:
        return np.where(self.mask.evaluate(x, y), self.refl_a.id, self.refl_b.id)

    def to_dict(self) -> dict:
        return {"texture_id": self.texture_id, "mask": self.mask.id,
                "refl_a": self.refl_a.id, "refl_b": self.refl_b.id}


def compose_texture(mask: PatternMask, refl_a: ReflectanceMap, refl_b: ReflectanceMap,
                    texture_id: int, patch_size: int = 0) -> tuple[TextureMaterial, np.ndarray | None]:
    """Combine mask + reflectance pair into a texture material; optionally
    render an albedo patch for inspection."""
    if refl_a.id == refl_b.id:
        raise ValueError("texture components must have distinct reflectance ids")
    material = TextureMaterial(texture_id=texture_id, mask=mask, refl_a=refl_a, refl_b=refl_b)
    patch = None
    if patch_size:
        yy, xx = np.mgrid[0:patch_size, 0:patch_size].astype(np.float64)
        patch = material.albedo(xx, yy)
    return material, patch


Material = ReflectanceMap | TextureMaterial


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Region:
    """A z-ordered shape with an assigned material. ``kind='fill'`` covers
    the whole canvas (the background region)."""

    kind: str  # fill | rect | ellipse | polygon | band
    params: dict
    material: Material

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        p = self.params
        if self.kind == "fill":
            return np.ones(np.broadcast_shapes(np.shape(x), np.shape(y)), dtype=bool)
        if self.kind in ("rect", "ellipse", "band"):
            ca, sa = np.cos(p["angle"]), np.sin(p["angle"])
            u = (x - p["cx"]) * ca + (y - p["cy"]) * sa
            v = -(x - p["cx"]) * sa + (y - p["cy"]) * ca
            if self.kind == "rect":
                return (np.abs(u) <= p["hw"]) & (np.abs(v) <= p["hh"])
            if self.kind == "ellipse":
                return (u / p["rx"]) ** 2 + (v / p["ry"]) ** 2 <= 1.0
            return np.abs(v) <= p["halfwidth"]
        if self.kind == "polygon":
            verts = np.asarray(p["vertices"])
            inside = np.ones(np.broadcast_shapes(np.shape(x), np.shape(y)), dtype=bool)
            for i in range(len(verts)):
                ax, ay = verts[i]
                bx, by = verts[(i + 1) % len(verts)]
                inside &= (bx - ax) * (y - ay) - (by - ay) * (x - ax) >= 0
            return inside
        raise ValueError(f"unknown region kind {self.kind!r}")

    def to_dict(self) -> dict:
        mat = {"reflectance": self.material.id} if isinstance(self.material, ReflectanceMap) \
            else {"texture": self.material.texture_id}
        return {"kind": self.kind, "params": _jsonable(self.params), "material": mat}


@dataclass(frozen=True)
class SceneSpec:
    """Everything needed to render one scene deterministically."""

    size: int
    regions: tuple[Region, ...]  # bottom to top; topmost wins
    shading_seed: int
    shading_strength: float  # 0 disables the field
    highlight: dict | None
    camera_zoom: float
    camera_cx: float
    camera_cy: float
    seed: int

    def to_dict(self) -> dict:
        return {"size": self.size, "regions": [r.to_dict() for r in self.regions],
                "shading_seed": self.shading_seed, "shading_strength": self.shading_strength,
                "highlight": _jsonable(self.highlight), "camera_zoom": self.camera_zoom,
                "camera_cx": self.camera_cx, "camera_cy": self.camera_cy, "seed": self.seed}


@dataclass
class TwoLevelAnnotation:
    subtexture_ids: np.ndarray
    texture_ids: np.ndarray


def _camera_grid(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    n = spec.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    x = spec.camera_cx + (xx + 0.5 - n / 2.0) / spec.camera_zoom
    y = spec.camera_cy + (yy + 0.5 - n / 2.0) / spec.camera_zoom
    return x, y


def shading_field(spec: SceneSpec) -> np.ndarray:
    """Multiplicative low-frequency field in [0.3, 1.2], optionally with a
    soft Gaussian highlight (clipped back into range)."""
    if spec.shading_strength <= 0.0:
        return np.ones((spec.size, spec.size))
    x, y = _camera_grid(spec)
    n = value_noise01(x, y, spec.shading_seed, scale=max(24.0, spec.size / 3.0))
    lo = 1.0 - 0.7 * spec.shading_strength
    hi = 1.0 + 0.2 * spec.shading_strength
    field = lo + (hi - lo) * n
    if spec.highlight:
        h = spec.highlight
        d2 = (x - h["cx"]) ** 2 + (y - h["cy"]) ** 2
        field = field + h["gain"] * np.exp(-0.5 * d2 / h["sigma"] ** 2)
    return np.clip(field, 0.3, 1.2)


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, TwoLevelAnnotation]:
    """Render the linear-RGB image and its two-level ID annotation."""
    x, y = _camera_grid(spec)
    owner = np.zeros((spec.size, spec.size), dtype=np.intp)
    for i, region in enumerate(spec.regions):
        owner[region.contains(x, y)] = i

    albedo = np.zeros((spec.size, spec.size, 3))
    sub_ids = np.zeros((spec.size, spec.size), dtype=np.int64)
    tex_ids = np.zeros((spec.size, spec.size), dtype=np.int64)
    for i, region in enumerate(spec.regions):
        sel = owner == i
        if not sel.any():
            continue
        xs, ys = x[sel], y[sel]
        mat = region.material
        if isinstance(mat, ReflectanceMap):
            albedo[sel] = mat.evaluate(xs, ys)
            sub_ids[sel] = mat.id
            tex_ids[sel] = mat.id
        else:
            albedo[sel] = mat.albedo(xs, ys)
            sub_ids[sel] = mat.subtexture_ids(xs, ys)
            tex_ids[sel] = mat.texture_id
    image = np.clip(albedo * shading_field(spec)[..., None], 0.0, 1.0)
    return image, TwoLevelAnnotation(subtexture_ids=sub_ids, texture_ids=tex_ids)


# ---------------------------------------------------------------------------
# Material bank and scene sampling
# ---------------------------------------------------------------------------

@dataclass
class MaterialBank:
    reflectances: list[ReflectanceMap]
    patterns: list[PatternMask]
    textures: list[TextureMaterial]

    def materials(self) -> list[Material]:
        return list(self.reflectances) + list(self.textures)


def build_bank(seed: int, n_reflectances: int = 24, n_patterns: int = 12,
               n_textures: int = 24, size: int = 112,
               pattern_scale: float = 1.0,
               color_separation: float = 0.25,
               reflectance_families: tuple[str, ...] = REFLECTANCE_FAMILIES,
               pattern_families: tuple[str, ...] = PATTERN_FAMILIES) -> MaterialBank:
    """Reflectance set, pattern set, and mask+pair texture combinations
    (pairs sampled without repetition per pattern). Base colors keep a
    minimum pairwise distance so distinct materials stay distinguishable."""
    reflectances = []
    base_colors: list[np.ndarray] = []
    for i in range(n_reflectances):
        rng = core.make_rng(seed, 0, i)
        family = reflectance_families[int(rng.integers(len(reflectance_families)))]
        refl = gen_reflectance(family, rng, REFL_ID_BASE + i, scale=pattern_scale,
                               avoid_colors=base_colors, color_separation=color_separation)
        base_colors.append(np.asarray(refl.params["color"]))
        reflectances.append(refl)
    patterns = []
    for i in range(n_patterns):
        rng = core.make_rng(seed, 1, i)
        family = pattern_families[i % len(pattern_families)]
        patterns.append(gen_pattern_mask(family, rng, i + 1, size=size, scale=pattern_scale))
    textures = []
    used_pairs: set[tuple[int, int]] = set()
    for i in range(n_textures):
        rng = core.make_rng(seed, 2, i)
        mask = patterns[int(rng.integers(len(patterns)))]
        for _ in range(50):
            a, b = rng.choice(len(reflectances), size=2, replace=False)
            pair = (reflectances[a].id, reflectances[b].id)
            if pair not in used_pairs:
                used_pairs.add(pair)
                break
        material, _ = compose_texture(mask, reflectances[a], reflectances[b],
                                      TEXTURE_ID_BASE + i)
        textures.append(material)
    return MaterialBank(reflectances, patterns, textures)


def sample_layout(rng: np.random.Generator, size: int, thin: bool,
                  shape_count: tuple[int, int] = (2, 4),
                  shape_extent: tuple[float, float] = (0.12, 0.32)) -> list[tuple[str, dict]]:
    """Shape skeleton (kind + geometry) bottom-to-top; background first."""
    shapes: list[tuple[str, dict]] = [("fill", {})]
    if thin:
        for _ in range(int(rng.integers(3, 6))):
            shapes.append(("band", {
                "cx": float(rng.uniform(0, size)), "cy": float(rng.uniform(0, size)),
                "angle": float(rng.uniform(0, np.pi)),
                "halfwidth": float(rng.uniform(0.5, 1.5)),
            }))
        return shapes
    lo, hi = shape_extent
    for _ in range(int(rng.integers(shape_count[0], shape_count[1] + 1))):
        kind = ("rect", "ellipse", "polygon")[int(rng.integers(3))]
        cx, cy = rng.uniform(0.15 * size, 0.85 * size, size=2)
        if kind == "rect":
            shapes.append(("rect", {"cx": float(cx), "cy": float(cy),
                                    "hw": float(rng.uniform(lo, hi * 0.95) * size),
                                    "hh": float(rng.uniform(lo, hi * 0.95) * size),
                                    "angle": float(rng.uniform(0, np.pi))}))
        elif kind == "ellipse":
            shapes.append(("ellipse", {"cx": float(cx), "cy": float(cy),
                                       "rx": float(rng.uniform(lo, hi) * size),
                                       "ry": float(rng.uniform(lo, hi) * size),
                                       "angle": float(rng.uniform(0, np.pi))}))
        else:
            k = int(rng.integers(3, 7))
            radius = rng.uniform(lo, hi * 0.95) * size
            angles = np.sort(rng.uniform(0, 2 * np.pi, size=k))
            verts = [[float(cx + radius * np.cos(a)), float(cy + radius * np.sin(a))]
                     for a in angles]
            shapes.append(("polygon", {"vertices": verts}))
    return shapes


def make_scene_spec(seed: int, layout_index: int, assignment_index: int,
                    illumination_index: int, bank: MaterialBank, size: int,
                    thin: bool, shading_strength: float = 1.0,
                    shape_count: tuple[int, int] = (2, 4),
                    shape_extent: tuple[float, float] = (0.12, 0.32)) -> SceneSpec:
    """Deterministic scene spec; the annotation depends only on layout and
    assignment, never on the illumination index."""
    layout_rng = core.make_rng(seed, 10, layout_index)
    shapes = sample_layout(layout_rng, size, thin, shape_count, shape_extent)
    # thin scenes keep zoom 1 so band widths stay at their sampled 1-3 px
    zoom = 1.0 if thin else float(layout_rng.uniform(1.0, 1.3))
    cx = float(layout_rng.uniform(0.4, 0.6) * size)
    cy = float(layout_rng.uniform(0.4, 0.6) * size)

    assign_rng = core.make_rng(seed, 11, layout_index, assignment_index)
    pool = bank.materials() if not thin else list(bank.reflectances)
    # Reflectance ids must be disjoint across a scene's materials so the
    # subtexture partition refines the texture partition on every image.
    picked: list[Material] = []
    used_refl: set[int] = set()
    for idx in assign_rng.permutation(len(pool)):
        mat = pool[int(idx)]
        ids = {mat.id} if isinstance(mat, ReflectanceMap) else {mat.refl_a.id, mat.refl_b.id}
        if ids & used_refl:
            continue
        used_refl |= ids
        picked.append(mat)
        if len(picked) == len(shapes):
            break
    regions = tuple(Region(kind=k, params=p, material=picked[i % len(picked)])
                    for i, (k, p) in enumerate(shapes))

    shade_rng = core.make_rng(seed, 12, layout_index, assignment_index, illumination_index)
    highlight = None
    if shade_rng.random() < 0.5:
        highlight = {"cx": float(shade_rng.uniform(0, size)), "cy": float(shade_rng.uniform(0, size)),
                     "sigma": float(shade_rng.uniform(0.1, 0.3) * size),
                     "gain": float(shade_rng.uniform(0.1, 0.3))}
    return SceneSpec(size=size, regions=regions,
                     shading_seed=int(shade_rng.integers(1 << 31)),
                     shading_strength=shading_strength, highlight=highlight,
                     camera_zoom=zoom, camera_cx=cx, camera_cy=cy, seed=seed)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    """Generation manifest: layout counts per (split, subset), assignment
    and illumination multiplicity, canvas size, and the master seed."""

    train_standard: int = 20
    train_thin: int = 0
    holdout_standard: int = 10
    holdout_thin: int = 0
    assignments: int = 1
    illuminations: int = 1
    size: int = 112
    seed: int = 0
    shading_strength: float = 1.0
    pattern_scale: float = 1.0
    color_separation: float = 0.25
    reflectance_families: tuple[str, ...] = REFLECTANCE_FAMILIES
    pattern_families: tuple[str, ...] = PATTERN_FAMILIES
    shape_count: tuple[int, int] = (2, 4)
    shape_extent: tuple[float, float] = (0.12, 0.32)
    bank_reflectances: int = 24
    bank_patterns: int = 12
    bank_textures: int = 24

    @property
    def n_layouts(self) -> int:
        return self.train_standard + self.train_thin + self.holdout_standard + self.holdout_thin

    def layout_tags(self) -> list[tuple[str, str]]:
        """(split, subset) per layout index, in generation order."""
        return ([("train", "standard")] * self.train_standard
                + [("train", "thin")] * self.train_thin
                + [("holdout", "standard")] * self.holdout_standard
                + [("holdout", "thin")] * self.holdout_thin)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "train_standard", "train_thin", "holdout_standard", "holdout_thin",
            "assignments", "illuminations", "size", "seed", "shading_strength",
            "pattern_scale", "color_separation", "bank_reflectances", "bank_patterns",
            "bank_textures")} | {"reflectance_families": list(self.reflectance_families),
                                 "pattern_families": list(self.pattern_families),
                                 "shape_count": list(self.shape_count),
                                 "shape_extent": list(self.shape_extent)}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        kwargs = {k: d[k] for k in cls().to_dict() if k in d}
        for key in ("reflectance_families", "pattern_families", "shape_count", "shape_extent"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def gen_dataset(config: DatasetConfig, out_dir) -> dict:
    """Write the dataset tree; returns the manifest.

    Layout: scene_XXXX/img_kY.png (8-bit sRGB), ann_subtexture.png and
    ann_texture.png (16-bit single-channel IDs), meta.json per scene;
    manifest.json at the root. A `.incomplete` marker guards partial writes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / ".incomplete"
    marker.write_text("generation in progress\n")

    bank = build_bank(config.seed, config.bank_reflectances, config.bank_patterns,
                      config.bank_textures, config.size, config.pattern_scale,
                      config.color_separation, config.reflectance_families,
                      config.pattern_families)
    scenes = []
    index = 0
    for layout_index, (split, subset) in enumerate(config.layout_tags()):
        for assignment in range(config.assignments):
            scene_name = f"scene_{index:04d}"
            scene_dir = out / scene_name
            scene_dir.mkdir(exist_ok=True)
            spec0 = make_scene_spec(config.seed, layout_index, assignment, 0, bank,
                                    config.size, thin=subset == "thin",
                                    shading_strength=config.shading_strength,
                                    shape_count=config.shape_count,
                                    shape_extent=config.shape_extent)
            _, ann = render_scene(spec0)
            core.write_id_grid_png(scene_dir / "ann_subtexture.png", ann.subtexture_ids)
            core.write_id_grid_png(scene_dir / "ann_texture.png", ann.texture_ids)
            for k in range(config.illuminations):
                spec_k = make_scene_spec(config.seed, layout_index, assignment, k, bank,
                                         config.size, thin=subset == "thin",
                                         shading_strength=config.shading_strength,
                                         shape_count=config.shape_count,
                                         shape_extent=config.shape_extent)
                image, ann_k = render_scene(spec_k)
                if k:
                    assert (ann_k.subtexture_ids == ann.subtexture_ids).all()
                core.write_image_png(scene_dir / f"img_k{k}.png", image)
            meta = {"scene": scene_name, "layout_index": layout_index,
                    "assignment_index": assignment, "split": split, "subset": subset,
                    "seed": config.seed, "spec": spec0.to_dict()}
            (scene_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
            scenes.append({"scene": scene_name, "split": split, "subset": subset})
            index += 1

    manifest = {"format_version": FORMAT_VERSION, "kind": "dumas-mini",
                "config": config.to_dict(), "scenes": scenes}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    marker.unlink()
    return manifest


# ---------------------------------------------------------------------------
# Dataset loading
# ---------------------------------------------------------------------------

@dataclass
class SceneRecord:
    path: Path
    split: str
    subset: str

    def image_paths(self) -> list[Path]:
        return sorted(self.path.glob("img_k*.png"))

    def images(self) -> list[np.ndarray]:
        return [core.read_image_png(p) for p in self.image_paths()]

    def annotation(self) -> TwoLevelAnnotation:
        return TwoLevelAnnotation(
            subtexture_ids=core.read_id_grid_png(self.path / "ann_subtexture.png"),
            texture_ids=core.read_id_grid_png(self.path / "ann_texture.png"))


def load_dataset(root) -> tuple[dict, list[SceneRecord]]:
    root = Path(root)
    if (root / ".incomplete").exists():
        raise ValueError(f"{root}: dataset generation never completed")
    manifest = json.loads((root / "manifest.json").read_text())
    records = [SceneRecord(path=root / s["scene"], split=s["split"], subset=s["subset"])
               for s in manifest["scenes"]]
    return manifest, records


def tree_hash(root) -> str:
    """Order-independent content hash of a dataset tree."""
    root = Path(root)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        digest.update(str(path.relative_to(root)).encode())
        digest.update(hashlib.sha256(path.read_bytes()).digest())
    return digest.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj
