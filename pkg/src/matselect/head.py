"""Query-conditioned selection head and the end-to-end selection model.

The head turns aggregated multi-resolution features plus a clicked pixel
into per-pixel similarity scores. Per tap it projects the query (cell
feature concatenated with its 3x3 neighborhood mean) and every location
into a shared space, gates the value-projected features with the sigmoid
of the scaled dot product, and runs a small convolution. The gated taps
are summed and decoded by a residual convolutional stack with progressive
2x bilinear upsampling, ending in a 1x1 projection to one sigmoid channel
per selection level.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from matselect import autodiff as ad
from matselect import core
from matselect import pyramid as pyr
from matselect.autodiff import Tensor
from matselect.core import QueryPoint
from matselect.encoder import (Encoder, EncoderConfig, ExternalFeatureBackend, ToyEncoder,
                               init_toy_params)

CHECKPOINT_VERSION = 1

LEVEL_NAMES = ("subtexture", "texture")


@dataclass(frozen=True)
class HeadConfig:
    """Widths of the head; ``levels_out`` lists the output channels in
    order (the single-level ablation trains with just one entry)."""

    d_h: int = 32
    fuse_width: int = 32
    levels_out: tuple[str, ...] = LEVEL_NAMES

    def __post_init__(self):
        if not self.levels_out or any(lv not in LEVEL_NAMES for lv in self.levels_out):
            raise ValueError(f"levels_out must be drawn from {LEVEL_NAMES}")

    @property
    def out_channels(self) -> int:
        return len(self.levels_out)

    def channel(self, level: str) -> int:
        if level not in self.levels_out:
            raise ValueError(f"model has no {level!r} channel (levels: {self.levels_out})")
        return self.levels_out.index(level)

    def to_dict(self) -> dict:
        return {"d_h": self.d_h, "fuse_width": self.fuse_width,
                "levels_out": list(self.levels_out)}

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        return cls(d_h=d["d_h"], fuse_width=d["fuse_width"],
                   levels_out=tuple(d["levels_out"]))


def n_upsample_stages(base_side: int, model_res: int) -> int:
    """Number of exact 2x upsamples before the final resize to model_res."""
    n = 0
    side = base_side
    while side * 2 <= model_res:
        side *= 2
        n += 1
    return n


def init_head_params(config: HeadConfig, d_in: int, n_taps: int, base_side: int,
                     model_res: int, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh head parameters. The final 1x1 projection starts with zero
    bias and small weights so an untrained model scores ~0.5 everywhere, a
    neutral start for the cross-entropy loss (a zero weight would also zero
    every upstream gradient)."""
    w = config.fuse_width
    p: dict[str, np.ndarray] = {}
    for j in range(n_taps):
        # Shared query/key projection at init: the similarity logits then
        # start as a true (random-projection) inner product between the
        # clicked cell's feature and every location, instead of noise.
        shared = rng.standard_normal((d_in, config.d_h)) / (2.0 * np.sqrt(d_in))
        p[f"head.tap{j}.wq"] = np.concatenate([shared, np.zeros((d_in, config.d_h))], axis=0)
        p[f"head.tap{j}.wk"] = shared.copy()
        p[f"head.tap{j}.wv"] = rng.standard_normal((d_in, config.d_h)) / np.sqrt(d_in)
        # +1 input channel: the calibrated similarity rides along with the
        # values; cosine 1.0 starts above, cosine 0.5 at, the decision point
        p[f"head.tap{j}.conv.w"] = rng.standard_normal((3, 3, config.d_h + 1, w)) / np.sqrt(9 * (config.d_h + 1))
        p[f"head.tap{j}.conv.b"] = np.zeros(w)
        p[f"head.tap{j}.logit_scale"] = np.array(8.0)
        p[f"head.tap{j}.logit_bias"] = np.array(-4.0)
    for s in range(max(n_upsample_stages(base_side, model_res), 1)):
        # conv1 also reads the 3 image-guidance channels
        p[f"head.fuse.block{s}.conv1.w"] = rng.standard_normal((3, 3, w + 3, w)) / np.sqrt(9 * (w + 3))
        p[f"head.fuse.block{s}.conv1.b"] = np.zeros(w)
        p[f"head.fuse.block{s}.conv2.w"] = rng.standard_normal((3, 3, w, w)) / np.sqrt(9 * w)
        p[f"head.fuse.block{s}.conv2.b"] = np.zeros(w)
    # 3x3 output projection: with the guidance channels at full resolution
    # it can snap mask boundaries to image edges in the very last layer
    out_w = 0.1 * rng.standard_normal((3, 3, w + n_taps + 3, config.out_channels)) / np.sqrt(9 * w)
    out_w[1, 1, w:w + n_taps, :] = 0.25  # positive weight on the similarity skips
    p["head.out.w"] = out_w
    p["head.out.b"] = np.zeros(config.out_channels)
    return {k: ad.parameter(v) for k, v in p.items()}


# ---------------------------------------------------------------------------
# Head forward pieces
# ---------------------------------------------------------------------------

def extract_query_features(f_agg: Tensor, queries: list[QueryPoint]) -> Tensor:
    """Per query: the feature at its grid cell concatenated with the
    edge-clamped 3x3 neighborhood mean around it -> (k, 2*d_in)."""
    h, w = f_agg.shape[0], f_agg.shape[1]
    rows = np.array([core.map_pixel_to_cell(q, h, w)[0] for q in queries])
    cols = np.array([core.map_pixel_to_cell(q, h, w)[1] for q in queries])
    ctx = ad.apply_matrix(ad.apply_matrix(f_agg, core.box3_matrix(h), axis=0),
                          core.box3_matrix(w), axis=1)
    return ad.concat([ad.gather_cells(f_agg, rows, cols),
                      ad.gather_cells(ctx, rows, cols)], axis=1)


def _l2_normalize(x: Tensor) -> Tensor:
    return x / ad.sqrt((x * x).sum(axis=-1, keepdims=True) + 1e-12)


def _similarity_parts(f_agg: Tensor, q_vecs: Tensor, wq: Tensor, wk: Tensor,
                      wv: Tensor, scale: Tensor | None = None,
                      bias: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Similarity logits (k, H, W), gated values (k, H, W, d_h), and, when
    scale/bias are given, a calibrated cosine-similarity channel.

    The gate follows the scaled dot product; the cosine channel normalizes
    query and key projections first, so "same material as the click" lands
    at the same value for every query and a single learned threshold
    separates it.
    """
    if q_vecs.ndim == 1:
        q_vecs = q_vecs.reshape(1, -1)
    h, w = f_agg.shape[0], f_agg.shape[1]
    d_h = wk.shape[1]
    keys = (f_agg @ wk).reshape(h * w, d_h)
    queries = q_vecs @ wq
    values = f_agg @ wv
    logits = (keys @ queries.transpose(1, 0)) * (1.0 / np.sqrt(d_h))
    logits = logits.transpose(1, 0).reshape(-1, h, w)
    gate = ad.sigmoid(logits)
    cond = gate.reshape(-1, h, w, 1) * values.reshape(1, h, w, d_h)
    if scale is None:
        return logits, cond, None
    cos = _l2_normalize(keys) @ _l2_normalize(queries).transpose(1, 0)
    calibrated = scale * cos.transpose(1, 0).reshape(-1, h, w) + bias
    return logits, cond, calibrated


def cross_similarity(f_agg: Tensor, q_vecs: Tensor, wq: Tensor, wk: Tensor,
                     wv: Tensor) -> Tensor:
    """Sigmoid-gated value projection conditioned on the query.

    logits(p) = <W_q q, W_k f(p)> / sqrt(d_h); the conditioned map is
    sigmoid(logits) * W_v f(p), computed for a batch of queries at once
    -> (k, H, W, d_h).
    """
    return _similarity_parts(f_agg, q_vecs, wq, wk, wv)[1]


def query_similarity_channel(f_agg: Tensor, q_vecs: Tensor, wq: Tensor, wk: Tensor,
                             wv: Tensor, scale: Tensor, bias: Tensor) -> Tensor:
    """Calibrated cosine similarity between the projected query and every
    location: scale * cos + bias -> (k, H, W)."""
    return _similarity_parts(f_agg, q_vecs, wq, wk, wv, scale, bias)[2]


def _residual_block_guided(x: Tensor, xin: Tensor, params: dict[str, Tensor],
                           name: str) -> Tensor:
    """x + conv(gelu(conv(xin))): the inner conv may read extra guidance
    channels; the residual path stays on the trunk width."""
    inner = ad.gelu(ad.conv2d(xin, params[f"{name}.conv1.w"], params[f"{name}.conv1.b"]))
    return x + ad.conv2d(inner, params[f"{name}.conv2.w"], params[f"{name}.conv2.b"])


def _upsample2x(x: Tensor) -> Tensor:
    x = ad.apply_matrix(x, core.bilinear_matrix(x.shape[1], 2 * x.shape[1]), axis=1)
    return ad.apply_matrix(x, core.bilinear_matrix(x.shape[2], 2 * x.shape[2]), axis=2)


def _stage_guide(guide: np.ndarray | None, side: int, batch: int) -> Tensor | None:
    if guide is None:
        return None
    g = guide if guide.shape[0] == side else core.resample_auto(guide, side, side)
    return Tensor(np.broadcast_to(g, (batch,) + g.shape))


def fuse_and_decode(conditioned: list[Tensor], params: dict[str, Tensor],
                    config: HeadConfig, model_res: int,
                    guide: np.ndarray | None = None,
                    return_logits: bool = False) -> Tensor:
    """Taps -> common grid -> residual stack with progressive upsampling ->
    1x1 projection -> per-channel sigmoid. Returns (k, model_res, model_res, C).
    ``return_logits`` skips the sigmoid (the trainer's numerically stable
    cross-entropy works in logit space).

    Residual blocks run at every scale below the output resolution; the
    final plane only carries the 1x1 projection, which keeps the conv cost
    bounded while the bilinear upsamples sharpen the grid. When ``guide``
    (the model-resolution input image) is given, each stage also sees it
    downsampled to the stage's grid, so the convolutions can align mask
    boundaries with actual image edges instead of feature-cell borders.
    """
    common = max(c.shape[1] for c in conditioned)
    batch = conditioned[0].shape[0]
    fused = None
    for j, cond in enumerate(conditioned):
        x = ad.gelu(ad.conv2d(cond, params[f"head.tap{j}.conv.w"], params[f"head.tap{j}.conv.b"]))
        if x.shape[1] != common:
            x = ad.apply_matrix(x, core.bilinear_matrix(x.shape[1], common), axis=1)
            x = ad.apply_matrix(x, core.bilinear_matrix(x.shape[2], common), axis=2)
        fused = x if fused is None else fused + x
    x = fused
    n_up = n_upsample_stages(common, model_res)
    for s in range(max(n_up, 1)):
        g = _stage_guide(guide, x.shape[1], batch)
        xin = x if g is None else ad.concat([x, g], axis=3)
        x = _residual_block_guided(x, xin, params, f"head.fuse.block{s}")
        if s < n_up:
            x = _upsample2x(x)
    if x.shape[1] != model_res:
        x = ad.apply_matrix(x, core.bilinear_matrix(x.shape[1], model_res), axis=1)
        x = ad.apply_matrix(x, core.bilinear_matrix(x.shape[2], model_res), axis=2)
    # each conditioned map's last channel (the calibrated similarity) skips
    # straight to the output projection, so query agreement reaches the
    # mask through a two-weight path instead of the whole trunk
    skips = []
    for cond in conditioned:
        s = cond[:, :, :, -1:]
        s = ad.apply_matrix(s, core.bilinear_matrix(s.shape[1], model_res), axis=1)
        skips.append(ad.apply_matrix(s, core.bilinear_matrix(s.shape[2], model_res), axis=2))
    g = _stage_guide(guide, model_res, batch)
    x = ad.concat(([x] + skips) if g is None else ([x] + skips + [g]), axis=3)
    logits = ad.conv2d(x, params["head.out.w"], params["head.out.b"])
    return logits if return_logits else ad.sigmoid(logits)


@dataclass
class FeatureBundle:
    """Cacheable query-independent state: per-tap aggregated features plus
    the model-resolution image used as decoder guidance."""

    f_aggs: list[Tensor]
    base_image: np.ndarray


def decode_queries(bundle: FeatureBundle, queries: list[QueryPoint],
                   params: dict[str, Tensor], config: HeadConfig,
                   model_res: int, return_logits: bool = False) -> Tensor:
    """Run the head for a batch of queries against shared aggregated
    features -> (k, model_res, model_res, C) similarity scores.

    The fusion stage sees the gated values plus a calibrated cosine
    similarity as an extra channel; that channel gives the decoder a direct
    linear route from query-feature agreement to the output mask.
    """
    conditioned = []
    for j, f_agg in enumerate(bundle.f_aggs):
        # query features come from a finer interpolated grid so a click
        # near a region edge is not polluted by the whole coarse cell
        fine_side = min(4 * f_agg.shape[0], model_res)
        fine = pyr.resample_features(f_agg, fine_side, fine_side) \
            if fine_side != f_agg.shape[0] else f_agg
        q_vecs = extract_query_features(fine, queries)
        _, cond, calibrated = _similarity_parts(
            f_agg, q_vecs, params[f"head.tap{j}.wq"], params[f"head.tap{j}.wk"],
            params[f"head.tap{j}.wv"], params[f"head.tap{j}.logit_scale"],
            params[f"head.tap{j}.logit_bias"])
        k, h, w = calibrated.shape
        conditioned.append(ad.concat([cond, calibrated.reshape(k, h, w, 1)], axis=3))
    return fuse_and_decode(conditioned, params, config, model_res,
                           guide=bundle.base_image, return_logits=return_logits)


# ---------------------------------------------------------------------------
# End-to-end model
# ---------------------------------------------------------------------------

class SelectionModel:
    """Encoder + pyramid + head bundled behind the click-to-mask API."""

    def __init__(self, encoder_config: EncoderConfig, pyramid_config: pyr.PyramidConfig,
                 head_config: HeadConfig, params: dict[str, Tensor],
                 encoder: Encoder, training_meta: dict | None = None):
        self.encoder_config = encoder_config
        self.pyramid_config = pyramid_config
        self.head_config = head_config
        self.params = params
        self.encoder = encoder
        self.training_meta = dict(training_meta or {})

    # -- feature path (cacheable) ------------------------------------------

    def compute_features(self, image: np.ndarray) -> FeatureBundle:
        """Pyramid + encode + aggregate; the expensive, query-independent half."""
        levels = pyr.build_pyramid(image, self.pyramid_config, self.encoder_config)
        encoded = pyr.encode_pyramid(levels, self.encoder)
        f_aggs = pyr.aggregate_pyramid(encoded, self.pyramid_config, self.encoder_config)
        return FeatureBundle(f_aggs=f_aggs, base_image=levels.level_images[0])

    def decode(self, bundle: FeatureBundle, queries: list[QueryPoint],
               return_logits: bool = False) -> Tensor:
        return decode_queries(bundle, queries, self.params, self.head_config,
                              self.encoder_config.native_resolution,
                              return_logits=return_logits)

    # -- public selection API ------------------------------------------------

    def score_maps(self, image: np.ndarray, q: QueryPoint,
                   features: FeatureBundle | None = None) -> np.ndarray:
        """Full-resolution similarity scores, one channel per output level."""
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape[:2]
        if (q.ref_width, q.ref_height) != (w, h):
            raise ValueError("query reference resolution does not match the image")
        if features is None:
            features = self.compute_features(image)
        scores = self.decode(features, [q]).data[0]
        return core.resample_bilinear(scores, h, w)

    def select(self, image: np.ndarray, q: QueryPoint, level: str = "texture",
               threshold: float = 0.5,
               features: FeatureBundle | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Similarity maps plus the requested level's mask, both at the
        original image resolution."""
        scores = self.score_maps(image, q, features=features)
        mask = core.threshold_mask(scores[:, :, self.head_config.channel(level)], threshold)
        return scores, mask

    @property
    def d_in(self) -> int:
        return self.pyramid_config.levels * self.encoder_config.feature_dim


def create_model(encoder_config: EncoderConfig | None = None,
                 pyramid_config: pyr.PyramidConfig | None = None,
                 head_config: HeadConfig | None = None,
                 rng: np.random.Generator | None = None) -> SelectionModel:
    """Toy-backend model with freshly initialized parameters."""
    from matselect.encoder import TOY_PROFILE

    encoder_config = encoder_config or TOY_PROFILE
    pyramid_config = pyramid_config or pyr.PyramidConfig()
    head_config = head_config or HeadConfig()
    rng = rng if rng is not None else core.make_rng(0)
    params = init_toy_params(encoder_config, rng)
    d_in = pyramid_config.levels * encoder_config.feature_dim
    base = max(pyramid_config.target_side(encoder_config, j)
               for j in range(len(encoder_config.tap_blocks)))
    params.update(init_head_params(head_config, d_in, len(encoder_config.tap_blocks),
                                   base, encoder_config.native_resolution, rng))
    encoder = ToyEncoder(encoder_config, params)
    return SelectionModel(encoder_config, pyramid_config, head_config, params, encoder)


# ---------------------------------------------------------------------------
# Checkpoints: JSON manifest + raw little-endian float32 payloads
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: SelectionModel, training_meta: dict | None = None) -> None:
    """Atomic (write-temp-then-rename) checkpoint write."""
    names = sorted(model.params)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "kind": "selection-model",
        "encoder": model.encoder_config.to_dict(),
        "pyramid": model.pyramid_config.to_dict(),
        "head": model.head_config.to_dict(),
        "training": dict(training_meta if training_meta is not None else model.training_meta),
        "params": [{"name": n, "shape": list(model.params[n].shape), "dtype": "<f4"}
                   for n in names],
    }
    body = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(len(body).to_bytes(4, "little"))
            f.write(body)
            for n in names:
                f.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint_manifest(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated checkpoint")
    n = int.from_bytes(raw[:4], "little")
    manifest = json.loads(raw[4:4 + n].decode("utf-8"))
    if manifest.get("kind") != "selection-model":
        raise ValueError(f"{path}: not a model checkpoint")
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version")
    return manifest, raw[4 + n:]


def checkpoint_manifest_hash(path) -> str:
    raw = Path(path).read_bytes()
    n = int.from_bytes(raw[:4], "little")
    return hashlib.sha256(raw[4:4 + n]).hexdigest()


def load_checkpoint(path, feature_dir=None) -> SelectionModel:
    """Rebuild a model from a checkpoint; external-backend models need the
    directory holding their feature containers."""
    manifest, payload = read_checkpoint_manifest(path)
    encoder_config = EncoderConfig.from_dict(manifest["encoder"])
    pyramid_config = pyr.PyramidConfig.from_dict(manifest["pyramid"])
    head_config = HeadConfig.from_dict(manifest["head"])
    params: dict[str, Tensor] = {}
    offset = 0
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload[offset:offset + 4 * count], dtype="<f4").reshape(shape)
        params[entry["name"]] = ad.parameter(arr)
        offset += 4 * count
    if offset != len(payload):
        raise ValueError(f"{path}: payload size mismatch")
    if encoder_config.backend == "toy":
        encoder: Encoder = ToyEncoder(encoder_config, params)
    else:
        if feature_dir is None:
            raise ValueError("external-backend checkpoint needs feature_dir")
        encoder = ExternalFeatureBackend.from_dir(encoder_config, feature_dir)
    return SelectionModel(encoder_config, pyramid_config, head_config, params, encoder,
                          training_meta=manifest.get("training"))
