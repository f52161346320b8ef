"""Image encoders: a small trainable patch transformer and an adapter for
externally precomputed features.

Both backends honor the same contract: a square r x r image yields one
(r/ps) x (r/ps) x d local feature map plus one global d-vector per tap
block. The toy backend is differentiable with respect to its parameters
and is what the trainer optimizes; the external backend is features-in
(never weights-in) and exposes no gradients.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from matselect import autodiff as ad
from matselect.autodiff import Tensor

CONTAINER_VERSION = 1


class ContainerError(ValueError):
    """Base class for feature-container problems."""


class ContainerFormatError(ContainerError):
    pass


class ContainerVersionError(ContainerError):
    pass


class ContainerShapeError(ContainerError):
    pass


class ContainerHashError(ContainerError):
    pass


class FeatureLookupError(KeyError):
    """External backend asked to encode an image it has no features for."""


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry and tap contract of the feature extractor.

    The external profile mirrors a frozen ViT-B/14 at its native 518 px
    resolution tapping blocks 2, 5, 8 and 11; the toy profile is the
    desk-scale trainable stand-in.
    """

    native_resolution: int = 56
    patch_size: int = 8
    feature_dim: int = 32
    tap_blocks: tuple[int, ...] = (0, 1, 2, 3)
    backend: str = "toy"
    n_heads: int = 4
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.native_resolution % self.patch_size != 0:
            raise ValueError("native resolution must be divisible by the patch size")
        if list(self.tap_blocks) != sorted(set(self.tap_blocks)):
            raise ValueError("tap blocks must be strictly increasing")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.backend not in ("toy", "external"):
            raise ValueError(f"unknown backend {self.backend!r}")
        if self.backend == "toy" and self.feature_dim % self.n_heads != 0:
            raise ValueError("feature_dim must be divisible by n_heads")

    @property
    def grid(self) -> int:
        return self.native_resolution // self.patch_size

    @property
    def n_blocks(self) -> int:
        return max(self.tap_blocks) + 1

    def to_dict(self) -> dict:
        return {
            "native_resolution": self.native_resolution,
            "patch_size": self.patch_size,
            "feature_dim": self.feature_dim,
            "tap_blocks": list(self.tap_blocks),
            "backend": self.backend,
            "n_heads": self.n_heads,
            "mlp_ratio": self.mlp_ratio,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["tap_blocks"] = tuple(d["tap_blocks"])
        return cls(**d)


TOY_PROFILE = EncoderConfig()
EXTERNAL_PROFILE = EncoderConfig(native_resolution=518, patch_size=14, feature_dim=768,
                                 tap_blocks=(2, 5, 8, 11), backend="external", n_heads=12)


@dataclass
class EncoderOutput:
    """Per-tap local feature maps (h, w, d) and global d-vectors."""

    features: list[Tensor]
    global_tokens: list[Tensor] = field(default_factory=list)

    def shapes(self) -> list[tuple[int, ...]]:
        return [f.shape for f in self.features]


def hash_image(image: np.ndarray) -> str:
    """Content hash of a linear-RGB image, stable across runs."""
    data = np.ascontiguousarray(np.asarray(image, dtype=np.float32))
    return hashlib.sha256(data.tobytes()).hexdigest()


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, r, r, 3) -> (B, T, ps*ps*3) non-overlapping patch rows."""
    b, r = images.shape[0], images.shape[1]
    g = r // patch_size
    x = images.reshape(b, g, patch_size, g, patch_size, 3)
    return np.ascontiguousarray(x.transpose(0, 1, 3, 2, 4, 5)).reshape(b, g * g, -1)


def init_toy_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh parameter set for the toy transformer.

    Positional grid starts at zero so a spatially uniform input produces
    spatially uniform features until training breaks the symmetry.
    """
    d = config.feature_dim
    tokens = config.grid ** 2 + 1
    scale = 0.02
    fan_in = config.patch_size ** 2 * 3
    patch_w = rng.standard_normal((fan_in, d)) / np.sqrt(fan_in)
    # seed the first three feature channels with the patch mean color, a
    # useful material cue from step 0 instead of a pure random projection
    if d >= 3:
        patch_w[:, :3] = 0.0
        for c in range(3):
            patch_w[c::3, c] = 1.0 / config.patch_size ** 2
    p: dict[str, np.ndarray] = {
        "enc.patch_embed.w": patch_w,
        "enc.patch_embed.b": np.zeros(d),
        "enc.pos": np.zeros((tokens, d)),
        "enc.global_token": scale * rng.standard_normal(d),
    }
    hidden = config.mlp_ratio * d
    for i in range(config.n_blocks):
        p[f"enc.block{i}.ln1.gamma"] = np.ones(d)
        p[f"enc.block{i}.ln1.beta"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"enc.block{i}.attn.{name}"] = rng.standard_normal((d, d)) / np.sqrt(d)
        p[f"enc.block{i}.ln2.gamma"] = np.ones(d)
        p[f"enc.block{i}.ln2.beta"] = np.zeros(d)
        p[f"enc.block{i}.mlp.w1"] = rng.standard_normal((d, hidden)) / np.sqrt(d)
        p[f"enc.block{i}.mlp.b1"] = np.zeros(hidden)
        p[f"enc.block{i}.mlp.w2"] = rng.standard_normal((hidden, d)) / np.sqrt(hidden)
        p[f"enc.block{i}.mlp.b2"] = np.zeros(d)
    return {k: ad.parameter(v) for k, v in p.items()}


class ToyEncoder:
    """Pre-norm patch transformer with full self-attention and a learned
    global token; taps expose the running sequence after each listed block."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        if config.backend != "toy":
            raise ValueError("ToyEncoder requires a toy-backend config")
        self.config = config
        self.params = params
        self.forward_tiles = 0  # encoder-reuse accounting, read by tests

    @classmethod
    def create(cls, config: EncoderConfig, rng: np.random.Generator) -> "ToyEncoder":
        return cls(config, init_toy_params(config, rng))

    def encode_batch(self, images: np.ndarray) -> list[EncoderOutput]:
        """Encode a (B, r, r, 3) stack; returns one EncoderOutput per image."""
        cfg = self.config
        r = cfg.native_resolution
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or images.shape[1:] != (r, r, 3):
            raise ValueError(f"expected (B, {r}, {r}, 3) images, got {images.shape}")
        self.forward_tiles += images.shape[0]

        p = self.params
        b = images.shape[0]
        g, d, heads = cfg.grid, cfg.feature_dim, cfg.n_heads
        dh = d // heads
        tokens = g * g + 1

        x = Tensor(patchify(images, cfg.patch_size)) @ p["enc.patch_embed.w"] + p["enc.patch_embed.b"]
        ones = Tensor(np.ones((b, 1, 1)))
        x = ad.concat([ones * p["enc.global_token"].reshape(1, 1, d), x], axis=1)
        x = x + p["enc.pos"]

        taps_local: list[Tensor] = []
        taps_global: list[Tensor] = []
        for i in range(cfg.n_blocks):
            h = ad.layer_norm(x, p[f"enc.block{i}.ln1.gamma"], p[f"enc.block{i}.ln1.beta"])
            q = (h @ p[f"enc.block{i}.attn.wq"]).reshape(b, tokens, heads, dh).transpose(0, 2, 1, 3)
            k = (h @ p[f"enc.block{i}.attn.wk"]).reshape(b, tokens, heads, dh).transpose(0, 2, 1, 3)
            v = (h @ p[f"enc.block{i}.attn.wv"]).reshape(b, tokens, heads, dh).transpose(0, 2, 1, 3)
            logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(dh))
            mixed = ad.softmax(logits) @ v
            mixed = mixed.transpose(0, 2, 1, 3).reshape(b, tokens, d)
            x = x + mixed @ p[f"enc.block{i}.attn.wo"]
            m = ad.layer_norm(x, p[f"enc.block{i}.ln2.gamma"], p[f"enc.block{i}.ln2.beta"])
            x = x + ad.gelu(m @ p[f"enc.block{i}.mlp.w1"] + p[f"enc.block{i}.mlp.b1"]) \
                @ p[f"enc.block{i}.mlp.w2"] + p[f"enc.block{i}.mlp.b2"]
            if i in cfg.tap_blocks:
                taps_local.append(x[:, 1:, :].reshape(b, g, g, d))
                taps_global.append(x[:, 0, :])

        return [EncoderOutput(features=[t[i] for t in taps_local],
                              global_tokens=[t[i] for t in taps_global])
                for i in range(b)]


class ExternalFeatureBackend:
    """Pass-through of features computed outside this repository.

    Holds an index from image hash to container path; encoding looks the
    image up and returns its stored features as constants (no gradients).
    """

    def __init__(self, config: EncoderConfig, container_paths: list):
        self.config = config
        self.index: dict[str, Path] = {}
        self.forward_tiles = 0
        for path in container_paths:
            header = read_container_header(path)
            self.index[header["image_hash"]] = Path(path)

    @classmethod
    def from_dir(cls, config: EncoderConfig, directory) -> "ExternalFeatureBackend":
        return cls(config, sorted(Path(directory).glob("*.msfeat")))

    def encode_batch(self, images: np.ndarray) -> list[EncoderOutput]:
        outputs = []
        for image in images:
            key = hash_image(image)
            if key not in self.index:
                raise FeatureLookupError(f"no feature container for image hash {key[:12]}…")
            out, _ = load_external_features(self.index[key], image_hash=key)
            outputs.append(out)
        self.forward_tiles += len(images)
        return outputs


Encoder = ToyEncoder | ExternalFeatureBackend


def encode(image: np.ndarray, encoder: Encoder) -> EncoderOutput:
    """Encode one square image at the backend's native resolution."""
    return encoder.encode_batch(np.asarray(image)[None])[0]


# ---------------------------------------------------------------------------
# Feature container: JSON header + raw little-endian float32 payloads
# ---------------------------------------------------------------------------

def _write_framed(path, header: dict, payloads: list[np.ndarray]) -> None:
    body = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(len(body).to_bytes(4, "little"))
        f.write(body)
        for arr in payloads:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_framed(path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise ContainerFormatError(f"{path}: truncated header length")
    n = int.from_bytes(raw[:4], "little")
    if len(raw) < 4 + n:
        raise ContainerFormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[4:4 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerFormatError(f"{path}: undecodable header") from exc
    return header, raw[4 + n:]


def write_feature_container(path, config: EncoderConfig, image_hash: str,
                            output: EncoderOutput) -> None:
    """Persist one image's features for later external-backend serving."""
    taps = []
    payloads = []
    for block, feat in zip(config.tap_blocks, output.features):
        local = feat.data if isinstance(feat, Tensor) else np.asarray(feat)
        taps.append({"block": block, "local_shape": list(local.shape),
                     "global": bool(output.global_tokens)})
        payloads.append(local)
    for tok in output.global_tokens:
        payloads.append(tok.data if isinstance(tok, Tensor) else np.asarray(tok))
    header = {
        "format_version": CONTAINER_VERSION,
        "kind": "feature-container",
        "encoder": config.to_dict(),
        "image_hash": image_hash,
        "dtype": "<f4",
        "taps": taps,
    }
    _write_framed(path, header, payloads)


def read_container_header(path) -> dict:
    header, _ = _read_framed(path)
    if header.get("kind") != "feature-container":
        raise ContainerFormatError(f"{path}: not a feature container")
    return header


def load_external_features(path, image_hash: str | None = None,
                           config: EncoderConfig | None = None) -> tuple[EncoderOutput, dict]:
    """Load a feature container, validating version, shapes, and hash.

    Returns the features (as constant tensors) plus the parsed header.
    """
    header, payload = _read_framed(path)
    if header.get("kind") != "feature-container":
        raise ContainerFormatError(f"{path}: not a feature container")
    if header.get("format_version") != CONTAINER_VERSION:
        raise ContainerVersionError(
            f"{path}: container version {header.get('format_version')} != {CONTAINER_VERSION}")
    if image_hash is not None and header["image_hash"] != image_hash:
        raise ContainerHashError(f"{path}: image hash mismatch")
    cfg = EncoderConfig.from_dict(header["encoder"])
    if config is not None and config.to_dict() != header["encoder"]:
        raise ContainerShapeError(f"{path}: encoder config mismatch")
    if len(header["taps"]) != len(cfg.tap_blocks):
        raise ContainerShapeError(
            f"{path}: expected {len(cfg.tap_blocks)} taps, found {len(header['taps'])}")

    expected = (cfg.grid, cfg.grid, cfg.feature_dim)
    offset = 0
    features: list[Tensor] = []
    globals_: list[Tensor] = []
    for tap in header["taps"]:
        shape = tuple(tap["local_shape"])
        if shape != expected:
            raise ContainerShapeError(f"{path}: tap shape {shape} != {expected}")
        n = int(np.prod(shape)) * 4
        if offset + n > len(payload):
            raise ContainerFormatError(f"{path}: truncated payload")
        arr = np.frombuffer(payload[offset:offset + n], dtype="<f4").reshape(shape)
        features.append(Tensor(arr))
        offset += n
    if header["taps"] and header["taps"][0].get("global"):
        for _ in header["taps"]:
            n = cfg.feature_dim * 4
            if offset + n > len(payload):
                raise ContainerFormatError(f"{path}: truncated global tokens")
            globals_.append(Tensor(np.frombuffer(payload[offset:offset + n], dtype="<f4")))
            offset += n
    if offset != len(payload):
        raise ContainerFormatError(f"{path}: {len(payload) - offset} trailing bytes")
    return EncoderOutput(features=features, global_tokens=globals_), header
