"""Multi-query training loop with crop and photometric augmentation.

Each step samples one scene, crops it at the model's input resolution,
augments exposure/saturation/brightness in linear space, samples k query
pixels, encodes the pyramid once, runs the head once per query against the
shared features, and minimizes the summed per-level binary cross-entropy
averaged over queries. Ablation switches cover single-level heads, the
single-resolution pyramid, and k overrides.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from matselect import autodiff as ad
from matselect import core
from matselect import datagen as dg
from matselect import head as hd
from matselect import pyramid as pyr
from matselect.autodiff import Tensor
from matselect.core import QueryPoint
from matselect.datagen import TwoLevelAnnotation
from matselect.encoder import TOY_PROFILE, EncoderConfig

BCE_EPS = 1e-7


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_images: int = 1
    queries_per_image: int = 10
    exposure_range: tuple[float, float] = (0.5, 2.0)  # log-uniform gain
    saturation_range: tuple[float, float] = (0.7, 1.3)
    brightness_range: tuple[float, float] = (-0.1, 0.1)
    single_level: str = "off"  # off | texture | subtexture
    single_resolution: bool = False
    seed: int = 0
    max_steps: int | None = None
    checkpoint_every: int = 0  # 0: final checkpoint only
    grad_clip: float = 10.0  # global-norm ceiling; 0 disables
    encoder_lr_scale: float = 1.0  # encoder params train at lr * this
    lr_schedule: str = "constant"  # constant | cosine (decays to 10%)
    tap_target: int | None = None  # aggregation side per tap; None: pyramid default
    head_d_h: int = 32
    head_fuse_width: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.queries_per_image < 1:
            raise ValueError("need at least one query per image")
        for name in ("exposure_range", "saturation_range", "brightness_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not well-ordered")
        if self.single_level not in ("off", "texture", "subtexture"):
            raise ValueError("single_level must be off, texture, or subtexture")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be constant or cosine")

    def lr_at(self, step: int, total_steps: int) -> float:
        if self.lr_schedule == "constant" or total_steps <= 1:
            return self.learning_rate
        frac = step / (total_steps - 1)
        return self.learning_rate * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * frac)))

    def levels_out(self) -> tuple[str, ...]:
        if self.single_level == "off":
            return hd.LEVEL_NAMES
        return (self.single_level,)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        for name in ("exposure_range", "saturation_range", "brightness_range"):
            d[name] = list(d[name])
        return d


def load_train_config(path) -> TrainConfig:
    """Read a TOML training config; missing keys keep their defaults."""
    import tomli

    with open(path, "rb") as f:
        raw = tomli.load(f)
    kwargs = {}
    for key, value in raw.items():
        if key not in TrainConfig.__dataclass_fields__:
            raise ValueError(f"unknown training config key {key!r}")
        if key.endswith("_range"):
            value = tuple(value)
        if key == "max_steps" and value == 0:
            value = None
        kwargs[key] = value
    return TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# Supervision
# ---------------------------------------------------------------------------

def derive_gt_masks(ann: TwoLevelAnnotation, q: QueryPoint) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth masks for a click: pixels sharing the clicked pixel's
    subtexture id, and pixels sharing its texture id."""
    sub = (ann.subtexture_ids == ann.subtexture_ids[q.y, q.x]).astype(np.uint8)
    tex = (ann.texture_ids == ann.texture_ids[q.y, q.x]).astype(np.uint8)
    return sub, tex


def sample_queries(ann: TwoLevelAnnotation, k: int, rng: np.random.Generator) -> list[QueryPoint]:
    """k i.i.d. uniform pixels over the annotation grid."""
    if k < 1:
        raise ValueError("k must be >= 1")
    h, w = ann.subtexture_ids.shape
    xs = rng.integers(0, w, size=k)
    ys = rng.integers(0, h, size=k)
    return [QueryPoint(int(x), int(y), w, h) for x, y in zip(xs, ys)]


_LUMA = np.array([0.2126, 0.7152, 0.0722])


def augment(image: np.ndarray, rng: np.random.Generator, config: TrainConfig) -> np.ndarray:
    """Exposure gain (log-uniform), saturation scale, and brightness offset,
    applied in linear space in that order, then clamped to [0, 1]."""
    lo, hi = config.exposure_range
    gain = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    sat = float(rng.uniform(*config.saturation_range))
    offset = float(rng.uniform(*config.brightness_range))
    out = image * gain
    luma = out @ _LUMA
    out = luma[..., None] + sat * (out - luma[..., None])
    return np.clip(out + offset, 0.0, 1.0)


def bce_loss(pred: Tensor, gt: np.ndarray) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to
    [1e-7, 1 - 1e-7]; pred and gt may carry leading batch axes."""
    if pred.shape != np.shape(gt):
        raise ValueError(f"prediction shape {pred.shape} != target shape {np.shape(gt)}")
    p = ad.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    y = Tensor(np.asarray(gt, dtype=np.float64))
    return -(y * ad.log(p) + (1.0 - y) * ad.log(1.0 - p)).mean()


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adaptive-moment optimizer over a named parameter dict.

    ``lr_scale`` maps parameter-name prefixes to learning-rate multipliers
    (e.g. a slower rate for the encoder than for the head).
    """

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, grad_clip: float = 0.0,
                 lr_scale: dict[str, float] | None = None):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.grad_clip = grad_clip
        self.lr_scale = lr_scale or {}
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def _lr_for(self, name: str) -> float:
        for prefix, scale in self.lr_scale.items():
            if name.startswith(prefix):
                return self.lr * scale
        return self.lr

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        if self.grad_clip:
            total = np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params.values()
                                if p.grad is not None))
            if total > self.grad_clip:
                scale = self.grad_clip / total
                for p in self.params.values():
                    if p.grad is not None:
                        p.grad *= scale
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            p.data -= self._lr_for(name) * (self.m[name] / b1c) \
                / (np.sqrt(self.v[name] / b2c) + self.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: hd.SelectionModel
    losses: list[dict]
    checkpoint_path: Path | None


def build_model_for(config: TrainConfig, encoder_config: EncoderConfig | None = None) -> hd.SelectionModel:
    encoder_config = encoder_config or TOY_PROFILE
    targets = None if config.tap_target is None \
        else (config.tap_target,) * len(encoder_config.tap_blocks)
    pyramid_config = pyr.PyramidConfig(levels=1 if config.single_resolution else 2,
                                       tap_targets=targets)
    head_config = hd.HeadConfig(d_h=config.head_d_h, fuse_width=config.head_fuse_width,
                                levels_out=config.levels_out())
    return hd.create_model(encoder_config, pyramid_config, head_config,
                           core.make_rng(config.seed, 77))


def _crop(image: np.ndarray, ann: TwoLevelAnnotation, size: int,
          rng: np.random.Generator) -> tuple[np.ndarray, TwoLevelAnnotation]:
    h, w = image.shape[:2]
    if h < size or w < size:
        # upscale small sources first: bilinear for the image, nearest for ids
        image = core.resample_bilinear(image, max(h, size), max(w, size))
        ri = (np.arange(max(h, size)) * h // max(h, size)).clip(0, h - 1)
        ci = (np.arange(max(w, size)) * w // max(w, size)).clip(0, w - 1)
        ann = TwoLevelAnnotation(ann.subtexture_ids[np.ix_(ri, ci)],
                                 ann.texture_ids[np.ix_(ri, ci)])
        h, w = image.shape[:2]
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return (image[top:top + size, left:left + size],
            TwoLevelAnnotation(ann.subtexture_ids[top:top + size, left:left + size],
                               ann.texture_ids[top:top + size, left:left + size]))


def _query_targets(ann: TwoLevelAnnotation, queries: list[QueryPoint],
                   levels_out: tuple[str, ...]) -> np.ndarray:
    """(k, H, W, C) ground-truth stack matching the head's channel order."""
    per_query = []
    for q in queries:
        sub, tex = derive_gt_masks(ann, q)
        chans = {"subtexture": sub, "texture": tex}
        per_query.append(np.stack([chans[lv] for lv in levels_out], axis=-1))
    return np.stack(per_query).astype(np.float64)


def bce_from_logits(logits: Tensor, gt: np.ndarray) -> Tensor:
    """Mean BCE computed in logit space: softplus(z) - y*z.

    Equal in value to bce_loss(sigmoid(z), gt) wherever the latter's 1e-7
    clamp is inactive, but with exact (sigmoid(z) - y) gradients even when
    the sigmoid saturates, so badly wrong pixels keep pulling back.
    """
    y = Tensor(np.asarray(gt, dtype=np.float64))
    return (ad.softplus(logits) - y * logits).mean()


def compute_loss(model: hd.SelectionModel, image: np.ndarray,
                 ann: TwoLevelAnnotation, queries: list[QueryPoint]) -> tuple[Tensor, dict]:
    """Summed per-level BCE averaged over the query batch, plus the loss row."""
    levels_out = model.head_config.levels_out
    features = model.compute_features(image)
    logits = model.decode(features, queries, return_logits=True)
    targets = _query_targets(ann, queries, levels_out)
    per_level = {}
    loss = None
    for c, level in enumerate(levels_out):
        term = bce_from_logits(logits[:, :, :, c], targets[:, :, :, c])
        per_level[level] = float(term.data)
        loss = term if loss is None else loss + term
    row = {"total": float(loss.data),
           "bce_subtexture": per_level.get("subtexture"),
           "bce_texture": per_level.get("texture")}
    return loss, row


def train_step(model: hd.SelectionModel, optimizer: Adam, image: np.ndarray,
               ann: TwoLevelAnnotation, queries: list[QueryPoint]) -> dict:
    """One optimization step over a prepared crop; returns the loss row."""
    loss, row = compute_loss(model, image, ann, queries)
    if not np.isfinite(row["total"]):
        raise TrainingDiverged(f"non-finite loss {row['total']}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return row


def train(dataset_path, config: TrainConfig, out_checkpoint=None,
          loss_csv=None, encoder_config: EncoderConfig | None = None) -> TrainResult:
    """Train on a generated dataset's train split; see module docstring for
    the per-step recipe."""
    _, records = dg.load_dataset(dataset_path)
    scenes = [r for r in records if r.split == "train"]
    if not scenes:
        raise ValueError(f"{dataset_path}: no train-split scenes")
    loaded = [(r.images(), r.annotation()) for r in scenes]

    model = build_model_for(config, encoder_config)
    optimizer = Adam(model.params, config.learning_rate, config.beta1,
                     config.beta2, config.adam_eps, grad_clip=config.grad_clip,
                     lr_scale={"enc.": config.encoder_lr_scale})
    r = model.encoder_config.native_resolution
    steps = config.max_steps if config.max_steps is not None else config.epochs * len(scenes)

    rows: list[dict] = []
    writer = None
    csv_file = None
    if loss_csv is not None:
        csv_file = open(loss_csv, "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(["step", "total", "bce_subtexture", "bce_texture"])

    try:
        for step in range(steps):
            optimizer.lr = config.lr_at(step, steps)
            rng = core.make_rng(config.seed, 1000, step)
            loss = None
            acc = {"total": 0.0, "bce_subtexture": 0.0, "bce_texture": 0.0}
            for _ in range(config.batch_images):
                images, ann = loaded[int(rng.integers(len(loaded)))]
                image = images[int(rng.integers(len(images)))]
                crop, ann_crop = _crop(image, ann, r, rng)
                crop = augment(crop, rng, config)
                queries = sample_queries(ann_crop, config.queries_per_image, rng)
                term, part = compute_loss(model, crop, ann_crop, queries)
                loss = term if loss is None else loss + term
                for key in acc:
                    if part[key] is not None:
                        acc[key] += part[key] / config.batch_images
            loss = loss * (1.0 / config.batch_images)
            if not np.isfinite(acc["total"]):
                _dump_divergence(out_checkpoint, model, rows, step)
                raise TrainingDiverged(f"non-finite loss at step {step}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            row = {"step": step, "total": acc["total"],
                   "bce_subtexture": acc["bce_subtexture"] if "subtexture" in model.head_config.levels_out else None,
                   "bce_texture": acc["bce_texture"] if "texture" in model.head_config.levels_out else None}
            rows.append(row)
            if writer:
                writer.writerow([step, repr(row["total"]),
                                 "" if row["bce_subtexture"] is None else repr(row["bce_subtexture"]),
                                 "" if row["bce_texture"] is None else repr(row["bce_texture"])])
            if (out_checkpoint is not None and config.checkpoint_every
                    and (step + 1) % config.checkpoint_every == 0):
                hd.save_checkpoint(out_checkpoint, model, _meta(config, step + 1, row))
    finally:
        if csv_file:
            csv_file.close()

    path = None
    if out_checkpoint is not None:
        path = Path(out_checkpoint)
        hd.save_checkpoint(path, model, _meta(config, steps, rows[-1] if rows else {}))
    return TrainResult(model=model, losses=rows, checkpoint_path=path)


def _meta(config: TrainConfig, steps: int, last_row: dict) -> dict:
    return {"config": config.to_dict(), "steps": steps,
            "final_loss": last_row.get("total")}


def _dump_divergence(out_checkpoint, model, rows, step):
    target = Path(out_checkpoint).with_suffix(".diverged.json") if out_checkpoint \
        else Path("train.diverged.json")
    norms = {n: float(np.linalg.norm(p.data)) for n, p in model.params.items()}
    target.write_text(json.dumps({"step": step, "recent": rows[-20:],
                                  "param_norms": norms}, indent=1))


def make_single_query_config(config: TrainConfig) -> TrainConfig:
    """The multi-sampling ablation: identical config with k = 1."""
    return replace(config, queries_per_image=1)
