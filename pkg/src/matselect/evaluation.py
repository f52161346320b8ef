"""Metrics and robustness protocols, runnable against any predictor.

A predictor is any callable (image, QueryPoint, level) -> score grid in
[0, 1] matching the image shape. The zoom protocol crops the image and
forwards each crop to the predictor; predictors that carry ground truth
(the label oracle) can expose ``with_window`` to receive crop provenance
instead of re-deriving it from pixels.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from matselect import core
from matselect.core import QueryPoint
from matselect.datagen import TwoLevelAnnotation

ZOOM_SCALES = (1.0, 0.85, 0.7, 0.55, 0.4)


def _check_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def l1(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean absolute pixel difference between scores and the binary truth."""
    pred, gt = _check_pair(pred, gt)
    if pred.min() < 0 or pred.max() > 1:
        raise ValueError("scores must lie in [0, 1]")
    return float(np.abs(pred.astype(np.float64) - gt).mean())


def iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union; 1.0 when both masks are empty."""
    a, b = _check_pair(core.check_binary(a), core.check_binary(b))
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def f1(pred: np.ndarray, gt: np.ndarray) -> float:
    """Harmonic mean of precision and recall (prediction vs ground truth);
    0 when precision + recall is 0, 1 when both masks are empty."""
    pred, gt = _check_pair(core.check_binary(pred), core.check_binary(gt))
    tp = float(np.logical_and(pred, gt).sum())
    p_sum, g_sum = float(pred.sum()), float(gt.sum())
    if p_sum == 0 and g_sum == 0:
        return 1.0
    if tp == 0:
        return 0.0
    precision, recall = tp / p_sum, tp / g_sum
    return 2 * precision * recall / (precision + recall)


def hamming_consistency(masks: list[np.ndarray]) -> float:
    """Mean pairwise fraction of disagreeing pixels over unordered pairs."""
    if len(masks) < 2:
        raise ValueError("need at least two masks")
    masks = [core.check_binary(m) for m in masks]
    for m in masks[1:]:
        _check_pair(masks[0], m)
    total, pairs = 0.0, 0
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            total += float((masks[i] != masks[j]).mean())
            pairs += 1
    return total / pairs


# ---------------------------------------------------------------------------
# Predictors
# ---------------------------------------------------------------------------

class LabelOracle:
    """Predictor that answers with the ground-truth mask as scores.

    Carries the annotation so the zoom protocol can hand it crop windows
    (``with_window``) rather than leaving it to match pixels.
    """

    def __init__(self, ann: TwoLevelAnnotation):
        self.ann = ann

    def __call__(self, image: np.ndarray, q: QueryPoint, level: str) -> np.ndarray:
        ids = self.ann.texture_ids if level == "texture" else self.ann.subtexture_ids
        if ids.shape != image.shape[:2]:
            raise ValueError("oracle annotation does not match the image")
        return (ids == ids[q.y, q.x]).astype(np.float64)

    def with_window(self, top: int, left: int, height: int, width: int) -> "LabelOracle":
        return LabelOracle(TwoLevelAnnotation(
            self.ann.subtexture_ids[top:top + height, left:left + width],
            self.ann.texture_ids[top:top + height, left:left + width]))


class CheckpointPredictor:
    """Adapter around a SelectionModel with a small per-image feature cache
    so repeated queries on one image skip the encoder."""

    def __init__(self, model, cache_size: int = 8):
        self.model = model
        self.cache_size = cache_size
        self._cache: dict[str, list] = {}

    def _features(self, image: np.ndarray):
        from matselect.encoder import hash_image

        key = hash_image(image)
        if key not in self._cache:
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = self.model.compute_features(image)
        return self._cache[key]

    def __call__(self, image: np.ndarray, q: QueryPoint, level: str) -> np.ndarray:
        scores = self.model.score_maps(image, q, features=self._features(image))
        return scores[:, :, self.model.head_config.channel(level)]


# ---------------------------------------------------------------------------
# Robustness protocols
# ---------------------------------------------------------------------------

def pixel_consistency(predictor, image: np.ndarray, ann: TwoLevelAnnotation,
                      level: str = "texture", materials: int = 3,
                      queries_per_material: int = 5, threshold: float = 0.5,
                      seed: int = 0) -> list[dict]:
    """Per material (up to ``materials`` sampled): click several pixels of
    that material and report the mean pairwise Hamming distance of the
    binarized selections. Materials with too few pixels are skipped."""
    ids = ann.texture_ids if level == "texture" else ann.subtexture_ids
    rng = core.make_rng(seed)
    unique = rng.permutation(np.unique(ids))
    h, w = ids.shape
    rows = []
    for material in unique:
        if len(rows) >= materials:
            break
        ys, xs = np.nonzero(ids == material)
        if len(ys) < queries_per_material:
            rows.append({"material": int(material), "skipped": "too few pixels",
                         "hamming": None})
            continue
        pick = rng.choice(len(ys), size=queries_per_material, replace=False)
        masks = []
        for i in pick:
            q = QueryPoint(int(xs[i]), int(ys[i]), w, h)
            masks.append(core.threshold_mask(predictor(image, q, level), threshold))
        rows.append({"material": int(material), "skipped": None,
                     "hamming": hamming_consistency(masks)})
    return rows


def _zoom_windows(h: int, w: int, q: QueryPoint) -> list[tuple[int, int, int, int]]:
    """Centered crops at the zoom scales, shifted to stay inside the image."""
    windows = []
    for scale in ZOOM_SCALES:
        ch, cw = max(1, round(h * scale)), max(1, round(w * scale))
        top = min(max(q.y - ch // 2, 0), h - ch)
        left = min(max(q.x - cw // 2, 0), w - cw)
        windows.append((top, left, ch, cw))
    if len({(wh, ww) for _, _, wh, ww in windows}) != len(ZOOM_SCALES):
        raise ValueError(f"image {h}x{w} too small for {len(ZOOM_SCALES)} distinct zoom crops")
    return windows


def zoom_consistency(predictor, image: np.ndarray, q: QueryPoint,
                     level: str = "texture", threshold: float = 0.5) -> float:
    """Predict on centered crops of decreasing size and compare the masks
    on the smallest crop's region (nearest-neighbor alignment)."""
    h, w = image.shape[:2]
    windows = _zoom_windows(h, w, q)
    s_top, s_left, s_h, s_w = windows[-1]
    aligned = []
    for top, left, ch, cw in windows:
        crop = image[top:top + ch, left:left + cw]
        local_q = QueryPoint(q.x - left, q.y - top, cw, ch)
        pred = predictor.with_window(top, left, ch, cw)(crop, local_q, level) \
            if hasattr(predictor, "with_window") else predictor(crop, local_q, level)
        mask = core.threshold_mask(pred, threshold)
        # nearest-neighbor lookup of the smallest window's pixels in this crop
        rows = (s_top - top) + np.arange(s_h)
        cols = (s_left - left) + np.arange(s_w)
        aligned.append(mask[np.ix_(rows, cols)])
    return hamming_consistency(aligned)


def illumination_consistency(predictor, variants: list[np.ndarray], q: QueryPoint,
                             level: str = "texture", threshold: float = 0.5) -> float:
    """Same click across relightings of one scene; annotations are shared,
    so a perfect predictor scores 0."""
    if len(variants) < 2:
        raise ValueError("need at least two illumination variants")
    masks = [core.threshold_mask(predictor(img, q, level), threshold) for img in variants]
    return hamming_consistency(masks)


def threshold_sensitivity(predictor, cases: list[tuple[np.ndarray, QueryPoint, np.ndarray]],
                          thresholds: np.ndarray, level: str = "texture") -> dict:
    """Mean IoU against ground truth per threshold, plus the max-minus-min
    spread over t in [0.3, 0.7] (lower spread = more confident scores)."""
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if not ((thresholds > 0).all() and (thresholds < 1).all()
            and (np.diff(thresholds) > 0).all()):
        raise ValueError("thresholds must be strictly increasing within (0, 1)")
    scored = [(predictor(img, q, level), gt) for img, q, gt in cases]
    curve = []
    for t in thresholds:
        vals = [iou(core.threshold_mask(s, float(t)), gt) for s, gt in scored]
        curve.append(float(np.mean(vals)))
    window = [v for t, v in zip(thresholds, curve) if 0.3 <= t <= 0.7]
    summary = float(max(window) - min(window)) if window else float(max(curve) - min(curve))
    return {"thresholds": thresholds.tolist(), "mean_iou": curve, "summary": summary}


# ---------------------------------------------------------------------------
# Report harness
# ---------------------------------------------------------------------------

@dataclass
class EvalCase:
    case_id: str
    image: np.ndarray
    q: QueryPoint
    gt_mask: np.ndarray
    level: str


def cases_from_records(records, levels: tuple[str, ...] = ("subtexture", "texture"),
                       queries_per_scene: int = 5, seed: int = 0,
                       variant: int = 0) -> list[EvalCase]:
    """Seeded query sampling over dataset scenes -> metric cases."""
    cases = []
    for rec in records:
        images = rec.images()
        image = images[min(variant, len(images) - 1)]
        ann = rec.annotation()
        h, w = ann.texture_ids.shape
        rng = core.make_rng(seed, hash(rec.path.name) & 0xFFFF)
        for i in range(queries_per_scene):
            q = QueryPoint(int(rng.integers(w)), int(rng.integers(h)), w, h)
            for level in levels:
                ids = ann.texture_ids if level == "texture" else ann.subtexture_ids
                gt = (ids == ids[q.y, q.x]).astype(np.uint8)
                cases.append(EvalCase(f"{rec.path.name}:q{i}", image, q, gt, level))
    return cases


def evaluate_cases(predictor, cases: list[EvalCase], threshold: float = 0.5) -> list[dict]:
    """Per-case L1 / IoU / F1 rows (binarizing at the fixed threshold)."""
    rows = []
    for case in cases:
        scores = predictor(case.image, case.q, case.level)
        mask = core.threshold_mask(scores, threshold)
        rows.append({"case_id": case.case_id, "level": case.level,
                     "l1": l1(scores, case.gt_mask),
                     "iou": iou(mask, case.gt_mask),
                     "f1": f1(mask, case.gt_mask)})
    return sorted(rows, key=lambda r: r["case_id"])


def summarize(rows: list[dict]) -> dict:
    """Aggregates, recomputable from the per-case rows."""
    out: dict = {"count": len(rows)}
    for level in sorted({r["level"] for r in rows}):
        sub = [r for r in rows if r["level"] == level]
        out[level] = {metric: float(np.mean([r[metric] for r in sub]))
                      for metric in ("l1", "iou", "f1")}
        out[level]["count"] = len(sub)
    return out


def write_report(rows: list[dict], summary: dict, csv_path, json_path) -> None:
    """CSV of per-case rows plus a JSON summary."""
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["case_id", "level", "l1", "iou", "f1"])
        writer.writeheader()
        writer.writerows(rows)
    Path(json_path).write_text(json.dumps(summary, indent=1, sort_keys=True))


def format_table(summary: dict) -> str:
    """Plain-text table: one row per level, columns L1 (down), IoU (up), F1 (up)."""
    lines = [f"{'level':<12s} {'L1 v':>8s} {'IoU ^':>8s} {'F1 ^':>8s} {'n':>5s}"]
    for level, stats in summary.items():
        if not isinstance(stats, dict):
            continue
        lines.append(f"{level:<12s} {stats['l1']:8.4f} {stats['iou']:8.4f} "
                     f"{stats['f1']:8.4f} {stats['count']:5d}")
    return "\n".join(lines)
