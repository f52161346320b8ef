"""Paired-training ablation suites: multi-resolution, multi-sampling, and
single-level, each trained under identical budgets and compared on the
relevant metric."""

from __future__ import annotations

import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from matselect import datagen as dg
from matselect import evaluation as ev
from matselect import trainer as tr

SUITES = ("multires", "multisample", "singlelevel")


def _mean_iou(model, records, subset: str | None, split: str = "holdout",
              level: str = "texture", queries: int = 6, seed: int = 9) -> float:
    recs = [r for r in records if r.split == split and (subset is None or r.subset == subset)]
    predictor = ev.CheckpointPredictor(model)
    cases = ev.cases_from_records(recs, levels=(level,), queries_per_scene=queries, seed=seed)
    rows = ev.evaluate_cases(predictor, cases)
    return float(np.mean([r["iou"] for r in rows]))


def _smoothed(losses: list[float], window: int = 100) -> list[float]:
    out = []
    for i in range(len(losses)):
        lo = max(0, i - window + 1)
        out.append(float(np.mean(losses[lo:i + 1])))
    return out


def run_multires(data_dir, out_dir, config: tr.TrainConfig) -> dict:
    """Two-level vs single-resolution model, same budget; compared by mean
    IoU on the thin-structure holdout subset (texture level)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, records = dg.load_dataset(data_dir)
    results = {}
    for name, cfg in (("multi_resolution", replace(config, single_resolution=False)),
                      ("single_resolution", replace(config, single_resolution=True))):
        run = tr.train(data_dir, cfg, out_checkpoint=out / f"{name}.msck",
                       loss_csv=out / f"{name}_loss.csv")
        results[name] = {
            "final_loss": run.losses[-1]["total"],
            "thin_iou": _mean_iou(run.model, records, subset="thin"),
            "standard_iou": _mean_iou(run.model, records, subset="standard"),
        }
    results["thin_iou_delta"] = results["multi_resolution"]["thin_iou"] \
        - results["single_resolution"]["thin_iou"]
    _write_comparison(out / "comparison.csv",
                      {k: v for k, v in results.items() if isinstance(v, dict)},
                      ["final_loss", "thin_iou", "standard_iou"])
    (out / "comparison.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    return results


def run_multisample(data_dir, out_dir, config: tr.TrainConfig) -> dict:
    """k-query vs single-query training at an equal images-seen budget.

    Reports the first step at which the k-query run's smoothed loss reaches
    the single-query run's final smoothed loss, plus both runs' threshold
    sensitivity on held-out scenes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, records = dg.load_dataset(data_dir)
    holdout = [r for r in records if r.split == "holdout"]
    runs = {}
    for name, cfg in (("multi_query", config),
                      ("single_query", tr.make_single_query_config(config))):
        run = tr.train(data_dir, cfg, out_checkpoint=out / f"{name}.msck",
                       loss_csv=out / f"{name}_loss.csv")
        cases = [(c.image, c.q, c.gt_mask) for c in ev.cases_from_records(
            holdout, levels=("texture",), queries_per_scene=4, seed=11)]
        sens = ev.threshold_sensitivity(ev.CheckpointPredictor(run.model), cases,
                                        np.linspace(0.3, 0.7, 9))
        runs[name] = {"losses": [r["total"] for r in run.losses],
                      "sensitivity": sens["summary"]}

    single_smoothed = _smoothed(runs["single_query"]["losses"])
    multi_smoothed = _smoothed(runs["multi_query"]["losses"])
    target = single_smoothed[-1]
    steps_to_match = next((i + 1 for i, v in enumerate(multi_smoothed) if v <= target),
                          len(multi_smoothed))
    results = {
        "single_query": {"final_smoothed_loss": target,
                         "sensitivity": runs["single_query"]["sensitivity"],
                         "steps": len(single_smoothed)},
        "multi_query": {"final_smoothed_loss": multi_smoothed[-1],
                        "sensitivity": runs["multi_query"]["sensitivity"],
                        "steps_to_match_single_final_loss": steps_to_match},
        "match_fraction": steps_to_match / len(single_smoothed),
    }
    _write_comparison(out / "comparison.csv", {k: v for k, v in results.items()
                                               if isinstance(v, dict)},
                      ["final_smoothed_loss", "sensitivity"])
    (out / "comparison.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    return results


def run_singlelevel(data_dir, out_dir, config: tr.TrainConfig) -> dict:
    """Joint two-level model vs two single-level models (one per level)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, records = dg.load_dataset(data_dir)
    results = {}
    joint = tr.train(data_dir, config, out_checkpoint=out / "joint.msck")
    results["joint"] = {
        level: _mean_iou(joint.model, records, subset=None, level=level)
        for level in ("subtexture", "texture")}
    for level in ("subtexture", "texture"):
        cfg = replace(config, single_level=level)
        run = tr.train(data_dir, cfg, out_checkpoint=out / f"single_{level}.msck")
        results[f"single_{level}"] = {
            level: _mean_iou(run.model, records, subset=None, level=level)}
    rows = {name: {f"iou_{lv}": v for lv, v in stats.items()}
            for name, stats in results.items()}
    _write_comparison(out / "comparison.csv", rows, ["iou_subtexture", "iou_texture"])
    (out / "comparison.json").write_text(json.dumps(results, indent=1, sort_keys=True))
    return results


def run_suite(suite: str, data_dir, out_dir, config: tr.TrainConfig) -> dict:
    if suite == "multires":
        return run_multires(data_dir, out_dir, config)
    if suite == "multisample":
        return run_multisample(data_dir, out_dir, config)
    if suite == "singlelevel":
        return run_singlelevel(data_dir, out_dir, config)
    raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")


def _write_comparison(path, rows: dict, columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant"] + columns)
        for name, stats in rows.items():
            writer.writerow([name] + [stats.get(c, "") for c in columns])
