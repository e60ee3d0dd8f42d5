"""Experiment orchestration behind the CLI.

Every function takes explicit paths and a config, writes its artefacts
(manifest, checkpoints, CSV logs and reports) and returns an in-memory
summary, so tests can drive the pipeline without a subprocess.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from .cloud import load_cloud, normalize_unit_sphere, save_cloud
from .config import ExperimentConfig
from .distort import RankedList, generate_dataset
from .errors import DataError, StagingError
from .evaluation import ndcg, ranking_from_scores, score_report
from .manifest import Manifest
from .metrics import MetricContext, orientation_of, pseudo_mos, rank_by_scores
from .model import load_checkpoint, save_checkpoint
from .shapes import make_references
from .training import (PatchBank, compute_features, finetune_scores, predict_list_scores, predict_scores,
                       pretrain_mpfe, train_lrl, _scored_items)

log = logging.getLogger(__name__)

CLOUD_SUFFIXES = (".ply", ".xyz")


def write_csv(path, rows, header):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            values = [row[h] for h in header] if isinstance(row, dict) else row
            w.writerow([_cell(v) for v in values])
    return path


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_log(path, rows):
    if not rows:
        return write_csv(path, [], ["epoch", "loss"])
    return write_csv(path, rows, list(rows[0].keys()))


# --------------------------------------------------------------------------
# dataset


def write_references(out_dir, count: int, n_points: int, seed: int):
    """Synthesise ``count`` normalised reference clouds as ply files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, cloud in make_references(count, n_points, seed):
        path = out_dir / f"{name}.ply"
        save_cloud(cloud, path)
        paths.append(path)
    return paths


def read_references(refs_dir):
    refs_dir = Path(refs_dir)
    if not refs_dir.is_dir():
        raise DataError(f"{refs_dir}: reference directory not found")
    files = sorted(p for p in refs_dir.iterdir() if p.suffix.lower() in CLOUD_SUFFIXES)
    if not files:
        raise DataError(f"{refs_dir}: no .ply or .xyz reference clouds")
    return [(p.stem, normalize_unit_sphere(load_cloud(p))) for p in files]


def synth(refs, dtypes, levels: int, seed: int, out_dir, name="lrl"):
    """Generate the dataset and write ``out_dir/manifest.json``."""
    if isinstance(refs, (str, Path)):
        refs = read_references(refs)
    manifest = generate_dataset(refs, list(dtypes), levels, out_dir, seed, name=name)
    path = manifest.save(Path(out_dir) / "manifest.json")
    counts = defaultdict(int)
    for lst in manifest.lists:
        counts[lst.dtype] += 1
    return path, dict(counts)


def compute_pmos(manifest_path, normal_k: int = 16):
    """Attach pseudo-MOS to every list item and rewrite the manifest."""
    manifest = Manifest.load(manifest_path)
    ref_cache = {}
    for lst in manifest.lists:
        if lst.reference not in ref_cache:
            ref_cache[lst.reference] = manifest.load_level_path(manifest.reference(lst.reference).path)
        ref = ref_cache[lst.reference]
        for lv in lst.levels:
            if lv.level == 0:
                lv.pseudo_mos = 1.0
            else:
                lv.pseudo_mos = pseudo_mos(ref, manifest.load_level(lv), normal_k)
    manifest.save(manifest_path)
    return manifest


# --------------------------------------------------------------------------
# full-reference baselines


def ranked_list_from_manifest(manifest, lst) -> RankedList:
    ref = manifest.load_level_path(manifest.reference(lst.reference).path)
    items = [(manifest.load_level(lv), lv.level, None) for lv in lst.levels]
    return RankedList(ref, items, lst.dtype)


def metric_rankings(manifest_path, metrics, out_dir, normal_k: int = 16):
    """Per-list metric values (CSV) and per-type mean NDCG of the induced
    rankings.  Returns ``(rows, ndcg_by_type)``."""
    manifest = Manifest.load(manifest_path)
    rows, list_ndcg = [], []
    for lst in manifest.lists:
        ranked = ranked_list_from_manifest(manifest, lst)
        per_metric = defaultdict(list)
        for cloud in ranked.clouds:
            ctx = MetricContext(ranked.reference, cloud, normal_k)
            for m in metrics:
                per_metric[m].append(ctx.metric(m))
        for m in metrics:
            results = per_metric[m]
            for lv, res in zip(lst.levels, results):
                rows.append({"list_id": f"{lst.id}@{lv.level}", "metric": m, "direction_ab": res.ab,
                             "direction_ba": res.ba, "symmetric": res.symmetric})
            order = rank_by_scores([r.symmetric for r in results], orientation_of(m))
            list_ndcg.append({"list_id": lst.id, "dtype": lst.dtype, "metric": m, "ndcg": ndcg(order)})
    out_dir = Path(out_dir)
    write_csv(out_dir / "metrics.csv", rows, ["list_id", "metric", "direction_ab", "direction_ba", "symmetric"])
    write_csv(out_dir / "metric_ndcg_lists.csv", list_ndcg, ["list_id", "dtype", "metric", "ndcg"])
    table = ndcg_table(list_ndcg, "metric")
    write_csv(out_dir / "metric_ndcg.csv", _table_rows(table), ["dtype", "metric", "value"])
    return rows, table


def ndcg_table(list_rows, method_key):
    """``{method: {dtype: mean, ..., 'MEAN': mean over lists}}``."""
    grouped = defaultdict(lambda: defaultdict(list))
    for r in list_rows:
        grouped[r[method_key]][r["dtype"]].append(r["ndcg"])
    table = {}
    for method, by_type in grouped.items():
        table[method] = {t: float(np.mean(v)) for t, v in by_type.items()}
        table[method]["MEAN"] = float(np.mean([x for v in by_type.values() for x in v]))
    return table


def _table_rows(table):
    rows = []
    for method, by_type in table.items():
        for dtype, value in by_type.items():
            rows.append({"dtype": dtype, "metric": method, "value": value})
    return rows


# --------------------------------------------------------------------------
# training stages


def _require_checkpoint(path, stages, what):
    if path is None or not Path(path).exists():
        raise StagingError(f"{what} needs a checkpoint from stage {' or '.join(stages)}; "
                           f"run `gqa {stages[0]}` first")
    model, meta = load_checkpoint(path)
    if meta["stage"] not in stages:
        raise StagingError(f"{path} is a {meta['stage']!r} checkpoint; {what} needs {' or '.join(stages)}")
    return model, meta


def run_pretrain(manifest_path, cfg: ExperimentConfig, out_dir):
    manifest = Manifest.load(manifest_path)
    model, report = pretrain_mpfe(manifest, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "pretrain.npz", "pretrain", {"config": cfg.to_dict()})
    write_log(out_dir / "pretrain_log.csv", report["log"])
    return out_dir / "pretrain.npz", report


def run_train(manifest_path, cfg: ExperimentConfig, checkpoint, out_dir, name="train"):
    model, _ = _require_checkpoint(checkpoint, ["pretrain"], "rank training")
    manifest = Manifest.load(manifest_path)
    model, report = train_lrl(manifest, model, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / f"{name}.npz", "train", {"config": cfg.to_dict()})
    write_log(out_dir / f"{name}_log.csv", report["log"])
    return out_dir / f"{name}.npz", report


def run_finetune(manifest_path, cfg: ExperimentConfig, checkpoint, out_dir):
    model, _ = _require_checkpoint(checkpoint, ["train"], "fine-tuning")
    manifest = Manifest.load(manifest_path)
    model, report = finetune_scores(manifest, model, cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "finetune.npz", "finetune", {"config": cfg.to_dict()})
    write_log(out_dir / "finetune_log.csv", report["log"])
    return out_dir / "finetune.npz", report


# --------------------------------------------------------------------------
# inference reports


def _subset_lists(manifest, cfg, subset, tcfg):
    if subset == "all":
        return manifest.lists
    from .training import split_lists

    train_lists, test_lists, _, _ = split_lists(manifest, tcfg, cfg.seed)
    return {"train": train_lists, "test": test_lists}[subset]


def run_rank(manifest_path, cfg: ExperimentConfig, checkpoint, out_dir, subset="all"):
    """Score and rank every list item; per-type and mean NDCG."""
    model, _ = _require_checkpoint(checkpoint, ["train", "finetune", "pretrain"], "ranking")
    model.config.uniform_weights = cfg.uniform_weights
    manifest = Manifest.load(manifest_path)
    lists = _subset_lists(manifest, cfg, subset, cfg.train)
    bank = PatchBank(manifest, cfg, model.dtype)
    scores = predict_list_scores(model, compute_features(model, bank, lists))
    rows, list_rows = [], []
    for lst in lists:
        s = scores[lst.id]
        order = ranking_from_scores(s)
        for lv, value in zip(lst.levels, s):
            rows.append({"list_id": lst.id, "level": lv.level, "score": float(value),
                         "predicted_position": order.index(lst.levels.index(lv)) + 1})
        list_rows.append({"list_id": lst.id, "dtype": lst.dtype, "method": "gqanet", "ndcg": ndcg(order)})
    out_dir = Path(out_dir)
    write_csv(out_dir / "rank_scores.csv", rows, ["list_id", "level", "score", "predicted_position"])
    write_csv(out_dir / "rank_lists.csv", list_rows, ["list_id", "dtype", "method", "ndcg"])
    table = ndcg_table(list_rows, "method")
    write_csv(out_dir / "rank_ndcg.csv", _table_rows(table), ["dtype", "metric", "value"])
    return table, list_rows


def run_score(manifest_path, cfg: ExperimentConfig, checkpoint, out_dir, subset="test"):
    """Predicted scores against pseudo-MOS with RMSE/PLCC/KRCC/SRCC."""
    model, _ = _require_checkpoint(checkpoint, ["finetune", "train"], "scoring")
    manifest = Manifest.load(manifest_path)
    lists = _subset_lists(manifest, cfg, subset, cfg.finetune)
    bank = PatchBank(manifest, cfg, model.dtype)
    feats = compute_features(model, bank, lists)
    x, y, keys = _scored_items(lists, feats)
    if x is None:
        raise DataError("no items to score")
    pred = predict_scores(model, x)
    truth = y.double().numpy()
    out_dir = Path(out_dir)
    pair_rows = [{"list_id": lid, "level": level, "predicted": float(p), "pseudo_mos": float(t)}
                 for (lid, level), p, t in zip(keys, pred, truth)]
    write_csv(out_dir / "score_pairs.csv", pair_rows, ["list_id", "level", "predicted", "pseudo_mos"])
    report = score_report(pred, truth)
    write_csv(out_dir / "score_report.csv", [report], ["RMSE", "PLCC", "KRCC", "SRCC"])
    return report, pair_rows


def read_score_pairs(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return (np.array([float(r["predicted"]) for r in rows]), np.array([float(r["pseudo_mos"]) for r in rows]))


def run_eval(manifest_path, cfg: ExperimentConfig, checkpoint, out_dir, subset="all", figures=True):
    """Model and full-reference NDCG per type, summary CSV and figure data."""
    out_dir = Path(out_dir)
    model_table, model_lists = run_rank(manifest_path, cfg, checkpoint, out_dir, subset)
    _, metric_table = metric_rankings(manifest_path, cfg.metrics, out_dir, cfg.normal_k)
    table = {**metric_table, **model_table}
    summary = _table_rows(table)
    write_csv(out_dir / "summary.csv", summary, ["dtype", "metric", "value"])
    spread = defaultdict(list)
    for r in model_lists:
        spread[r["dtype"]].append(r["ndcg"])
    fig_rows = [{"dtype": t, "mean": float(np.mean(v)), "std": float(np.std(v)), "lists": len(v)}
                for t, v in sorted(spread.items())]
    write_csv(out_dir / "fig_ndcg_by_type.csv", fig_rows, ["dtype", "mean", "std", "lists"])
    if figures:
        from .plots import plot_ndcg_by_type

        plot_ndcg_by_type(fig_rows, table, out_dir / "fig_ndcg_by_type.png")
    return table
