"""Orchestrate train -> attribute -> evaluate over the (model x method x metric) grid."""

from __future__ import annotations

import json
import logging
import os
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import report
from .attribution import MethodConfig, attribute
from .config import ConfigError, ExperimentConfig, build_layers
from .container import atomic_write, encode_model, load_model
from .data import LabeledDataset, NoiseSpec, load_dataset, noisy_images, synth_dataset
from .metrics import (AucSummary, EvalCurve, auc, deletion_curve, evalattai_curve, insertion_curve,
                      normalize_against_random)
from .tensor_core import Model, TrainConfig, accuracy, init_model, predict_batch, train

log = logging.getLogger(__name__)

RANDOM = "random"


def derive_seed(master: int, *keys) -> int:
    """Stable 63-bit seed from a master seed and string/int keys."""
    words = [int(master)]
    for k in keys:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return int(np.random.SeedSequence(words).generate_state(2, dtype=np.uint32).view(np.uint64)[0] >> 1)


# --------------------------------------------------------------------------
# data and models


def load_data(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """Return (train split, evaluation subset)."""
    ds_cfg = cfg.dataset
    if ds_cfg.source == "synth":
        full = synth_dataset(ds_cfg.n, ds_cfg.classes, ds_cfg.shape, seed=derive_seed(cfg.seed, "dataset"))
    elif ds_cfg.source == "idx":
        full = load_dataset(ds_cfg.path, "idx", labels_path=ds_cfg.labels_path)
    else:
        full = load_dataset(ds_cfg.path, "csv", shape=ds_cfg.shape)
    n_train = ds_cfg.train_size if ds_cfg.train_size is not None else len(full) - cfg.eval_subset_size
    if n_train < 0 or len(full) - n_train < cfg.eval_subset_size:
        raise ConfigError("eval.subset_size", f"{cfg.eval_subset_size} exceeds the held-out images "
                          f"({len(full)} total, {max(n_train, 0)} for training)")
    tr = LabeledDataset(full.images[:n_train], full.labels[:n_train], full.class_count)
    ev = LabeledDataset(full.images[n_train:n_train + cfg.eval_subset_size],
                        full.labels[n_train:n_train + cfg.eval_subset_size], full.class_count)
    return tr, ev


@dataclass
class _TrainJob:
    index: int
    name: str
    training: str
    snr_db: float
    layers: str
    weights: str | None
    shape: tuple
    classes: int
    train_cfg: TrainConfig
    master: int


class _NoiseAugment:
    def __init__(self, snr_db, seed):
        self.spec = NoiseSpec(snr_db, seed)

    def __call__(self, images, epoch):
        return noisy_images(images, self.spec, stream=epoch)


def _train_one(job: _TrainJob, train_ds: LabeledDataset) -> Model:
    if job.weights:
        return load_model(job.weights, job.classes, job.shape)
    layers = build_layers(job.layers, job.shape, job.classes)
    model = init_model(layers, job.classes, derive_seed(job.master, "init", job.name), job.shape)
    if len(train_ds) == 0:
        if job.train_cfg.epochs > 0:
            raise ConfigError("dataset.train_size", f"model {job.name!r} needs training images")
        return model
    augment = None
    if job.training == "robust":
        augment = _NoiseAugment(job.snr_db, derive_seed(job.master, "noise", job.name))
    tcfg = replace(job.train_cfg, seed=derive_seed(job.master, "train", job.name))
    return train(model, train_ds, tcfg, augment)


def train_models(cfg: ExperimentConfig, train_ds: LabeledDataset, shape, classes, jobs: int = 1) -> dict[str, Model]:
    work = [_TrainJob(i, m.name, m.training, m.snr_db, m.layers, m.weights, tuple(shape), classes,
                      cfg.train, cfg.seed) for i, m in enumerate(cfg.models)]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            models = list(pool.map(_train_one, work, [train_ds] * len(work)))
    else:
        models = [_train_one(w, train_ds) for w in work]
    return {w.name: m for w, m in zip(work, models)}


# --------------------------------------------------------------------------
# evaluation cells


@dataclass
class _Cell:
    model_name: str
    model: Model
    method: str
    metrics: list
    images: np.ndarray
    labels: np.ndarray
    method_cfg: MethodConfig
    seed: int
    cfg: ExperimentConfig
    fill: tuple


def _evaluate_cell(cell: _Cell) -> list[EvalCurve]:
    cfg = cell.cfg
    model, x = cell.model, cell.images
    classes = cell.labels if cfg.target == "label" else predict_batch(model, x)
    attrs = attribute(cell.method, model, x, classes, cell.method_cfg, cell.seed)
    curves = []
    for metric in cell.metrics:
        if metric == "deletion":
            c = deletion_curve(model, x, attrs, replace(cfg.deletion, fill=cell.fill), cell.labels)
        elif metric == "insertion":
            c = insertion_curve(model, x, attrs, replace(cfg.deletion, fill=cell.fill), cell.labels)
        else:
            def recompute(xs, cls, idx, _m=cell.method):
                return attribute(_m, model, xs, cls, cell.method_cfg, cell.seed, idx)
            c = evalattai_curve(model, x, attrs, cfg.evalattai, cell.labels, recompute)
        curves.append(replace(c, method=cell.method, model=cell.model_name))
    return curves


@dataclass
class RunResult:
    raw: list[EvalCurve]
    normalized: list[EvalCurve]
    aucs: list[AucSummary]
    ranking: report.RankingTable
    files: list[str]
    train_accuracy: dict[str, float] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)


def run_experiment(cfg: ExperimentConfig, out_dir: str | None = None, seed: int | None = None,
                   jobs: int = 1) -> RunResult:
    """Run the full grid and write reports under ``out_dir``.

    Every (model, metric) also gets the random baseline, which is what the
    other curves are normalized against.  On failure, files written so far
    are removed.
    """
    if seed is not None:
        cfg = replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
    out_dir = out_dir or cfg.output_dir
    written: list[str] = []

    def write(rel: str, data) -> None:
        path = os.path.join(out_dir, rel)
        atomic_write(path, data.encode("utf-8") if isinstance(data, str) else data)
        written.append(path)

    timings: dict[str, float] = {}
    try:
        t = time.perf_counter()
        train_ds, eval_ds = load_data(cfg)
        timings["data"] = time.perf_counter() - t

        t = time.perf_counter()
        models = train_models(cfg, train_ds, eval_ds.shape, eval_ds.class_count, jobs)
        timings["train"] = time.perf_counter() - t
        train_acc = {n: accuracy(m, train_ds.images, train_ds.labels) if len(train_ds) else float("nan")
                     for n, m in models.items()}
        for name, m in models.items():
            write(f"models/{_safe(name)}.evat", encode_model(m))

        method_cfg = cfg.method
        if cfg.ig_baseline == "mean":
            method_cfg = replace(method_cfg, ig_baseline=eval_ds.channel_means)
        fill = tuple(float(v) for v in eval_ds.channel_means)
        methods = [m for m in cfg.methods if m != RANDOM]

        t = time.perf_counter()
        cells = []
        for mi, entry in enumerate(cfg.models):
            for method in [RANDOM] + methods:
                cells.append(_Cell(entry.name, models[entry.name], method, cfg.metrics, eval_ds.images,
                                   eval_ds.labels, method_cfg, derive_seed(cfg.seed, "attr", entry.name, method),
                                   cfg, fill))
        if jobs > 1 and len(cells) > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_evaluate_cell, cells))
        else:
            results = [_evaluate_cell(c) for c in cells]
        timings["evaluate"] = time.perf_counter() - t

        t = time.perf_counter()
        by_key = {(c.model, c.metric, c.method): c for curves in results for c in curves}
        raw, normalized, aucs = [], [], []
        for entry in cfg.models:
            for metric in cfg.metrics:
                base = by_key[(entry.name, metric, RANDOM)]
                raw.append(base)
                for method in methods:
                    raw.append(by_key[(entry.name, metric, method)])
                normed = {m: normalize_against_random(by_key[(entry.name, metric, m)], base)
                          for m in [RANDOM] + methods}
                for method in cfg.methods:
                    normalized.append(normed[method])
                for method in [RANDOM] + methods:
                    aucs.append(auc(normed[method]))
        table, rank_csv, rank_md = report.emit_ranking_table(aucs)

        write("curves.csv", report.curves_csv(raw + normalized))
        write("auc.csv", report.auc_csv(aucs))
        write("ranking.csv", rank_csv)
        write("ranking.md", rank_md)
        for entry in cfg.models:
            for metric in cfg.metrics:
                stem = f"charts/{_safe(entry.name)}_{metric}"
                mine = [c for c in raw if c.model == entry.name and c.metric == metric]
                write(f"{stem}.svg", report.line_chart(mine, f"{metric} - {entry.name}"))
                norm = [normalize_against_random(c, mine[0]) for c in mine]
                write(f"{stem}_normalized.svg", report.line_chart(norm, f"{metric} (normalized) - {entry.name}",
                                                                  ylabel="accuracy / random"))
                bars = [a for a in aucs if a.model == entry.name and a.metric == metric]
                write(f"{stem}_auc.svg", report.bar_chart(bars, f"{metric} AUC (normalized) - {entry.name}"))
        timings["report"] = time.perf_counter() - t

        diagnostics = [f"{c.model}/{c.metric}/{c.method}: {d}" for c in raw for d in c.diagnostics]
        manifest = {
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "models": {n: {"train_accuracy": train_acc[n]} for n in models},
            "n_eval_images": len(eval_ds),
            "timings_seconds": timings,
            "diagnostics": diagnostics,
            "files": sorted(os.path.relpath(p, out_dir) for p in written) + ["manifest.json"],
        }
        write("manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except BaseException:
        for p in written:
            if os.path.exists(p):
                os.unlink(p)
        raise
    return RunResult(raw, normalized, aucs, table, written, train_acc, timings)


def train_only(cfg: ExperimentConfig, out_dir: str | None = None, jobs: int = 1) -> dict[str, tuple[str, float]]:
    """Train every configured model and save its weights; returns name -> (path, train accuracy)."""
    out_dir = out_dir or cfg.output_dir
    train_ds, eval_ds = load_data(cfg)
    models = train_models(cfg, train_ds, eval_ds.shape, eval_ds.class_count, jobs)
    out = {}
    for name, m in models.items():
        path = os.path.join(out_dir, "models", f"{_safe(name)}.evat")
        atomic_write(path, encode_model(m))
        acc = accuracy(m, train_ds.images, train_ds.labels) if len(train_ds) else float("nan")
        out[name] = (path, acc)
    return out
