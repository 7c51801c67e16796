"""Ablation sweeps: head count, multi-prototype clustering, frozen embedding,
triplet loss and relevance-as-prediction."""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numcore import NumericError
from .trainer import PipelineConfig, run_phase1, run_two_phase

log = logging.getLogger(__name__)

HEAD_COUNTS = (1, 5, 10, 20, 30, 40)
CLUSTER_COUNTS = (1, 2, 3, 4)


def sweep_settings(name: str, head_counts=HEAD_COUNTS, cluster_counts=CLUSTER_COUNTS) -> list[tuple[str, str, float, dict]]:
    """``(series, label, x, config overrides)`` for every setting of a sweep."""
    if name == "heads":
        return [("heads", f"H={h}", h, {"num_heads": h}) for h in head_counts]
    if name == "clusters":
        out = [("mean", "mean k=1", 1, {"cluster_method": "mean", "prototypes_per_scene": 1})]
        for method in ("kmeans", "agglomerative"):
            out += [(method, f"{method} k={k}", k, {"cluster_method": method, "prototypes_per_scene": k})
                    for k in cluster_counts]
        return out
    if name == "freeze":
        return [("embedding", "trainable", 0, {"freeze_embedding": False}),
                ("embedding", "frozen", 1, {"freeze_embedding": True})]
    if name == "loss":
        return [("loss", "cross_entropy", 0, {"loss_kind": "cross_entropy"}),
                ("loss", "triplet", 1, {"loss_kind": "triplet"})]
    if name == "relevance":
        return [("prediction", "standard", 0, {"mode": "standard"}),
                ("prediction", "relevance_as_prediction", 1, {"mode": "relevance_as_prediction", "num_heads": 1})]
    raise ValueError(f"unknown sweep {name!r}")


SWEEPS = ("heads", "clusters", "freeze", "loss", "relevance")


@dataclass
class RunRecord:
    sweep: str
    series: str
    setting: str
    x: float
    seed: int
    mean_f1: float
    mean_f2: float
    mean_example_precision: float
    mean_example_recall: float
    mean_label_precision: float
    mean_label_recall: float
    seconds: float
    status: str = "ok"


@dataclass
class SettingSummary:
    sweep: str
    series: str
    setting: str
    x: float
    n: int
    mean_f1: float
    std_f1: float
    failures: int


def _phase1_key(cfg: PipelineConfig):
    return (cfg.seed, cfg.loss_kind, cfg.embed_dim, cfg.hidden, cfg.head_hidden, cfg.phase1, cfg.val_fraction,
            cfg.triplet_alpha)


def _run_seed(sweep, settings, base: PipelineConfig, seed, data) -> list[RunRecord]:
    single, class_names, multi_train, multi_test = data
    phase1_cache = {}
    out = []
    for series, label, x, overrides in settings:
        cfg = dataclasses.replace(base, seed=seed, **overrides)
        t0 = time.perf_counter()
        try:
            key = _phase1_key(cfg)
            if key not in phase1_cache:
                phase1_cache[key] = run_phase1(cfg, single, class_names)
            res = run_two_phase(cfg, single, class_names, multi_train, multi_test, phase1=phase1_cache[key])
            m = res.metrics.means()
            if not all(math.isfinite(v) for v in m):
                raise NumericError("non-finite metric")
            status = "ok"
        except (NumericError, FloatingPointError) as exc:
            m = (math.nan,) * 6
            status = f"error: {exc}"
        dt = time.perf_counter() - t0
        log.info("%s %s seed=%d f1=%.4f (%.1fs)", sweep, label, seed, m[0], dt)
        out.append(RunRecord(sweep, series, label, float(x), seed, *m, dt, status))
    return out


def run_sweep(
    sweep: str,
    base: PipelineConfig,
    single,
    class_names: Sequence[str],
    multi_train,
    multi_test,
    seeds: Sequence[int] = (0, 1, 2),
    workers: int = 1,
    head_counts=HEAD_COUNTS,
    cluster_counts=CLUSTER_COUNTS,
) -> list[RunRecord]:
    """Run every setting of ``sweep`` for each seed.

    Seeds are distributed over ``workers`` processes; records come back in
    (seed, setting) order regardless of scheduling.
    """
    settings = sweep_settings(sweep, head_counts, cluster_counts)
    data = (list(single), list(class_names), list(multi_train), list(multi_test))
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_seed, sweep, settings, base, s, data) for s in seeds]
            chunks = [f.result() for f in futures]
    else:
        chunks = [_run_seed(sweep, settings, base, s, data) for s in seeds]
    return [r for chunk in chunks for r in chunk]


def summarize(records: Sequence[RunRecord]) -> list[SettingSummary]:
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault((r.sweep, r.series, r.setting, r.x), []).append(r)
    out = []
    for (sweep, series, setting, x), rs in groups.items():
        f1 = np.array([r.mean_f1 for r in rs if r.status == "ok"])
        std = float(f1.std(ddof=1)) if f1.size > 1 else 0.0
        mean = float(f1.mean()) if f1.size else math.nan
        out.append(SettingSummary(sweep, series, setting, x, len(rs), mean, std, len(rs) - f1.size))
    return out


def _csv(rows, fields) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for r in rows:
        w.writerow([f"{v:.6f}" if isinstance(v, float) else v for v in (getattr(r, f) for f in fields)])
    return buf.getvalue()


def runs_csv(records: Sequence[RunRecord]) -> str:
    return _csv(records, [f.name for f in dataclasses.fields(RunRecord)])


def summary_csv(summary: Sequence[SettingSummary]) -> str:
    return _csv(summary, [f.name for f in dataclasses.fields(SettingSummary)])


def plot_data(summary: Sequence[SettingSummary]) -> str:
    """Whitespace-separated ``series x mean_f1 std_f1`` rows for external plotters."""
    lines = ["# series x mean_f1 std_f1"]
    for s in summary:
        lines.append(f"{s.series} {s.x:g} {s.mean_f1:.6f} {s.std_f1:.6f}")
    return "\n".join(lines) + "\n"
