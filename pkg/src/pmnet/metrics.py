"""Example-based and label-based multi-label metrics.

Conventions for empty denominators: precision is 0 when nothing was
predicted, recall is 0 when nothing was present. An example without any
true scene scores 0 on every example metric and still counts in the means.
F scores are computed per example and then averaged.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .numcore import ShapeError


@dataclass(frozen=True)
class LabelScore:
    scene: str
    precision: float
    recall: float
    support: int


@dataclass
class MetricsReport:
    mean_f1: float
    mean_f2: float
    mean_example_precision: float
    mean_example_recall: float
    mean_label_precision: float
    mean_label_recall: float
    per_label: list[LabelScore] = field(default_factory=list)
    threshold: float = 0.5
    num_examples: int = 0

    COLUMNS = ("m.F1", "m.F2", "m.p_e", "m.r_e", "m.p_l", "m.r_l")

    def means(self) -> tuple[float, ...]:
        return (self.mean_f1, self.mean_f2, self.mean_example_precision,
                self.mean_example_recall, self.mean_label_precision, self.mean_label_recall)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_label"] = [asdict(p) for p in self.per_label]
        return d

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value", "percent"])
        for name, v in zip(self.COLUMNS, self.means()):
            w.writerow([name, f"{v:.4f}", f"{100 * v:.2f}"])
        w.writerow([])
        w.writerow(["scene", "precision", "recall", "support"])
        for p in self.per_label:
            w.writerow([p.scene, f"{p.precision:.4f}", f"{p.recall:.4f}", p.support])
        return buf.getvalue()

    def to_text(self, title: str | None = None) -> str:
        lines = []
        if title:
            lines.append(title)
        lines.append(f"# threshold = {self.threshold:g}, examples = {self.num_examples}")
        lines.append("".join(f"{c:>10}" for c in self.COLUMNS))
        lines.append("".join(f"{100 * v:>10.2f}" for v in self.means()))
        lines.append("")
        width = max([len(p.scene) for p in self.per_label] + [5])
        lines.append(f"{'scene':<{width}}  {'p_l':>8}  {'r_l':>8}  {'support':>8}")
        for p in self.per_label:
            lines.append(f"{p.scene:<{width}}  {100 * p.precision:>8.2f}  {100 * p.recall:>8.2f}  {p.support:>8d}")
        return "\n".join(lines) + "\n"


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def f_beta(p, r, beta: float = 1.0):
    """(1 + b^2) p r / (b^2 p + r), taken as 0 when both p and r are 0."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    p = np.asarray(p, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    # p*r first keeps the beta <-> 1/beta swap an exact rescaling for powers of two
    out = _ratio((1 + b2) * (p * r), b2 * p + r)
    out = np.where(p == r, p, out)
    return float(out) if out.ndim == 0 else out


def _counts(pred: np.ndarray, truth: np.ndarray, axis: int):
    tp = np.sum((pred == 1) & (truth == 1), axis=axis)
    fp = np.sum((pred == 1) & (truth == 0), axis=axis)
    fn = np.sum((pred == 0) & (truth == 1), axis=axis)
    return tp, fp, fn


def _binary(a, name) -> np.ndarray:
    a = np.asarray(a)
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{name} must be multi-hot 0/1")
    return a.astype(np.int64)


def example_prf(pred, truth) -> tuple[float, float]:
    pred, truth = _binary(pred, "pred"), _binary(truth, "truth")
    if pred.shape != truth.shape:
        raise ShapeError(f"pred {pred.shape} vs truth {truth.shape}")
    tp, fp, fn = _counts(pred, truth, axis=-1)
    if tp + fn == 0:
        return 0.0, 0.0
    return float(_ratio(tp, tp + fp)), float(_ratio(tp, tp + fn))


def example_scores(preds, truths) -> dict[str, np.ndarray]:
    """Per-example p_e, r_e, F1 and F2 for aligned N x S arrays."""
    preds, truths = _binary(preds, "preds"), _binary(truths, "truths")
    if preds.shape != truths.shape or preds.ndim != 2:
        raise ShapeError(f"preds {preds.shape} vs truths {truths.shape}")
    tp, fp, fn = _counts(preds, truths, axis=1)
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    empty = (tp + fn) == 0
    p[empty] = 0.0
    r[empty] = 0.0
    return {"p": p, "r": r, "f1": f_beta(p, r, 1.0), "f2": f_beta(p, r, 2.0)}


def label_prf(preds, truths):
    """Per-scene precision/recall from counts pooled over all examples.

    Returns ``(precision, recall, support, mean_precision, mean_recall)``.
    """
    preds, truths = _binary(preds, "preds"), _binary(truths, "truths")
    if preds.ndim != 2 or preds.shape != truths.shape:
        raise ShapeError(f"preds {preds.shape} vs truths {truths.shape}")
    tp, fp, fn = _counts(preds, truths, axis=0)
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return p, r, tp + fn, float(p.mean()), float(r.mean())


def report_from_predictions(
    preds, truths, scene_names: Sequence[str] | None = None, threshold: float = 0.5
) -> MetricsReport:
    preds, truths = np.asarray(preds), np.asarray(truths)
    if preds.shape[0] == 0:
        raise ValueError("cannot evaluate an empty dataset")
    ex = example_scores(preds, truths)
    p_l, r_l, support, mp_l, mr_l = label_prf(preds, truths)
    names = list(scene_names) if scene_names is not None else [f"scene{i}" for i in range(preds.shape[1])]
    if len(names) != preds.shape[1]:
        raise ShapeError("scene_names length differs from label width")
    per_label = [LabelScore(n, float(a), float(b), int(c)) for n, a, b, c in zip(names, p_l, r_l, support)]
    return MetricsReport(
        mean_f1=float(ex["f1"].mean()),
        mean_f2=float(ex["f2"].mean()),
        mean_example_precision=float(ex["p"].mean()),
        mean_example_recall=float(ex["r"].mean()),
        mean_label_precision=mp_l,
        mean_label_recall=mr_l,
        per_label=per_label,
        threshold=threshold,
        num_examples=int(preds.shape[0]),
    )


def threshold_probs(probs, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(probs) >= threshold).astype(np.int64)


def evaluate(model, dataset, threshold: float = 0.5, scene_names: Sequence[str] | None = None) -> MetricsReport:
    """Threshold ``model.predict_proba`` on a list of multi-scene samples."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    x = np.stack([s.features for s in dataset])
    y = np.stack([s.labels for s in dataset])
    probs = model.predict_proba(x)
    names = scene_names if scene_names is not None else getattr(model, "scene_names", None)
    return report_from_predictions(threshold_probs(probs, threshold), y, names, threshold)


def threshold_sweep(probs, truths, thresholds) -> list[tuple[float, MetricsReport]]:
    return [(t, report_from_predictions(threshold_probs(probs, t), truths, threshold=t)) for t in thresholds]
