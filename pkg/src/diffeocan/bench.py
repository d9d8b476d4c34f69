"""Metrics, the naive / DiffeoNN / augmented comparison, and the invariance experiment."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .canon import CanonConfig, canonicalise, reverse_segmentation
from .energy import EnergyNets
from .io import write_pgm
from .nets.models import InnerModel

log = logging.getLogger(__name__)

SEG_HEADER = ("id", "model", "iou", "dice", "acc")
CLS_HEADER = ("id", "model", "pred", "label", "ce")


class BenchError(ValueError):
    pass


# ------------------------------------------------------------------ metrics

def _pair(a, b):
    a, b = np.asarray(a).astype(bool), np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise BenchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def iou(a, b) -> float:
    a, b = _pair(a, b)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def dice(a, b) -> float:
    a, b = _pair(a, b)
    denom = np.count_nonzero(a) + np.count_nonzero(b)
    return 1.0 if denom == 0 else 2.0 * np.count_nonzero(a & b) / denom


def pixel_accuracy(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean(a == b))


def cross_entropy(logits, label: int) -> float:
    z = np.asarray(logits, np.float64)
    z = z - z.max()
    return float(np.log(np.sum(np.exp(z))) - z[int(label)])


def quantiles(values) -> dict:
    v = np.asarray(values, np.float64)
    if v.size == 0:
        return {k: None for k in ("mean", "q1", "median", "q3", "min", "max")}
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"mean": float(v.mean()), "q1": float(q1), "median": float(med), "q3": float(q3),
            "min": float(v.min()), "max": float(v.max())}


# ------------------------------------------------------------------ predictors

def naive_segmenter(inner: InnerModel) -> Callable:
    return lambda x: inner.predict_mask(x)


def diffeonn_segmenter(inner: InnerModel, nets: EnergyNets, cfg: CanonConfig) -> Callable:
    def run(x):
        res = canonicalise(x, nets, cfg)
        return reverse_segmentation(inner(res.x_c), res)
    return run


def naive_classifier(inner: InnerModel) -> Callable:
    return lambda x: inner(x)


def diffeonn_classifier(inner: InnerModel, nets: EnergyNets, cfg: CanonConfig) -> Callable:
    return lambda x: inner(canonicalise(x, nets, cfg).x_c)


# ------------------------------------------------------------------ benchmark

@dataclass
class MetricReport:
    task: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def means(self, metric: str) -> dict:
        return {m: s[metric]["mean"] for m, s in self.summary.items()}

    def to_csv(self) -> str:
        header = SEG_HEADER if self.task == "segmentation" else CLS_HEADER
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        for r in self.rows:
            wr.writerow([_fmt(r[k]) for k in header])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps(self.summary, indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_benchmark(models: dict, test: list, task: str = "segmentation",
                  required=("naive", "diffeonn", "augmented"), out_dir=None,
                  prefix: str = "bench", jobs: int = 1) -> MetricReport:
    """Evaluate every model on the same samples.

    ``models`` maps a name to a predictor: ``x -> mask`` for segmentation,
    ``x -> logits`` for classification.  Writes ``<prefix>_samples.csv`` and
    ``<prefix>_summary.json`` under ``out_dir`` when given.
    """
    if task not in ("segmentation", "classification"):
        raise BenchError(f"unknown task {task!r}")
    missing = [m for m in required if models.get(m) is None]
    if missing:
        raise BenchError(f"missing model(s): {', '.join(missing)}")
    report = MetricReport(task)
    metrics = ("iou", "dice", "acc") if task == "segmentation" else ("acc", "ce")
    for name, predict in models.items():
        outs = _map(lambda s: predict(s.image), test, jobs)
        per = {k: [] for k in metrics}
        for s, out in zip(test, outs):
            if task == "segmentation":
                row = {"id": s.id, "model": name, "iou": iou(out, s.label),
                       "dice": dice(out, s.label), "acc": pixel_accuracy(out, s.label)}
            else:
                # ties go to the lowest class id (np.argmax returns the first maximum)
                pred = int(np.argmax(out))
                row = {"id": s.id, "model": name, "pred": pred, "label": int(s.label),
                       "ce": cross_entropy(out, s.label), "acc": float(pred == int(s.label))}
            report.rows.append(row)
            for k in metrics:
                per[k].append(row[k])
        report.summary[name] = {k: quantiles(v) for k, v in per.items()}
        log.info("%s: %s", name, {k: round(report.summary[name][k]["mean"], 4) for k in metrics})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{prefix}_samples.csv").write_text(report.to_csv())
        (out / f"{prefix}_summary.json").write_text(report.to_json())
    return report


# ------------------------------------------------------------------ invariance

def relative_gap(a: float, b: float) -> float:
    """|a - b| / max(|a|, |b|); 0 when both vanish."""
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0 else abs(a - b) / scale


def panel(images, sep: int = 2) -> np.ndarray:
    """Images side by side, separated by white columns."""
    h = images[0].shape[0]
    bar = np.ones((h, sep), np.float32)
    cols = []
    for i, im in enumerate(images):
        if i:
            cols.append(bar)
        cols.append(np.asarray(im, np.float32))
    return np.concatenate(cols, axis=1)


INV_HEADER = ("id", "pre_a", "pre_b", "post_a", "post_b", "pre_gap", "post_gap")


@dataclass
class InvarianceReport:
    rows: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.rows)

    @property
    def median_pre_gap(self):
        return float(np.median([r["pre_gap"] for r in self.rows])) if self.rows else None

    @property
    def median_post_gap(self):
        return float(np.median([r["post_gap"] for r in self.rows])) if self.rows else None

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(INV_HEADER)
        for r in self.rows:
            wr.writerow([_fmt(r[k]) for k in INV_HEADER])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"n": self.n, "median_pre_gap": self.median_pre_gap,
                "median_post_gap": self.median_post_gap}


def invariance_check(pairs: list, nets: EnergyNets, cfg: CanonConfig = CanonConfig(),
                     out_dir=None, ids: list | None = None, jobs: int = 1) -> InvarianceReport:
    """Canonicalise both members of each (x, g'.x) pair and compare total energies."""
    report = InvarianceReport()
    if not pairs:
        return report
    ids = ids or [f"pair{k:04d}" for k in range(len(pairs))]
    flat = [im for pair in pairs for im in pair]
    results = _map(lambda x: canonicalise(x, nets, cfg), flat, jobs)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "panels").mkdir(parents=True, exist_ok=True)
    for k, (a, b) in enumerate(pairs):
        ra, rb = results[2 * k], results[2 * k + 1]
        pre_a, pre_b = ra.initial.total, rb.initial.total
        post_a, post_b = ra.best.total, rb.best.total
        report.rows.append({"id": ids[k], "pre_a": pre_a, "pre_b": pre_b,
                            "post_a": post_a, "post_b": post_b,
                            "pre_gap": relative_gap(pre_a, pre_b),
                            "post_gap": relative_gap(post_a, post_b)})
        if out is not None:
            write_pgm(out / "panels" / f"{ids[k]}.pgm", panel([a, ra.x_c, b, rb.x_c]))
    if out is not None:
        (out / "invariance.csv").write_text(report.to_csv())
        (out / "invariance_summary.json").write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    return report
