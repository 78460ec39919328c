"""Confusion-matrix metrics, 95% intervals and dice overlap."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

CI_METHODS = ("wald-clipped", "wilson")
REPORT_HEADER = ("metric", "value", "ci_low", "ci_high", "ci_method", "n")


class UndefinedMetricError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def positives(self) -> int:
        return self.tp + self.fn

    @property
    def negatives(self) -> int:
        return self.tn + self.fp


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    ci_low: float
    ci_high: float
    ci_method: str
    n: int

    def row(self):
        return (self.name, f"{self.value:.6f}", f"{self.ci_low:.6f}", f"{self.ci_high:.6f}", self.ci_method, self.n)

    def __str__(self):
        return f"{self.name:<12} {self.value:.3f}  95% CI ({self.ci_low:.2f}, {self.ci_high:.2f})  [{self.ci_method}, n={self.n}]"


def _binary(a, name):
    arr = np.asarray(a).astype(int).ravel()
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError(f"{name} must be binary")
    return arr


def confusion(preds, labels) -> ConfusionMatrix:
    p = _binary(preds, "predictions")
    t = _binary(labels, "labels")
    if p.size != t.size:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} labels")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (t == 1))),
        fn=int(np.sum((p == 0) & (t == 1))),
        tn=int(np.sum((p == 0) & (t == 0))),
        fp=int(np.sum((p == 1) & (t == 0))),
    )


def z_value(level: float) -> float:
    # two-decimal table value, 1.96 at 95%
    return round(NormalDist().inv_cdf(0.5 + level / 2), 2)


def ci_estimate(successes: int, n: int, method: str = "wald-clipped", level: float = 0.95):
    if n <= 0:
        raise UndefinedMetricError("confidence interval needs n > 0")
    if not 0 <= successes <= n:
        raise ValueError(f"successes {successes} outside [0, {n}]")
    z = z_value(level)
    p = successes / n
    if method == "wald-clipped":
        half = z * math.sqrt(p * (1 - p) / n)
        return max(0.0, p - half), min(1.0, p + half)
    if method == "wilson":
        z2 = z * z
        denom = 1 + z2 / n
        centre = (p + z2 / (2 * n)) / denom
        half = z / denom * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n))
        lo = 0.0 if successes == 0 else centre - half
        hi = 1.0 if successes == n else centre + half
        return lo, hi
    raise ValueError(f"unknown CI method {method!r}; choose from {CI_METHODS}")


def _proportion(name, k, n, method, level):
    if n == 0:
        raise UndefinedMetricError(f"{name} is undefined: zero denominator")
    lo, hi = ci_estimate(k, n, method, level)
    return MetricReport(name, k / n, lo, hi, method, n)


def sensitivity(cm: ConfusionMatrix, method: str = "wald-clipped", level: float = 0.95) -> MetricReport:
    return _proportion("sensitivity", cm.tp, cm.tp + cm.fn, method, level)


def specificity(cm: ConfusionMatrix, method: str = "wald-clipped", level: float = 0.95) -> MetricReport:
    return _proportion("specificity", cm.tn, cm.tn + cm.fp, method, level)


def precision_value(cm: ConfusionMatrix) -> float:
    if cm.tp + cm.fp == 0:
        raise UndefinedMetricError("precision is undefined: no positive predictions")
    return cm.tp / (cm.tp + cm.fp)


def f1_value(cm: ConfusionMatrix) -> float:
    prec = precision_value(cm)
    if cm.tp + cm.fn == 0:
        raise UndefinedMetricError("sensitivity is undefined: no positive cases")
    sens = cm.tp / (cm.tp + cm.fn)
    if prec + sens == 0:
        return 0.0
    return 2 * prec * sens / (prec + sens)


@dataclass(frozen=True)
class BootstrapCI:
    low: float
    high: float
    used: int
    skipped: int


def f1_bootstrap_ci(preds, labels, resamples: int = 2000, seed: int = 0, level: float = 0.95) -> BootstrapCI:
    """Percentile bootstrap over cases; resamples without positives/predictions are skipped."""
    if resamples < 1000:
        raise ValueError("use at least 1000 bootstrap resamples")
    p = _binary(preds, "predictions")
    t = _binary(labels, "labels")
    if p.size != t.size or p.size == 0:
        raise ValueError("predictions and labels must be non-empty and of equal length")
    rng = np.random.Generator(np.random.PCG64(seed))
    idx = rng.integers(0, p.size, size=(resamples, p.size))
    pp, tt = p[idx], t[idx]
    tp = np.sum(pp & tt, axis=1)
    fp = np.sum(pp & (1 - tt), axis=1)
    fn = np.sum((1 - pp) & tt, axis=1)
    ok = (tp + fp > 0) & (tp + fn > 0)
    f1 = 2 * tp[ok] / (2 * tp[ok] + fp[ok] + fn[ok])
    if f1.size == 0:
        raise UndefinedMetricError("every bootstrap resample was degenerate")
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(f1, [tail, 100 - tail])
    return BootstrapCI(float(lo), float(hi), int(f1.size), int(resamples - f1.size))


def f1(cm: ConfusionMatrix, preds=None, labels=None, resamples: int = 2000, seed: int = 0) -> MetricReport:
    """F1 with a bootstrap interval; the per-case flags are rebuilt from ``cm`` if omitted."""
    value = f1_value(cm)
    if preds is None:
        preds, labels = flags_from_confusion(cm)
    ci = f1_bootstrap_ci(preds, labels, resamples, seed)
    return MetricReport("f1", value, min(ci.low, value), max(ci.high, value), "bootstrap", cm.tp + cm.fn + cm.tn + cm.fp)


def flags_from_confusion(cm: ConfusionMatrix):
    preds = [1] * cm.tp + [0] * cm.fn + [0] * cm.tn + [1] * cm.fp
    labels = [1] * cm.tp + [1] * cm.fn + [0] * cm.tn + [0] * cm.fp
    return np.array(preds), np.array(labels)


def dice(pred, true) -> float:
    a = np.asarray(pred) != 0
    b = np.asarray(true) != 0
    if a.shape != b.shape:
        raise ValueError(f"mask shape mismatch {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def mean_dice_over_positives(pairs) -> float:
    """Mean dice over (pred, true) pairs whose ground truth is non-empty."""
    vals = [dice(p, t) for p, t in pairs if np.any(np.asarray(t) != 0)]
    if not vals:
        raise UndefinedMetricError("no ground-truth-positive masks to average over")
    return float(np.mean(vals))


def evaluation_reports(cm: ConfusionMatrix, preds=None, labels=None, seed: int = 0, resamples: int = 2000) -> list:
    """Sensitivity, specificity (Wald-clipped, plus Wilson where they differ by > 0.01) and F1."""
    out = []
    for fn in (sensitivity, specificity):
        wald = fn(cm, "wald-clipped")
        out.append(wald)
        wil = fn(cm, "wilson")
        if abs(wil.ci_low - wald.ci_low) > 0.01 or abs(wil.ci_high - wald.ci_high) > 0.01:
            out.append(wil)
    out.append(f1(cm, preds, labels, resamples=resamples, seed=seed))
    return out


def report_csv(reports, header_comment=None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    w.writerows(r.row() for r in reports)
    return buf.getvalue()


def report_text(reports) -> str:
    return "\n".join(str(r) for r in reports)
