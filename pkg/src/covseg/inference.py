"""Pixel probabilities to slice flags, slice flags to scan verdicts."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import _kernels

TREND_HEADER = ("scan_id", "slice_index", "positive", "total_positive_area")
SCAN_REPORT_HEADER = ("scan_id", "verdict", "longest_run", "num_slices", "K")
PREDICTION_HEADER = ("scan_id", "slice_index", "positive", "lesion_area", "total_positive_area", "image_path")
HIGHLIGHT = (1.0, 0.0, 0.0)
DEFAULT_K = 15
REFERENCE_AREA = 50
REFERENCE_SIZE = 512


class OrderingError(ValueError):
    pass


@dataclass
class Components:
    labels: np.ndarray  # 0 = background, 1..count in row-major discovery order
    count: int
    areas: np.ndarray  # areas[i] is the size of label i + 1


def connected_components(mask) -> Components:
    """8-connected labelling of a binary mask."""
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {m.shape}")
    labels, count = _kernels.label8((m != 0).astype(np.uint8))
    areas = np.bincount(labels.ravel(), minlength=count + 1)[1:]
    return Components(labels, int(count), areas)


def default_min_area(h: int, w: int) -> int:
    """50 pixels at 512², scaled with image area, at least 1."""
    return max(1, int(REFERENCE_AREA * (h * w) // (REFERENCE_SIZE * REFERENCE_SIZE)))


@dataclass
class SlicePrediction:
    scan_id: str
    slice_index: int
    positive: bool
    lesion_area: int
    total_positive_area: int
    prob_map: np.ndarray | None = field(default=None, repr=False)
    image_path: str = ""


def classify_slice(prob_map, pixel_threshold: float = 0.5, min_area: int | None = None, scan_id: str = "", slice_index: int = 0):
    """Positive iff the largest 8-connected blob above threshold reaches ``min_area``."""
    p = np.asarray(prob_map)
    if min_area is None:
        min_area = default_min_area(*p.shape)
    if min_area < 1:
        raise ValueError("min_area must be at least 1")
    binary = p > pixel_threshold
    total = int(binary.sum())
    largest = 0
    if total:
        comps = connected_components(binary)
        largest = int(comps.areas.max())
    return SlicePrediction(scan_id, int(slice_index), largest >= min_area, largest, total, p)


@dataclass
class ScanPrediction:
    scan_id: str
    flags: list
    longest_run: int
    verdict: str
    K: int = DEFAULT_K

    @property
    def positive(self) -> bool:
        return self.verdict == "positive"


def check_order(indices) -> None:
    idx = list(indices)
    for a, b in zip(idx, idx[1:]):
        if b == a:
            raise OrderingError(f"duplicate slice_index {a}")
        if b < a:
            raise OrderingError(f"slice indices not ascending: {a} before {b}")


def aggregate_scan(flags, K: int = DEFAULT_K, scan_id: str = "", slice_indices=None) -> ScanPrediction:
    """Scan is positive iff at least K consecutive slices are flagged positive."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if slice_indices is not None:
        if len(slice_indices) != len(flags):
            raise ValueError("slice_indices and flags differ in length")
        check_order(slice_indices)
    arr = np.asarray(flags, dtype=bool).reshape(-1)
    run = _kernels.longest_run(arr.view(np.uint8)) if arr.size else 0
    return ScanPrediction(scan_id, arr.tolist(), int(run), "positive" if run >= K else "negative", K)


def group_by_scan(preds) -> dict:
    """SlicePredictions (or rows with scan_id/slice_index) grouped per scan, sorted by index."""
    scans: dict = {}
    for p in preds:
        scans.setdefault(p.scan_id, []).append(p)
    for sid, items in scans.items():
        items.sort(key=lambda p: p.slice_index)
        try:
            check_order([p.slice_index for p in items])
        except OrderingError as exc:
            raise OrderingError(f"scan {sid}: {exc}") from None
    return scans


def aggregate_predictions(preds, K: int = DEFAULT_K) -> list:
    out = []
    for sid, items in sorted(group_by_scan(preds).items()):
        out.append(aggregate_scan([p.positive for p in items], K, sid, [p.slice_index for p in items]))
    return out


def _csv_text(header, rows, header_comment=None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def export_trend(preds, header_comment=None) -> str:
    """Trend CSV (one row per slice, ascending index) for plotting positivity along a scan."""
    rows = []
    for sid, items in sorted(group_by_scan(preds).items()):
        rows.extend((sid, p.slice_index, int(p.positive), p.total_positive_area) for p in items)
    return _csv_text(TREND_HEADER, rows, header_comment)


def predictions_csv(preds, header_comment=None) -> str:
    rows = [
        (p.scan_id, p.slice_index, int(p.positive), p.lesion_area, p.total_positive_area, p.image_path)
        for p in preds
    ]
    return _csv_text(PREDICTION_HEADER, rows, header_comment)


def scan_report_csv(scans, header_comment=None) -> str:
    rows = [(s.scan_id, s.verdict, s.longest_run, len(s.flags), s.K) for s in scans]
    return _csv_text(SCAN_REPORT_HEADER, rows, header_comment)


def read_slice_flags(path) -> list:
    """SlicePredictions (without prob maps) from a trend or prediction CSV."""
    from .data import read_csv_rows

    rows = read_csv_rows(path, ("scan_id", "slice_index", "positive"))
    out = []
    for r in rows:
        out.append(
            SlicePrediction(
                r["scan_id"],
                int(r["slice_index"]),
                r["positive"].strip() in ("1", "true", "True"),
                int(r.get("lesion_area") or 0),
                int(r.get("total_positive_area") or 0),
            )
        )
    return out


def overlay_mask(image, mask, alpha: float = 0.5, highlight=HIGHLIGHT) -> np.ndarray:
    """Grayscale [0,1] image to RGB with masked pixels blended toward ``highlight``."""
    img = np.asarray(image, dtype=np.float64)
    m = np.asarray(mask) != 0
    if img.shape != m.shape:
        raise ValueError(f"image shape {img.shape} ≠ mask shape {m.shape}")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    rgb = np.repeat(img[..., None], 3, axis=-1)
    hl = np.asarray(highlight, dtype=np.float64)
    rgb[m] = (1 - alpha) * rgb[m] + alpha * hl
    return rgb


def save_rgb_png(path, rgb) -> None:
    u8 = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG")
