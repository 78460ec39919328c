"""Slice images, VIA annotations, binary masks, manifests and stratified splits."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import _kernels

MANIFEST_HEADER = ("patient_id", "scan_id", "slice_index", "image_path", "label", "mask_path")
SPLIT_NAMES = ("train", "validation", "test")


class DataError(ValueError):
    """Invalid input data; ``problems`` lists every issue found."""

    def __init__(self, message: str, problems=None):
        super().__init__(message)
        self.problems = list(problems or [message])


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def load_slice_image(path) -> np.ndarray:
    """8-bit grayscale image as float32 in [0, 1]; colour converts by luminance."""
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("RGB", "RGBA", "P", "LA", "1"):
                im = im.convert("L")
            elif mode != "L":
                raise DataError(f"{path}: unsupported image mode {mode!r} (need 8-bit grayscale or colour)")
            arr = np.asarray(im, dtype=np.uint8)
    except DataError:
        raise
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise DataError(f"{path}: unreadable image ({exc})") from exc
    return (arr.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_gray_png(path, img_u8: np.ndarray) -> None:
    Image.fromarray(np.asarray(img_u8, dtype=np.uint8), mode="L").save(path, format="PNG")


def save_mask_png(path, mask: np.ndarray) -> None:
    save_gray_png(path, (np.asarray(mask) > 0).astype(np.uint8) * 255)


def load_mask_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return (arr > 127).astype(np.uint8)


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Corner-aligned bilinear resampling (output corners hit input corners)."""
    out_w = out_h if out_w is None else out_w
    img = np.asarray(img)
    h, w = img.shape
    if h < 2 or w < 2:
        raise DataError(f"cannot resize degenerate image of shape {img.shape}")
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0.0, h - 1, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.minimum(np.floor(ys).astype(int), h - 2)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    src = img.astype(np.float64)
    a = src[np.ix_(y0, x0)]
    b = src[np.ix_(y0, x0 + 1)]
    c = src[np.ix_(y0 + 1, x0)]
    d = src[np.ix_(y0 + 1, x0 + 1)]
    out = (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy
    out = np.clip(out, src.min(), src.max())
    return out.astype(img.dtype if np.issubdtype(img.dtype, np.floating) else np.float64)


def resize_nearest(mask: np.ndarray, out_h: int, out_w: int | None = None) -> np.ndarray:
    """Nearest-neighbour resize for masks, same corner-aligned sampling grid."""
    out_w = out_h if out_w is None else out_w
    h, w = mask.shape
    ys = np.rint(np.linspace(0.0, h - 1, out_h)).astype(int)
    xs = np.rint(np.linspace(0.0, w - 1, out_w)).astype(int)
    return np.asarray(mask)[np.ix_(ys, xs)].copy()


# ---------------------------------------------------------------------------
# annotations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnnotationRegion:
    kind: str  # ellipse | circle | polygon
    params: tuple  # (cx, cy, rx, ry) | (cx, cy, r) | ((x0, y0), (x1, y1), ...)

    def __post_init__(self):
        if self.kind in ("ellipse", "circle"):
            n = 4 if self.kind == "ellipse" else 3
            if len(self.params) != n:
                raise DataError(f"{self.kind} needs {n} numbers, got {len(self.params)}")
            if any(not math.isfinite(v) for v in self.params):
                raise DataError(f"{self.kind} parameters must be finite")
            if any(r <= 0 for r in self.params[2:]):
                raise DataError(f"{self.kind} radii must be positive, got {self.params[2:]}")
        elif self.kind == "polygon":
            if len(self.params) < 3:
                raise DataError(f"polygon needs at least 3 vertices, got {len(self.params)}")
        else:
            raise DataError(f"unsupported region kind {self.kind!r}")

    @classmethod
    def circle(cls, cx, cy, r):
        return cls("circle", (float(cx), float(cy), float(r)))

    @classmethod
    def ellipse(cls, cx, cy, rx, ry):
        return cls("ellipse", (float(cx), float(cy), float(rx), float(ry)))

    @classmethod
    def polygon(cls, xs, ys):
        if len(xs) != len(ys):
            raise DataError("polygon x and y vertex lists differ in length")
        return cls("polygon", tuple((float(x), float(y)) for x, y in zip(xs, ys)))


@dataclass
class ViaParseResult:
    regions: "OrderedDict[str, list]"
    unsupported: list = field(default_factory=list)  # (filename, region index, shape name)


def _via_entries(doc):
    if isinstance(doc, dict) and "_via_img_metadata" in doc:
        doc = doc["_via_img_metadata"]
    if not isinstance(doc, dict):
        raise DataError("VIA document must be a JSON object")
    return doc


def parse_via_json(document) -> ViaParseResult:
    """Parse a VIA project or annotation export into regions keyed by filename."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed VIA document: {exc}") from exc
    entries = _via_entries(document)
    result = ViaParseResult(OrderedDict())
    for key, entry in entries.items():
        if not isinstance(entry, dict):
            raise DataError(f"malformed VIA entry {key!r}")
        fname = entry.get("filename", key)
        regions = entry.get("regions", [])
        if isinstance(regions, dict):  # VIA 1.x stores regions as {"0": {...}}
            regions = [regions[k] for k in sorted(regions, key=int)]
        if not regions:
            continue
        parsed = []
        for i, reg in enumerate(regions):
            shape = (reg or {}).get("shape_attributes")
            if not isinstance(shape, dict) or "name" not in shape:
                raise DataError(f"{fname}: region {i} has no shape_attributes.name")
            name = shape["name"]

            def need(attr):
                if attr not in shape:
                    raise DataError(f"{fname}: region {i} ({name}) is missing attribute {attr!r}")
                return shape[attr]

            if name == "circle":
                parsed.append(AnnotationRegion.circle(need("cx"), need("cy"), need("r")))
            elif name == "ellipse":
                theta = float(shape.get("theta", 0) or 0)
                if theta != 0:
                    raise DataError(f"{fname}: region {i} is a rotated ellipse (theta={theta}); not supported")
                parsed.append(AnnotationRegion.ellipse(need("cx"), need("cy"), need("rx"), need("ry")))
            elif name == "polygon":
                parsed.append(AnnotationRegion.polygon(need("all_points_x"), need("all_points_y")))
            else:
                result.unsupported.append((fname, i, name))
        if parsed:
            result.regions.setdefault(fname, []).extend(parsed)
    return result


def region_mask(region: AnnotationRegion, h: int, w: int) -> np.ndarray:
    """Pixels whose integer centre (x=column, y=row) lies in the region, boundary included."""
    if region.kind == "polygon":
        xs = [p[0] for p in region.params]
        ys = [p[1] for p in region.params]
        return _kernels.polygon_mask(xs, ys, h, w)
    if region.kind == "circle":
        cx, cy, r = region.params
        rx = ry = r
    else:
        cx, cy, rx, ry = region.params
    x = np.arange(w, dtype=np.float64)[None, :]
    y = np.arange(h, dtype=np.float64)[:, None]
    # division-free so integer boundary points (e.g. 5-12-13) are not lost to rounding
    return ((x - cx) ** 2 * ry**2 + (y - cy) ** 2 * rx**2 <= rx**2 * ry**2).astype(np.uint8)


def rasterize_regions(regions, h: int, w: int) -> np.ndarray:
    mask = np.zeros((h, w), dtype=np.uint8)
    for r in regions:
        mask |= region_mask(r, h, w)
    return mask


# ---------------------------------------------------------------------------
# records, manifests, splits
# ---------------------------------------------------------------------------


@dataclass
class SliceRecord:
    patient_id: str
    scan_id: str
    slice_index: int
    image_path: str
    label: str  # positive | negative
    mask_path: str = ""
    regions: list = field(default_factory=list)

    @property
    def positive(self) -> bool:
        return self.label == "positive"


@dataclass
class DatasetSplit:
    name: str
    records: list
    prevalence: float

    @property
    def n_positive(self) -> int:
        return sum(r.positive for r in self.records)

    def __len__(self):
        return len(self.records)


def validate_records(records) -> None:
    problems = []
    seen = {}
    for r in records:
        key = (r.scan_id, r.slice_index)
        if key in seen:
            problems.append(f"duplicate slice ({r.scan_id}, {r.slice_index}): {seen[key]} and {r.image_path}")
        seen.setdefault(key, r.image_path)
        if r.label not in ("positive", "negative"):
            problems.append(f"{r.image_path}: label must be positive/negative, got {r.label!r}")
        if r.label == "negative" and r.regions:
            problems.append(
                f"{r.image_path} (scan {r.scan_id}, slice {r.slice_index}): labelled negative but has {len(r.regions)} region(s)"
            )
        if r.slice_index < 0:
            problems.append(f"{r.image_path}: negative slice_index {r.slice_index}")
    if problems:
        raise DataError(f"{len(problems)} manifest problem(s): " + "; ".join(problems), problems)


def manifest_csv(records, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MANIFEST_HEADER)
    for r in records:
        w.writerow([r.patient_id, r.scan_id, r.slice_index, r.image_path, r.label, r.mask_path])
    return buf.getvalue()


def write_manifest(path, records, header_comment: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(manifest_csv(records, header_comment))


def read_csv_rows(path, required) -> list:
    """Rows of a CSV as dicts; ``#`` comment lines before the header are skipped."""
    with open(path, encoding="utf-8", newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if reader.fieldnames is None:
        raise DataError(f"{path}: missing header row")
    missing = [c for c in required if c not in reader.fieldnames]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    return list(reader)


def read_manifest(path) -> list:
    rows = read_csv_rows(path, MANIFEST_HEADER)
    return [
        SliceRecord(r["patient_id"], r["scan_id"], int(r["slice_index"]), r["image_path"], r["label"], r["mask_path"])
        for r in rows
    ]


def build_manifest(image_dir, via_document, labels_path, mask_dir=None, header_comment=None):
    """Join the labels table with images and VIA regions into SliceRecords.

    ``labels_path`` is a CSV with columns filename,patient_id,scan_id,slice_index,label.
    When ``mask_dir`` is given, a mask PNG (native resolution) is written per slice.
    Returns (records, unsupported-shape report). Validation problems are raised together.
    """
    via = parse_via_json(via_document) if via_document is not None else ViaParseResult(OrderedDict())
    rows = read_csv_rows(labels_path, ("filename", "patient_id", "scan_id", "slice_index", "label"))
    problems = []
    records = []
    for row in rows:
        path = os.path.join(image_dir, row["filename"])
        if not os.path.exists(path):
            problems.append(f"image not found: {path}")
            continue
        try:
            idx = int(row["slice_index"])
        except ValueError:
            problems.append(f"{row['filename']}: slice_index {row['slice_index']!r} is not an integer")
            continue
        regions = via.regions.get(row["filename"], [])
        records.append(SliceRecord(row["patient_id"], row["scan_id"], idx, path, row["label"].strip().lower(), "", regions))
    for fname in via.regions:
        if fname not in {r["filename"] for r in rows}:
            problems.append(f"VIA annotations for {fname} have no row in the labels file")
    try:
        validate_records(records)
    except DataError as exc:
        problems.extend(exc.problems)
    if problems:
        raise DataError(f"{len(problems)} problem(s) building manifest: " + "; ".join(problems), problems)
    if mask_dir is not None:
        for r in records:
            with Image.open(r.image_path) as im:
                w, h = im.size
            mask = rasterize_regions(r.regions, h, w)
            r.mask_path = os.path.join(mask_dir, f"{r.scan_id}_{r.slice_index:04d}.png")
            save_mask_png(r.mask_path, mask)
    return records, via.unsupported


def _largest_remainder(total: int, weights) -> list:
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    base = np.floor(raw).astype(int)
    rem = total - base.sum()
    # ties broken by split order
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return base.tolist()


def split_targets(n_pos: int, n_neg: int, ratios) -> list:
    """(positives, negatives) per split: sizes by ratio, positives proportional to size."""
    sizes = _largest_remainder(n_pos + n_neg, ratios)
    pos = _largest_remainder(n_pos, sizes) if n_pos else [0] * len(sizes)
    return [(p, s - p) for p, s in zip(pos, sizes)]


def stratified_split(records, ratios=(0.6, 0.2, 0.2), prevalence: float = 0.20, seed: int = 0):
    """Patient-disjoint train/validation/test splits with matched positive prevalence.

    Each split's size follows ``ratios``; positives are shared out in proportion to
    split size. Test and validation are then filled, in that order, with the subset
    of whole patients whose (positive, negative) totals come closest to the target,
    found by dynamic programming over reachable totals; train takes the rest. The
    seed shuffles patient order, which decides among equally good subsets. Raises
    DataError when a split ends more than one record away from ``prevalence``.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError("ratios must be three non-negative numbers")
    records = list(records)
    n_pos = sum(r.positive for r in records)
    n_neg = len(records) - n_pos
    targets = split_targets(n_pos, n_neg, ratios)
    by_patient = OrderedDict()
    for r in records:
        by_patient.setdefault(r.patient_id, []).append(r)
    pids = sorted(by_patient)
    rng = np.random.Generator(np.random.PCG64(seed))
    pids = [pids[i] for i in rng.permutation(len(pids))]
    counts = {}
    for pid in pids:
        p = sum(r.positive for r in by_patient[pid])
        counts[pid] = (p, len(by_patient[pid]) - p)
    assign = {}
    free = list(pids)
    for s in (2, 1):
        chosen = _closest_subset(free, counts, targets[s])
        for pid in chosen:
            assign[pid] = s
        free = [pid for pid in free if pid not in chosen]
    for pid in free:
        assign[pid] = 0
    splits = []
    for s, name in enumerate(SPLIT_NAMES):
        members = [r for r in records if assign[r.patient_id] == s]
        members.sort(key=lambda r: (r.patient_id, r.scan_id, r.slice_index))
        splits.append(DatasetSplit(name, members, prevalence))
    for sp in splits:
        if len(sp) and abs(sp.n_positive - prevalence * len(sp)) > 1:
            raise DataError(
                f"infeasible prevalence: {sp.name} has {sp.n_positive}/{len(sp)} positives, "
                f"declared prevalence {prevalence:.2f} allows {prevalence * len(sp):.1f} ± 1"
            )
    return splits


def _closest_subset(pids, counts, target) -> set:
    """Patients whose summed (positives, negatives) is nearest ``target`` in L1.

    ``who[a, b]`` is the first patient (in ``pids`` order) at which total (a, b)
    became reachable, which is enough to walk the choice back.
    """
    tp, tn = target
    if not pids or (tp, tn) == (0, 0):
        return set()
    slack = max(p + q for p, q in (counts[pid] for pid in pids))
    hp = min(tp + slack, sum(counts[pid][0] for pid in pids))
    hn = min(tn + slack, sum(counts[pid][1] for pid in pids))
    who = np.full((hp + 1, hn + 1), -1, dtype=np.int64)
    reach = np.zeros((hp + 1, hn + 1), dtype=bool)
    reach[0, 0] = True
    for i, pid in enumerate(pids):
        p, q = counts[pid]
        if p > hp or q > hn:
            continue
        shifted = np.zeros_like(reach)
        shifted[p:, q:] = reach[: hp + 1 - p, : hn + 1 - q]
        new = shifted & ~reach
        who[new] = i
        reach |= new
    a, b = np.nonzero(reach)
    cost = np.abs(a - tp) + np.abs(b - tn)
    k = int(np.argmin(cost))  # ties: first in row-major order
    a, b = int(a[k]), int(b[k])
    chosen = set()
    while (a, b) != (0, 0):
        i = int(who[a, b])
        pid = pids[i]
        chosen.add(pid)
        a -= counts[pid][0]
        b -= counts[pid][1]
    return chosen


def balance_table(splits) -> str:
    """Class counts per split in the layout of a dataset-split table."""
    lines = [f"{'Dataset':<12}{'COVID-19':>10}{'NON-COVID':>11}{'Total slices':>14}"]
    for sp in splits:
        pos = sp.n_positive
        lines.append(f"{sp.name.capitalize():<12}{pos:>10}{len(sp) - pos:>11}{len(sp):>14}")
    return "\n".join(lines)


def load_arrays(records, size: int):
    """Stack resized images and masks as N×1×size×size float32 arrays."""
    xs, ys = [], []
    for r in records:
        img = load_slice_image(r.image_path)
        if r.mask_path:
            mask = load_mask_png(r.mask_path)
        else:
            mask = rasterize_regions(r.regions, *img.shape)
        xs.append(resize_bilinear(img, size) if img.shape != (size, size) else img)
        ys.append(resize_nearest(mask, size) if mask.shape != (size, size) else mask)
    if not xs:
        return np.zeros((0, 1, size, size), np.float32), np.zeros((0, 1, size, size), np.float32)
    return (
        np.stack(xs).astype(np.float32)[:, None],
        np.stack(ys).astype(np.float32)[:, None],
    )


def encode_cache(arr: np.ndarray, half: bool = False) -> np.ndarray:
    """Storage encoding for cached tensors; 16-bit only on request."""
    return np.asarray(arr, dtype=np.float16 if half else np.float32)
