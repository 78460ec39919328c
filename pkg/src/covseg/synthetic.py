"""Synthetic CT-like slices with elliptical "lesions", for tests and demos."""

from __future__ import annotations

import json
import os

import numpy as np

from .data import AnnotationRegion, rasterize_regions, save_gray_png, to_uint8


def random_lesions(rng: np.random.Generator, size: int, count: int) -> list:
    regions = []
    lo, hi = 0.18 * size, 0.82 * size
    for _ in range(count):
        cx, cy = rng.uniform(lo, hi, 2)
        rx, ry = rng.uniform(0.06 * size, 0.16 * size, 2)
        regions.append(AnnotationRegion.ellipse(round(cx, 1), round(cy, 1), round(rx, 1), round(ry, 1)))
    return regions


def synthetic_slice(rng: np.random.Generator, size: int, regions) -> tuple:
    """Noisy background with brighter lesions; returns (image in [0,1], mask)."""
    mask = rasterize_regions(regions, size, size)
    img = 0.3 + 0.08 * rng.standard_normal((size, size))
    img[mask.astype(bool)] += 0.35
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask


def disks_dataset(n: int = 8, size: int = 64, seed: int = 0, max_lesions: int = 2):
    """N×1×size×size images and masks, every slice carrying 1..max_lesions ellipses."""
    rng = np.random.Generator(np.random.PCG64(seed))
    xs, ys = [], []
    for _ in range(n):
        regions = random_lesions(rng, size, int(rng.integers(1, max_lesions + 1)))
        img, mask = synthetic_slice(rng, size, regions)
        xs.append(img)
        ys.append(mask)
    return np.stack(xs)[:, None].astype(np.float32), np.stack(ys)[:, None].astype(np.float32)


def write_toy_dataset(root, n_patients: int = 4, slices_per_scan: int = 2, size: int = 64, seed: int = 0, positive_every: int = 5):
    """Write PNG slices, a VIA project and a labels CSV under ``root``.

    Every ``positive_every``-th slice is positive (one to two ellipse lesions),
    giving a 20% prevalence with the default of 5. Returns (image_dir, via_path, labels_path).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    img_dir = os.path.join(root, "images")
    os.makedirs(img_dir, exist_ok=True)
    via = {}
    rows = ["filename,patient_id,scan_id,slice_index,label"]
    k = 0
    for p in range(n_patients):
        scan = f"scan{p:02d}"
        for s in range(slices_per_scan):
            positive = k % positive_every == 0
            k += 1
            regions = random_lesions(rng, size, int(rng.integers(1, 3))) if positive else []
            img, _ = synthetic_slice(rng, size, regions)
            fname = f"{scan}_{s:03d}.png"
            save_gray_png(os.path.join(img_dir, fname), to_uint8(img))
            rows.append(f"{fname},patient{p:02d},{scan},{s},{'positive' if positive else 'negative'}")
            if regions:
                via[f"{fname}-1"] = {
                    "filename": fname,
                    "size": -1,
                    "regions": [
                        {
                            "shape_attributes": {"name": "ellipse", "cx": r.params[0], "cy": r.params[1], "rx": r.params[2], "ry": r.params[3]},
                            "region_attributes": {},
                        }
                        for r in regions
                    ],
                    "file_attributes": {},
                }
    via_path = os.path.join(root, "via.json")
    with open(via_path, "w") as fh:
        json.dump({"_via_img_metadata": via}, fh, indent=1)
    labels_path = os.path.join(root, "labels.csv")
    with open(labels_path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    return img_dir, via_path, labels_path
