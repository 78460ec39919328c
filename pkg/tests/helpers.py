"""Record builders shared by the data and acceptance tests."""

import numpy as np

from covseg.data import SliceRecord

# slice-level split sizes of the reference dataset: (positives, negatives)
REFERENCE_SPLITS = {"train": (657, 2628), "validation": (120, 477), "test": (266, 1064)}


def patient_records(sizes, positives, prefix="p"):
    """One scan per patient; ``positives[i]`` of patient i's ``sizes[i]`` slices are positive."""
    recs = []
    for i, (n, k) in enumerate(zip(sizes, positives)):
        for s in range(n):
            label = "positive" if s < k else "negative"
            recs.append(SliceRecord(f"{prefix}{i:04d}", f"scan{i:04d}", s, f"img/{prefix}{i}_{s}.png", label))
    return recs


def reference_scale_records(seed=0, n_patients=143):
    """5212 slices, 1043 positive, spread unevenly over ``n_patients`` patients."""
    n_pos = sum(p for p, _ in REFERENCE_SPLITS.values())
    n_all = sum(p + q for p, q in REFERENCE_SPLITS.values())
    rng = np.random.Generator(np.random.PCG64(seed))
    sizes = rng.multinomial(n_all - n_patients, np.full(n_patients, 1 / n_patients)) + 1
    pos = np.zeros(n_patients, dtype=int)
    # positives land on random patients, never more than a patient has slices
    for _ in range(n_pos):
        free = np.flatnonzero(pos < sizes)
        pos[rng.choice(free)] += 1
    return patient_records(sizes.tolist(), pos.tolist())
