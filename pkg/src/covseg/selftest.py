"""Fast built-in checks: gradients, rasterization, aggregation, metric arithmetic."""

from __future__ import annotations

import itertools
import time
from fractions import Fraction

import numpy as np

from . import _kernels
from .data import AnnotationRegion, rasterize_regions
from .inference import aggregate_scan
from .layers import BatchNormState, ConvParams, batchnorm2d, bce_loss, conv2d, maxpool2d, separable_conv2d, transposed_conv2d
from .metrics import ConfusionMatrix, ci_estimate, f1_value, sensitivity, specificity
from .tensor import Tensor, concat_channels, gradient_check, relu, sigmoid

GRAD_TOL = 1e-4


def gradient_cases(seed: int):
    """(name, fn, input) triples; every fn maps a float64 tensor to a scalar."""
    rng = np.random.Generator(np.random.PCG64(seed))

    def T(*shape, grad=True):
        return Tensor(rng.standard_normal(shape), requires_grad=grad)

    other = T(2, 3)
    w = T(2, 2, 3, 3)
    b = T(2)
    dw, db = T(2, 1, 3, 3), T(2)
    pw, pb = T(3, 2, 1, 1), T(3)
    tw, tb = T(2, 3, 2, 2), T(3)
    skip = T(1, 2, 4, 4)
    bn = BatchNormState.fresh(2, dtype=np.float64)
    bn.gamma, bn.beta = T(2), T(2)
    target = (rng.random((2, 1, 3, 3)) < 0.5).astype(np.float64)
    r = {}

    def wsum(out):
        if out.shape not in r:
            r[out.shape] = Tensor(rng.standard_normal(out.shape))
        return (out * r[out.shape]).sum()

    # maxpool: spread values so no window is tied or near-tied
    pool_in = Tensor(rng.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1 + 0.01 * rng.random((2, 2, 4, 4)))
    relu_in = T(2, 3)
    relu_in.data[np.abs(relu_in.data) < 1e-3] = 0.5
    return [
        ("add", lambda x: wsum(x + other), T(2, 3)),
        ("mul", lambda x: wsum(x * other), T(2, 3)),
        ("relu", lambda x: wsum(relu(x)), relu_in),
        ("sigmoid", lambda x: wsum(sigmoid(x)), T(2, 3)),
        ("concat", lambda x: wsum(concat_channels(x, skip)), T(1, 3, 4, 4)),
        ("conv2d", lambda x: wsum(conv2d(x, ConvParams(w, b, 1, 1))), T(1, 2, 6, 6)),
        ("conv2d.weight", lambda v: wsum(conv2d(skip, ConvParams(v, b, 1, 1))), T(2, 2, 3, 3)),
        (
            "separable_conv2d",
            lambda x: wsum(separable_conv2d(x, ConvParams(dw, db, 1, 1, True), ConvParams(pw, pb))),
            T(1, 2, 5, 5),
        ),
        ("transposed_conv2d", lambda x: wsum(transposed_conv2d(x, ConvParams(tw, tb, 2, 0))), T(1, 2, 3, 3)),
        ("transposed_conv2d.weight", lambda v: wsum(transposed_conv2d(skip, ConvParams(v, tb, 2, 0))), T(2, 3, 2, 2)),
        ("maxpool2d", lambda x: wsum(maxpool2d(x)), pool_in),
        ("batchnorm2d", lambda x: wsum(batchnorm2d(x, bn)), T(2, 2, 3, 3)),
        ("bce_loss", lambda x: bce_loss(x, target), T(2, 1, 3, 3)),
    ]


def check_gradients(seeds=range(2)) -> list:
    failures = []
    for seed in seeds:
        for name, fn, x in gradient_cases(seed):
            err = gradient_check(fn, x, 1e-5)
            if not err < GRAD_TOL:
                failures.append(f"gradient {name} seed {seed}: rel. error {err:.3g}")
    return failures


def _inside_oracle(region: AnnotationRegion, x: int, y: int) -> bool:
    if region.kind in ("circle", "ellipse"):
        if region.kind == "circle":
            cx, cy, rx = region.params
            ry = rx
        else:
            cx, cy, rx, ry = region.params
        return Fraction(x - cx) ** 2 * Fraction(ry) ** 2 + Fraction(y - cy) ** 2 * Fraction(rx) ** 2 <= Fraction(rx) ** 2 * Fraction(ry) ** 2
    pts = region.params
    inside = False
    for (x1, y1), (x2, y2) in zip(pts, pts[1:] + pts[:1]):
        if (x2 - x1) * (y - y1) == (y2 - y1) * (x - x1) and min(x1, x2) <= x <= max(x1, x2) and min(y1, y2) <= y <= max(y1, y2):
            return True
        if (y1 > y) != (y2 > y):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xc:
                inside = not inside
    return inside


def check_rasterization(n: int = 10, size: int = 32, seed: int = 0) -> list:
    rng = np.random.Generator(np.random.PCG64(seed))
    failures = []
    unit = rasterize_regions([AnnotationRegion.circle(2, 2, 1)], 5, 5)
    if sorted(zip(*np.nonzero(unit))) != [(1, 2), (2, 1), (2, 2), (2, 3), (3, 2)]:
        failures.append("rasterization: unit circle is not the 5-pixel cross")
    for i in range(n):
        kind = ("circle", "ellipse", "polygon")[i % 3]
        if kind == "circle":
            reg = AnnotationRegion.circle(*rng.uniform(0, size, 2), rng.uniform(1, size / 3))
        elif kind == "ellipse":
            reg = AnnotationRegion.ellipse(*rng.uniform(0, size, 2), *rng.uniform(1, size / 3, 2))
        else:
            k = int(rng.integers(3, 8))
            reg = AnnotationRegion.polygon(rng.integers(0, size, k), rng.integers(0, size, k))
        got = rasterize_regions([reg], size, size)
        want = np.array([[_inside_oracle(reg, x, y) for x in range(size)] for y in range(size)], dtype=np.uint8)
        if not np.array_equal(got, want):
            failures.append(f"rasterization: {kind} #{i} differs from brute force in {int((got != want).sum())} pixels")
    return failures


def _longest_run_oracle(flags) -> int:
    n = len(flags)
    for k in range(n, 0, -1):
        if any(all(flags[s : s + k]) for s in range(n - k + 1)):
            return k
    return 0


def check_aggregation(max_len: int = 12, K: int = 15) -> list:
    failures = []
    for n in range(max_len + 1):
        for bits in itertools.product((0, 1), repeat=n):
            got = aggregate_scan(bits, K=3)
            want = _longest_run_oracle(bits)
            if got.longest_run != want or got.positive != (want >= 3):
                failures.append(f"aggregation: {bits} gave run {got.longest_run}, expected {want}")
                return failures
    if not aggregate_scan([0] * 5 + [1] * K + [0] * 5, K).positive:
        failures.append("aggregation: a 15-run must be positive")
    if aggregate_scan([0] * 5 + [1] * (K - 1) + [0] * 5, K).positive:
        failures.append("aggregation: a 14-run must be negative")
    return failures


def check_metrics() -> list:
    failures = []
    cm = ConfusionMatrix(tp=27, fn=1, tn=99, fp=13)
    for name, got, want in (
        ("sensitivity", sensitivity(cm).value, 0.964),
        ("specificity", specificity(cm).value, 0.884),
        ("f1", f1_value(cm), 0.794),
    ):
        if abs(got - want) > 5e-4:
            failures.append(f"metrics: {name} {got:.4f} ≠ {want}")
    lo, hi = ci_estimate(99, 112, "wald-clipped")
    if (round(lo, 2), round(hi, 2)) != (0.82, 0.94):
        failures.append(f"metrics: specificity Wald CI ({lo:.3f}, {hi:.3f}) does not round to (0.82, 0.94)")
    return failures


def check_backends(seed: int = 0) -> list:
    """numba and numpy kernels agree on small random inputs."""
    rng = np.random.Generator(np.random.PCG64(seed))
    a, b = _kernels.implementations("numpy"), _kernels.implementations("numba")
    x = rng.standard_normal((2, 3, 6, 6))
    failures = []
    if not np.allclose(a["im2col"](x, 3, 3, 1), b["im2col"](x, 3, 3, 1)):
        failures.append("backends: im2col differs")
    if not np.array_equal(a["maxpool_forward"](x)[1], b["maxpool_forward"](x)[1]):
        failures.append("backends: maxpool argmax differs")
    m = (rng.random((24, 24)) < 0.45).astype(np.uint8)
    if not np.array_equal(a["label8"](m)[0], b["label8"](m)[0]):
        failures.append("backends: component labels differ")
    return failures


CHECKS = (
    ("gradients", check_gradients),
    ("rasterization", check_rasterization),
    ("aggregation", check_aggregation),
    ("metrics", check_metrics),
    ("backends", check_backends),
)


def run_selftest(echo=print) -> int:
    """Run every check; returns the number of failures."""
    failures = 0
    t0 = time.perf_counter()
    for name, check in CHECKS:
        problems = check()
        failures += len(problems)
        echo(f"[{'PASS' if not problems else 'FAIL'}] {name}")
        for p in problems:
            echo(f"    {p}")
    echo(f"{len(CHECKS)} checks run, {failures} failure(s), {time.perf_counter() - t0:.1f}s")
    return failures
