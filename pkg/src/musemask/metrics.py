"""Evaluation metrics for generated maps and edited images.

FID, CLIP score and identity similarity need pretrained networks and are not
provided; ``class_area_w1`` is a cheap distributional proxy for the first.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import RegionError, ShapeError
from .semantic_maps import NUM_CLASSES, SemanticMap


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, SemanticMap) else np.asarray(m)


def mask_accuracy(pred, gt) -> float:
    """Fraction of pixels whose labels agree."""
    a, b = _labels(pred), _labels(gt)
    if a.shape != b.shape:
        raise ShapeError(f"map shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(a == b))


def psnr(a, b, max_val: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val**2 / mse)


def region_psnr(a, b, region, max_val: float = 255.0) -> float:
    """PSNR over the pixels selected by ``region`` (H x W; channels are kept)."""
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise RegionError("region is empty")
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape or a.shape[: region.ndim] != region.shape:
        raise ShapeError("region does not match image shape")
    return psnr(a[region], b[region], max_val)


def class_fractions(maps, num_classes: int = NUM_CLASSES) -> np.ndarray:
    """N x C matrix of per-map class area fractions."""
    rows = []
    for m in maps:
        lab = _labels(m)
        rows.append(np.bincount(lab.ravel(), minlength=num_classes)[:num_classes] / lab.size)
    return np.asarray(rows, dtype=np.float64)


def wasserstein_1d(u, v) -> float:
    """W1 between two empirical distributions on the line.

    Equal sizes use the sorted-difference form; otherwise the CDF difference
    is integrated over the merged support.
    """
    u = np.sort(np.asarray(u, dtype=np.float64))
    v = np.sort(np.asarray(v, dtype=np.float64))
    if len(u) == 0 or len(v) == 0:
        raise ValueError("empty sample")
    if len(u) == len(v):
        return float(np.mean(np.abs(u - v)))
    grid = np.concatenate([u, v])
    grid.sort(kind="mergesort")
    widths = np.diff(grid)
    cdf_u = np.searchsorted(u, grid[:-1], side="right") / len(u)
    cdf_v = np.searchsorted(v, grid[:-1], side="right") / len(v)
    return float(np.sum(np.abs(cdf_u - cdf_v) * widths))


def fraction_w1(frac_a: np.ndarray, frac_b: np.ndarray) -> float:
    """Mean over classes of the W1 distance between area-fraction columns."""
    frac_a, frac_b = np.atleast_2d(frac_a), np.atleast_2d(frac_b)
    if len(frac_a) == 0 or len(frac_b) == 0:
        raise ValueError("both sets must be nonempty")
    return float(np.mean([wasserstein_1d(frac_a[:, c], frac_b[:, c]) for c in range(frac_a.shape[1])]))


def class_area_w1(set_a, set_b, num_classes: int = NUM_CLASSES) -> float:
    set_a, set_b = list(set_a), list(set_b)
    if not set_a or not set_b:
        raise ValueError("both sets must be nonempty")
    return fraction_w1(class_fractions(set_a, num_classes), class_fractions(set_b, num_classes))


def diversity_score(maps, region=None) -> float:
    """Mean pairwise fraction of region pixels on which two maps disagree."""
    maps = [_labels(m) for m in maps]
    if len(maps) < 2:
        raise ValueError("need at least two maps")
    region = np.ones(maps[0].shape, dtype=bool) if region is None else np.asarray(region, dtype=bool)
    if not region.any():
        raise RegionError("region is empty")
    stack = np.stack([m[region] for m in maps])
    dists = [np.mean(stack[i] != stack[j]) for i, j in itertools.combinations(range(len(stack)), 2)]
    return float(np.mean(dists))


@dataclass
class EvalReport:
    metrics: dict
    count: int
    config_hash: str
    seed: int
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("report needs at least one sample")
        bad = [k for k, v in self.metrics.items() if not np.isfinite(v)]
        if bad:
            raise ValueError(f"non-finite metrics: {bad}")

    def to_json(self) -> str:
        payload = {
            "metrics": {k: float(v) for k, v in self.metrics.items()},
            "count": int(self.count),
            "config_hash": self.config_hash,
            "seed": int(self.seed),
            "notes": self.notes,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(d["metrics"], d["count"], d["config_hash"], d["seed"], d.get("notes", {}))


def finite_psnr(value: float, cap: float = 100.0) -> float:
    """Clip ``inf`` so averages over exact reconstructions stay finite."""
    return min(value, cap)
