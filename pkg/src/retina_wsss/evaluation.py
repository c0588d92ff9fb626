"""Micro-averaged mIoU, background-threshold sweeps, and caption/embedding analyses."""
from __future__ import annotations

import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, MetricError

LAMBDA_GRID = tuple(i / 100 for i in range(101))


@dataclass
class ConfusionCounts:
    """Dataset-aggregated per-class intersection and union pixel counts."""

    num_classes: int
    intersection: np.ndarray = None
    union: np.ndarray = None

    def __post_init__(self):
        if self.intersection is None:
            self.intersection = np.zeros(self.num_classes, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(self.num_classes, dtype=np.int64)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.num_classes != self.num_classes:
            raise DimensionError("cannot merge counts over different class sets")
        return ConfusionCounts(self.num_classes, self.intersection + other.intersection, self.union + other.union)


def accumulate(pred: np.ndarray, gt: np.ndarray, counts: ConfusionCounts) -> ConfusionCounts:
    """Add one image's per-class intersection/union to ``counts`` (in place; also returned)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    k = counts.num_classes
    if gt.size and (gt.min() < 0 or gt.max() >= k):
        raise DimensionError(f"ground-truth values outside [0, {k - 1}]")
    if pred.size and (pred.min() < 0 or pred.max() >= k):
        raise DimensionError(f"predicted values outside [0, {k - 1}]")
    pred = pred.ravel().astype(np.int64)
    gt = gt.ravel().astype(np.int64)
    hist = np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
    inter = np.diag(hist)
    counts.intersection += inter
    counts.union += hist.sum(0) + hist.sum(1) - inter
    return counts


def miou(counts: ConfusionCounts, exclude_empty: bool = True):
    """Per-class IoU and their mean; classes with zero union are skipped unless ``exclude_empty`` is off."""
    union = counts.union
    present = union > 0
    if not present.any():
        raise MetricError("no pixels of any class were counted")
    iou = np.full(counts.num_classes, np.nan)
    iou[present] = counts.intersection[present] / union[present]
    if exclude_empty:
        mean = float(np.mean(iou[present]))
    else:
        mean = float(np.mean(np.where(present, iou, 0.0)))
    return iou, mean


@dataclass
class SweepResult:
    lambdas: list
    miou: list
    per_class: list
    best_lambda: float
    best_miou: float

    def to_dict(self) -> dict:
        return {
            "best_lambda": self.best_lambda,
            "best_miou": self.best_miou,
            "curve": [
                {"lambda": lam, "miou": m, "iou": [None if np.isnan(v) else float(v) for v in per]}
                for lam, m, per in zip(self.lambdas, self.miou, self.per_class)
            ],
        }


def sweep(foregrounds: Sequence[np.ndarray], gts: Sequence[np.ndarray], num_classes: int,
          grid: Sequence[float] = LAMBDA_GRID, exclude_empty: bool = True) -> SweepResult:
    """Evaluate every background threshold on the grid; ties pick the lowest threshold.

    ``foregrounds`` are the per-image normalized lesion maps ``(K-1, H, W)``.
    """
    if len(foregrounds) == 0:
        raise MetricError("cannot sweep an empty dataset")
    if len(foregrounds) != len(gts):
        raise DimensionError(f"{len(foregrounds)} heatmaps but {len(gts)} ground truths")
    counts = [ConfusionCounts(num_classes) for _ in grid]
    for fg, gt in zip(foregrounds, gts):
        fg = np.asarray(fg)
        top = fg.max(axis=0)
        arg = fg.argmax(axis=0) + 1
        for c, lam in zip(counts, grid):
            accumulate(np.where(top <= lam, 0, arg), gt, c)
    curve, per_class = [], []
    for c in counts:
        iou, m = miou(c, exclude_empty)
        curve.append(m)
        per_class.append(iou)
    best = int(np.argmax(curve))
    return SweepResult(list(grid), curve, per_class, float(grid[best]), float(curve[best]))


def sliding_similarity(embeddings: dict, volume_ids: dict, slice_indices: dict,
                       window_sizes: Iterable[int] = range(3, 66, 2)) -> dict[int, float]:
    """Mean cosine similarity between each slice and its in-window neighbors, per window size.

    Windows are centered on each slice and truncated at volume ends; the
    per-center means are averaged over every center that has a neighbor.
    """
    volumes = defaultdict(list)
    for key, vec in embeddings.items():
        volumes[volume_ids[key]].append((slice_indices[key], key))
    ordered = []
    for vid in sorted(volumes, key=str):
        items = sorted(volumes[vid])
        if len(items) > 1:
            vecs = np.stack([np.asarray(embeddings[k], dtype=np.float64) for _, k in items])
            vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
            ordered.append(vecs)
    if not ordered:
        raise MetricError("every volume has a single slice; no neighbors to compare")
    out = {}
    for w in window_sizes:
        w = int(w)
        if w < 3 or w > 65 or w % 2 == 0:
            raise MetricError(f"window size must be odd in [3, 65], got {w}")
        r = w // 2
        scores = []
        for vecs in ordered:
            gram = vecs @ vecs.T
            n = len(vecs)
            for i in range(n):
                lo, hi = max(0, i - r), min(n, i + r + 1)
                neigh = [gram[i, j] for j in range(lo, hi) if j != i]
                scores.append(float(np.mean(neigh)))
        out[w] = float(np.mean(scores))
    return out


def load_stopwords() -> frozenset:
    text = resources.files("retina_wsss").joinpath("data/stopwords.txt").read_text()
    return frozenset(w.strip() for w in text.split() if w.strip())


_TOKEN = re.compile(r"[^0-9a-z]+")


def tokenize(caption: str, stopwords: Optional[frozenset] = None) -> list[str]:
    stop = load_stopwords() if stopwords is None else stopwords
    return [t for t in _TOKEN.split(caption.lower()) if t and t not in stop]


def word_frequency(captions: Sequence[str], groups: Optional[Sequence[str]] = None,
                   stopwords: Optional[frozenset] = None) -> dict[str, list[tuple[str, int]]]:
    """Per-group token counts, ordered by count (descending) then word."""
    stop = load_stopwords() if stopwords is None else stopwords
    if groups is None:
        groups = ["all"] * len(captions)
    if len(groups) != len(captions):
        raise DimensionError(f"{len(captions)} captions but {len(groups)} group labels")
    counters: dict[str, Counter] = defaultdict(Counter)
    for caption, group in zip(captions, groups):
        counters[group].update(tokenize(caption, stop))
    return {g: sorted(c.items(), key=lambda kv: (-kv[1], kv[0])) for g, c in sorted(counters.items())}
