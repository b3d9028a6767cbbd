"""Tabular data loading, stratified splitting, standardization, and toys."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]

__all__ = [
    "Dataset",
    "SplitSpec",
    "load_csv",
    "split_stratified",
    "standardize",
    "make_toy",
]


@dataclass(frozen=True)
class Dataset:
    """Inputs with integer class labels or real regression targets."""

    X: FloatArray
    y: np.ndarray
    num_classes: int
    warnings: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "X", np.atleast_2d(np.asarray(self.X, dtype=np.float64)))
        y = np.asarray(self.y)
        if y.shape[0] != self.X.shape[0]:
            raise ValueError("inputs row count does not match targets length")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.is_classification:
            y = y.astype(np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError("class index outside [0, num_classes)")
        else:
            y = y.astype(np.float64)
        object.__setattr__(self, "y", y)

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(np.asarray(self.y).dtype, np.integer)

    @property
    def num_points(self) -> int:
        return self.X.shape[0]

    @property
    def num_features(self) -> int:
        return self.X.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes, self.warnings)


@dataclass(frozen=True)
class SplitSpec:
    """Three-way split fractions with a seed; stratified by default."""

    ratios: tuple[float, float, float] = (0.70, 0.15, 0.15)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if len(self.ratios) != 3:
            raise ValueError("exactly three split ratios required")
        for r in self.ratios:
            if not 0.0 < r < 1.0:
                raise ValueError(f"split ratio {r} not in (0, 1)")
        if abs(sum(self.ratios) - 1.0) > 1e-12:
            raise ValueError("split ratios must sum to 1")


def load_csv(path, label_column: int = -1) -> Dataset:
    """Read a numeric CSV into a Dataset.

    A non-numeric first row is treated as a header. The label column holds
    integers (classification; C inferred as 1 + max label after remapping)
    or reals (regression). Non-contiguous class labels are remapped to
    0..C-1 with a warning recorded on the Dataset.
    """
    path = Path(path)
    rows: list[list[str]] = []
    with open(path, newline="") as fh:
        for raw in csv.reader(fh):
            if not raw or all(cell.strip() == "" for cell in raw):
                continue
            rows.append([cell.strip() for cell in raw])
    if not rows:
        raise ValueError(f"{path}: no rows")
    start = 0
    if any(not _is_number(cell) for cell in rows[0]):
        start = 1
    if start == len(rows):
        raise ValueError(f"{path}: no rows")
    width = len(rows[start])
    data = np.empty((len(rows) - start, width))
    for i, row in enumerate(rows[start:]):
        if len(row) != width:
            raise ValueError(f"{path}: row {start + i + 1} has {len(row)} fields, expected {width}")
        try:
            data[i] = [float(cell) for cell in row]
        except ValueError as exc:
            raise ValueError(f"{path}: row {start + i + 1}: {exc}")
    col = label_column if label_column >= 0 else width + label_column
    if not 0 <= col < width:
        raise ValueError(f"label column {label_column} outside 0..{width - 1}")
    labels_raw = data[:, col]
    X = np.delete(data, col, axis=1)
    warnings: tuple[str, ...] = ()
    if np.allclose(labels_raw, np.round(labels_raw)):
        labels = np.round(labels_raw).astype(np.int64)
        uniq = np.unique(labels)
        if uniq[0] != 0 or uniq[-1] != uniq.size - 1:
            lookup = {int(v): k for k, v in enumerate(uniq)}
            labels = np.array([lookup[int(v)] for v in labels], dtype=np.int64)
            warnings = (
                f"non-contiguous class labels {uniq.tolist()} remapped to 0..{uniq.size - 1}",
            )
        return Dataset(X, labels, int(labels.max()) + 1, warnings)
    return Dataset(X, labels_raw, 1)


def _is_number(cell: str) -> bool:
    try:
        float(cell)
        return True
    except ValueError:
        return False


def _largest_remainder(count: int, ratios, deficits) -> list[int]:
    """Allocate count items to the ratio buckets, remainders largest first.

    Ties on the fractional remainder go to the bucket currently furthest
    below its global target, then to the lower index.
    """
    exact = [count * r for r in ratios]
    quotas = [int(np.floor(e)) for e in exact]
    leftover = count - sum(quotas)
    order = sorted(
        range(len(ratios)),
        key=lambda s: (-(exact[s] - quotas[s]), -deficits[s], s),
    )
    for s in order[:leftover]:
        quotas[s] += 1
    return quotas


def split_stratified(data: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic three-way split, stratified per class when requested."""
    rng = np.random.default_rng(spec.seed)
    n = data.num_points
    parts: list[list[np.ndarray]] = [[], [], []]
    if spec.stratified:
        if not data.is_classification:
            raise ValueError("stratified split requires class labels")
        totals = [0.0, 0.0, 0.0]
        assigned = 0
        for c in range(data.num_classes):
            members = np.flatnonzero(data.y == c)
            if members.size < 3:
                raise ValueError(
                    f"class {c} has {members.size} members; stratified split needs >= 3"
                )
            members = rng.permutation(members)
            assigned += members.size
            deficits = [spec.ratios[s] * assigned - totals[s] for s in range(3)]
            quotas = _largest_remainder(members.size, spec.ratios, deficits)
            offset = 0
            for s, q in enumerate(quotas):
                parts[s].append(members[offset : offset + q])
                totals[s] += q
                offset += q
    else:
        perm = rng.permutation(n)
        quotas = _largest_remainder(n, spec.ratios, [0.0, 0.0, 0.0])
        offset = 0
        for s, q in enumerate(quotas):
            parts[s].append(perm[offset : offset + q])
            offset += q
    splits = []
    for s in range(3):
        idx = np.sort(np.concatenate(parts[s])) if parts[s] else np.empty(0, dtype=np.int64)
        splits.append(data.subset(idx))
    return splits[0], splits[1], splits[2]


def standardize(*datasets: Dataset, fit_index: int = 0) -> tuple[Dataset, ...]:
    """Affine feature transform fit on one split and applied to all.

    Zero-variance features keep scale 1 so the transform stays invertible.
    """
    if not datasets:
        raise ValueError("at least one dataset required")
    fit = datasets[fit_index]
    mean = fit.X.mean(axis=0)
    std = fit.X.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    out = []
    for ds in datasets:
        out.append(Dataset((ds.X - mean) / std, ds.y, ds.num_classes, ds.warnings))
    return tuple(out)


def make_toy(kind: str, seed: int = 0) -> Dataset:
    """Synthetic datasets: a six-point 1-d step and 2-d interleaved crescents."""
    if kind == "step1d":
        X = np.array([[-6.0], [-4.0], [-2.0], [2.0], [4.0], [6.0]])
        y = np.array([0, 0, 0, 1, 1, 1], dtype=np.int64)
        return Dataset(X, y, 2)
    if kind == "banana":
        rng = np.random.default_rng(seed)
        half = 2650
        t0 = rng.uniform(0.0, np.pi, half)
        t1 = rng.uniform(0.0, np.pi, half)
        x0 = np.stack([2.0 * np.cos(t0) - 1.0, 2.0 * np.sin(t0) - 0.5], axis=1)
        x1 = np.stack([1.0 - 2.0 * np.cos(t1), 0.5 - 2.0 * np.sin(t1)], axis=1)
        X = np.concatenate([x0, x1]) + 0.35 * rng.standard_normal((2 * half, 2))
        y = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(half, dtype=np.int64)])
        perm = rng.permutation(2 * half)
        return Dataset(X[perm], y[perm], 2)
    raise ValueError(f"unknown toy dataset kind {kind!r}")
