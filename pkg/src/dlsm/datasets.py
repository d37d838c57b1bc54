"""Labeled low-dimensional datasets: the inter-twinning moons and CSV I/O."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if points.ndim != 2 or len(points) < 1:
            raise DatasetError(f"points must be a non-empty N x d array, got {points.shape}")
        if labels.shape != (len(points),):
            raise DatasetError("labels must have one entry per point")
        if self.class_count < 1:
            raise DatasetError("class_count must be >= 1")
        if labels.min() < 0 or labels.max() >= self.class_count:
            raise DatasetError(f"labels must lie in [0, {self.class_count})")
        if not np.all(np.isfinite(points)):
            raise DatasetError("points must be finite")
        points.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def class_sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


@dataclass(frozen=True)
class MoonConfig:
    samples_per_class: int = 1000
    noise_std: float = 0.05
    scale_factor: float = 20.0
    seed: int = 0
    center: bool = True

    def __post_init__(self):
        if self.samples_per_class < 1:
            raise DatasetError("samples_per_class must be >= 1")
        if self.noise_std < 0:
            raise DatasetError("noise_std must be >= 0")


def generate_moons(cfg: MoonConfig) -> LabeledDataset:
    """Two interleaving crescents, jittered, mean-centered and scaled.

    Class 0 is the upper crescent ``(cos u, sin u)`` and class 1 the lower one
    ``(1 - cos u, 0.5 - sin u)`` with ``u ~ U[0, pi]``.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.samples_per_class
    u0 = rng.uniform(0.0, np.pi, n)
    u1 = rng.uniform(0.0, np.pi, n)
    upper = np.stack([np.cos(u0), np.sin(u0)], axis=1)
    lower = np.stack([1.0 - np.cos(u1), 0.5 - np.sin(u1)], axis=1)
    points = np.concatenate([upper, lower])
    if cfg.noise_std > 0:
        points = points + cfg.noise_std * rng.standard_normal(points.shape)
    if cfg.center:
        points = points - points.mean(axis=0)
    points = points * cfg.scale_factor
    labels = np.repeat(np.arange(2), n)
    return LabeledDataset(points, labels, 2)


def subset_by_class(dataset: LabeledDataset, label: int) -> LabeledDataset:
    if not 0 <= label < dataset.class_count:
        raise DatasetError(f"class {label} out of range [0, {dataset.class_count})")
    mask = dataset.labels == label
    if not mask.any():
        raise DatasetError(f"class {label} has no points")
    return LabeledDataset(dataset.points[mask], dataset.labels[mask], dataset.class_count)


def save_csv(dataset: LabeledDataset, path) -> None:
    d = dataset.dim
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join([f"x{i}" for i in range(d)] + ["label"]) + "\n")
        for row, label in zip(dataset.points, dataset.labels):
            fh.write(",".join(format(v, ".17g") for v in row) + f",{int(label)}\n")


def load_csv(path, class_count: int | None = None) -> LabeledDataset:
    """Read ``x0,...,x{d-1},label`` rows; ``class_count`` defaults to max label + 1."""
    path = Path(path)
    points, labels = [], []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DatasetError(f"{path}: empty file")
        d = len(header) - 1
        if d < 1 or header[-1].strip() != "label":
            raise DatasetError(f"{path}:1: header must be x0,...,x{{d-1}},label")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 1:
                raise DatasetError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
            try:
                coords = [float(v) for v in row[:d]]
                label = int(row[d])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed row ({exc})") from None
            if label < 0 or (class_count is not None and label >= class_count):
                raise DatasetError(f"{path}:{lineno}: label {label} out of range")
            points.append(coords)
            labels.append(label)
    if not points:
        raise DatasetError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    if class_count is None:
        class_count = int(labels_arr.max()) + 1
    return LabeledDataset(np.asarray(points), labels_arr, class_count)
