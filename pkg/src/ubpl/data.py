"""Synthetic datasets, labeled/unlabeled splitting, IDX ingestion and metrics logs."""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Dataset",
    "SplitSpec",
    "LabeledSet",
    "UnlabeledSet",
    "reveal_labels",
    "CLASS_PATTERNS",
    "gen_classification",
    "gen_keypoints",
    "keypoint_flip_pairs",
    "split_labeled",
    "IDXFormatError",
    "load_idx",
    "write_idx",
    "METRIC_FIELDS",
    "log_metrics",
    "read_metrics",
]


@dataclass
class Dataset:
    """Images [N, C, H, W] in [0, 1] with class indices [N] or keypoints [N, K, 3]."""

    images: np.ndarray
    labels: np.ndarray
    task: str
    num_outputs: int
    flip_pairs: tuple[tuple[int, int], ...] = ()
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.images)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if self.task == "classification" and len(self.labels):
            if self.labels.min() < 0 or self.labels.max() >= self.num_outputs:
                raise ValueError("class label out of range")

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.task, self.num_outputs, self.flip_pairs, dict(self.meta))


@dataclass(frozen=True)
class SplitSpec:
    n_labeled: int
    n_total: int
    seed: int = 1388

    def __post_init__(self):
        if not 0 < self.n_labeled <= self.n_total:
            raise ValueError(f"need 0 < n_labeled <= n_total, got {self.n_labeled}/{self.n_total}")


@dataclass
class LabeledSet:
    images: np.ndarray
    labels: np.ndarray
    task: str
    num_outputs: int
    flip_pairs: tuple = ()
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.images)


class UnlabeledSet:
    """Images only. Ground truth is kept aside for diagnostics via :func:`reveal_labels`."""

    def __init__(self, images, hidden_labels, task, num_outputs, flip_pairs=(), indices=None):
        self.images = images
        self.task = task
        self.num_outputs = num_outputs
        self.flip_pairs = flip_pairs
        self.indices = np.zeros(0, dtype=np.int64) if indices is None else indices
        self.__hidden = hidden_labels

    def __len__(self):
        return len(self.images)

    def _reveal(self):
        return self.__hidden


def reveal_labels(unlabeled: UnlabeledSet) -> np.ndarray:
    """Privileged accessor for pseudo-label quality diagnostics. Never call from training code."""
    return unlabeled._reveal()


# ---------------------------------------------------------------------------
# classification


# (family, cycles per image); every family is invariant under a horizontal flip
CLASS_PATTERNS = [(fam, freq) for freq in (1.5, 2.5, 3.5) for fam in ("rows", "cols", "checker", "rings")]


def _pattern(family: str, freq: float, phase: float, size: int, centre: np.ndarray) -> np.ndarray:
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    w = 2.0 * np.pi * freq
    if family == "rows":
        z = np.sin(w * yy + phase)
    elif family == "cols":
        z = np.sin(w * xx + phase)
    elif family == "checker":
        z = np.sin(w * xx + phase) * np.sin(w * yy + phase)
    else:
        r = np.hypot(xx - centre[0], yy - centre[1])
        z = np.sin(w * r + phase)
    return z


def gen_classification(n: int, num_classes: int, image_size: int = 16, seed: int = 0, noise: float = 0.25) -> Dataset:
    """Class-conditional gratings/checkers/rings with random phase, contrast and pixel noise.

    Classes are balanced to within one sample.
    """
    if num_classes > len(CLASS_PATTERNS):
        raise ValueError(f"at most {len(CLASS_PATTERNS)} classes are representable")
    if num_classes < 1:
        raise ValueError("need at least one class")
    rng = np.random.default_rng([seed, 101])
    labels = rng.permutation(np.arange(n) % num_classes)
    images = np.empty((n, 1, image_size, image_size))
    for i, y in enumerate(labels):
        family, freq = CLASS_PATTERNS[y]
        freq = freq * rng.uniform(0.85, 1.15)
        phase = rng.uniform(0, 2 * np.pi)
        centre = rng.uniform(0.3, 0.7, size=2)
        contrast = rng.uniform(0.2, 0.45)
        img = 0.5 + contrast * _pattern(family, freq, phase, image_size, centre)
        img += rng.normal(0.0, noise, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    meta = {"name": "synthetic-classification", "seed": seed, "n": n, "image_size": image_size}
    return Dataset(images, labels.astype(np.int64), "classification", num_classes, (), meta)


# ---------------------------------------------------------------------------
# keypoints


def keypoint_flip_pairs(num_keypoints: int) -> tuple[tuple[int, int], ...]:
    """Joint layout: 0 head, 1 tail, then (left, right) pairs, then an optional body joint."""
    pairs = []
    k = 2
    while k + 1 < num_keypoints:
        pairs.append((k, k + 1))
        k += 2
    return tuple(pairs)


def _blob(img, x, y, radius, value):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w]
    d2 = (xx - x) ** 2 + (yy - y) ** 2
    img[:] = np.maximum(img, value * np.exp(-d2 / (2.0 * radius * radius)))


def _segment(img, p0, p1, value, width=0.7):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    d = p1 - p0
    length2 = max(float(d @ d), 1e-12)
    t = np.clip(((xx - p0[0]) * d[0] + (yy - p0[1]) * d[1]) / length2, 0.0, 1.0)
    dist2 = (xx - p0[0] - t * d[0]) ** 2 + (yy - p0[1] - t * d[1]) ** 2
    img[:] = np.maximum(img, value * np.exp(-dist2 / (2.0 * width * width)))


def gen_keypoints(n: int, num_keypoints: int = 4, image_size: int = 16, seed: int = 0, noise: float = 0.05) -> Dataset:
    """A deformable animal-like figure: bright head, dim tail, paired side joints.

    The figure is placed with random position, heading, length and side
    spread; all joints stay at least one pixel inside the image.
    """
    if num_keypoints < 1:
        raise ValueError("need at least one keypoint")
    rng = np.random.default_rng([seed, 202])
    pairs = keypoint_flip_pairs(num_keypoints)
    s = image_size
    images = np.empty((n, 1, s, s))
    labels = np.zeros((n, num_keypoints, 3))
    margin = 1.0
    for i in range(n):
        while True:
            heading = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(0.35, 0.55) * s
            centre = rng.uniform(0.3 * s, 0.7 * s, size=2)
            axis = np.array([np.cos(heading), np.sin(heading)])
            side = np.array([-axis[1], axis[0]])
            head = centre + 0.5 * length * axis
            tail = centre - 0.5 * length * axis
            pts = [head, tail]
            for j in range(len(pairs)):
                along = head - (0.2 + 0.3 * j) * length * axis
                spread = rng.uniform(0.15, 0.3) * length
                # "left" is the side that maps to smaller x before any flip
                pts.append(along + spread * side)
                pts.append(along - spread * side)
            if num_keypoints % 2 == 1 and num_keypoints > 2:
                pts.append(centre)
            pts = np.array(pts[:num_keypoints])
            if pts.min() >= margin and pts.max() <= s - 1 - margin:
                break
        for j in range(len(pairs)):
            a, b = 2 + 2 * j, 3 + 2 * j
            if pts[a, 0] > pts[b, 0]:
                pts[[a, b]] = pts[[b, a]]
        img = np.zeros((s, s))
        if num_keypoints >= 2:
            _segment(img, pts[0], pts[1], 0.45, width=1.0)
        for j in range(len(pairs)):
            _segment(img, pts[0] - 0.2 * (pts[0] - pts[1]), pts[2 + 2 * j], 0.3, width=0.5)
            _blob(img, *pts[2 + 2 * j], 0.8, 0.75)
            _blob(img, *pts[3 + 2 * j], 0.8, 0.75)
        _blob(img, *pts[0], 1.1, 1.0)
        if num_keypoints >= 2:
            _blob(img, *pts[1], 0.7, 0.6)
        img += rng.normal(0.0, noise, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
        labels[i, :, :2] = pts
        labels[i, :, 2] = 1.0
    meta = {"name": "synthetic-keypoints", "seed": seed, "n": n, "image_size": s}
    return Dataset(images, labels, "regression", num_keypoints, pairs, meta)


# ---------------------------------------------------------------------------
# splitting


def split_labeled(dataset: Dataset, spec: SplitSpec) -> tuple[LabeledSet, UnlabeledSet]:
    """Deterministic disjoint split; stratified by class for classification."""
    if spec.n_total > len(dataset):
        raise ValueError(f"split asks for {spec.n_total} samples, dataset has {len(dataset)}")
    rng = np.random.default_rng([spec.seed, 303])
    pool = rng.permutation(len(dataset))[: spec.n_total]
    if dataset.task == "classification":
        labels = dataset.labels[pool]
        k = dataset.num_outputs
        per_class = [pool[labels == c] for c in range(k)]
        quota = np.full(k, spec.n_labeled // k)
        extra = rng.permutation(k)[: spec.n_labeled % k]
        quota[extra] += 1
        chosen = []
        for c in range(k):
            if quota[c] > len(per_class[c]):
                raise ValueError(f"class {c} has too few samples for a stratified split")
            chosen.extend(per_class[c][: quota[c]])
        labeled_idx = np.sort(np.array(chosen, dtype=np.int64))
    else:
        labeled_idx = np.sort(pool[: spec.n_labeled])
    unlabeled_idx = np.sort(np.setdiff1d(pool, labeled_idx))
    lab = LabeledSet(dataset.images[labeled_idx], dataset.labels[labeled_idx], dataset.task,
                     dataset.num_outputs, dataset.flip_pairs, labeled_idx)
    unl = UnlabeledSet(dataset.images[unlabeled_idx], dataset.labels[unlabeled_idx], dataset.task,
                       dataset.num_outputs, dataset.flip_pairs, unlabeled_idx)
    return lab, unl


# ---------------------------------------------------------------------------
# IDX


class IDXFormatError(ValueError):
    pass


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_DTYPES:
        raise IDXFormatError(f"{path}: bad IDX magic")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IDXFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = np.dtype(_IDX_DTYPES[raw[2]])
    count = int(np.prod(dims)) if dims else 1
    if len(raw) - header != count * dtype.itemsize:
        raise IDXFormatError(f"{path}: payload holds {len(raw) - header} bytes, dims {dims} need {count * dtype.itemsize}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path, num_classes: Optional[int] = None) -> Dataset:
    """Parse an IDX image/label pair (e.g. MNIST) into a classification dataset."""
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if images.ndim not in (3, 4) or labels.ndim != 1:
        raise IDXFormatError("expected [N,H,W] or [N,C,H,W] images and [N] labels")
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    if images.ndim == 3:
        images = images[:, None]
    scale = 255.0 if images.dtype == np.uint8 else 1.0
    labels = labels.astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(images.astype(np.float64) / scale, labels, "classification", k, (),
                   {"name": "idx", "source": str(images_path)})


# ---------------------------------------------------------------------------
# metrics


METRIC_FIELDS = ("run_id", "epoch", "step", "split", "metric_name", "value")


def log_metrics(path, run_id: str, epoch: int, records: Iterable[tuple]) -> None:
    """Append ``(step, split, metric_name, value)`` rows; the header is written once."""
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRIC_FIELDS)
        for step, split, name, value in records:
            writer.writerow([run_id, int(epoch), int(step), split, name, repr(float(value))])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["epoch"] = int(row["epoch"])
        row["step"] = int(row["step"])
        row["value"] = float(row["value"])
    return rows
