"""Weak/strong augmentation with invertible geometric records.

Geometry acts about the image centre ``c``: a point ``p`` (x = column,
y = row) maps to ``s * R(angle) * F * (p - c) + c + shift`` where ``F``
mirrors x when the flip flag is set. Images are resampled bilinearly with
zero fill. Keypoints are ``[K, 3]`` arrays of ``(x, y, visible)``; a
horizontal flip also permutes channels through the dataset's flip-pair map.

Policies
--------
regression weak    rotation +-5 deg, scale 0.95-1.05, horizontal flip
regression strong  rotation +-30 deg, scale 0.75-1.25, horizontal flip
classification weak    horizontal flip and a random crop (zero padding of
                       1/8 of the side, integer shifts)
classification strong  weak geometry plus two photometric ops: additive
                       Gaussian noise (std 0.1 * m/10) and a gray cutout
                       (side 1/4 * m/10 of the image). This is a two-op
                       stand-in for RandAugment with n=2, m=10.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "TransformRecord",
    "IDENTITY",
    "POLICIES",
    "flip_permutation",
    "transform_points",
    "transform_keypoints",
    "warp_image",
    "apply_record",
    "sample_record",
    "weak_augment",
    "strong_augment",
    "align_prediction",
]

CROP_FRACTION = 1.0 / 8.0
CUTOUT_FILL = 0.5

POLICIES = {
    ("regression", "weak"): {"angle": 5.0, "scale": (0.95, 1.05), "flip": True, "crop": False},
    ("regression", "strong"): {"angle": 30.0, "scale": (0.75, 1.25), "flip": True, "crop": False},
    ("classification", "weak"): {"angle": 0.0, "scale": (1.0, 1.0), "flip": True, "crop": True},
    ("classification", "strong"): {"angle": 0.0, "scale": (1.0, 1.0), "flip": True, "crop": True},
}


@dataclass(frozen=True)
class TransformRecord:
    angle: float = 0.0  # degrees
    scale: float = 1.0
    flip: bool = False
    shift: tuple[float, float] = (0.0, 0.0)  # (dx, dy) in pixels
    noise_std: float = 0.0
    noise_seed: Optional[int] = None
    cutout: Optional[tuple[int, int, int]] = None  # (x0, y0, side)

    def geometric(self) -> "TransformRecord":
        return TransformRecord(self.angle, self.scale, self.flip, self.shift)

    def matrix(self, image_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        """Affine ``(A, b)`` with ``p' = A p + b`` for points (x, y)."""
        if self.scale <= 0:
            raise ValueError("degenerate scale in transform record")
        h, w = image_shape
        centre = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        theta = np.deg2rad(self.angle)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        mirror = np.diag([-1.0, 1.0]) if self.flip else np.eye(2)
        a = self.scale * rot @ mirror
        b = centre + np.asarray(self.shift, dtype=np.float64) - a @ centre
        return a, b

    def inverse(self, image_shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.matrix(image_shape)
        a_inv = np.linalg.inv(a)
        return a_inv, -a_inv @ b


IDENTITY = TransformRecord()


def flip_permutation(num_keypoints: int, flip_pairs: Sequence[tuple[int, int]] = ()) -> np.ndarray:
    perm = np.arange(num_keypoints)
    for i, j in flip_pairs:
        perm[i], perm[j] = j, i
    return perm


def transform_points(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return pts @ a.T + b


def transform_keypoints(keypoints: np.ndarray, record: TransformRecord, image_shape, flip_pairs=()) -> np.ndarray:
    """Map [K, 3] keypoints through ``record``; points leaving the image become invisible."""
    kps = np.asarray(keypoints, dtype=np.float64)
    a, b = record.matrix(image_shape)
    out = kps.copy()
    out[:, :2] = transform_points(kps[:, :2], a, b)
    h, w = image_shape
    inside = (out[:, 0] >= 0) & (out[:, 0] <= w - 1) & (out[:, 1] >= 0) & (out[:, 1] <= h - 1)
    out[:, 2] = np.where(inside & (kps[:, 2] > 0), 1.0, 0.0)
    if record.flip:
        out = out[flip_permutation(len(out), flip_pairs)]
    return out


def warp_image(image: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Resample ``image`` [C, H, W] so that output pixel q holds input at A^-1 (q - b)."""
    img = np.asarray(image, dtype=np.float64)
    _, h, w = img.shape
    if np.allclose(a, np.eye(2), rtol=0, atol=0) and not np.any(b):
        return img.copy()
    a_inv = np.linalg.inv(a)
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    q = np.stack([xs.ravel(), ys.ravel()], axis=1) - b
    src = q @ a_inv.T
    coords = np.stack([src[:, 1], src[:, 0]])  # (row, col) for ndimage
    out = np.empty_like(img)
    for ch in range(img.shape[0]):
        out[ch] = ndimage.map_coordinates(img[ch], coords, order=1, mode="constant", cval=0.0).reshape(h, w)
    return out


def apply_record(image: np.ndarray, record: TransformRecord) -> np.ndarray:
    """Apply geometry then the photometric ops carried by ``record``."""
    img = np.asarray(image, dtype=np.float64)
    a, b = record.matrix(img.shape[1:])
    out = warp_image(img, a, b)
    if record.noise_std > 0:
        noise_rng = np.random.default_rng(record.noise_seed)
        out = out + noise_rng.normal(0.0, record.noise_std, size=out.shape)
    if record.cutout is not None:
        x0, y0, side = record.cutout
        if side > 0:
            out[:, y0 : y0 + side, x0 : x0 + side] = CUTOUT_FILL
    return out


def sample_record(rng: np.random.Generator, task: str, strength: str, image_shape, magnitude: float = 10.0) -> TransformRecord:
    policy = POLICIES[(task, strength)]
    h, w = image_shape
    angle = float(rng.uniform(-policy["angle"], policy["angle"])) if policy["angle"] else 0.0
    lo, hi = policy["scale"]
    scale = float(rng.uniform(lo, hi)) if hi > lo else 1.0
    flip = bool(rng.random() < 0.5) if policy["flip"] else False
    shift = (0.0, 0.0)
    if policy["crop"]:
        pad = int(round(CROP_FRACTION * min(h, w)))
        shift = (float(rng.integers(-pad, pad + 1)), float(rng.integers(-pad, pad + 1)))
    record = TransformRecord(angle=angle, scale=scale, flip=flip, shift=shift)
    if task == "classification" and strength == "strong":
        level = magnitude / 10.0
        side = int(round(0.25 * min(h, w) * level))
        cutout = None
        if side > 0:
            cutout = (int(rng.integers(0, w - side + 1)), int(rng.integers(0, h - side + 1)), side)
        noise_std = 0.1 * level
        noise_seed = int(rng.integers(0, 2**31 - 1))
        record = replace(record, noise_std=noise_std, noise_seed=noise_seed if noise_std > 0 else None, cutout=cutout)
    return record


def _augment(image, keypoints, rng, task, strength, flip_pairs, magnitude=10.0):
    if rng is None:
        raise ValueError("augmentation needs an explicit per-sample rng")
    img = np.asarray(image, dtype=np.float64)
    record = sample_record(rng, task, strength, img.shape[1:], magnitude)
    out = apply_record(img, record)
    kps = None if keypoints is None else transform_keypoints(keypoints, record, img.shape[1:], flip_pairs)
    return out, kps, record


def weak_augment(image, keypoints=None, rng=None, *, task: str = "regression", flip_pairs=()):
    """Light augmentation. Returns ``(image', keypoints' or None, record)``."""
    return _augment(image, keypoints, rng, task, "weak", flip_pairs)


def strong_augment(image, keypoints=None, rng=None, *, task: str = "regression", flip_pairs=(), magnitude: float = 10.0):
    """Aggressive augmentation. Returns ``(image', keypoints' or None, record)``."""
    return _augment(image, keypoints, rng, task, "strong", flip_pairs, magnitude)


def align_prediction(pred_heatmap, source: TransformRecord, target: TransformRecord, flip_pairs=()) -> np.ndarray:
    """Warp heatmaps predicted under ``source`` into the frame of ``target``.

    Works on [K, H, W] or [N, K, H, W] (the latter needs per-sample record
    sequences).
    """
    hm = np.asarray(pred_heatmap, dtype=np.float64)
    if hm.ndim == 4:
        return np.stack([align_prediction(h, s, t, flip_pairs) for h, s, t in zip(hm, source, target)])
    shape = hm.shape[1:]
    a_s, b_s = source.matrix(shape)
    a_t, b_t = target.matrix(shape)
    # target point q_t = A_t A_s^-1 (q_s - b_s) + b_t
    a_s_inv = np.linalg.inv(a_s)
    a = a_t @ a_s_inv
    b = b_t - a @ b_s
    out = warp_image(hm, a, b)
    if source.flip != target.flip:
        out = out[flip_permutation(hm.shape[0], flip_pairs)]
    return out
