"""Desk-scale convolutional backbones and heatmap utilities.

Two families share one parameter layout (an ordered ``name -> Tensor`` map):

* ``Classifier``: conv stages each followed by ReLU and a 2x2 average pool;
  the last pooled map is the feature tap and a linear head reads its flattened
  values.
* ``HeatmapRegressor``: a same-size conv encoder with a 1x1 conv head giving
  one heatmap per keypoint; the feature tap is a 2x2 average pool of the last
  encoder map.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "ModelSpec",
    "FeatureTap",
    "Model",
    "Classifier",
    "HeatmapRegressor",
    "build_model",
    "render_heatmap",
    "decode_heatmap",
    "decode_heatmaps",
]


@dataclass(frozen=True)
class ModelSpec:
    task: str  # "classification" | "regression"
    input_shape: tuple[int, int, int] = (1, 16, 16)
    num_outputs: int = 10  # classes or keypoints
    widths: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    pool: int = 2
    seed: int = 1388

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "widths", tuple(int(v) for v in self.widths))
        if self.task not in ("classification", "regression"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.num_outputs < 1 or not self.widths or min(self.widths) < 1:
            raise ValueError("num_outputs and widths must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd and positive")


@dataclass
class FeatureTap:
    """Average-pooled feature map [N, C, h, w] taken for the decorrelation loss."""

    feature: Tensor

    @property
    def channels(self) -> int:
        return self.feature.shape[1]

    def flat(self) -> Tensor:
        """[N, C, h*w] view; element count is preserved."""
        n, c, h, w = self.feature.shape
        return T.reshape(self.feature, (n, c, h * w))


def _he_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def channel_norm(h: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise each sample's channel over its spatial positions (no learned affine)."""
    centred = T.sub(h, T.mean(h, axis=(2, 3), keepdims=True))
    var = T.mean(T.square(centred), axis=(2, 3), keepdims=True)
    return T.div(centred, T.sqrt(T.add(var, eps)))


class Model:
    spec: ModelSpec
    params: dict[str, Tensor]

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.params = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return int(np.sum([p.size for p in self.params.values()]))

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.params.values()])

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.params.items()}

    def _resolve(self, params: Optional[Mapping[str, np.ndarray]]) -> dict[str, Tensor]:
        if params is None:
            return self.params
        return {name: Tensor(params[name]) for name in self.params}

    def __call__(self, x, params=None):
        return self.forward(x, params)

    def forward(self, x, params=None) -> tuple[Tensor, FeatureTap]:
        raise NotImplementedError


class Classifier(Model):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        c, h, w = spec.input_shape
        rng = np.random.default_rng(spec.seed)
        k = spec.kernel
        in_ch = c
        for stage, width in enumerate(spec.widths):
            self.params[f"conv{stage}.w"] = Tensor(_he_init(rng, (width, in_ch, k, k), in_ch * k * k), requires_grad=True)
            self.params[f"conv{stage}.b"] = Tensor(np.zeros(width), requires_grad=True)
            in_ch = width
            h, w = h // spec.pool, w // spec.pool
            if h < 1 or w < 1:
                raise ValueError(f"input {spec.input_shape} pools below 1x1 after stage {stage}")
        self.tap_shape = (in_ch, h, w)
        features = in_ch * h * w
        self.params["head.w"] = Tensor(_he_init(rng, (features, spec.num_outputs), features), requires_grad=True)
        self.params["head.b"] = Tensor(np.zeros(spec.num_outputs), requires_grad=True)

    def forward(self, x, params=None):
        p = self._resolve(params)
        h = T.tensor(x) if not isinstance(x, Tensor) else x
        if h.ndim == 3:
            h = T.reshape(h, (1,) + h.shape)
        pad = self.spec.kernel // 2
        last = len(self.spec.widths) - 1
        for stage in range(last + 1):
            h = T.conv2d(h, p[f"conv{stage}.w"], p[f"conv{stage}.b"], padding=pad)
            # the tapped stage is normalised so feature scale cannot grow without bound
            h = T.relu(channel_norm(h) if stage == last else h)
            h = T.avgpool(h, self.spec.pool)
        tap = FeatureTap(h)
        flat = T.reshape(h, (h.shape[0], -1))
        logits = T.add(T.matmul(flat, p["head.w"]), p["head.b"])
        return logits, tap


class HeatmapRegressor(Model):
    def __init__(self, spec: ModelSpec):
        super().__init__(spec)
        c, h, w = spec.input_shape
        if h // spec.pool < 1 or w // spec.pool < 1:
            raise ValueError(f"input {spec.input_shape} pools below 1x1")
        rng = np.random.default_rng(spec.seed)
        k = spec.kernel
        in_ch = c
        for layer, width in enumerate(spec.widths):
            self.params[f"enc{layer}.w"] = Tensor(_he_init(rng, (width, in_ch, k, k), in_ch * k * k), requires_grad=True)
            self.params[f"enc{layer}.b"] = Tensor(np.zeros(width), requires_grad=True)
            in_ch = width
        self.tap_shape = (in_ch, h // spec.pool, w // spec.pool)
        self.params["head.w"] = Tensor(_he_init(rng, (spec.num_outputs, in_ch, 1, 1), in_ch), requires_grad=True)
        self.params["head.b"] = Tensor(np.zeros(spec.num_outputs), requires_grad=True)

    def forward(self, x, params=None):
        p = self._resolve(params)
        h = T.tensor(x) if not isinstance(x, Tensor) else x
        if h.ndim == 3:
            h = T.reshape(h, (1,) + h.shape)
        pad = self.spec.kernel // 2
        for layer in range(len(self.spec.widths)):
            h = T.relu(T.conv2d(h, p[f"enc{layer}.w"], p[f"enc{layer}.b"], padding=pad))
        tap = FeatureTap(T.avgpool(h, self.spec.pool))
        heatmaps = T.conv2d(h, p["head.w"], p["head.b"])
        return heatmaps, tap


def build_model(spec: ModelSpec) -> Model:
    """Deterministically initialise a model from ``spec`` (weights depend only on ``spec.seed``)."""
    if spec.task == "classification":
        return Classifier(spec)
    return HeatmapRegressor(spec)


# ---------------------------------------------------------------------------
# heatmaps


def render_heatmap(keypoints, sigma: float, map_shape: tuple[int, int], visible=None) -> np.ndarray:
    """Unnormalised Gaussian per keypoint with peak 1 at the keypoint.

    ``keypoints`` is [K, 2] as (x, y) = (column, row). Invisible keypoints give
    an all-zero channel.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    kps = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    hgt, wid = map_shape
    vis = np.ones(len(kps), dtype=bool) if visible is None else np.asarray(visible, dtype=bool)
    rows = np.arange(hgt, dtype=np.float64)[:, None]
    cols = np.arange(wid, dtype=np.float64)[None, :]
    out = np.zeros((len(kps), hgt, wid))
    for k, (x, y) in enumerate(kps):
        if not vis[k]:
            continue
        d2 = (cols - x) ** 2 + (rows - y) ** 2
        out[k] = np.exp(-d2 / (2.0 * sigma * sigma))
    return out


def decode_heatmap(heatmap) -> list[tuple[tuple[int, int], float]]:
    """Per channel ``((x, y), confidence)`` at the argmax.

    Ties resolve to the first cell in row-major order; confidence is the peak
    value clamped to [0, 1].
    """
    data = heatmap.data if isinstance(heatmap, Tensor) else np.asarray(heatmap, dtype=np.float64)
    k, _, wid = data.shape
    flat = data.reshape(k, -1)
    idx = flat.argmax(axis=1)
    out = []
    for ch in range(k):
        row, col = divmod(int(idx[ch]), wid)
        out.append(((col, row), float(np.clip(flat[ch, idx[ch]], 0.0, 1.0))))
    return out


def decode_heatmaps(heatmaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised decode of [N, K, H, W] -> coords [N, K, 2] (x, y) and confidences [N, K]."""
    n, k, _, wid = heatmaps.shape
    flat = heatmaps.reshape(n, k, -1)
    idx = flat.argmax(axis=2)
    conf = np.clip(np.take_along_axis(flat, idx[..., None], axis=2)[..., 0], 0.0, 1.0)
    coords = np.stack([idx % wid, idx // wid], axis=-1).astype(np.float64)
    return coords, conf
