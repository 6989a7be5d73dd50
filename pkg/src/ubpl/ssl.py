"""Semi-supervised method adapters.

Each method splits its loss into a supervised part on labeled data and an
unsupervised part on unlabeled data, ``l_ssl = l_sup + l_unsup``. Masked
unsupervised losses are averaged over the full unlabeled batch (or
batch x keypoints), so rejected samples contribute zero rather than shrinking
the denominator. Targets produced by the model itself are always detached.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import TransformRecord, align_prediction, flip_permutation
from .models import FeatureTap, Model, decode_heatmaps
from .tensor import Tensor, no_grad

__all__ = [
    "METHODS",
    "Adam",
    "SGD",
    "make_optimizer",
    "BranchState",
    "LossBreakdown",
    "LabeledBatch",
    "UnlabeledBatch",
    "BranchOutputs",
    "ema_update",
    "task_loss",
    "confidence",
    "masked_cross_entropy",
    "masked_mse",
    "mean_teacher_mask",
    "align_with_confidence",
    "forward_branch",
    "apply_update",
    "supervised_step",
    "mean_teacher_step",
    "fixmatch_step",
    "dualpose_step",
]

METHODS = ("supervised", "mean_teacher", "fixmatch", "dualpose")


# ---------------------------------------------------------------------------
# optimizers


class Adam:
    name = "adam"

    def __init__(self, lr=0.00025, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {"name": self.name, "lr": self.lr, "betas": list(self.betas), "eps": self.eps, "weight_decay": self.weight_decay}

    def slots(self) -> dict[str, dict[str, np.ndarray]]:
        return {"m": self.m, "v": self.v}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        b1, b2 = self.betas
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            m = self.m.get(name, np.zeros_like(p.data))
            v = self.v.get(name, np.zeros_like(p.data))
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class SGD:
    """Momentum SGD; with ``nesterov`` the lookahead form ``g + mu * buf`` is used."""

    name = "sgd"

    def __init__(self, lr=0.03, momentum=0.9, nesterov=True, weight_decay=0.0):
        self.lr, self.momentum, self.nesterov, self.weight_decay = lr, momentum, nesterov, weight_decay
        self.t = 0
        self.buf: dict[str, np.ndarray] = {}

    def config(self) -> dict:
        return {"name": self.name, "lr": self.lr, "momentum": self.momentum, "nesterov": self.nesterov,
                "weight_decay": self.weight_decay}

    def slots(self) -> dict[str, dict[str, np.ndarray]]:
        return {"buf": self.buf}

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        for name, p in params.items():
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self.buf.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buf[name] = buf
            update = g + self.momentum * buf if self.nesterov else buf
            p.data = p.data - self.lr * update


def make_optimizer(config: dict):
    cfg = dict(config)
    name = cfg.pop("name")
    if name == "adam":
        return Adam(**cfg)
    if name == "sgd":
        return SGD(**cfg)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# state and batches


@dataclass
class BranchState:
    model: Model
    optimizer: object
    method: str
    teacher: Optional[dict[str, np.ndarray]] = None
    step: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "mean_teacher" and self.teacher is None:
            self.teacher = {k: v.copy() for k, v in self.model.state_arrays().items()}
        if self.method != "mean_teacher" and self.teacher is not None:
            raise ValueError("EMA teacher parameters only exist for mean_teacher")


@dataclass
class LossBreakdown:
    l_sup: float
    l_unsup: float = 0.0
    l_pse: float = 0.0
    l_fd: float = 0.0
    total: float = 0.0
    accepted_pseudo_count: int = 0

    @property
    def l_ssl(self) -> float:
        return self.l_sup + self.l_unsup

    def as_dict(self) -> dict[str, float]:
        return {"l_sup": self.l_sup, "l_unsup": self.l_unsup, "l_ssl": self.l_ssl, "l_pse": self.l_pse,
                "l_fd": self.l_fd, "total": self.total, "accepted": float(self.accepted_pseudo_count)}


@dataclass
class LabeledBatch:
    """Weakly augmented labeled images with targets in the augmented frame.

    ``targets`` are one-hot [N, K] for classification and heatmaps [N, K, H, W]
    for regression.
    """

    images: np.ndarray
    targets: np.ndarray
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.images) == 0:
            raise ValueError("empty labeled batch")


@dataclass
class UnlabeledBatch:
    """Two views per sample: ``weak`` (easy / teacher view) and ``strong`` (hard / student view)."""

    weak: np.ndarray
    strong: np.ndarray
    weak_records: Optional[Sequence[TransformRecord]] = None
    strong_records: Optional[Sequence[TransformRecord]] = None
    flip_pairs: tuple = ()

    def __len__(self):
        return len(self.weak)

    def __post_init__(self):
        if self.strong is None or len(self.weak) != len(self.strong):
            raise ValueError("unlabeled batch needs paired weak and strong views")


@dataclass
class BranchOutputs:
    """Graph tensors and detached predictions from one branch's forward passes."""

    l_sup: Tensor
    l_unsup: Tensor
    accepted: int
    labeled_tap: FeatureTap
    strong_out: Optional[Tensor] = None
    weak_pred: Optional[np.ndarray] = None  # probabilities or heatmaps used for ensemble pseudo-labels


# ---------------------------------------------------------------------------
# loss pieces


def ema_update(teacher, student, decay: float):
    """``teacher <- decay * teacher + (1 - decay) * student``; works on dicts or arrays."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    if isinstance(teacher, dict):
        if teacher.keys() != student.keys():
            raise ValueError("teacher and student parameter names differ")
        return {k: ema_update(teacher[k], student[k], decay) for k in teacher}
    t, s = np.asarray(teacher, dtype=np.float64), np.asarray(student, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {s.shape}")
    return decay * t + (1.0 - decay) * s


def task_loss(out: Tensor, targets: np.ndarray, task: str) -> Tensor:
    if task == "classification":
        return T.softmax_cross_entropy(out, targets)
    return T.mse(out, targets)


def probabilities(out) -> np.ndarray:
    z = out.data if isinstance(out, Tensor) else np.asarray(out)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def confidence(pred: np.ndarray, task: str) -> np.ndarray:
    """Max class probability [N] or decoded per-keypoint heatmap peak [N, K]."""
    if task == "classification":
        return pred.max(axis=-1)
    return decode_heatmaps(pred)[1]


def masked_cross_entropy(logits: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """sum_i mask_i * CE(logits_i, onehot(labels_i)) / N."""
    n, k = logits.shape
    onehot = np.eye(k)[np.asarray(labels, dtype=np.int64)]
    per = T.softmax_cross_entropy(logits, onehot, reduction="none")
    return T.mul(T.sum(T.mul(per, np.asarray(mask, dtype=np.float64))), 1.0 / n)


def masked_mse(pred: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Squared error averaged within each masked unit, summed over units, divided by the unit count.

    ``mask`` has the leading dims of ``pred``: [N] for vectors, [N, K] for heatmaps.
    """
    mask = np.asarray(mask, dtype=np.float64)
    inner = tuple(range(mask.ndim, pred.ndim))
    per = T.mean(T.square(T.sub(pred, np.asarray(target))), axis=inner) if inner else T.square(T.sub(pred, target))
    return T.mul(T.sum(T.mul(per, mask)), 1.0 / mask.size)


def mean_teacher_mask(conf_teacher: np.ndarray, conf_student: np.ndarray, tau: float, require_tau: bool = True) -> np.ndarray:
    mask = conf_teacher > conf_student
    if require_tau:
        mask &= conf_teacher >= tau
    return mask


def align_with_confidence(heatmaps: np.ndarray, conf: np.ndarray, source, target, flip_pairs) -> tuple[np.ndarray, np.ndarray]:
    """Warp [N, K, H, W] heatmaps between frames and carry per-keypoint confidences along."""
    aligned = align_prediction(heatmaps, source, target, flip_pairs)
    conf = conf.copy()
    perm = flip_permutation(heatmaps.shape[1], flip_pairs)
    for i, (s, t) in enumerate(zip(source, target)):
        if s.flip != t.flip:
            conf[i] = conf[i][perm]
    return aligned, conf


def _task(state: BranchState) -> str:
    return state.model.spec.task


def _no_records(n) -> list[TransformRecord]:
    return [TransformRecord()] * n


# ---------------------------------------------------------------------------
# per-method forward passes (no parameter update)


def _supervised_forward(state, lb, ub, tau, **_):
    out, tap = state.model(lb.images)
    return BranchOutputs(task_loss(out, lb.targets, _task(state)), T.tensor(0.0), 0, tap)


def _student_on(state, lb, views: np.ndarray):
    """One forward over labeled images and ``views``; returns (labeled out, labeled tap, view out)."""
    n = len(lb.images)
    out, tap = state.model(np.concatenate([lb.images, views]))
    return out[:n], FeatureTap(tap.feature[:n]), out[n:]


def _mean_teacher_forward(state, lb, ub, tau, require_tau=True, **_):
    if state.teacher is None:
        raise ValueError("mean_teacher step needs EMA teacher parameters")
    task = _task(state)
    out_l, tap, out_s = _student_on(state, lb, ub.strong)
    with no_grad():
        teacher_out, _ = state.model(ub.weak, params=state.teacher)
    if task == "classification":
        target = probabilities(teacher_out)
        student = T.softmax(out_s)
        mask = mean_teacher_mask(target.max(-1), probabilities(out_s).max(-1), tau, require_tau)
        weak_pred = target
    else:
        weak_pred = teacher_out.data
        src = ub.weak_records or _no_records(len(ub))
        dst = ub.strong_records or _no_records(len(ub))
        target, conf_t = align_with_confidence(weak_pred, confidence(weak_pred, task), src, dst, ub.flip_pairs)
        student = out_s
        mask = mean_teacher_mask(conf_t, confidence(out_s.data, task), tau, require_tau)
    l_unsup = masked_mse(student, target, mask)
    return BranchOutputs(task_loss(out_l, lb.targets, task), l_unsup, int(mask.sum()), tap, out_s, weak_pred)


def _fixmatch_forward(state, lb, ub, tau, **_):
    if _task(state) != "classification":
        raise ValueError("fixmatch adapter is defined for classification")
    out_l, tap, out_s = _student_on(state, lb, ub.strong)
    with no_grad():
        weak_out, _ = state.model(ub.weak)
    probs = probabilities(weak_out)
    mask = probs.max(-1) >= tau
    l_unsup = masked_cross_entropy(out_s, probs.argmax(-1), mask)
    return BranchOutputs(task_loss(out_l, lb.targets, "classification"), l_unsup, int(mask.sum()), tap, out_s, probs)


def _dualpose_forward(state, lb, ub, tau, **_):
    if _task(state) != "regression":
        raise ValueError("dualpose adapter is defined for heatmap regression")
    if ub.weak_records is None or ub.strong_records is None:
        raise ValueError("dualpose needs transform records for both views")
    out_l, tap, out_s = _student_on(state, lb, ub.strong)
    with no_grad():
        easy_out, _ = state.model(ub.weak)
    easy = easy_out.data
    target, conf = align_with_confidence(easy, confidence(easy, "regression"), ub.weak_records, ub.strong_records, ub.flip_pairs)
    mask = conf >= tau
    l_unsup = masked_mse(out_s, target, mask)
    return BranchOutputs(task_loss(out_l, lb.targets, "regression"), l_unsup, int(mask.sum()), tap, out_s, easy)


_FORWARDS: dict[str, Callable] = {
    "supervised": _supervised_forward,
    "mean_teacher": _mean_teacher_forward,
    "fixmatch": _fixmatch_forward,
    "dualpose": _dualpose_forward,
}


def forward_branch(state: BranchState, lb: LabeledBatch, ub: Optional[UnlabeledBatch], tau: float, **options) -> BranchOutputs:
    if state.method != "supervised" and ub is None:
        raise ValueError(f"{state.method} needs an unlabeled batch")
    return _FORWARDS[state.method](state, lb, ub, tau, **options)


def apply_update(state: BranchState, loss: Tensor, ema_decay: float = 0.999) -> None:
    """Backprop ``loss`` into this branch, take an optimizer step, refresh the EMA teacher."""
    params = state.model.params
    T.zero_grad(params.values())
    T.backward(loss)
    state.optimizer.step(params)
    T.zero_grad(params.values())
    if state.teacher is not None:
        state.teacher = ema_update(state.teacher, state.model.state_arrays(), ema_decay)
    state.step += 1


def _standalone_step(state, lb, ub, tau, lambda_ssl, ema_decay, **options) -> LossBreakdown:
    outs = forward_branch(state, lb, ub, tau, **options)
    l_ssl = T.add(outs.l_sup, outs.l_unsup)
    loss = T.mul(l_ssl, lambda_ssl)
    apply_update(state, loss, ema_decay)
    parts = LossBreakdown(outs.l_sup.item(), outs.l_unsup.item(), accepted_pseudo_count=outs.accepted)
    parts.total = lambda_ssl * parts.l_ssl
    return parts


def supervised_step(state: BranchState, lb: LabeledBatch, lambda_ssl: float = 1.0) -> LossBreakdown:
    return _standalone_step(state, lb, None, 1.0, lambda_ssl, 0.0)


def mean_teacher_step(state, lb, ub, tau=0.95, lambda_ssl=1.0, ema_decay=0.999, require_tau=True) -> LossBreakdown:
    return _standalone_step(state, lb, ub, tau, lambda_ssl, ema_decay, require_tau=require_tau)


def fixmatch_step(state, lb, ub, tau=0.95, lambda_ssl=1.0) -> LossBreakdown:
    return _standalone_step(state, lb, ub, tau, lambda_ssl, 0.0)


def dualpose_step(state, lb, ub, tau=0.95, lambda_ssl=1.0) -> LossBreakdown:
    return _standalone_step(state, lb, ub, tau, lambda_ssl, 0.0)
