"""Two-branch ensemble pseudo-labelling with feature decorrelation.

Both branches run the same SSL method on the same batch and differ only in
their initial weights. Their weak-view predictions are averaged into one
ensemble prediction per unlabeled sample; samples (or keypoints) whose
ensemble confidence reaches ``tau`` supervise the strong-view predictions of
both branches. A covariance penalty between the branches' pooled features on
labeled data keeps the two branches from collapsing onto each other.

Branch total:  lambda_ssl * l_ssl + lambda_pse * l_pse + lambda_fd * l_fd
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .models import FeatureTap
from .ssl import (
    BranchState,
    LabeledBatch,
    LossBreakdown,
    UnlabeledBatch,
    align_with_confidence,
    apply_update,
    confidence,
    forward_branch,
    masked_cross_entropy,
    masked_mse,
)
from .tensor import Tensor

__all__ = [
    "EnsembleState",
    "PseudoLabelBatch",
    "combine_pseudo_labels",
    "align_pseudo_labels",
    "pseudo_label_loss",
    "fd_loss",
    "total_loss",
    "ubpl_train_step",
]


@dataclass
class EnsembleState:
    """One or two branches plus the loss weights.

    A single-branch state is the plain SSL baseline; ``ubpl_train_step``
    requires two branches with different initialisation seeds.
    """

    branches: list[BranchState]
    lambda_ssl: float = 10.0
    lambda_pse: float = 10.0
    lambda_fd: float = 1.0
    beta_fd: float = 1.0
    tau: float = 0.95
    ema_decay: float = 0.999
    require_tau: bool = True
    allow_shared_seed: bool = False  # test hook only

    def __post_init__(self):
        for name in ("lambda_ssl", "lambda_pse", "lambda_fd", "beta_fd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if len(self.branches) == 2 and not self.allow_shared_seed:
            if self.branches[0].model.spec.seed == self.branches[1].model.spec.seed:
                raise ValueError("branches must be initialised from different seeds")

    @property
    def branch_a(self) -> BranchState:
        return self.branches[0]

    @property
    def branch_b(self) -> BranchState:
        return self.branches[1]

    @property
    def task(self) -> str:
        return self.branches[0].model.spec.task


@dataclass
class PseudoLabelBatch:
    """Ensemble predictions for unlabeled samples.

    classification: ``prediction`` [N, K] probabilities, ``confidence`` and
    ``accepted`` [N], ``labels`` the argmax classes.
    regression: ``prediction`` [N, K, H, W] heatmaps, ``confidence`` and
    ``accepted`` [N, K] per keypoint.
    """

    prediction: np.ndarray
    confidence: np.ndarray
    accepted: np.ndarray
    task: str

    @property
    def labels(self) -> np.ndarray:
        return self.prediction.argmax(axis=-1)

    @property
    def accepted_count(self) -> int:
        return int(self.accepted.sum())


def combine_pseudo_labels(pred_a: np.ndarray, pred_b: np.ndarray, tau: float, task: str = "classification") -> PseudoLabelBatch:
    """Average two branches' predictions and threshold the ensemble confidence at ``tau``."""
    a, b = np.asarray(pred_a, dtype=np.float64), np.asarray(pred_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"branch predictions are not aligned: {a.shape} vs {b.shape}")
    ensemble = (a + b) / 2.0
    conf = confidence(ensemble, task)
    return PseudoLabelBatch(ensemble, conf, conf >= tau, task)


def align_pseudo_labels(pseudo: PseudoLabelBatch, source, target, flip_pairs=()) -> PseudoLabelBatch:
    """Move heatmap pseudo-labels from the weak-view frame into the strong-view frame."""
    if pseudo.task != "regression":
        return pseudo
    pred, conf = align_with_confidence(pseudo.prediction, pseudo.confidence, source, target, flip_pairs)
    _, accepted = align_with_confidence(pseudo.prediction, pseudo.accepted.astype(np.float64), source, target, flip_pairs)
    return PseudoLabelBatch(pred, conf, accepted > 0.5, "regression")


def pseudo_label_loss(branch_pred: Tensor, pseudo: PseudoLabelBatch) -> Tensor:
    """Hard-label cross-entropy (classification) or heatmap MSE (regression) on accepted samples.

    Averaged over the whole batch; zero when nothing is accepted.
    """
    if pseudo.task == "classification":
        return masked_cross_entropy(branch_pred, pseudo.labels, pseudo.accepted)
    return masked_mse(branch_pred, pseudo.prediction, pseudo.accepted)


def fd_loss(feat_a, feat_b, beta_fd: float) -> Tensor:
    """beta_fd / (N * C) * sum over samples and channels of cov(a[i, c, :], b[i, c, :]).

    Covariance runs over the flattened spatial positions of each channel.
    Accepts :class:`FeatureTap` objects or [N, C, h, w] tensors.
    """
    a = feat_a.feature if isinstance(feat_a, FeatureTap) else T.tensor(feat_a) if not isinstance(feat_a, Tensor) else feat_a
    b = feat_b.feature if isinstance(feat_b, FeatureTap) else T.tensor(feat_b) if not isinstance(feat_b, Tensor) else feat_b
    if a.ndim == 3:
        a, b = T.reshape(a, (1,) + a.shape), T.reshape(b, (1,) + b.shape)
    if a.shape != b.shape:
        raise ValueError(f"feature shapes differ: {a.shape} vs {b.shape}")
    n, c = a.shape[:2]
    positions = int(np.prod(a.shape[2:]))
    if positions == 0:
        raise ValueError("features have no spatial positions")
    cov = T.covariance(T.reshape(a, (n, c, positions)), T.reshape(b, (n, c, positions)), axis=-1)
    return T.mul(T.mean(cov), beta_fd)


def total_loss(parts, lambda_ssl: float, lambda_pse: float, lambda_fd: float):
    """lambda_ssl * l_ssl + lambda_pse * l_pse + lambda_fd * l_fd for a :class:`LossBreakdown`."""
    if min(lambda_ssl, lambda_pse, lambda_fd) < 0:
        raise ValueError("loss weights must be non-negative")
    return lambda_ssl * parts.l_ssl + lambda_pse * parts.l_pse + lambda_fd * parts.l_fd


def _branch_objective(l_ssl, l_pse, l_fd, lambda_ssl, lambda_pse, lambda_fd) -> Tensor:
    # zero-weight terms are left out of the graph entirely so that the
    # reduced objective is the plain SSL objective bit for bit
    loss = T.mul(l_ssl, lambda_ssl)
    if lambda_pse and l_pse is not None:
        loss = T.add(loss, T.mul(l_pse, lambda_pse))
    if lambda_fd and l_fd is not None:
        loss = T.add(loss, T.mul(l_fd, lambda_fd))
    return loss


def ubpl_train_step(ensemble: EnsembleState, lb: LabeledBatch, ub: UnlabeledBatch) -> tuple[LossBreakdown, LossBreakdown]:
    """One joint step of both branches; returns each branch's loss breakdown.

    Pseudo-labels are built once from both branches' weak-view predictions
    (EMA teachers for Mean Teacher) and the decorrelation loss is computed
    once on labeled views; each branch then updates from its own objective.
    """
    if len(ensemble.branches) != 2:
        raise ValueError("ubpl_train_step needs exactly two branches")
    task = ensemble.task
    outs = [forward_branch(br, lb, ub, ensemble.tau, require_tau=ensemble.require_tau) if br.method == "mean_teacher"
            else forward_branch(br, lb, ub, ensemble.tau) for br in ensemble.branches]

    pseudo = None
    pse_losses: list[Optional[Tensor]] = [None, None]
    if ensemble.lambda_pse and all(o.strong_out is not None for o in outs):
        pseudo = combine_pseudo_labels(outs[0].weak_pred, outs[1].weak_pred, ensemble.tau, task)
        if task == "regression":
            pseudo = align_pseudo_labels(pseudo, ub.weak_records, ub.strong_records, ub.flip_pairs)
        pse_losses = [pseudo_label_loss(o.strong_out, pseudo) for o in outs]

    fd_values: list[Optional[Tensor]] = [None, None]
    fd_value = 0.0
    if ensemble.lambda_fd:
        tap_a, tap_b = outs[0].labeled_tap.feature, outs[1].labeled_tap.feature
        # each branch sees the other's features as constants so its own
        # objective only moves its own parameters
        fd_values = [fd_loss(tap_a, tap_b.detach(), ensemble.beta_fd), fd_loss(tap_a.detach(), tap_b, ensemble.beta_fd)]
        fd_value = fd_values[0].item()

    results = []
    for br, o, l_pse, l_fd in zip(ensemble.branches, outs, pse_losses, fd_values):
        l_ssl = T.add(o.l_sup, o.l_unsup)
        loss = _branch_objective(l_ssl, l_pse, l_fd, ensemble.lambda_ssl, ensemble.lambda_pse, ensemble.lambda_fd)
        parts = LossBreakdown(o.l_sup.item(), o.l_unsup.item(),
                              l_pse.item() if l_pse is not None else 0.0, fd_value,
                              accepted_pseudo_count=pseudo.accepted_count if pseudo is not None else o.accepted)
        parts.total = total_loss(parts, ensemble.lambda_ssl, ensemble.lambda_pse, ensemble.lambda_fd)
        results.append((br, loss, parts))
    for br, loss, _ in results:
        apply_update(br, loss, ensemble.ema_decay)
    return results[0][2], results[1][2]
