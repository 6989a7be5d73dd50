"""Experiment driver: data preparation, batching, training, evaluation and reports.

Randomness is keyed, never sequential: every augmentation draws from
``default_rng([seed, epoch, step, stream, slot])`` so a sample's views do not
depend on batch composition or on which arm of an ablation is running. Two
runs with the same resolved config therefore see identical batches, which is
what makes the single-branch baseline and branch 0 of a two-branch run
directly comparable.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .augment import TransformRecord, strong_augment, weak_augment
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, dump_config, load_config
from .data import (
    Dataset,
    LabeledSet,
    SplitSpec,
    UnlabeledSet,
    gen_classification,
    gen_keypoints,
    log_metrics,
    read_metrics,
    reveal_labels,
    split_labeled,
)
from .diagnostics import (
    DEFAULT_EPSILONS,
    CalibrationCurve,
    calibration_curve,
    error_rate,
    keypoint_mse,
    pck,
    variance_decomposition,
    vector_variance_decomposition,
)
from .ensemble import EnsembleState, ubpl_train_step
from .models import ModelSpec, build_model, decode_heatmaps, render_heatmap
from .ssl import (
    BranchState,
    LabeledBatch,
    LossBreakdown,
    UnlabeledBatch,
    dualpose_step,
    fixmatch_step,
    make_optimizer,
    mean_teacher_step,
    probabilities,
    supervised_step,
)

__all__ = [
    "BRANCH_SEED_OFFSET",
    "PCK_ALPHA",
    "ExperimentData",
    "RunResult",
    "DiagnoseError",
    "prepare_data",
    "build_ensemble",
    "make_batches",
    "train_step",
    "predict",
    "evaluate",
    "pseudo_label_quality",
    "feature_covariance",
    "run_experiment",
    "train_run",
    "evaluate_run",
    "diagnose",
    "ablate",
    "ABLATION_ARMS",
]

log = logging.getLogger(__name__)

BRANCH_SEED_OFFSET = 7919
TEST_SEED_OFFSET = 100_003
PCK_ALPHA = 0.2
EVAL_CHUNK = 256


@dataclass
class ExperimentData:
    labeled: LabeledSet
    unlabeled: UnlabeledSet
    test: Dataset


@dataclass
class RunResult:
    config: ExperimentConfig
    ensemble: EnsembleState
    data: ExperimentData
    rows: list = field(default_factory=list)
    final: dict = field(default_factory=dict)


class DiagnoseError(RuntimeError):
    pass


def _generate(cfg: ExperimentConfig, n: int, seed: int) -> Dataset:
    d = cfg.data
    if cfg.task == "classification":
        return gen_classification(n, d.num_outputs, d.image_size, seed, noise=d.noise)
    return gen_keypoints(n, d.num_outputs, d.image_size, seed, noise=d.noise)


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    cfg = cfg.resolved()
    pool = _generate(cfg, cfg.data.n_total, cfg.seed)
    labeled, unlabeled = split_labeled(pool, SplitSpec(cfg.data.n_labeled, cfg.data.n_total, cfg.seed))
    test = _generate(cfg, cfg.data.n_test, cfg.seed + TEST_SEED_OFFSET)
    return ExperimentData(labeled, unlabeled, test)


def build_ensemble(cfg: ExperimentConfig) -> EnsembleState:
    cfg = cfg.resolved()
    n_branches = 2 if cfg.method.ubpl else 1
    branches = []
    for b in range(n_branches):
        spec = ModelSpec(cfg.task, (1, cfg.data.image_size, cfg.data.image_size), cfg.data.num_outputs,
                         tuple(cfg.model.widths), cfg.model.kernel, 2, cfg.seed + b * BRANCH_SEED_OFFSET)
        branches.append(BranchState(build_model(spec), make_optimizer(cfg.optimizer_dict()), cfg.method.name))
    return EnsembleState(
        branches,
        lambda_ssl=cfg.loss.lambda_ssl,
        lambda_pse=cfg.loss.lambda_pse,
        lambda_fd=cfg.loss.lambda_fd if cfg.method.fd_loss else 0.0,
        beta_fd=cfg.loss.beta_fd,
        tau=cfg.method.tau,
        ema_decay=cfg.method.ema_decay,
        require_tau=cfg.method.mt_require_tau,
    )


# ---------------------------------------------------------------------------
# batches


def _rng(seed, epoch, step, stream, slot):
    return np.random.default_rng([seed, epoch, step, stream, slot])


def _targets(task, labels, num_outputs, size, sigma):
    if task == "classification":
        return np.eye(num_outputs)[labels]
    return np.stack([render_heatmap(kp[:, :2], sigma, (size, size), kp[:, 2] > 0) for kp in labels])


def make_batches(cfg: ExperimentConfig, data: ExperimentData, epoch: int, step: int) -> tuple[LabeledBatch, Optional[UnlabeledBatch]]:
    """Build the augmented labeled and unlabeled batches for one step."""
    task, seed = cfg.task, cfg.seed
    pairs = data.labeled.flip_pairs
    pick = _rng(seed, epoch, step, 0, 0)
    idx_l = pick.integers(0, len(data.labeled), size=cfg.train.batch_size)
    images, labels = [], []
    for slot, i in enumerate(idx_l):
        kps = data.labeled.labels[i] if task == "regression" else None
        img, kps2, _ = weak_augment(data.labeled.images[i], kps, _rng(seed, epoch, step, 1, slot), task=task, flip_pairs=pairs)
        images.append(img)
        labels.append(kps2 if task == "regression" else data.labeled.labels[i])
    labels = np.array(labels)
    lb = LabeledBatch(np.stack(images), _targets(task, labels, cfg.data.num_outputs, cfg.data.image_size, cfg.data.sigma), labels)
    if cfg.method.name == "supervised" or len(data.unlabeled) == 0:
        return lb, None
    idx_u = pick.integers(0, len(data.unlabeled), size=cfg.train.batch_size * cfg.train.mu)
    # Mean Teacher on heatmaps pairs two views of similar difficulty
    first = strong_augment if (cfg.method.name == "mean_teacher" and task == "regression") else weak_augment
    weak, strong, wrec, srec = [], [], [], []
    for slot, i in enumerate(idx_u):
        img = data.unlabeled.images[i]
        w_img, _, w_rec = first(img, None, _rng(seed, epoch, step, 2, slot), task=task)
        s_img, _, s_rec = strong_augment(img, None, _rng(seed, epoch, step, 3, slot), task=task)
        weak.append(w_img)
        strong.append(s_img)
        wrec.append(w_rec)
        srec.append(s_rec)
    ub = UnlabeledBatch(np.stack(weak), np.stack(strong), wrec, srec, pairs)
    return lb, ub


def train_step(ensemble: EnsembleState, cfg: ExperimentConfig, lb: LabeledBatch, ub: Optional[UnlabeledBatch]) -> list[LossBreakdown]:
    if len(ensemble.branches) == 2:
        return list(ubpl_train_step(ensemble, lb, ub))
    br = ensemble.branches[0]
    lam = ensemble.lambda_ssl
    if br.method == "supervised":
        return [supervised_step(br, lb, lam)]
    if br.method == "mean_teacher":
        return [mean_teacher_step(br, lb, ub, ensemble.tau, lam, ensemble.ema_decay, ensemble.require_tau)]
    if br.method == "fixmatch":
        return [fixmatch_step(br, lb, ub, ensemble.tau, lam)]
    return [dualpose_step(br, lb, ub, ensemble.tau, lam)]


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(ensemble: EnsembleState, images: np.ndarray, with_taps: bool = False):
    """Per-branch predictions (class probabilities or heatmaps), EMA teachers where present.

    Returns an array [B, N, ...]; with ``with_taps`` also the pooled features [B, N, C, h, w].
    """
    outs, taps = [], []
    with T.no_grad():
        for br in ensemble.branches:
            chunks, tchunks = [], []
            for start in range(0, len(images), EVAL_CHUNK):
                out, tap = br.model(images[start : start + EVAL_CHUNK], params=br.teacher)
                chunks.append(probabilities(out) if br.model.spec.task == "classification" else out.data)
                tchunks.append(tap.feature.data)
            outs.append(np.concatenate(chunks) if chunks else np.zeros((0,)))
            taps.append(np.concatenate(tchunks) if tchunks else np.zeros((0,)))
    if with_taps:
        return np.stack(outs), np.stack(taps)
    return np.stack(outs)


def evaluate(ensemble: EnsembleState, dataset: Dataset) -> dict[str, float]:
    """Error rate (classification) or keypoint MSE and PCK@0.2 (heatmaps) of the ensemble mean."""
    preds = predict(ensemble, dataset.images).mean(axis=0)
    if ensemble.task == "classification":
        return {"error_rate": error_rate(preds.argmax(-1), dataset.labels)}
    coords, _ = decode_heatmaps(preds)
    side = dataset.images.shape[-1]
    return {"keypoint_mse": keypoint_mse(coords, dataset.labels), "pck": pck(coords, dataset.labels, PCK_ALPHA, side)}


def pseudo_label_confidence_error(ensemble: EnsembleState, unlabeled: UnlabeledSet) -> tuple[np.ndarray, np.ndarray]:
    """Confidence and true error of the ensemble pseudo-label for every unlabeled sample/keypoint."""
    truth = reveal_labels(unlabeled)
    preds = predict(ensemble, unlabeled.images).mean(axis=0)
    if ensemble.task == "classification":
        return preds.max(-1), (preds.argmax(-1) != truth).astype(np.float64)
    coords, conf = decode_heatmaps(preds)
    dist = np.linalg.norm(coords - truth[..., :2], axis=-1)
    vis = truth[..., 2] > 0
    return conf[vis], dist[vis]


def pseudo_label_quality(ensemble: EnsembleState, unlabeled: UnlabeledSet) -> dict[str, float]:
    if len(unlabeled) == 0:
        return {}
    conf, err = pseudo_label_confidence_error(ensemble, unlabeled)
    accepted = conf >= ensemble.tau
    out = {"accepted_fraction": float(accepted.mean()), "error_all": float(err.mean())}
    if accepted.any():
        out["error_accepted"] = float(err[accepted].mean())
    return out


def feature_covariance(ensemble: EnsembleState, images: np.ndarray) -> np.ndarray:
    """Per-sample, per-channel covariance between the two branches' pooled features [N, C]."""
    if len(ensemble.branches) != 2:
        raise ValueError("feature covariance needs two branches")
    _, taps = predict(ensemble, images, with_taps=True)
    a, b = taps[0], taps[1]
    n, c = a.shape[:2]
    a = a.reshape(n, c, -1)
    b = b.reshape(n, c, -1)
    return ((a - a.mean(-1, keepdims=True)) * (b - b.mean(-1, keepdims=True))).mean(-1)


# ---------------------------------------------------------------------------
# full runs


def _mean_parts(parts: list[LossBreakdown]) -> dict[str, float]:
    keys = parts[0].as_dict().keys()
    return {k: float(np.mean([p.as_dict()[k] for p in parts])) for k in keys}


def run_experiment(cfg: ExperimentConfig, out_dir=None, run_id: str = "run") -> RunResult:
    """Train per ``cfg``; if ``out_dir`` is given, log metrics there as training proceeds."""
    cfg = cfg.resolved()
    data = prepare_data(cfg)
    ensemble = build_ensemble(cfg)
    metrics_path = Path(out_dir) / "metrics.csv" if out_dir is not None else None
    result = RunResult(cfg, ensemble, data)
    global_step = 0
    for epoch in range(cfg.train.epochs):
        per_branch: list[list[LossBreakdown]] = [[] for _ in ensemble.branches]
        for step in range(cfg.train.steps_per_epoch):
            lb, ub = make_batches(cfg, data, epoch, step)
            for b, parts in enumerate(train_step(ensemble, cfg, lb, ub)):
                per_branch[b].append(parts)
            global_step += 1
        rows = []
        for b, parts in enumerate(per_branch):
            for name, value in _mean_parts(parts).items():
                rows.append((global_step, "train", f"b{b}.{name}", value))
        last = (epoch + 1) == cfg.train.epochs
        if last or (epoch + 1) % cfg.train.eval_every == 0:
            for name, value in evaluate(ensemble, data.test).items():
                rows.append((global_step, "eval", name, value))
            for name, value in pseudo_label_quality(ensemble, data.unlabeled).items():
                rows.append((global_step, "pseudo", name, value))
        if metrics_path is not None:
            log_metrics(metrics_path, run_id, epoch, rows)
        result.rows.extend((run_id, epoch) + r for r in rows)
        log.info("epoch %d/%d %s", epoch + 1, cfg.train.epochs,
                 " ".join(f"{n}={v:.4g}" for _, s, n, v in rows if s == "eval"))
    result.final = evaluate(ensemble, data.test)
    return result


def train_run(cfg: ExperimentConfig, out_dir, run_id: Optional[str] = None, overwrite: bool = False) -> RunResult:
    """Run and persist: ``config.yaml`` snapshot, ``metrics.csv``, ``checkpoint.ubpl``, ``summary.json``."""
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not overwrite:
            raise FileExistsError(f"run directory {out} already exists and is not empty")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.resolved()
    dump_config(cfg, out / "config.yaml")
    result = run_experiment(cfg, out, run_id or out.name)
    save_checkpoint(result.ensemble, out / "checkpoint.ubpl")
    (out / "summary.json").write_text(json.dumps(result.final, indent=2, sort_keys=True) + "\n")
    return result


def _load_run(run_dir) -> tuple[ExperimentConfig, EnsembleState]:
    run = Path(run_dir)
    ckpt = run / "checkpoint.ubpl"
    if not ckpt.exists():
        raise DiagnoseError(f"no checkpoint in {run}")
    return load_config(run / "config.yaml").resolved(), load_checkpoint(ckpt)


def evaluate_run(run_dir) -> dict[str, float]:
    cfg, ensemble = _load_run(run_dir)
    return evaluate(ensemble, prepare_data(cfg).test)


# ---------------------------------------------------------------------------
# diagnostics


def _write_calibration(curve: CalibrationCurve, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(curve.rows()[0].keys()), lineterminator="\n")
        writer.writeheader()
        for row in curve.rows():
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def _chebyshev_reports(predictions: np.ndarray, epsilons=DEFAULT_EPSILONS) -> list[dict]:
    preds = np.asarray(predictions, dtype=np.float64)
    out = []
    for eps in epsilons:
        report = variance_decomposition(preds, eps) if preds.ndim == 2 else vector_variance_decomposition(preds, eps)
        out.append(report.to_dict())
    return out


def diagnose(source, out_dir=None, num_bins: int = 10, epsilons=DEFAULT_EPSILONS) -> dict:
    """Calibration curve of pseudo-labels and Chebyshev reports for the branches.

    ``source`` is a run directory or an ``.npz`` dump holding ``confidences``,
    ``errors`` and optionally ``predictions`` (T x N or T x N x D).
    Writes ``calibration.csv`` and ``chebyshev.json`` into ``out_dir``.
    """
    src = Path(source)
    if src.is_file():
        dump = np.load(src)
        conf, err = dump["confidences"], dump["errors"]
        preds = dump["predictions"] if "predictions" in dump.files else None
        default_out = src.parent
    else:
        cfg, ensemble = _load_run(src)
        data = prepare_data(cfg)
        if len(data.unlabeled) == 0:
            raise DiagnoseError("unlabeled set is empty; nothing to diagnose")
        conf, err = pseudo_label_confidence_error(ensemble, data.unlabeled)
        raw = predict(ensemble, data.test.images)
        if cfg.task == "classification":
            preds = raw
        else:
            coords, _ = decode_heatmaps(raw.reshape((-1,) + raw.shape[2:]))
            preds = coords.reshape(raw.shape[0], raw.shape[1], -1) / cfg.data.image_size
        default_out = src / "diagnostics"
    if len(conf) == 0:
        raise DiagnoseError("no pseudo-labels to diagnose")
    curve = calibration_curve(conf, err, num_bins)
    out = Path(out_dir) if out_dir is not None else default_out
    out.mkdir(parents=True, exist_ok=True)
    _write_calibration(curve, out / "calibration.csv")
    reports = _chebyshev_reports(preds, epsilons) if preds is not None else []
    (out / "chebyshev.json").write_text(json.dumps({"reports": reports}, indent=2, sort_keys=True) + "\n")
    return {"curve": curve, "reports": reports, "decreasing": curve.is_decreasing(),
            "nonempty_bins": curve.nonempty_bins, "out_dir": str(out)}


# ---------------------------------------------------------------------------
# ablation


ABLATION_ARMS = {
    "baseline": {"ubpl": False, "fd_loss": False},
    "ubpl_nofdl": {"ubpl": True, "fd_loss": False},
    "ubpl": {"ubpl": True, "fd_loss": True},
}


def ablate(cfg: ExperimentConfig, seeds: Sequence[int] = (1388, 1389, 1390), out_dir=None, arms=ABLATION_ARMS) -> dict:
    """Run every arm for every seed; return per-run and per-arm summary tables.

    Summary spread is the population standard deviation across seeds.
    """
    runs = []
    for arm, flags in arms.items():
        for seed in seeds:
            arm_cfg = dataclasses.replace(cfg, seed=seed, method=dataclasses.replace(cfg.method, **flags))
            run_dir = Path(out_dir) / f"{arm}_seed{seed}" if out_dir is not None else None
            res = train_run(arm_cfg, run_dir, overwrite=True) if run_dir is not None else run_experiment(arm_cfg)
            runs.append({"arm": arm, "seed": seed, **res.final})
    metric_names = [k for k in runs[0] if k not in ("arm", "seed")]
    summary = []
    for arm in arms:
        vals = {m: np.array([r[m] for r in runs if r["arm"] == arm]) for m in metric_names}
        row = {"arm": arm, "n_seeds": len(seeds)}
        for m, v in vals.items():
            row[f"{m}_mean"] = float(v.mean())
            row[f"{m}_std"] = float(v.std())
            row[f"{m}_median"] = float(np.median(v))
        summary.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        for name, table in (("ablation_runs.csv", runs), ("ablation.csv", summary)):
            with open(out / name, "w", newline="") as fh:
                writer = csv.DictWriter(fh, fieldnames=list(table[0].keys()), lineterminator="\n")
                writer.writeheader()
                writer.writerows(table)
    return {"runs": runs, "summary": summary}
