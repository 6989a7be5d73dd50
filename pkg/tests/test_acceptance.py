"""Acceptance suite: one test per criterion, each printing a PASS/FAIL verdict line.

The training-based criteria (4 to 7) take roughly twenty minutes together on
one CPU core. The two ablations are module-scoped fixtures shared between the
criteria that read them.
"""

import copy
import csv
import time
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ubpl.checkpoint import load_checkpoint, save_checkpoint
from ubpl.cli import main
from ubpl.config import apply_overrides, load_config
from ubpl.diagnostics import DEFAULT_EPSILONS, variance_decomposition
from ubpl.ensemble import combine_pseudo_labels
from ubpl.experiment import (
    BRANCH_SEED_OFFSET,
    ablate,
    build_ensemble,
    feature_covariance,
    make_batches,
    prepare_data,
    run_experiment,
    train_run,
    train_step,
)
from ubpl.gradcheck import check_gradients
from ubpl.ssl import confidence, forward_branch, mean_teacher_mask

from conftest import record
from gradcases import CASES
from tiny import tiny_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SEEDS = (1388, 1389, 1390)
TIE = 0.01  # relative tolerance for ablation ties


def _median(summary, arm, metric):
    return next(r for r in summary if r["arm"] == arm)[f"{metric}_median"]


@pytest.fixture(scope="module")
def cls_ablation(tmp_path_factory):
    cfg = load_config(CONFIGS / "cls_fixmatch_40.yaml")
    start = time.time()
    result = ablate(cfg, SEEDS)
    result["seconds_per_arm"] = (time.time() - start) / 3
    return result


@pytest.fixture(scope="module")
def pose_ablation(tmp_path_factory):
    cfg = load_config(CONFIGS / "pose_mt_30of200.yaml")
    out = tmp_path_factory.mktemp("pose_ablation")
    start = time.time()
    result = ablate(cfg, SEEDS, out_dir=out)
    result["seconds_per_arm"] = (time.time() - start) / 3
    result["out"] = out
    return result


# 1. gradient correctness


def test_criterion_01_gradient_correctness():
    start = time.time()
    worst = {}
    for i, (name, factory) in enumerate(CASES.items()):
        rng = np.random.default_rng(1000 + i)
        worst[name] = max(check_gradients(*factory(rng)) for _ in range(100))
    elapsed = time.time() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err <= 1e-4 and elapsed <= 120
    record(1, ok, "gradient correctness",
           f"{len(CASES)} ops x 100 instances, worst rel err {err:.2e} ({name}), {elapsed:.0f}s")
    assert err <= 1e-4, worst
    assert elapsed <= 120


# 2. decomposition identity


def test_criterion_02_decomposition_identity():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        t, n = int(rng.integers(1, 9)), int(rng.integers(2, 1001))
        shared = rng.normal(size=n) * rng.uniform(0, 3)
        preds = rng.uniform(-1, 1, size=(t, 1)) * shared + rng.normal(size=(t, n)) * rng.uniform(0.05, 2, size=(t, 1))
        ens = preds.mean(axis=0)
        direct = np.mean((ens - ens.mean()) ** 2)
        rep = variance_decomposition(preds)
        identity = (np.sum(rep.var_terms) + 2 * np.sum(list(rep.covar_terms.values()))) / t**2
        worst = max(worst, abs(identity - direct))
    ok = worst <= 1e-10
    record(2, ok, "decomposition identity", f"200 matrices, max |difference| {worst:.1e}")
    assert ok


# 3. Chebyshev guarantee


def _draw(rng, kind, n):
    scale = rng.uniform(0.05, 0.5)
    if kind == 0:
        return rng.normal(0, scale, n)
    if kind == 1:
        return rng.uniform(-scale * 1.7, scale * 1.7, n)
    if kind == 2:
        return rng.exponential(scale, n)
    if kind == 3:
        return rng.laplace(0, scale / 1.4, n)
    if kind == 4:
        return scale * rng.standard_t(3, n)
    return scale * rng.choice([-1.0, 1.0], n) * (rng.random(n) < 0.2) * 2.2  # heavy mass at the tails


def test_criterion_03_chebyshev_guarantee():
    rng = np.random.default_rng(3)
    worst_gap = -np.inf
    for d in range(50):
        x = _draw(rng, d % 6, 100_000)
        for eps in DEFAULT_EPSILONS:
            rep = variance_decomposition(x[None], eps)
            worst_gap = max(worst_gap, rep.empirical_tail - rep.bound)
    ok = worst_gap <= 0.01
    record(3, ok, "Chebyshev guarantee", f"50 distributions x 3 eps, max(tail - bound) {worst_gap:+.4f} (slack 0.01)")
    assert ok


# 4. FD-loss effect


def test_criterion_04_fd_loss_effect():
    base = load_config(CONFIGS / "cls_fd_effect.yaml")
    lower, rows = 0, []
    worst_arm_seconds = 0.0
    for seed in SEEDS:
        medians = {}
        for lam in (1.0, 0.0):
            cfg = apply_overrides(base, [f"seed={seed}", f"loss.lambda_fd={lam}"])
            start = time.time()
            res = run_experiment(cfg)
            worst_arm_seconds = max(worst_arm_seconds, time.time() - start)
            medians[lam] = float(np.median(np.abs(feature_covariance(res.ensemble, res.data.test.images))))
        lower += medians[1.0] < medians[0.0]
        rows.append(f"{seed}: {medians[1.0]:.4f} vs {medians[0.0]:.4f}")
    ok = lower >= 2 and worst_arm_seconds <= 10 * 60
    record(4, ok, "FD-loss effect", f"median |cov| with vs without FD loss, {'; '.join(rows)}; "
           f"lower in {lower}/3 seeds, slowest run {worst_arm_seconds:.0f}s")
    assert worst_arm_seconds <= 10 * 60
    assert lower >= 2, rows


# 5. directional UBPL gain


def test_criterion_05_directional_gain(cls_ablation, pose_ablation):
    cls_base = _median(cls_ablation["summary"], "baseline", "error_rate")
    cls_ubpl = _median(cls_ablation["summary"], "ubpl", "error_rate")
    pose_base = _median(pose_ablation["summary"], "baseline", "keypoint_mse")
    pose_ubpl = _median(pose_ablation["summary"], "ubpl", "keypoint_mse")
    cls_ok, pose_ok = cls_ubpl <= cls_base, pose_ubpl <= pose_base
    record(5, cls_ok and pose_ok, "directional UBPL gain",
           f"FixMatch error {cls_base:.2f}% -> +UBPL {cls_ubpl:.2f}% [{'ok' if cls_ok else 'worse'}]; "
           f"MT keypoint MSE {pose_base:.3f} -> +UBPL {pose_ubpl:.3f} [{'ok' if pose_ok else 'worse'}]")
    assert cls_ablation["seconds_per_arm"] <= 15 * 60 and pose_ablation["seconds_per_arm"] <= 15 * 60
    assert pose_ok, "MT+UBPL keypoint MSE above MT"
    assert cls_ok, "FixMatch+UBPL error above FixMatch"


# 6. ablation ordering


def _ordered(summary, metric):
    base, nofdl, full = (_median(summary, arm, metric) for arm in ("baseline", "ubpl_nofdl", "ubpl"))
    return full <= nofdl * (1 + TIE) and nofdl <= base * (1 + TIE), (base, nofdl, full)


def test_criterion_06_ablation_ordering(cls_ablation, pose_ablation):
    pose_ok, p = _ordered(pose_ablation["summary"], "keypoint_mse")
    cls_ok, c = _ordered(cls_ablation["summary"], "error_rate")
    record(6, pose_ok and cls_ok, "ablation ordering UBPL <= UBPL(noFDL) <= baseline",
           f"pose MSE {p[2]:.3f} / {p[1]:.3f} / {p[0]:.3f} [{'ok' if pose_ok else 'violated'}]; "
           f"classification error {c[2]:.2f} / {c[1]:.2f} / {c[0]:.2f} [{'ok' if cls_ok else 'violated'}]")
    assert pose_ok, p
    assert cls_ok, c


# 7. calibration diagnostic on a trained Mean Teacher pose run


def test_criterion_07_calibration_diagnostic(pose_ablation):
    run = pose_ablation["out"] / f"baseline_seed{SEEDS[0]}"
    out = run / "fig1"
    code = main(["diagnose", str(run), "--out", str(out)])
    with open(out / "calibration.csv") as fh:
        rows = list(csv.DictReader(fh))
    nonempty = sum(r["empty"] == "False" for r in rows)
    high = [float(r["mean_error"]) for r in rows if r["empty"] == "False" and float(r["bin_low"]) >= 0.9 - 1e-12]
    ok = code == 0 and nonempty >= 5
    record(7, ok, "calibration diagnostic",
           f"{nonempty} non-empty bins of {len(rows)}; high-confidence bin error(s) {['%.2f' % e for e in high]} px")
    assert ok


# 8. T2L monotonicity and the l_ssl decomposition


METHOD_CASES = [("classification", "fixmatch"), ("classification", "mean_teacher"),
                ("regression", "mean_teacher"), ("regression", "dualpose")]


def _accepted_counts(task, method, seed, taus):
    cfg = tiny_config(task, method, ubpl=True, seed=seed)
    data, ens = prepare_data(cfg), build_ensemble(cfg)
    lb, ub = make_batches(cfg, data, 0, 0)
    counts = []
    for tau in taus:
        outs = [forward_branch(copy.deepcopy(br), lb, ub, tau) for br in ens.branches]
        combined = combine_pseudo_labels(outs[0].weak_pred, outs[1].weak_pred, tau, task).accepted_count
        counts.append((outs[0].accepted, combined))
    return counts


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 10**6), st.lists(st.floats(0, 1), min_size=2, max_size=6).map(sorted))
def _property_masks(seed, taus):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(5) * rng.uniform(0.1, 3), size=30)
    student = rng.dirichlet(np.ones(5), size=30).max(-1)
    heat = confidence(rng.uniform(size=(6, 3, 5, 5)) ** 4, "regression")
    series = [[int((probs.max(-1) >= t).sum()) for t in taus],
              [int(mean_teacher_mask(probs.max(-1), student, t).sum()) for t in taus],
              [int((heat >= t).sum()) for t in taus],
              [combine_pseudo_labels(probs, probs[::-1], t).accepted_count for t in taus]]
    for counts in series:
        assert all(a >= b for a, b in zip(counts, counts[1:]))


def test_criterion_08_t2l_monotonicity_and_decomposition():
    failures = []
    try:
        _property_masks()
    except AssertionError as exc:
        failures.append(f"mask property: {exc}")
    taus = np.linspace(0, 1, 6)
    for task, method in METHOD_CASES:
        for seed in (1, 2):
            counts = _accepted_counts(task, method, seed, taus)
            for k in range(2):
                series = [c[k] for c in counts]
                if any(a < b for a, b in zip(series, series[1:])):
                    failures.append(f"{method}/{task} seed {seed}: {series}")
    n_parts = 0
    for task, method in METHOD_CASES + [("classification", "supervised")]:
        cfg = tiny_config(task, method, ubpl=method != "supervised")
        data, ens = prepare_data(cfg), build_ensemble(cfg)
        for step in range(3):
            for parts in train_step(ens, cfg, *make_batches(cfg, data, 0, step)):
                n_parts += 1
                if parts.l_ssl != parts.l_sup + parts.l_unsup or parts.as_dict()["l_ssl"] != parts.l_sup + parts.l_unsup:
                    failures.append(f"l_ssl mismatch in {method}/{task}")
    ok = not failures
    record(8, ok, "T2L monotonicity and l_ssl = l_sup + l_unsup",
           f"200 random mask batches, 4 methods over a tau grid, {n_parts} loss breakdowns exact" if ok else "; ".join(failures))
    assert ok, failures


# 9. determinism and persistence


def test_criterion_09_determinism_and_persistence(tmp_path):
    cfg = tiny_config("regression", "mean_teacher", ubpl=True, train__epochs=2)
    train_run(cfg, tmp_path / "a", run_id="r")
    train_run(cfg, tmp_path / "b", run_id="r")
    metrics_same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    ckpt_same = []
    for run in ("a", "b"):
        first = tmp_path / run / "checkpoint.ubpl"
        again = tmp_path / run / "again.ubpl"
        save_checkpoint(load_checkpoint(first), again)
        ckpt_same.append(first.read_bytes() == again.read_bytes())
    cls_cfg = tiny_config("classification", "fixmatch", ubpl=True)
    train_run(cls_cfg, tmp_path / "c", run_id="r")
    train_run(cls_cfg, tmp_path / "d", run_id="r")
    metrics_same &= (tmp_path / "c" / "metrics.csv").read_bytes() == (tmp_path / "d" / "metrics.csv").read_bytes()
    save_checkpoint(load_checkpoint(tmp_path / "c" / "checkpoint.ubpl"), tmp_path / "c" / "again.ubpl")
    ckpt_same.append((tmp_path / "c" / "checkpoint.ubpl").read_bytes() == (tmp_path / "c" / "again.ubpl").read_bytes())
    ok = metrics_same and all(ckpt_same)
    record(9, ok, "determinism and persistence",
           f"rerun metrics byte-identical: {metrics_same}; save-load-save byte-identical: {all(ckpt_same)}")
    assert ok


# 10. reduction sanity


REDUCTION_CASES = [("classification", "fixmatch"), ("classification", "mean_teacher"),
                   ("regression", "mean_teacher"), ("regression", "dualpose")]


def test_criterion_10_reduction_sanity():
    mismatched = []
    for task, method in REDUCTION_CASES:
        joint_cfg = tiny_config(task, method, ubpl=True, loss__lambda_pse=0.0, loss__lambda_fd=0.0)
        data = prepare_data(joint_cfg)
        joint = build_ensemble(joint_cfg)
        solos = []
        for b in range(2):
            solo_cfg = tiny_config(task, method, ubpl=False, seed=joint_cfg.seed + b * BRANCH_SEED_OFFSET)
            solos.append((solo_cfg, build_ensemble(solo_cfg)))
        for step in range(4):
            lb, ub = make_batches(joint_cfg, data, 0, step)  # one rng stream feeds both protocols
            train_step(joint, joint_cfg, lb, ub)
            for solo_cfg, solo in solos:
                train_step(solo, solo_cfg, lb, ub)
        for b, (_, solo) in enumerate(solos):
            a, s = joint.branches[b], solo.branches[0]
            same = all(np.array_equal(a.model.params[n].data, s.model.params[n].data) for n in a.model.params)
            if a.teacher is not None:
                same &= all(np.array_equal(a.teacher[n], s.teacher[n]) for n in a.teacher)
            if not same:
                mismatched.append(f"{method}/{task} branch {b}")
    ok = not mismatched
    record(10, ok, "reduction sanity", "4 methods x 2 branches x 4 steps bit-exact" if ok else ", ".join(mismatched))
    assert ok
