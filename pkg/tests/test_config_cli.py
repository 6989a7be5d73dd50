import csv
import json

import numpy as np
import pytest
import yaml

from ubpl.checkpoint import load_checkpoint, save_checkpoint
from ubpl.cli import main
from ubpl.config import ConfigError, ExperimentConfig, apply_overrides, load_config, parse_config
from ubpl.data import read_metrics
from ubpl.experiment import ABLATION_ARMS, ablate, diagnose, DiagnoseError

from tiny import tiny_config

SMALL = ["--set", "model.widths=[4,4,4]", "--set", "data.n_test=30", "--set", "train.steps_per_epoch=3",
         "--set", "train.batch_size=4", "--set", "train.mu=1", "--set", "data.num_outputs=4"]
SMALL_POSE = ["--set", "task=regression", "--set", "model.widths=[4,4]", "--set", "data.n_test=10",
              "--set", "train.steps_per_epoch=3", "--set", "data.n_total=20", "--set", "data.n_labeled=6"]


# config parsing


def test_defaults_resolve_per_task():
    cls = ExperimentConfig().resolved()
    assert (cls.method.tau, cls.method.ema_decay, cls.loss.lambda_ssl, cls.loss.lambda_pse) == (0.95, 0.999, 10.0, 10.0)
    assert (cls.seed, cls.train.mu, cls.train.batch_size, cls.loss.beta_fd) == (1388, 7, 32, 1000.0)
    assert (cls.optim.name, cls.optim.lr, cls.optim.momentum) == ("sgd", 0.03, 0.9)
    pose = apply_overrides(ExperimentConfig(), ["task=regression"]).resolved()
    assert (pose.optim.name, pose.optim.lr, pose.loss.beta_fd) == ("adam", 0.00025, 1.0)


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError, match="lamda_fd"):
        parse_config({"loss": {"lamda_fd": 1.0}})
    with pytest.raises(ConfigError):
        parse_config({"optimiser": {}})
    with pytest.raises(ConfigError):
        apply_overrides(ExperimentConfig(), ["train.epoch=3"])


def test_wrong_types_rejected():
    with pytest.raises(ConfigError):
        parse_config({"train": {"epochs": "many"}})
    with pytest.raises(ConfigError):
        parse_config({"method": {"ubpl": 1}})


def test_cross_field_checks():
    for overrides in (["method.name=fixmatch", "task=regression"], ["method.ubpl=true"], ["data.n_labeled=500"],
                      ["method.tau=1.5"], ["loss.lambda_pse=-1"], ["method.name=nope"],
                      ["method.name=fixmatch", "data.n_total=30", "data.n_labeled=30"]):
        with pytest.raises(ConfigError):
            apply_overrides(ExperimentConfig(), overrides).resolved()


def test_overrides_parse_yaml_scalars(tmp_path):
    cfg = apply_overrides(ExperimentConfig(), ["method.ubpl=true", "method.name=fixmatch", "model.widths=[2, 3]", "loss.beta_fd=5"])
    assert cfg.method.ubpl is True and cfg.model.widths == [2, 3] and cfg.loss.beta_fd == 5.0
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"task": "regression", "method": {"name": "dualpose"}}))
    assert load_config(path).method.name == "dualpose"


# train / eval


def test_supervised_two_epochs_gives_two_eval_rows(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["train", "--set", "method.name=supervised", "--set", "data.n_total=100", "--set", "data.n_labeled=30",
                 "--set", "train.epochs=2", *SMALL, "--out", str(out)])
    assert code == 0
    rows = read_metrics(out / "metrics.csv")
    assert len([r for r in rows if r["split"] == "eval"]) == 2
    assert {p.name for p in out.iterdir()} == {"config.yaml", "metrics.csv", "checkpoint.ubpl", "summary.json"}
    printed = json.loads(capsys.readouterr().out)
    assert printed["error_rate"] == json.loads((out / "summary.json").read_text())["error_rate"]


def test_train_logs_every_breakdown_field_and_pseudo_quality(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--set", "method.name=fixmatch", "--set", "method.ubpl=true", "--set", "method.tau=0.2",
                 "--set", "train.epochs=1", "--set", "data.n_total=60", "--set", "data.n_labeled=12", *SMALL,
                 "--out", str(out)]) == 0
    names = {r["metric_name"] for r in read_metrics(out / "metrics.csv")}
    for b in (0, 1):
        for field in ("l_sup", "l_unsup", "l_ssl", "l_pse", "l_fd", "total", "accepted"):
            assert f"b{b}.{field}" in names
    assert {"error_rate", "accepted_fraction", "error_all"} <= names


def test_nofdl_arm_has_two_branches_and_no_fd_term(tmp_path):
    out = tmp_path / "run"
    assert main(["train", "--set", "method.name=fixmatch", "--set", "method.ubpl=true", "--set", "method.fd_loss=false",
                 "--set", "train.epochs=1", "--set", "data.n_total=60", "--set", "data.n_labeled=12", *SMALL,
                 "--out", str(out)]) == 0
    state = load_checkpoint(out / "checkpoint.ubpl")
    assert len(state.branches) == 2 and state.lambda_fd == 0.0
    fd_rows = [r["value"] for r in read_metrics(out / "metrics.csv") if r["metric_name"].endswith(".l_fd")]
    assert fd_rows and all(v == 0.0 for v in fd_rows)


def test_same_seed_reruns_are_byte_identical(tmp_path):
    args = ["train", "--set", "method.name=fixmatch", "--set", "method.ubpl=true", "--set", "train.epochs=2",
            "--set", "data.n_total=60", "--set", "data.n_labeled=12", *SMALL, "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    # run ids are the directory names; everything else must match
    ma = (a / "metrics.csv").read_text().replace("\na,", "\nX,")
    mb = (b / "metrics.csv").read_text().replace("\nb,", "\nX,")
    assert ma == mb
    assert (a / "checkpoint.ubpl").read_bytes() == (b / "checkpoint.ubpl").read_bytes()


def test_config_snapshot_replays_run(tmp_path):
    first = tmp_path / "first"
    assert main(["train", "--set", "method.name=fixmatch", "--set", "train.epochs=1", "--set", "data.n_total=60",
                 "--set", "data.n_labeled=12", *SMALL, "--seed", "3", "--out", str(first)]) == 0
    second = tmp_path / "first_replay"
    assert main(["train", "--config", str(first / "config.yaml"), "--out", str(second)]) == 0
    strip = lambda p: [line.split(",", 1)[1] for line in p.read_text().splitlines()[1:]]
    assert strip(first / "metrics.csv") == strip(second / "metrics.csv")


def test_existing_run_directory_is_a_collision(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / "keep.txt").write_text("x")
    assert main(["train", *SMALL, "--set", "train.epochs=1", "--out", str(out)]) == 2
    assert "already exists" in capsys.readouterr().err
    assert (out / "keep.txt").exists()


def test_config_errors_exit_with_status_two(tmp_path, capsys):
    assert main(["train", "--set", "bogus.key=1", "--out", str(tmp_path / "r")]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_eval_matches_summary(tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", *SMALL_POSE, "--set", "method.name=mean_teacher", "--set", "train.epochs=1", "--out", str(out)])
    capsys.readouterr()
    assert main(["eval", str(out), "--out", str(tmp_path / "eval.json")]) == 0
    evaluated = json.loads((tmp_path / "eval.json").read_text())
    assert evaluated == json.loads((out / "summary.json").read_text())
    assert set(evaluated) == {"keypoint_mse", "pck"}


# diagnose


def _ubpl_run(tmp_path, name="run", task="classification"):
    out = tmp_path / name
    if task == "classification":
        args = ["--set", "method.name=fixmatch", "--set", "data.n_total=60", "--set", "data.n_labeled=12", *SMALL]
    else:
        args = [*SMALL_POSE, "--set", "method.name=mean_teacher"]
    assert main(["train", *args, "--set", "method.ubpl=true", "--set", "train.epochs=1", "--out", str(out)]) == 0
    return out


def test_diagnose_writes_reports(tmp_path):
    run = _ubpl_run(tmp_path, task="regression")
    assert main(["diagnose", str(run), "--bins", "5"]) == 0
    with open(run / "diagnostics" / "calibration.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    reports = json.loads((run / "diagnostics" / "chebyshev.json").read_text())["reports"]
    assert [r["epsilon"] for r in reports] == [0.1, 0.2, 0.5]
    assert "trace_ensemble_variance" in reports[0]


def test_diagnose_identical_branches_covariance_equals_variance(tmp_path):
    run = _ubpl_run(tmp_path)
    state = load_checkpoint(run / "checkpoint.ubpl")
    for name, p in state.branch_a.model.params.items():
        state.branch_b.model.params[name].data = p.data.copy()
    save_checkpoint(state, run / "checkpoint.ubpl")
    report = diagnose(run)
    for coord in report["reports"][0]["coordinates"]:
        assert coord["covar_terms"]["0,1"] == pytest.approx(coord["var_terms"][0], abs=1e-15)
        assert coord["var_terms"][0] == pytest.approx(coord["var_terms"][1], abs=1e-15)


def test_diagnose_anti_calibrated_dump(tmp_path):
    conf = np.random.default_rng(0).uniform(size=500)
    np.savez(tmp_path / "dump.npz", confidences=conf, errors=1 - conf)
    report = diagnose(tmp_path / "dump.npz", tmp_path / "out")
    assert report["decreasing"] is True and report["nonempty_bins"] == 10
    assert json.loads((tmp_path / "out" / "chebyshev.json").read_text()) == {"reports": []}


def test_diagnose_dump_with_predictions(tmp_path):
    rng = np.random.default_rng(1)
    preds = rng.normal(size=(2, 50))
    np.savez(tmp_path / "dump.npz", confidences=rng.uniform(size=10), errors=rng.uniform(size=10), predictions=preds)
    report = diagnose(tmp_path / "dump.npz")
    assert len(report["reports"]) == 3
    ens = preds.mean(0)
    assert report["reports"][0]["ensemble_variance"] == pytest.approx(np.var(ens), abs=1e-14)


def test_diagnose_empty_unlabeled_set(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--set", "method.name=supervised", "--set", "data.n_total=12", "--set", "data.n_labeled=12",
                 "--set", "train.epochs=1", *SMALL, "--out", str(out)]) == 0
    with pytest.raises(DiagnoseError, match="empty"):
        diagnose(out)
    assert main(["diagnose", str(out)]) == 2


def test_diagnose_missing_checkpoint(tmp_path):
    (tmp_path / "run").mkdir()
    with pytest.raises(DiagnoseError, match="checkpoint"):
        diagnose(tmp_path / "run")


# plot


def _metrics_file(path, run_id, values):
    from ubpl.data import log_metrics

    for epoch, v in enumerate(values):
        log_metrics(path, run_id, epoch, [(epoch * 10, "eval", "error_rate", v), (epoch * 10, "train", "b0.l_sup", 1.0)])
    return path


def test_plot_single_run(tmp_path):
    src = _metrics_file(tmp_path / "m.csv", "r1", [50.0, 40.0, 30.0])
    assert main(["plot", str(src), "--metric", "error_rate", "--out", str(tmp_path / "e.svg")]) == 0
    svg = (tmp_path / "e.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<polyline") == 1


def test_plot_two_runs_with_legend(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = _metrics_file(tmp_path / "a" / "metrics.csv", "run", [50.0, 40.0])
    b = _metrics_file(tmp_path / "b" / "metrics.csv", "run", [45.0, 20.0])
    main(["plot", str(a), str(b), "--metric", "error_rate", "--out", str(tmp_path / "e.svg")])
    svg = (tmp_path / "e.svg").read_text()
    assert svg.count("<polyline") == 2
    assert "a:run" in svg and "b:run" in svg


def test_plot_is_byte_identical_on_rerun(tmp_path):
    src = _metrics_file(tmp_path / "m.csv", "r1", [5.0, 4.0, 4.5])
    main(["plot", str(src), "--metric", "error_rate", "--out", str(tmp_path / "1.svg")])
    main(["plot", str(src), "--metric", "error_rate", "--out", str(tmp_path / "2.svg")])
    assert (tmp_path / "1.svg").read_bytes() == (tmp_path / "2.svg").read_bytes()


def test_plot_unknown_metric(tmp_path, capsys):
    src = _metrics_file(tmp_path / "m.csv", "r1", [1.0])
    assert main(["plot", str(src), "--metric", "nope", "--out", str(tmp_path / "x.svg")]) == 2
    assert "error_rate" in capsys.readouterr().err


# ablate


def test_ablate_three_arms_and_population_std(tmp_path):
    cfg = tiny_config("classification", "fixmatch", ubpl=False)
    result = ablate(cfg, seeds=(1, 2), out_dir=tmp_path)
    assert [r["arm"] for r in result["summary"]] == list(ABLATION_ARMS)
    assert len(result["runs"]) == 3 * 2
    for arm in ABLATION_ARMS:
        vals = [r["error_rate"] for r in result["runs"] if r["arm"] == arm]
        row = next(r for r in result["summary"] if r["arm"] == arm)
        mean = sum(vals) / 2
        assert row["error_rate_mean"] == pytest.approx(mean)
        assert row["error_rate_std"] == pytest.approx(((vals[0] - mean) ** 2 / 2 + (vals[1] - mean) ** 2 / 2) ** 0.5)
    with open(tmp_path / "ablation.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3
    # every arm draws the same labeled split for a given seed
    for seed in (1, 2):
        splits = {(tmp_path / f"{arm}_seed{seed}" / "config.yaml").read_text().count("seed: %d" % seed) for arm in ABLATION_ARMS}
        assert splits == {1}


def test_ablate_cli(tmp_path, capsys):
    assert main(["ablate", "--set", "method.name=fixmatch", "--set", "data.n_total=40", "--set", "data.n_labeled=8",
                 "--set", "train.epochs=1", "--set", "train.steps_per_epoch=1", *SMALL, "--seeds", "5",
                 "--out", str(tmp_path)]) == 0
    lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
    assert [l["arm"] for l in lines] == ["baseline", "ubpl_nofdl", "ubpl"]
    assert all(l["n_seeds"] == 1 and l["error_rate_std"] == 0.0 for l in lines)
