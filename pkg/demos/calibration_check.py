"""Train a small Mean Teacher pose run, then inspect its pseudo-label calibration.

Writes a run directory under ./demo_runs, runs the diagnose step on it and
plots test keypoint MSE against epoch to SVG.

    python3 demos/calibration_check.py
"""

from pathlib import Path

from ubpl.cli import main as cli

OUT = Path("demo_runs") / "pose_mt"


def main():
    cli(["train", "--set", "task=regression", "--set", "method.name=mean_teacher", "--set", "data.n_total=60",
         "--set", "data.n_labeled=20", "--set", "train.epochs=3", "--set", "train.steps_per_epoch=10",
         "--seed", "7", "--out", str(OUT), "--overwrite"])
    cli(["diagnose", str(OUT)])
    print((OUT / "diagnostics" / "calibration.csv").read_text())
    cli(["plot", str(OUT / "metrics.csv"), "--metric", "keypoint_mse", "--out", str(OUT / "mse.svg")])
    print("wrote", OUT / "mse.svg")


if __name__ == "__main__":
    main()
