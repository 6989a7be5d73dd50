"""Train a small FixMatch run with and without the two-branch ensemble.

Uses configs/quick.yaml, so it finishes in a few seconds. Prints the final
test error of both runs and the loss terms of the ensemble run. The run is
too short for the error gap to mean much; it shows the moving parts.

    python3 demos/pseudo_label_ensemble.py
"""

from pathlib import Path

from ubpl.config import apply_overrides, load_config
from ubpl.experiment import run_experiment

CONFIG = Path(__file__).resolve().parent.parent / "configs" / "quick.yaml"


def main():
    base = load_config(CONFIG)
    for label, flags in (("fixmatch", ["method.ubpl=false"]), ("fixmatch+ensemble", [])):
        result = run_experiment(apply_overrides(base, flags))
        print(f"{label:18s} test error {result.final['error_rate']:.1f}%")
    print("\nensemble run, branch 0 loss terms per epoch:")
    for _, epoch, _, split, name, value in result.rows:
        if split == "train" and name in ("b0.l_ssl", "b0.l_pse", "b0.l_fd", "b0.accepted"):
            print(f"  epoch {epoch} {name[3:]:9s} {value:.4f}")


if __name__ == "__main__":
    main()
