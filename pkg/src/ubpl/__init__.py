"""Two-branch ensemble pseudo-labeling for semi-supervised learning, at desk scale.

Modules:

- ``tensor``: reverse-mode autodiff on float64 numpy arrays.
- ``models``: small convolutional classifier and heatmap regressor.
- ``augment``: weak/strong views with invertible transform records.
- ``ssl``: supervised, Mean Teacher, FixMatch and DualPose branch steps.
- ``ensemble``: ensemble pseudo-labels, feature decorrelation loss, two-branch step.
- ``diagnostics``: variance decomposition, Chebyshev bounds, calibration, metrics.
- ``data`` / ``checkpoint``: synthetic data, IDX ingestion, metrics CSV, checkpoints.
- ``experiment`` / ``cli``: runs, diagnostics reports, ablations and plots.
"""

__version__ = "0.1.0"
