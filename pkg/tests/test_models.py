import numpy as np
import pytest

from ubpl.models import (
    ModelSpec,
    build_model,
    channel_norm,
    decode_heatmap,
    decode_heatmaps,
    render_heatmap,
)
from ubpl.tensor import Tensor


def test_classifier_output_length():
    model = build_model(ModelSpec("classification", (1, 16, 16), 10))
    out, tap = model(np.zeros((1, 16, 16)))
    assert out.shape == (1, 10)
    assert tap.feature.ndim == 4


def test_regressor_output_maps():
    model = build_model(ModelSpec("regression", (1, 16, 16), 4, widths=(16, 16, 16, 16)))
    out, tap = model(np.zeros((2, 1, 16, 16)))
    assert out.shape == (2, 4, 16, 16)
    assert tap.feature.shape == (2, 16, 8, 8)


def test_same_seed_same_parameters():
    spec = ModelSpec("classification", (1, 16, 16), 10, seed=5)
    assert np.array_equal(build_model(spec).flat_parameters(), build_model(spec).flat_parameters())
    other = ModelSpec("classification", (1, 16, 16), 10, seed=6)
    assert not np.array_equal(build_model(spec).flat_parameters(), build_model(other).flat_parameters())


def test_parameter_count_matches_flat_vector():
    model = build_model(ModelSpec("classification", (1, 16, 16), 4))
    assert model.parameter_count() == model.flat_parameters().size


def test_pooling_below_one_pixel_rejected():
    with pytest.raises(ValueError):
        build_model(ModelSpec("classification", (1, 4, 4), 10, widths=(4, 4, 4)))


def test_tap_reshape_preserves_elements():
    model = build_model(ModelSpec("classification", (1, 16, 16), 10))
    _, tap = model(np.random.default_rng(0).uniform(size=(3, 1, 16, 16)))
    n, c, h, w = tap.feature.shape
    assert tap.flat().shape == (n, c, h * w)
    assert tap.flat().size == tap.feature.size
    assert h * w > 1  # covariance over positions needs more than one cell


def test_forward_is_bit_deterministic():
    spec = ModelSpec("regression", (1, 16, 16), 4, widths=(8, 8))
    x = np.random.default_rng(1).uniform(size=(2, 1, 16, 16))
    a, _ = build_model(spec)(x)
    b, _ = build_model(spec)(x)
    assert np.array_equal(a.data, b.data)


def test_forward_with_explicit_parameters():
    model = build_model(ModelSpec("classification", (1, 16, 16), 3))
    x = np.random.default_rng(2).uniform(size=(2, 1, 16, 16))
    zeros = {k: np.zeros_like(v) for k, v in model.state_arrays().items()}
    out, _ = model(x, params=zeros)
    assert np.array_equal(out.data, np.zeros((2, 3)))


def test_channel_norm_standardises():
    x = Tensor(np.random.default_rng(3).normal(3.0, 2.0, size=(2, 3, 4, 4)))
    y = channel_norm(x).data
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(2, 3)), 1.0, atol=1e-5)


def test_decode_unique_peak():
    hm = np.zeros((1, 10, 10))
    hm[0, 7, 5] = 1.0  # row 7, column 5
    assert decode_heatmap(hm) == [((5, 7), 1.0)]


def test_decode_all_zero_channel():
    assert decode_heatmap(np.zeros((1, 4, 4))) == [((0, 0), 0.0)]


def test_decode_clamps_confidence():
    hm = np.full((2, 3, 3), -0.5)
    hm[1, 1, 1] = 1.7
    (_, c0), (_, c1) = decode_heatmap(hm)
    assert (c0, c1) == (0.0, 1.0)


def test_render_then_decode_gaussian():
    hm = render_heatmap([(8, 3)], 1.0, (16, 16))
    assert decode_heatmap(hm)[0][0] == (8, 3)


def test_render_peak_is_exactly_one_and_symmetric():
    hm = render_heatmap([(6, 9)], 1.5, (16, 16))[0]
    assert hm[9, 6] == 1.0
    np.testing.assert_array_equal(hm[9, 6 - 3 : 6], hm[9, 7 : 7 + 3][::-1])
    np.testing.assert_array_equal(hm[9 - 3 : 9, 6], hm[10 : 10 + 3, 6][::-1])


def test_render_channel_sum_matches_direct_evaluation():
    sigma, (x, y) = 1.3, (4.0, 11.0)
    hm = render_heatmap([(x, y)], sigma, (16, 12))
    ref = 0.0
    for r in range(16):
        for c in range(12):
            ref += np.exp(-((c - x) ** 2 + (r - y) ** 2) / (2 * sigma**2))
    assert abs(hm.sum() - ref) <= 1e-12


def test_render_invisible_and_bad_sigma():
    hm = render_heatmap([(2, 2), (5, 5)], 1.0, (8, 8), visible=[True, False])
    assert hm[1].sum() == 0.0 and hm[0].max() == 1.0
    with pytest.raises(ValueError):
        render_heatmap([(2, 2)], 0.0, (8, 8))


@pytest.mark.parametrize("sigma", [0.5, 1.0, 2.0])
def test_round_trip_recovers_integer_keypoints(sigma):
    rng = np.random.default_rng(4)
    kps = rng.integers(1, 15, size=(6, 2)).astype(float)
    coords, conf = decode_heatmaps(render_heatmap(kps, sigma, (16, 16))[None])
    np.testing.assert_array_equal(coords[0], kps)
    np.testing.assert_array_equal(conf[0], 1.0)
