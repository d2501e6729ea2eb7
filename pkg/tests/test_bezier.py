import numpy as np
import pytest

from slaug.bezier import (
    BezierControlPoints,
    build_intensity_lut,
    map_intensities,
    sample_control_points,
)
from slaug.core import RandomStream


def identity_cp():
    return BezierControlPoints((0, 0), (1 / 3, 1 / 3), (2 / 3, 2 / 3), (1, 1), inverted=False)


def test_forward_endpoints():
    cp = sample_control_points(0.0, 1.0, invert=False, rng=RandomStream(7))
    assert cp.p0 == (0.0, 0.0) and cp.p3 == (1.0, 1.0)


def test_inverse_endpoints_swap():
    for seed in (0, 1, 99):
        cp = sample_control_points(0.0, 1.0, invert=True, rng=RandomStream(seed))
        assert cp.p0 == (0.0, 1.0) and cp.p3 == (1.0, 0.0)


def test_control_points_in_range():
    for seed in range(1000):
        cp = sample_control_points(0.0, 1.0, invert=False, rng=RandomStream(seed))
        for x, y in (cp.p1, cp.p2):
            assert 0.0 <= x <= 1.0 and 0.0 <= y <= 1.0


def test_invalid_range_rejected():
    with pytest.raises(ValueError):
        sample_control_points(1.0, 1.0, False, RandomStream(0))


def test_identity_curve():
    # evenly spaced diagonal control points make the Bernstein sum collapse to B(s) = (s, s)
    lut = build_intensity_lut(identity_cp(), n=1000)
    xs = np.linspace(0, 1, 1234)
    assert np.abs(lut(xs) - xs).max() < 1e-6


def test_antidiagonal_curve():
    cp = BezierControlPoints((0, 1), (1 / 3, 2 / 3), (2 / 3, 1 / 3), (1, 0), inverted=True)
    lut = build_intensity_lut(cp, n=1000)
    xs = np.linspace(0, 1, 1234)
    assert np.abs(lut(xs) - (1 - xs)).max() < 1e-6


@pytest.mark.parametrize("invert", [False, True])
def test_monotone_after_construction(invert):
    for seed in range(1000):
        cp = sample_control_points(0.0, 1.0, invert, RandomStream(seed))
        lut = build_intensity_lut(cp, n=300)
        diffs = np.diff(lut.ys)
        if invert:
            assert (diffs <= 0).all()
        else:
            assert (diffs >= 0).all()
        assert lut.ys.min() >= 0.0 and lut.ys.max() <= 1.0


def test_endpoint_fidelity():
    for seed in range(200):
        fwd = build_intensity_lut(sample_control_points(0.2, 0.9, False, RandomStream(seed)))
        assert abs(fwd(np.array([0.2]))[0] - 0.2) < 1e-6
        assert abs(fwd(np.array([0.9]))[0] - 0.9) < 1e-6
        inv = build_intensity_lut(sample_control_points(0.2, 0.9, True, RandomStream(seed)))
        assert abs(inv(np.array([0.2]))[0] - 0.9) < 1e-6
        assert abs(inv(np.array([0.9]))[0] - 0.2) < 1e-6


def test_map_region_zero_passthrough():
    x = np.random.default_rng(0).uniform(size=(8, 8))
    lut = build_intensity_lut(sample_control_points(0, 1, False, RandomStream(3)))
    out = map_intensities(x, lut, np.zeros_like(x))
    assert np.array_equal(out, x)


def test_map_identity_lut_full_region():
    x = np.random.default_rng(1).uniform(size=(8, 8))
    lut = build_intensity_lut(identity_cp())
    out = map_intensities(x, lut, np.ones_like(x))
    assert np.abs(out - x).max() < 1e-6


def test_map_shape_mismatch():
    lut = build_intensity_lut(identity_cp())
    with pytest.raises(ValueError):
        map_intensities(np.ones((4, 4)), lut, np.ones((3, 4)))


def test_out_of_range_values_clamped():
    lut = build_intensity_lut(identity_cp())
    out = map_intensities(np.array([[-0.5, 1.5]]), lut, np.ones((1, 2)))
    assert np.allclose(out, [[0.0, 1.0]], atol=1e-6)
