import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import PchipInterpolator

from selfseg import postproc as pp
from selfseg.nn import ShapeError

from morph_oracles import (dilate_ref, erode_ref, fill_holes_ref, random_binary_images,
                           remove_small_ref)

IMAGES = random_binary_images(60, seed=1)


@pytest.mark.parametrize("i", range(0, 60, 3))
def test_morphology_matches_brute_force(i):
    b = IMAGES[i]
    for area in (0, 4, 64, 512):
        np.testing.assert_array_equal(pp.fill_holes(b, area), fill_holes_ref(b, area))
    for area in (1, 10, 128):
        np.testing.assert_array_equal(pp.remove_small(b, area), remove_small_ref(b, area))
    for r in (1, 2, 3):
        np.testing.assert_array_equal(pp.erode(b, r), erode_ref(b, r))
        np.testing.assert_array_equal(pp.dilate(b, r), dilate_ref(b, r))


def test_wired_defaults():
    assert pp.HOLE_AREA == 512 and pp.MIN_OBJECT_AREA == 128 and pp.GT_MIN_OBJECT_AREA == 256
    import inspect
    assert inspect.signature(pp.fill_holes).parameters["max_area"].default == 512
    assert inspect.signature(pp.remove_small).parameters["min_area"].default == 128


def test_fill_holes_examples():
    b = np.ones((7, 7), dtype=bool)
    b[3, 3] = False                      # interior hole
    b[0, 3] = False                      # notch touching the border
    out = pp.fill_holes(b, 1)
    assert out[3, 3] and not out[0, 3]
    assert not pp.fill_holes(b, 0)[3, 3]
    # diagonal gap does not connect a hole to the outside under 4-connectivity
    ring = np.zeros((5, 5), dtype=bool)
    ring[1:4, 1:4] = True
    ring[2, 2] = False
    ring[1, 1] = False
    assert pp.fill_holes(ring, 10)[2, 2]


def test_remove_small_uses_8_connectivity():
    b = np.zeros((4, 4), dtype=bool)
    b[0, 0] = b[1, 1] = b[2, 2] = True
    np.testing.assert_array_equal(pp.remove_small(b, 3), b)
    assert not pp.remove_small(b, 4).any()


def test_cleanup_and_baseline_compose_steps():
    b = IMAGES[1]
    ref = pp.dilate(pp.remove_small(pp.erode(pp.fill_holes(b, 512), 2), 128), 2)
    np.testing.assert_array_equal(pp.cleanup_aggregates(b), ref)
    img = np.random.default_rng(0).random((32, 32))
    ref = pp.fill_holes(pp.remove_small(img >= 0.4, 20), 256)
    np.testing.assert_array_equal(pp.direct_threshold_baseline(img, 0.4, 20), ref)


def test_compose_threephase_precedence():
    agg = np.array([[True, True, False]])
    pore = np.array([[False, True, True]])
    np.testing.assert_array_equal(pp.compose_threephase(agg, pore), [[0, 2, 2]])
    np.testing.assert_array_equal(pp.compose_threephase(~agg, ~pore), [[2, 1, 0]])
    with pytest.raises(ShapeError):
        pp.compose_threephase(agg, pore.T)


def test_threshold_channel_inclusive():
    np.testing.assert_array_equal(pp.threshold_channel(np.array([0.1, 0.5, 0.9]), 0.5),
                                  [False, True, True])


knots = st.lists(st.floats(-5, 5), min_size=3, max_size=8)


@settings(max_examples=200)
@given(knots, st.integers(0, 10 ** 6))
def test_pchip_matches_scipy(ys, seed):
    rng = np.random.default_rng(seed)
    xs = np.cumsum(rng.uniform(0.5, 3.0, len(ys)))
    curve = pp.ThresholdCurve(xs, ys)
    q = rng.uniform(xs[0], xs[-1], 50)
    with np.errstate(over="ignore"):
        oracle = PchipInterpolator(xs, ys)
    np.testing.assert_allclose(pp.interp_thresholds(curve, q), oracle(q), atol=1e-9)
    np.testing.assert_allclose(pp.pchip_slopes(xs, ys), oracle.derivative()(xs), atol=1e-9)


@settings(max_examples=100)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=8), st.integers(0, 10 ** 6))
def test_pchip_preserves_monotonicity_and_knots(steps, seed):
    ys = np.cumsum(steps)
    xs = np.arange(len(ys), dtype=float) * 2
    curve = pp.ThresholdCurve(xs, ys)
    q = np.linspace(xs[0], xs[-1], 400)
    vals = curve(q)
    assert np.all(np.diff(vals) >= -1e-12)
    for x, y in zip(xs, ys):
        assert curve(x) == y
    assert curve(-10.0) == ys[0] and curve(100.0) == ys[-1]


def test_threshold_curve_edge_cases(tmp_path):
    assert pp.ThresholdCurve([3], [0.7])(10) == 0.7
    two = pp.ThresholdCurve([0, 4], [1.0, 3.0])
    assert two(1) == pytest.approx(1.5)
    with pytest.raises(ValueError):
        pp.ThresholdCurve([0, 0], [1, 2])
    pp.write_threshold_csv(tmp_path / "t.csv", two)
    back = pp.read_threshold_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.index, two.index)
    np.testing.assert_array_equal(back.tau, two.tau)


def test_otsu_splits_bimodal_sample():
    rng = np.random.default_rng(0)
    v = np.concatenate([rng.normal(0, 0.1, 500), rng.normal(1, 0.1, 500)])
    assert 0.3 < pp.otsu_threshold(v) < 0.7
    with pytest.raises(ValueError):
        pp.otsu_threshold(np.ones(5))
