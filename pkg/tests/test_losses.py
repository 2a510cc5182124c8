import math
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfscad.autograd import Tensor, grad
from dfscad.errors import ConfigError, ShapeError
from dfscad.losses import (
    LossBundle,
    LossWeights,
    dfsc_loss,
    hard_mask,
    masked_ts_loss,
    msd,
    total_loss,
)

from conftest import check_gradients
from grad_cases import loss_cases


def test_msd_examples(rng):
    a = rng.normal(size=(2, 3, 3))
    assert float(msd(a, a).data) == 0.0
    assert float(msd(np.array([[[1.0, 2.0]]]), np.zeros((1, 1, 2))).data) == 2.5
    b = rng.normal(size=(2, 3, 3))
    assert float(msd(a, b).data) == pytest.approx(float(msd(b, a).data), rel=1e-15)
    with pytest.raises(ShapeError):
        msd(a, b[:1])


@given(arrays(np.float64, (2, 3, 2), elements=st.floats(-10, 10)),
       arrays(np.float64, (2, 3, 2), elements=st.floats(-10, 10)),
       st.floats(-4, 4))
def test_msd_scales_quadratically(a, b, k):
    assert float(msd(k * a, k * b).data) == pytest.approx(k * k * float(msd(a, b).data), rel=1e-9, abs=1e-12)


def test_hard_mask_examples():
    np.testing.assert_array_equal(hard_mask(np.full((2, 2, 2), 0.3), 0.999), 1)
    np.testing.assert_array_equal(hard_mask(np.array([0.1, 0.5, 0.9, 1.3]), 0.75), [0, 0, 0, 1])
    np.testing.assert_array_equal(hard_mask(np.random.default_rng(0).random(50), 0.0), 1)


@pytest.mark.parametrize("q", [0.5, 0.9, 0.99, 0.999])
def test_hard_mask_coverage(q):
    v = np.random.default_rng(7).random(10_000)
    n = hard_mask(v, q).sum()
    assert abs(n - (1 - q) * 10_000) <= 2


def test_masked_ts_examples(rng):
    t = rng.normal(size=(2, 2, 2))
    assert float(masked_ts_loss(t, t, 0.999).data) == 0.0
    diffs = np.sqrt(np.array([0.1, 0.5, 0.9, 1.3])).reshape(1, 2, 2)
    assert float(masked_ts_loss(diffs, np.zeros_like(diffs), 0.75).data) == pytest.approx(1.3, rel=1e-12)
    s = rng.normal(size=(2, 2, 2))
    assert float(masked_ts_loss(t, s, 0.0).data) == pytest.approx(float(msd(t, s).data), rel=1e-12)


def test_dfsc_zero_margin(rng):
    t, a = rng.normal(size=(4, 3, 3)), rng.normal(size=(4, 3, 3))
    assert float(dfsc_loss(t, a, 0.9, 0.0).data) == 0.0


@pytest.mark.parametrize("m", [0.0, 0.4, 1.0, 2.0])
def test_dfsc_identical_maps_give_margin(rng, m):
    t = rng.normal(size=(8, 4, 4))
    assert float(dfsc_loss(t, t.copy(), 0.999, m).data) == m


def test_dfsc_orthogonal_units():
    t = np.array([1.0, 0.0]).reshape(2, 1, 1)
    a = np.array([0.0, 1.0]).reshape(2, 1, 1)
    loss = float(dfsc_loss(t, a, 0.0, 2.0).data)
    assert abs(loss - (2 - math.sqrt(2))) < 1e-12


def test_dfsc_only_active_locations_count():
    # one location differs in two channels, the others are identical -> not active
    t = np.zeros((2, 1, 3))
    a = np.zeros((2, 1, 3))
    t[:, 0, 0] = [1.0, 0.0]
    a[:, 0, 0] = [0.0, 1.0]
    loss, info = dfsc_loss(t, a, 0.7, 2.0, return_info=True)
    assert info["n_active"] == 1
    assert float(loss.data) == pytest.approx(2 - math.sqrt(2))
    spatial = float(dfsc_loss(t, a, 0.7, 2.0, reduction="spatial").data)
    # inactive locations have D = 0 and contribute the full margin
    assert spatial == pytest.approx((2 - math.sqrt(2) + 2 * 2) / 3)
    literal = float(dfsc_loss(t, a, 0.7, 2.0, reduction="literal").data)
    assert literal == pytest.approx(2 * spatial)


@given(arrays(np.float64, (3, 2, 2), elements=st.floats(-5, 5)),
       arrays(np.float64, (3, 2, 2), elements=st.floats(-5, 5)),
       st.floats(0, 1), st.floats(0, 2))
@settings(max_examples=60)
def test_dfsc_bounded_by_margin(t, a, q, m):
    loss, info = dfsc_loss(t, a, q, m, return_info=True)
    assert -1e-12 <= float(loss.data) <= m + 1e-12
    assert np.all(info["distance"] <= 2 + 1e-9)


def test_dfsc_single_channel_location_has_no_gradient():
    # the masked, normalized vector at such a location is +-1 whatever ``a`` is
    t = np.zeros((3, 1, 1))
    t[0] = 3.0
    a = Tensor(np.array([0.5, 0.3, 0.0]).reshape(3, 1, 1), requires_grad=True)
    loss = dfsc_loss(Tensor(t), a, 0.99, 0.4)
    (g,) = grad(loss, [a])
    assert float(loss.data) == pytest.approx(0.4)
    np.testing.assert_array_equal(g, 0)
    loss = dfsc_loss(Tensor(t), a, 0.99, 0.4, order="normalize_first")
    (g,) = grad(loss, [a])
    assert np.abs(g).sum() > 0


def test_dfsc_gradient_never_reaches_teacher(rng):
    t = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    a = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    gt, ga = grad(dfsc_loss(t, a, 0.5, 2.0), [t, a])
    np.testing.assert_array_equal(gt, 0)
    assert np.abs(ga).sum() > 0


def test_loss_weights_validation():
    assert LossWeights().alpha == 2.0
    with pytest.raises(ConfigError):
        LossWeights(margin=2.5)
    with pytest.raises(ConfigError):
        LossWeights(q_ta=1.2)
    with pytest.raises(ConfigError):
        LossWeights(alpha=-1)


def test_total_loss_examples(rng):
    t = rng.normal(size=(4, 3, 3))
    total, bundle = total_loss(t, t, t, t, LossWeights(margin=0.0))
    assert bundle.total == 0.0 and bundle.l_dfsc == 0.0
    b = LossBundle.from_terms(0.5, 0.25, 0.1, 0.3, alpha=2)
    assert b.total == pytest.approx(1.45, abs=1e-15)


def test_total_loss_bundle_sums(rng):
    maps = [rng.normal(size=(8, 4, 4)) for _ in range(4)]
    w = LossWeights(margin=1.0, q_ta=0.5)
    _, b = total_loss(*maps, w)
    assert b.total == pytest.approx(b.d_sa + b.d_ta + b.d_ts_masked + 2 * b.l_dfsc, rel=1e-12)
    assert min(b.d_sa, b.d_ta, b.d_ts_masked, b.l_dfsc) >= 0
    _, b_off = total_loss(*maps, w, dfsc=False)
    assert b_off.l_dfsc == 0.0
    assert b_off.total == pytest.approx(b.total - 2 * b.l_dfsc, rel=1e-12)


# -- finite-difference checks of the loss terms ----------------------------------

@pytest.mark.parametrize("seed", range(4))
def test_loss_gradients_match_finite_differences(seed):
    for build, arrs in loss_cases(seed):
        check_gradients(build, arrs)
