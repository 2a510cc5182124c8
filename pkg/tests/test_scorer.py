import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfscad.nets import ModelConfig, PdnConfig, TripletModel
from dfscad.scorer import (
    AnomalyMap,
    BranchStats,
    CalibrationStats,
    calibrate,
    combine,
    export_maps,
    fit_branch,
    global_map,
    image_score,
    local_map,
    normalize_map,
    read_maps,
    score_image,
)

TINY = ModelConfig(pdn=PdnConfig(out_channels=8, widths=(8, 8, 8)), image_size=32, ae_width=8, ae_latent=8, seed=2)


def _images(n, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.normal(size=(3, 32, 32)).astype(np.float32) for _ in range(n)]


def test_raw_map_examples():
    a = np.zeros((2, 1, 1))
    b = np.array([1.0, 3.0]).reshape(2, 1, 1)
    assert global_map(a, b)[0, 0] == 5.0
    assert local_map(np.full((1, 2, 2), 2.0), np.zeros((1, 2, 2)))[0, 0] == 4.0
    x = np.random.default_rng(0).normal(size=(4, 3, 5))
    assert not global_map(x, x).any() and global_map(x, x).shape == (3, 5)


def test_quantile_calibration_oracle():
    vals = np.arange(1, 1001, dtype=float)
    # linear interpolation at position q (n - 1)
    lo = vals[899] + 0.1 * (vals[900] - vals[899])
    hi = vals[994] + 0.005 * (vals[995] - vals[994])
    s = fit_branch([vals[:400], vals[400:]])
    assert s.q_low == pytest.approx(lo, abs=1e-9) and s.q_low == pytest.approx(900.1, abs=1e-9)
    assert s.q_high == pytest.approx(hi, abs=1e-9) and s.q_high == pytest.approx(995.005, abs=1e-9)
    assert fit_branch([vals[400:], vals[:400]]) == s
    assert fit_branch([np.full(10, 3.0)]).degenerate


def test_normalize_examples():
    s = BranchStats(2.0, 6.0)
    out = normalize_map(np.array([2.0, 6.0, -1e300, 1e300]), s)
    assert out[0] == 0.5
    assert out[1] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
    assert out[1] == pytest.approx(0.7311, abs=1e-4)
    assert 0.0 < out[2] < 1e-300 and out[3] < 1.0
    np.testing.assert_allclose(normalize_map(np.array([2.0, 6.0]), s, sigmoid=False), [0.0, 0.1])
    with pytest.warns(RuntimeWarning):
        assert np.all(normalize_map(np.ones(3), BranchStats(1.0, 1.0)) == 0.5)


def test_normalize_strictly_monotone_on_1e4_values():
    rng = np.random.default_rng(0)
    for stats in (BranchStats(0.1, 0.4), BranchStats(-3.0, 50.0)):
        width = stats.q_high - stats.q_low
        # raw maps are >= 0; stay below the point where the sigmoid rounds to 1 in float64
        x = np.unique(rng.uniform(max(0.0, stats.q_low - 30 * width), stats.q_low + 12 * width, 10_000))
        assert x.size == 10_000
        y = normalize_map(x, stats)
        assert np.all(np.diff(y) > 0)
        assert np.all((y > 0) & (y < 1))
        wide = np.unique(rng.normal(0, 1e4, 10_000))
        assert np.all(np.diff(normalize_map(wide, stats)) >= 0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=50),
       st.floats(-100, 100), st.floats(1e-3, 100))
@settings(max_examples=100)
def test_normalized_values_in_open_interval(xs, lo, width):
    y = normalize_map(np.array(xs), BranchStats(lo, lo + width))
    assert np.all(y > 0) and np.all(y < 1)


def test_combine_and_image_score():
    assert combine(np.array([0.2]), np.array([0.8]))[0] == 0.5
    a, b = np.random.default_rng(1).random((2, 4, 4))
    assert np.array_equal(combine(a, b), combine(b, a))
    assert np.array_equal(combine(a, a), a)
    spike = np.full((5, 5), 0.1)
    spike[2, 3] = 0.9
    assert image_score(spike) == 0.9
    assert image_score(np.random.default_rng(0).permutation(spike.ravel())) == 0.9
    assert image_score(np.full((3, 3), 0.4)) == 0.4
    with pytest.raises(ValueError):
        image_score(np.zeros(0))


def test_untrained_model_meets_contracts():
    model = TripletModel(TINY)
    imgs = _images(4)
    stats = calibrate(model, imgs[:3])
    assert stats == calibrate(model, imgs[:3][::-1])
    assert not stats.degenerate
    amap, score = score_image(model, stats, imgs[3])
    assert amap.values.shape == (32, 32) and amap.source_shape == (8, 8)
    assert np.all((amap.values > 0) & (amap.values < 1))
    assert score == amap.values.max()
    again, score2 = score_image(model, stats, imgs[3])
    assert again.values.tobytes() == amap.values.tobytes() and score2 == score
    for branch in ("global", "local"):
        m, _ = score_image(model, stats, imgs[3], branch=branch)
        assert m.branch == branch
    assert CalibrationStats.from_dict(stats.to_dict()) == stats


def test_calibrate_needs_images():
    with pytest.raises(ValueError):
        calibrate(TripletModel(TINY), [])


def test_map_export_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    maps = {f"id{i}": AnomalyMap(rng.random((6, 7)).astype(np.float32), (2, 2), "combined") for i in range(3)}
    export_maps(maps, tmp_path, extra={"id1": {"label": "good"}})
    back = read_maps(tmp_path)
    assert [e["image_id"] for e, _ in back] == sorted(maps)
    for e, v in back:
        assert np.array_equal(v, maps[e["image_id"]].values)
    assert back[1][0]["label"] == "good"
