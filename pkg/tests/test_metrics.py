import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfscad.datasets import DefectAnnotation, MiniLocoSpec, gen_mini_loco
from dfscad.metrics import (
    REPORT_KEYS,
    LabeledScore,
    area_to_limit,
    aupro,
    evaluate_maps,
    oracle_maps,
    pixel_roc_auc,
    pro_curve,
    roc_auc,
    roc_auc_labeled,
    spro,
)

from metric_oracles import integrate, mann_whitney_pairs, sweep_points


def test_roc_auc_examples():
    assert roc_auc([0.8, 0.9, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5
    assert roc_auc([0.9, 0.4, 0.5, 0.1], [1, 1, 0, 0]) == 0.75
    items = [LabeledScore(0.9, True), LabeledScore(0.4, True), LabeledScore(0.5, False), LabeledScore(0.1, False)]
    assert roc_auc_labeled(items) == 0.75
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [0, 0])


@pytest.mark.parametrize("seed", range(20))
def test_roc_auc_equals_pair_count(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 201))
    scores = np.round(rng.normal(size=n), int(rng.integers(0, 3)))  # rounding forces ties
    labels = rng.random(n) < 0.4
    labels[0], labels[1] = True, False
    assert roc_auc(scores, labels) == mann_whitney_pairs(scores, labels)


@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=40, unique=True), st.integers(0, 2**32 - 1))
@settings(max_examples=50)
def test_roc_auc_invariances(scores, seed):
    rng = np.random.default_rng(seed)
    labels = rng.random(len(scores)) < 0.5
    labels[0], labels[1] = True, False
    s = np.asarray(scores) / 10.0
    auc = roc_auc(s, labels)
    assert roc_auc(np.exp(s / 50) * 3 + 1, labels) == pytest.approx(auc, abs=1e-12)
    assert roc_auc(s, ~labels) == pytest.approx(1 - auc, abs=1e-12)


def test_pixel_roc_auc_examples(rng):
    gt = rng.random((6, 6)) < 0.3
    assert pixel_roc_auc([gt.astype(float)], [gt]) == 1.0
    assert pixel_roc_auc([np.full((6, 6), 0.2)], [gt]) == 0.5
    checker = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
    mask = np.zeros((8, 8), bool)
    mask[:, :4] = True
    expected = mann_whitney_pairs(checker.ravel(), mask.ravel())
    assert pixel_roc_auc([checker], [mask]) == expected


def test_aupro_perfect_and_constant():
    m = np.zeros((6, 6))
    r = np.zeros((6, 6), bool)
    r[1:3, 1:4] = True
    m[r] = 1.0
    for limit in (0.05, 0.3, 1.0):
        assert aupro([m], [[r]], limit) == pytest.approx(1.0, abs=1e-12)
    const = np.full((6, 6), 0.3)
    assert abs(aupro([const], [[r]], 1.0) - 0.5) < 1e-9
    # the curve is PRO(f) = f, so the normalized area equals limit / 2
    assert abs(aupro([const], [[r]], 0.3) - 0.15) < 1e-9


def _toy(seed, size=4, n_maps=1, n_regions=1, levels=None):
    rng = np.random.default_rng(seed)
    maps, regions = [], []
    for _ in range(n_maps):
        m = rng.random((size, size))
        if levels:
            m = np.round(m * levels) / levels  # force ties
        regs = []
        taken = np.zeros((size, size), bool)
        for _ in range(n_regions):
            r = np.zeros((size, size), bool)
            y, x = rng.integers(0, size - 1, 2)
            h, w = rng.integers(1, max(2, size // 2), 2)
            r[y:y + h, x:x + w] = True
            r &= ~taken
            if r.any():
                regs.append(r)
                taken |= r
        maps.append(m)
        regions.append(regs)
    return maps, regions


@pytest.mark.parametrize("limit", [0.05, 0.3, 1.0])
def test_aupro_single_region_4x4_matches_sweep(limit):
    for seed in range(10):
        maps, regions = _toy(seed)
        expected = integrate(sweep_points(maps, regions), limit)
        assert abs(aupro(maps, regions, limit) - expected) < 1e-9


@pytest.mark.parametrize("seed", range(15))
def test_aupro_spro_match_sweep_up_to_16x16(seed):
    rng = np.random.default_rng(100 + seed)
    size = int(rng.integers(4, 17))
    maps, regions = _toy(seed, size=size, n_maps=int(rng.integers(1, 4)), n_regions=int(rng.integers(1, 4)),
                         levels=int(rng.choice([0, 5, 20])) or None)
    if not any(regions):
        return
    limit = float(rng.choice([0.05, 0.3, 1.0]))
    expected = integrate(sweep_points(maps, regions), limit)
    assert abs(aupro(maps, regions, limit) - expected) < 1e-9
    fracs = [float(rng.uniform(0.2, 1.0)) for _ in range(sum(len(r) for r in regions))]
    it = iter(fracs)
    anns = [[DefectAnnotation(r, max(1.0, next(it) * r.sum())) for r in regs] for regs in regions]
    sats = [a.saturation_area for regs in anns for a in regs]
    expected = integrate(sweep_points(maps, regions, sats), limit)
    assert abs(spro(maps, anns, limit) - expected) < 1e-9


def test_spro_half_saturation_4x4():
    for seed in range(10):
        maps, regions = _toy(seed)
        anns = [[DefectAnnotation(r, max(1.0, r.sum() / 2)) for r in regs] for regs in regions]
        sats = [a.saturation_area for regs in anns for a in regs]
        expected = integrate(sweep_points(maps, regions, sats), 0.3)
        assert abs(spro(maps, anns, 0.3) - expected) < 1e-9


def test_spro_equals_aupro_at_full_saturation():
    for seed in range(10):
        maps, regions = _toy(seed, size=8, n_maps=2, n_regions=2)
        anns = [[DefectAnnotation(r, float(r.sum())) for r in regs] for regs in regions]
        assert spro(maps, anns, 0.3) == aupro(maps, regions, 0.3)


def test_spro_saturates():
    # 10-pixel region, saturation 5, the top-5 region pixels outscore everything else
    m = np.zeros((4, 5))
    r = np.zeros((4, 5), bool)
    r[:2] = True
    m[0] = 1.0
    fpr, pro = pro_curve([m], [[DefectAnnotation(r, 5.0)]])
    assert fpr[1] == 0.0 and pro[1] == 1.0


@given(st.integers(0, 10_000), st.floats(0.01, 0.5), st.floats(0.5, 1.0))
@settings(max_examples=30)
def test_unnormalized_area_monotone_in_limit(seed, lo, hi):
    maps, regions = _toy(seed, size=6, n_regions=2)
    if not any(regions):
        return
    assert aupro(maps, regions, lo) * lo <= aupro(maps, regions, hi) * hi + 1e-12


def test_area_limit_validation():
    with pytest.raises(ValueError):
        area_to_limit([0, 1], [0, 1], 0.0)


def test_no_normal_pixels():
    with pytest.raises(ValueError, match="normal"):
        aupro([np.ones((2, 2))], [[np.ones((2, 2), bool)]])


@pytest.fixture(scope="module")
def pegboard(tmp_path_factory):
    spec = MiniLocoSpec.fast(n_train=1, n_validation=1, n_test_good=20, n_logical=10, n_structural=10, seed=5)
    return gen_mini_loco(spec, tmp_path_factory.mktemp("peg"))


def test_evaluate_oracle_maps_are_perfect(pegboard):
    report = evaluate_maps(oracle_maps(pegboard), pegboard)
    assert tuple(report) == REPORT_KEYS
    assert all(v == 1.0 for v in report.values()), report


def test_evaluate_noise_maps_are_chance(pegboard):
    aucs = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        maps = {s.image_id: rng.random(s.pixels.shape[:2]) for s in pegboard if s.split == "test"}
        report = evaluate_maps(maps, pegboard)
        assert abs(report["pixel_auroc"] - 0.5) < 0.02
        aucs.append(report["image_auroc"])
    assert all(abs(a - 0.5) <= 0.15 for a in aucs), aucs
