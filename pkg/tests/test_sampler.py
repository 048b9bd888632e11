import itertools

import numpy as np
import pytest

from ohemdet.geometry import iou
from ohemdet.sampler import (
    RoILabels, SamplerConfig, SamplingError, all_sample, heuristic_sample, label_rois, ohem_select, ohem_select_joint,
)

A, C = (0.0, 0.0, 10.0, 10.0), (50.0, 50.0, 60.0, 60.0)


def disjoint_boxes(n):
    return np.array([[12.0 * i, 0.0, 12.0 * i + 10.0, 10.0] for i in range(n)])


def random_boxes(rng, n, extent=60.0):
    w = rng.uniform(2, 25, n)
    h = rng.uniform(2, 25, n)
    x = rng.uniform(0, extent - w)
    y = rng.uniform(0, extent - h)
    return np.stack([x, y, x + w, y + h], axis=1)


def brute_force_select(losses, boxes, quota, thresh):
    """Repeatedly take the highest-loss RoI not overlapping any chosen one beyond ``thresh``."""
    chosen = []
    alive = set(range(len(losses)))
    while alive and len(chosen) < quota:
        best = max(alive, key=lambda i: (losses[i], -i))
        chosen.append(best)
        alive = {i for i in alive if i != best and iou(boxes[i], boxes[best]) <= thresh}
    return chosen


def make_labels(n_fg, n_bg, n_excl=0):
    n = n_fg + n_bg + n_excl
    labels = np.array([1] * n_fg + [0] * (n_bg + n_excl))
    excluded = np.array([False] * (n_fg + n_bg) + [True] * n_excl)
    max_iou = np.where(labels > 0, 0.7, np.where(excluded, 0.0, 0.3))
    return RoILabels(disjoint_boxes(n), labels, max_iou, np.zeros(n, int), np.zeros((n, 4)), excluded)


# --- labeling ------------------------------------------------------------------


def test_label_examples():
    gt = np.array([[10.0, 10.0, 30.0, 30.0]])
    props = np.array([
        [10.0, 10.0, 30.0, 30.0],  # identical
        [10.0, 10.0, 30.0, 16.5],  # IoU 0.325
        [29.0, 29.0, 39.0, 39.0],  # IoU ~0.002
        [60.0, 60.0, 70.0, 70.0],  # no overlap
    ])
    lab = label_rois(props, gt, np.array([3]), 0.5, 0.1)
    assert lab.labels.tolist() == [3, 0, 0, 0]
    assert lab.max_iou[0] == 1.0
    assert lab.targets[0].tolist() == [0, 0, 0, 0]
    assert lab.excluded.tolist() == [False, False, True, True]
    assert lab[0].target == (0.0, 0.0, 0.0, 0.0) and lab[1].target is None
    assert lab[3].matched_gt is None
    lab0 = label_rois(props, gt, np.array([3]), 0.5, 0.0)
    assert lab0.excluded.tolist() == [False] * 4
    assert lab0.labels.tolist() == [3, 0, 0, 0]


def test_label_invariants_random():
    rng = np.random.default_rng(0)
    for _ in range(50):
        props = random_boxes(rng, 60)
        gts = random_boxes(rng, 3)
        bg_lo = float(rng.choice([0.0, 0.1, 0.2]))
        lab = label_rois(props, gts, np.array([1, 2, 3]), 0.5, bg_lo)
        fg = lab.labels >= 1
        assert np.array_equal(fg, lab.max_iou >= 0.5)
        assert np.all((lab.max_iou[~fg] >= bg_lo) | lab.excluded[~fg])
        assert np.array_equal(lab.excluded, lab.max_iou < bg_lo)
        assert np.all(lab.targets[~fg] == 0)


def test_label_tie_goes_to_lower_object():
    gts = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 10.0]])
    lab = label_rois(np.array([[0.0, 0.0, 10.0, 10.0]]), gts, np.array([4, 2]))
    assert lab.labels[0] == 4 and lab.matched_gt[0] == 0


# --- heuristic -------------------------------------------------------------------


def test_heuristic_examples():
    rng = np.random.default_rng(0)
    lab = make_labels(100, 1000)
    sel = heuristic_sample(lab, 64, 0.25, rng)
    assert len(sel) == 64 and (lab.labels[sel] >= 1).sum() == 16
    assert len(set(sel.tolist())) == 64
    sel = heuristic_sample(make_labels(5, 1000), 64, 0.25, rng)
    assert len(sel) == 64 and (make_labels(5, 1000).labels[sel] >= 1).sum() == 5
    lab = make_labels(0, 1000)
    sel = heuristic_sample(lab, 64, 0.25, rng)
    assert len(sel) == 64 and np.all(lab.labels[sel] == 0)


def test_heuristic_fg_count_exhaustive():
    rng = np.random.default_rng(1)
    for n_fg, n_bg, quota, frac in itertools.product(range(0, 6), range(0, 6), range(1, 9), (0.0, 0.25, 0.5, 1.0)):
        if n_fg + n_bg == 0:
            continue
        lab = make_labels(n_fg, n_bg, 2)
        sel = heuristic_sample(lab, quota, frac, rng)
        want_fg = min(int(np.floor(frac * quota + 0.5)), n_fg)
        assert (lab.labels[sel] >= 1).sum() == want_fg
        assert not lab.excluded[sel].any()
        if n_bg:
            assert len(sel) == quota
            bg = sel[lab.labels[sel] == 0]
            # without replacement until the bg pool is exhausted
            assert len(set(bg.tolist())) == min(len(bg), n_bg)


def test_heuristic_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(SamplingError):
        heuristic_sample(make_labels(0, 0, 5), 8, 0.25, rng)
    with pytest.raises(ValueError):
        heuristic_sample(make_labels(1, 1), 0, 0.25, rng)


# --- OHEM ------------------------------------------------------------------------


def test_ohem_examples():
    assert sorted(ohem_select([0.9, 0.8, 0.1], disjoint_boxes(3), 2).tolist()) == [0, 1]
    assert ohem_select([0.9, 0.8, 0.1], [A, A, C], 2).tolist() == [0, 2]
    assert ohem_select([0.3], [A], 64).tolist() == [0]
    with pytest.raises(ValueError):
        ohem_select([0.3, 0.2], [A], 1)


def test_ohem_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 51))
        boxes = random_boxes(rng, n)
        losses = np.round(rng.exponential(1.0, n), 1)  # ties on purpose
        quota = int(rng.integers(1, 40))
        thr = float(rng.choice([0.0, 0.3, 0.7, 1.0, rng.random()]))
        got = ohem_select(losses, boxes, quota, thr).tolist()
        assert got == brute_force_select(losses, boxes, quota, thr)


def test_ohem_no_dedup_is_top_k():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        boxes = np.tile([0.0, 0.0, 10.0, 10.0], (n, 1))  # all identical
        losses = rng.permutation(n).astype(float)
        q = int(rng.integers(1, n + 1))
        got = ohem_select(losses, boxes, q, 1.0)
        assert got.tolist() == np.argsort(-losses)[:q].tolist()


def test_ohem_monotonicity():
    rng = np.random.default_rng(4)
    boxes = disjoint_boxes(30)
    for _ in range(100):
        losses = rng.random(30)
        sel = ohem_select(losses, boxes, 8, 0.7)
        outside = np.setdiff1d(np.arange(30), sel)
        j = int(rng.choice(outside))
        losses[j] = losses[sel].min() + 1e-3
        assert j in ohem_select(losses, boxes, 8, 0.7)


def test_ohem_class_balance_freedom():
    boxes = disjoint_boxes(20)
    labels = np.array([1] * 10 + [0] * 10)
    all_bg = ohem_select(np.r_[np.full(10, 0.1), np.full(10, 2.0)], boxes, 8)
    all_fg = ohem_select(np.r_[np.full(10, 2.0), np.full(10, 0.1)], boxes, 8)
    assert np.all(labels[all_bg] == 0)
    assert np.all(labels[all_fg] == 1)


def test_joint_selection():
    b = disjoint_boxes(4)
    per_image = [(np.array([5.0, 4.0, 3.0, 2.0]), b), (np.array([1.0, 0.5, 0.2, 0.1]), b)]
    out = ohem_select_joint(per_image, 4)
    assert [o.tolist() for o in out] == [[0, 1, 2, 3], []]
    per_image = [(np.array([5.0, 1.0]), b[:2]), (np.array([4.0, 3.0]), b[:2])]
    out = ohem_select_joint(per_image, 3)
    assert [o.tolist() for o in out] == [[0], [0, 1]]


# --- all-RoIs ----------------------------------------------------------------------


def test_all_sample():
    lab = make_labels(20, 130, 50)
    assert all_sample(lab, 1024).tolist() == list(range(150))
    big = make_labels(100, 2900, 10)
    rng = np.random.default_rng(5)
    sel = all_sample(big, 1024, rng)
    assert len(sel) == 1024 and len(set(sel.tolist())) == 1024
    assert not big.excluded[sel].any()


def test_sampler_config_validation():
    assert SamplerConfig().per_image == 64
    with pytest.raises(ValueError):
        SamplerConfig(batch_size=127)
    with pytest.raises(ValueError):
        SamplerConfig(bg_lo=0.5)
    with pytest.raises(ValueError):
        SamplerConfig(strategy="random")
