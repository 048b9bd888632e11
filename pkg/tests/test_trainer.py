import csv
import dataclasses
import math

import numpy as np
import pytest

from ohemdet.roihead import backward, init_params, load_snapshot
from ohemdet.sampler import SamplerConfig
from ohemdet.synthdata import DatasetConfig, generate_dataset
from ohemdet.trainer import (
    ABLATION_COLUMNS, ABLATION_VARIANTS, DEFAULT_ALL_ROIS_LR_MULTIPLIER, PreparedSplit, TrainConfig, eval_mean_loss,
    iteration_rng, run_ablation_suite, train, train_step, variant_config, write_ablation, write_records,
)

SMALL = DatasetConfig(num_scenes=24, num_test_scenes=8, proposals_per_scene=60, feature_dim=8, num_classes=3)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(SMALL, "train"), generate_dataset(SMALL, "test")


def cfg(strategy="ohem", iters=40, **kw):
    sampler = SamplerConfig(strategy=strategy, bg_lo=0.0 if strategy != "heuristic" else 0.1, batch_size=32)
    return TrainConfig(sampler=sampler, total_iters=iters, hidden_dim=16, lr_initial=0.01, lr_decay_every=15, **kw)


def test_lr_schedule():
    c = TrainConfig()
    assert c.lr_at(0) == 0.001 and c.lr_at(1499) == 0.001
    assert math.isclose(c.lr_at(1500), 1e-4) and math.isclose(c.lr_at(3000), 1e-5) and math.isclose(c.lr_at(3999), 1e-5)


def test_invalid_config():
    with pytest.raises(ValueError):
        TrainConfig(total_iters=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_initial=-1.0)


def test_counters_ohem(data):
    train_ds, _ = data
    res = train(cfg("ohem"), train_ds)
    prep = PreparedSplit(train_ds, 0.5, 0.0)
    active = [len(s.active) for s in prep.scenes]
    for r in res.records:
        idx = iteration_rng(0, r.iter).integers(0, len(active), 2)
        assert r.forward_roi_count == sum(active[i] for i in idx)
        assert 0 < r.backward_roi_count <= 32
        assert r.selected_count == r.backward_roi_count


def test_counters_heuristic(data):
    res = train(cfg("heuristic"), data[0])
    assert all(r.forward_roi_count == r.backward_roi_count == 32 for r in res.records)


def test_lr_in_records(data):
    res = train(cfg("heuristic"), data[0])
    assert [r.lr for r in res.records] == [cfg().lr_at(i) for i in range(40)]


def test_deterministic(data, tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a = train(cfg("ohem"), data[0], out_dir=tmp_path / "a")
    b = train(cfg("ohem"), data[0], out_dir=tmp_path / "b")
    write_records(tmp_path / "a.csv", a.records, timing=False)
    write_records(tmp_path / "b.csv", b.records, timing=False)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert a.snapshots[-1].read_bytes() == b.snapshots[-1].read_bytes()


def test_seed_changes_run(data):
    a = train(cfg("heuristic"), data[0])
    b = train(dataclasses.replace(cfg("heuristic"), seed=1), data[0])
    assert [r.mean_selected_loss for r in a.records] != [r.mean_selected_loss for r in b.records]


def test_resume_matches_uninterrupted(data, tmp_path):
    full = train(cfg("ohem"), data[0])
    c = dataclasses.replace(cfg("ohem"), snapshot_every=20)
    part = train(c, data[0], out_dir=tmp_path)
    mid = tmp_path / "snap_20"
    assert mid in part.snapshots
    resumed = train(cfg("ohem"), data[0], resume=mid)
    assert [r.iter for r in resumed.records] == list(range(20, 40))
    assert [r.mean_selected_loss for r in resumed.records] == [r.mean_selected_loss for r in full.records[20:]]
    for x, y in zip(resumed.params.arrays(), full.params.arrays()):
        np.testing.assert_array_equal(x, y)


def test_accumulation_equals_joint_gradient(data):
    train_ds, _ = data
    prep = PreparedSplit(train_ds, 0.5, 0.0)
    p = init_params(8, 16, 3, np.random.default_rng(0), input_mean=np.zeros(8), input_std=np.ones(8))
    p.w_cls[:] = np.random.default_rng(1).normal(0, 0.3, p.w_cls.shape)
    rng = np.random.default_rng(2)
    for _ in range(5):
        idx = [int(i) for i in rng.integers(0, len(prep.scenes), 2)]
        sel = [rng.choice(prep.scenes[i].active, 10, replace=False) for i in idx]
        g, n, mean = train_step(p, prep, idx, sel)
        feats = np.concatenate([prep.scenes[i].features[s] for i, s in zip(idx, sel)])
        labels = np.concatenate([prep.scenes[i].labels[s] for i, s in zip(idx, sel)])
        targets = np.concatenate([prep.scenes[i].targets[s] for i, s in zip(idx, sel)])
        losses, ref = backward(p, feats, labels, targets, scale=1.0 / 20)
        assert n == 20
        assert math.isclose(mean, float(losses.total.astype(np.float64).mean()), rel_tol=1e-6)
        for a, b in zip(g.arrays(), ref.arrays()):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)


def test_empty_selection_gives_none(data):
    prep = PreparedSplit(data[0], 0.5, 0.0)
    p = init_params(8, 4, 3, np.random.default_rng(0))
    g, n, mean = train_step(p, prep, [0, 1], [np.array([], int), np.array([], int)])
    assert g is None and n == 0 and math.isnan(mean)


def test_initial_cls_loss_is_log_k_plus_one(data):
    p = init_params(8, 16, 3, np.random.default_rng(0))
    assert abs(eval_mean_loss(p, data[0]).cls - math.log(4)) <= 1e-6


def test_eval_mean_loss_sampler_independent(data):
    p = train(cfg("heuristic", iters=10), data[0]).params
    a = eval_mean_loss(p, data[0])
    b = eval_mean_loss(p, PreparedSplit(data[0], 0.5, 0.1))
    c = eval_mean_loss(p, PreparedSplit(data[0], 0.5, 0.0))
    assert a == b == c
    assert math.isclose(a.total, a.cls + a.loc, rel_tol=1e-9)


def test_loss_decreases_over_snapshots(data):
    curve = []
    c = dataclasses.replace(cfg("ohem", iters=500), lr_decay_every=10_000, snapshot_every=100)
    train(c, data[0], on_snapshot=lambda it, p: curve.append(eval_mean_loss(p, data[0]).total))
    p0 = init_params(8, 16, 3, np.random.default_rng(0))
    seq = [eval_mean_loss(p0, data[0]).total] + curve
    rises = sum(b > a for a, b in zip(seq, seq[1:]))
    assert len(seq) == 6 and rises <= 1 and seq[-1] < seq[0]


def test_variant_config_lr():
    base = TrainConfig()
    all_cfg = variant_config(base, "all_rois_b2048", 3)
    assert math.isclose(all_cfg.lr_initial, base.lr_initial * DEFAULT_ALL_ROIS_LR_MULTIPLIER)
    assert all_cfg.sampler.batch_size == 2048 and all_cfg.seed == 3
    assert variant_config(base, "ohem_n2", 0).lr_initial == base.lr_initial
    assert math.isclose(variant_config(base, "all_rois_b2048", 0, all_lr_multiplier=4.0).lr_initial, 0.004)


def test_smoke_ablation(data, tmp_path):
    base = dataclasses.replace(cfg(iters=30), lr_decay_every=1000)
    rows = run_ablation_suite(base, *data, seeds=(0,), curve_every=10)
    assert [r.variant for r in rows] == list(ABLATION_VARIANTS)
    for r in rows:
        assert 0.0 <= r.final_map <= 1.0 and np.isfinite(r.final_mean_loss)
        assert [it for it, _ in r.curve] == [10, 20, 30]
    by = {r.variant: r for r in rows}
    assert by["heuristic_bglo0.1"].mean_forward_rois == by["heuristic_bglo0.1"].mean_backward_rois == 128
    assert by["ohem_n2"].mean_forward_rois > by["ohem_n2"].mean_backward_rois
    path = write_ablation(tmp_path / "ablation.csv", rows)
    with open(path) as fh:
        table = list(csv.reader(fh))
    assert tuple(table[0]) == ABLATION_COLUMNS and len(table) == 7


def test_unknown_variant(data):
    with pytest.raises(ValueError):
        run_ablation_suite(cfg(), *data, variants=["nope"])


def test_dimension_mismatch_on_resume(data, tmp_path):
    train(cfg("heuristic", iters=2), data[0], out_dir=tmp_path)
    other = generate_dataset(dataclasses.replace(SMALL, feature_dim=10), "train")
    with pytest.raises(ValueError):
        train(cfg("heuristic", iters=4), other, resume=load_snapshot(tmp_path / "snap_2"))
