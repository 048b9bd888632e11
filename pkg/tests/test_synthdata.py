import numpy as np
import pytest

from ohemdet.geometry import iou_matrix
from ohemdet.sampler import label_rois
from ohemdet.synthdata import (
    ConfigError, DatasetConfig, DatasetParseError, DatasetVersionError, class_prototypes, dumps_dataset, featurize,
    generate_dataset, generate_scene, loads_dataset, positional_encoding, read_dataset, split_scene_ids, write_dataset,
)

DEFAULT = DatasetConfig()


@pytest.fixture(scope="module")
def scenes():
    return [generate_scene(DEFAULT, i) for i in range(200)]


def test_scene_determinism():
    a, b = generate_scene(DEFAULT, 17), generate_scene(DEFAULT, 17)
    assert a == b
    assert a.features.tobytes() == b.features.tobytes()
    assert generate_scene(DEFAULT, 18) != a
    assert generate_scene(DatasetConfig(seed=1), 17) != a


def test_scene_invariants(scenes):
    W, H = DEFAULT.extent
    for s in scenes:
        assert len(s.objects) >= 1 and len(s.proposals) == DEFAULT.proposals_per_scene
        assert s.features.shape == (DEFAULT.proposals_per_scene, DEFAULT.feature_dim)
        assert np.all(np.isfinite(s.features))
        p = s.proposals
        assert np.all(p[:, 0] >= 0) and np.all(p[:, 2] <= W) and np.all(p[:, 1] >= 0) and np.all(p[:, 3] <= H)
        assert np.all(p[:, 2] > p[:, 0]) and np.all(p[:, 3] > p[:, 1])
        for o in s.objects:
            assert 1 <= o.class_id <= DEFAULT.num_classes and 0 <= o.hardness <= 1
        for d in s.distractors:
            assert d.class_id not in () and 1 <= d.class_id <= DEFAULT.num_classes


def test_distractor_class_differs_from_its_object():
    cfg = DatasetConfig(distractor_rate=1.0, objects_per_scene=(1, 1))
    for i in range(50):
        s = generate_scene(cfg, i)
        assert len(s.distractors) == 1
        assert s.distractors[0].class_id != s.objects[0].class_id
        assert s.distractors[0].strength == s.objects[0].hardness


def test_single_object_range():
    s = generate_scene(DatasetConfig(objects_per_scene=(1, 1)), 3)
    assert len(s.objects) == 1


def test_fg_fraction_band(scenes):
    fg = total = 0
    for s in scenes:
        lab = label_rois(s.proposals, s.gt_boxes, s.gt_classes, 0.5, 0.0)
        fg += int((lab.labels >= 1).sum())
        total += len(lab)
    assert 0.01 <= fg / total <= 0.05


def test_feature_construction_examples():
    cfg = DatasetConfig(noise_sigma=0.0, distractor_rate=0.0)
    s = generate_scene(cfg, 5)
    far = np.array([[0.0, 0.0, 1.0, 1.0]])
    if iou_matrix(far, s.gt_boxes).max() == 0:
        assert np.allclose(featurize(cfg, s, far), positional_encoding(cfg, far), atol=1e-6)
    obj = s.objects[0]
    box = np.array([obj.box])
    resid = featurize(cfg, s, box)[0] - positional_encoding(cfg, box)[0]
    others = iou_matrix(box, s.gt_boxes)[0]
    expect = others @ class_prototypes(cfg)[s.gt_classes]
    assert np.allclose(resid, expect, atol=1e-6)
    if others.sum() == 1.0:
        assert np.allclose(resid, class_prototypes(cfg)[obj.class_id], atol=1e-6)


def test_featurize_reproduces_stored_features(scenes):
    for s in scenes[:20]:
        assert np.array_equal(featurize(DEFAULT, s, s.proposals), s.features)


def test_linear_probe_learnable(scenes):
    from sklearn.linear_model import LogisticRegression

    rng = np.random.default_rng(0)
    X_fg, X_bg = [], []
    for s in scenes:
        lab = label_rois(s.proposals, s.gt_boxes, s.gt_classes, 0.5, 0.0)
        X_fg.append(s.features[lab.labels >= 1])
        X_bg.append(s.features[lab.labels == 0])
    X_fg, X_bg = np.concatenate(X_fg), np.concatenate(X_bg)
    fg = X_fg[rng.choice(len(X_fg), 500, replace=False)]
    bg = X_bg[rng.choice(len(X_bg), 500, replace=False)]
    X = np.concatenate([fg, bg])
    y = np.r_[np.ones(500), np.zeros(500)]
    perm = rng.permutation(1000)
    X, y = X[perm], y[perm]
    probe = LogisticRegression(max_iter=2000).fit(X[:700], y[:700])
    assert probe.score(X[700:], y[700:]) > 0.8


def test_hard_negatives_exist(scenes):
    protos = class_prototypes(DEFAULT)[1:]

    def cos(f, p):
        return (f @ p.T) / (np.linalg.norm(f, axis=1, keepdims=True) * np.linalg.norm(p, axis=1))

    fg_corr, bg_best = [], []
    for s in scenes:
        lab = label_rois(s.proposals, s.gt_boxes, s.gt_classes, 0.5, 0.0)
        c = cos(s.features.astype(np.float64), protos)
        fg = lab.labels >= 1
        fg_corr.append(c[fg, lab.labels[fg] - 1])
        bg_best.append(c[~fg].max(axis=1))
    median_fg = np.median(np.concatenate(fg_corr))
    hard = sum(int((b > median_fg).sum()) for b in bg_best)
    assert hard >= len(scenes) / 10


def test_split_ranges_disjoint():
    tr, te = split_scene_ids(DEFAULT, "train"), split_scene_ids(DEFAULT, "test")
    assert set(tr).isdisjoint(te) and len(tr) == 500 and len(te) == 200


def test_round_trip_and_regeneration(tmp_path):
    cfg = DatasetConfig(num_scenes=10, num_test_scenes=3, seed=42)
    ds = generate_dataset(cfg, "train")
    path = write_dataset(ds, tmp_path / "toy.train")
    back = read_dataset(path)
    assert back == ds
    assert dumps_dataset(back) == path.read_text()
    assert generate_dataset(back.config, back.split) == back
    write_dataset(generate_dataset(cfg, "train"), tmp_path / "again.train")
    assert (tmp_path / "again.train").read_bytes() == path.read_bytes()


def test_parse_errors():
    ds = generate_dataset(DatasetConfig(num_scenes=3, num_test_scenes=0), "train")
    text = dumps_dataset(ds)
    lines = text.splitlines()
    with pytest.raises(DatasetParseError) as e:
        loads_dataset("\n".join(lines[:5]) + "\n")
    assert e.value.line is not None
    with pytest.raises(DatasetParseError):
        loads_dataset(text[: len(text) // 2])
    with pytest.raises(DatasetParseError) as e:
        loads_dataset("\n".join(lines[:3] + ["@@@not base64"] + lines[4:]) + "\n")
    assert e.value.record == 0
    with pytest.raises(DatasetVersionError):
        loads_dataset(text.replace("OHEMDS 1", "OHEMDS 2", 1))
    with pytest.raises(DatasetVersionError):
        loads_dataset(text.replace("numpy-pcg64", "mt19937", 1))
    with pytest.raises(DatasetParseError):
        loads_dataset("")


def test_config_validation():
    with pytest.raises(ConfigError):
        DatasetConfig(num_classes=1)
    with pytest.raises(ConfigError):
        DatasetConfig(feature_dim=4)
    with pytest.raises(ConfigError):
        DatasetConfig(distractor_rate=1.5)
    with pytest.raises(ConfigError):
        DatasetConfig.from_dict({"bogus": 1})
    assert DatasetConfig.from_dict(DEFAULT.to_dict()) == DEFAULT
