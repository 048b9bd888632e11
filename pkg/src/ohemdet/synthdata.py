"""Synthetic detection world.

Each scene holds a few ground-truth objects, optional *distractors* (regions
that look like an object of another class but carry no ground truth), a pool
of proposal boxes, and one feature vector per proposal.

Features are built as::

    sum_obj iou(box, obj) * proto[obj.cls]
  + sum_dis iou(box, dis) * dis.strength * (proto[dis.cls] + corruption * signature[dis.cls])
  + positional_encoding(box)
  + noise_sigma * n(box)

``n(box)`` is a standard normal vector obtained by hashing ``(seed,
scene_id, box)`` through splitmix64, so any box can be featurized again
later (the iterative detector rescoring relocalized boxes relies on this).
Scene layout uses numpy's PCG64 seeded with ``(seed, scene_id)``.

All stored numbers are float32-representable so the on-disk format
round-trips bit-exactly.
"""

from __future__ import annotations

import base64
import dataclasses
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .geometry import BBox, iou_matrix

FORMAT_MAGIC = "OHEMDS"
FORMAT_VERSION = 1
RNG_NAME = "numpy-pcg64-seedsequence/splitmix64-box-noise"


class ConfigError(ValueError):
    pass


class DatasetParseError(ValueError):
    def __init__(self, message: str, line: int | None = None, record: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if record is not None:
            where.append(f"record {record}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.record = record


class DatasetVersionError(DatasetParseError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    num_scenes: int = 500
    num_test_scenes: int = 200
    num_classes: int = 5
    feature_dim: int = 32
    proposals_per_scene: int = 200
    objects_per_scene: tuple[int, int] = (1, 3)
    extent: tuple[float, float] = (100.0, 100.0)
    object_size: tuple[float, float] = (12.0, 32.0)
    proposals_per_object: int = 8
    distractor_rate: float = 0.5
    hardness_range: tuple[float, float] = (0.5, 1.0)
    corruption: float = 0.5
    jitter_scale: float = 0.3
    noise_sigma: float = 0.05
    pos_scale: float = 0.25
    seed: int = 0

    def __post_init__(self):
        # tuples may arrive as lists from JSON
        for name in ("objects_per_scene", "extent", "object_size", "hardness_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.num_scenes >= 1, "num_scenes must be >= 1")
        need(self.num_test_scenes >= 0, "num_test_scenes must be >= 0")
        need(self.num_classes >= 2, "num_classes (K) must be >= 2")
        need(self.feature_dim >= 8, "feature_dim (D) must be >= 8")
        need(self.proposals_per_scene >= 32, "proposals_per_scene must be >= 32")
        lo, hi = self.objects_per_scene
        need(1 <= lo <= hi, "objects_per_scene must satisfy 1 <= lo <= hi")
        need(len(self.extent) == 2 and all(e > 0 and math.isfinite(e) for e in self.extent), "extent must be positive")
        smin, smax = self.object_size
        need(0 < smin <= smax <= min(self.extent), "object_size must satisfy 0 < min <= max <= extent")
        need(self.proposals_per_object >= 1, "proposals_per_object must be >= 1")
        need(0.0 <= self.distractor_rate <= 1.0, "distractor_rate must be in [0, 1]")
        hlo, hhi = self.hardness_range
        need(0.0 <= hlo <= hhi <= 1.0, "hardness_range must lie in [0, 1]")
        for name in ("corruption", "jitter_scale", "noise_sigma", "pos_scale"):
            v = getattr(self, name)
            need(math.isfinite(v) and v >= 0.0, f"{name} must be finite and >= 0")
        need(self.jitter_scale > 0.0, "jitter_scale must be > 0")
        need(0 <= self.seed < 2**64, "seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class GtObject:
    class_id: int
    box: BBox
    hardness: float


@dataclass(frozen=True)
class Distractor:
    """Object-like region of another class with no ground truth."""

    class_id: int
    box: BBox
    strength: float


@dataclass(eq=False)
class Scene:
    scene_id: int
    extent: tuple[float, float]
    objects: list[GtObject]
    distractors: list[Distractor]
    proposals: np.ndarray  # (P, 4) float64 holding float32-exact values
    features: np.ndarray  # (P, D) float32

    @cached_property
    def gt_boxes(self) -> np.ndarray:
        return np.array([o.box for o in self.objects], dtype=np.float64).reshape(-1, 4)

    @cached_property
    def gt_classes(self) -> np.ndarray:
        return np.array([o.class_id for o in self.objects], dtype=np.int64)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and tuple(self.extent) == tuple(other.extent)
            and self.objects == other.objects
            and self.distractors == other.distractors
            and self.proposals.dtype == other.proposals.dtype
            and self.features.dtype == other.features.dtype
            and np.array_equal(self.proposals, other.proposals)
            and np.array_equal(self.features, other.features)
        )


@dataclass(eq=False)
class Dataset:
    config: DatasetConfig
    split: str
    scenes: list[Scene] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.scenes)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.config == other.config and self.split == other.split and self.scenes == other.scenes


# --- portable hashing -------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorized splitmix64 finalizer over uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64) + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def box_noise(seed: int, scene_id: int, boxes: np.ndarray, dim: int) -> np.ndarray:
    """Standard normal ``(n, dim)`` noise that depends only on (seed, scene_id, box)."""
    boxes32 = np.ascontiguousarray(boxes, dtype="<f4").reshape(-1, 4)
    bits = boxes32.view("<u4").astype(np.uint64)
    key = splitmix64(np.array([seed], dtype=np.uint64) ^ splitmix64(np.array([scene_id], dtype=np.uint64)))
    h = np.repeat(key, len(boxes32))
    for c in range(4):
        h = splitmix64(h ^ bits[:, c])
    pairs = (dim + 1) // 2
    ctr = np.arange(1, 2 * pairs + 1, dtype=np.uint64) * _GOLDEN
    z = splitmix64(h[:, None] ^ ctr[None, :])
    u = ((z >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    u1, u2 = u[:, 0::2], u[:, 1::2]
    r = np.sqrt(-2.0 * np.log(u1))
    normals = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=1)
    return normals[:, :dim]


# --- fixed per-dataset vectors ------------------------------------------------


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    v = rng.standard_normal((n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def class_prototypes(config: DatasetConfig) -> np.ndarray:
    """Unit-norm prototype per class; row 0 (background) is zero."""
    rng = np.random.default_rng([config.seed, 0x50524F54])
    protos = np.zeros((config.num_classes + 1, config.feature_dim))
    protos[1:] = _unit_rows(rng, config.num_classes, config.feature_dim)
    return protos


def distractor_signatures(config: DatasetConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0x53494753])
    sigs = np.zeros((config.num_classes + 1, config.feature_dim))
    sigs[1:] = _unit_rows(rng, config.num_classes, config.feature_dim)
    return sigs


def positional_encoding(config: DatasetConfig, boxes: np.ndarray) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 0x504F53])
    freqs = rng.uniform(0.5, 2.0, config.feature_dim)
    phases = rng.uniform(0.0, 2 * np.pi, config.feature_dim)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    W, H = config.extent
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    v = np.stack([(boxes[:, 0] + 0.5 * w) / W, (boxes[:, 1] + 0.5 * h) / H, w / W, h / H], axis=1)
    cols = v[:, np.arange(config.feature_dim) % 4]
    return config.pos_scale * np.sin(2 * np.pi * freqs * cols + phases)


def featurize(config: DatasetConfig, scene: Scene, boxes) -> np.ndarray:
    """Feature vectors for arbitrary boxes inside ``scene`` (float32, ``(n, D)``)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    feats = positional_encoding(config, boxes)
    if scene.objects:
        protos = class_prototypes(config)
        feats += iou_matrix(boxes, scene.gt_boxes) @ protos[scene.gt_classes]
    if scene.distractors:
        protos = class_prototypes(config)
        sigs = distractor_signatures(config)
        dboxes = np.array([d.box for d in scene.distractors], dtype=np.float64)
        dcls = np.array([d.class_id for d in scene.distractors])
        strength = np.array([d.strength for d in scene.distractors], dtype=np.float64)
        looks = protos[dcls] + config.corruption * sigs[dcls]
        feats += (iou_matrix(boxes, dboxes) * strength) @ looks
    if config.noise_sigma > 0:
        feats += config.noise_sigma * box_noise(config.seed, scene.scene_id, boxes, config.feature_dim)
    return feats.astype(np.float32)


# --- generation -----------------------------------------------------------------


def _f32(x):
    return np.float64(np.float32(x))


def _random_box(rng, config: DatasetConfig, size_range) -> BBox:
    W, H = config.extent
    w = rng.uniform(*size_range)
    h = rng.uniform(*size_range)
    x1 = rng.uniform(0.0, W - w)
    y1 = rng.uniform(0.0, H - h)
    return BBox(_f32(x1), _f32(y1), _f32(x1 + w), _f32(y1 + h))


def _jitter(rng, box: BBox, config: DatasetConfig, n: int) -> np.ndarray:
    W, H = config.extent
    s = config.jitter_scale
    w, h = box.width, box.height
    cx = box.x1 + 0.5 * w + rng.normal(0.0, s * w, n)
    cy = box.y1 + 0.5 * h + rng.normal(0.0, s * h, n)
    nw = w * np.exp(rng.normal(0.0, s, n))
    nh = h * np.exp(rng.normal(0.0, s, n))
    out = np.stack([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2], axis=1)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0.0, W)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0.0, H)
    bad = (out[:, 2] - out[:, 0] < 1.0) | (out[:, 3] - out[:, 1] < 1.0)
    out[bad] = box
    return out


def generate_scene(config: DatasetConfig, scene_id: int) -> Scene:
    """Deterministic function of ``(config, scene_id)``."""
    config.validate()
    rng = np.random.default_rng([config.seed, scene_id])
    K = config.num_classes
    lo, hi = config.objects_per_scene
    objects = []
    for _ in range(int(rng.integers(lo, hi + 1))):
        cls = int(rng.integers(1, K + 1))
        box = _random_box(rng, config, config.object_size)
        objects.append(GtObject(cls, box, float(_f32(rng.uniform(*config.hardness_range)))))

    gt = np.array([o.box for o in objects], dtype=np.float64)
    distractors = []
    for obj in objects:
        if rng.random() >= config.distractor_rate:
            continue
        cls = int(rng.integers(1, K))
        cls = cls + 1 if cls >= obj.class_id else cls
        # prefer placements away from ground truth so they land in the low-IoU bg band
        for _ in range(10):
            box = _random_box(rng, config, config.object_size)
            if iou_matrix([box], gt).max() < 0.1:
                break
        distractors.append(Distractor(cls, box, obj.hardness))

    P = config.proposals_per_scene
    groups = [_jitter(rng, o.box, config, config.proposals_per_object) for o in objects]
    groups += [_jitter(rng, d.box, config, config.proposals_per_object) for d in distractors]
    structured = np.concatenate(groups, axis=0)[:P]
    n_rand = P - len(structured)
    W, H = config.extent
    rw = rng.uniform(4.0, 0.5 * W, n_rand)
    rh = rng.uniform(4.0, 0.5 * H, n_rand)
    rx = rng.uniform(0.0, 1.0, n_rand) * (W - rw)
    ry = rng.uniform(0.0, 1.0, n_rand) * (H - rh)
    random_boxes = np.stack([rx, ry, rx + rw, ry + rh], axis=1)
    proposals = np.concatenate([structured, random_boxes], axis=0)[rng.permutation(P)]
    proposals = proposals.astype(np.float32).astype(np.float64)
    # float32 rounding can collapse a sliver box; widen it by one ulp-ish step
    flat = (proposals[:, 2] <= proposals[:, 0]) | (proposals[:, 3] <= proposals[:, 1])
    if flat.any():
        proposals[flat, 2] = np.float32(proposals[flat, 0] + 1.0)
        proposals[flat, 3] = np.float32(proposals[flat, 1] + 1.0)

    scene = Scene(scene_id, tuple(float(e) for e in config.extent), objects, distractors, proposals, np.empty(0))
    scene.features = featurize(config, scene, proposals)
    return scene


def split_scene_ids(config: DatasetConfig, split: str) -> range:
    if split == "train":
        return range(0, config.num_scenes)
    if split == "test":
        return range(config.num_scenes, config.num_scenes + config.num_test_scenes)
    raise ConfigError(f"unknown split {split!r}")


def generate_dataset(config: DatasetConfig, split: str = "train") -> Dataset:
    return Dataset(config, split, [generate_scene(config, i) for i in split_scene_ids(config, split)])


# --- file format ------------------------------------------------------------------
#
#   OHEMDS <version>
#   {"config": ..., "rng": ..., "split": ..., "num_scenes": n}
#   per scene: one JSON record header line, one base64 line of '<f4' payload
#   END <n>


def _scene_payload(scene: Scene) -> bytes:
    parts = [
        np.array([o.box for o in scene.objects], dtype="<f4").reshape(-1),
        np.array([o.hardness for o in scene.objects], dtype="<f4"),
        np.array([d.box for d in scene.distractors], dtype="<f4").reshape(-1),
        np.array([d.strength for d in scene.distractors], dtype="<f4"),
        scene.proposals.astype("<f4").reshape(-1),
        scene.features.astype("<f4").reshape(-1),
    ]
    return b"".join(p.tobytes() for p in parts)


def dumps_dataset(ds: Dataset) -> str:
    lines = [
        f"{FORMAT_MAGIC} {FORMAT_VERSION}",
        json.dumps(
            {"config": ds.config.to_dict(), "rng": RNG_NAME, "split": ds.split, "num_scenes": len(ds.scenes)},
            sort_keys=True,
        ),
    ]
    for scene in ds.scenes:
        header = {
            "scene_id": scene.scene_id,
            "extent": list(scene.extent),
            "object_classes": [o.class_id for o in scene.objects],
            "distractor_classes": [d.class_id for d in scene.distractors],
            "num_proposals": int(len(scene.proposals)),
            "feature_dim": int(scene.features.shape[1]),
        }
        lines.append(json.dumps(header, sort_keys=True))
        lines.append(base64.b64encode(_scene_payload(scene)).decode("ascii"))
    lines.append(f"END {len(ds.scenes)}")
    return "\n".join(lines) + "\n"


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(dumps_dataset(ds), encoding="ascii")
    return path


def _parse_scene(header: dict, payload: bytes, line: int, record: int) -> Scene:
    try:
        n_obj = len(header["object_classes"])
        n_dis = len(header["distractor_classes"])
        P = int(header["num_proposals"])
        D = int(header["feature_dim"])
        scene_id = int(header["scene_id"])
        extent = tuple(float(e) for e in header["extent"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"bad scene header: {exc}", line, record) from None
    sizes = [4 * n_obj, n_obj, 4 * n_dis, n_dis, 4 * P, P * D]
    if len(payload) != 4 * sum(sizes):
        raise DatasetParseError(f"payload has {len(payload)} bytes, expected {4 * sum(sizes)}", line + 1, record)
    flat = np.frombuffer(payload, dtype="<f4")
    chunks = np.split(flat, np.cumsum(sizes)[:-1])
    obj_boxes = chunks[0].reshape(n_obj, 4).astype(np.float64)
    dis_boxes = chunks[2].reshape(n_dis, 4).astype(np.float64)
    objects = [
        GtObject(int(c), BBox(*map(float, b)), float(h))
        for c, b, h in zip(header["object_classes"], obj_boxes, chunks[1].astype(np.float64))
    ]
    distractors = [
        Distractor(int(c), BBox(*map(float, b)), float(s))
        for c, b, s in zip(header["distractor_classes"], dis_boxes, chunks[3].astype(np.float64))
    ]
    proposals = chunks[4].reshape(P, 4).astype(np.float64)
    features = chunks[5].reshape(P, D).astype(np.float32)
    return Scene(scene_id, extent, objects, distractors, proposals, features)


def loads_dataset(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetParseError("empty file", 1)
    magic = lines[0].split()
    if len(magic) != 2 or magic[0] != FORMAT_MAGIC:
        raise DatasetParseError("not a dataset file (bad magic)", 1)
    if magic[1] != str(FORMAT_VERSION):
        raise DatasetVersionError(f"format version {magic[1]} unsupported (expected {FORMAT_VERSION})", 1)
    if len(lines) < 2:
        raise DatasetParseError("missing header", 2)
    try:
        header = json.loads(lines[1])
        config = DatasetConfig.from_dict(header["config"])
        split = header["split"]
        n = int(header["num_scenes"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetParseError(f"bad header: {exc}", 2) from None
    if header.get("rng") != RNG_NAME:
        raise DatasetVersionError(f"rng {header.get('rng')!r} unsupported (expected {RNG_NAME!r})", 2)

    scenes = []
    for rec in range(n):
        ln = 3 + 2 * rec
        if ln + 1 > len(lines):
            raise DatasetParseError(f"truncated: expected {n} scenes, found {rec}", ln, rec)
        try:
            scene_header = json.loads(lines[ln - 1])
            payload = base64.b64decode(lines[ln], validate=True)
        except (json.JSONDecodeError, ValueError) as exc:
            raise DatasetParseError(f"malformed record: {exc}", ln, rec) from None
        scenes.append(_parse_scene(scene_header, payload, ln, rec))
    end_ln = 3 + 2 * n
    if len(lines) < end_ln or lines[end_ln - 1] != f"END {n}":
        raise DatasetParseError("missing or bad END marker (truncated file?)", end_ln)
    if len(lines) > end_ln:
        raise DatasetParseError("trailing data after END marker", end_ln + 1)
    return Dataset(config, split, scenes)


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="ascii")
    except UnicodeDecodeError as exc:
        raise DatasetParseError(f"non-ascii content: {exc}") from None
    return loads_dataset(text)
