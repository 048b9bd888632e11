"""One-hidden-layer RoI head with the classification + smooth-L1 multi-task loss.

All functions operate on batches: ``features`` is ``(n, D)`` and labels,
targets, losses are per row. Computation runs in the dtype of the
parameters (float32 for training, float64 for gradient checks).

Inputs pass through a fixed per-dimension standardization
``(x - input_mean) * input_scale`` before the hidden layer. It is fit once on
training features and never updated; the default is the identity.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

LOG_CLAMP = 1e-12
ARRAY_FIELDS = ("w_hidden", "b_hidden", "w_cls", "b_cls", "w_loc", "b_loc")
INPUT_FIELDS = ("input_mean", "input_scale")
SNAPSHOT_MAGIC = b"OHEMSNAP 1\n"


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class HeadParams:
    w_hidden: np.ndarray  # (D, H)
    b_hidden: np.ndarray  # (H,)
    w_cls: np.ndarray  # (H, K+1)
    b_cls: np.ndarray  # (K+1,)
    w_loc: np.ndarray  # (H, 4K) or (H, 4) when class_agnostic
    b_loc: np.ndarray
    lam: float = 1.0
    class_agnostic: bool = False
    input_mean: np.ndarray | None = None  # (D,), fixed
    input_scale: np.ndarray | None = None  # (D,), fixed

    def __post_init__(self):
        D, dt = self.w_hidden.shape[0], self.w_hidden.dtype
        if self.input_mean is None:
            self.input_mean = np.zeros(D, dt)
        if self.input_scale is None:
            self.input_scale = np.ones(D, dt)

    @property
    def feature_dim(self) -> int:
        return self.w_hidden.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w_hidden.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w_cls.shape[1] - 1

    @property
    def dtype(self):
        return self.w_hidden.dtype

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in ARRAY_FIELDS]

    def replace(self, **arrays) -> "HeadParams":
        return dataclasses.replace(self, **arrays)

    def copy(self) -> "HeadParams":
        return self.replace(**{f: getattr(self, f).copy() for f in ARRAY_FIELDS + INPUT_FIELDS})

    def astype(self, dtype) -> "HeadParams":
        return self.replace(**{f: getattr(self, f).astype(dtype) for f in ARRAY_FIELDS + INPUT_FIELDS})

    def check(self) -> None:
        D, H, K = self.feature_dim, self.hidden_dim, self.num_classes
        n_loc = 4 if self.class_agnostic else 4 * K
        expected = {
            "w_hidden": (D, H), "b_hidden": (H,), "w_cls": (H, K + 1),
            "b_cls": (K + 1,), "w_loc": (H, n_loc), "b_loc": (n_loc,),
        }
        expected.update(input_mean=(D,), input_scale=(D,))
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{name} has non-finite entries")
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError("lam must be positive and finite")

    def equals(self, other: "HeadParams") -> bool:
        return (
            self.lam == other.lam
            and self.class_agnostic == other.class_agnostic
            and all(
                a.dtype == b.dtype and np.array_equal(a, b)
                for a, b in zip(self.arrays() + self.input_arrays(), other.arrays() + other.input_arrays())
            )
        )

    def input_arrays(self) -> list[np.ndarray]:
        return [self.input_mean, self.input_scale]


@dataclass
class HeadGradients:
    w_hidden: np.ndarray
    b_hidden: np.ndarray
    w_cls: np.ndarray
    b_cls: np.ndarray
    w_loc: np.ndarray
    b_loc: np.ndarray

    @classmethod
    def zeros_like(cls, params: HeadParams) -> "HeadGradients":
        return cls(*(np.zeros_like(a) for a in params.arrays()))

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, f) for f in ARRAY_FIELDS]

    def __add__(self, other: "HeadGradients") -> "HeadGradients":
        return HeadGradients(*(a + b for a, b in zip(self.arrays(), other.arrays())))

    def __iadd__(self, other: "HeadGradients") -> "HeadGradients":
        for a, b in zip(self.arrays(), other.arrays()):
            a += b
        return self

    def scale(self, factor: float) -> "HeadGradients":
        return HeadGradients(*(a * a.dtype.type(factor) for a in self.arrays()))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())


class RoILoss(NamedTuple):
    """Per-RoI losses; ``total = cls + lam * [label >= 1] * loc``."""

    total: np.ndarray
    cls: np.ndarray
    loc: np.ndarray
    label: np.ndarray
    clamped: np.ndarray  # True where p_u fell below LOG_CLAMP


def init_params(
    feature_dim: int,
    hidden_dim: int,
    num_classes: int,
    rng: np.random.Generator,
    lam: float = 1.0,
    class_agnostic: bool = False,
    dtype=np.float32,
    input_mean=None,
    input_std=None,
) -> HeadParams:
    """Hidden weights ~ N(0, 1/D); output layers zero so initial probabilities are uniform.

    ``input_mean``/``input_std`` set the fixed input standardization.
    """
    n_loc = 4 if class_agnostic else 4 * num_classes
    w_hidden = rng.normal(0.0, 1.0 / math.sqrt(feature_dim), (feature_dim, hidden_dim))
    return HeadParams(
        w_hidden=w_hidden.astype(dtype),
        b_hidden=np.zeros(hidden_dim, dtype),
        w_cls=np.zeros((hidden_dim, num_classes + 1), dtype),
        b_cls=np.zeros(num_classes + 1, dtype),
        w_loc=np.zeros((hidden_dim, n_loc), dtype),
        b_loc=np.zeros(n_loc, dtype),
        lam=float(lam),
        class_agnostic=class_agnostic,
        input_mean=None if input_mean is None else np.asarray(input_mean, dtype),
        input_scale=None if input_std is None else (1.0 / np.asarray(input_std, np.float64)).astype(dtype),
    )


def feature_stats(features: np.ndarray, min_std: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and std for :func:`init_params`."""
    x = np.asarray(features, dtype=np.float64)
    std = x.std(axis=0)
    return x.mean(axis=0), np.maximum(std, min_std)


def _as_batch(params: HeadParams, features) -> np.ndarray:
    x = np.asarray(features)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.feature_dim:
        raise ValueError(f"feature dimension mismatch: got {x.shape}, head expects D={params.feature_dim}")
    return x.astype(params.dtype, copy=False)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(params: HeadParams, x: np.ndarray):
    x = (x - params.input_mean) * params.input_scale
    pre = x @ params.w_hidden + params.b_hidden
    hidden = np.maximum(pre, 0)
    probs = _softmax(hidden @ params.w_cls + params.b_cls)
    deltas = hidden @ params.w_loc + params.b_loc
    return pre, hidden, probs, deltas


def forward(params: HeadParams, features) -> tuple[np.ndarray, np.ndarray]:
    """Class probabilities ``(n, K+1)`` and box deltas ``(n, 4K)``.

    A single ``(D,)`` feature gives 1-D outputs.
    """
    single = np.ndim(features) == 1
    _, _, probs, deltas = _forward(params, _as_batch(params, features))
    if single:
        return probs[0], deltas[0]
    return probs, deltas


def class_deltas(deltas: np.ndarray, classes: np.ndarray, class_agnostic: bool) -> np.ndarray:
    """Pick the 4 delta components belonging to each row's class (rows with class 0 get slot 0)."""
    deltas = np.atleast_2d(deltas)
    if class_agnostic:
        return deltas[:, :4]
    start = 4 * (np.maximum(np.asarray(classes), 1) - 1)
    cols = start[:, None] + np.arange(4)
    return np.take_along_axis(deltas, cols, axis=1)


def smooth_l1(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def _prepare_targets(labels, targets, n: int, dtype) -> np.ndarray:
    labels = np.asarray(labels)
    if targets is None:
        if np.any(labels >= 1):
            raise ValueError("foreground RoIs need regression targets")
        return np.zeros((n, 4), dtype)
    return np.asarray(targets, dtype=dtype).reshape(n, 4)


def loss(probs, deltas, labels, targets=None, lam: float = 1.0, class_agnostic: bool = False) -> RoILoss:
    """Per-RoI multi-task loss from head outputs.

    ``targets`` rows are ignored for background labels (u = 0).
    """
    probs = np.atleast_2d(probs)
    deltas = np.atleast_2d(deltas)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = len(labels)
    K = probs.shape[1] - 1
    if np.any((labels < 0) | (labels > K)):
        raise ValueError(f"labels must lie in [0, {K}]")
    targets = _prepare_targets(labels, targets, n, probs.dtype)
    p_u = probs[np.arange(n), labels]
    clamped = p_u < LOG_CLAMP
    cls = -np.log(np.maximum(p_u, LOG_CLAMP))
    fg = labels >= 1
    diff = class_deltas(deltas, labels, class_agnostic) - targets
    loc = np.where(fg, smooth_l1(diff).sum(axis=1), 0.0).astype(probs.dtype)
    total = cls + lam * loc
    return RoILoss(total, cls, loc, labels, clamped)


def roi_losses(params: HeadParams, features, labels, targets=None) -> RoILoss:
    """Forward-only (no gradient buffers) per-RoI losses; used by the readonly pass."""
    probs, deltas = forward(params, _as_batch(params, features))
    return loss(probs, deltas, labels, targets, params.lam, params.class_agnostic)


def backward(params: HeadParams, features, labels, targets=None, scale: float = 1.0) -> tuple[RoILoss, HeadGradients]:
    """Losses and ``scale * d(sum of total losses)/d(params)`` over the batch."""
    x = _as_batch(params, features)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n = len(labels)
    if n != len(x):
        raise ValueError(f"{len(x)} features but {n} labels")
    pre, hidden, probs, deltas = _forward(params, x)
    x = (x - params.input_mean) * params.input_scale
    losses = loss(probs, deltas, labels, targets, params.lam, params.class_agnostic)
    targets = _prepare_targets(labels, targets, n, params.dtype)
    dt = params.dtype.type

    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1
    d_logits[losses.clamped] = 0

    fg = labels >= 1
    diff = class_deltas(deltas, labels, params.class_agnostic) - targets
    d_sel = np.where(np.abs(diff) < 1, diff, np.sign(diff)) * dt(params.lam)
    d_sel[~fg] = 0
    d_deltas = np.zeros_like(deltas)
    if params.class_agnostic:
        d_deltas[:, :4] = d_sel
    else:
        cols = 4 * (np.maximum(labels, 1) - 1)[:, None] + np.arange(4)
        np.put_along_axis(d_deltas, cols, d_sel, axis=1)

    if scale != 1.0:
        d_logits *= dt(scale)
        d_deltas *= dt(scale)
    d_hidden = d_logits @ params.w_cls.T + d_deltas @ params.w_loc.T
    d_pre = d_hidden * (pre > 0)
    grads = HeadGradients(
        w_hidden=x.T @ d_pre,
        b_hidden=d_pre.sum(axis=0),
        w_cls=hidden.T @ d_logits,
        b_cls=d_logits.sum(axis=0),
        w_loc=hidden.T @ d_deltas,
        b_loc=d_deltas.sum(axis=0),
    )
    return losses, grads


def sgd_step(
    params: HeadParams,
    grads: HeadGradients,
    lr: float,
    velocity: HeadGradients | None = None,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> tuple[HeadParams, HeadGradients]:
    """Momentum SGD: ``v <- mu*v + g (+ wd*p)``, ``p <- p - lr*v``.

    Raises :class:`NonFiniteError` without touching anything if a gradient
    entry is not finite.
    """
    if not lr > 0:
        raise ValueError("lr must be positive")
    if not grads.is_finite():
        raise NonFiniteError("non-finite gradient; update skipped")
    if velocity is None:
        velocity = HeadGradients.zeros_like(params)
    new_arrays, new_vel = {}, []
    for name, p, g, v in zip(ARRAY_FIELDS, params.arrays(), grads.arrays(), velocity.arrays()):
        dt = p.dtype.type
        if g.shape != p.shape:
            raise ValueError(f"gradient {name} shape {g.shape} != param shape {p.shape}")
        step = g + dt(weight_decay) * p if weight_decay else g
        nv = dt(momentum) * v + step
        new_arrays[name] = p - dt(lr) * nv
        new_vel.append(nv)
    return params.replace(**new_arrays), HeadGradients(*new_vel)


# --- snapshots -----------------------------------------------------------------
# magic line, one JSON header line, then the little-endian float32 payload:
# parameter arrays in ARRAY_FIELDS order, the two input-standardization
# vectors, then momentum buffers when present.


def save_snapshot(path, params: HeadParams, iteration: int, velocity: HeadGradients | None = None, extra: dict | None = None) -> Path:
    header = {
        "feature_dim": params.feature_dim,
        "hidden_dim": params.hidden_dim,
        "num_classes": params.num_classes,
        "lam": params.lam,
        "class_agnostic": params.class_agnostic,
        "iteration": int(iteration),
        "dtype": "<f4",
        "arrays": list(ARRAY_FIELDS),
        "has_velocity": velocity is not None,
        "extra": extra or {},
    }
    blobs = [a.astype("<f4").tobytes() for a in params.arrays() + params.input_arrays()]
    if velocity is not None:
        blobs += [a.astype("<f4").tobytes() for a in velocity.arrays()]
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode("ascii") + b"\n")
        for blob in blobs:
            fh.write(blob)
    return path


class Snapshot(NamedTuple):
    params: HeadParams
    iteration: int
    velocity: HeadGradients | None
    extra: dict


def load_snapshot(path) -> Snapshot:
    data = Path(path).read_bytes()
    if not data.startswith(SNAPSHOT_MAGIC):
        raise ValueError(f"{path}: not a snapshot file")
    rest = data[len(SNAPSHOT_MAGIC):]
    nl = rest.find(b"\n")
    if nl < 0:
        raise ValueError(f"{path}: truncated snapshot header")
    try:
        header = json.loads(rest[:nl])
        D, H, K = header["feature_dim"], header["hidden_dim"], header["num_classes"]
        agnostic = bool(header["class_agnostic"])
    except (json.JSONDecodeError, KeyError) as exc:
        raise ValueError(f"{path}: bad snapshot header ({exc})") from None
    n_loc = 4 if agnostic else 4 * K
    shapes = [(D, H), (H,), (H, K + 1), (K + 1,), (H, n_loc), (n_loc,)]
    layout = shapes + [(D,), (D,)]
    if header.get("has_velocity"):
        layout += shapes
    n_bytes = len(rest) - nl - 1
    expected = sum(math.prod(s) for s in layout)
    if n_bytes != 4 * expected:
        raise ValueError(f"{path}: payload has {n_bytes} bytes, expected {4 * expected}")
    payload = np.frombuffer(rest[nl + 1:], dtype="<f4")
    arrays, off = [], 0
    for shape in layout:
        size = math.prod(shape)
        arrays.append(payload[off:off + size].reshape(shape).astype(np.float32))
        off += size
    params = HeadParams(
        *arrays[:6], lam=float(header["lam"]), class_agnostic=agnostic, input_mean=arrays[6], input_scale=arrays[7]
    )
    velocity = HeadGradients(*arrays[8:]) if header.get("has_velocity") else None
    return Snapshot(params, int(header["iteration"]), velocity, header.get("extra", {}))
