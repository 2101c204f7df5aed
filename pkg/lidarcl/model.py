"""Reference per-point segmenter.

A two-layer tanh encoder (6 -> 64 -> 32) produces a feature vector per
point; an affine head maps it to one logit per class in ``class_list``.
Points are processed independently, so gradients are closed-form.
"""

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Sequence

import numpy as np

from lidarcl.errors import ConfigError, DataError, NumericalError
from lidarcl.ingest.semantickitti import LabeledCloud

if TYPE_CHECKING:
    from lidarcl.losses import LossValue

FEATURE_DIM = 32
HIDDEN_DIM = 64
INPUT_DIM = 6
HEAD_INIT_SCALE = 1e-2
CHECKPOINT_FORMAT = "lidarcl-checkpoint"
CHECKPOINT_VERSION = 1
BLOB_DTYPE = np.dtype("<f8")
PARAM_NAMES = ("enc.W1", "enc.b1", "enc.W2", "enc.b2", "head.W", "head.b")


def point_features(points: np.ndarray) -> np.ndarray:
    """(N, 4) x, y, z, intensity -> (N, 6) x, y, z, planar range, height, intensity."""
    points = np.asarray(points, dtype=np.float64)
    x, y, z, intensity = points[:, 0], points[:, 1], points[:, 2], points[:, 3]
    return np.column_stack([x, y, z, np.hypot(x, y), z, intensity])


@dataclass(frozen=True)
class Standardizer:
    """Per-feature mean and scale, fixed once from step-0 training data."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        return cls(mean, np.where(scale > 1e-8, scale, 1.0))

    @classmethod
    def fit_clouds(cls, clouds: Sequence[np.ndarray]) -> "Standardizer":
        """Fit on the concatenated features of several (N, 4) point arrays."""
        if not clouds:
            raise DataError("cannot fit feature standardization on zero scans")
        return cls.fit(np.concatenate([point_features(p) for p in clouds]))

    @classmethod
    def identity(cls) -> "Standardizer":
        return cls(np.zeros(INPUT_DIM), np.ones(INPUT_DIM))

    def apply(self, features: np.ndarray) -> np.ndarray:
        return (features - self.mean) / self.scale


@dataclass(frozen=True)
class SegmenterState:
    """Parameters, head classes and Adam state of a segmenter."""

    params: dict[str, np.ndarray]
    class_list: tuple[int, ...]
    standardizer: Standardizer
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    adam_t: int = 0
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return len(self.class_list)

    def row_of(self, cid: int) -> int:
        try:
            return self.class_list.index(cid)
        except ValueError:
            raise ConfigError(f"class {cid} not in head {self.class_list}") from None


@dataclass(frozen=True)
class Prediction:
    """Per-point logits, softmax and encoder features over ``class_list``."""

    logits: np.ndarray
    softmax: np.ndarray
    features: np.ndarray
    class_list: tuple[int, ...]
    inputs: np.ndarray | None = field(default=None, repr=False)
    hidden: np.ndarray | None = field(default=None, repr=False)

    def argmax_classes(self, allowed: Sequence[int] | None = None) -> np.ndarray:
        """Predicted class id per point, optionally restricted to ``allowed``."""
        rows = range(len(self.class_list))
        if allowed is not None:
            allowed_set = set(allowed)
            rows = [i for i, c in enumerate(self.class_list) if c in allowed_set]
            if not rows:
                raise ConfigError("no predictable class in the model head")
        rows = np.asarray(list(rows), dtype=np.int64)
        best = rows[np.argmax(self.logits[:, rows], axis=1)]
        return np.asarray(self.class_list, dtype=np.int64)[best].astype(np.uint8)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def init_state(class_list: Sequence[int], standardizer: Standardizer, seed: int = 0) -> SegmenterState:
    """Fresh model: scaled-normal encoder weights, head rows via ``expand_head``."""
    rng = np.random.default_rng(seed)
    params = {
        "enc.W1": rng.normal(0.0, 1.0 / np.sqrt(INPUT_DIM), size=(INPUT_DIM, HIDDEN_DIM)),
        "enc.b1": np.zeros(HIDDEN_DIM),
        "enc.W2": rng.normal(0.0, 1.0 / np.sqrt(HIDDEN_DIM), size=(HIDDEN_DIM, FEATURE_DIM)),
        "enc.b2": np.zeros(FEATURE_DIM),
        "head.W": np.zeros((0, FEATURE_DIM)),
        "head.b": np.zeros(0),
    }
    zeros = {name: np.zeros_like(p) for name, p in params.items()}
    state = SegmenterState(params, (), standardizer, zeros, {n: z.copy() for n, z in zeros.items()}, 0, seed)
    return expand_head(state, class_list)


def expand_head(state: SegmenterState, new_classes: Sequence[int]) -> SegmenterState:
    """Append head rows for ``new_classes``; everything else is copied unchanged."""
    new_classes = tuple(int(c) for c in new_classes)
    if not new_classes:
        return state
    overlap = sorted(set(new_classes) & set(state.class_list))
    if overlap or len(set(new_classes)) != len(new_classes):
        raise ConfigError(f"classes {overlap or list(new_classes)} already in the model head")

    rng = np.random.default_rng([state.seed, len(state.class_list)])
    rows = rng.normal(0.0, HEAD_INIT_SCALE, size=(len(new_classes), FEATURE_DIM))
    params = dict(state.params)
    params["head.W"] = np.vstack([state.params["head.W"], rows])
    params["head.b"] = np.concatenate([state.params["head.b"], np.zeros(len(new_classes))])

    m, v = dict(state.m), dict(state.v)
    for moments in (m, v):
        moments["head.W"] = np.vstack([moments["head.W"], np.zeros_like(rows)])
        moments["head.b"] = np.concatenate([moments["head.b"], np.zeros(len(new_classes))])
    return replace(state, params=params, class_list=state.class_list + new_classes, m=m, v=v)


def forward(state: SegmenterState, cloud: LabeledCloud | np.ndarray) -> Prediction:
    """Evaluate the model on a cloud or an (N, 4) point array."""
    points = cloud.points if isinstance(cloud, LabeledCloud) else cloud
    if not np.isfinite(points).all():
        raise DataError("non-finite input points")
    x = state.standardizer.apply(point_features(points))
    p = state.params
    hidden = np.tanh(x @ p["enc.W1"] + p["enc.b1"])
    features = np.tanh(hidden @ p["enc.W2"] + p["enc.b2"])
    logits = features @ p["head.W"].T + p["head.b"]
    return Prediction(logits, softmax(logits), features, state.class_list, x, hidden)


LossFn = Callable[[Prediction], tuple["LossValue", np.ndarray, np.ndarray | None]]


def gradients(state: SegmenterState, loss_fn: LossFn, points: np.ndarray) -> tuple["LossValue", dict[str, np.ndarray]]:
    """Loss value and exact gradient for every parameter.

    ``loss_fn`` returns the loss with its gradients wrt logits and
    (optionally) encoder features.
    """
    pred = forward(state, points)
    value, d_logits, d_features = loss_fn(pred)
    if not np.isfinite(value.total):
        raise NumericalError(f"non-finite loss {value.total}")

    p = state.params
    grads = {
        "head.W": d_logits.T @ pred.features,
        "head.b": d_logits.sum(axis=0),
    }
    df = d_logits @ p["head.W"]
    if d_features is not None:
        df = df + d_features
    da2 = df * (1.0 - pred.features**2)
    grads["enc.W2"] = pred.hidden.T @ da2
    grads["enc.b2"] = da2.sum(axis=0)
    da1 = (da2 @ p["enc.W2"].T) * (1.0 - pred.hidden**2)
    grads["enc.W1"] = pred.inputs.T @ da1
    grads["enc.b1"] = da1.sum(axis=0)
    return value, grads


def adam_update(
    state: SegmenterState,
    grads: dict[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> SegmenterState:
    """One Adam step; the step counter carries across learning steps."""
    b1, b2 = betas
    t = state.adam_t + 1
    params, m, v = {}, {}, {}
    for name in PARAM_NAMES:
        g = grads[name]
        m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m[name] / (1.0 - b1**t)
        v_hat = v[name] / (1.0 - b2**t)
        params[name] = state.params[name] - lr * m_hat / (np.sqrt(v_hat) + eps)
        if not np.isfinite(params[name]).all():
            raise NumericalError(f"non-finite parameter {name} after update")
    return replace(state, params=params, m=m, v=v, adam_t=t)


# -- checkpoints ---------------------------------------------------------------
#
# Layout: one JSON header line, then every array as raw little-endian float64
# in header order.

def _blobs(state: SegmenterState) -> list[tuple[str, np.ndarray]]:
    arrays = [("std.mean", state.standardizer.mean), ("std.scale", state.standardizer.scale)]
    arrays += [(name, state.params[name]) for name in PARAM_NAMES]
    arrays += [(f"m.{name}", state.m[name]) for name in PARAM_NAMES]
    arrays += [(f"v.{name}", state.v[name]) for name in PARAM_NAMES]
    return arrays


def save_checkpoint(state: SegmenterState, path: Path) -> None:
    path = Path(path)
    blobs = _blobs(state)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "class_list": list(state.class_list),
        "seed": state.seed,
        "adam_t": state.adam_t,
        "arrays": [{"name": name, "shape": list(a.shape)} for name, a in blobs],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        for _, array in blobs:
            f.write(np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes())


def load_checkpoint(path: Path) -> SegmenterState:
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    data = path.read_bytes()
    newline = data.find(b"\n")
    try:
        header = json.loads(data[:newline].decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise DataError(f"{path}: not a lidarcl checkpoint") from e
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a lidarcl checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")

    arrays: dict[str, np.ndarray] = {}
    offset = newline + 1
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * BLOB_DTYPE.itemsize
        if offset + nbytes > len(data):
            raise DataError(f"{path}: truncated checkpoint at array {entry['name']}")
        blob = np.frombuffer(data, BLOB_DTYPE, count=nbytes // BLOB_DTYPE.itemsize, offset=offset)
        arrays[entry["name"]] = blob.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(data):
        raise DataError(f"{path}: {len(data) - offset} trailing bytes")

    return SegmenterState(
        params={name: arrays[name] for name in PARAM_NAMES},
        class_list=tuple(header["class_list"]),
        standardizer=Standardizer(arrays["std.mean"], arrays["std.scale"]),
        m={name: arrays[f"m.{name}"] for name in PARAM_NAMES},
        v={name: arrays[f"v.{name}"] for name in PARAM_NAMES},
        adam_t=header["adam_t"],
        seed=header["seed"],
    )
