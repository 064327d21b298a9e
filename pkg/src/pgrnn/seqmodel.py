"""LSTM and feed-forward baselines mapping daily inputs to depth profiles.

Weights follow the column-vector convention ``W @ h``; batched code uses
row vectors, so ``h @ W.T``. Every function works on plain arrays (fast
inference) or on graph tensors (training), see :mod:`pgrnn.diffcore`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError

CHECKPOINT_FORMAT = "pgrnn-checkpoint"
CHECKPOINT_VERSION = 1


def _shape(x) -> tuple[int, ...]:
    return x.shape if isinstance(x, dc.Tensor) else np.shape(x)


def _finite(x) -> bool:
    return bool(np.all(np.isfinite(x.value if isinstance(x, dc.Tensor) else x)))


@dataclass(frozen=True, eq=False)
class Normalizer:
    """Per-column z-score statistics for inputs and targets."""

    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray, Y: np.ndarray, weights: np.ndarray | None = None) -> "Normalizer":
        """Column statistics of ``X`` and of the supervised cells of ``Y``
        (cells with positive ``weights``). Degenerate columns get unit scale."""
        X = np.asarray(X, dtype=np.float64).reshape(-1, np.shape(X)[-1])
        Y = np.asarray(Y, dtype=np.float64).reshape(-1, np.shape(Y)[-1])
        w = np.ones_like(Y) if weights is None else np.asarray(weights).reshape(Y.shape)
        x_mean, x_std = X.mean(axis=0), X.std(axis=0)
        sel = w > 0
        if not sel.any():
            raise ValueError("no supervised cells to fit target statistics")
        y_all = Y[sel]
        y_mean = np.empty(Y.shape[1])
        y_std = np.empty(Y.shape[1])
        for j in range(Y.shape[1]):
            col = Y[sel[:, j], j]
            y_mean[j] = col.mean() if col.size else y_all.mean()
            y_std[j] = col.std() if col.size > 1 else y_all.std()
        x_std = np.where(x_std > 1e-12, x_std, 1.0)
        y_std = np.where(y_std > 1e-12, y_std, 1.0)
        return cls(x_mean, x_std, y_mean, y_std)

    def inputs(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def targets(self, Y):
        return (np.asarray(Y, dtype=np.float64) - self.y_mean) / self.y_std

    def restore(self, Yn):
        return Yn * self.y_std + self.y_mean


@dataclass(frozen=True, eq=False)
class LstmState:
    h: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        if _shape(self.h) != _shape(self.c):
            raise ShapeError(f"hidden shape {_shape(self.h)} and cell shape {_shape(self.c)} differ")

    @classmethod
    def zeros(cls, hidden_size: int, batch: tuple[int, ...] = ()) -> "LstmState":
        z = np.zeros(batch + (hidden_size,))
        return cls(z, z.copy())


@dataclass(frozen=True, eq=False)
class LstmParams:
    """Gate weights (candidate ``c``, forget ``f``, input ``g``, output ``o``)
    plus a linear head from hidden state to one value per output column."""

    Wc_h: np.ndarray
    Wf_h: np.ndarray
    Wg_h: np.ndarray
    Wo_h: np.ndarray
    Wc_x: np.ndarray
    Wf_x: np.ndarray
    Wg_x: np.ndarray
    Wo_x: np.ndarray
    bc: np.ndarray
    bf: np.ndarray
    bg: np.ndarray
    bo: np.ndarray
    Whead: np.ndarray
    bhead: np.ndarray
    norm: Normalizer | None = None

    kind = "lstm"

    def __post_init__(self):
        H = _shape(self.Wc_h)[0]
        D = _shape(self.Wc_x)[-1]
        n_out = _shape(self.Whead)[0]
        expected = {
            "Wc_h": (H, H), "Wf_h": (H, H), "Wg_h": (H, H), "Wo_h": (H, H),
            "Wc_x": (H, D), "Wf_x": (H, D), "Wg_x": (H, D), "Wo_x": (H, D),
            "bc": (H,), "bf": (H,), "bg": (H,), "bo": (H,),
            "Whead": (n_out, H), "bhead": (n_out,),
        }
        for name, shape in expected.items():
            got = _shape(getattr(self, name))
            if got != shape:
                raise ShapeError(f"{name} has shape {got}, expected {shape}")
            if not _finite(getattr(self, name)):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def weight_names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls) if f.name != "norm")

    @classmethod
    def init(cls, n_inputs: int, n_hidden: int, n_outputs: int, seed: int = 0,
             forget_bias: float = 1.0) -> "LstmParams":
        """Uniform(-1/sqrt(H), 1/sqrt(H)) weights; forget-gate bias ``forget_bias``."""
        rng = np.random.default_rng(seed)
        bound = 1.0 / math.sqrt(n_hidden)

        def u(*shape):
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            u(n_hidden, n_hidden), u(n_hidden, n_hidden), u(n_hidden, n_hidden), u(n_hidden, n_hidden),
            u(n_hidden, n_inputs), u(n_hidden, n_inputs), u(n_hidden, n_inputs), u(n_hidden, n_inputs),
            np.zeros(n_hidden), np.full(n_hidden, float(forget_bias)), np.zeros(n_hidden), np.zeros(n_hidden),
            u(n_outputs, n_hidden), np.zeros(n_outputs),
        )

    @property
    def hidden_size(self) -> int:
        return _shape(self.Wc_h)[0]

    @property
    def input_size(self) -> int:
        return _shape(self.Wc_x)[1]

    @property
    def output_size(self) -> int:
        return _shape(self.Whead)[0]

    def weights(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.weight_names()}

    def with_weights(self, weights: dict) -> "LstmParams":
        return replace(self, **weights)

    def bind(self, graph: dc.Graph) -> "LstmParams":
        """Copy of these parameters as trainable leaves of ``graph``."""
        return self.with_weights({k: graph.param(v, name=k) for k, v in self.weights().items()})


@dataclass(frozen=True, eq=False)
class AnnParams:
    """One tanh hidden layer, no temporal state."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    norm: Normalizer | None = None

    kind = "ann"

    def __post_init__(self):
        H, D = _shape(self.W1)
        n_out = _shape(self.W2)[0]
        expected = {"W1": (H, D), "b1": (H,), "W2": (n_out, H), "b2": (n_out,)}
        for name, shape in expected.items():
            got = _shape(getattr(self, name))
            if got != shape:
                raise ShapeError(f"{name} has shape {got}, expected {shape}")
            if not _finite(getattr(self, name)):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def weight_names(cls) -> tuple[str, ...]:
        return ("W1", "b1", "W2", "b2")

    @classmethod
    def init(cls, n_inputs: int, n_hidden: int, n_outputs: int, seed: int = 0) -> "AnnParams":
        rng = np.random.default_rng(seed)
        b_in, b_out = 1.0 / math.sqrt(n_inputs), 1.0 / math.sqrt(n_hidden)
        return cls(
            rng.uniform(-b_in, b_in, size=(n_hidden, n_inputs)), np.zeros(n_hidden),
            rng.uniform(-b_out, b_out, size=(n_outputs, n_hidden)), np.zeros(n_outputs),
        )

    @property
    def input_size(self) -> int:
        return _shape(self.W1)[1]

    @property
    def hidden_size(self) -> int:
        return _shape(self.W1)[0]

    @property
    def output_size(self) -> int:
        return _shape(self.W2)[0]

    def weights(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.weight_names()}

    def with_weights(self, weights: dict) -> "AnnParams":
        return replace(self, **weights)

    def bind(self, graph: dc.Graph) -> "AnnParams":
        return self.with_weights({k: graph.param(v, name=k) for k, v in self.weights().items()})


# ---------------------------------------------------------------------------
# LSTM


def _gate_matrices(p: LstmParams):
    # column blocks: candidate, forget, input, output
    wh = dc.concat([dc.transpose(p.Wc_h), dc.transpose(p.Wf_h), dc.transpose(p.Wg_h), dc.transpose(p.Wo_h)], axis=1)
    wx = dc.concat([dc.transpose(p.Wc_x), dc.transpose(p.Wf_x), dc.transpose(p.Wg_x), dc.transpose(p.Wo_x)], axis=1)
    b = dc.concat([p.bc, p.bf, p.bg, p.bo], axis=0)
    return wh, wx, b


def _step(xz, h, c, wh, H: int):
    z = xz + dc.matmul(h, wh)
    candidate = dc.tanh(z[..., :H])
    gates = dc.sigmoid(z[..., H:])
    forget, inp, out = gates[..., :H], gates[..., H: 2 * H], gates[..., 2 * H:]
    c_new = forget * c + inp * candidate
    h_new = out * dc.tanh(c_new)
    return h_new, c_new


def _check_inputs(x, params: LstmParams):
    if _shape(x)[-1] != params.input_size:
        raise ShapeError(f"input has {_shape(x)[-1]} features, parameters expect {params.input_size}")


def lstm_cell(x_t, state: LstmState, params: LstmParams) -> LstmState:
    """One LSTM transition.

    candidate = tanh(Wc_h h + Wc_x x + bc); f, g, o = sigmoid(...) with their
    own weights; c' = f * c + g * candidate; h' = o * tanh(c').
    """
    _check_inputs(x_t, params)
    H = params.hidden_size
    if _shape(state.h)[-1] != H:
        raise ShapeError(f"state has size {_shape(state.h)[-1]}, parameters expect {H}")
    wh, wx, b = _gate_matrices(params)
    h, c = _step(dc.matmul(x_t, wx) + b, state.h, state.c, wh, H)
    return LstmState(h, c)


def unroll(X, params: LstmParams, initial_state: LstmState | None = None, return_state: bool = False):
    """Run the cell over ``X`` of shape ``(..., T, D)``.

    Returns hidden states stacked to ``(..., T, H)`` (and the final state
    when ``return_state``).
    """
    _check_inputs(X, params)
    T = _shape(X)[-2]
    if T < 1:
        raise ValueError("need at least one time step")
    H = params.hidden_size
    batch = tuple(_shape(X)[:-2])
    state = initial_state or LstmState.zeros(H, batch)
    wh, wx, b = _gate_matrices(params)
    xz = dc.matmul(X, wx) + b
    h, c = state.h, state.c
    hs = []
    for t in range(T):
        h, c = _step(xz[..., t, :], h, c, wh, H)
        hs.append(h)
    seq = dc.stack(hs, axis=-2)
    if return_state:
        return seq, LstmState(h, c)
    return seq


def head(h, params: LstmParams):
    """Normalised outputs ``Whead h + bhead``."""
    return dc.matmul(h, dc.transpose(params.Whead)) + params.bhead


def predict_profile(h_t, params: LstmParams):
    """Head output restored to physical units using the stored statistics."""
    if params.norm is None:
        raise ValueError("parameters carry no normalisation statistics")
    if _shape(h_t)[-1] != params.hidden_size:
        raise ShapeError(f"hidden vector has size {_shape(h_t)[-1]}, expected {params.hidden_size}")
    return params.norm.restore(head(h_t, params))


# ---------------------------------------------------------------------------
# feed-forward baseline


def ann_forward(x, params: AnnParams):
    """Normalised outputs of the one-hidden-layer network for each row of ``x``."""
    if _shape(x)[-1] != params.input_size:
        raise ShapeError(f"input has {_shape(x)[-1]} features, parameters expect {params.input_size}")
    hidden = dc.tanh(dc.matmul(x, dc.transpose(params.W1)) + params.b1)
    return dc.matmul(hidden, dc.transpose(params.W2)) + params.b2


def ann_predict(x, params: AnnParams):
    if params.norm is None:
        raise ValueError("parameters carry no normalisation statistics")
    return params.norm.restore(ann_forward(x, params))


# ---------------------------------------------------------------------------
# checkpoints
#
# JSON document:
#   {"format": "pgrnn-checkpoint", "version": 1, "kind": "lstm" | "ann",
#    "meta": {...}, "tensors": {name: {"shape": [...], "data": [...]}}}
# Floats are written with their shortest round-trip repr, so a reload is
# bit-exact. Normalisation statistics are stored as "norm.x_mean" etc.

_NORM_KEYS = ("x_mean", "x_std", "y_mean", "y_std")


def save_checkpoint(path, params, meta: dict | None = None) -> None:
    tensors = {}
    for name, value in params.weights().items():
        arr = np.asarray(value, dtype=np.float64)
        tensors[name] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    if params.norm is not None:
        for key in _NORM_KEYS:
            arr = np.asarray(getattr(params.norm, key), dtype=np.float64)
            tensors[f"norm.{key}"] = {"shape": list(arr.shape), "data": arr.ravel().tolist()}
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": params.kind,
        "meta": meta or {},
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, allow_nan=False) + "\n")


def load_checkpoint(path):
    """Returns ``(params, meta)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    cls = {"lstm": LstmParams, "ann": AnnParams}.get(doc.get("kind"))
    if cls is None:
        raise ValueError(f"unknown model kind {doc.get('kind')!r}")

    def tensor(entry):
        return np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])

    tensors = doc["tensors"]
    weights = {name: tensor(tensors[name]) for name in cls.weight_names()}
    norm = None
    if "norm.x_mean" in tensors:
        norm = Normalizer(**{k: tensor(tensors[f"norm.{k}"]) for k in _NORM_KEYS})
    return cls(**weights, norm=norm), doc.get("meta", {})
