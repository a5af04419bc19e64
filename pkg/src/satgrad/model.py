"""Fully connected sigmoid/ReLU network with hand-written backpropagation.

Activations are row vectors: ``z = a_prev @ W + b`` with ``W`` of shape
``(fan_in, fan_out)``.  The readout is ``s * (a2 @ W3 + b3)`` followed by a
max-shifted softmax.  Gradients are reported exactly as floating-point
backprop produces them, including every underflowed zero.
"""

from __future__ import annotations

import dataclasses
import enum
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import (
    PrecisionMode,
    log_softmax_xent,
    matmul,
    relu,
    sigmoid,
    softmax_stable,
)

DEFAULT_DIMS = (784, 256, 128, 10)
MAGIC = b"SGRD"
FORMAT_VERSION = 1


class Activation(enum.Enum):
    SIGMOID = "sigmoid"
    RELU = "relu"

    @property
    def code(self) -> int:
        return 0 if self is Activation.SIGMOID else 1

    @classmethod
    def from_code(cls, code: int) -> "Activation":
        try:
            return [cls.SIGMOID, cls.RELU][code]
        except IndexError:
            raise ValueError(f"unknown activation code {code}") from None

    @classmethod
    def parse(cls, value: "str | Activation") -> "Activation":
        return value if isinstance(value, cls) else cls(str(value).lower())


class ModelFormatError(ValueError):
    """A model file is malformed, truncated or of an unsupported version."""


@dataclass(frozen=True)
class MlpModel:
    dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: Activation = Activation.SIGMOID
    gain: float = 1.0
    logit_scale: float = 1.0
    precision: PrecisionMode = PrecisionMode.BINARY64

    def __post_init__(self):
        if len(self.dims) < 2 or any(int(d) <= 0 for d in self.dims):
            raise ValueError(f"invalid layer dims {self.dims}")
        if len(self.weights) != len(self.dims) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("one weight matrix and one bias vector per layer required")
        if not self.gain > 0 or not math.isfinite(self.gain):
            raise ValueError(f"gain must be positive, got {self.gain}")
        if not self.logit_scale > 0 or not math.isfinite(self.logit_scale):
            raise ValueError(f"logit_scale must be positive, got {self.logit_scale}")
        dtype = self.precision.dtype
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.dims[i], self.dims[i + 1]) or b.shape != (self.dims[i + 1],):
                raise ValueError(f"layer {i} has shapes {w.shape}/{b.shape}, "
                                 f"expected {(self.dims[i], self.dims[i + 1])}")
            if w.dtype != dtype or b.dtype != dtype:
                raise TypeError(f"layer {i} parameters are not {dtype}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")
            w.flags.writeable = False
            b.flags.writeable = False

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def replace(self, **changes) -> "MlpModel":
        return dataclasses.replace(self, **changes)

    def with_params(self, weights, biases) -> "MlpModel":
        dtype = self.precision.dtype
        return self.replace(weights=tuple(np.array(w, dtype=dtype) for w in weights),
                            biases=tuple(np.array(b, dtype=dtype) for b in biases))


@dataclass
class ForwardTrace:
    """Everything the backward pass needs.  All arrays have a leading batch axis."""

    x: np.ndarray
    pre_activations: list[np.ndarray]
    activations: list[np.ndarray]
    readout: np.ndarray  # a_last @ W + b, before logit scaling
    logits: np.ndarray
    probs: np.ndarray
    labels: np.ndarray | None = None
    losses: np.ndarray | None = None

    @property
    def predictions(self) -> np.ndarray:
        return np.argmax(self.probs, axis=1)

    @property
    def loss(self) -> float | None:
        return None if self.losses is None else float(np.mean(self.losses))

    def __len__(self):
        return self.x.shape[0]


@dataclass
class GradientRecord:
    """Input gradients (one row per image) and their exact-zero statistics."""

    input_gradient: np.ndarray
    exact_zero_count: np.ndarray
    max_abs: np.ndarray
    all_zero: np.ndarray
    weight_gradients: tuple[np.ndarray, ...] | None = None
    bias_gradients: tuple[np.ndarray, ...] | None = None

    @classmethod
    def from_input_gradient(cls, grad: np.ndarray, **params) -> "GradientRecord":
        zeros = np.count_nonzero(grad == 0, axis=1)
        return cls(input_gradient=grad,
                   exact_zero_count=zeros,
                   max_abs=np.abs(grad).max(axis=1),
                   all_zero=zeros == grad.shape[1],
                   **params)


def init_model(dims=DEFAULT_DIMS, activation="sigmoid", seed: int = 0,
               precision=PrecisionMode.BINARY64, gain: float = 1.0,
               logit_scale: float = 1.0) -> MlpModel:
    """Glorot-uniform weights from ``numpy.random.default_rng(seed)``, zero biases.

    Each layer's weights are drawn in float64 (layers in order) and then cast
    to the requested precision.
    """
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValueError(f"layer dims must be positive, got {dims}")
    precision = PrecisionMode.parse(precision)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(precision.dtype))
        biases.append(np.zeros(fan_out, dtype=precision.dtype))
    return MlpModel(dims, tuple(weights), tuple(biases), Activation.parse(activation),
                    float(gain), float(logit_scale), precision)


def _as_batch(model: MlpModel, x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.dims[0]:
        raise ValueError(f"input must have {model.dims[0]} features, got shape {x.shape}")
    if not np.all(np.isfinite(x)) or x.min(initial=0) < 0 or x.max(initial=0) > 1:
        raise ValueError("input pixels must be finite and within [0, 1]")
    return np.ascontiguousarray(x, dtype=model.precision.dtype)


def _as_labels(labels, n: int, n_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise IndexError("label out of range")
    return labels


def _hidden(model: MlpModel, z: np.ndarray) -> np.ndarray:
    if model.activation is Activation.SIGMOID:
        return sigmoid(z, model.gain)
    return relu(z)


def forward(model: MlpModel, x, labels=None) -> ForwardTrace:
    """Run the network on one image (1-D) or a batch (2-D).

    Per-example losses are ``-ln p[label]`` and become ``inf`` when that
    probability underflows to zero.
    """
    a = _as_batch(model, x)
    x = a
    pre, acts = [], []
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        z = matmul(a, w) + b
        a = _hidden(model, z)
        pre.append(z)
        acts.append(a)
    readout = matmul(a, model.weights[-1]) + model.biases[-1]
    logits = readout * readout.dtype.type(model.logit_scale)
    probs = softmax_stable(logits)
    trace = ForwardTrace(x, pre, acts, readout, logits, probs)
    if labels is not None:
        labels = _as_labels(labels, x.shape[0], model.dims[-1])
        trace.labels = labels
        with np.errstate(divide="ignore"):
            trace.losses = -np.log(probs[np.arange(len(labels)), labels])
    return trace


def predict(model: MlpModel, x, chunk: int = 2048) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim == 1:
        return forward(model, x).predictions
    return np.concatenate([forward(model, x[i:i + chunk]).predictions
                           for i in range(0, x.shape[0], chunk)])


def stable_losses(trace: ForwardTrace) -> np.ndarray:
    """Finite per-example cross-entropy computed from the logits."""
    return log_softmax_xent(trace.logits, trace.labels)


def saturation_penalty_terms(model: MlpModel, trace: ForwardTrace) -> np.ndarray:
    """Per-example penalty summed over all hidden units.

    Sigmoid units contribute ``a * (1 - a)``; ReLU units contribute ``a``.
    Both vanish exactly on the saturated set.
    """
    total = np.zeros(len(trace), dtype=trace.x.dtype)
    for a in trace.activations:
        if model.activation is Activation.SIGMOID:
            total += (a * (1 - a)).sum(axis=1)
        else:
            total += a.sum(axis=1)
    return total


def backward(model: MlpModel, trace: ForwardTrace, labels=None, *,
             penalty_weight: float = 0.0, params: bool = False) -> GradientRecord:
    """Backpropagate ``loss_i = CE_i + penalty_weight * P_i`` for every example.

    The input gradient of each example is that of its own loss, never scaled
    by the batch size.  With ``params=True`` the parameter gradients of the
    batch-mean loss are attached as well.
    """
    if labels is None:
        labels = trace.labels
    if labels is None or trace.losses is None:
        raise ValueError("backward needs a trace produced with labels")
    labels = _as_labels(labels, len(trace), model.dims[-1])
    dtype = trace.x.dtype
    n = len(trace)

    delta = trace.probs.copy()
    delta[np.arange(n), labels] -= 1
    delta = delta * dtype.type(model.logit_scale)  # d loss / d readout

    w_grads = [None] * model.n_layers
    b_grads = [None] * model.n_layers
    inputs = [trace.x] + trace.activations
    sigmoid_net = model.activation is Activation.SIGMOID
    gain = dtype.type(model.gain)
    lam = dtype.type(penalty_weight)

    for layer in range(model.n_layers - 1, -1, -1):
        if params:
            w_grads[layer] = matmul(np.ascontiguousarray(inputs[layer].T), delta) / dtype.type(n)
            b_grads[layer] = delta.sum(axis=0) / dtype.type(n)
        upstream = matmul(delta, np.ascontiguousarray(model.weights[layer].T))
        if layer == 0:
            break
        a = trace.activations[layer - 1]
        if penalty_weight != 0:
            # skipped entirely at zero so the vanilla path is untouched bitwise
            upstream = upstream + (lam * (1 - 2 * a) if sigmoid_net else lam)
        if sigmoid_net:
            delta = upstream * (gain * (a * (1 - a)))
        else:
            delta = upstream * (trace.pre_activations[layer - 1] > 0)
    extra = {}
    if params:
        extra = dict(weight_gradients=tuple(w_grads), bias_gradients=tuple(b_grads))
    return GradientRecord.from_input_gradient(upstream, **extra)


def surrogate_gain(model: MlpModel, gain: float) -> MlpModel:
    """Same weights, softer sigmoid.  Only defined for sigmoid networks."""
    if model.activation is not Activation.SIGMOID:
        raise ValueError("gain surrogates apply to sigmoid networks only")
    if not gain > 0:
        raise ValueError(f"surrogate gain must be positive, got {gain}")
    if gain > model.gain:
        raise ValueError(f"surrogate gain {gain} exceeds model gain {model.gain}")
    return model.replace(gain=float(gain))


def surrogate_logit_scale(model: MlpModel, scale: float) -> MlpModel:
    if not scale > 0:
        raise ValueError(f"surrogate logit scale must be positive, got {scale}")
    if scale > model.logit_scale:
        raise ValueError(f"surrogate scale {scale} exceeds model scale {model.logit_scale}")
    return model.replace(logit_scale=float(scale))


# -- serialization -----------------------------------------------------------
#
# "SGRD" | u8 version | u8 precision (32/64) | u8 activation (0 sigmoid, 1 relu)
# | f8 gain | f8 logit_scale | u32 layer count L | u32 dims[L + 1]
# | per layer: W (row-major, fan_in x fan_out) then b, little-endian reals
# of the model precision.  All integers little-endian.

_HEADER = struct.Struct("<4sBBBddI")


def model_to_bytes(model: MlpModel) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, FORMAT_VERSION, model.precision.code, model.activation.code,
                           model.gain, model.logit_scale, model.n_layers))
    buf.write(struct.pack(f"<{len(model.dims)}I", *model.dims))
    le = model.precision.dtype.newbyteorder("<")
    for w, b in zip(model.weights, model.biases):
        buf.write(np.ascontiguousarray(w, dtype=le).tobytes())
        buf.write(np.ascontiguousarray(b, dtype=le).tobytes())
    return buf.getvalue()


def model_from_bytes(data: bytes) -> MlpModel:
    if len(data) < _HEADER.size:
        raise ModelFormatError(f"truncated header ({len(data)} bytes)")
    magic, version, prec, act, gain, scale, n_layers = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    try:
        precision = PrecisionMode.from_code(prec)
        activation = Activation.from_code(act)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None
    if not 1 <= n_layers <= 64:
        raise ModelFormatError(f"implausible layer count {n_layers}")
    off = _HEADER.size
    need = 4 * (n_layers + 1)
    if len(data) < off + need:
        raise ModelFormatError("truncated dims table")
    dims = struct.unpack_from(f"<{n_layers + 1}I", data, off)
    off += need
    if any(d == 0 for d in dims):
        raise ModelFormatError(f"zero-sized layer in dims {dims}")
    le = precision.dtype.newbyteorder("<")
    expected = sum(a * b + b for a, b in zip(dims, dims[1:])) * le.itemsize
    if len(data) - off != expected:
        raise ModelFormatError(f"parameter block is {len(data) - off} bytes, expected {expected}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        w = np.frombuffer(data, dtype=le, count=fan_in * fan_out, offset=off)
        off += w.nbytes
        b = np.frombuffer(data, dtype=le, count=fan_out, offset=off)
        off += b.nbytes
        weights.append(w.reshape(fan_in, fan_out).astype(precision.dtype))
        biases.append(b.astype(precision.dtype))
    try:
        return MlpModel(tuple(dims), tuple(weights), tuple(biases), activation, gain, scale, precision)
    except (ValueError, TypeError) as exc:
        raise ModelFormatError(f"invalid model contents: {exc}") from None


def save_model(model: MlpModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def load_model(path) -> MlpModel:
    return model_from_bytes(Path(path).read_bytes())
