"""Fusion back-end network: a leaky-ReLU MLP with a single sigmoid output.

Forward and backward passes, initialization, the Adam update and the binary
checkpoint format are all implemented on numpy arrays.

Checkpoint layout (all integers unsigned 32-bit, all reals float64, little-endian):

    8 bytes   magic ``ADCF-MLP``
    uint32    format version (currently 1)
    uint32    number of layer dimensions L
    uint32*L  layer dimensions (input, hidden..., 1)
    float64   leaky ReLU negative slope
    float64   calibrated threshold
    then for each layer l = 0..L-2:
        float64 * dims[l+1]*dims[l]   weight matrix, row-major (out x in)
        float64 * dims[l+1]           bias vector
"""
import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from errors import CheckpointError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_INPUT_DIM = 544
DEFAULT_HIDDEN_DIMS = (256, 128, 64)
DEFAULT_LEAKY_SLOPE = 0.01

CHECKPOINT_MAGIC = b"ADCF-MLP"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sII")
_REALS = struct.Struct("<dd")

# Sigmoid outputs are kept strictly inside (0, 1).
_OUTPUT_LOW = np.finfo(float).tiny
_OUTPUT_HIGH = np.nextafter(1.0, 0.0)


def default_dims(input_dim: int = DEFAULT_INPUT_DIM, hidden: Sequence[int] = DEFAULT_HIDDEN_DIMS) -> Tuple[int, ...]:
    """Layer widths from input through hidden layers to the single output."""
    return (int(input_dim), *(int(h) for h in hidden), 1)


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Weights, biases and calibrated threshold of the fusion back-end."""
    layer_dims: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]
    leaky_slope: float = DEFAULT_LEAKY_SLOPE
    threshold: float = 0.5

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(np.asarray(w, dtype=float) for w in self.weights))
        object.__setattr__(self, "biases", tuple(np.asarray(b, dtype=float) for b in self.biases))

        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValidationError(f"Layer dims must be at least two positive integers, got {dims}")
        if dims[-1] != 1:
            raise ValidationError(f"Output layer width must be 1, got {dims[-1]}")
        if len(self.weights) != len(dims) - 1 or len(self.biases) != len(dims) - 1:
            raise ValidationError(f"Expected {len(dims) - 1} weight/bias pairs for dims {dims}")
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[layer + 1], dims[layer]) or b.shape != (dims[layer + 1],):
                raise ValidationError(
                    f"Layer {layer}: weight {w.shape} / bias {b.shape} incompatible with dims {dims}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValidationError(f"Layer {layer} has non-finite parameters")
        if not math.isfinite(self.leaky_slope) or not math.isfinite(self.threshold):
            raise ValidationError("Leaky slope and threshold must be finite")

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def with_threshold(self, threshold: float) -> "MlpModel":
        """Copy carrying a new decision threshold."""
        return replace(self, threshold=float(threshold))

    def parameters(self) -> List[np.ndarray]:
        """Weights and biases interleaved per layer."""
        params: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params

    def same_as(self, other: "MlpModel") -> bool:
        """Bit-identical comparison of every field."""
        return (self.layer_dims == other.layer_dims
                and self.leaky_slope == other.leaky_slope
                and self.threshold == other.threshold
                and all(np.array_equal(a, b) for a, b in zip(self.parameters(), other.parameters())))


@dataclass(frozen=True, eq=False)
class GradientSet:
    """Loss gradients shaped like a model's weights and biases."""
    weights: Tuple[np.ndarray, ...]
    biases: Tuple[np.ndarray, ...]

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "GradientSet":
        """Zero gradients shaped like the model's parameters."""
        return cls(tuple(np.zeros_like(w) for w in model.weights), tuple(np.zeros_like(b) for b in model.biases))

    def check_shapes(self, model: MlpModel) -> None:
        """Raise if any gradient does not match its parameter's shape."""
        if len(self.weights) != model.n_layers or len(self.biases) != model.n_layers:
            raise ValidationError(f"Gradient has {len(self.weights)} layers, model has {model.n_layers}")
        for layer, (gw, gb, w, b) in enumerate(zip(self.weights, self.biases, model.weights, model.biases)):
            if gw.shape != w.shape or gb.shape != b.shape:
                raise ValidationError(f"Layer {layer}: gradient shapes {gw.shape}/{gb.shape} "
                                      f"do not match parameters {w.shape}/{b.shape}")

    def parameters(self) -> List[np.ndarray]:
        params: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            params.extend((w, b))
        return params


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError(f"Learning rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValidationError(f"Adam betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not self.epsilon > 0:
            raise ValidationError(f"Adam epsilon must be positive, got {self.epsilon}")


@dataclass(frozen=True, eq=False)
class AdamState:
    """First/second moment estimates and step count, one pair per parameter array."""
    step: int
    first_moments: Tuple[np.ndarray, ...]
    second_moments: Tuple[np.ndarray, ...]

    @classmethod
    def fresh(cls, model: MlpModel) -> "AdamState":
        """Zero moments at step 0 for a model."""
        zeros = tuple(np.zeros_like(p) for p in model.parameters())
        return cls(0, zeros, tuple(np.zeros_like(p) for p in model.parameters()))


def init_model(dims: Sequence[int], leaky_slope: float = DEFAULT_LEAKY_SLOPE, seed: int = 0) -> MlpModel:
    """Fan-in scaled uniform weights U(-1/sqrt(fan_in), 1/sqrt(fan_in)), zero biases."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2 or any(d <= 0 for d in dims):
        raise ValidationError(f"Layer dims must be at least two positive integers, got {dims}")
    rng = np.random.default_rng(int(seed) % 2 ** 64)
    weights = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    biases = [np.zeros(fan_out) for fan_out in dims[1:]]
    return MlpModel(dims, tuple(weights), tuple(biases), float(leaky_slope), 0.5)


def _leaky_relu(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, z, slope * z)


def _affine(a: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    # One (1 x in) @ (in x out) product per row: every row is reduced by the
    # same kernel, so batched and single-row results agree bit for bit.
    return np.matmul(a[:, np.newaxis, :], w.T)[:, 0, :] + b


def _as_batch(model: MlpModel, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=float)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValidationError(f"Input dimension mismatch: model expects {model.input_dim}, got shape {x.shape}")
    return x


def _forward_cache(model: MlpModel, x: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
    activations = [x]
    pre_activations = []
    a = x
    for layer, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = _affine(a, w, b)
        pre_activations.append(z)
        if layer < model.n_layers - 1:
            a = _leaky_relu(z, model.leaky_slope)
            activations.append(a)
    scores = np.clip(expit(pre_activations[-1][:, 0]), _OUTPUT_LOW, _OUTPUT_HIGH)
    return activations, pre_activations, scores


def forward_batch(model: MlpModel, batch) -> np.ndarray:
    """Score every row of a (n, input_dim) batch."""
    x = _as_batch(model, batch)
    return _forward_cache(model, x)[2]


def forward(model: MlpModel, embedding) -> float:
    """Score one concatenated embedding; the result lies in (0, 1)."""
    x = np.asarray(embedding, dtype=float)
    if x.ndim != 1:
        raise ValidationError(f"forward() takes a single vector, got shape {x.shape}")
    return float(forward_batch(model, x[np.newaxis, :])[0])


def backward(model: MlpModel, batch, upstream) -> GradientSet:
    """Reverse-mode gradient of sum_i upstream[i] * score_i with respect to every parameter."""
    x = _as_batch(model, batch)
    upstream = np.asarray(upstream, dtype=float).ravel()
    if upstream.size != x.shape[0]:
        raise ValidationError(f"Upstream has {upstream.size} entries for a batch of {x.shape[0]}")

    activations, pre_activations, scores = _forward_cache(model, x)
    delta = (upstream * scores * (1.0 - scores))[:, np.newaxis]
    grad_w: List[np.ndarray] = [None] * model.n_layers
    grad_b: List[np.ndarray] = [None] * model.n_layers
    for layer in reversed(range(model.n_layers)):
        grad_w[layer] = delta.T @ activations[layer]
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            # subgradient at exactly 0 uses the negative slope
            slope = np.where(pre_activations[layer - 1] > 0, 1.0, model.leaky_slope)
            delta = (delta @ model.weights[layer]) * slope
    return GradientSet(tuple(grad_w), tuple(grad_b))


def apply_update(model: MlpModel, grads: GradientSet, state: AdamState,
                 config: AdamConfig = AdamConfig()) -> Tuple[MlpModel, AdamState]:
    """One Adam step; returns a new model and a new state, leaving the inputs untouched."""
    grads.check_shapes(model)
    params = model.parameters()
    if len(state.first_moments) != len(params):
        raise ValidationError("Optimizer state does not match the model")

    step = state.step + 1
    correction1 = 1.0 - config.beta1 ** step
    correction2 = 1.0 - config.beta2 ** step
    new_params, new_m, new_v = [], [], []
    for param, grad, m, v in zip(params, grads.parameters(), state.first_moments, state.second_moments):
        m = config.beta1 * m + (1.0 - config.beta1) * grad
        v = config.beta2 * v + (1.0 - config.beta2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        new_params.append(param - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon))
        new_m.append(m)
        new_v.append(v)

    updated = replace(model, weights=tuple(new_params[0::2]), biases=tuple(new_params[1::2]))
    return updated, AdamState(step, tuple(new_m), tuple(new_v))


def save_model(model: MlpModel, path: Union[str, Path]) -> Path:
    """Write a model checkpoint; see the module docstring for the layout."""
    path = Path(path)
    chunks = [
        _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(model.layer_dims)),
        struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims),
        _REALS.pack(model.leaky_slope, model.threshold),
    ]
    for w, b in zip(model.weights, model.biases):
        chunks.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        chunks.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))
    logger.debug("Saved checkpoint %s (dims %s, threshold %r)", path, model.layer_dims, model.threshold)
    return path


def load_model(path: Union[str, Path], expected_dims: Optional[Sequence[int]] = None) -> MlpModel:
    """Read a checkpoint, validating magic, version and (optionally) layer dims."""
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: file too short to be a checkpoint ({len(data)} bytes)")
    magic, version, n_dims = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, "
                              f"this build reads version {CHECKPOINT_VERSION}")

    offset = _HEADER.size
    dims_size = 4 * n_dims
    if len(data) < offset + dims_size + _REALS.size:
        raise CheckpointError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{n_dims}I", data, offset)
    offset += dims_size
    leaky_slope, threshold = _REALS.unpack_from(data, offset)
    offset += _REALS.size

    if expected_dims is not None and tuple(expected_dims) != tuple(dims):
        raise CheckpointError(f"{path}: checkpoint dims {tuple(dims)} differ from expected {tuple(expected_dims)}")

    n_floats = sum(d_out * d_in + d_out for d_in, d_out in zip(dims[:-1], dims[1:]))
    payload = len(data) - offset
    if payload != 8 * n_floats:
        raise CheckpointError(f"{path}: dims {tuple(dims)} need {n_floats} parameters "
                              f"({8 * n_floats} bytes) but the payload holds {payload} bytes")

    values = np.frombuffer(data, dtype="<f8", offset=offset).astype(float)
    weights, biases = [], []
    cursor = 0
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        weights.append(values[cursor:cursor + d_out * d_in].reshape(d_out, d_in).copy())
        cursor += d_out * d_in
        biases.append(values[cursor:cursor + d_out].copy())
        cursor += d_out
    try:
        return MlpModel(tuple(dims), tuple(weights), tuple(biases), leaky_slope, threshold)
    except ValidationError as e:
        raise CheckpointError(f"{path}: {e}")
