"""Small numpy network engine: 1D convolutions, dense layers, dropout and Adam.

Everything here is a pure function of its inputs. Parameters live in one flat
float32 vector (:class:`ParameterVector`) so they can be averaged, shipped over
the wire and compared bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

CONV1D = "conv1d"
DENSE = "dense"
OUTPUT = "output"
RELU = "relu"
LINEAR = "linear"


class SpecError(ValueError):
    """Raised for an inconsistent network description."""


class ShapeError(ValueError):
    """Raised when arrays do not match the network contract."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernels: int = 0
    kernel_len: int = 0
    units: int = 0
    activation: str = RELU
    dropout_rate: float = 0.0

    @classmethod
    def conv1d(cls, kernels: int, kernel_len: int, activation: str = RELU, dropout_rate: float = 0.0) -> "LayerSpec":
        return cls(CONV1D, kernels=kernels, kernel_len=kernel_len, activation=activation, dropout_rate=dropout_rate)

    @classmethod
    def dense(cls, units: int, activation: str = RELU, dropout_rate: float = 0.0) -> "LayerSpec":
        return cls(DENSE, units=units, activation=activation, dropout_rate=dropout_rate)

    @classmethod
    def output(cls) -> "LayerSpec":
        return cls(OUTPUT, units=1, activation=LINEAR)

    @property
    def out_channels(self) -> int:
        return self.kernels if self.kind == CONV1D else self.units


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    input_window: int = 50
    input_channels: int = 17
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        param_layout(self)  # validates the chain


def rul_cnn(seed: int = 0, input_window: int = 50, input_channels: int = 17, dropout_rate: float = 0.5) -> NetworkSpec:
    """Three same-padded conv layers (10, 10, 1 kernels of length 9), Dense(100) with dropout, scalar output."""
    return NetworkSpec(
        layers=(
            LayerSpec.conv1d(10, 9),
            LayerSpec.conv1d(10, 9),
            LayerSpec.conv1d(1, 9),
            LayerSpec.dense(100, dropout_rate=dropout_rate),
            LayerSpec.output(),
        ),
        input_window=input_window,
        input_channels=input_channels,
        seed=seed,
    )


@dataclass(frozen=True)
class TensorSlot:
    layer: int
    role: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


def param_layout(spec: NetworkSpec) -> tuple[TensorSlot, ...]:
    if spec.input_window < 1 or spec.input_channels < 1:
        raise SpecError("input_window and input_channels must be positive")
    if not spec.layers:
        raise SpecError("network has no layers")
    slots = []
    offset = 0
    time_len, channels = spec.input_window, spec.input_channels
    flat = None  # set once the first dense layer flattens the feature maps
    for idx, layer in enumerate(spec.layers):
        if layer.activation not in (RELU, LINEAR):
            raise SpecError(f"layer {idx}: unknown activation {layer.activation!r}")
        if not 0.0 <= layer.dropout_rate < 1.0:
            raise SpecError(f"layer {idx}: dropout_rate must be in [0, 1)")
        if layer.kind == CONV1D:
            if flat is not None:
                raise SpecError(f"layer {idx}: conv1d cannot follow a dense layer")
            if layer.kernels < 1 or layer.kernel_len < 1:
                raise SpecError(f"layer {idx}: conv1d needs kernels >= 1 and kernel_len >= 1")
            if layer.kernel_len % 2 == 0:
                raise SpecError(f"layer {idx}: same padding needs an odd kernel_len")
            shapes = [(layer.kernel_len, channels, layer.kernels), (layer.kernels,)]
            channels = layer.kernels
        elif layer.kind in (DENSE, OUTPUT):
            if layer.units < 1:
                raise SpecError(f"layer {idx}: dense needs units >= 1")
            fan_in = time_len * channels if flat is None else flat
            shapes = [(fan_in, layer.units), (layer.units,)]
            flat = layer.units
        else:
            raise SpecError(f"layer {idx}: unknown kind {layer.kind!r}")
        if layer.kind == OUTPUT and idx != len(spec.layers) - 1:
            raise SpecError("output layer must be last")
        for role, shape in zip(("weight", "bias"), shapes):
            slot = TensorSlot(idx, role, shape, offset)
            slots.append(slot)
            offset = slot.stop
    last = spec.layers[-1]
    if last.kind != OUTPUT or last.units != 1 or last.activation != LINEAR:
        raise SpecError("network must end with a 1-unit linear output layer")
    return tuple(slots)


def param_count(spec: NetworkSpec) -> int:
    return param_layout(spec)[-1].stop


@dataclass(frozen=True, eq=False)
class ParameterVector:
    """Flat float32 weights plus the layout that maps them back to tensors."""

    values: np.ndarray
    layout: tuple[TensorSlot, ...] = field(default=())
    dtype: type = np.float32  # float64 only for shadow (finite-difference) computations

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=self.dtype).ravel()
        if self.layout and values.size != self.layout[-1].stop:
            raise ShapeError(f"expected {self.layout[-1].stop} values, got {values.size}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return int(self.values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ParameterVector):
            return NotImplemented
        return self.values.tobytes() == other.values.tobytes()

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(values, self.layout, self.dtype)

    def shadow(self) -> "ParameterVector":
        """A float64 copy for high-precision checks."""
        return ParameterVector(self.values.astype(np.float64), self.layout, np.float64)

    def tensors(self) -> list[np.ndarray]:
        return [self.values[s.offset:s.stop].reshape(s.shape) for s in self.layout]


def pack(spec: NetworkSpec, tensors: Sequence[np.ndarray]) -> ParameterVector:
    """Build a vector from per-layer (weight, bias, weight, bias, ...) arrays."""
    layout = param_layout(spec)
    if len(tensors) != len(layout):
        raise ShapeError(f"expected {len(layout)} tensors, got {len(tensors)}")
    parts = []
    for slot, t in zip(layout, tensors):
        t = np.asarray(t)
        if t.shape != slot.shape:
            raise ShapeError(f"layer {slot.layer} {slot.role}: shape {t.shape} != {slot.shape}")
        parts.append(t.ravel())
    return ParameterVector(np.concatenate(parts), layout)


def init_parameters(spec: NetworkSpec) -> ParameterVector:
    layout = param_layout(spec)
    rng = np.random.default_rng(spec.seed)
    values = np.zeros(layout[-1].stop, dtype=np.float64)
    for slot in layout:
        if slot.role != "weight":
            continue
        layer = spec.layers[slot.layer]
        fan_in = int(np.prod(slot.shape[:-1]))
        gain = 6.0 if layer.activation == RELU else 3.0
        limit = np.sqrt(gain / fan_in)
        values[slot.offset:slot.stop] = rng.uniform(-limit, limit, size=slot.size)
    return ParameterVector(values.astype(np.float32), layout)


@dataclass(frozen=True, eq=False)
class Batch:
    inputs: np.ndarray
    targets: np.ndarray

    def __post_init__(self) -> None:
        if len(self.inputs) == 0 or len(self.inputs) != len(self.targets):
            raise ShapeError("inputs and targets must have equal, nonzero length")


# -- forward / backward -----------------------------------------------------


def _patches(x: np.ndarray, kernel_len: int) -> np.ndarray:
    # x: (B, T, C) -> (B, T, K*C), zero same-padding
    left = (kernel_len - 1) // 2
    right = kernel_len - 1 - left
    xp = np.pad(x, ((0, 0), (left, right), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, kernel_len, axis=1)  # (B, T, C, K)
    return win.transpose(0, 1, 3, 2).reshape(x.shape[0], x.shape[1], kernel_len * x.shape[2])


def _unpatch(dpatch: np.ndarray, kernel_len: int, channels: int) -> np.ndarray:
    b, t, _ = dpatch.shape
    left = (kernel_len - 1) // 2
    d = dpatch.reshape(b, t, kernel_len, channels)
    dxp = np.zeros((b, t + kernel_len - 1, channels), dtype=dpatch.dtype)
    for k in range(kernel_len):
        dxp[:, k:k + t, :] += d[:, :, k, :]
    return dxp[:, left:left + t, :]


def _dropout_masks(spec: NetworkSpec, batch_size: int, training: bool, rng_seed: int, dtype) -> list:
    rng = np.random.default_rng(rng_seed)
    masks = []
    time_len = spec.input_window
    for layer in spec.layers:
        if not training or layer.dropout_rate == 0.0:
            masks.append(None)
            continue
        shape = (batch_size, time_len, layer.kernels) if layer.kind == CONV1D else (batch_size, layer.units)
        keep = rng.random(shape) >= layer.dropout_rate
        masks.append(keep.astype(dtype) / dtype(1.0 - layer.dropout_rate))
    return masks


def _check_inputs(spec: NetworkSpec, params: ParameterVector, inputs: np.ndarray) -> None:
    if len(params) != param_count(spec):
        raise ShapeError(f"parameter vector has {len(params)} values, spec needs {param_count(spec)}")
    if inputs.ndim != 3 or inputs.shape[1:] != (spec.input_window, spec.input_channels):
        raise ShapeError(
            f"inputs must be (batch, {spec.input_window}, {spec.input_channels}), got {inputs.shape}"
        )


def _forward(spec, params, inputs, training, rng_seed, dtype):
    inputs = np.asarray(inputs)
    _check_inputs(spec, params, inputs)
    tensors = [t.astype(dtype) for t in params.tensors()]
    masks = _dropout_masks(spec, inputs.shape[0], training, rng_seed, dtype)
    h = inputs.astype(dtype)
    cache = []
    for idx, layer in enumerate(spec.layers):
        w, b = tensors[2 * idx], tensors[2 * idx + 1]
        if layer.kind == CONV1D:
            x_in = _patches(h, layer.kernel_len)
            pre = x_in @ w.reshape(-1, layer.kernels) + b
        else:
            x_in = h.reshape(h.shape[0], -1)
            pre = x_in @ w + b
        out = np.maximum(pre, 0) if layer.activation == RELU else pre
        if masks[idx] is not None:
            out = out * masks[idx]
        cache.append((x_in, pre, h.shape))
        h = out
    return h.reshape(-1), cache, tensors, masks


def forward(
    spec: NetworkSpec,
    params: ParameterVector,
    batch: Batch | np.ndarray,
    training: bool = False,
    rng_seed: int = 0,
    dtype=np.float32,
) -> np.ndarray:
    """One scalar prediction per window. Dropout only when ``training`` is set."""
    inputs = batch.inputs if isinstance(batch, Batch) else batch
    preds, *_ = _forward(spec, params, inputs, training, rng_seed, dtype)
    return preds


def layer_outputs(spec, params, inputs, training=False, rng_seed=0, dtype=np.float32) -> list[np.ndarray]:
    """Post-activation (and post-dropout) output of every layer, for inspection."""
    _, cache, _, masks = _forward(spec, params, inputs, training, rng_seed, dtype)
    result = []
    for idx, layer in enumerate(spec.layers):
        pre = cache[idx][1]
        out = np.maximum(pre, 0) if layer.activation == RELU else pre
        if masks[idx] is not None:
            out = out * masks[idx]
        result.append(out)
    return result


def backward(
    spec: NetworkSpec,
    params: ParameterVector,
    batch: Batch,
    training: bool = True,
    rng_seed: int = 0,
    dtype=np.float32,
) -> tuple[float, ParameterVector]:
    """RMSE loss over the batch and its exact gradient w.r.t. every parameter.

    Weight gradients are reduced in float64 whatever ``dtype`` the activations use.
    The returned gradient vector carries float32 values; use
    :func:`backward_array` to get the float64 gradient directly.
    """
    loss, grad = backward_array(spec, params, batch, training, rng_seed, dtype)
    return loss, ParameterVector(grad.astype(np.float32), params.layout)


def backward_array(spec, params, batch, training=True, rng_seed=0, dtype=np.float32) -> tuple[float, np.ndarray]:
    preds, cache, tensors, masks = _forward(spec, params, batch.inputs, training, rng_seed, dtype)
    targets = np.asarray(batch.targets, dtype=np.float64)
    resid = preds.astype(np.float64) - targets
    n = resid.size
    loss = float(np.sqrt(np.dot(resid, resid) / n))
    grad = np.zeros(len(params), dtype=np.float64)
    if loss == 0.0:
        return loss, grad
    delta = (resid / (n * loss)).astype(dtype).reshape(-1, 1)
    layout = params.layout
    for idx in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[idx]
        x_in, pre, in_shape = cache[idx]
        if masks[idx] is not None:
            delta = delta * masks[idx]
        if layer.activation == RELU:
            delta = delta * (pre > 0)
        w_slot, b_slot = layout[2 * idx], layout[2 * idx + 1]
        x64 = x_in.reshape(-1, x_in.shape[-1]).astype(np.float64)
        d64 = delta.reshape(-1, delta.shape[-1]).astype(np.float64)
        grad[w_slot.offset:w_slot.stop] = (x64.T @ d64).ravel()
        grad[b_slot.offset:b_slot.stop] = d64.sum(axis=0)
        if idx == 0:
            break
        w = tensors[2 * idx]
        if layer.kind == CONV1D:
            dpatch = delta @ w.reshape(-1, layer.kernels).T
            delta = _unpatch(dpatch, layer.kernel_len, in_shape[2])
        else:
            delta = (delta @ w.T).reshape(in_shape)
    return loss, grad


# -- losses ----------------------------------------------------------------


def sse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    t = np.asarray(targets, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ShapeError(f"length mismatch: {p.size} predictions, {t.size} targets")
    r = p - t
    return float(np.dot(r, r))


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("rmse of an empty set is undefined")
    return float(np.sqrt(sse_loss(p, targets) / p.size))


# -- optimiser -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def zeros(cls, size: int, **hyper) -> "AdamState":
        return cls(np.zeros(size, dtype=np.float64), np.zeros(size, dtype=np.float64), 0, **hyper)


def adam_step(state: AdamState, params: ParameterVector, gradient) -> tuple[ParameterVector, AdamState]:
    g = np.asarray(gradient.values if isinstance(gradient, ParameterVector) else gradient, dtype=np.float64)
    if not (g.size == len(params) == state.first_moment.size == state.second_moment.size):
        raise ShapeError("adam_step: parameter, gradient and moment lengths differ")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * g
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_values = (params.values.astype(np.float64) - update).astype(params.dtype)
    return params.with_values(new_values), replace(state, first_moment=m, second_moment=v, step_count=t)
