"""Forward-only network kernels and flat-parameter bookkeeping.

Everything here is a pure function of its arguments. Tensors are numpy arrays
in ``(height, width, channels)`` order and parameters are float32 views into a
flat genome vector. There is no gradient code anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float32

ACTIVATIONS = ("relu", "sigmoid", "tanh", "identity")
KINDS = ("conv", "deconv", "dense", "lstm")


class ConfigurationError(ValueError):
    """Raised when shapes or layer descriptions do not line up."""


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer.

    ``in_size``/``out_size`` are channels for (de)convolutions, features for
    dense layers and input width / hidden size for an LSTM.
    """

    name: str
    kind: str
    in_size: int
    out_size: int
    kernel: int = 1
    stride: int = 1
    activation: str = "identity"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.in_size < 1 or self.out_size < 1:
            raise ConfigurationError(f"{self.name}: sizes must be >= 1")
        if self.kind in ("conv", "deconv") and (self.kernel < 1 or self.stride < 1):
            raise ConfigurationError(f"{self.name}: kernel and stride must be >= 1")

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """Parameter tensors of this layer in storage order (weights first)."""
        if self.kind == "conv":
            return [
                ("weight", (self.out_size, self.kernel, self.kernel, self.in_size)),
                ("bias", (self.out_size,)),
            ]
        if self.kind == "deconv":
            return [
                ("weight", (self.in_size, self.out_size, self.kernel, self.kernel)),
                ("bias", (self.out_size,)),
            ]
        if self.kind == "dense":
            return [("weight", (self.out_size, self.in_size)), ("bias", (self.out_size,))]
        hidden = self.out_size
        return [
            ("weight_ih", (4 * hidden, self.in_size)),
            ("weight_hh", (4 * hidden, hidden)),
            ("bias_ih", (4 * hidden,)),
            ("bias_hh", (4 * hidden,)),
        ]

    def fan_ins(self) -> list[int]:
        """Input width seen by each parameter tensor, for uniform init bounds."""
        if self.kind == "conv":
            fan = self.in_size * self.kernel * self.kernel
            return [fan, fan]
        if self.kind == "deconv":
            fan = self.out_size * self.kernel * self.kernel
            return [fan, fan]
        if self.kind == "dense":
            return [self.in_size, self.in_size]
        return [self.in_size, self.out_size, self.in_size, self.out_size]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.tensor_shapes())

    def output_hw(self, height: int, width: int) -> tuple[int, int]:
        if self.kind == "conv":
            return conv_output_size(height, self.kernel, self.stride), conv_output_size(
                width, self.kernel, self.stride
            )
        if self.kind == "deconv":
            return (height - 1) * self.stride + self.kernel, (width - 1) * self.stride + self.kernel
        raise ConfigurationError(f"{self.name}: {self.kind} layers have no spatial output")


@dataclass(frozen=True)
class ParamSlice:
    """A contiguous ``[offset, offset + length)`` range of a flat vector."""

    name: str
    offset: int
    length: int
    shape: tuple[int, ...] = ()

    @property
    def stop(self) -> int:
        return self.offset + self.length

    def view(self, flat: np.ndarray) -> np.ndarray:
        block = flat[self.offset : self.stop]
        return block.reshape(self.shape) if self.shape else block


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    return (size - kernel) // stride + 1


def param_count(layers: Iterable[LayerSpec]) -> int:
    """Exact number of parameters (weights and every bias) of a network."""
    return sum(layer.n_params for layer in layers)


def tensor_layout(layers: Sequence[LayerSpec], offset: int = 0) -> list[ParamSlice]:
    """Lay the tensors of ``layers`` out back to back starting at ``offset``."""
    slices = []
    for layer in layers:
        for tname, shape in layer.tensor_shapes():
            length = int(np.prod(shape))
            slices.append(ParamSlice(f"{layer.name}.{tname}", offset, length, shape))
            offset += length
    return slices


def activate(x: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(x, 0)
    if activation == "sigmoid":
        return sigmoid(x)
    if activation == "tanh":
        return np.tanh(x)
    if activation == "identity":
        return x
    raise ConfigurationError(f"unknown activation {activation!r}")


def sigmoid(x):
    # tanh form avoids overflow warnings for large |x|
    return 0.5 * np.tanh(0.5 * x) + 0.5


def conv2d_forward(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, spec: LayerSpec
) -> np.ndarray:
    """Valid (unpadded) strided convolution of an ``(h, w, c)`` tensor.

    ``weight`` is laid out ``(out, k, k, in)``, i.e. ``weight[o, dy, dx, i]``
    multiplies ``x[y*s + dy, x*s + dx, i]``.
    """
    if x.ndim != 3:
        raise ConfigurationError(f"{spec.name}: expected (h, w, c) input, got shape {x.shape}")
    k, s = spec.kernel, spec.stride
    h, w, c = x.shape
    if c != spec.in_size:
        raise ConfigurationError(f"{spec.name}: input has {c} channels, layer expects {spec.in_size}")
    if weight.size != spec.out_size * spec.in_size * k * k:
        raise ConfigurationError(f"{spec.name}: weight has {weight.size} elements")
    if bias.size != spec.out_size:
        raise ConfigurationError(f"{spec.name}: bias has {bias.size} elements")
    oh, ow = conv_output_size(h, k, s), conv_output_size(w, k, s)
    if oh < 1 or ow < 1:
        raise ConfigurationError(f"{spec.name}: {h}x{w} input is smaller than the {k}x{k} kernel")
    # (oh, ow, c, k, k) -> rows ordered (dy, dx, c) to match weight[o, dy, dx, i]
    windows = sliding_window_view(x, (k, k), axis=(0, 1))[: (oh - 1) * s + 1 : s, : (ow - 1) * s + 1 : s]
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(oh * ow, k * k * c)
    wmat = weight.reshape(spec.out_size, c * k * k)
    if oh * ow < 16:
        out = (wmat @ cols.T).T
    else:
        out = cols @ wmat.T
    out += bias
    if spec.activation == "relu":
        np.maximum(out, 0, out=out)
    else:
        out = activate(out, spec.activation)
    return out.reshape(oh, ow, spec.out_size)


def dense_forward(
    x: np.ndarray, weight: np.ndarray, bias: np.ndarray, activation: str = "identity"
) -> np.ndarray:
    """``act(W x + b)`` with ``W`` shaped ``(out, in)``."""
    if weight.ndim != 2:
        raise ConfigurationError(f"dense weight must be 2-D, got shape {weight.shape}")
    if x.shape != (weight.shape[1],):
        raise ConfigurationError(f"dense input has shape {x.shape}, weight expects ({weight.shape[1]},)")
    if bias.shape != (weight.shape[0],):
        raise ConfigurationError(f"dense bias has shape {bias.shape}, weight expects ({weight.shape[0]},)")
    return activate(weight @ x + bias, activation)


def lstm_step(
    x: np.ndarray,
    state: tuple[np.ndarray, np.ndarray],
    weight_ih: np.ndarray,
    weight_hh: np.ndarray,
    bias_ih: np.ndarray,
    bias_hh: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One LSTM update with gate rows ordered input, forget, cell, output."""
    h, c = state
    hidden = h.shape[0]
    if c.shape != (hidden,):
        raise ConfigurationError(f"cell state has shape {c.shape}, expected ({hidden},)")
    if weight_ih.shape != (4 * hidden, x.shape[0]) or x.ndim != 1:
        raise ConfigurationError(f"weight_ih {weight_ih.shape} does not fit input {x.shape}")
    if weight_hh.shape != (4 * hidden, hidden):
        raise ConfigurationError(f"weight_hh {weight_hh.shape} does not fit hidden size {hidden}")
    if bias_ih.shape != (4 * hidden,) or bias_hh.shape != (4 * hidden,):
        raise ConfigurationError("LSTM biases must both have 4 * hidden elements")
    gates = weight_ih @ x + bias_ih + (weight_hh @ h + bias_hh)
    i = sigmoid(gates[:hidden])
    f = sigmoid(gates[hidden : 2 * hidden])
    g = np.tanh(gates[2 * hidden : 3 * hidden])
    o = sigmoid(gates[3 * hidden :])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new


def step_activation(x: np.ndarray) -> np.ndarray:
    """Binarise: 1 where ``x > 0``, else 0 (so 0 itself maps to 0)."""
    return (np.asarray(x) > 0).astype(DTYPE)
