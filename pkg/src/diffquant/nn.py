"""Minimal reverse-mode layers for quantized networks.

A quantized layer computes

    y = Q(W; theta_w) * Q(x; theta_x) + Q(c; theta_w)

in ordinary float arithmetic on quantized values, where ``*`` is a
matrix-vector product (``QuantDense``) or a bank of 2D cross-correlations
(``QuantConv2d``).  The bias shares the weight quantizer.  Every layer keeps
the context of its last forward call; ``Network.backward`` replays the layers
in reverse order.  Tensors are numpy arrays with a leading batch axis.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .optim import Parameter
from .quantizer import (
    Quantizer,
    project,
    quantize_tensor,
    quantize_tensor_backward,
)


class TapeError(RuntimeError):
    """backward() called without a recorded forward pass."""


class LearnableQuantizer:
    """A quantizer whose two latents live in a trainable ``Parameter``."""

    def __init__(self, template: Quantizer, name: str = ""):
        self.template = template
        self.latent = Parameter(template.latent, name)

    @property
    def quantizer(self) -> Quantizer:
        return self.template.with_latent(self.latent.value)

    def effective(self):
        return project(self.quantizer)

    def clip_(self):
        self.latent.value = np.array(self.quantizer.clipped().latent)

    def __repr__(self):
        return f"LearnableQuantizer({self.template.param.value}, latent={tuple(self.latent.value)})"


def _quantize(x, lq: LearnableQuantizer | None):
    if lq is None:
        return np.asarray(x, dtype=np.float64), None
    return quantize_tensor(x, lq.quantizer)


def _unquantize_grad(grad, ctx, lq: LearnableQuantizer | None):
    if lq is None:
        return grad
    gx, gtheta = quantize_tensor_backward(grad, ctx)
    lq.latent.grad = lq.latent.grad + gtheta
    return gx


class Layer:
    def parameters(self) -> list[Parameter]:
        return []

    def output_shape(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        return input_shape

    def _saved(self):
        ctx = getattr(self, "_ctx", None)
        if ctx is None:
            raise TapeError(f"{type(self).__name__}.backward called before forward")
        self._ctx = None
        return ctx


class QuantDense(Layer):
    kind = "dense"

    def __init__(self, in_units: int, out_units: int, weight_q=None, act_q=None,
                 rng: np.random.Generator | None = None, name: str = "dense"):
        rng = rng if rng is not None else np.random.default_rng(0)
        scale = np.sqrt(2.0 / in_units)
        self.W = Parameter(scale * rng.standard_normal((out_units, in_units)), f"{name}.W")
        self.c = Parameter(np.zeros(out_units), f"{name}.c")
        self.weight_q = weight_q
        self.act_q = act_q
        self.in_units, self.out_units = in_units, out_units
        self.name = name
        self._ctx = None

    def parameters(self):
        params = [self.W, self.c]
        params += [q.latent for q in (self.weight_q, self.act_q) if q is not None]
        return params

    def output_shape(self, input_shape):
        return (self.out_units,)

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_units:
            raise ValueError(f"{self.name}: expected (N, {self.in_units}) input, got {x.shape}")
        xq, cx = _quantize(x, self.act_q)
        wq, cw = _quantize(self.W.value, self.weight_q)
        bq, cb = _quantize(self.c.value, self.weight_q)
        self._ctx = (xq, wq, cx, cw, cb)
        return xq @ wq.T + bq

    def backward(self, grad):
        xq, wq, cx, cw, cb = self._saved()
        self.W.grad = self.W.grad + _unquantize_grad(grad.T @ xq, cw, self.weight_q)
        self.c.grad = self.c.grad + _unquantize_grad(grad.sum(axis=0), cb, self.weight_q)
        return _unquantize_grad(grad @ wq, cx, self.act_q)


class QuantConv2d(Layer):
    """Cross-correlation over square maps, zero padding, stride 1 or 2."""

    kind = "conv2d"

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 padding: int = 0, weight_q=None, act_q=None,
                 rng: np.random.Generator | None = None, name: str = "conv"):
        if stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = in_channels * kernel * kernel
        self.W = Parameter(
            np.sqrt(2.0 / fan_in) * rng.standard_normal((out_channels, in_channels, kernel, kernel)),
            f"{name}.W",
        )
        self.c = Parameter(np.zeros(out_channels), f"{name}.c")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.weight_q, self.act_q = weight_q, act_q
        self.name = name
        self._ctx = None

    def parameters(self):
        params = [self.W, self.c]
        params += [q.latent for q in (self.weight_q, self.act_q) if q is not None]
        return params

    def _out_side(self, side: int) -> int:
        padded = side + 2 * self.padding
        if self.kernel > padded:
            raise ValueError(f"{self.name}: kernel {self.kernel} larger than padded input {padded}")
        return (padded - self.kernel) // self.stride + 1

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (self.out_channels, self._out_side(h), self._out_side(w))

    def forward(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != self.in_channels or x.shape[2] != x.shape[3]:
            raise ValueError(
                f"{self.name}: expected (N, {self.in_channels}, S, S) input, got {x.shape}"
            )
        n_out = self._out_side(x.shape[2])
        xq, cx = _quantize(x, self.act_q)
        wq, cw = _quantize(self.W.value, self.weight_q)
        bq, cb = _quantize(self.c.value, self.weight_q)
        p, s, k = self.padding, self.stride, self.kernel
        xp = np.pad(xq, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :n_out, :n_out]
        y = np.tensordot(win, wq, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        self._ctx = (x.shape, win, wq, cx, cw, cb)
        return y + bq[None, :, None, None]

    def backward(self, grad):
        in_shape, win, wq, cx, cw, cb = self._saved()
        p, s, k = self.padding, self.stride, self.kernel
        n_out = grad.shape[2]
        gw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
        self.W.grad = self.W.grad + _unquantize_grad(gw, cw, self.weight_q)
        self.c.grad = self.c.grad + _unquantize_grad(grad.sum(axis=(0, 2, 3)), cb, self.weight_q)

        gwin = np.tensordot(grad, wq, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        n, c, h, w = in_shape
        gxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
        span = s * (n_out - 1) + 1
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + span:s, j:j + span:s] += gwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + h, p:p + w]
        return _unquantize_grad(gx, cx, self.act_q)


class ReLU(Layer):
    def forward(self, x):
        self._ctx = x > 0
        return np.where(self._ctx, x, 0.0)

    def backward(self, grad):
        return np.where(self._saved(), grad, 0.0)


class AvgPool2d(Layer):
    """Non-overlapping ``size`` x ``size`` average pooling."""

    def __init__(self, size: int = 2):
        self.size = size
        self._ctx = None

    def output_shape(self, input_shape):
        c, h, w = input_shape
        return (c, h // self.size, w // self.size)

    def forward(self, x):
        n, c, h, w = x.shape
        k = self.size
        if h % k or w % k:
            raise ValueError(f"pool size {k} does not divide input {h}x{w}")
        self._ctx = x.shape
        return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))

    def backward(self, grad):
        shape = self._saved()
        k = self.size
        g = np.repeat(np.repeat(grad, k, axis=2), k, axis=3) / (k * k)
        return g.reshape(shape)


class GlobalAvgPool(Layer):
    def output_shape(self, input_shape):
        return (input_shape[0],)

    def forward(self, x):
        self._ctx = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        shape = self._saved()
        return np.broadcast_to(grad[:, :, None, None] / (shape[2] * shape[3]), shape).copy()


class Flatten(Layer):
    def output_shape(self, input_shape):
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        self._ctx = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._saved())


@dataclass(frozen=True)
class LossValue:
    """Scalar loss plus dJ/dlogits, the seed of the backward pass."""

    value: float
    grad: np.ndarray


def softmax_cross_entropy(logits, labels) -> LossValue:
    """Mean negative log-softmax over the batch.

    ``logits`` may be a single (k,) vector with an integer label.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = logits[None, :] if single else logits
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    k = z.shape[1]
    if y.shape[0] != z.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for {z.shape[0]} logit rows")
    if np.any((y < 0) | (y >= k)):
        raise ValueError(f"labels must lie in [0, {k}), got {y}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(len(y))
    value = float(-log_p[rows, y].mean())
    grad = np.exp(log_p)
    grad[rows, y] -= 1.0
    grad /= len(y)
    return LossValue(value, grad[0] if single else grad)


class Network:
    """An ordered stack of layers with a single-use backward tape."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...]):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self._ran_forward = False

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        self._ran_forward = True
        return x

    __call__ = forward

    def backward(self, loss: LossValue | np.ndarray):
        if not self._ran_forward:
            raise TapeError("backward called without a recorded forward pass")
        grad = loss.grad if isinstance(loss, LossValue) else np.asarray(loss, dtype=np.float64)
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        self._ran_forward = False
        return grad

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def quantized_layers(self) -> list[QuantDense | QuantConv2d]:
        return [l for l in self.layers if isinstance(l, (QuantDense, QuantConv2d))]

    def quantizers(self) -> list[LearnableQuantizer]:
        out = []
        for layer in self.quantized_layers():
            out += [q for q in (layer.weight_q, layer.act_q) if q is not None]
        return out

    def shapes(self) -> list[tuple[int, ...]]:
        """Per-layer output shapes (without the batch axis)."""
        shape, out = self.input_shape, []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    def clip_quantizers_(self):
        for q in self.quantizers():
            q.clip_()

    def float_copy(self) -> "Network":
        """Same weights, no quantizers (shares nothing mutable)."""
        net = copy.deepcopy(self)
        for layer in net.quantized_layers():
            layer.weight_q = layer.act_q = None
        return net


def with_bounds(q: Quantizer, **bounds) -> Quantizer:
    return replace(q, bounds=replace(q.bounds, **bounds))
