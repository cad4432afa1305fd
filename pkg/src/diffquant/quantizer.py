"""Uniform and power-of-two quantizers with straight-through gradients.

Both quantizer families have three dependent parameters of which any two can
be chosen as the trainable latents:

    uniform:       U1 = (b, d)      U2 = (b, q_max)      U3 = (d, q_max)
    power-of-two:  P1 = (b, q_max)  P2 = (b, q_min)      P3 = (q_min, q_max)

Latents are stored unconstrained.  Before every forward pass they are clipped
into ``ParamBounds`` and rounded to hardware-legal values (integer bitwidth,
power-of-two stepsize / range); the result is an ``EffectiveParams``.
Gradients flow back to the latents through that projection as identity.

All functions here are vectorised over numpy arrays and pure.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

LN2 = math.log(2.0)
SQRT2 = math.sqrt(2.0)


class QuantizerError(ValueError):
    """Invalid quantizer state (non-finite latents, degenerate range, ...)."""


class ConfigError(QuantizerError):
    """Inconsistent quantizer configuration, e.g. bounds with min >= max."""


class Family(str, Enum):
    UNIFORM = "uniform"
    POW2 = "pow2"


class Parametrization(str, Enum):
    U1 = "U1"
    U2 = "U2"
    U3 = "U3"
    P1 = "P1"
    P2 = "P2"
    P3 = "P3"

    @property
    def family(self) -> Family:
        return Family.UNIFORM if self.value.startswith("U") else Family.POW2

    @property
    def latent_names(self) -> tuple[str, str]:
        return _LATENT_NAMES[self]

    @property
    def learns_bitwidth(self) -> bool:
        """True if the bitwidth itself is one of the two latents."""
        return self.latent_names[0] == "b"


_LATENT_NAMES = {
    Parametrization.U1: ("b", "d"),
    Parametrization.U2: ("b", "q_max"),
    Parametrization.U3: ("d", "q_max"),
    Parametrization.P1: ("b", "q_max"),
    Parametrization.P2: ("b", "q_min"),
    Parametrization.P3: ("q_min", "q_max"),
}


@dataclass(frozen=True)
class ParamBounds:
    """Box constraints applied to the latents before rounding."""

    b_min: int = 2
    b_max: int = 16
    d_min: float = 2.0**-16
    d_max: float = 2.0**4
    qmax_min: float = 2.0**-8
    qmax_max: float = 2.0**8
    qmin_min: float = 2.0**-16
    qmin_max: float = 2.0**0

    def __post_init__(self):
        if self.b_min < 2:
            raise ConfigError(f"b_min must be >= 2, got {self.b_min}")
        for name in ("b", "d", "qmax", "qmin"):
            lo, hi = getattr(self, f"{name}_min"), getattr(self, f"{name}_max")
            if not lo < hi:
                raise ConfigError(f"bounds for {name}: min {lo} must be < max {hi}")
            if name != "b" and lo <= 0:
                raise ConfigError(f"bounds for {name} must be positive, got {lo}")

    def interval(self, latent_name: str) -> tuple[float, float]:
        key = latent_name.replace("_", "")
        return getattr(self, f"{key}_min"), getattr(self, f"{key}_max")


@dataclass(frozen=True)
class Quantizer:
    """A per-tensor quantizer: parametrization + the two latent values."""

    param: Parametrization
    latent: tuple[float, float]
    signed: bool = True
    with_zero: bool = False
    bounds: ParamBounds = field(default_factory=ParamBounds)

    def __post_init__(self):
        object.__setattr__(self, "param", Parametrization(self.param))
        object.__setattr__(self, "latent", tuple(float(v) for v in self.latent))
        if len(self.latent) != 2:
            raise ConfigError("a quantizer has exactly two latent parameters")
        if self.with_zero and self.family is not Family.POW2:
            raise ConfigError("with_zero is only defined for power-of-two quantizers")

    @property
    def family(self) -> Family:
        return self.param.family

    def with_latent(self, values: Sequence[float]) -> "Quantizer":
        return replace(self, latent=tuple(float(v) for v in values))

    def clipped(self) -> "Quantizer":
        """Latents clipped into their bounds (used after optimizer steps)."""
        vals = [
            float(np.clip(v, *self.bounds.interval(name)))
            for v, name in zip(self.latent, self.param.latent_names)
        ]
        return self.with_latent(vals)


@dataclass(frozen=True)
class EffectiveParams:
    """Hardware-legal parameters that the forward pass actually uses.

    ``d`` is None for power-of-two quantizers, ``q_min`` is None for uniform.
    """

    q_max: float
    b: int
    d: float | None = None
    q_min: float | None = None


@dataclass(frozen=True)
class QuantGrad:
    """Straight-through gradients; ``grad_theta`` has shape ``(2, *x.shape)``."""

    grad_input: np.ndarray
    grad_theta: np.ndarray


# ---------------------------------------------------------------------------
# rounding helpers
# ---------------------------------------------------------------------------


def round_half_away(t):
    """Round to nearest integer, ties away from zero (exact in floating point)."""
    t = np.asarray(t, dtype=np.float64)
    a = np.abs(t)
    f = np.floor(a)
    return np.sign(t) * (f + (a - f >= 0.5))


def _floor_half(t):
    """floor(t + 1/2) computed without the rounding error of the addition."""
    f = np.floor(t)
    return f + ((t - f) >= 0.5)


def snap_pow2(v):
    """Nearest power of two in log2 distance (exponent ties away from zero)."""
    return 2.0 ** round_half_away(np.log2(v))


def magnitude_bits(b: int, signed: bool, with_zero: bool = False) -> int:
    """Bits left for the magnitude after reserving sign / zero codes."""
    return int(b) - int(bool(signed)) - int(bool(with_zero))


def _check_finite(q: Quantizer) -> None:
    if not all(math.isfinite(v) for v in q.latent):
        raise QuantizerError(f"non-finite latent parameters {q.latent}")


def _clip(value: float, bounds: ParamBounds, name: str) -> float:
    lo, hi = bounds.interval(name)
    return float(min(max(value, lo), hi))


def _round_bits(value: float, bounds: ParamBounds) -> int:
    return int(round_half_away(_clip(value, bounds, "b")))


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def project_uniform(q: Quantizer) -> EffectiveParams:
    if q.family is not Family.UNIFORM:
        raise ConfigError(f"{q.param.value} is not a uniform parametrization")
    _check_finite(q)
    t1, t2 = q.latent
    bounds = q.bounds
    if q.param is Parametrization.U1:
        b = _round_bits(t1, bounds)
        d = float(snap_pow2(_clip(t2, bounds, "d")))
        q_max = (2.0 ** magnitude_bits(b, q.signed) - 1.0) * d
    elif q.param is Parametrization.U2:
        b = _round_bits(t1, bounds)
        q_max = _clip(t2, bounds, "q_max")
        d = float(snap_pow2(q_max / (2.0 ** magnitude_bits(b, q.signed) - 1.0)))
    else:
        d = float(snap_pow2(_clip(t1, bounds, "d")))
        q_max = _clip(t2, bounds, "q_max")
        b = infer_bitwidth(EffectiveParams(q_max=q_max, b=0, d=d), Family.UNIFORM, q.signed)
    return EffectiveParams(q_max=q_max, b=b, d=d)


def project_pow2(q: Quantizer) -> EffectiveParams:
    if q.family is not Family.POW2:
        raise ConfigError(f"{q.param.value} is not a power-of-two parametrization")
    _check_finite(q)
    t1, t2 = q.latent
    bounds = q.bounds
    if q.param is Parametrization.P3:
        q_min = float(snap_pow2(_clip(t1, bounds, "q_min")))
        q_max = float(snap_pow2(_clip(t2, bounds, "q_max")))
        if not q_min < q_max:
            raise QuantizerError(f"degenerate range: q_min={q_min} >= q_max={q_max}")
        b = infer_bitwidth(
            EffectiveParams(q_max=q_max, b=0, q_min=q_min), Family.POW2, q.signed, q.with_zero
        )
        return EffectiveParams(q_max=q_max, b=b, q_min=q_min)

    b = _round_bits(t1, bounds)
    n = magnitude_bits(b, q.signed, q.with_zero)
    if n < 1:
        raise QuantizerError(f"b={b} leaves no magnitude bits (signed={q.signed}, with_zero={q.with_zero})")
    span = 2**n - 1  # q_max / q_min = 2**span
    if q.param is Parametrization.P1:
        q_max = float(snap_pow2(_clip(t2, bounds, "q_max")))
        q_min = math.ldexp(q_max, -span)
    else:
        q_min = float(snap_pow2(_clip(t2, bounds, "q_min")))
        try:
            q_max = math.ldexp(q_min, span)
        except OverflowError:
            q_max = math.inf
    if not (math.isfinite(q_max) and q_min > 0):
        raise QuantizerError(f"b={b} gives a dynamic range outside floating-point limits")
    if not q_min < q_max:
        raise QuantizerError(f"degenerate range: q_min={q_min} >= q_max={q_max}")
    return EffectiveParams(q_max=q_max, b=b, q_min=q_min)


def project(q: Quantizer) -> EffectiveParams:
    return project_uniform(q) if q.family is Family.UNIFORM else project_pow2(q)


# ---------------------------------------------------------------------------
# bitwidth inference
# ---------------------------------------------------------------------------


def bitwidth_expression(eff: EffectiveParams, family: Family, signed: bool = True,
                        with_zero: bool = False) -> float:
    """Real-valued bitwidth implied by the range parameters (no ceiling)."""
    family = Family(family)
    if family is Family.UNIFORM:
        if eff.d is None or eff.d <= 0:
            raise QuantizerError(f"stepsize must be positive, got {eff.d}")
        bits = math.log2(eff.q_max / eff.d + 1.0)
    else:
        if eff.q_min is None or not 0 < eff.q_min < eff.q_max:
            raise QuantizerError(f"need 0 < q_min < q_max, got {eff.q_min}, {eff.q_max}")
        bits = math.log2(math.log2(eff.q_max / eff.q_min) + 1.0)
        if with_zero:
            bits += 1.0
    if signed:
        bits += 1.0
    return bits


def infer_bitwidth(eff: EffectiveParams, family: Family, signed: bool = True,
                   with_zero: bool = False) -> int:
    return int(math.ceil(bitwidth_expression(eff, family, signed, with_zero)))


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------


def uniform_forward(x, eff: EffectiveParams, signed: bool = True) -> np.ndarray:
    """Clip to [-q_max, q_max] (or [0, q_max]) and round to the d-grid."""
    x = np.asarray(x, dtype=np.float64)
    if not signed:
        x = np.maximum(x, 0.0)
    a = np.minimum(np.abs(x), eff.q_max)
    return np.sign(x) * eff.d * _floor_half(a / eff.d)


def uniform_backward(x, eff: EffectiveParams, param: Parametrization,
                     signed: bool = True) -> QuantGrad:
    x = np.asarray(x, dtype=np.float64)
    xr = x if signed else np.maximum(x, 0.0)
    s = np.sign(xr)
    inner = np.abs(xr) <= eff.q_max
    err = uniform_forward(x, eff, signed) - xr

    grad_input = inner.astype(np.float64)
    if not signed:
        grad_input = np.where(x < 0, 0.0, grad_input)

    param = Parametrization(param)
    levels = 2.0 ** magnitude_bits(eff.b, signed) - 1.0
    zero = np.zeros_like(x)
    if param is Parametrization.U1:
        g1 = np.where(inner, zero, s * (levels + 1.0) * LN2 * eff.d)
        g2 = np.where(inner, err / eff.d, s * levels)
    elif param is Parametrization.U2:
        g1 = np.where(inner, -((levels + 1.0) * LN2 / levels) * err, zero)
        g2 = np.where(inner, err / eff.q_max, s)
    elif param is Parametrization.U3:
        g1 = np.where(inner, err / eff.d, zero)
        g2 = np.where(inner, zero, s)
    else:
        raise ConfigError(f"{param.value} is not a uniform parametrization")
    return QuantGrad(grad_input, np.stack([g1, g2]))


def _pow2_exponent(a):
    with np.errstate(divide="ignore"):
        return _floor_half(np.log2(a))


def pow2_forward(x, eff: EffectiveParams, signed: bool = True,
                 with_zero: bool = False) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not signed:
        x = np.maximum(x, 0.0)
    a = np.abs(x)
    mid = 2.0 ** _pow2_exponent(np.where(a > 0, a, 1.0))
    out = np.where(a <= eff.q_min, eff.q_min, np.where(a <= eff.q_max, mid, eff.q_max))
    if with_zero:
        out = np.where(a < eff.q_min / SQRT2, 0.0, out)
    return np.sign(x) * out


def pow2_backward(x, eff: EffectiveParams, param: Parametrization,
                  signed: bool = True, with_zero: bool = False) -> QuantGrad:
    x = np.asarray(x, dtype=np.float64)
    xr = x if signed else np.maximum(x, 0.0)
    s = np.sign(xr)
    a = np.abs(xr)
    low = a <= eff.q_min
    if with_zero:
        low &= a >= eff.q_min / SQRT2
    high = a > eff.q_max
    mid = ~(a <= eff.q_min) & ~high

    safe_a = np.where(mid, a, 1.0)
    grad_input = np.where(mid, 2.0 ** _pow2_exponent(safe_a) / safe_a, 0.0)

    param = Parametrization(param)
    zero = np.zeros_like(x)
    if param is Parametrization.P3:
        g1 = np.where(low, s, zero)
        g2 = np.where(high, s, zero)
    else:
        n = magnitude_bits(eff.b, signed, with_zero)
        span = 2**n - 1
        if param is Parametrization.P1:
            # q_min = q_max * 2**(1 - 2**n)
            ratio = math.ldexp(1.0, -span)
            g1 = np.where(low, -ratio * 2.0**n * LN2**2 * eff.q_max * s, zero)
            g2 = np.where(low, ratio * s, np.where(high, s, zero))
        elif param is Parametrization.P2:
            # q_max = q_min * 2**(2**n - 1)
            ratio = math.ldexp(1.0, span)
            g1 = np.where(high, ratio * 2.0**n * LN2**2 * eff.q_min * s, zero)
            g2 = np.where(low, s, np.where(high, ratio * s, zero))
        else:
            raise ConfigError(f"{param.value} is not a power-of-two parametrization")
    return QuantGrad(grad_input, np.stack([g1, g2]))


def forward(x, q: Quantizer, eff: EffectiveParams | None = None) -> np.ndarray:
    eff = project(q) if eff is None else eff
    if q.family is Family.UNIFORM:
        return uniform_forward(x, eff, q.signed)
    return pow2_forward(x, eff, q.signed, q.with_zero)


def backward(x, q: Quantizer, eff: EffectiveParams | None = None) -> QuantGrad:
    eff = project(q) if eff is None else eff
    if q.family is Family.UNIFORM:
        return uniform_backward(x, eff, q.param, q.signed)
    return pow2_backward(x, eff, q.param, q.signed, q.with_zero)


# ---------------------------------------------------------------------------
# tensor-level API
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuantContext:
    """What ``quantize_tensor_backward`` needs from the forward pass."""

    x: np.ndarray
    quantizer: Quantizer
    eff: EffectiveParams


def quantize_tensor(values, q: Quantizer) -> tuple[np.ndarray, QuantContext]:
    x = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise QuantizerError("cannot quantize non-finite values")
    eff = project(q)
    return forward(x, q, eff), QuantContext(x, q, eff)


def quantize_tensor_backward(upstream, ctx: QuantContext) -> tuple[np.ndarray, np.ndarray]:
    """Return (dL/dx, dL/dtheta) where theta is the shared latent pair."""
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != ctx.x.shape:
        raise ValueError(f"upstream shape {upstream.shape} != input shape {ctx.x.shape}")
    g = backward(ctx.x, ctx.quantizer, ctx.eff)
    grad_theta = (g.grad_theta * upstream).reshape(2, -1).sum(axis=1)
    return upstream * g.grad_input, grad_theta


# ---------------------------------------------------------------------------
# analysis
# ---------------------------------------------------------------------------


def at_bitwidth(q: Quantizer, b: int) -> Quantizer:
    """Same quantizer family/parametrization re-targeted to bitwidth ``b``.

    The finest level is held fixed: the stepsize d for uniform quantizers and
    q_min for power-of-two ones, so that all three parametrizations describe
    the identical quantizer at every ``b``.
    """
    eff = project(q)
    if q.family is Family.UNIFORM:
        d = eff.d
        q_max = (2.0 ** magnitude_bits(b, q.signed) - 1.0) * d
        latent = {
            Parametrization.U1: (b, d),
            Parametrization.U2: (b, q_max),
            Parametrization.U3: (d, q_max),
        }[q.param]
    else:
        q_min = eff.q_min
        q_max = math.ldexp(q_min, 2 ** magnitude_bits(b, q.signed, q.with_zero) - 1)
        latent = {
            Parametrization.P1: (b, q_max),
            Parametrization.P2: (b, q_min),
            Parametrization.P3: (q_min, q_max),
        }[q.param]
    return q.with_latent(latent)


def max_grad_norm_curve(q: Quantizer, bit_range: Sequence[int], x_grid) -> np.ndarray:
    """Rows of (b, max_x ||grad_theta Q(x)||) for each b in ``bit_range``."""
    x_grid = np.asarray(x_grid, dtype=np.float64)
    if x_grid.size == 0:
        raise ValueError("empty x grid")
    rows = []
    for b in bit_range:
        g = backward(x_grid, at_bitwidth(q, int(b))).grad_theta
        rows.append((b, float(np.max(np.hypot(g[0], g[1])))))
    return np.array(rows, dtype=np.float64)


def empirical_hessian(q: Quantizer, samples) -> np.ndarray:
    """Outer-product (Gauss-Newton) Hessian estimate E[g g^T] of the MSE."""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size == 0:
        raise ValueError("empty sample set")
    g = backward(samples, q).grad_theta
    return g @ g.T / samples.size
