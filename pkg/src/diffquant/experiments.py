"""Desk-scale experiments: Gaussian-MSE descent, error surfaces, gradient norms."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .cost import PenaltyConfig, network_memory
from .data import synthetic_classification
from .optim import Parameter, make_optimizer
from .quantizer import (
    Family,
    ParamBounds,
    Parametrization,
    Quantizer,
    QuantizerError,
    forward,
    max_grad_norm_curve,
    project,
    quantize_tensor,
    quantize_tensor_backward,
)
from .training import TrainConfig, TrainLog, build_toy_model, evaluate, network_spec, train

# Search domain shared by the descent runs and the grid-search oracle.
GAUSS_BOUNDS = ParamBounds(
    b_min=2, b_max=16,
    d_min=2.0**-8, d_max=2.0**2,
    qmax_min=2.0**-4, qmax_max=2.0**3,
    qmin_min=2.0**-16, qmin_max=2.0**0,
)
# Power-of-two bitwidths above 8 span more than 2^127 in dynamic range, past
# what float64 represents; b-latent power-of-two runs are capped there.
POW2_GAUSS_BOUNDS = replace(GAUSS_BOUNDS, b_max=8)


def initial_quantizer(param: Parametrization, bounds: ParamBounds | None = None,
                      signed: bool = True, with_zero: bool = False) -> Quantizer:
    """Quantizer at b = 2, d = q_max = 1 (q_min from the b/q_max identity)."""
    param = Parametrization(param)
    if bounds is None:
        bounds = GAUSS_BOUNDS if param.family is Family.UNIFORM else POW2_GAUSS_BOUNDS
    if param.family is Family.UNIFORM:
        latent = {"U1": (2, 1.0), "U2": (2, 1.0), "U3": (1.0, 1.0)}[param.value]
    else:
        n = 2 - int(signed) - int(with_zero)
        q_min = math.ldexp(1.0, -(2**n - 1)) if n >= 1 else 0.5
        latent = {"P1": (2, 1.0), "P2": (2, q_min), "P3": (q_min, 1.0)}[param.value]
    return Quantizer(param, latent, signed=signed, with_zero=with_zero, bounds=bounds)


def quantization_mse(samples: np.ndarray, q: Quantizer) -> float:
    """E[1/2 (Q(x) - x)^2] over the sample set."""
    err = forward(samples, q) - samples
    return float(0.5 * np.mean(err * err))


@dataclass
class DescentRecord:
    step: int
    mse: float
    latent: tuple[float, float]
    b: int
    d: float | None
    q_min: float | None
    q_max: float


def descend_mse(samples: np.ndarray, q: Quantizer, steps: int, lr: float,
                optimizer: str = "adam") -> list[DescentRecord]:
    """Minimise the quantization MSE over the latents with straight-through
    gradients.  Returns ``steps + 1`` records; record ``t`` is the state
    before update ``t`` (the last one is the final state)."""
    latent = Parameter(q.latent, "theta")
    opt = make_optimizer(optimizer, [latent], lr)
    records = []
    for step in range(steps + 1):
        q = q.with_latent(latent.value)
        out, ctx = quantize_tensor(samples, q)
        err = out - samples
        eff = ctx.eff
        records.append(DescentRecord(
            step, float(0.5 * np.mean(err * err)), q.latent, eff.b, eff.d, eff.q_min, eff.q_max,
        ))
        if step == steps:
            break
        _, g = quantize_tensor_backward(err / samples.size, ctx)
        latent.grad = g
        opt.step()
        latent.value = np.array(q.with_latent(latent.value).clipped().latent)
    return records


def uniform_grid_optimum(samples: np.ndarray, d_exponents=range(-8, 3),
                         q_max_values=None, bounds: ParamBounds = GAUSS_BOUNDS):
    """Brute-force minimum of the uniform quantization MSE.

    Returns (mse, d, q_max).  Nodes are scanned in order, first minimum wins.
    """
    if q_max_values is None:
        q_max_values = np.linspace(0.1, 6.0, 591)
    best = (math.inf, None, None)
    for k in d_exponents:
        d = 2.0**k
        for qm in q_max_values:
            # direct clip-then-round, independent of the quantizer module
            a = np.minimum(np.abs(samples), qm)
            qx = np.sign(samples) * d * np.floor(a / d + 0.5)
            mse = float(0.5 * np.mean((qx - samples) ** 2))
            if mse < best[0]:
                best = (mse, d, float(qm))
    return best


def pow2_grid_optimum(samples: np.ndarray, qmin_exponents=range(-16, 1),
                      qmax_exponents=range(-4, 4)):
    """Brute-force minimum of the power-of-two MSE over (q_min, q_max) pairs.

    Returns (mse, q_min, q_max).
    """
    a = np.abs(samples)
    s = np.sign(samples)
    with np.errstate(divide="ignore"):
        k = np.log2(np.where(a > 0, a, 1.0))
    best = (math.inf, None, None)
    for lo in qmin_exponents:
        for hi in qmax_exponents:
            if hi <= lo:
                continue
            levels = np.clip(np.floor(k + 0.5), lo, hi)
            qx = s * 2.0**levels
            mse = float(0.5 * np.mean((qx - samples) ** 2))
            if mse < best[0]:
                best = (mse, 2.0**lo, 2.0**hi)
    return best


# ---------------------------------------------------------------------------
# error surfaces
# ---------------------------------------------------------------------------


def default_axes(param: Parametrization, points: int = 41) -> tuple[np.ndarray, np.ndarray]:
    """Grid axes over the two latents of ``param`` inside its descent bounds."""
    param = Parametrization(param)
    b_max = (GAUSS_BOUNDS if param.family is Family.UNIFORM else POW2_GAUSS_BOUNDS).b_max
    axes = {
        "b": np.arange(2, b_max + 1, dtype=np.float64),
        "d": 2.0 ** np.linspace(-8, 2, points),
        "q_max": np.linspace(0.1, 6.0, points),
        "q_min": 2.0 ** np.linspace(-16, 0, points),
    }
    a, b = param.latent_names
    return axes[a], axes[b]


@dataclass
class Surface:
    param: Parametrization
    axis1: np.ndarray
    axis2: np.ndarray
    mse: np.ndarray  # (len(axis1), len(axis2)), nan where the quantizer is invalid

    def argmin(self) -> tuple[float, float, float]:
        i, j = np.unravel_index(np.nanargmin(self.mse), self.mse.shape)
        return float(self.axis1[i]), float(self.axis2[j]), float(self.mse[i, j])

    def rows(self):
        for i, a in enumerate(self.axis1):
            for j, b in enumerate(self.axis2):
                yield float(a), float(b), float(self.mse[i, j])


def error_surface(samples: np.ndarray, param: Parametrization, axis1, axis2,
                  bounds: ParamBounds | None = None) -> Surface:
    """MSE at every latent node; nodes whose projection is degenerate are nan."""
    axis1 = np.asarray(axis1, dtype=np.float64)
    axis2 = np.asarray(axis2, dtype=np.float64)
    if axis1.size == 0 or axis2.size == 0:
        raise ValueError("surface grid has an empty axis")
    q = initial_quantizer(param, bounds)
    mse = np.full((axis1.size, axis2.size), np.nan)
    for i, a in enumerate(axis1):
        for j, b in enumerate(axis2):
            try:
                mse[i, j] = quantization_mse(samples, q.with_latent((a, b)))
            except QuantizerError:
                pass
    return Surface(Parametrization(param), axis1, axis2, mse)


# ---------------------------------------------------------------------------
# gradient norms
# ---------------------------------------------------------------------------


def gradnorm_reference(param: Parametrization) -> Quantizer:
    """Quantizer whose finest level (d = 1, or q_min = 2^-8) stays fixed over b."""
    param = Parametrization(param)
    if param.family is Family.UNIFORM:
        latent = {"U1": (2, 1.0), "U2": (2, 1.0), "U3": (1.0, 1.0)}[param.value]
        bounds = ParamBounds(b_max=32, d_max=2.0**8, qmax_max=2.0**16)
    else:
        q_min = 2.0**-8
        latent = {"P1": (2, 2 * q_min), "P2": (2, q_min), "P3": (q_min, 2 * q_min)}[param.value]
        bounds = ParamBounds(b_max=32, qmin_min=2.0**-16, qmax_max=2.0**1000)
    return Quantizer(param, latent, bounds=bounds)


def gradnorm_grid(family: Family, bits, points: int = 100_001) -> np.ndarray:
    """x grid covering every quantizer of ``gradnorm_reference`` over ``bits``.

    Uniform: linear on [-2 q_max, 2 q_max] of the largest b.  Power of two:
    symmetric, log-spaced in |x| from q_min/4 to 4 q_max, plus x = 0.
    """
    b_hi = max(bits)
    if Family(family) is Family.UNIFORM:
        lim = 2.0 * (2.0 ** (b_hi - 1) - 1.0)
        return np.linspace(-lim, lim, points)
    hi_exp = -8 + 2 ** (b_hi - 1) - 1 + 2
    half = np.exp2(np.linspace(-10, hi_exp, (points - 1) // 2))
    return np.concatenate([-half[::-1], [0.0], half])


def gradnorm_table(family: Family, bits=range(2, 9), points: int = 100_001):
    """Rows of (parametrization, b, max_x ||grad_theta Q(x)||)."""
    family = Family(family)
    bits = [int(b) for b in bits]
    if not bits or min(bits) < 2:
        raise ValueError(f"bit range must be nonempty with b >= 2, got {bits}")
    grid = gradnorm_grid(family, bits, points)
    params = [p for p in Parametrization if p.family is family]
    rows = []
    for p in params:
        for b, norm in max_grad_norm_curve(gradnorm_reference(p), bits, grid):
            rows.append((p.value, int(b), float(norm)))
    return rows, grid


# ---------------------------------------------------------------------------
# toy classification
# ---------------------------------------------------------------------------

TOY_SAMPLES = 2000
TOY_TRAIN = 1500
TOY_CLASSES = 4
TOY_DIM = 16


def toy_task(seed: int):
    """(train, validation) split of the synthetic classification set."""
    data = synthetic_classification(seed, TOY_SAMPLES, classes=TOY_CLASSES, dim=TOY_DIM)
    return data.split(TOY_TRAIN)


@dataclass
class ToyResult:
    param: str
    seed: int
    val_loss: float
    val_accuracy: float
    weight_bits: list[int]
    s_w_bits: int
    s_w_initial_bits: int
    budget_bits: float | None
    log: TrainLog


def run_toy(cfg: TrainConfig, budget_fraction: float | None = None) -> ToyResult:
    """Train the toy classifier under ``cfg``.

    With ``budget_fraction`` the weight budget is that fraction of the
    initial (``cfg.init_bits``-wide) weight size, replacing any budgets
    already in ``cfg.penalty`` except for its lambdas and unit.
    """
    train_set, val_set = toy_task(cfg.seed)
    net = build_toy_model(TOY_DIM, TOY_CLASSES, cfg.param, hidden=cfg.hidden,
                          seed=cfg.seed, bits=cfg.init_bits)
    spec = network_spec(net)
    s0 = network_memory(spec).s_w
    budget = None
    if budget_fraction is not None:
        budget = budget_fraction * s0
        base = cfg.penalty or PenaltyConfig()
        cfg = replace(cfg, penalty=PenaltyConfig(S0_w=budget, lambdas=base.lambdas,
                                                 unit=base.unit, surrogate=base.surrogate))
    log = train(net, train_set, cfg)
    ev = evaluate(net, val_set)
    mem = network_memory(spec)
    return ToyResult(cfg.param, cfg.seed, ev.loss, ev.accuracy, [b for b, _ in mem.bits],
                     mem.s_w, s0, budget, log)
