"""Layer cost model, network memory totals and the memory-constraint penalty.

Sizes are in bits unless stated otherwise; KiB = 2**10 bytes.

Per-layer costs (M = output channels/units, M' = input channels/units,
N = output feature-map side, K = kernel side, b_w / b_x = bitwidths):

    dense:   C_mul = M*M'          S_w = M*(M' + 1)*b_w        S_x = M*b_x
    conv2d:  C_mul = M*M'*N^2*K^2  S_w = M*(M'*K^2 + 1)*b_w    S_x = M*N^2*b_x

C_add equals C_mul for uniform quantization; power-of-two layers replace
every multiplication by an exponent addition, giving C_mul = 0 and twice the
additions.  The ``+ 1`` bias term is dropped for layers without bias.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .quantizer import (
    LN2,
    EffectiveParams,
    Family,
    Parametrization,
    Quantizer,
    bitwidth_expression,
    infer_bitwidth,
    project,
)

BITS_PER_KIB = 8 * 1024
UNIT_BITS = {"bit": 1, "B": 8, "KiB": BITS_PER_KIB, "MiB": 8 * 1024 * 1024}
LAYER_KINDS = ("dense", "conv2d", "elementwise")


class NetSpecError(ValueError):
    """Malformed network specification."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_ch: int
    in_ch: int = 0
    spatial: int | None = None
    kernel: int | None = None
    bias: bool = True
    stride: int = 1
    name: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise NetSpecError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv2d" and (self.spatial is None or self.kernel is None):
            raise NetSpecError(f"conv2d layer {self.name!r} needs spatial and kernel")
        if self.kind == "elementwise" and self.spatial is None:
            raise NetSpecError(f"elementwise layer {self.name!r} needs spatial")
        for attr in ("out_ch", "in_ch", "spatial", "kernel"):
            v = getattr(self, attr)
            if v is not None and (v < 0 or (attr != "in_ch" and v == 0)):
                raise NetSpecError(f"layer {self.name!r}: {attr} must be positive, got {v}")
        if self.kind != "elementwise" and self.in_ch <= 0:
            raise NetSpecError(f"layer {self.name!r}: in_ch must be positive")

    @property
    def n_weights(self) -> int:
        """Stored weight + bias count."""
        if self.kind == "dense":
            return self.out_ch * (self.in_ch + int(self.bias))
        if self.kind == "conv2d":
            return self.out_ch * (self.in_ch * self.kernel**2 + int(self.bias))
        return 0

    @property
    def n_activations(self) -> int:
        if self.kind == "dense":
            return self.out_ch
        return self.out_ch * self.spatial**2


@dataclass(frozen=True)
class LayerCost:
    c_mul: int
    c_add: int
    s_w: int
    s_x: int


def layer_costs(spec: LayerSpec, b_w: int, b_x: int, pow2: bool = False) -> LayerCost:
    if spec.kind == "dense":
        macs = spec.out_ch * spec.in_ch
    elif spec.kind == "conv2d":
        macs = spec.out_ch * spec.in_ch * spec.spatial**2 * spec.kernel**2
    else:
        # residual adds, pooling: one addition per output element, no weights
        return LayerCost(0, spec.n_activations, 0, spec.n_activations * b_x)
    c_mul, c_add = (0, 2 * macs) if pow2 else (macs, macs)
    return LayerCost(c_mul, c_add, spec.n_weights * b_w, spec.n_activations * b_x)


BitSource = Union[int, "LearnableQuantizerLike"]


def resolve_bits(source) -> int:
    """Integer bitwidth of a fixed int or a live quantizer reference."""
    if isinstance(source, (int, np.integer)):
        return int(source)
    q = _as_quantizer(source)
    return infer_bitwidth(project(q), q.family, q.signed, q.with_zero)


def _as_quantizer(source) -> Quantizer:
    return source if isinstance(source, Quantizer) else source.quantizer


def _is_pow2(source) -> bool:
    if isinstance(source, (int, np.integer)):
        return False
    return _as_quantizer(source).family is Family.POW2


@dataclass
class NetworkSpec:
    name: str
    layers: list[LayerSpec]
    bits_w: list = field(default_factory=list)
    bits_x: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.layers)
        if not self.bits_w:
            self.bits_w = [32] * n
        if not self.bits_x:
            self.bits_x = [32] * n
        if len(self.bits_w) != n or len(self.bits_x) != n:
            raise NetSpecError("need one weight and one activation bit source per layer")

    def with_bits(self, b_w: int | None = None, b_x: int | None = None) -> "NetworkSpec":
        n = len(self.layers)
        return NetworkSpec(
            self.name, list(self.layers),
            [b_w] * n if b_w is not None else list(self.bits_w),
            [b_x] * n if b_x is not None else list(self.bits_x),
        )


@dataclass
class MemoryReport:
    s_w: int
    s_x_sum: int
    s_x_max: int
    argmax: int
    c_mul: int
    c_add: int
    layers: list[LayerCost]
    bits: list[tuple[int, int]]

    def as_dict(self, unit: str = "KiB") -> dict:
        scale = UNIT_BITS[unit]
        return {
            "unit": unit,
            "weights": self.s_w / scale,
            "activations_sum": self.s_x_sum / scale,
            "activations_max": self.s_x_max / scale,
            "activations_argmax": self.argmax,
            "c_mul": self.c_mul,
            "c_add": self.c_add,
            "layers": [
                {"index": i, "b_w": bw, "b_x": bx, "weights": c.s_w / scale,
                 "activations": c.s_x / scale, "c_mul": c.c_mul, "c_add": c.c_add}
                for i, (c, (bw, bx)) in enumerate(zip(self.layers, self.bits))
            ],
        }


def network_memory(net: NetworkSpec) -> MemoryReport:
    if not net.layers:
        raise NetSpecError(f"network {net.name!r} has no layers")
    costs, bits = [], []
    for spec, sw, sx in zip(net.layers, net.bits_w, net.bits_x):
        bw, bx = resolve_bits(sw), resolve_bits(sx)
        costs.append(layer_costs(spec, bw, bx, pow2=_is_pow2(sw)))
        bits.append((bw, bx))
    s_x = [c.s_x for c in costs]
    argmax = int(np.argmax(s_x))  # first maximum wins
    return MemoryReport(
        s_w=sum(c.s_w for c in costs),
        s_x_sum=sum(s_x),
        s_x_max=s_x[argmax],
        argmax=argmax,
        c_mul=sum(c.c_mul for c in costs),
        c_add=sum(c.c_add for c in costs),
        layers=costs,
        bits=bits,
    )


# ---------------------------------------------------------------------------
# network spec files
# ---------------------------------------------------------------------------

_FIELD_ALIASES = {
    "type": "kind",
    "out_channels": "out_ch", "out_units": "out_ch", "out": "out_ch",
    "in_channels": "in_ch", "in_units": "in_ch", "in": "in_ch",
    "channels": "out_ch", "units": "out_ch",
}
_INT_FIELDS = {"out_ch", "in_ch", "spatial", "kernel", "stride", "bits_w", "bits_x"}
_KNOWN = {"kind", "out_ch", "in_ch", "spatial", "kernel", "stride", "bias", "name",
          "bits_w", "bits_x"}


def _layer_from_fields(fields: dict, where: str) -> tuple[LayerSpec, int | None, int | None]:
    norm = {}
    for key, value in fields.items():
        key = _FIELD_ALIASES.get(key, key)
        if key not in _KNOWN:
            raise NetSpecError(f"{where}: unknown field {key!r}")
        norm[key] = value
    if "kind" not in norm:
        raise NetSpecError(f"{where}: missing field 'type'")
    norm["kind"] = str(norm["kind"]).lower()
    for key in _INT_FIELDS & norm.keys():
        try:
            norm[key] = int(norm[key])
        except (TypeError, ValueError):
            raise NetSpecError(f"{where}: field {key!r} must be an integer, got {norm[key]!r}")
    if "bias" in norm and isinstance(norm["bias"], str):
        if norm["bias"].lower() not in ("true", "false", "1", "0"):
            raise NetSpecError(f"{where}: field 'bias' must be true/false, got {norm['bias']!r}")
        norm["bias"] = norm["bias"].lower() in ("true", "1")
    bits_w, bits_x = norm.pop("bits_w", None), norm.pop("bits_x", None)
    if "out_ch" not in norm:
        raise NetSpecError(f"{where}: missing field 'out_channels'/'out_units'")
    try:
        return LayerSpec(**norm), bits_w, bits_x
    except NetSpecError as exc:
        raise NetSpecError(f"{where}: {exc}") from None


def parse_network_spec(text: str, name: str = "network") -> NetworkSpec:
    """Parse a JSON document or the line-oriented format.

    Line format: one layer per line, ``<type> key=value ...``; ``#`` starts a
    comment; an optional ``name <text>`` line names the network.
    """
    stripped = text.strip()
    entries = []
    if stripped.startswith("{") or stripped.startswith("["):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise NetSpecError(f"line {exc.lineno}: invalid JSON ({exc.msg})") from None
        if isinstance(doc, dict):
            name = doc.get("name", name)
            layers = doc.get("layers")
        else:
            layers = doc
        if not isinstance(layers, list):
            raise NetSpecError("JSON spec needs a 'layers' list")
        for i, fields in enumerate(layers):
            if not isinstance(fields, dict):
                raise NetSpecError(f"layer {i}: expected an object")
            entries.append(_layer_from_fields(fields, f"layer {i}"))
    else:
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            head, *rest = line.split()
            if head == "name":
                name = " ".join(rest)
                continue
            fields = {"type": head}
            for token in rest:
                key, sep, value = token.partition("=")
                if not sep:
                    raise NetSpecError(f"line {lineno}: expected key=value, got {token!r}")
                fields[key] = value
            entries.append(_layer_from_fields(fields, f"line {lineno}"))
    if not entries:
        raise NetSpecError("network spec contains no layers")
    layers = [e[0] for e in entries]
    bits_w = [e[1] if e[1] is not None else 32 for e in entries]
    bits_x = [e[2] if e[2] is not None else 32 for e in entries]
    return NetworkSpec(name, layers, bits_w, bits_x)


def load_network_spec(path) -> NetworkSpec:
    path = Path(path)
    return parse_network_spec(path.read_text(), name=path.stem)


def builtin_spec_path(name: str = "resnet20") -> Path:
    return Path(str(resources.files("diffquant") / "specs" / f"{name}.json"))


# ---------------------------------------------------------------------------
# smooth bitwidth + penalty
# ---------------------------------------------------------------------------


def smooth_bitwidth(eff: EffectiveParams, family, signed: bool = True,
                    with_zero: bool = False) -> float:
    """Bitwidth formula without the outer ceiling, for penalty gradients."""
    return bitwidth_expression(eff, family, signed, with_zero)


def smooth_bitwidth_grad(q: Quantizer) -> tuple[float, np.ndarray]:
    """(smooth bitwidth, d bits / d latents) with identity STE through projection.

    For parametrizations that carry b as a latent, the bitwidth is that
    (rounded) latent and its gradient is 1 w.r.t. b.
    """
    eff = project(q)
    if q.param.learns_bitwidth:
        return float(eff.b), np.array([1.0, 0.0])
    if q.param is Parametrization.U3:
        d, qm = eff.d, eff.q_max
        bits = smooth_bitwidth(eff, Family.UNIFORM, q.signed)
        denom = (qm + d) * LN2
        return bits, np.array([-qm / (d * denom), 1.0 / denom])
    qmin, qm = eff.q_min, eff.q_max
    bits = smooth_bitwidth(eff, Family.POW2, q.signed, q.with_zero)
    inner = (math.log2(qm / qmin) + 1.0) * LN2 * LN2
    return bits, np.array([-1.0 / (qmin * inner), 1.0 / (qm * inner)])


@dataclass(frozen=True)
class PenaltyConfig:
    """Budgets (bits) and weights for the three memory constraints.

    A budget of None disables its constraint.  ``unit`` sets the size unit in
    which the violations g_j are measured, which fixes what a given lambda
    means (lambda = 0.1 "for sizes in KiB").

    ``surrogate`` selects how the violations entering the penalty value are
    measured.  "ste" (default) uses the integer bitwidths, i.e. the memory the
    quantized network really occupies, and passes gradients through the
    ceiling as identity onto the smooth bitwidth.  "smooth" uses the smooth
    bitwidth for the value as well, which makes the penalty differentiable.
    """

    S0_w: float | None = None
    S0_x: float | None = None
    Shat0_x: float | None = None
    lambdas: tuple[float, float, float] = (0.1, 0.1, 0.1)
    unit: str = "KiB"
    surrogate: str = "ste"

    def __post_init__(self):
        for name in ("S0_w", "S0_x", "Shat0_x"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be positive, got {v}")
        if len(self.lambdas) != 3 or any(l < 0 for l in self.lambdas):
            raise ValueError(f"need three nonnegative lambdas, got {self.lambdas}")
        if self.unit not in UNIT_BITS:
            raise ValueError(f"unit must be one of {sorted(UNIT_BITS)}, got {self.unit!r}")
        if self.surrogate not in ("ste", "smooth"):
            raise ValueError(f"surrogate must be 'ste' or 'smooth', got {self.surrogate!r}")

    @property
    def budgets(self) -> tuple:
        return (self.S0_w, self.S0_x, self.Shat0_x)

    @property
    def scale(self) -> int:
        return UNIT_BITS[self.unit]


@dataclass
class PenaltyResult:
    value: float
    g: np.ndarray          # smooth violations in cfg.unit (nan if disabled)
    g_int: np.ndarray      # violations from integer bitwidths
    grads: dict            # id(bit source) -> gradient w.r.t. its latents
    terms: np.ndarray      # per-constraint contributions


def _smooth_bits(source):
    if isinstance(source, (int, np.integer)):
        return float(source), None
    return smooth_bitwidth_grad(_as_quantizer(source))


def penalty(net: NetworkSpec, cfg: PenaltyConfig, accumulate: bool = False) -> PenaltyResult:
    """sum_j lambda_j * max(0, g_j)^2 over the enabled constraints.

    g_1 = S_w - S0_w, g_2 = sum_l S_x,l - S0_x, g_3 = max_l S_x,l - Shat0_x,
    all in ``cfg.unit``.  Gradients always run through the smooth bitwidths;
    the max constraint routes its gradient to the first argmax layer only.
    With ``accumulate`` the gradients are added to the live quantizers'
    latent ``.grad``.
    """
    scale = cfg.scale
    budgets = np.array([b / scale if b is not None else np.nan for b in cfg.budgets])
    w = [(_smooth_bits(s), spec.n_weights, s) for spec, s in zip(net.layers, net.bits_w)]
    x = [(_smooth_bits(s), spec.n_activations, s) for spec, s in zip(net.layers, net.bits_x)]

    s_w = sum(bits * count for (bits, _), count, _ in w) / scale
    s_x_layers = np.array([bits * count for (bits, _), count, _ in x]) / scale
    smooth_arg = int(np.argmax(s_x_layers))
    g = np.array([s_w, s_x_layers.sum(), s_x_layers[smooth_arg]]) - budgets

    report = network_memory(net)
    g_int = np.array([report.s_w, report.s_x_sum, report.s_x_max]) / scale - budgets

    if cfg.surrogate == "smooth":
        active, arg = g, smooth_arg
    else:
        active, arg = g_int, report.argmax

    terms = np.zeros(3)
    grads: dict = {}
    sources: dict = {}

    def add(source, grad):
        key = id(source)
        sources[key] = source
        grads[key] = grads.get(key, 0.0) + grad

    for j, budget in enumerate(cfg.budgets):
        if budget is None or active[j] <= 0:
            continue
        lam = cfg.lambdas[j]
        terms[j] = lam * active[j] ** 2
        coef = 2.0 * lam * active[j] / scale
        members = w if j == 0 else (x if j == 1 else [x[arg]])
        for (_, dbits), count, src in members:
            if dbits is not None:
                add(src, coef * count * dbits)

    if accumulate:
        for key, grad in grads.items():
            latent = sources[key].latent
            latent.grad = latent.grad + grad
    return PenaltyResult(float(terms.sum()), g, g_int, grads, terms)


def auto_lambda(initial_loss: float, initial_g: Sequence[float], eps: float = 1e-12) -> tuple:
    """Weights that make each violated penalty term equal the initial loss."""
    if not math.isfinite(initial_loss):
        raise ValueError(f"initial loss must be finite, got {initial_loss}")
    out = []
    for gj in initial_g:
        if gj is not None and math.isfinite(gj) and gj > 0:
            out.append(initial_loss / max(gj, eps) ** 2)
        else:
            out.append(0.0)
    return tuple(out)


def parse_size(text: str, reference_bits: float | None = None) -> float:
    """Parse a memory size into bits.

    Accepts a plain number (bits) or a suffix: ``b``/``bit``, ``B``, ``KiB``/``KB``,
    ``MiB``/``MB``; ``NN%`` is a percentage of ``reference_bits``.
    """
    m = re.fullmatch(r"\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([A-Za-z%]*)\s*", str(text))
    if not m:
        raise ValueError(f"cannot parse size {text!r}")
    value, suffix = float(m.group(1)), m.group(2)
    if suffix == "%":
        if reference_bits is None:
            raise ValueError(f"percentage size {text!r} needs a reference size")
        return value / 100.0 * reference_bits
    table = {"": 1, "b": 1, "bit": 1, "bits": 1, "B": 8, "KiB": BITS_PER_KIB, "KB": BITS_PER_KIB,
             "kB": BITS_PER_KIB, "MiB": 8 * 1024**2, "MB": 8 * 1024**2}
    if suffix not in table:
        raise ValueError(f"unknown size suffix {suffix!r} in {text!r}")
    return value * table[suffix]
