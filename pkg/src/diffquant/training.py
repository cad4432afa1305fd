"""Memory-constrained quantization-aware training of small networks.

One step minimises ``J + sum_j lambda_j * max(0, g_j)^2`` jointly over the
weights, biases and all quantizer latents with a single optimizer and a single
learning rate.  Memory bookkeeping in the log always uses the integer
bitwidths of the projected quantizers.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cost import (
    BITS_PER_KIB,
    LayerSpec,
    NetworkSpec,
    PenaltyConfig,
    auto_lambda,
    network_memory,
    penalty,
)
from .data import LabeledDataset, make_rng
from .nn import LearnableQuantizer, Network, QuantDense, ReLU, softmax_cross_entropy
from .optim import LrSchedule, lr_at, make_optimizer
from .quantizer import (
    Family,
    ParamBounds,
    Parametrization,
    Quantizer,
    magnitude_bits,
    project,
)

DIVERGENCE_LOSS = 1e6
DIVERGENCE_PATIENCE = 5
RANDOM_INIT_STEP = 2.0**-3


class DivergenceError(RuntimeError):
    """Loss stayed non-finite or above the divergence threshold."""

    def __init__(self, step: int, loss: float, log: "TrainLog"):
        super().__init__(
            f"training diverged at step {step}: loss {loss} for "
            f"{DIVERGENCE_PATIENCE} consecutive steps"
        )
        self.step, self.loss, self.log = step, loss, log


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    milestones: tuple[int, ...] = ()
    lr_factor: float = 0.1
    param: str = "U3"
    penalty: PenaltyConfig | None = None
    auto_lambda: bool = False
    seed: int = 0
    init_bits: int = 4
    hidden: tuple[int, ...] = (64, 64)

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0:
            raise ValueError("steps must be >= 0 and batch_size > 0")
        if self.lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.init_bits < 2:
            raise ValueError(f"initial bitwidth must be >= 2, got {self.init_bits}")
        object.__setattr__(self, "param", Parametrization(self.param).value)
        object.__setattr__(self, "milestones", tuple(self.milestones))
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if isinstance(self.penalty, dict):
            p = dict(self.penalty)
            p["lambdas"] = tuple(p.get("lambdas", (0.1, 0.1, 0.1)))
            object.__setattr__(self, "penalty", PenaltyConfig(**p))

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.milestones, self.lr_factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["hidden"] = list(self.hidden)
        if self.penalty is not None:
            d["penalty"]["lambdas"] = list(self.penalty.lambdas)
        return d


# ---------------------------------------------------------------------------
# model construction + initialization
# ---------------------------------------------------------------------------


def initial_latent(param: Parametrization, bits: int, signed: bool, with_zero: bool,
                   step: float | None = None, q_max: float | None = None) -> tuple[float, float]:
    """Latents that project to bitwidth ``bits``.

    Uniform quantizers are anchored at stepsize ``step`` with
    q_max = (2^n - 1) * step; power-of-two ones at ``q_max`` with
    q_min = q_max * 2^-(2^n - 1), n being the magnitude bits.
    """
    param = Parametrization(param)
    n = magnitude_bits(bits, signed, with_zero)
    if param.family is Family.UNIFORM:
        qm = (2**n - 1) * step
        return {"U1": (bits, step), "U2": (bits, qm), "U3": (step, qm)}[param.value]
    qmin = math.ldexp(q_max, -(2**n - 1))
    return {"P1": (bits, q_max), "P2": (bits, qmin), "P3": (qmin, q_max)}[param.value]


def pretrained_step(weights: np.ndarray, bits: int = 4) -> float:
    """2^floor(log2(max|W| / (2^(b-1) - 1))), or 2^-3 for an all-zero tensor."""
    peak = float(np.max(np.abs(weights))) if np.size(weights) else 0.0
    if peak == 0.0 or not math.isfinite(peak):
        return RANDOM_INIT_STEP
    return 2.0 ** math.floor(math.log2(peak / (2 ** (bits - 1) - 1)))


def init_quantizers(net: Network, pretrained: bool = False, bits: int = 4) -> None:
    """Reset every quantizer of ``net`` to bitwidth ``bits``.

    Random init uses stepsize 2^-3 everywhere (q_max = 1 for power-of-two);
    pretrained weight quantizers derive the stepsize (or q_max) from max|W|.
    """
    for layer in net.quantized_layers():
        for lq, tensor in ((layer.weight_q, layer.W.value), (layer.act_q, None)):
            if lq is None:
                continue
            t = lq.template
            if t.family is Family.UNIFORM:
                step = pretrained_step(tensor, bits) if pretrained and tensor is not None \
                    else RANDOM_INIT_STEP
                latent = initial_latent(t.param, bits, t.signed, t.with_zero, step=step)
            else:
                peak = float(np.max(np.abs(tensor))) if pretrained and tensor is not None else 0.0
                qm = 2.0 ** round(math.log2(peak)) if peak > 0 else 1.0
                latent = initial_latent(t.param, bits, t.signed, t.with_zero, q_max=qm)
            lq.latent.value = np.array(latent, dtype=np.float64)
            lq.latent.zero_grad()


def build_toy_model(in_dim: int, classes: int, param: str = "U3", hidden=(64, 64),
                    seed: int = 0, bits: int = 4, bounds: ParamBounds | None = None) -> Network:
    """Fully-connected ReLU classifier with every layer quantized.

    Each layer quantizes its own input: the first one with a signed quantizer
    (raw features), the others unsigned since they follow a ReLU.  Power-of-two
    activation quantizers reserve a code for zero.
    """
    param = Parametrization(param)
    pow2 = param.family is Family.POW2
    bounds = bounds or ParamBounds()
    rng = make_rng(seed)
    sizes = [in_dim, *hidden, classes]
    layers = []
    for i, (m_in, m_out) in enumerate(zip(sizes, sizes[1:])):
        signed_x = i == 0
        wq = LearnableQuantizer(
            Quantizer(param, (0.0, 0.0), signed=True, bounds=bounds), f"fc{i}.theta_w")
        xq = LearnableQuantizer(
            Quantizer(param, (0.0, 0.0), signed=signed_x, with_zero=pow2 and not signed_x,
                      bounds=bounds), f"fc{i}.theta_x")
        layers.append(QuantDense(m_in, m_out, wq, xq, rng=rng, name=f"fc{i}"))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    net = Network(layers, (in_dim,))
    init_quantizers(net, pretrained=False, bits=bits)
    return net


def network_spec(net: Network, name: str = "model") -> NetworkSpec:
    """Cost-model view of ``net`` with live quantizer references.

    Layer l's output is stored at the bitwidth of the quantizer that reads
    it, i.e. the next quantized layer's input quantizer; the network output
    is not quantized and counts at 32 bits.
    """
    qlayers = net.quantized_layers()
    shapes = dict(zip(map(id, net.layers), net.shapes()))
    specs, bits_w, bits_x = [], [], []
    for i, layer in enumerate(qlayers):
        out_shape = shapes[id(layer)]
        if isinstance(layer, QuantDense):
            spec = LayerSpec("dense", layer.out_units, layer.in_units, name=layer.name)
        else:
            spec = LayerSpec("conv2d", layer.out_channels, layer.in_channels,
                             spatial=out_shape[1], kernel=layer.kernel, stride=layer.stride,
                             name=layer.name)
        specs.append(spec)
        bits_w.append(layer.weight_q if layer.weight_q is not None else 32)
        nxt = qlayers[i + 1].act_q if i + 1 < len(qlayers) else None
        bits_x.append(nxt if nxt is not None else 32)
    return NetworkSpec(name, specs, bits_w, bits_x)


# ---------------------------------------------------------------------------
# logging
# ---------------------------------------------------------------------------

LOG_COLUMNS = ("step", "lr", "loss", "penalty", "g_w", "g_x_sum", "g_x_max",
               "S_w_kib", "S_x_sum_kib", "S_x_max_kib")
QUANT_FIELDS = ("b", "d", "q_min", "q_max")


@dataclass
class StepRecord:
    step: int
    lr: float
    loss: float
    penalty: float
    g: tuple[float, float, float]
    memory_kib: tuple[float, float, float]
    quantizers: dict[str, tuple]


@dataclass
class TrainLog:
    config: dict
    records: list[StepRecord] = field(default_factory=list)
    lambdas: tuple[float, float, float] | None = None
    summary: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def columns(self) -> list[str]:
        cols = list(LOG_COLUMNS)
        if self.records:
            for name in self.records[0].quantizers:
                cols += [f"{name}.{f}" for f in QUANT_FIELDS]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for r in self.records:
            row = [r.step, _fmt(r.lr), _fmt(r.loss), _fmt(r.penalty), *map(_fmt, r.g),
                   *map(_fmt, r.memory_kib)]
            for vals in r.quantizers.values():
                row += [_fmt(v) for v in vals]
            w.writerow(row)
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {"config": self.config, "lambdas": list(self.lambdas) if self.lambdas else None,
               "steps_run": len(self.records), **self.summary}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_log_csv(text: str) -> list[dict]:
    """Parse ``TrainLog.to_csv`` output back into typed dict rows."""
    rows = []
    for raw in csv.DictReader(io.StringIO(text)):
        row = {}
        for key, val in raw.items():
            if val == "":
                row[key] = None
            elif key == "step" or key.endswith(".b"):
                row[key] = int(val)
            else:
                row[key] = float(val)
        rows.append(row)
    return rows


def _quantizer_state(net: Network) -> dict[str, tuple]:
    out = {}
    for lq in net.quantizers():
        e = project(lq.quantizer)
        out[lq.latent.name] = (e.b, e.d, e.q_min, e.q_max)
    return out


# ---------------------------------------------------------------------------
# training + evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Evaluation:
    loss: float
    accuracy: float


def evaluate(net: Network, data: LabeledDataset, batch_size: int = 1024) -> Evaluation:
    total_loss, correct = 0.0, 0
    for start in range(0, len(data), batch_size):
        x = data.features[start:start + batch_size]
        y = data.labels[start:start + batch_size]
        logits = net.forward(x)
        total_loss += softmax_cross_entropy(logits, y).value * len(y)
        correct += int(np.sum(np.argmax(logits, axis=1) == y))
    net._ran_forward = False
    return Evaluation(total_loss / len(data), correct / len(data))


def train(net: Network, data: LabeledDataset, cfg: TrainConfig) -> TrainLog:
    """Run ``cfg.steps`` minibatch steps in place on ``net``.

    Minibatches are drawn with replacement from a Philox stream seeded by
    ``cfg.seed``; a batch size of at least the dataset size means full-batch
    steps.  Raises ``DivergenceError`` once the loss has been
    non-finite or above 1e6 for five consecutive steps.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    rng = make_rng(cfg.seed)
    params = net.parameters()
    opt = make_optimizer(cfg.optimizer, params, cfg.lr, cfg.momentum)
    schedule = cfg.schedule
    spec = network_spec(net)
    pcfg = cfg.penalty
    log = TrainLog(cfg.to_dict())
    bad_steps = 0

    for step in range(cfg.steps):
        opt.lr = lr_at(schedule, step)
        if cfg.batch_size >= len(data):
            idx = np.arange(len(data))
        else:
            idx = rng.integers(0, len(data), cfg.batch_size)
        net.zero_grad()
        logits = net.forward(data.features[idx])
        loss = softmax_cross_entropy(logits, data.labels[idx])

        if pcfg is not None and cfg.auto_lambda and step == 0:
            g0 = penalty(spec, pcfg)
            g0 = g0.g_int if pcfg.surrogate == "ste" else g0.g
            pcfg = replace(pcfg, lambdas=auto_lambda(loss.value, g0))
        if pcfg is not None:
            pres = penalty(spec, pcfg, accumulate=math.isfinite(loss.value))
            pen, g = pres.value, tuple(pres.g_int)
        else:
            pen, g = 0.0, (math.nan, math.nan, math.nan)

        mem = network_memory(spec)
        log.records.append(StepRecord(
            step, opt.lr, loss.value, pen, g,
            (mem.s_w / BITS_PER_KIB, mem.s_x_sum / BITS_PER_KIB, mem.s_x_max / BITS_PER_KIB),
            _quantizer_state(net),
        ))

        total = loss.value + pen
        if not math.isfinite(total) or total > DIVERGENCE_LOSS:
            bad_steps += 1
            net._ran_forward = False
            if bad_steps >= DIVERGENCE_PATIENCE:
                raise DivergenceError(step, total, log)
            continue
        bad_steps = 0
        net.backward(loss)
        opt.step()
        net.clip_quantizers_()

    log.lambdas = pcfg.lambdas if pcfg is not None else None
    mem = network_memory(spec)
    log.summary = {
        "final_memory_kib": {
            "weights": mem.s_w / BITS_PER_KIB,
            "activations_sum": mem.s_x_sum / BITS_PER_KIB,
            "activations_max": mem.s_x_max / BITS_PER_KIB,
        },
        "final_weight_bits": [b for b, _ in mem.bits],
    }
    return log


def bitwidth_report(net: Network) -> list[dict]:
    """Per-layer bitwidths and memory, one record per quantized layer."""
    spec = network_spec(net)
    mem = network_memory(spec)
    rows = []
    for i, (layer, s, cost, (bw, bx)) in enumerate(zip(net.quantized_layers(), spec.layers,
                                                       mem.layers, mem.bits)):
        rows.append({
            "layer": i, "name": layer.name, "kind": s.kind, "b_w": bw, "b_x": bx,
            "S_w_bits": cost.s_w, "S_x_bits": cost.s_x,
        })
    return rows


REPORT_COLUMNS = ("layer", "name", "kind", "b_w", "b_x", "S_w_bits", "S_x_bits")


def report_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()
