"""Command-line experiment runners.

Every subcommand writes its outputs plus a ``manifest.json`` into ``--out``.
``diffquant rerun DIR/manifest.json`` re-executes the recorded configuration
and reproduces the same bytes.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from .cost import (
    BITS_PER_KIB,
    NetSpecError,
    PenaltyConfig,
    builtin_spec_path,
    load_network_spec,
    network_memory,
    parse_size,
)
from .data import DataError, LabeledDataset, data_dir, gaussian_samples, read_cifar10_binary
from .experiments import (
    default_axes,
    descend_mse,
    error_surface,
    gradnorm_table,
    initial_quantizer,
    pow2_grid_optimum,
    toy_task,
    uniform_grid_optimum,
)
from .quantizer import Family, Parametrization, QuantizerError
from .training import (
    DivergenceError,
    TrainConfig,
    bitwidth_report,
    build_toy_model,
    evaluate,
    network_spec,
    report_to_csv,
    train,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3
MANIFEST_SCHEMA = 1
PARAMS = [p.value for p in Parametrization]


class CliConfigError(ValueError):
    pass


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _f(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_f(v) if not isinstance(v, str) else v for v in row])
    return buf.getvalue()


def _json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# subcommands: each takes the resolved config and returns {filename: text}
# ---------------------------------------------------------------------------


def run_gauss_mse(cfg: dict) -> dict[str, str]:
    samples = gaussian_samples(cfg["seed"], cfg["samples"]).samples
    q = initial_quantizer(cfg["param"])
    records = descend_mse(samples, q, cfg["steps"], cfg["lr"], cfg["optimizer"])
    rows = [(r.step, r.mse, r.latent[0], r.latent[1], r.b, r.d, r.q_min, r.q_max)
            for r in records]
    if q.family is Family.UNIFORM:
        best = uniform_grid_optimum(samples)
        optimum = {"mse": best[0], "d": best[1], "q_max": best[2]}
    else:
        best = pow2_grid_optimum(samples)
        optimum = {"mse": best[0], "q_min": best[1], "q_max": best[2]}
    summary = {"final_mse": records[-1].mse, "grid_optimum": optimum,
               "ratio_to_optimum": records[-1].mse / optimum["mse"]}
    return {
        "gauss_mse.csv": _csv(("step", "mse", "theta1", "theta2", "b", "d", "q_min", "q_max"),
                              rows),
        "summary.json": _json(summary),
    }


def run_surface(cfg: dict) -> dict[str, str]:
    samples = gaussian_samples(cfg["seed"], cfg["samples"]).samples
    param = Parametrization(cfg["param"])
    axis1, axis2 = default_axes(param, cfg["points"])
    surf = error_surface(samples, param, axis1, axis2)
    path = descend_mse(samples, initial_quantizer(param), cfg["steps"], cfg["lr"],
                       cfg["optimizer"])
    names = param.latent_names
    a1, a2, m = surf.argmin()
    return {
        "surface.csv": _csv((names[0], names[1], "mse"), surf.rows()),
        "path.csv": _csv(("step", names[0], names[1], "mse"),
                         ((r.step, r.latent[0], r.latent[1], r.mse) for r in path)),
        "summary.json": _json({"grid_min": {names[0]: a1, names[1]: a2, "mse": m},
                               "path_end_mse": path[-1].mse}),
    }


def run_gradnorm(cfg: dict) -> dict[str, str]:
    bits = range(cfg["bits_min"], cfg["bits_max"] + 1)
    rows, grid = gradnorm_table(cfg["family"], bits, cfg["points"])
    summary = {"x_grid": {"points": int(grid.size), "min": float(grid.min()),
                          "max": float(grid.max()),
                          "spacing": "linear" if cfg["family"] == "uniform" else "log"}}
    return {"gradnorm.csv": _csv(("param", "b", "max_norm"), rows),
            "summary.json": _json(summary)}


def run_memcalc(cfg: dict) -> dict[str, str]:
    path = cfg["spec"] or str(builtin_spec_path("resnet20"))
    net = load_network_spec(path)
    net = net.with_bits(cfg["bits_w"], cfg["bits_x"])
    report = network_memory(net).as_dict(cfg["unit"])
    for row, spec in zip(report["layers"], net.layers):
        row["name"], row["kind"] = spec.name, spec.kind
    report["network"] = net.name
    return {"memory.json": _json(report)}


def _load_dataset(cfg: dict):
    if cfg["dataset"] == "synthetic":
        return toy_task(cfg["seed"])
    root = data_dir(cfg["data_dir"])
    if root is None:
        raise CliConfigError("cifar10 needs --data-dir or the DATA_DIR environment variable")
    train_set = read_cifar10_binary(root / "data_batch_1.bin")
    val_set = read_cifar10_binary(root / "test_batch.bin")
    return tuple(LabeledDataset(d.features.reshape(len(d), -1), d.labels, d.classes)
                 for d in (train_set, val_set))


def _penalty_config(cfg: dict, initial_sw: float, initial_sx_sum: float,
                    initial_sx_max: float) -> PenaltyConfig | None:
    budgets = [
        parse_size(cfg["budget_w"], initial_sw) if cfg["budget_w"] else None,
        parse_size(cfg["budget_act_sum"], initial_sx_sum) if cfg["budget_act_sum"] else None,
        parse_size(cfg["budget_act_max"], initial_sx_max) if cfg["budget_act_max"] else None,
    ]
    if all(b is None for b in budgets):
        return None
    lam = cfg["lambda"]
    lambdas = tuple(lam) if len(lam) == 3 else (lam[0],) * 3
    return PenaltyConfig(*budgets, lambdas=lambdas, unit=cfg["unit"])


def run_train(cfg: dict) -> dict[str, str]:
    has_budget = any(cfg[k] for k in ("budget_w", "budget_act_sum", "budget_act_max"))
    if has_budget and cfg["param"] not in ("U3", "P3"):
        raise CliConfigError(
            f"memory budgets need a parametrization that infers the bitwidth (U3 or P3), "
            f"got {cfg['param']}"
        )
    if cfg["auto_lambda"] and not has_budget:
        raise CliConfigError("--auto-lambda requires at least one budget")
    train_set, val_set = _load_dataset(cfg)
    net = build_toy_model(train_set.features.shape[1], train_set.classes, cfg["param"],
                          hidden=tuple(cfg["hidden"]), seed=cfg["seed"], bits=cfg["init_bits"])
    mem0 = network_memory(network_spec(net))
    pcfg = _penalty_config(cfg, mem0.s_w, mem0.s_x_sum, mem0.s_x_max)
    tcfg = TrainConfig(
        steps=cfg["steps"], batch_size=cfg["batch_size"], optimizer=cfg["optimizer"],
        lr=cfg["lr"], momentum=cfg["momentum"], milestones=tuple(cfg["milestones"]),
        param=cfg["param"], penalty=pcfg, auto_lambda=cfg["auto_lambda"], seed=cfg["seed"],
        init_bits=cfg["init_bits"], hidden=tuple(cfg["hidden"]),
    )
    try:
        log = train(net, train_set, tcfg)
    except DivergenceError as exc:
        exc.outputs = {"train_log.csv": exc.log.to_csv()}
        raise
    ev = evaluate(net, val_set)
    log.summary["validation"] = {"loss": ev.loss, "accuracy": ev.accuracy}
    log.summary["initial_memory_kib"] = {
        "weights": mem0.s_w / BITS_PER_KIB,
        "activations_sum": mem0.s_x_sum / BITS_PER_KIB,
        "activations_max": mem0.s_x_max / BITS_PER_KIB,
    }
    if pcfg is not None:
        final = log.summary["final_memory_kib"]
        log.summary["budgets_kib"] = {
            k: (b / BITS_PER_KIB if b is not None else None)
            for k, b in zip(("weights", "activations_sum", "activations_max"), pcfg.budgets)
        }
        log.summary["constraints_met"] = {
            k: (final[k] <= v if v is not None else None)
            for k, v in log.summary["budgets_kib"].items()
        }
    return {
        "train_log.csv": log.to_csv(),
        "bitwidths.csv": report_to_csv(bitwidth_report(net)),
        "summary.json": log.to_json(),
    }


COMMANDS = {
    "gauss-mse": run_gauss_mse,
    "surface": run_surface,
    "gradnorm": run_gradnorm,
    "memcalc": run_memcalc,
    "train": run_train,
}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _lambda_arg(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"lambda must be a number or three numbers, got {text!r}")
    if len(vals) not in (1, 3) or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError(f"need one or three nonnegative lambdas, got {text!r}")
    return vals


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffquant", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gauss-mse", help="minimise the quantization MSE of Gaussian samples")
    common(p)
    p.add_argument("--param", choices=PARAMS, required=True)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=10_000)

    p = sub.add_parser("surface", help="MSE over a latent grid plus a descent path")
    common(p)
    p.add_argument("--param", choices=PARAMS, required=True)
    p.add_argument("--points", type=int, default=41, help="nodes per continuous axis")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--samples", type=int, default=10_000)

    p = sub.add_parser("gradnorm", help="maximum gradient norm over the bitwidth")
    common(p, seed=False)
    p.add_argument("--family", choices=("uniform", "pow2"), default="uniform")
    p.add_argument("--bits-min", type=int, default=2)
    p.add_argument("--bits-max", type=int, default=8)
    p.add_argument("--points", type=int, default=100_001)

    p = sub.add_parser("memcalc", help="weight and activation memory of a network spec")
    common(p, seed=False)
    p.add_argument("spec", nargs="?", default=None,
                   help="network spec file (JSON or line format); default: bundled ResNet-20")
    p.add_argument("--bits-w", type=int, default=None)
    p.add_argument("--bits-x", type=int, default=None)
    p.add_argument("--unit", choices=("bit", "B", "KiB", "MiB"), default="KiB")

    p = sub.add_parser("train", help="quantization-aware training of the toy classifier")
    common(p)
    p.add_argument("--param", choices=PARAMS, default="U3")
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--milestones", type=_int_list, default=[])
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--hidden", type=_int_list, default=[64, 64])
    p.add_argument("--init-bits", type=int, default=4)
    p.add_argument("--dataset", choices=("synthetic", "cifar10"), default="synthetic")
    p.add_argument("--data-dir", default=None, help="CIFAR-10 directory (else $DATA_DIR)")
    p.add_argument("--budget-w", default=None,
                   help="weight budget: bits, or with suffix B/KiB/MiB, or N%% of the initial size")
    p.add_argument("--budget-act-sum", default=None)
    p.add_argument("--budget-act-max", default=None)
    lam = p.add_mutually_exclusive_group()
    lam.add_argument("--lambda", type=_lambda_arg, default=[0.1], dest="lambda")
    lam.add_argument("--auto-lambda", action="store_true")
    p.add_argument("--unit", choices=("bit", "B", "KiB", "MiB"), default="KiB",
                   help="size unit in which lambda is defined")

    p = sub.add_parser("rerun", help="re-execute a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="output directory (default: the manifest's)")
    return parser


def _validate(command: str, cfg: dict) -> None:
    positive = {"steps": 0, "samples": 1, "points": 2, "batch_size": 1, "init_bits": 2}
    for key, lo in positive.items():
        if key in cfg and cfg[key] < lo:
            raise CliConfigError(f"--{key.replace('_', '-')} must be >= {lo}, got {cfg[key]}")
    if cfg.get("lr", 0) < 0:
        raise CliConfigError(f"--lr must be nonnegative, got {cfg['lr']}")
    if command == "gradnorm" and not 2 <= cfg["bits_min"] <= cfg["bits_max"]:
        raise CliConfigError("need 2 <= --bits-min <= --bits-max")
    if command == "train" and not cfg["hidden"]:
        raise CliConfigError("--hidden needs at least one layer width")


def execute(command: str, cfg: dict, out: Path) -> int:
    """Run ``command`` with the resolved ``cfg`` and write outputs + manifest."""
    _validate(command, cfg)
    out.mkdir(parents=True, exist_ok=True)
    code = EXIT_OK
    try:
        files = COMMANDS[command](cfg)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        files, code = exc.outputs, EXIT_DIVERGED
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "subcommand": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "version": _version(),
        "outputs": sorted(files),
        "exit_code": code,
    }
    (out / "manifest.json").write_text(_json(manifest))
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "rerun":
            path = Path(args.manifest)
            try:
                manifest = json.loads(path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise CliConfigError(f"cannot read manifest {path}: {exc}")
            command = manifest.get("subcommand")
            if command not in COMMANDS or not isinstance(manifest.get("config"), dict):
                raise CliConfigError(f"{path}: not a run manifest")
            out = Path(args.out) if args.out else path.parent
            return execute(command, manifest["config"], out)
        cfg = {k: v for k, v in vars(args).items() if k not in ("command", "out")}
        return execute(args.command, cfg, Path(args.out))
    except (CliConfigError, NetSpecError, QuantizerError, DataError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
