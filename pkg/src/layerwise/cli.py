"""``layerwise`` command line: train, verify, stability, bench.

Configuration files are TOML restricted to dotted keys, for example::

    seed = 3
    model.sizes = [4, 16, 1]
    model.activation = "tanh"
    data.kind = "synthetic_regression"
    optimizer.learning_rate = 0.05

Exit codes are listed in ``EXIT_CODES``.
"""
from __future__ import annotations

import argparse
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np
import tomli

from . import bench as bench_lib
from . import checks
from .data import (
    DATASET_KINDS,
    atomic_write_bytes,
    atomic_write_text,
    csv_text,
    load_csv,
    load_idx_pair,
    synthetic_classification,
    synthetic_regression,
)
from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    IoFailure,
    NonFinite,
    NotPositiveDefinite,
    RankDeficient,
    VerificationFailure,
)
from .modules import Bias, Linear, PointwiseNonlinearity, Sequential, init_params, mlp
from .optimizer import MSE, SOFTMAX_CE, OptimizerConfig, train
from .stability import default_eta, paired_training, stability_bound, teacher_dataset

log = logging.getLogger("layerwise")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NONFINITE = 4
EXIT_VERIFICATION = 5
EXIT_RANK = 6
EXIT_CODES = {
    ConfigInvalid: EXIT_CONFIG,
    IoFailure: EXIT_IO,
    NonFinite: EXIT_NONFINITE,
    VerificationFailure: EXIT_VERIFICATION,
    RankDeficient: EXIT_RANK,
    DimensionMismatch: EXIT_CONFIG,
    NotPositiveDefinite: EXIT_NONFINITE,
}

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

DEFAULTS = {
    "seed": 0,
    "model.layers": None,
    "model.sizes": [4, 16, 1],
    "model.activation": "tanh",
    "model.bias": False,
    "data.kind": "synthetic_regression",
    "data.n": 64,
    "data.input_dim": 4,
    "data.output_dim": 1,
    "data.classes": 3,
    "data.noise": 0.0,
    "data.path": None,
    "data.target_columns": 1,
    "data.classification": False,
    "data.images": None,
    "data.labels": None,
    "data.limit": None,
    "optimizer.method": "riemannian",
    "optimizer.learning_rate": 0.01,
    "optimizer.masses": 1.0,
    "optimizer.output_metric": "identity",
    "optimizer.epsilon": 1e-6,
    "optimizer.output_diagonal": None,
    "optimizer.metric_batch_cap": None,
    "optimizer.max_steps": 100,
    "optimizer.batch_size": None,
    "optimizer.loss": "auto",
    "optimizer.pullback": True,
    "optimizer.update_order": "simultaneous",
    "verify.suites": sorted(checks.SUITES),
    "verify.instances": {},
    "verify.tolerances": {},
    "stability.n": 32,
    "stability.n_sweep": None,
    "stability.target_scale": 0.05,
    "stability.index": 0,
    "stability.replacement": "fresh",
    "stability.eta": None,
    "stability.eta_factor": 8e-4,
    "stability.xi_every": 10,
    "stability.t_end": None,
    "stability.horizon": None,
    "stability.check_halving": False,
    "stability.max_steps": 2_000_000,
    "bench.n_alpha": [250, 500, 1000, 2000, 4000],
    "bench.d": [10],
    "bench.repeats": 5,
}

SECTIONS = {
    "train": ("seed", "model", "data", "optimizer"),
    "verify": ("seed", "verify"),
    "stability": ("seed", "model", "optimizer", "stability"),
    "bench": ("seed", "bench"),
}


def _flatten(tree: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict) and name not in ("verify.instances", "verify.tolerances"):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def load_config(path, command: str, seed: int | None = None) -> dict:
    """Flattened config with defaults applied; unknown keys are rejected."""
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigInvalid(f"config file {path} does not exist")
        try:
            raw = _flatten(tomli.loads(path.read_text()))
        except tomli.TOMLDecodeError as exc:
            raise ConfigInvalid(f"{path}: {exc}") from None
        except OSError as exc:
            raise IoFailure(f"cannot read {path}: {exc}") from exc
    unknown = sorted(set(raw) - set(DEFAULTS))
    if unknown:
        raise ConfigInvalid(f"unknown config keys: {', '.join(unknown)}")
    wanted = SECTIONS[command]
    resolved = {k: v for k, v in DEFAULTS.items() if k.split(".")[0] in wanted}
    for k, v in raw.items():
        if k.split(".")[0] in wanted:
            resolved[k] = v
    if seed is not None:
        resolved["seed"] = seed
    if not isinstance(resolved["seed"], int) or not 0 <= resolved["seed"] < 2**64:
        raise ConfigInvalid("seed must be an unsigned 64-bit integer")
    if path is not None:
        resolved["config_dir"] = str(path.parent.resolve())
    return resolved


def _header(cfg: dict) -> list[str]:
    return [f"{k} = {_toml_value(v)}" for k, v in sorted(cfg.items()) if k != "config_dir"]


def _toml_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_toml_value(x)}" for k, x in sorted(v.items())) + "}"
    return str(v)


def build_model(cfg: dict):
    layers = cfg["model.layers"]
    if layers is None:
        sizes = cfg["model.sizes"]
        if not isinstance(sizes, list) or len(sizes) < 2 or not all(isinstance(s, int) and s > 0 for s in sizes):
            raise ConfigInvalid("model.sizes must list at least two positive integers")
        try:
            return mlp(sizes, cfg["model.activation"], bias=bool(cfg["model.bias"]))
        except ValueError as exc:
            raise ConfigInvalid(str(exc)) from None
    mods = []
    dim = None
    for spec in layers:
        parts = str(spec).split()
        try:
            kind, args = parts[0].lower(), [int(a) for a in parts[1:]]
            if kind == "linear":
                mods.append(Linear(*args))
            elif kind == "bias":
                mods.append(Bias(args[0] if args else dim))
            else:
                mods.append(PointwiseNonlinearity(args[0] if args else dim, kind))
        except (ValueError, TypeError, IndexError) as exc:
            raise ConfigInvalid(f"bad layer spec {spec!r}: {exc}") from None
        dim = mods[-1].output_dim
    if not mods:
        raise ConfigInvalid("model.layers is empty")
    try:
        return Sequential(*mods)
    except ValueError as exc:
        raise ConfigInvalid(str(exc)) from None


def _resolve_path(cfg: dict, key: str) -> Path:
    value = cfg[key]
    if value is None:
        raise ConfigInvalid(f"{key} is required for data.kind = {cfg['data.kind']}")
    p = Path(value)
    if not p.is_absolute() and "config_dir" in cfg:
        p = Path(cfg["config_dir"]) / p
    if not p.is_file():
        raise ConfigInvalid(f"{key}: file {p} does not exist")
    return p


def build_dataset(cfg: dict):
    kind = cfg["data.kind"]
    seed = cfg["seed"]
    if kind not in DATASET_KINDS:
        raise ConfigInvalid(f"data.kind must be one of {DATASET_KINDS}")
    if kind == "synthetic_regression":
        return synthetic_regression(cfg["data.n"], cfg["data.input_dim"], cfg["data.output_dim"], seed, cfg["data.noise"])
    if kind == "synthetic_classification":
        return synthetic_classification(cfg["data.n"], cfg["data.input_dim"], cfg["data.classes"], seed)
    if kind == "csv":
        return load_csv(_resolve_path(cfg, "data.path"), cfg["data.target_columns"], cfg["data.classification"])
    images = _resolve_path(cfg, "data.images")
    labels = _resolve_path(cfg, "data.labels")
    return load_idx_pair(images, labels, cfg["data.limit"])


def optimizer_config(cfg: dict, classification: bool = False) -> OptimizerConfig:
    loss = cfg["optimizer.loss"]
    if loss == "auto":
        loss = SOFTMAX_CE if classification else MSE
    try:
        return OptimizerConfig(
            learning_rate=cfg["optimizer.learning_rate"],
            masses=cfg["optimizer.masses"],
            output_metric=cfg["optimizer.output_metric"],
            epsilon=cfg["optimizer.epsilon"],
            output_diagonal=cfg["optimizer.output_diagonal"],
            metric_batch_cap=cfg["optimizer.metric_batch_cap"],
            max_steps=cfg["optimizer.max_steps"],
            seed=cfg["seed"],
            batch_size=cfg["optimizer.batch_size"],
            loss=loss,
            pullback=bool(cfg["optimizer.pullback"]),
            update_order=cfg["optimizer.update_order"],
        )
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(str(exc)) from None


def run_train(cfg: dict, out: Path) -> int:
    graph = build_model(cfg)
    dataset = build_dataset(cfg)
    if dataset.inputs.shape[1] != graph.input_dim:
        raise ConfigInvalid(f"dataset input dim {dataset.inputs.shape[1]} does not match model input {graph.input_dim}")
    if dataset.classification:
        if np.any(dataset.targets < 0) or np.any(dataset.targets >= graph.output_dim):
            raise ConfigInvalid("class labels out of range for the model output dimension")
    elif dataset.targets.shape[1] != graph.output_dim:
        raise ConfigInvalid("target dimension does not match model output")
    config = optimizer_config(cfg, dataset.classification)
    method = cfg["optimizer.method"]
    if method not in ("riemannian", "sgd"):
        raise ConfigInvalid("optimizer.method must be riemannian or sgd")
    params = init_params(graph, cfg["seed"])
    failure = None
    try:
        params, records = train(graph, params, dataset.as_tuple(), config, method)
    except NonFinite as exc:
        failure, records, params = exc, exc.records, exc.params
    norms = [f"update_norm_{a}" for a in range(graph.n_layers)]
    rows = [[r.step, r.loss, *r.update_norms] for r in records]
    atomic_write_text(out / "training.csv", csv_text(["step", "loss", *norms], rows, _header(cfg)))
    atomic_write_text(out / "timing.csv", csv_text(["step", "step_ms"], [[r.step, r.duration_ms] for r in records]))
    buf = io.BytesIO()
    np.savez(buf, **{f"block_{a}": b for a, b in enumerate(params.blocks)})
    atomic_write_bytes(out / "final_params.npz", buf.getvalue())
    if failure is not None:
        raise failure
    if records:
        log.info("loss %.6g -> %.6g over %d steps", records[0].loss, records[-1].loss, len(records))
    return EXIT_OK


def run_verify(cfg: dict, out: Path) -> int:
    suites = cfg["verify.suites"]
    if not isinstance(suites, list) or not suites:
        raise ConfigInvalid("verify.suites selects no suite")
    instances = cfg["verify.instances"]
    tolerances = cfg["verify.tolerances"]
    for name in list(instances) + list(tolerances) + suites:
        if name not in checks.SUITES:
            raise ConfigInvalid(f"unknown verification suite {name!r}")
    results = []
    for name in suites:
        r = checks.run_suite(name, cfg["seed"], instances.get(name), tolerances.get(name))
        log.info(r.line())
        results.append(r)
    failed = [r.name for r in results if not r.passed]
    lines = [f"# {h}" for h in _header(cfg)] + [r.line() for r in results]
    lines.append(f"summary passed={len(results) - len(failed)} failed={len(failed)}"
                 + (f" failing={','.join(failed)}" if failed else ""))
    atomic_write_text(out / "verify.txt", "\n".join(lines) + "\n")
    if failed:
        raise VerificationFailure(f"failing properties: {', '.join(failed)}")
    return EXIT_OK


def _stability_run(cfg: dict, graph, n: int, eta=None, t_end=None, horizon=None):
    params = init_params(graph, cfg["seed"])
    null = cfg["stability.replacement"] == "null"
    if cfg["stability.replacement"] not in ("fresh", "null"):
        raise ConfigInvalid("stability.replacement must be fresh or null")
    paired = teacher_dataset(graph, params, n, cfg["seed"], cfg["stability.target_scale"],
                             cfg["stability.index"], null_replacement=null)
    config = optimizer_config(cfg)
    if config.loss != MSE:
        raise ConfigInvalid("the stability experiment needs optimizer.loss = mse")
    if eta is None:
        eta = cfg["stability.eta"] or default_eta(graph, params, paired, config, cfg["stability.eta_factor"])
    return paired_training(graph, params, paired, config, eta=eta, xi_every=cfg["stability.xi_every"],
                           t_end=t_end if t_end is not None else cfg["stability.t_end"],
                           horizon=horizon if horizon is not None else cfg["stability.horizon"],
                           max_steps=cfg["stability.max_steps"])


def run_stability(cfg: dict, out: Path) -> int:
    graph = build_model(cfg)
    if graph.output_dim * max(cfg["stability.n_sweep"] or [cfg["stability.n"]]) > graph.param_count:
        raise ConfigInvalid("n * p exceeds the parameter count; the kernel cannot be full rank")
    sweep = cfg["stability.n_sweep"] or [cfg["stability.n"]]
    reference = None
    failures = []
    for n in sweep:
        rep = _stability_run(cfg, graph, n)
        if reference is None:
            reference = rep.constants
        lines = [f"# {h}" for h in _header(cfg)] + rep.lines()
        lines.append(f"bound_at_reference_constants = {stability_bound(reference.kappa, reference.lipschitz, reference.xi, n, reference.mu)!r}")
        if cfg["stability.check_halving"]:
            half = _stability_run(cfg, graph, n, eta=rep.eta / 2, t_end=rep.t_end, horizon=rep.horizon)
            change = abs(half.observed_divergence - rep.observed_divergence) / max(rep.observed_divergence, 1e-300)
            lines.append(f"halved_eta_observed_divergence = {half.observed_divergence!r}")
            lines.append(f"halved_eta_relative_change = {change!r}")
            if change >= 0.01:
                failures.append(f"n={n}: halving eta changed divergence by {change:.3%}")
        suffix = "" if len(sweep) == 1 else f"_n{n}"
        atomic_write_text(out / f"stability_report{suffix}.txt", "\n".join(lines) + "\n")
        atomic_write_text(out / f"divergence{suffix}.csv", csv_text(
            ["t", "divergence", "disturbance_max", "disturbance_stacked"],
            [[float(v) for v in row] for row in rep.divergence_rows()], _header(cfg)))
        if not rep.holds:
            failures.append(f"n={n}: observed divergence {rep.observed_divergence:.6g} exceeds bound {rep.bound:.6g}")
        if not rep.disturbance.passed:
            failures.append(f"n={n}: disturbance bound violated at step {rep.disturbance.worst_step}")
        log.info("n=%d bound=%.6g observed=%.6g margin=%.3g", n, rep.bound, rep.observed_divergence, rep.margin)
    if failures:
        raise VerificationFailure("; ".join(failures))
    return EXIT_OK


def run_bench(cfg: dict, out: Path) -> int:
    sizes = cfg["bench.n_alpha"]
    dims = cfg["bench.d"] if isinstance(cfg["bench.d"], list) else [cfg["bench.d"]]
    if not sizes or not dims:
        raise ConfigInvalid("bench.n_alpha and bench.d must be non-empty")
    if any(not isinstance(v, int) or v < 1 for v in list(sizes) + list(dims)):
        raise ConfigInvalid("bench sizes must be positive integers")
    rows = [bench_lib.time_layer_update(n, d, cfg["bench.repeats"], cfg["seed"]) for d in dims for n in sizes]
    summary = list(_header(cfg))
    for d in dims:
        sub = [r for r in rows if r.d == d]
        summary.append(f"d = {d}: woodbury_exponent = {bench_lib.fit_exponent([r.n_alpha for r in sub], [r.woodbury_ms for r in sub])!r}")
        summary.append(f"d = {d}: dense_exponent = {bench_lib.fit_exponent([r.n_alpha for r in sub], [r.dense_ms for r in sub])!r}")
        cross = bench_lib.crossover(sub)
        summary.append(f"d = {d}: crossover_n_alpha = {cross if cross is not None else 'none'}")
    table = csv_text(["n_alpha", "d", "woodbury_ms", "dense_ms"],
                     [[r.n_alpha, r.d, r.woodbury_ms, r.dense_ms] for r in rows], summary)
    atomic_write_text(out / "bench.csv", table)
    return EXIT_OK


COMMANDS = {"train": run_train, "verify": run_verify, "stability": run_stability, "bench": run_bench}


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerwise", description="Layerwise Riemannian metric optimizer and labs")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--out", type=Path, default=Path("."))
        p.add_argument("--seed", type=_seed, default=None)
    return parser


def _configure_logging() -> None:
    level = os.environ.get("RIEMANN_LOG_LEVEL", "error").strip().lower()
    if level not in LOG_LEVELS:
        raise ConfigInvalid(f"RIEMANN_LOG_LEVEL must be one of {sorted(LOG_LEVELS)}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(LOG_LEVELS[level])


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _configure_logging()
        cfg = load_config(args.config, args.command, args.seed)
        return COMMANDS[args.command](cfg, args.out)
    except tuple(EXIT_CODES) as exc:
        code = next(c for cls, c in EXIT_CODES.items() if isinstance(exc, cls))
        print(f"layerwise {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
