"""Command-line entry point: ``timesqueeze <command> [options]``.

Every artifact-producing command writes its outputs plus one
``manifest.json`` into ``--out``.  Failures print a single line
``error: <kind>: <reason>`` to stderr and exit with 2 (config), 3 (data) or
4 (numerical).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import DEFAULT_VARIANTS, VARIANTS, AblationConfig
from .ablation import run as run_ablation
from .backbone import BackboneConfig
from .forecaster import Forecaster, LossConfig, ModelConfig, build_config, evaluate, forecast_windows
from .patcher import CalibrationError, PatchConfig, calibrate_tau, compression_ratio, detect_boundaries, mean_ratio
from .series_io import DataError, TimeSeries, WindowSpec, load_csv, make_windows, save_csv, standardize, synth
from .tensor import NonFiniteError, grad_check
from .trainer import NumericalError, TrainConfig, load_checkpoint, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4
SVG_GENERATOR = f"timesqueeze-svg {__version__}"
CONFIG_SECTIONS = ("data", "window", "model", "train", "loss", "patch", "ablation")

log = logging.getLogger("timesqueeze")


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ config


def read_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err.strerror}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config {path} is not valid JSON: {err.msg} at line {err.lineno}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _section(cfg: dict, name: str, cls, default=None):
    if name not in cfg:
        return default if default is not None else cls()
    if cls is ModelConfig:
        return ModelConfig.from_dict(cfg[name])
    return build_config(cls, cfg[name], name)


def load_series(cfg: dict, csv_paths=(), column=None) -> list[TimeSeries]:
    """Series from positional CSV paths, else from the config's ``data`` section."""
    if csv_paths:
        out = []
        for p in csv_paths:
            out.extend(load_csv(p, column))
        return out
    data = cfg.get("data")
    if data is None:
        raise ConfigError("no input: pass a CSV path or a data section in --config")
    unknown = set(data) - {"csv", "column", "synth"}
    if unknown or len({"csv", "synth"} & set(data)) != 1:
        raise ConfigError("data section needs exactly one of 'csv' or 'synth' (plus optional 'column')")
    if "csv" in data:
        return load_csv(data["csv"], data.get("column"))
    spec = dict(data["synth"])
    bad = set(spec) - {"kind", "length", "seed", "params"}
    if bad or "kind" not in spec or "length" not in spec:
        raise ConfigError("data.synth needs 'kind' and 'length' (optional 'seed', 'params')")
    return [synth(spec["kind"], spec["length"], spec.get("seed", 0), spec.get("params"))]


# --------------------------------------------------------------- artifacts


def _build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
            capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
        return f"{__version__}+{rev}"
    except (OSError, subprocess.SubprocessError):
        return __version__


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _cell(v) -> str:
    if isinstance(v, str):
        return v
    return repr(v.item() if isinstance(v, np.generic) else v)


def write_rows(path: Path, header, rows) -> Path:
    with path.open("w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")
    return path


def write_manifest(out: Path, command: str, payload, seed, started: float, outputs) -> Path:
    manifest = {
        "command": command,
        "config_hash": config_hash(payload),
        "seed": seed,
        "build": _build_id(),
        "wall_time_s": round(time.perf_counter() - started, 3),
        "outputs": sorted(str(Path(p).name) for p in outputs),
    }
    return write_json(out / "manifest.json", manifest)


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def svg_plot(path: Path, title: str, lines, rules=(), width: int = 900, height: int = 260) -> Path:
    """Hand-emitted SVG: ``lines`` are ``(x, y, colour)`` polylines, ``rules`` x positions."""
    xs = np.concatenate([np.asarray(x, float) for x, _, _ in lines])
    ys = np.concatenate([np.asarray(y, float) for _, y, _ in lines])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pad = 20.0

    def sx(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def sy(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f"<!-- generator: {SVG_GENERATOR} -->",
        f'<title>{title}</title>',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for r in rules:
        parts.append(
            f'<line x1="{_fmt(sx(r))}" y1="{pad}" x2="{_fmt(sx(r))}" y2="{height - pad}" '
            f'stroke="#bbbbbb" stroke-width="0.6"/>'
        )
    for x, y, colour in lines:
        pts = " ".join(f"{_fmt(sx(a))},{_fmt(sy(b))}" for a, b in zip(x, y))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.2" points="{pts}"/>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")
    return path


def _threads() -> int:
    raw = os.environ.get("TIMESQUEEZE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"TIMESQUEEZE_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("TIMESQUEEZE_THREADS must be >= 1")
    return n


def _seed(args) -> int:
    return 0 if args.seed is None else args.seed


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _patch_cfg(cfg: dict, args) -> PatchConfig:
    p = _section(cfg, "patch", PatchConfig)
    if getattr(args, "tau", None) is not None:
        p = PatchConfig(args.tau, p.power_window, p.max_patch)
    return p


def _corpus(series, T: int) -> list[np.ndarray]:
    """Non-overlapping standardized contexts of length ``T`` (whole series if shorter)."""
    out = []
    for s in series:
        if len(s) < T:
            out.append(standardize(s.values)[0])
            continue
        for start in range(0, len(s) - T + 1, T):
            out.append(standardize(s.values[start:start + T])[0])
    return out


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg, out: Path):
    params = None
    if args.params:
        try:
            params = json.loads(args.params)
        except json.JSONDecodeError as err:
            raise ConfigError(f"--params is not valid JSON: {err.msg}") from None
    s = synth(args.kind, args.length, _seed(args), params)
    path = out / "series.csv"
    save_csv(path, {args.kind: s.values})
    return [path], {"kind": args.kind, "length": args.length, "params": params}


def cmd_patch(args, cfg, out: Path):
    pcfg = _patch_cfg(cfg, args)
    series = load_series(cfg, [args.csv], args.column)[0]
    x = series.values if args.raw else standardize(series.values)[0]
    plan = detect_boundaries(x, pcfg)
    report = {"series": series.id, "T": plan.T, "config": asdict(pcfg), **plan.to_dict()}
    if args.format == "csv":
        main = write_rows(out / "plan.csv", ["boundary", "size"], zip(plan.boundaries, plan.sizes))
    else:
        main = write_json(out / "plan.json", report)
    t = np.arange(len(x))
    svg = svg_plot(out / "patches.svg", f"{series.id}: {plan.num_patches} patches, ratio {compression_ratio(plan):.3f}",
                   [(t, x, "#1f4e9c")], rules=plan.boundaries)
    return [main, svg], {"csv": str(args.csv), "patch": asdict(pcfg), "raw": args.raw}


def cmd_calibrate(args, cfg, out: Path):
    base = _patch_cfg(cfg, args)
    corpus = _corpus(load_series(cfg, args.csv, args.column), args.context_length)
    tau = calibrate_tau(corpus, args.target, base)
    ratio = mean_ratio(corpus, PatchConfig(tau, base.power_window, base.max_patch))
    report = {"tau": tau, "mean_ratio": ratio, "target": args.target, "windows": len(corpus),
              "power_window": base.power_window, "max_patch": base.max_patch}
    if args.format == "csv":
        main = write_rows(out / "tau.csv", list(report), [list(report.values())])
    else:
        main = write_json(out / "tau.json", report)
    return [main], {"target": args.target, "T": args.context_length, "patch": asdict(base)}


def cmd_train(args, cfg, out: Path):
    # validate every section before touching data
    spec = _section(cfg, "window", WindowSpec, WindowSpec(256, 32, 8))
    model_cfg = _section(cfg, "model", ModelConfig)
    train_cfg = _section(cfg, "train", TrainConfig)
    if args.seed is not None:
        train_cfg = TrainConfig(**{**asdict(train_cfg), "seed": args.seed})
    loss_cfg = _section(cfg, "loss", LossConfig)
    series = load_series(cfg, args.csv, args.column)
    windows = [w for s in series for w in make_windows(s, spec)]
    result = train(windows, model_cfg, train_cfg, loss_cfg, out_dir=out)
    summary = {"windows": len(windows), "final_loss": result.losses[-1], "first_loss": result.losses[0],
               "routing_entropy": result.entropy}
    write_json(out / "train_summary.json", summary)
    outputs = [out / "checkpoint", out / "loss_curve.csv", out / "train_summary.json"]
    payload = {"model": model_cfg.to_dict(), "train": asdict(train_cfg), "loss": asdict(loss_cfg),
               "window": asdict(spec), "data": cfg.get("data"), "csv": [str(p) for p in args.csv]}
    return outputs, payload


def cmd_eval(args, cfg, out: Path):
    try:
        model, store = load_checkpoint(args.checkpoint)
    except (OSError, KeyError, json.JSONDecodeError) as err:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {err}") from None
    horizons = _int_list(args.horizons)
    if not horizons or min(horizons) < 1:
        raise ConfigError("--horizons needs positive integers")
    H = max(horizons)
    series = load_series(cfg, [args.csv], args.column)[0]
    spec = WindowSpec(args.context_length, H, args.stride or H)
    windows = make_windows(series, spec)
    metrics = evaluate(model, store, windows, horizons)
    last = windows[-1]
    y_hat = last.destandardize(forecast_windows(model, store, [last], H)[0])
    y = last.destandardize(last.target)
    t = np.arange(last.offset + spec.context_length, last.offset + spec.context_length + H)
    fc = write_rows(out / "forecast.csv", ["t", "y", "y_hat"], zip(t.tolist(), y.tolist(), y_hat.tolist()))
    if args.format == "csv":
        rows = [(h, m["mse"], m["mae"], m["windows"]) for h, m in metrics.items()]
        main = write_rows(out / "metrics.csv", ["horizon", "mse", "mae", "windows"], rows)
    else:
        main = write_json(out / "metrics.json", {"horizons": metrics, "units": "standardized per window"})
    ctx_t = np.arange(last.offset, last.offset + spec.context_length)
    svg = svg_plot(out / "forecast.svg", f"{series.id}: {H}-step forecast",
                   [(ctx_t, last.destandardize(last.context), "#444444"), (t, y, "#1f4e9c"), (t, y_hat, "#c0392b")],
                   rules=[t[0]])
    return [main, fc, svg], {"checkpoint": str(args.checkpoint), "csv": str(args.csv), "window": asdict(spec)}


def cmd_ablate(args, cfg, out: Path):
    acfg = _section(cfg, "ablation", AblationConfig)
    if args.steps is not None:
        acfg = AblationConfig(**{**asdict(acfg), "steps": args.steps})
    seeds = _int_list(args.seeds)
    variants = tuple(v for v in args.variants.split(",") if v)
    unknown = set(variants) - set(VARIANTS)
    if unknown or "dynamic" not in variants:
        raise ConfigError(f"variants must include 'dynamic' and come from {sorted(VARIANTS)}")

    def progress(seed, name, mse):
        log.info("seed %d %-8s test mse %.6f", seed, name, mse)

    result = run_ablation(acfg, seeds, variants, progress, workers=_threads())
    table = {
        "protocol": asdict(acfg),
        "seeds": seeds,
        **result.to_dict(),
        "margins_vs_dynamic": {v: result.margin(v) for v in variants if v != "dynamic"},
    }
    for v in table["variants"].values():
        v.pop("seconds")  # keep the table byte-identical across runs
    if args.format == "csv":
        rows = [(v, s, m) for v in variants for s, m in zip(seeds, result.mse[v])]
        main = write_rows(out / "ablation.csv", ["variant", "seed", "mse"], rows)
    else:
        main = write_json(out / "ablation.json", table)
    return [main], {"ablation": asdict(acfg), "seeds": seeds, "variants": variants}


def cmd_gradcheck(args, cfg, out: Path):
    default = ModelConfig(d_model=16, backbone=BackboneConfig(d_model=16, heads=2, experts=4, top_k=2, d_expert=16),
                          horizons=(1, 8))
    model_cfg = _section(cfg, "model", ModelConfig, default)
    loss_cfg = _section(cfg, "loss", LossConfig)
    model = Forecaster(model_cfg)
    seed = _seed(args)
    store = model.init_params(seed)
    rng = np.random.default_rng(seed)
    X = np.stack([standardize(v)[0] for v in rng.normal(size=(args.batch, args.length))])
    err = grad_check(lambda s: model.loss(s, X, loss_cfg=loss_cfg)[0], store, n_coords=args.coords,
                     rng=np.random.default_rng(seed + 1))
    report = {"max_rel_error": err, "coords": args.coords, "tolerance": args.tol, "passed": err < args.tol,
              "T": args.length, "batch": args.batch}
    if args.format == "csv":
        main = write_rows(out / "gradcheck.csv", list(report), [[str(v) for v in report.values()]])
    else:
        main = write_json(out / "gradcheck.json", report)
    if not err < args.tol:
        # report and manifest are still written; main raises this afterwards
        args.deferred_error = NumericalError(
            f"gradient check failed: max relative error {err:.3e} >= {args.tol:.1e}")
    return [main], {"model": model_cfg.to_dict(), "loss": asdict(loss_cfg), "T": args.length,
                    "batch": args.batch, "coords": args.coords}


def cmd_patch_hist(args, cfg, out: Path):
    pcfg = _patch_cfg(cfg, args)
    corpus = _corpus(load_series(cfg, args.csv, args.column), args.context_length)
    counts = np.zeros(pcfg.max_patch + 1, dtype=np.int64)
    for x in corpus:
        counts += np.bincount(detect_boundaries(x, pcfg).sizes, minlength=pcfg.max_patch + 1)
    total = int(counts.sum())
    rows = [(size, int(counts[size]), counts[size] / total) for size in range(1, pcfg.max_patch + 1)]
    main = write_rows(out / "patch_hist.csv", ["size", "count", "fraction"], rows)
    return [main], {"patch": asdict(pcfg), "T": args.context_length, "csv": [str(p) for p in args.csv]}


COMMANDS = {
    "synth": cmd_synth,
    "patch": cmd_patch,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "patch-hist": cmd_patch_hist,
}


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--format", choices=("json", "csv"), default="json", help="main report format")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="timesqueeze", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic series to series.csv")
    p.add_argument("kind", choices=("sine_noise", "ar1", "piecewise_bursty"))
    p.add_argument("--length", type=int, default=4096)
    p.add_argument("--params", help="generator parameters as a JSON object")

    p = sub.add_parser("patch", parents=[common], help="patch plan and SVG for one series")
    p.add_argument("csv", type=Path)
    p.add_argument("--column")
    p.add_argument("--tau", type=float)
    p.add_argument("--raw", action="store_true", help="patch raw values instead of the standardized series")

    p = sub.add_parser("calibrate", parents=[common], help="find tau for a target compression ratio")
    p.add_argument("csv", type=Path, nargs="*")
    p.add_argument("--column")
    p.add_argument("--target", type=float, default=4.0)
    p.add_argument("--context-length", type=int, default=256)

    p = sub.add_parser("train", parents=[common], help="train a forecaster and write a checkpoint")
    p.add_argument("csv", type=Path, nargs="*")
    p.add_argument("--column")

    p = sub.add_parser("eval", parents=[common], help="MSE/MAE per horizon for a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("csv", type=Path)
    p.add_argument("--column")
    p.add_argument("--horizons", default="1,8,32")
    p.add_argument("--context-length", type=int, default=256)
    p.add_argument("--stride", type=int)

    p = sub.add_parser("ablate", parents=[common], help="dynamic patching against its ablated variants")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--steps", type=int)
    p.add_argument("--variants", default=",".join(DEFAULT_VARIANTS))

    p = sub.add_parser("gradcheck", parents=[common], help="tape gradients against finite differences")
    p.add_argument("--coords", type=int, default=200)
    p.add_argument("--length", type=int, default=32)
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--tol", type=float, default=1e-3)

    p = sub.add_parser("patch-hist", parents=[common], help="patch-size histogram over a corpus")
    p.add_argument("csv", type=Path, nargs="*")
    p.add_argument("--column")
    p.add_argument("--tau", type=float)
    p.add_argument("--context-length", type=int, default=256)
    return parser


def _fail(kind: str, code: int, err: BaseException) -> int:
    reason = " ".join(str(err).split()) or type(err).__name__
    print(f"error: {kind}: {reason}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage problems itself
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    started = time.perf_counter()
    try:
        cfg = read_config(args.config)
        args.out.mkdir(parents=True, exist_ok=True)
        outputs, payload = COMMANDS[args.command](args, cfg, args.out)
        manifest = write_manifest(args.out, args.command, {"command": args.command, **payload},
                                  args.seed, started, outputs)
        print(manifest)
        deferred = getattr(args, "deferred_error", None)
        if deferred is not None:
            raise deferred
        return EXIT_OK
    except (DataError, CalibrationError) as err:
        return _fail("data", EXIT_DATA, err)
    except (NumericalError, NonFiniteError, FloatingPointError) as err:
        return _fail("numerical", EXIT_NUMERICAL, err)
    except (ConfigError, ValueError, TypeError) as err:
        return _fail("config", EXIT_CONFIG, err)
    except OSError as err:
        return _fail("data", EXIT_DATA, err)


if __name__ == "__main__":
    sys.exit(main())
