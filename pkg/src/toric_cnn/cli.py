"""Batch command-line frontend.

Every command resolves its configuration as defaults < JSON config file <
command-line flags, writes its artifacts to ``<out>/<command>-<hash>`` where
the hash covers the resolved configuration, and always leaves a
``manifest.json`` behind, also on failure.

Exit codes: 0 ok, 1 usage, 2 configuration, 3 runtime.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import sys
import traceback
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .nn import CheckpointError, load_network, network_to_dict, save_network

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("toric_cnn")


class ConfigError(ValueError):
    pass


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- value parsing -----------------------------------------------------------------

def parse_floats(text) -> list[float]:
    """'0.1,0.2' or 'lo:hi:step' (inclusive) or a JSON list/number."""
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, list):
        return [float(x) for x in text]
    text = str(text).strip()
    if text.count(":") == 2:
        lo, hi, step = (float(x) for x in text.split(":"))
        if step <= 0 or hi < lo:
            raise ConfigError(f"bad range {text!r}")
        n = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + k * step, 12) for k in range(n)]
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse number list {text!r}") from exc


def parse_ints(text) -> list[int]:
    if isinstance(text, int):
        return [text]
    if isinstance(text, list):
        return [int(x) for x in text]
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse integer list {text!r}") from exc


def parse_pair(text) -> tuple[float, float]:
    vals = parse_floats(str(text).replace(":", ",")) if not isinstance(text, list) else parse_floats(text)
    if len(vals) == 1:
        return (vals[0], vals[0])
    if len(vals) != 2:
        raise ConfigError(f"expected a value or a lo:hi pair, got {text!r}")
    return (vals[0], vals[1])


# -- commands -----------------------------------------------------------------------
# Each command: (defaults, add_arguments, run). ``run(cfg, outdir)`` returns
# (artifact names, checkpoint checksums).

def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _load_checkpoint(path, dim=None):
    from .nn import check_decoder_compat

    if not path:
        raise ConfigError("a --checkpoint is required")
    if not Path(path).exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    net = load_network(path)
    if dim is not None:
        check_decoder_compat(net, int(dim))
    return net, network_to_dict(net)["checksum"]


def _write_decoder(outdir, **settings):
    """Frozen decoder settings (budgets, stall windows) next to the results."""
    body = {k: asdict(v) if is_dataclass(v) else v for k, v in settings.items()}
    (outdir / "decoder.json").write_text(json.dumps(body, indent=1, sort_keys=True) + "\n")


def _decoder_cfg(cfg, mode="noiseless"):
    from .decoder import DecoderConfig

    return DecoderConfig(flip_divisor=int(cfg.get("flip_divisor", 50)),
                         budget_factor=float(cfg.get("budget_factor", 4.0)),
                         stall_window=int(cfg.get("stall_window", 8)),
                         threshold_mode=bool(cfg.get("threshold_mode", False)),
                         round_budget=cfg.get("round_budget"),
                         mode=mode)


TRAIN_DEFAULTS = {"model": "a", "dim": 4, "l": 4, "p": None, "q": None, "hidden": None,
                  "samples": None, "epochs": 10, "lr": 1e-3, "batch": 64, "patience": 2,
                  "sides": "3,1,1", "seed": 0}


def _train_args(p):
    p.add_argument("--model", choices=["a", "b"])
    p.add_argument("--dim", type=int)
    p.add_argument("--l", type=int, help="training lattice size")
    p.add_argument("--p", help="error rate, a value or lo:hi")
    p.add_argument("--q", type=float, help="measurement error rate")
    p.add_argument("--hidden", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--sides", help="kernel sides per layer, e.g. 3,1,1")


def _run_train(cfg, outdir):
    from .training import TrainingHyper, TrainingRunConfig, train

    try:
        hyper = TrainingHyper(lr=cfg["lr"], batch_size=cfg["batch"], patience=cfg["patience"])
        run = TrainingRunConfig(model=cfg["model"], dim=cfg["dim"], size=cfg["l"],
                                hidden=cfg["hidden"],
                                p_range=None if cfg["p"] is None else parse_pair(cfg["p"]),
                                q=cfg["q"], samples=cfg["samples"], epochs=cfg["epochs"],
                                sides=tuple(parse_ints(cfg["sides"])), hyper=hyper, seed=cfg["seed"])
        run.geom
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = train(run, log_path=outdir / "train_log.csv")
    checksum = save_network(result.net, outdir / "checkpoint.json")
    return ["checkpoint.json", "train_log.csv"], {"checkpoint.json": checksum}


SWEEP_DEFAULTS = {"checkpoint": None, "dim": None, "l": "6,8", "p": "0.12", "trials": 1000,
                  "seed": 0, "flip_divisor": 50, "no_fallback": False}


def _sweep_args(p):
    p.add_argument("--checkpoint")
    p.add_argument("--dim", type=int)
    p.add_argument("--l", help="comma-separated sizes")
    p.add_argument("--p", help="comma list or lo:hi:step")
    p.add_argument("--trials", type=int)
    p.add_argument("--flip-divisor", dest="flip_divisor", type=int)
    p.add_argument("--no-fallback", dest="no_fallback", action="store_const", const=True)


def _run_sweep(cfg, outdir):
    from .montecarlo import SweepConfig, count_failures, sweep_csv, SweepRow
    from .lattice import LatticeGeometry

    net, checksum = _load_checkpoint(cfg["checkpoint"], cfg["dim"])
    try:
        sc = SweepConfig(dim=net.dim, sizes=parse_ints(cfg["l"]), ps=parse_floats(cfg["p"]),
                         trials=int(cfg["trials"]), decoder=_decoder_cfg(cfg), seed=int(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rows = []
    for L in sc.sizes:
        geom = LatticeGeometry(sc.dim, L)
        for p in sc.ps:
            if cfg.get("no_fallback"):
                f = _count_no_fallback(net, geom, p, sc)
            else:
                f = count_failures(net, geom, p, sc.trials, sc.decoder, sc.seed)
            rows.append(SweepRow(L, p, sc.trials, f))
            log.info("L=%d p=%g failures %d/%d", L, p, f, sc.trials)
    (outdir / "sweep.csv").write_text(sweep_csv(rows))
    _write_decoder(outdir, noiseless=sc.decoder, fallback=not cfg.get("no_fallback"))
    return ["sweep.csv", "decoder.json"], {"checkpoint": checksum}


def _count_no_fallback(net, geom, p, sc):
    from .decoder import decode_batch
    from .montecarlo import chunk_seed, _p_key

    failures = 0
    for k, start in enumerate(range(0, sc.trials, sc.chunk)):
        n = min(sc.chunk, sc.trials - start)
        rng = np.random.default_rng(chunk_seed(sc.seed, geom.size, _p_key(p), k))
        errors = (rng.random((n,) + geom.shape(2)) < p).astype(np.uint8)
        failures += sum(o.failed for o in decode_batch(net, geom, errors, sc.decoder, fallback=False))
    return failures


MEMORY_DEFAULTS = {"checkpoint": None, "assess_checkpoint": None, "dim": None, "l": "3,4",
                   "p": 0.01, "q": None, "runs": 64, "round_cap": 10_000, "round_budget": None,
                   "seed": 0}


def _memory_args(p):
    p.add_argument("--checkpoint", help="noisy-model (b) network")
    p.add_argument("--assess-checkpoint", dest="assess_checkpoint",
                   help="model (a) network used to assess failure each round")
    p.add_argument("--dim", type=int)
    p.add_argument("--l")
    p.add_argument("--p", type=float)
    p.add_argument("--q", type=float, help="defaults to p")
    p.add_argument("--runs", type=int)
    p.add_argument("--round-cap", dest="round_cap", type=int)
    p.add_argument("--round-budget", dest="round_budget", type=int)


def _run_memory(cfg, outdir):
    from .montecarlo import MemoryConfig, censored_exponential_mean, memory_csv, run_memory_time

    net, c1 = _load_checkpoint(cfg["checkpoint"], cfg["dim"])
    assess, c2 = _load_checkpoint(cfg["assess_checkpoint"], net.dim)
    try:
        mc = MemoryConfig(dim=net.dim, sizes=parse_ints(cfg["l"]), p=float(cfg["p"]), q=cfg["q"],
                          runs=int(cfg["runs"]), round_cap=int(cfg["round_cap"]),
                          decoder=_decoder_cfg(cfg, mode="noisy"), seed=int(cfg["seed"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    records = run_memory_time(net, assess, mc)
    (outdir / "memory.csv").write_text(memory_csv(records))
    rows = []
    for L in mc.sizes:
        est = censored_exponential_mean([r for r in records if r.L == L])
        rows.append([L, repr(mc.p), repr(est.mean), repr(est.ci_lo), repr(est.ci_hi), est.failures,
                     sum(r.censored for r in records if r.L == L)])
    (outdir / "memory_summary.csv").write_text(
        _csv_text(["L", "p", "T", "ci_lo", "ci_hi", "failures", "censored"], rows))
    _write_decoder(outdir, noisy=mc.decoder, assess=mc.assess)
    return ["memory.csv", "memory_summary.csv", "decoder.json"], {"checkpoint": c1, "assess_checkpoint": c2}


FIT_DEFAULTS = {"input": None, "p_window": None, "seed": 0}


def _fit_args(p):
    p.add_argument("--input", help="sweep CSV")
    p.add_argument("--p-window", dest="p_window", help="lo:hi")


def _run_fit(cfg, outdir):
    from .montecarlo import fit_csv, fit_scaling, read_sweep_csv

    if not cfg["input"] or not Path(cfg["input"]).exists():
        raise ConfigError(f"sweep CSV {cfg['input']!r} not found")
    rows = read_sweep_csv(cfg["input"])
    window = parse_pair(cfg["p_window"]) if cfg["p_window"] else None
    try:
        fit = fit_scaling(rows, window)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    (outdir / "fit.csv").write_text(fit_csv(fit))
    return ["fit.csv"], {}


DECODE_DEFAULTS = {"checkpoint": None, "dim": None, "l": 4, "p": 0.05, "seed": 0, "trace": False,
                   "flip_divisor": 50}


def _decode_args(p):
    p.add_argument("--checkpoint")
    p.add_argument("--dim", type=int)
    p.add_argument("--l", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--trace", action="store_const", const=True, help="write trace.jsonl")


def _run_decode(cfg, outdir):
    from .decoder import nn_decode
    from .lattice import LatticeGeometry
    from .toric import sample_error

    net, checksum = _load_checkpoint(cfg["checkpoint"], cfg["dim"])
    geom = LatticeGeometry(net.dim, int(cfg["l"]))
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg["seed"]), 9]))
    error = sample_error(geom, float(cfg["p"]), rng)
    trace = [] if cfg["trace"] else None
    out = nn_decode(net, error, _decoder_cfg(cfg), trace=trace)
    result = {"L": geom.size, "p": cfg["p"], "error_weight": error.weight,
              "outcome": out.success.value, "nn_steps": out.nn_steps,
              "line_sweeps": out.line_sweeps, "residual_weight": out.residual_weight,
              "classes": list(out.classes)}
    (outdir / "decode.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    names = ["decode.json"]
    if trace is not None:
        (outdir / "trace.jsonl").write_text("".join(json.dumps(t) + "\n" for t in trace))
        names.append("trace.jsonl")
    print(json.dumps(result))
    return names, {"checkpoint": checksum}


ANALYZE_DEFAULTS = {
    "toy-nn": {"L": 50, "p": 0.05, "N": 10_000, "reps": 100, "seed": 0},
    "paths": {"m": 4, "n": None, "seed": 0},
    "variance": {"m": 4, "trials": 600, "sigma": 0.1, "channels": 1, "seed": 0},
    "aligned": {"n": 7, "runs": 20, "channels": 10, "noisy": False, "max_steps": 20_000, "seed": 0},
    "sensitivity": {"checkpoint": None, "l": 8, "reps": 20, "p": 0.17, "seed": 0},
}


def _analyze_args(p):
    p.add_argument("experiment", choices=sorted(ANALYZE_DEFAULTS))
    p.add_argument("--L", type=int, help="toy-nn lattice side")
    p.add_argument("--N", type=int, help="toy-nn database size")
    p.add_argument("--reps", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--m", type=int, help="network depth")
    p.add_argument("--n", type=int, help="input width")
    p.add_argument("--trials", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--channels", type=int)
    p.add_argument("--runs", type=int)
    p.add_argument("--noisy", action="store_const", const=True)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--l", type=int)


def _run_analyze(cfg, outdir):
    from . import appendix as ap

    exp = cfg["experiment"]
    if exp == "toy-nn":
        res = ap.nn_toy_overlap_experiment(ap.ToyLatticeConfig(cfg["L"], cfg["p"], cfg["N"], cfg["seed"]),
                                           cfg["reps"])
        rows = [[k, t["max_overlap"], t["weight_before"], t["weight_after"], repr(t["mean_overlap"])]
                for k, t in enumerate(res["trials"])]
        text = _csv_text(["rep", "max_overlap", "weight_before", "weight_after", "mean_overlap"], rows)
    elif exp == "paths":
        m = int(cfg["m"])
        n = 2 * m - 1 if cfg["n"] is None else int(cfg["n"])
        try:
            counts = [ap.count_paths(m, k, n) for k in range(n)]
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        print(",".join(str(c) for c in counts))
        text = _csv_text(["position", "paths"], list(enumerate(counts)))
    elif exp == "variance":
        spec = ap.LocalNetSpec(m=cfg["m"], channels=cfg["channels"], sigma=cfg["sigma"])
        res = ap.variance_vs_paths_experiment(spec, cfg["trials"], cfg["seed"])
        rows = [[k, int(res["paths"][k]), repr(float(res["variance"][k])), repr(float(res["predicted"][k]))]
                for k in range(spec.n)]
        text = _csv_text(["position", "paths", "variance", "predicted"], rows)
    elif exp == "aligned":
        acfg = ap.AlignedConfig(n=cfg["n"], channels=cfg["channels"], noisy=bool(cfg["noisy"]),
                                max_steps=cfg["max_steps"])
        res = ap.aligned_reversed_experiment(acfg, cfg["runs"], cfg["seed"])
        rows = [[r["seed"], int(r["converged"]), r["steps"], repr(r["cost"]), r["side"],
                 repr(r["center_fraction"]), repr(r["aligned_accuracy"])] for r in res["runs"]]
        text = _csv_text(["run", "converged", "steps", "cost", "outcome", "center_fraction",
                          "aligned_accuracy"], rows)
    else:
        net, checksum = _load_checkpoint(cfg["checkpoint"])
        res = ap.sensitivity_vs_distance(net, cfg["l"], reps=cfg["reps"], p=cfg["p"], seed=cfg["seed"])
        text = _csv_text(["distance", "sensitivity"],
                         [[d, repr(s)] for d, s in zip(res["distances"], res["sensitivity"])])
        (outdir / "sensitivity.csv").write_text(text)
        return ["sensitivity.csv"], {"checkpoint": checksum}
    name = f"{exp.replace('-', '_')}.csv"
    (outdir / name).write_text(text)
    return [name], {}


def _inspect_args(p):
    p.add_argument("--checkpoint")


def _run_inspect(cfg, outdir):
    net, checksum = _load_checkpoint(cfg["checkpoint"])
    info = {"checksum": checksum, "dim": net.dim, "softmax": net.softmax,
            "receptive_radius": net.receptive_radius,
            "layers": [{"side": l.side, "in": l.in_channels, "out": l.out_channels,
                        "activation": l.activation} for l in net.layers],
            "metadata": net.metadata}
    text = json.dumps(info, indent=1, sort_keys=True, default=str) + "\n"
    (outdir / "checkpoint_info.json").write_text(text)
    print(text, end="")
    return ["checkpoint_info.json"], {"checkpoint": checksum}


COMMANDS = {
    "train": (TRAIN_DEFAULTS, _train_args, _run_train),
    "sweep": (SWEEP_DEFAULTS, _sweep_args, _run_sweep),
    "memory": (MEMORY_DEFAULTS, _memory_args, _run_memory),
    "fit": (FIT_DEFAULTS, _fit_args, _run_fit),
    "decode-one": (DECODE_DEFAULTS, _decode_args, _run_decode),
    "analyze": (None, _analyze_args, _run_analyze),
    "inspect-checkpoint": ({"checkpoint": None, "seed": 0}, _inspect_args, _run_inspect),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="toric-cnn", description="CNN decoder for 3D/4D toric codes")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (_, add, _) in COMMANDS.items():
        p = sub.add_parser(name, argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output root directory (default: runs)")
        p.add_argument("--seed", type=int)
        p.add_argument("-v", "--verbose", action="store_const", const=True)
        add(p)
    return parser


def resolve_config(command: str, args: dict) -> dict:
    """defaults < config file < explicit flags."""
    if command == "analyze":
        defaults = dict(ANALYZE_DEFAULTS[args["experiment"]])
        defaults["experiment"] = args["experiment"]
    else:
        defaults = dict(COMMANDS[command][0])
    cfg = dict(defaults)
    if args.get("config"):
        try:
            file_cfg = json.loads(Path(args["config"]).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args['config']}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(file_cfg) - set(defaults) - {"out"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(file_cfg)
    for key, value in args.items():
        if key in ("config", "verbose", "command"):
            continue
        if key not in defaults and key != "out":
            raise ConfigError(f"option --{key} does not apply to {command} {args.get('experiment', '')}")
        cfg[key] = value
    return cfg


def config_hash(command: str, cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "out"}
    blob = json.dumps({"command": command, "config": body}, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        ns = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    if ns.command is None:
        build_parser().print_help(sys.stderr)
        return EXIT_USAGE
    args = vars(ns)
    logging.basicConfig(level=logging.INFO if args.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.pop("command")

    manifest = {"command": command, "argv": list(argv), "version": __version__, "start": _now()}
    outdir = None
    code = EXIT_OK
    try:
        cfg = resolve_config(command, args)
        manifest["config"] = cfg
        manifest["seed"] = cfg.get("seed")
        root = Path(cfg.get("out") or "runs")
        name = command if command != "analyze" else f"analyze-{cfg['experiment']}"
        outdir = root / f"{name}-{config_hash(command, cfg)}"
        try:
            outdir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {outdir}: {exc}") from exc
        manifest["output_dir"] = str(outdir)
        artifacts, checksums = COMMANDS[command][2](cfg, outdir)
        manifest["artifacts"] = artifacts
        manifest["checksums"] = checksums
        manifest["status"] = "ok"
    except (ConfigError, CheckpointError) as exc:
        manifest.update(status="config-error", error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        code = EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report any runtime failure with its trace
        manifest.update(status="runtime-error", error=repr(exc), traceback=traceback.format_exc())
        print(f"runtime error: {exc!r}", file=sys.stderr)
        code = EXIT_RUNTIME
    manifest["end"] = _now()
    manifest["exit_code"] = code
    target = outdir if outdir is not None and outdir.exists() else Path(args.get("out") or "runs")
    try:
        target.mkdir(parents=True, exist_ok=True)
        name = "manifest.json" if target == outdir else f"manifest-{command}-failed.json"
        (target / name).write_text(json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
        if outdir is not None and target == outdir:
            print(str(outdir / "manifest.json"))
    except OSError as exc:
        print(f"warning: could not write manifest: {exc}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
