"""Command-line interface.

Subcommands: classify, simulate, analyze, report, reproduce.  Every command
that writes to ``--out DIR`` also writes ``manifest.json`` there; feeding that
file to ``reproduce`` re-runs the command and compares output digests.

Exit codes: 0 ok, 1 usage, 2 validation, 3 numerical failure, 4 inconsistent
verdict.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .classification import ClassifyConfig, CoalescentClass, classify
from .diagnostics import StudyConfig, compactness_report
from .errors import LambdaTreeError, MeasureError, NumericalError
from .measure import parse_measure
from .mmspace import (distance_distribution, functionals_table, matrix_to_csv, rows_to_csv,
                      tree_from_history)
from .simulate import CoalescentHistory, SimConfig, replicate_seed, simulate

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_INCONSISTENT = 0, 1, 2, 3, 4

DEFAULTS = {
    "measure": None,
    "n": [100],
    "horizon": math.inf,
    "replicates": 1,
    "seed": 0,
    "scheme": "gillespie",
    "bmax": 10_000,
    "eps_grid": [0.1],
    "delta_grid": [0.01, 0.05, 0.2],
    "eta_grid": [0.05, 0.1],
    "format": "text",
    "out": None,
    "jobs": 1,
    "matrix": False,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _horizon(text: str) -> float:
    if text.lower() in ("inf", "absorption"):
        return math.inf
    return float(text)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lambdatree", description="Lambda-coalescent trees: classify, simulate, analyze.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, *names):
        sp.add_argument("--config", help="JSON file of option values (flags take precedence)")
        opts = {
            "measure": dict(help="measure spec, e.g. kingman, bolthausen-sznitman, beta:1.5,0.5"),
            "n": dict(type=_ints, help="leaf count(s), comma-separated for report"),
            "horizon": dict(type=_horizon, help="time horizon (default: until absorption)"),
            "replicates": dict(type=int),
            "seed": dict(type=int, help="master seed"),
            "scheme": dict(choices=("gillespie", "poisson", "auto")),
            "bmax": dict(type=int, help="rate table size for the series test"),
            "eps_grid": dict(type=_floats),
            "delta_grid": dict(type=_floats),
            "eta_grid": dict(type=_floats),
            "format": dict(choices=("text", "json", "csv")),
            "out": dict(help="output directory (created if missing)"),
            "jobs": dict(type=int, help="worker processes"),
        }
        for name in names:
            sp.add_argument("--" + name.replace("_", "-"), dest=name, default=None, **opts[name])

    common(sub.add_parser("classify", help="analytic classification of a measure"),
           "measure", "bmax", "format", "out")
    common(sub.add_parser("simulate", help="simulate coalescent histories"),
           "measure", "n", "horizon", "replicates", "seed", "scheme", "out")
    sp = sub.add_parser("analyze", help="geometric functionals of one simulated tree")
    common(sp, "measure", "n", "horizon", "seed", "scheme", "eps_grid", "delta_grid", "format", "out")
    sp.add_argument("--history", help="analyze this history file instead of simulating")
    sp.add_argument("--matrix", action="store_true", default=None, help="also write the distance matrix")
    common(sub.add_parser("report", help="compactness diagnostics report"),
           "measure", "n", "replicates", "seed", "scheme", "bmax", "eps_grid", "delta_grid",
           "eta_grid", "jobs", "out")
    sp = sub.add_parser("reproduce", help="re-run a command from its manifest and compare outputs")
    sp.add_argument("manifest")
    sp.add_argument("--out", default=None, help="directory for the re-run (default: temporary)")
    return p


# -- config resolution and output ------------------------------------------------------

def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < flags."""
    cfg = dict(DEFAULTS)
    if args.command == "report":
        cfg.update(n=[100, 400, 1600], replicates=200, seed=1, delta_grid=[0.4, 0.8])
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file: {exc}")
        unknown = set(loaded) - set(DEFAULTS) - {"history"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k not in ("command", "config") and v is not None:
            cfg[k] = v
    if isinstance(cfg.get("n"), int):
        cfg["n"] = [cfg["n"]]
    if cfg.get("horizon") is None:
        cfg["horizon"] = math.inf
    return cfg


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: Path, text: str) -> str:
    """Write via a temporary file in the same directory, then rename; returns sha256."""
    data = text.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return _digest(data)


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    outputs: dict = field(default_factory=dict)
    artifact_version: str = __version__
    started: str = ""
    finished: str = ""

    def to_json(self) -> str:
        body = {"artifact_version": self.artifact_version, "command": self.command,
                "config": _json_config(self.config), "seed": self.seed,
                "outputs": dict(sorted(self.outputs.items())),
                "started": self.started, "finished": self.finished}
        return json.dumps(body, sort_keys=True, indent=2) + "\n"


def _json_config(cfg: dict) -> dict:
    return {k: (None if isinstance(v, float) and math.isinf(v) else v) for k, v in cfg.items()}


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Outputs:
    """Collects outputs of one command; writes them under ``out`` or to stdout."""

    def __init__(self, command: str, cfg: dict):
        self.out = Path(cfg["out"]) if cfg.get("out") else None
        self.manifest = RunManifest(command, cfg, cfg.get("seed"), started=_now())

    def write(self, name: str, text: str):
        if self.out is None:
            sys.stdout.write(text)
            return
        self.manifest.outputs[name] = atomic_write(self.out / name, text)

    def close(self):
        if self.out is not None:
            self.manifest.finished = _now()
            atomic_write(self.out / "manifest.json", self.manifest.to_json())


def _require_measure(cfg: dict):
    if not cfg.get("measure"):
        raise UsageError("--measure is required")
    return parse_measure(cfg["measure"])


def _single_n(cfg: dict) -> int:
    if len(cfg["n"]) != 1:
        raise UsageError("this command takes a single --n value")
    return cfg["n"][0]


# -- commands ---------------------------------------------------------------------------

def cmd_classify(cfg: dict) -> int:
    measure = _require_measure(cfg)
    report = classify(measure, ClassifyConfig(b_max=cfg["bmax"]), label=cfg["measure"])
    outs = Outputs("classify", cfg)
    if cfg["format"] == "json":
        outs.write("classification.json", report.to_json())
    else:
        outs.write("classification.txt", report.to_text())
    outs.close()
    return EXIT_INCONSISTENT if report.combined is CoalescentClass.INCONSISTENT else EXIT_OK


def cmd_simulate(cfg: dict) -> int:
    measure = _require_measure(cfg)
    n = _single_n(cfg)
    reps = cfg["replicates"]
    if reps < 1:
        raise UsageError("--replicates must be positive")
    outs = Outputs("simulate", cfg)
    if outs.out is None and reps > 1:
        raise UsageError("--out DIR is required for more than one replicate")
    for r in range(reps):
        seed = cfg["seed"] if reps == 1 else replicate_seed(cfg["seed"], r)
        hist = simulate(measure, SimConfig(n, cfg["horizon"], seed, cfg["scheme"]))
        outs.write("history.json" if reps == 1 else f"history_{r:05d}.json", hist.to_json())
        if r == 0:
            outs.manifest.config = {**cfg, "resolved_scheme": hist.scheme,
                                    "scheme_metadata": {k: v for k, v in hist.metadata.items()
                                                        if k in ("kingman_superposition", "fallback",
                                                                 "x_min", "requested_scheme")}}
    outs.close()
    return EXIT_OK


def cmd_analyze(cfg: dict) -> int:
    if cfg.get("history"):
        hist = CoalescentHistory.from_json(Path(cfg["history"]).read_text())
    else:
        measure = _require_measure(cfg)
        hist = simulate(measure, SimConfig(_single_n(cfg), cfg["horizon"], cfg["seed"], cfg["scheme"]))
    tree = tree_from_history(hist)
    allow = tree.censored
    rows = functionals_table(tree, cfg["eps_grid"], cfg["delta_grid"], allow_censored=allow)
    dist = distance_distribution(tree)
    outs = Outputs("analyze", cfg)
    payload = {"n": hist.n, "seed": hist.seed, "scheme": hist.scheme, "censored": tree.censored,
               "functionals": rows, "distance_distribution": dist.to_dict()}
    if cfg["format"] == "csv" or outs.out is not None:
        outs.write("functionals.csv", rows_to_csv(rows))
    if cfg["format"] != "csv" or outs.out is not None:
        outs.write("functionals.json", json.dumps(_finite(payload), sort_keys=True, indent=2) + "\n")
    if cfg.get("matrix") and outs.out is not None:
        outs.write("distances.csv", matrix_to_csv(tree.distance_matrix()))
    outs.close()
    return EXIT_OK


def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def cmd_report(cfg: dict) -> int:
    measure_spec = cfg.get("measure")
    _require_measure(cfg)
    study = StudyConfig(n_grid=tuple(cfg["n"]), eps_grid=tuple(cfg["eps_grid"]),
                        delta_grid=tuple(cfg["delta_grid"]), eta_grid=tuple(cfg["eta_grid"]),
                        replicates=cfg["replicates"], seed=cfg["seed"], scheme=cfg["scheme"],
                        b_max=cfg["bmax"])
    if not cfg.get("out"):
        raise UsageError("--out DIR is required for report")
    outs = Outputs("report", cfg)
    report = compactness_report(measure_spec, study, jobs=cfg["jobs"])
    outs.write("report.json", report.to_json())
    outs.write("report.csv", report.to_csv())
    outs.close()
    sys.stdout.write(f"{report.measure}: {report.analytic_class}; {report.verdict}\n")
    for w in report.warnings:
        sys.stdout.write(f"warning: {w}\n")
    return EXIT_OK if report.consistent else EXIT_INCONSISTENT


COMMANDS = {"classify": cmd_classify, "simulate": cmd_simulate, "analyze": cmd_analyze,
            "report": cmd_report}


def cmd_reproduce(manifest_path: str, out: str | None) -> int:
    manifest = json.loads(Path(manifest_path).read_text())
    if manifest.get("artifact_version") != __version__:
        sys.stderr.write(f"warning: manifest from version {manifest.get('artifact_version')}, "
                         f"running {__version__}\n")
    cfg = dict(manifest["config"])
    for k in ("resolved_scheme", "scheme_metadata"):
        cfg.pop(k, None)
    if cfg.get("horizon") is None:
        cfg["horizon"] = math.inf
    tmp = None
    if out is None:
        tmp = tempfile.TemporaryDirectory(prefix="lambdatree-reproduce-")
        out = tmp.name
    cfg["out"] = out
    try:
        COMMANDS[manifest["command"]](cfg)
        fresh = json.loads((Path(out) / "manifest.json").read_text())["outputs"]
    finally:
        if tmp is not None:
            tmp.cleanup()
    ok = True
    for name, digest in sorted(manifest["outputs"].items()):
        same = fresh.get(name) == digest
        ok &= same
        sys.stdout.write(f"{'identical' if same else 'DIFFERENT'}  {name}\n")
    extra = sorted(set(fresh) - set(manifest["outputs"]))
    for name in extra:
        sys.stdout.write(f"DIFFERENT  {name} (not in manifest)\n")
    return EXIT_OK if ok and not extra else EXIT_NUMERIC


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "reproduce":
            return cmd_reproduce(args.manifest, args.out)
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        sys.stderr.write(f"{exc}\n")
        return EXIT_USAGE
    except (MeasureError, ValueError) as exc:
        sys.stderr.write(f"validation error: {exc}\n")
        return EXIT_VALIDATION
    except OSError as exc:
        sys.stderr.write(f"cannot write output: {exc}\n")
        return EXIT_VALIDATION
    except (NumericalError, ArithmeticError) as exc:
        sys.stderr.write(f"numerical failure: {exc}\n")
        return EXIT_NUMERIC
    except LambdaTreeError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
