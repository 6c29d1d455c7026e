"""Command-line entry point.

Every subcommand accepts ``--config FILE`` with one ``key = value`` per line
(``#`` starts a comment; list values are comma separated).  Keys are the
field names of :class:`~qmc_control.experiments.ExperimentConfig`; flags on
the command line override the file.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
from pathlib import Path

from .experiments import (
    ExperimentConfig,
    run_cbc,
    run_fe_error,
    run_optimize,
    run_qmc_error,
    run_trunc_error,
    write_control,
)
from .fem import SolverError
from .lattice import save_generating_vector
from .optimize import BacktrackError

COMMANDS = {
    "fe-error": "fe_error",
    "trunc-error": "trunc_error",
    "qmc-error": "qmc_error",
    "optimize": "optimize",
    "cbc": "cbc",
}

_TUPLE_FIELDS = {"s_list", "levels", "m_list"}


def _convert(name: str, raw: str):
    f = {f.name: f for f in dataclasses.fields(ExperimentConfig)}.get(name)
    if f is None:
        raise ValueError(f"unknown config key {name!r}")
    raw = raw.strip()
    if name in _TUPLE_FIELDS:
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if name in ("genvec", "output", "m") and raw.lower() in ("", "none"):
        return None
    typ = f.type if isinstance(f.type, str) else f.type.__name__
    if typ.startswith("int"):
        return int(raw)
    if typ.startswith("float"):
        return float(raw)
    return raw


def read_config(path) -> dict:
    """Parse a ``key = value`` file into typed config overrides."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, val = (t.strip() for t in line.split("=", 1))
        out[key] = _convert(key, val)
    return out


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qmc-control", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="key = value configuration file")
        for f in dataclasses.fields(ExperimentConfig):
            if f.name == "kind":
                continue
            sp.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper())
    return p


def build_config(args) -> ExperimentConfig:
    values = {"kind": COMMANDS[args.command]}
    if args.config:
        values.update(read_config(args.config))
        values["kind"] = COMMANDS[args.command]
    for f in dataclasses.fields(ExperimentConfig):
        raw = getattr(args, f.name, None)
        if f.name != "kind" and raw is not None:
            values[f.name] = _convert(f.name, raw)
    return ExperimentConfig(**values)


def _default_output(cfg: ExperimentConfig) -> str:
    return cfg.output or {"cbc": "genvec.txt"}.get(cfg.kind, f"{cfg.kind}.csv")


def run(cfg: ExperimentConfig) -> int:
    out = Path(_default_output(cfg))
    t0 = time.perf_counter()
    if cfg.kind == "cbc":
        gv = run_cbc(cfg)
        save_generating_vector(gv, out)
        print(f"n={gv.n} s={gv.s} sha256={gv.digest()} -> {out}")
    elif cfg.kind == "optimize":
        report, z, trace = run_optimize(cfg)
        report.to_csv(out)
        control = out.with_name(out.stem + "_control.csv")
        write_control(z, control)
        print(f"iterations={trace.iterations} converged={trace.converged} "
              f"J={trace.rows[-1]['J']:.10g} misfit={trace.rows[-1]['misfit']:.10g} -> {out}, {control}")
    else:
        runner = {"fe_error": run_fe_error, "trunc_error": run_trunc_error, "qmc_error": run_qmc_error}[cfg.kind]
        report = runner(cfg)
        report.to_csv(out)
        rates = " ".join(f"{k}={v:.4f}" for k, v in report.rates.items())
        print(f"rates: {rates} -> {out}")
    logging.getLogger(__name__).info("wall time %.2f s", time.perf_counter() - t0)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(build_config(args))
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, BacktrackError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
