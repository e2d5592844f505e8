"""Batch front-end: ``mvperiodic {simulate,certify,lyapunov,sweep,examples} ...``.

Structured settings come from a JSON config file; flags cover only the seed,
the output directory, the thread cap and verbosity. Exit codes: 0 success,
1 configuration error, 2 blow-up, 3 scientific check failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .expr import ExprError
from .lyapunov import (
    LyapunovError, LyapunovSpec, chebyshev_tail_bound, quadratic_spec, radial_scan, tail_criteria,
    visited_sup_LV,
)
from .measure import ParticleCloud, normal_cloud, read_csv
from .model import BUILTINS, ModelError, builtin_example, load_model
from .periodic import (
    DEFAULT_BURN_IN, DEFAULT_PHASES, DEFAULT_RADII, DEFAULT_TOL, DEFAULT_TRAILING, certify_periodic,
    parameter_sweep, period_map_iterate,
)
from .rng import default_threads
from .simulate import BlowUpError, ConfigError, SimConfig, export_trajectory, simulate_coupled, simulate_flow

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_FAIL = 0, 1, 2, 3
TIMESTAMP_KEY = "created"

log = logging.getLogger("mvperiodic")


# --- config parsing ------------------------------------------------------------------

def _block(doc, where: str, allowed, required=()) -> dict:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = set(doc) - set(allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ConfigError(f"{where}: missing keys {missing}")
    return doc


def _model(ref):
    if isinstance(ref, dict) and "builtin" in ref:
        b = _block(ref, "model", ("builtin", "params"), ("builtin",))
        return builtin_example(b["builtin"], **(b.get("params") or {}))
    return load_model(ref)


SIM_KEYS = ("N", "dt", "t0", "t1", "seed", "record_stride", "blowup_radius")


def _sim(doc, seed, threads, need_t1=True) -> SimConfig:
    b = _block(doc, "sim", SIM_KEYS, ("N", "dt") + (("t1",) if need_t1 else ()))
    for k in ("N", "record_stride"):
        if k in b and not (isinstance(b[k], int) and not isinstance(b[k], bool)):
            raise ConfigError(f"sim.{k} must be an integer")
    for k in ("dt", "t0", "t1", "blowup_radius"):
        if k in b and not isinstance(b[k], (int, float)):
            raise ConfigError(f"sim.{k} must be a number")
    if b["dt"] <= 0:
        raise ConfigError("sim.dt must be positive")
    if b["N"] < 1:
        raise ConfigError("sim.N must be a positive integer")
    t0 = float(b.get("t0", 0.0))
    return SimConfig(N=b["N"], dt=float(b["dt"]), t0=t0, t1=float(b.get("t1", t0 + 1.0)),
                     seed=int(seed if seed is not None else b.get("seed", 0)),
                     record_stride=b.get("record_stride", 1),
                     blowup_radius=float(b.get("blowup_radius", 1e6)), threads=threads)


def _init(doc, N: int, t0: float, seed: int) -> ParticleCloud:
    b = _block(doc or {"type": "dirac", "x": [0.0]}, "init", ("type", "x", "mean", "std", "path"),
               ("type",))
    kind = b["type"]
    if kind == "dirac":
        return ParticleCloud.dirac(b.get("x", [0.0]), t0)
    if kind == "normal":
        return normal_cloud(N, b.get("mean", 0.0), b.get("std", 1.0), seed=seed, time_stamp=t0)
    if kind == "csv":
        if "path" not in b:
            raise ConfigError("init: csv needs 'path'")
        return read_csv(b["path"]).at(t0)
    raise ConfigError(f"init.type must be dirac, normal or csv, not {kind!r}")


def _certify_opts(doc) -> dict:
    b = _block(doc, "certify", ("burn_in", "trailing", "m", "tol", "radii"))
    return {"burn_in": int(b.get("burn_in", DEFAULT_BURN_IN)),
            "trailing": int(b.get("trailing", DEFAULT_TRAILING)),
            "m": int(b.get("m", DEFAULT_PHASES)), "tol": float(b.get("tol", DEFAULT_TOL)),
            "radii": tuple(float(r) for r in b.get("radii", DEFAULT_RADII))}


def _write_json(obj, path: Path) -> None:
    doc = dict(obj)
    doc[TIMESTAMP_KEY] = datetime.now(timezone.utc).isoformat()
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _load_config(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc


# --- commands ----------------------------------------------------------------------------

def cmd_simulate(doc: dict, seed, out: Path, threads: int) -> int:
    b = _block(doc, "config", ("model", "sim", "init", "coupled_x0"), ("model", "sim"))
    ms = _model(b["model"])
    cfg = _sim(b["sim"], seed, threads)
    cfg.validate(ms.T)
    init = _init(b.get("init"), cfg.N, cfg.t0, cfg.seed)
    try:
        if "coupled_x0" in b:
            traj = simulate_coupled(ms, b["coupled_x0"], init, cfg)
        else:
            traj = simulate_flow(ms, init, cfg)
    except BlowUpError as exc:
        log.error("%s", exc)
        if exc.partial is not None:
            exc.partial.meta["blowup"] = {"t": exc.t, "particle": exc.index}
            export_trajectory(exc.partial, out)
        return EXIT_BLOWUP
    export_trajectory(traj, out)
    log.info("wrote %d snapshots to %s", len(traj.snapshots), out)
    return EXIT_OK


def cmd_certify(doc: dict, seed, out: Path, threads: int) -> int:
    b = _block(doc, "config", ("model", "sim", "init", "certify", "period_map"), ("model", "sim"))
    ms = _model(b["model"])
    cfg = _sim(b["sim"], seed, threads, need_t1=False)
    opts = _certify_opts(b.get("certify"))
    init = _init(b.get("init"), cfg.N, cfg.t0, cfg.seed)
    try:
        cert = certify_periodic(ms, init, cfg, **opts)
    except BlowUpError as exc:
        log.error("%s", exc)
        return EXIT_BLOWUP
    out.mkdir(parents=True, exist_ok=True)
    _write_json(cert.to_dict(), out / "certificate.json")
    cert.phase_set.write(out / "phases")
    log.info("certificate: %s (max distance %.4g, tol %.4g)",
             "pass" if cert.verdict else "fail", cert.max_distance, cert.tol)
    if "period_map" in b:
        pm = _block(b["period_map"], "period_map", ("max_iters", "tol"))
        try:
            ps, plog = period_map_iterate(ms, init, cfg, int(pm.get("max_iters", 20)),
                                          float(pm.get("tol", opts["tol"])), opts["m"])
        except BlowUpError as exc:
            log.error("%s", exc)
            return EXIT_BLOWUP
        ps.write(out / "period_map_phases")
        _write_json({"log": plog.to_dict(), "distance_to_certified": ps.distances(cert.phase_set)},
                    out / "period_map.json")
    return EXIT_OK if cert.verdict else EXIT_FAIL


def cmd_lyapunov(doc: dict, seed, out: Path, threads: int) -> int:
    b = _block(doc, "config", ("model", "lyapunov", "scan", "sim", "init", "tails", "chebyshev"),
               ("model",))
    ms = _model(b["model"])
    lb = _block(b.get("lyapunov"), "lyapunov", ("v0", "v1"))
    ls = (LyapunovSpec.from_strings(lb["v0"], lb["v1"], ms.T, ms.d) if lb
          else quadratic_spec(ms.T, ms.d))
    sb = _block(b.get("scan"), "scan", ("radii", "n_samples"))
    scan_seed = int(seed if seed is not None else 0)
    scan = radial_scan(ls, ms, sb.get("radii", [1.0, 2.0, 4.0, 8.0]), int(sb.get("n_samples", 2000)),
                       scan_seed)
    out.mkdir(parents=True, exist_ok=True)
    _write_json({"lyapunov": ls.to_dict(), "scan": scan.to_dict()}, out / "scan.json")
    scan.write_csv(out / "scan.csv")
    code = EXIT_OK
    if "sim" in b:
        cfg = _sim(b["sim"], seed, threads)
        init = _init(b.get("init"), cfg.N, cfg.t0, cfg.seed)
        try:
            traj = simulate_flow(ms, init, cfg)
        except BlowUpError as exc:
            log.error("%s", exc)
            return EXIT_BLOWUP
        if "tails" in b:
            tb = _block(b["tails"], "tails", ("radii", "s0", "n"))
            rep = tail_criteria(traj, tb.get("radii", [2.0, 4.0, 8.0]), ms.T, tb.get("s0"), tb.get("n"))
            _write_json(rep.to_dict(), out / "tails.json")
            rep.write_csv(out / "tails.csv")
        if "chebyshev" in b:
            cb = _block(b["chebyshev"], "chebyshev", ("R", "lambda"), ("R",))
            lam = cb.get("lambda", "auto")
            if lam == "auto":
                lam = max(0.0, visited_sup_LV(ls, ms, traj))
            rep = chebyshev_tail_bound(ls, ms, traj, float(lam), float(cb["R"]), seed=scan_seed)
            _write_json(rep.to_dict(), out / "chebyshev.json")
            if not rep.holds:
                code = EXIT_FAIL
    return code


def cmd_sweep(doc: dict, seed, out: Path, threads: int) -> int:
    b = _block(doc, "config", ("models", "family", "sim", "init", "certify"), ("sim",))
    if ("models" in b) == ("family" in b):
        raise ConfigError("give exactly one of 'models' or 'family'")
    if "models" in b:
        models = [_model(r) for r in b["models"]]
        labels = list(range(len(models)))
    else:
        fb = _block(b["family"], "family", ("builtin", "param", "values", "base_params"),
                    ("builtin", "param", "values"))
        base = dict(fb.get("base_params") or {})
        models, labels = [], []
        for v in fb["values"]:
            models.append(builtin_example(fb["builtin"], **{**base, fb["param"]: v}))
            labels.append(v)
    cfg = _sim(b["sim"], seed, threads, need_t1=False)
    opts = _certify_opts(b.get("certify"))
    init = _init(b.get("init"), cfg.N, cfg.t0, cfg.seed)
    rep = parameter_sweep(models, init, cfg, labels, **opts)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(rep.to_dict(), out / "sweep.json")
    return EXIT_OK


def cmd_examples(action: str) -> int:
    if action != "list":
        raise ConfigError("only 'examples list' is supported")
    for name in BUILTINS:
        ms = builtin_example(name)
        drift = ms.to_dict()["drift"][0]
        diff = ms.to_dict()["diffusion"][0][0]
        print(f"{name}: drift {drift}; diffusion {diff}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "certify": cmd_certify, "lyapunov": cmd_lyapunov,
            "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvperiodic", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=f"mvperiodic {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, help=f"{name} workflow from a JSON config")
        sp.add_argument("config", help="path to the JSON config")
        sp.add_argument("--seed", type=int, default=None, help="overrides sim.seed")
        sp.add_argument("--out", default=f"out_{name}", help="output directory")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker cap (default from MVPERIODIC_THREADS, else 1)")
        sp.add_argument("-v", "--verbose", action="count", default=0)
    ep = sub.add_parser("examples", help="built-in models")
    ep.add_argument("action", choices=["list"])
    ep.add_argument("-v", "--verbose", action="count", default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "examples":
            return cmd_examples(args.action)
        threads = args.threads if args.threads is not None else default_threads()
        if threads < 1:
            raise ConfigError("--threads must be positive")
        doc = _load_config(args.config)
        return COMMANDS[args.command](doc, args.seed, Path(args.out), threads)
    except (ConfigError, ModelError, LyapunovError, ExprError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
