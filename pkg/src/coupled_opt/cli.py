"""Command-line experiment runner.

    coupled-opt run --seed 1 --horizon 1200 --rho 0.07 --out runs/s1
    coupled-opt reference --seed 1 --n 3 --p 2 --out runs/tiny
    coupled-opt tune --seed 1 --horizon 1200 --rho-grid 0.01,0.03,0.1
    coupled-opt generate --seed 1 --out runs/s1

Settings come from ``--config`` (JSON, or YAML by extension) and are
overridden by flags. Every file is written inside the output directory
(``--out``, else ``$COUPLED_OPT_OUT``, else ``./out``).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import subprocess
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .engine import (EngineError, InvariantViolation, bound_optimal_rho, default_rho, default_step_c, run,
                     run_subgradient_baseline)
from .graph import TopologyError, build_topology, spectral
from .local_solver import InnerSolveError
from .metrics import evaluate_bounds, fit_rate, write_trace
from .problem import InstanceError, ProblemInstance, generate_instance
from .reference import ReferenceError, ReferenceSolution, grid_reference, solve_reference

log = logging.getLogger("coupled_opt")

ALGORITHMS = ("accelerated", "subgradient", "accelerated-literal-lambda")

EXIT_OK, EXIT_CONFIG, EXIT_DISAGREE, EXIT_SOLVER = 0, 2, 3, 4


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    seed: int | None = None
    n: int = 20
    p: int = 5
    kappa: float = 100.0
    instance: str | None = None
    topology: object = "ring_plus"
    algo: str = "accelerated"
    rho: float | str | None = None
    N: int = 1200
    inner_tol: float | None = None
    step_c: float | None = None
    reference: str | None = None
    reference_tol: float = 1e-10
    sweep_horizons: list | None = None
    rho_grid: list | None = None
    workers: int | None = None
    out: str | None = None
    debug: bool = False
    timing: bool = False
    verbosity: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


_KEYS = {f.name for f in fields(RunConfig)}
_ALIASES = {"horizon": "N", "algorithm": "algo", "out_dir": "out"}


def _as_int(key, v, minimum=None):
    if isinstance(v, bool):
        raise ConfigError(key, f"expected an integer, got {v!r}")
    try:
        iv = int(v.strip()) if isinstance(v, str) else int(v)
        if isinstance(v, float) and iv != v:
            raise ValueError
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected an integer, got {v!r}") from None
    if minimum is not None and iv < minimum:
        raise ConfigError(key, f"must be >= {minimum}, got {iv}")
    return iv


def _as_float(key, v, positive=False):
    if isinstance(v, bool):
        raise ConfigError(key, f"expected a number, got {v!r}")
    try:
        fv = float(v)
    except (TypeError, ValueError):
        raise ConfigError(key, f"expected a number, got {v!r}") from None
    if not math.isfinite(fv):
        raise ConfigError(key, f"must be finite, got {v!r}")
    if positive and fv <= 0:
        raise ConfigError(key, f"must be positive, got {fv}")
    return fv


def _as_list(key, v, conv):
    if isinstance(v, str):
        v = [s for s in v.split(",") if s.strip()]
    if not isinstance(v, (list, tuple)) or not v:
        raise ConfigError(key, f"expected a non-empty list, got {v!r}")
    return [conv(key, x) for x in v]


def load_config_file(path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    try:
        if p.suffix in (".yaml", ".yml"):
            import yaml
            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except Exception as exc:
        raise ConfigError("config", f"cannot parse {path}: {exc}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path} must hold a mapping of settings")
    return data


def parse_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Merge file settings with flag overrides and validate.

    ``None`` overrides mean "not given on the command line".
    """
    raw: dict = {}
    for source in (file_values or {}, {k: v for k, v in (overrides or {}).items() if v is not None}):
        for key, value in source.items():
            key = _ALIASES.get(key, key)
            if key not in _KEYS:
                raise ConfigError(key, "unknown setting")
            raw[key] = value

    has_gen = "seed" in raw
    has_file = raw.get("instance") is not None
    if has_gen and has_file:
        raise ConfigError("instance", "conflicting problem sources: give either 'seed' or 'instance', not both")
    if not has_gen and not has_file:
        raise ConfigError("seed", "missing required setting (or give 'instance')")

    cfg = RunConfig()
    if has_gen:
        cfg.seed = _as_int("seed", raw["seed"], minimum=0)
    if has_file:
        cfg.instance = str(raw["instance"])
    if "n" in raw:
        cfg.n = _as_int("n", raw["n"], minimum=2)
    if "p" in raw:
        cfg.p = _as_int("p", raw["p"], minimum=1)
    if "kappa" in raw:
        cfg.kappa = _as_float("kappa", raw["kappa"])
        if cfg.kappa < 1:
            raise ConfigError("kappa", f"must be >= 1, got {cfg.kappa}")
    if "topology" in raw:
        topo = raw["topology"]
        if not isinstance(topo, (str, dict, list)):
            raise ConfigError("topology", f"expected a name or an edge list, got {topo!r}")
        cfg.topology = topo
    if "algo" in raw:
        if raw["algo"] not in ALGORITHMS:
            raise ConfigError("algo", f"expected one of {', '.join(ALGORITHMS)}, got {raw['algo']!r}")
        cfg.algo = raw["algo"]
    if "rho" in raw:
        if raw["rho"] in ("auto", "bound-optimal", "horizon"):
            cfg.rho = raw["rho"]
        else:
            cfg.rho = _as_float("rho", raw["rho"], positive=True)
    if "N" in raw:
        cfg.N = _as_int("N", raw["N"], minimum=1)
    if "inner_tol" in raw:
        cfg.inner_tol = _as_float("inner_tol", raw["inner_tol"], positive=True)
    if "step_c" in raw:
        cfg.step_c = _as_float("step_c", raw["step_c"], positive=True)
    if "reference" in raw:
        cfg.reference = str(raw["reference"])
    if "reference_tol" in raw:
        cfg.reference_tol = _as_float("reference_tol", raw["reference_tol"], positive=True)
    if "sweep_horizons" in raw:
        cfg.sweep_horizons = _as_list("sweep_horizons", raw["sweep_horizons"], lambda k, v: _as_int(k, v, 1))
    if "rho_grid" in raw:
        cfg.rho_grid = _as_list("rho_grid", raw["rho_grid"], lambda k, v: _as_float(k, v, positive=True))
    if "workers" in raw:
        cfg.workers = _as_int("workers", raw["workers"], minimum=1)
    if "out" in raw:
        cfg.out = str(raw["out"])
    for flag in ("debug", "timing"):
        if flag in raw:
            if not isinstance(raw[flag], bool):
                raise ConfigError(flag, f"expected true/false, got {raw[flag]!r}")
            setattr(cfg, flag, raw[flag])
    if "verbosity" in raw:
        cfg.verbosity = _as_int("verbosity", raw["verbosity"], minimum=0)
    return cfg


def version_string() -> str:
    try:
        from importlib.metadata import version
        base = version("artifact")
    except Exception:
        base = "0+unknown"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                              capture_output=True, text=True, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{base}+g{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return base


def output_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out or os.environ.get("COUPLED_OPT_OUT") or "out")
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_problem(cfg: RunConfig) -> ProblemInstance:
    if cfg.instance is not None:
        return ProblemInstance.load(cfg.instance)
    return generate_instance(cfg.seed, n=cfg.n, p=cfg.p, kappa=cfg.kappa)


def load_network(cfg: RunConfig, n: int):
    topo = cfg.topology
    if isinstance(topo, str) and topo.endswith(".json"):
        topo = json.loads(Path(topo).read_text())
    return build_topology(topo, n)


def _workers(cfg: RunConfig) -> int:
    return cfg.workers or os.cpu_count() or 1


def _reference(cfg: RunConfig, inst: ProblemInstance) -> tuple[ReferenceSolution, str]:
    if cfg.reference is not None:
        return ReferenceSolution.load(cfg.reference), cfg.reference
    return solve_reference(inst, tol=cfg.reference_tol, workers=_workers(cfg)), "computed"


def _resolve_rho(cfg: RunConfig, inst, net, ref, N) -> float:
    sp = spectral(net)
    if cfg.rho is None or cfg.rho == "horizon":
        return default_rho(sp.norm_W, N)
    if cfg.rho in ("auto", "bound-optimal"):
        dist = math.sqrt(inst.n) * float(np.linalg.norm(ref.y_star))
        return bound_optimal_rho(dist, sp.norm_W, sp.lambda2_W)
    return float(cfg.rho)


def _progress(every):
    def cb(k, _state, rec):
        if k % every == 0:
            log.info("k=%d rel=%.3e feas=%.3e cons=%.3e", k, rec.rel_primal_error, rec.feas_residual,
                     rec.consensus_error)
    return cb


def execute(cfg: RunConfig, inst: ProblemInstance, net, ref: ReferenceSolution, N: int):
    """Run the configured algorithm for horizon ``N``; returns ``(result, rho or step)``."""
    cb = _progress(max(1, N // 10))
    common = dict(f_star=ref.f_star, workers=_workers(cfg), callback=cb, timing=cfg.timing, debug=cfg.debug)
    if cfg.algo == "subgradient":
        c = cfg.step_c or default_step_c(inst)
        return run_subgradient_baseline(inst, net, c, N, **common), {"step_c": c}
    rho = _resolve_rho(cfg, inst, net, ref, N)
    res = run(inst, net, rho, N, literal_lambda=cfg.algo == "accelerated-literal-lambda",
              inner_tol=cfg.inner_tol, **common)
    return res, {"rho": rho}


def _final(inst, ref, res) -> dict:
    last = res.trace[-1]
    return {
        "k": last.k,
        "rel_primal_error": last.rel_primal_error,
        "feas_residual": last.feas_residual,
        "consensus_error": last.consensus_error,
        "primal_gap": inst.objective_value(res.x_final) - ref.f_star,
        "dist_to_x_star": float(np.linalg.norm(res.x_final - np.asarray(ref.x_star))),
    }


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def cmd_run(cfg: RunConfig) -> int:
    out = output_dir(cfg)
    inst = load_problem(cfg)
    if cfg.instance is None:
        inst.save(out / "instance.json")
    net = load_network(cfg, inst.n)
    ref, ref_source = _reference(cfg, inst)
    if ref_source == "computed":
        ref.save(out / "reference.json")
    sp = spectral(net)
    summary = {"version": version_string(), "config": cfg.to_dict(), "reference_source": ref_source,
               "f_star": ref.f_star, "network": {"norm_W": sp.norm_W, "lambda2_W": sp.lambda2_W},
               "constants": {"mu_f": inst.mu_f, "l_h": inst.l_h, "l_g": inst.l_g}}
    horizons = cfg.sweep_horizons or [cfg.N]
    sweep = []
    status = EXIT_OK
    for N in horizons:
        name = "trace.csv" if len(horizons) == 1 else f"trace_N{N}.csv"
        try:
            res, knobs = execute(cfg, inst, net, ref, N)
        except EngineError as exc:
            write_trace(exc.trace, out / name)
            log.error("solver failure at N=%d: %s", N, exc)
            summary["error"] = {"N": N, "k": exc.k, "agents": exc.agents, "message": str(exc)}
            status = EXIT_SOLVER
            break
        except InvariantViolation as exc:
            log.error("invariant violated at N=%d: %s", N, exc)
            summary["error"] = {"N": N, "message": str(exc)}
            status = EXIT_SOLVER
            break
        write_trace(res.trace, out / name)
        entry = {"N": N, "trace": name, **knobs, "final": _final(inst, ref, res)}
        if res.schedule is not None:
            s = res.schedule
            entry["schedule"] = {"rho": s.rho, "N": s.N, "l_g": s.l_g, "norm_W": s.norm_W,
                                 "eta_1": s.eta(1), "eta_N": s.eta(N), "theta_1": s.theta(1), "beta_N": s.beta(N)}
            entry["bounds"] = evaluate_bounds(inst, net, ref, s.rho, N).to_dict()
        sweep.append(entry)
    summary["runs"] = sweep
    if len(sweep) >= 3:
        feas = [(e["N"], e["final"]["feas_residual"]) for e in sweep]
        summary["feas_rate_slope"] = fit_rate(feas) if all(v > 0 for _, v in feas) else None
    _write_json(out / "summary.json", summary)
    return status


def cmd_reference(cfg: RunConfig) -> int:
    out = output_dir(cfg)
    inst = load_problem(cfg)
    if cfg.instance is None:
        inst.save(out / "instance.json")
    tol = cfg.reference_tol
    ref = solve_reference(inst, tol=tol, workers=_workers(cfg))
    ref.save(out / "reference.json")
    if inst.n <= 3 and inst.p <= 2:
        x_grid, f_grid = grid_reference(inst, tol=min(tol, 1e-10))
        gap = abs(f_grid - ref.f_star)
        check = {"f_grid": f_grid, "f_dual": ref.f_star, "abs_diff": gap, "limit": 10 * tol,
                 "x_diff": float(np.linalg.norm(x_grid - ref.x_star))}
        _write_json(out / "reference_check.json", check)
        if gap > 10 * tol:
            log.error("reference oracles disagree: |f_grid - f_dual| = %.3e > %.1e", gap, 10 * tol)
            return EXIT_DISAGREE
    return EXIT_OK


def cmd_tune(cfg: RunConfig) -> int:
    """Scan a grid of penalties and report final-iterate errors for each."""
    out = output_dir(cfg)
    inst = load_problem(cfg)
    net = load_network(cfg, inst.n)
    ref, _ = _reference(cfg, inst)
    grid = cfg.rho_grid or list(np.geomspace(0.005, 1.0, 17))
    rows = []
    for rho in grid:
        res = run(inst, net, rho, cfg.N, f_star=ref.f_star, workers=_workers(cfg), inner_tol=cfg.inner_tol,
                  literal_lambda=cfg.algo == "accelerated-literal-lambda")
        last = res.trace[-1]
        rows.append((float(rho), last.rel_primal_error, last.feas_residual, last.consensus_error))
        log.info("rho=%.4g rel=%.3e feas=%.3e", rho, last.rel_primal_error, last.feas_residual)
    with open(out / "tune.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rho", "rel_primal_error", "feas_residual", "consensus_error"])
        w.writerows([[repr(v) for v in r] for r in rows])
    best = min(rows, key=lambda r: r[1])
    _write_json(out / "tune.json", {"N": cfg.N, "best_rho_by_rel_error": best[0], "best": best,
                                    "version": version_string()})
    print(f"best rho by relative error: {best[0]!r} (rel {best[1]:.3e}, feas {best[2]:.3e})")
    return EXIT_OK


def cmd_generate(cfg: RunConfig) -> int:
    out = output_dir(cfg)
    inst = load_problem(cfg)
    inst.save(out / "instance.json")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "reference": cmd_reference, "tune": cmd_tune, "generate": cmd_generate}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coupled-opt", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", help="JSON or YAML settings file")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--n", type=int)
    ap.add_argument("--p", type=int)
    ap.add_argument("--kappa", type=float)
    ap.add_argument("--instance", help="instance JSON instead of generator settings")
    ap.add_argument("--topology", help="ring_plus, path, complete, or an edge-list JSON file")
    ap.add_argument("--algo", choices=ALGORITHMS)
    ap.add_argument("--rho", help="penalty: a number, 'horizon' (1/(|W|N)) or 'auto' (bound-optimal)")
    ap.add_argument("--horizon", "-N", dest="N", type=int)
    ap.add_argument("--inner-tol", dest="inner_tol", type=float)
    ap.add_argument("--step-c", dest="step_c", type=float, help="baseline step constant")
    ap.add_argument("--reference", help="reference.json fixture")
    ap.add_argument("--tol", dest="reference_tol", type=float, help="reference solver tolerance")
    ap.add_argument("--sweep-horizons", dest="sweep_horizons", help="comma-separated horizons")
    ap.add_argument("--rho-grid", dest="rho_grid", help="comma-separated penalties for 'tune'")
    ap.add_argument("--workers", type=int)
    ap.add_argument("--out")
    ap.add_argument("--debug", action="store_true", default=None, help="add inner-solver columns to the trace")
    ap.add_argument("--timing", action="store_true", default=None, help="record wall-clock times in the trace")
    ap.add_argument("-v", "--verbose", dest="verbosity", action="count", default=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    flags = vars(args).copy()
    command = flags.pop("command")
    config_path = flags.pop("config")
    try:
        cfg = parse_config(load_config_file(config_path) if config_path else {}, flags)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if cfg.verbosity else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[command](cfg)
    except (InstanceError, TopologyError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ReferenceError, InnerSolveError) as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
