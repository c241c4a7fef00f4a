"""Command line front end.

Every subcommand reads a flat key = value configuration (file plus --set
overrides) against a closed schema -- unknown keys are configuration errors,
not typos to ignore silently.  Results go to an output directory as plain
text tables plus a manifest.json listing the SHA-256 digest of every data
file, so two runs agree exactly iff their manifests agree.  Timestamps live
only in the run.log sidecar, which is excluded from the manifest.  Each error
class maps to its own exit code (see errors.EXIT_CODES); exit 14 means the
run finished but a requested assertion did not hold.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import json
import logging
import os
import sys

import numpy as np

from . import asymptotics, ldp, limits, pdefield, problems, serialize, simulate
from .errors import (EXIT_ASSERTION_FAILED, ConfigError, FbsdeLabError,
                     exit_code_for)

_BASE_SCHEMA = {
    "problem": (str, "linear"),
    "a": (float, 2.0),
    "b": (float, 2.0),
    "c": (float, 1.0),
    "sigma0": (float, 1.0),
    "zeta": (float, 0.5),
    "t0": (float, 0.0),
    "horizon": (float, 0.5),
    "x0": (float, 1.0),
    "n": (int, 1),
    "d": (int, 1),
    "box_lo": (float, -6.0),
    "box_hi": (float, 6.0),
    "sample_radius": (float, 2.0),
    "epsilons": (str, "1.0,0.3,0.1,0.03"),
    "n_t": (int, 201),
    "n_x": (int, 201),
    "margin": (float, 0.25),
    "seed": (int, 1),
    "paths": (int, 2000),
}

_EXTRA_SCHEMA = {
    "check-assumptions": {"samples": (int, 4096), "epsilon": (float, 0.1)},
    "solve-field": {},
    "limit": {"method": (str, "shooting"), "steps": (int, 200)},
    "simulate": {"epsilon": (float, 0.1)},
    "sweep-moments": {},
    "sweep-noise-gap": {},
    "sweep-start-gap": {"x_a": (float, 0.5), "x_b": (float, 1.5)},
    "sweep-time-gap": {"t_a": (float, 0.0), "t_b": (float, 0.25)},
    "deviation": {"radius": (float, 0.5)},
    "tightness": {"outer": (int, 32), "inner": (int, 256), "partition": (int, 16)},
    "ldp": {"mode": (str, "tube"), "radius": (float, 0.25), "target": (float, 0.0),
            "tilt": (int, 1), "intervals": (int, 64)},
}


def _schema(command: str) -> dict:
    schema = dict(_BASE_SCHEMA)
    schema.update(_EXTRA_SCHEMA[command])
    return schema


def load_config(schema: dict, config_path, overrides) -> dict:
    """Merge defaults, an optional config file, and --set overrides."""
    cfg = {key: default for key, (_, default) in schema.items()}

    def apply(key, raw, where):
        if key not in schema:
            raise ConfigError(f"unknown configuration key {key!r} in {where}; "
                              f"known keys: {', '.join(sorted(schema))}")
        typ = schema[key][0]
        try:
            cfg[key] = typ(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r} in {where}: {raw!r} "
                              f"is not {typ.__name__}") from exc

    if config_path:
        try:
            with open(config_path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from exc
        for ln, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{config_path}:{ln}: expected key = value, got {line!r}")
            key, _, raw = line.partition("=")
            apply(key.strip(), raw, f"{config_path}:{ln}")
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        apply(key.strip(), raw, "--set")
    return cfg


def _build_problem(cfg: dict) -> problems.ProblemSpec:
    try:
        eps = tuple(float(tok) for tok in cfg["epsilons"].split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigError(f"bad epsilons list {cfg['epsilons']!r}") from exc
    try:
        return problems.build_problem(
            cfg["problem"], a=cfg["a"], b=cfg["b"], c=cfg["c"],
            sigma0=cfg["sigma0"], zeta=cfg["zeta"], t0=cfg["t0"],
            horizon=cfg["horizon"], x0=cfg["x0"], n=cfg["n"], d=cfg["d"],
            box=(cfg["box_lo"], cfg["box_hi"]),
            sample_radius=cfg["sample_radius"], epsilons=eps)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _make_bank(problem, cfg, args=None) -> pdefield.FieldBank:
    grid = pdefield.make_grid(problem, cfg["n_t"], cfg["n_x"], cfg["margin"])
    bank = pdefield.FieldBank(problem, grid)
    threads = max(1, int(getattr(args, "threads", 1) or 1)) if args else 1
    if threads > 1:
        # Field solves at different noise levels are independent; prefill the
        # cache in parallel.  The boundary table must exist first, since the
        # solves share it.
        bank.boundary()
        with concurrent.futures.ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(bank.get, problem.epsilon_grid))
    return bank


class OutputSession:
    """Tracks files written by one run for the manifest and for cleanup.

    Data files get digested into manifest.json; the run.log sidecar is
    tracked for cleanup but never digested, because it carries timestamps.
    On failure every file this run created is removed again, together with
    the directory if the run created it.
    """

    def __init__(self, out_dir):
        self.dir = out_dir
        self.enabled = out_dir is not None
        self.made_dir = False
        self.data_files = []
        self.side_files = []
        if self.enabled:
            if not os.path.isdir(out_dir):
                os.makedirs(out_dir)
                self.made_dir = True

    def path(self, name: str, sidecar: bool = False) -> str:
        if not self.enabled:
            raise ConfigError("this command needs --out to write results")
        full = os.path.join(self.dir, name)
        (self.side_files if sidecar else self.data_files).append(name)
        return full

    def write_manifest(self, command: str, cfg: dict):
        if not self.enabled:
            return
        digests = {name: serialize.file_digest(os.path.join(self.dir, name))
                   for name in sorted(self.data_files)}
        payload = {"command": command, "config": dict(sorted(cfg.items())),
                   "files": digests}
        with open(os.path.join(self.dir, "manifest.json"), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def cleanup(self):
        if not self.enabled:
            return
        for name in self.data_files + self.side_files + ["manifest.json"]:
            full = os.path.join(self.dir, name)
            if os.path.exists(full):
                os.remove(full)
        if self.made_dir:
            try:
                os.rmdir(self.dir)
            except OSError:
                pass


def _make_logger(out: OutputSession, verbose: bool = False) -> logging.Logger:
    logger = logging.Logger("fbsdelab-run")
    if out.enabled:
        handler = logging.FileHandler(out.path("run.log", sidecar=True), mode="w")
        handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        logger.addHandler(handler)
    if verbose:
        echo = logging.StreamHandler(sys.stderr)
        echo.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(echo)
    if not logger.handlers:
        logger.addHandler(logging.NullHandler())
    return logger


def write_csv(path: str, header, rows):
    """Plain comma-separated table with floats at full precision."""

    def cell(v):
        if isinstance(v, (float, np.floating)):
            return serialize.fmt(v)
        return str(v)

    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(cell(v) for v in row) + "\n")


def _sweep_table(out: OutputSession, name: str, rows, stat_keys):
    """CSV for a list of SweepRow, one (value, std error) pair per statistic."""
    n_eps = len(rows[0].epsilons)
    header = [f"epsilon_{i + 1}" for i in range(n_eps)] if n_eps > 1 else ["epsilon"]
    for key in stat_keys:
        header += [key, key + "_se"]
    header.append("constant")
    table = []
    for row in rows:
        cells = list(row.epsilons)
        for key in stat_keys:
            stat = row.stats[key]
            cells += [stat.value, stat.std_error]
        cells.append(row.constant)
        table.append(cells)
    write_csv(out.path(name), header, table)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_check_assumptions(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    reports = [
        problems.estimate_lipschitz(problem, cfg["samples"], cfg["seed"]),
        problems.check_monotonicity(problem, cfg["epsilon"], cfg["samples"], cfg["seed"]),
        problems.check_growth_and_ellipticity(problem, cfg["samples"], cfg["seed"]),
    ]
    rows = []
    all_passed = True
    for report in reports:
        for entry in report.entries.values():
            rows.append([entry.name, entry.constant, entry.margin,
                         entry.samples, "pass" if entry.passed else "FAIL"])
            all_passed &= entry.passed
    for row in rows:
        print(f"{row[0]:<14} constant={serialize.pretty(row[1]):<24} "
              f"margin={serialize.pretty(row[2]):<24} {row[4]}")
    if out.enabled:
        write_csv(out.path("assumptions.csv"),
                  ["check", "constant", "margin", "samples", "status"], rows)
    log.info("assumption checks: %s", "all passed" if all_passed else "FAILED")
    print("result:", "all structural checks passed" if all_passed
          else "structural check FAILED")
    return 0 if all_passed else EXIT_ASSERTION_FAILED


def cmd_solve_field(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    bank = _make_bank(problem, cfg, args)
    log.info("boundary table ready (source=%s)", bank.boundary().source)
    limit = bank.get(0.0)

    eps_list = problem.epsilon_grid
    rows = []
    gaps = []
    for eps in eps_list:                       # descending by construction
        field = bank.get(eps)
        serialize.write_field(field, out.path(f"field-{serialize.pretty(eps)}.txt"))
        bounds = pdefield.field_bounds(field, problem)
        resid = pdefield.discrete_residual(field, problem)
        gap = pdefield.field_gap(field, limit)
        gaps.append(gap)
        rows.append([eps, bounds.sup_u, bounds.sup_grad,
                     bounds.terminal_mismatch, resid, gap])
        log.info("eps=%g solved: sup|u|=%g gap=%g", eps, bounds.sup_u, gap)
    serialize.write_field(limit, out.path("field-limit.txt"))
    write_csv(out.path("fields.csv"),
              ["epsilon", "sup_u", "sup_grad", "terminal_mismatch",
               "residual", "gap_to_limit"], rows)
    print(f"solved {len(eps_list)} noise levels on a "
          f"{bank.grid.shape} grid (boundary: {bank.boundary().source})")
    if all(g > 1e-12 for g in gaps):
        fit = asymptotics.fit_rate(eps_list, gaps)
        print(f"field gap to the limit scales like eps^{fit.slope:.3f}")
    else:
        print("field gap to the limit is zero to rounding; no rate to fit")
    return 0


def cmd_limit(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    if cfg["method"] == "shooting":
        sol = limits.solve_bvp_shooting(problem, problem.t0, problem.x0,
                                        n_steps=cfg["steps"])
    elif cfg["method"] == "picard":
        sol = limits.solve_bvp_picard(problem, problem.t0, problem.x0,
                                      n_steps=cfg["steps"])
    else:
        raise ConfigError(f"unknown method {cfg['method']!r}; "
                          "use 'shooting' or 'picard'")
    vec = " ".join(serialize.pretty(v) for v in sol.y_values[0])
    print(f"limit field value at the start point: {vec}")
    print(f"terminal mismatch: {serialize.pretty(sol.residual)} ({sol.method})")
    if out.enabled:
        serialize.write_solution(sol, out.path("limit-solution.txt"))
    log.info("limit solve via %s, residual %g", sol.method, sol.residual)
    return 0


def cmd_simulate(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    bank = _make_bank(problem, cfg, args)
    eps = cfg["epsilon"]
    field = bank.get(eps)
    bundle = simulate.simulate_forward(problem, field, eps, cfg["paths"], cfg["seed"])
    stats = simulate.backward_residual(problem, bundle)
    serialize.write_bundle(bundle, out.path("bundle.txt"))
    n_steps = bundle.t_nodes.shape[0] - 1
    write_csv(out.path("residual.csv"),
              ["t", "mean", "rms", "max"],
              [[bundle.t_nodes[j], stats.step_mean[j], stats.step_rms[j],
                stats.step_max[j]] for j in range(n_steps)])
    print(f"simulated {bundle.n_paths} paths at eps={serialize.pretty(eps)}")
    print(f"backward residual rms={serialize.pretty(stats.overall_rms)} "
          f"max={serialize.pretty(stats.overall_max)} "
          f"terminal_max={serialize.pretty(stats.terminal_max)}")
    log.info("bundle done, residual rms %g", stats.overall_rms)
    return 0


def _print_uniformity(rows):
    ratio = asymptotics.uniformity_ratio(rows)
    consts = ", ".join(serialize.pretty(r.constant) for r in rows)
    print(f"implied constants: {consts}")
    print(f"uniformity ratio (max/min): {serialize.pretty(ratio)}")
    return ratio


def cmd_sweep_moments(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    bank = _make_bank(problem, cfg, args)
    rows = asymptotics.second_moments(problem, bank, n_paths=cfg["paths"],
                                            seed_root=cfg["seed"])
    _sweep_table(out, "moments.csv", rows, ["sup_x2", "sup_y2", "int_z2"])
    _print_uniformity(rows)
    return 0


def cmd_sweep_noise_gap(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    bank = _make_bank(problem, cfg, args)
    rows = asymptotics.epsilon_gap_moments(problem, bank, n_paths=cfg["paths"],
                                        seed_root=cfg["seed"])
    _sweep_table(out, "noise-gap.csv", rows, ["sup_dx2", "sup_dy2", "int_dz2"])
    _print_uniformity(rows)
    return 0


def cmd_sweep_start_gap(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    bank = _make_bank(problem, cfg, args)
    rows = asymptotics.x_lipschitz_moments(problem, bank, cfg["x_a"], cfg["x_b"],
                                        n_paths=cfg["paths"], seed_root=cfg["seed"])
    _sweep_table(out, "start-gap.csv", rows, ["sup_dx2", "sup_dy2", "int_dz2"])
    _print_uniformity(rows)
    return 0


def cmd_sweep_time_gap(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    bank = _make_bank(problem, cfg, args)
    rows = asymptotics.time_shift_moments(problem, bank, cfg["t_a"], cfg["t_b"],
                                       n_paths=cfg["paths"], seed_root=cfg["seed"])
    _sweep_table(out, "time-gap.csv", rows, ["sup_dx2", "sup_dy2", "int_dz2"])
    _print_uniformity(rows)
    return 0


def cmd_deviation(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    bank = _make_bank(problem, cfg, args)
    rows = asymptotics.sup_deviation_probability(problem, bank, cfg["radius"],
                                       n_paths=cfg["paths"], seed_root=cfg["seed"])
    _sweep_table(out, "deviation.csv", rows,
                 ["prob_x", "prob_y", "prob_joint", "sup_x", "sup_y"])
    probs = [r.stats["prob_x"].value for r in rows]
    print("forward exceedance probabilities:",
          ", ".join(serialize.pretty(p) for p in probs))
    sups = [r.stats["sup_x"].value for r in rows]
    if all(s > 0 for s in sups):
        fit = asymptotics.fit_rate([r.epsilons[0] for r in rows], sups)
        print(f"mean sup deviation scales like eps^{fit.slope:.3f}")
    return 0


def cmd_tightness(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    bank = _make_bank(problem, cfg, args)
    part = cfg["partition"] if cfg["partition"] > 0 else None
    cv_rows = asymptotics.sweep_conditional_variation(
        problem, bank, n_outer=cfg["outer"], n_inner=cfg["inner"],
        seed_root=cfg["seed"], n_partition=part)
    pp_rows = asymptotics.meyer_zheng_sweep(problem, bank, n_paths=cfg["paths"],
                                            seed_root=cfg["seed"])
    table = []
    for cv, pp in zip(cv_rows, pp_rows):
        table.append([cv.epsilons[0], cv.stats["variation"].value,
                      cv.stats["majorant"].value, cv.constant,
                      pp.stats["rho_x"].value, pp.stats["rho_y"].value])
    write_csv(out.path("tightness.csv"),
              ["epsilon", "variation", "majorant", "ratio", "rho_x", "rho_y"],
              table)
    worst = max(r.constant for r in cv_rows)
    print(f"worst variation/majorant ratio: {serialize.pretty(worst)} "
          "(at most one up to nested-sampling error)")
    rho = [r.stats["rho_y"].value for r in pp_rows]
    if all(v > 0 for v in rho):
        fit = asymptotics.fit_rate([r.epsilons[0] for r in pp_rows], rho)
        print(f"backward pseudo-path distance scales like eps^{fit.slope:.3f}")
    return 0


def cmd_ldp(cfg, out, log, args) -> int:
    problem = _build_problem(cfg)
    bank = _make_bank(problem, cfg, args)
    if cfg["mode"] == "endpoint":
        mini = ldp.minimize_action_endpoint(problem, bank.get(0.0), cfg["target"],
                                            n_intervals=cfg["intervals"])
        print(f"minimal action to endpoint {serialize.pretty(cfg['target'])}: "
              f"{serialize.pretty(mini.action)} "
              f"({mini.iterations} iterations, converged={mini.converged})")
        write_csv(out.path("minimizer.csv"), ["t"] +
                  [f"phi_{i}" for i in range(problem.n)],
                  [[mini.t_nodes[j]] + list(mini.values[j])
                   for j in range(mini.t_nodes.shape[0])])
        return 0
    if cfg["mode"] != "tube":
        raise ConfigError(f"unknown ldp mode {cfg['mode']!r}; use 'tube' or 'endpoint'")
    estimates, mini = ldp.sweep_tube_probability(
        problem, bank, cfg["radius"], n_paths=cfg["paths"],
        seed_root=cfg["seed"], tilt=bool(cfg["tilt"]),
        n_intervals=cfg["intervals"])
    write_csv(out.path("tube.csv"),
              ["epsilon", "probability", "std_error", "hits", "decay_exponent"],
              [[e.epsilon, e.probability, e.std_error, e.hits, e.decay_exponent]
               for e in estimates])
    write_csv(out.path("minimizer.csv"), ["t"] +
              [f"phi_{i}" for i in range(problem.n)],
              [[mini.t_nodes[j]] + list(mini.values[j])
               for j in range(mini.t_nodes.shape[0])])
    print(f"tube action lower bound: {serialize.pretty(mini.action)}")
    for e in estimates:
        print(f"eps={serialize.pretty(e.epsilon)}  P={serialize.pretty(e.probability)}"
              f"  -eps*log(P)={serialize.pretty(e.decay_exponent)}  hits={e.hits}")
    return 0


_COMMANDS = {
    "check-assumptions": (cmd_check_assumptions, "sample the structural conditions"),
    "solve-field": (cmd_solve_field, "solve the decoupling field across noise levels"),
    "limit": (cmd_limit, "solve the zero-noise two-point problem"),
    "simulate": (cmd_simulate, "sample coupled trajectories through a field"),
    "sweep-moments": (cmd_sweep_moments, "second-moment bounds across noise levels"),
    "sweep-noise-gap": (cmd_sweep_noise_gap, "coupled gaps across noise levels"),
    "sweep-start-gap": (cmd_sweep_start_gap, "coupled gaps across start points"),
    "sweep-time-gap": (cmd_sweep_time_gap, "coupled gaps across start times"),
    "deviation": (cmd_deviation, "sup-norm deviation probabilities"),
    "tightness": (cmd_tightness, "conditional variation and pseudo-path distances"),
    "ldp": (cmd_ldp, "action minimization and rare-event probabilities"),
}

_NEEDS_OUT = {"solve-field", "simulate", "sweep-moments", "sweep-noise-gap",
              "sweep-start-gap", "sweep-time-gap", "deviation", "tightness", "ldp"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fbsde-lab",
        description="numerical experiments for small-noise coupled "
                    "forward-backward systems")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (func, help_text) in _COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key")
        sp.add_argument("--out", default=None,
                        help="output directory for tables and the manifest "
                             "(default: the FBSDELAB_OUT environment variable)")
        sp.add_argument("--seed", type=int, default=None,
                        help="override the root seed from the config")
        sp.add_argument("--threads", type=int, default=1,
                        help="solve noise levels in parallel (identical output)")
        sp.add_argument("--verbose", action="store_true",
                        help="echo the run log to stderr")
        sp.set_defaults(func=func, command=name)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(_schema(args.command), args.config, args.set)
        if args.seed is not None:
            cfg["seed"] = int(args.seed)
        out_dir = args.out if args.out is not None else os.environ.get("FBSDELAB_OUT")
        if args.command in _NEEDS_OUT and out_dir is None:
            raise ConfigError(f"{args.command} writes result tables; pass --out DIR "
                              "or set FBSDELAB_OUT")
        out = OutputSession(out_dir)
    except FbsdeLabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    log = _make_logger(out, args.verbose)
    try:
        code = args.func(cfg, out, log, args)
    except FbsdeLabError as exc:
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    except ValueError as exc:
        out.cleanup()
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)
    out.write_manifest(args.command, cfg)
    return code


if __name__ == "__main__":
    sys.exit(main())
