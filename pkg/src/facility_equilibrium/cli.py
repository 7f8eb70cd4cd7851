"""Command-line driver: ``solve``, ``metrics``, ``sweep`` and ``verify``.

Runs are described by an INI file (see ``configs/`` in the repository). Paths
in it are relative to the file itself; a ``package:`` prefix points at the
bundled data directory. Exit codes: 0 success, 1 verification failure,
2 configuration or input error, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from importlib.resources import files
from pathlib import Path

import numpy as np

from .equilibrium import (EquilibriumProblem, EquilibriumSolution, PriceField, ResidualReport, solve_equilibrium,
                          verify_equilibrium)
from .errors import FacilityEquilibriumError
from .gcda import GcdaSolution, UtilityParams, verify_wardrop_logit
from .investor import InvestorSolution, LocationCost, QuadraticCost
from .network import parse_network, parse_trips
from .scenarios import ScenarioSet, generate_scenarios, load_scenarios
from .stochastic import CASE_MODES, compute_metrics, solve_case

log = logging.getLogger("facility_equilibrium")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 1, 2, 3
SOLUTION_SCHEMA = "facility-equilibrium/solution/1"
SUMMARY_SCHEMA = "facility-equilibrium/summary/1"
SWEEP_PARAMETERS = ("beta2", "demand_scale", "theta_max")


class ConfigError(Exception):
    """Unusable configuration; reported with exit code 2."""


# --------------------------------------------------------------------------- configuration

@dataclass
class RunConfig:
    network_path: Path
    roles_path: Path
    trips_path: Path
    beta1: float = 1.0
    beta2: float = 0.06
    beta0: dict = field(default_factory=dict)
    capital: tuple = (0.1, 170.0)
    operating: tuple = (0.1, 130.0)
    location_costs: dict = field(default_factory=dict)
    n_scenarios: int = 1
    theta_min: float = 1.0
    theta_max: float = 1.0
    seed: int = 0
    scenario_file: Path | None = None
    tol_mc: float = 1e-4
    gap_tol: float = 1e-4
    max_outer: int = 200
    step_rule: str = "newton"
    threads: int = 1
    verify_tol: float = 1e-3
    mode: str = "stochastic"
    no_congestion: bool = False
    sweep_parameter: str = "beta2"
    sweep_values: tuple = ()
    output_dir: Path = Path("out")


def _resolve(base: Path, value: str, key: str) -> Path:
    value = value.strip()
    if not value:
        raise ConfigError(f"{key}: empty path")
    if value.startswith("package:"):
        return Path(str(files("facility_equilibrium") / "data" / value[len("package:"):]))
    path = Path(value)
    return path if path.is_absolute() else base / path


def _floats(text: str, key: str) -> tuple:
    try:
        return tuple(float(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {text!r}") from None


def _pairs(text: str, key: str) -> dict:
    """``3=0.5, 6=-0.2`` -> {3: 0.5, 6: -0.2}."""
    out = {}
    for item in text.replace(",", " ").split():
        k, sep, v = item.partition("=")
        try:
            if not sep:
                raise ValueError
            out[int(k)] = float(v)
        except ValueError:
            raise ConfigError(f"{key}: expected location=value entries, got {item!r}") from None
    return out


def _cost_pair(section, prefix: str, default: tuple, key: str) -> tuple:
    try:
        return (section.getfloat(f"{prefix}_a", default[0]), section.getfloat(f"{prefix}_b", default[1]))
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    base = path.parent
    if not parser.has_section("network"):
        raise ConfigError(f"{path}: missing [network] section")
    net = parser["network"]
    try:
        cfg = RunConfig(_resolve(base, net.get("net", ""), "network.net"),
                        _resolve(base, net.get("roles", ""), "network.roles"),
                        _resolve(base, net.get("trips", ""), "network.trips"))
    except KeyError as exc:
        raise ConfigError(f"[network] needs {exc.args[0]}") from None
    try:
        cfg.no_congestion = net.getboolean("no_congestion", False)
        if parser.has_section("utility"):
            u = parser["utility"]
            cfg.beta1 = u.getfloat("beta1", cfg.beta1)
            cfg.beta2 = u.getfloat("beta2", cfg.beta2)
            cfg.beta0 = _pairs(u.get("beta0", ""), "utility.beta0")
        if parser.has_section("costs"):
            c = parser["costs"]
            cfg.capital = _cost_pair(c, "capital", cfg.capital, "costs")
            cfg.operating = _cost_pair(c, "operating", cfg.operating, "costs")
        for name in parser.sections():
            if name.startswith("location "):
                try:
                    k = int(name.split()[1])
                except (IndexError, ValueError):
                    raise ConfigError(f"bad section name [{name}]") from None
                sec = parser[name]
                cfg.location_costs[k] = (_cost_pair(sec, "capital", cfg.capital, name),
                                         _cost_pair(sec, "operating", cfg.operating, name))
        if parser.has_section("scenarios"):
            s = parser["scenarios"]
            cfg.n_scenarios = s.getint("n", cfg.n_scenarios)
            cfg.theta_min = s.getfloat("theta_min", cfg.theta_min)
            cfg.theta_max = s.getfloat("theta_max", max(cfg.theta_max, cfg.theta_min))
            cfg.seed = s.getint("seed", cfg.seed)
            if s.get("file", "").strip():
                cfg.scenario_file = _resolve(base, s["file"], "scenarios.file")
        if parser.has_section("solver"):
            s = parser["solver"]
            cfg.tol_mc = s.getfloat("tol_mc", cfg.tol_mc)
            cfg.gap_tol = s.getfloat("gap_tol", cfg.gap_tol)
            cfg.max_outer = s.getint("max_outer", cfg.max_outer)
            cfg.step_rule = s.get("step_rule", cfg.step_rule).strip()
            cfg.threads = s.getint("threads", cfg.threads)
            cfg.verify_tol = s.getfloat("verify_tol", cfg.verify_tol)
            cfg.mode = s.get("mode", cfg.mode).strip()
        if parser.has_section("sweep"):
            s = parser["sweep"]
            cfg.sweep_parameter = s.get("parameter", cfg.sweep_parameter).strip()
            cfg.sweep_values = _floats(s.get("values", ""), "sweep.values")
        if parser.has_section("output"):
            cfg.output_dir = _resolve(base, parser["output"].get("dir", "out"), "output.dir")
        else:
            cfg.output_dir = base / "out"
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    _check_config(cfg)
    return cfg


def _check_config(cfg: RunConfig) -> None:
    for key in ("tol_mc", "gap_tol", "verify_tol"):
        if not getattr(cfg, key) > 0:
            raise ConfigError(f"{key} must be > 0")
    if cfg.threads < 1 or cfg.max_outer < 0:
        raise ConfigError("threads must be >= 1 and max_outer >= 0")
    if cfg.mode not in ("deterministic", "stochastic"):
        raise ConfigError(f"solver.mode must be deterministic or stochastic, got {cfg.mode!r}")
    if cfg.step_rule not in ("newton", "gradient"):
        raise ConfigError(f"solver.step_rule must be newton or gradient, got {cfg.step_rule!r}")
    if cfg.n_scenarios < 1 or cfg.theta_min > cfg.theta_max:
        raise ConfigError("scenarios need n >= 1 and theta_min <= theta_max")


def _read(path: Path, what: str) -> str:
    try:
        return path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {what} file {path}: {exc.strerror}") from None


def build_scenarios(cfg: RunConfig) -> ScenarioSet:
    if cfg.scenario_file is not None:
        if not cfg.scenario_file.is_file():
            raise ConfigError(f"scenario file not found: {cfg.scenario_file}")
        return load_scenarios(cfg.scenario_file)
    return generate_scenarios(cfg.n_scenarios, cfg.theta_min, cfg.theta_max, cfg.seed)


def build_problem(cfg: RunConfig, scenarios: ScenarioSet | None = None) -> EquilibriumProblem:
    trips = parse_trips(_read(cfg.trips_path, "trips"))
    net = parse_network(_read(cfg.network_path, "network"), _read(cfg.roles_path, "roles"), trips)
    if cfg.no_congestion:
        net = net.without_congestion()
    costs = {}
    for k in net.candidates:
        cap, op = cfg.location_costs.get(k, (cfg.capital, cfg.operating))
        costs[k] = LocationCost(QuadraticCost(*cap), QuadraticCost(*op))
    params = UtilityParams(cfg.beta1, cfg.beta2, cfg.beta0)
    return EquilibriumProblem(net, trips, params, costs, scenarios or build_scenarios(cfg))


def _solver_options(cfg: RunConfig) -> dict:
    return {"tol_mc": cfg.tol_mc, "gap_tol": cfg.gap_tol, "max_outer": cfg.max_outer,
            "step_rule": cfg.step_rule, "threads": cfg.threads}


# --------------------------------------------------------------------------- output

def _num(x) -> str:
    # repr round-trips and is stable across runs
    return repr(float(x))


def _write_csv(path: Path, header: list, rows) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n")


def solution_document(solution: EquilibriumSolution, problem: EquilibriumProblem, no_congestion: bool) -> dict:
    locs = problem.locations
    n = len(problem.scenarios)
    inv = solution.investor
    return {
        "schema": SOLUTION_SCHEMA,
        "no_congestion": no_congestion,
        "scenarios": problem.scenarios.to_dict(),
        "residuals": solution.residuals.as_dict(),
        "fixed_capacity": ({str(k): v for k, v in solution.fixed_capacity.items()}
                           if solution.fixed_capacity is not None else None),
        "locations": [{"location": k, "capacity": inv.capacity[k],
                       "supply": [inv.supply[(k, xi)] for xi in range(n)],
                       "price": [solution.prices.rho[(k, xi)] for xi in range(n)]} for k in locs],
        "flows": [{"triples": [list(t) for t in sol.triples], "q": np.asarray(sol.q).tolist(),
                   "v": np.asarray(sol.v).tolist(), "tau": np.asarray(sol.tau).tolist()}
                  for sol in solution.gcda],
    }


def solution_from_document(doc: dict, problem: EquilibriumProblem) -> EquilibriumSolution:
    if doc.get("schema") != SOLUTION_SCHEMA:
        raise ConfigError(f"unsupported solution schema {doc.get('schema')!r}")
    try:
        locs = [entry["location"] for entry in doc["locations"]]
        n = len(doc["flows"])
        if sorted(locs) != sorted(problem.locations) or n != len(problem.scenarios):
            raise ConfigError("solution document does not match the configured network or scenarios")
        capacity = {e["location"]: float(e["capacity"]) for e in doc["locations"]}
        supply = {(e["location"], xi): float(e["supply"][xi]) for e in doc["locations"] for xi in range(n)}
        rho = {(e["location"], xi): float(e["price"][xi]) for e in doc["locations"] for xi in range(n)}
        gcda = []
        for f in doc["flows"]:
            gcda.append(GcdaSolution(tuple(tuple(t) for t in f["triples"]), np.array(f["q"], dtype=float),
                                     np.array(f["v"], dtype=float), np.array(f["tau"], dtype=float),
                                     float("nan"), float("nan"), 0.0, 0, True))
        res = doc["residuals"]
        fixed = doc.get("fixed_capacity")
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ConfigError(f"malformed solution document: {exc!r}") from None
    investor = InvestorSolution(capacity, supply, 0.0, {})
    residuals = ResidualReport(res["max_market_residual"], res["duality_gap"], res["wardrop_gap"],
                               res["iterations"], res["converged"])
    fixed = {int(k): float(v) for k, v in fixed.items()} if fixed else None
    return EquilibriumSolution(investor, gcda, PriceField(rho, problem.probs), residuals, [], fixed)


def _location_rows(solution: EquilibriumSolution, problem: EquilibriumProblem, label=None):
    demand = solution.service_demand(problem)
    for k in problem.locations:
        for xi, theta in enumerate(problem.scenarios.thetas):
            row = [k, xi, theta, solution.investor.capacity[k], solution.investor.supply[(k, xi)],
                   demand[(k, xi)], solution.prices.rho[(k, xi)]]
            yield ([label] + row) if label is not None else row


LOCATION_HEADER = ["location", "scenario", "theta", "capacity", "supply", "service_demand", "price"]


def write_solution(out: Path, solution: EquilibriumSolution, problem: EquilibriumProblem,
                   no_congestion: bool) -> None:
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "solution.json", solution_document(solution, problem, no_congestion))
    _write_csv(out / "locations.csv", LOCATION_HEADER, _location_rows(solution, problem))
    net = problem.network
    rows = []
    for xi, sol in enumerate(solution.gcda):
        v = np.asarray(sol.v)
        t = net.times(v)
        for a, link in enumerate(net.links):
            rows.append([xi, link.id, link.tail, link.head, v[a], v[a] / link.capacity_param, t[a],
                         link.free_flow_time])
    _write_csv(out / "links.csv", ["scenario", "link", "tail", "head", "flow", "volume_capacity_ratio",
                                   "time", "free_flow_time"], rows)
    res = solution.residuals.as_dict()
    _write_csv(out / "residuals.csv", ["measure", "value"], [[k, v] for k, v in res.items()])


def total_travel_time(solution: EquilibriumSolution, problem: EquilibriumProblem) -> float:
    """Expected total link travel time ``E sum_a t_a(v_a) v_a``."""
    net = problem.network
    return float(sum(p * float(net.times(np.asarray(s.v)) @ np.asarray(s.v))
                     for p, s in zip(problem.probs, solution.gcda)))


# --------------------------------------------------------------------------- commands

def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if args.no_congestion:
        changes["no_congestion"] = True
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.tol_mc is not None:
        changes["tol_mc"] = args.tol_mc
    if args.out is not None:
        changes["output_dir"] = Path(args.out)
    cfg = replace(cfg, **changes)
    _check_config(cfg)
    return cfg


def _solve(cfg: RunConfig, problem: EquilibriumProblem) -> tuple:
    if cfg.mode == "deterministic":
        problem = problem.replace(scenarios=ScenarioSet.single(problem.scenarios.mean_theta))
    return solve_equilibrium(problem, **_solver_options(cfg)), problem


def cmd_solve(cfg: RunConfig) -> int:
    problem = build_problem(cfg)
    solution, problem = _solve(cfg, problem)
    write_solution(cfg.output_dir, solution, problem, cfg.no_congestion)
    res = solution.residuals
    print(f"market residual {res.max_market_residual:.3e}  duality gap {res.duality_gap:.3e}  "
          f"iterations {res.iterations}")
    for k in problem.locations:
        prices = " ".join(f"{solution.prices.rho[(k, xi)]:.4f}" for xi in range(len(problem.scenarios)))
        print(f"location {k}: capacity {solution.investor.capacity[k]:.4f}  price {prices}")
    if not res.converged:
        print("equilibrium did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_metrics(cfg: RunConfig) -> int:
    problem = build_problem(cfg)
    scenarios = problem.scenarios
    options = _solver_options(cfg)
    cases = [solve_case(problem, scenarios, mode, **options) for mode in CASE_MODES]
    report = compute_metrics(*cases)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "cases.csv", ["case", "provider_objective", "user_utility", "surplus"],
               [[c.mode, c.provider_objective, c.user_utility, c.surplus] for c in cases])
    _write_csv(out / "metrics.csv", ["stakeholder", "vss", "evpi"],
               [[r["stakeholder"], r["vss"], r["evpi"]] for r in report.rows()])
    rows = []
    for case in cases:
        if case.mode == "wait_and_see":
            for xi, sol in enumerate(case.solutions):
                sub = problem.replace(scenarios=scenarios.subset(xi))
                for row in _location_rows(sol, sub, case.mode):
                    row[2] = xi
                    rows.append(row)
        else:
            sub = problem.replace(scenarios=ScenarioSet.single(scenarios.mean_theta)) \
                if case.mode == "deterministic" else problem.replace(scenarios=scenarios)
            rows.extend(_location_rows(case.solutions[0], sub, case.mode))
    _write_csv(out / "case_locations.csv", ["case"] + LOCATION_HEADER, rows)
    converged = all(s.residuals.converged for c in cases for s in c.solutions)
    summary = {"schema": SUMMARY_SCHEMA, "command": "metrics", "scenarios": scenarios.to_dict(),
               "cases": [c.summary() for c in cases], "metrics": report.as_dict(),
               "case1_evaluation": (cases[0].evaluation.summary() if cases[0].evaluation is not None
                                    else {"unavailable": cases[0].evaluation_error}),
               "converged": converged}
    _write_json(out / "metrics.json", summary)
    for row in report.rows():
        print(f"{row['stakeholder']:>9}: VSS {row['vss']:.4f}  EVPI {row['evpi']:.4f}")
    print(report.note)
    return EXIT_OK if converged else EXIT_NONCONVERGED


def cmd_sweep(cfg: RunConfig, parameter: str, values) -> int:
    if parameter not in SWEEP_PARAMETERS:
        raise ConfigError(f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}")
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    rows, summary = [], []
    converged = True
    for value in values:
        run = cfg
        if parameter == "beta2":
            run = replace(cfg, beta2=value)
        elif parameter == "theta_max":
            run = replace(cfg, theta_max=value)
        problem = build_problem(run)
        if parameter == "demand_scale":
            problem = problem.replace(trips=problem.trips.scaled(value))
        solution, problem = _solve(run, problem)
        converged = converged and solution.residuals.converged
        ttt = total_travel_time(solution, problem)
        caps = solution.investor.capacity
        summary.append({"value": value, "total_travel_time": ttt,
                        "capacity_dispersion": max(caps.values()) - min(caps.values()),
                        "converged": solution.residuals.converged})
        for row in _location_rows(solution, problem):
            rows.append([parameter, value, ttt] + row)
        print(f"{parameter}={value!r}: total travel time {ttt:.4f}, capacity dispersion "
              f"{summary[-1]['capacity_dispersion']:.4f}")
    _write_csv(out / "sweep.csv", ["parameter", "value", "total_travel_time"] + LOCATION_HEADER, rows)
    _write_json(out / "sweep.json", {"schema": SUMMARY_SCHEMA, "command": "sweep", "parameter": parameter,
                                     "runs": summary})
    return EXIT_OK if converged else EXIT_NONCONVERGED


def cmd_verify(solution_path, cfg: RunConfig) -> int:
    path = Path(solution_path)
    if not path.is_file():
        raise ConfigError(f"solution file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg}, line {exc.lineno})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: not a solution document")
    run = replace(cfg, no_congestion=bool(doc.get("no_congestion", cfg.no_congestion)))
    try:
        scenarios = ScenarioSet.from_dict(doc["scenarios"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: no scenario block ({exc!r})") from None
    problem = build_problem(run, scenarios)
    solution = solution_from_document(doc, problem)
    try:
        report = verify_equilibrium(solution, problem, cfg.verify_tol)
    except FacilityEquilibriumError as exc:
        print(f"FAIL consistency: {exc}")
        return EXIT_VERIFY
    print(f"{'check':<22}{'value':>14}  result")
    for name, (value, ok) in report.checks.items():
        print(f"{name:<22}{value:>14.3e}  {'pass' if ok else 'FAIL'}")
    for xi, sol in enumerate(solution.gcda):
        rep = verify_wardrop_logit(problem.network, problem.trips, problem.params, solution.prices.scenario(xi),
                                   sol, cfg.verify_tol, scenarios.thetas[xi])
        print(f"scenario {xi}: tau {rep.tau_residual:.2e}  logit {rep.logit_residual:.2e}  "
              f"wardrop {rep.wardrop_gap:.2e}  demand {rep.demand_residual:.2e}  "
              f"{'pass' if rep.passed else 'FAIL'}")
    if report.passed:
        return EXIT_OK
    print("failed checks: " + ", ".join(report.failed))
    return EXIT_VERIFY


# --------------------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facility-eq", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="INI run description")
    common.add_argument("--no-congestion", action="store_true", help="set every BPR alpha to zero")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--threads", type=int, help="worker threads for scenario subproblems")
    common.add_argument("--tol-mc", type=float, help="market-clearing tolerance")
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log solver progress")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve one equilibrium")
    sub.add_parser("metrics", parents=[common], help="run the three information cases and VSS/EVPI")
    sweep = sub.add_parser("sweep", parents=[common], help="re-solve over a parameter grid")
    sweep.add_argument("--param", help=f"one of {', '.join(SWEEP_PARAMETERS)}")
    sweep.add_argument("--values", help="comma-separated values (default: from [sweep])")
    verify = sub.add_parser("verify", parents=[common], help="check a solution document")
    verify.add_argument("solution", help="solution.json written by solve")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "metrics":
            return cmd_metrics(cfg)
        if args.command == "sweep":
            parameter = args.param or cfg.sweep_parameter
            values = _floats(args.values, "--values") if args.values is not None else cfg.sweep_values
            return cmd_sweep(cfg, parameter, values)
        return cmd_verify(args.solution, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FacilityEquilibriumError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
