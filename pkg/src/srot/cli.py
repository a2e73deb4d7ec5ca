"""Command-line interface.

Subcommands: ``solve``, ``bounds``, ``experiment``, ``round``, ``generate``.
Every flag can also come from a JSON file given with ``--config`` (keys are
the flag names with dashes replaced by underscores); flags override the file.

Exit codes: 0 success, 2 configuration error (including parity and simplex
violations), 3 numerical failure, 4 bound violation in an experiment.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import bounds as B
from .core import (
    NumericalError,
    ProblemInstance,
    generate_instance,
    matrix_from_csv,
    matrix_to_csv,
)
from .exact import solve_ot_exact
from .harness import EXPERIMENTS, ExperimentSpec, run_experiment
from .rounding import round_to_polytope
from .solvers import (
    SolverConfig,
    evaluate_f,
    evaluate_g,
    pot_column_min,
    sr_sinkhorn,
    standard_sinkhorn,
    uot_sinkhorn,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VIOLATION = 0, 2, 3, 4
SOLVERS = ("sr-sinkhorn", "sinkhorn", "uot-sinkhorn", "pot", "exact-ot")

INSTANCE_DEFAULTS = dict(n=None, seed=0, cost_lo=1.0, cost_hi=10.0, weight_lo=1.0, weight_hi=5.0, no_normalize=False, instance=None)
DEFAULTS = {
    "solve": dict(
        INSTANCE_DEFAULTS,
        solver="sr-sinkhorn",
        tau=1.0,
        eta=0.1,
        tau1=None,
        tau2=None,
        iters=1000,
        trace_every=1,
        tol=0.0,
        out=None,
        format="csv",
        emit_instance=None,
    ),
    "bounds": dict(
        INSTANCE_DEFAULTS, tau=1.0, eta=0.1, k=None, theorem=None, epsilon_f=None, prescribe=None, u_star=None
    ),
    "experiment": dict(id=None, seed=None, out="results", tau=None, n=None, iters=None, set=None, repeats=None),
    "round": dict(INSTANCE_DEFAULTS, plan=None, out=None),
    "generate": dict(INSTANCE_DEFAULTS, out=None),
}


class ConfigError(ValueError):
    pass


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float printed to 17 significant digits."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps(v, indent, _level + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return fmt(x) if math.isfinite(x) else json.dumps(str(x))
    if obj is None:
        return "null"
    return json.dumps(str(obj))


def _instance_args(p: argparse.ArgumentParser):
    g = p.add_argument_group("instance")
    g.add_argument("--instance", help="instance JSON file")
    g.add_argument("--n", type=int, help="generate an n x n instance")
    g.add_argument("--seed", type=int)
    g.add_argument("--cost-lo", type=float)
    g.add_argument("--cost-hi", type=float)
    g.add_argument("--weight-lo", type=float)
    g.add_argument("--weight-hi", type=float)
    g.add_argument("--no-normalize", action="store_true", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="srot", description="Semi-relaxed optimal transport toolkit")
    parser.add_argument("--config", help="JSON file with default values for the subcommand's flags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="run a solver on an instance")
    _instance_args(p)
    p.add_argument("--solver", choices=SOLVERS)
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--tau1", type=float, help="row KL weight for uot-sinkhorn (default tau)")
    p.add_argument("--tau2", type=float, help="column KL weight for uot-sinkhorn (default tau)")
    p.add_argument("--iters", type=int, help="half-iterations")
    p.add_argument("--trace-every", type=int)
    p.add_argument("--tol", type=float, help="early stop on the largest potential increment (0 = off)")
    p.add_argument("--out", help="directory for plan.csv, trace and summary.json")
    p.add_argument("--format", choices=("csv", "json"), help="trace format")
    p.add_argument("--emit-instance", help="write the instance JSON used")

    p = sub.add_parser("bounds", help="evaluate constants and bounds")
    _instance_args(p)
    p.add_argument("--tau", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--k", type=int, nargs="+", help="iterations at which to evaluate")
    p.add_argument("--theorem", choices=sorted(B.THEOREM_PARITY), help="restrict to one bound (parity enforced)")
    p.add_argument("--epsilon-f", type=float, help="report the stopping iteration for this functional gap")
    p.add_argument("--prescribe", help="parameter recipe: ef=<eps>, ec=<eps> or ed=<eps>")
    p.add_argument("--u-star", type=float, help="||u*||_inf from a reference run")

    p = sub.add_parser("experiment", help="run a harness experiment")
    p.add_argument("id", nargs="?", help=" | ".join(EXPERIMENTS))
    p.add_argument("--seed", type=int, nargs="+")
    p.add_argument("--out", help="output directory (default: results)")
    p.add_argument("--tau", type=float, help="tau (iteration-bounds: the single tau of the grid)")
    p.add_argument("--n", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--repeats", type=int, help="iteration-bounds repeat mode")
    p.add_argument("--set", nargs="+", metavar="KEY=JSON", help="override any experiment parameter")

    p = sub.add_parser("round", help="round a plan onto U(a, b)")
    _instance_args(p)
    p.add_argument("--plan", help="plan CSV (i,j,value)")
    p.add_argument("--out", help="output CSV (default stdout)")

    p = sub.add_parser("generate", help="write a random instance as JSON")
    _instance_args(p)
    p.add_argument("--out", help="output file (default stdout)")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge built-in defaults, the ``--config`` file and explicit flags."""
    conf = dict(DEFAULTS[args.command])
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        unknown = set(data) - set(conf)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        conf.update(data)
    for key in conf:
        val = getattr(args, key, None)
        if val is not None:
            conf[key] = val
    return conf


def load_instance(c: dict) -> ProblemInstance:
    if c.get("instance") and c.get("n") is not None:
        raise ConfigError("give either --instance or --n, not both")
    if c.get("instance"):
        try:
            return ProblemInstance.from_json(Path(c["instance"]).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read instance: {exc}") from exc
        except (KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"malformed instance file: {exc}") from exc
    if c.get("n") is None:
        raise ConfigError("an instance source is required: --instance FILE or --n N")
    return generate_instance(
        c["n"], c["cost_lo"], c["cost_hi"], c["weight_lo"], c["weight_hi"], not c["no_normalize"], c["seed"]
    )


def _write(path, text: str):
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def cmd_solve(c: dict) -> int:
    prob = load_instance(c)
    if c["emit_instance"]:
        Path(c["emit_instance"]).write_text(prob.to_json() + "\n")
    solver, tau, eta = c["solver"], c["tau"], c["eta"]
    trace = None
    summary: dict = {"solver": solver, "n": prob.n, "m": prob.m}
    if solver == "sr-sinkhorn":
        cfg = SolverConfig(tau=tau, eta=eta, max_iterations=c["iters"], trace_every=c["trace_every"], convergence_tol=c["tol"])
        plan, pots, trace = sr_sinkhorn(prob, cfg)
        summary.update(tau=tau, eta=eta, iterations=pots.iteration, parity=pots.parity.value)
    elif solver == "sinkhorn":
        plan, pots, trace = standard_sinkhorn(prob, eta, c["iters"], c["trace_every"], c["tol"])
        summary.update(eta=eta, iterations=pots.iteration, parity=pots.parity.value)
    elif solver == "uot-sinkhorn":
        t1 = c["tau1"] if c["tau1"] is not None else tau
        t2 = c["tau2"] if c["tau2"] is not None else tau
        plan, pots, trace = uot_sinkhorn(prob, t1, t2, eta, c["iters"], c["trace_every"], c["tol"])
        summary.update(tau1=t1, tau2=t2, eta=eta, iterations=pots.iteration, parity=pots.parity.value)
    elif solver == "pot":
        plan, value = pot_column_min(prob)
        summary["value"] = value
    else:
        lp = solve_ot_exact(prob)
        plan = lp.plan
        summary.update(objective=lp.objective, status=lp.status, lp_iterations=lp.iterations)
    summary.update(
        distance=plan.cost(prob.cost),
        f=evaluate_f(prob, plan, tau),
        g=evaluate_g(prob, plan, tau, eta),
        row_gap_inf=float(np.abs(plan.row_marginal() - prob.a.weights).max()),
        col_gap_inf=float(np.abs(plan.col_marginal() - prob.b.weights).max()),
    )
    text = dumps(summary) + "\n"
    if c["out"]:
        out = Path(c["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "plan.csv").write_text(plan.to_csv())
        if trace is not None:
            if c["format"] == "csv":
                (out / "trace.csv").write_text(trace.to_csv())
            else:
                (out / "trace.json").write_text(trace.to_json() + "\n")
        (out / "summary.json").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def _parse_prescribe(spec: str) -> tuple[str, float]:
    key, sep, val = spec.partition("=")
    key = key.strip().lower().replace("_", "").replace("epsilon", "e")
    if not sep or key not in ("ef", "ec", "ed"):
        raise ConfigError("--prescribe expects ef=<eps>, ec=<eps> or ed=<eps>")
    try:
        return key, float(val)
    except ValueError as exc:
        raise ConfigError(f"bad epsilon in --prescribe: {val!r}") from exc


def cmd_bounds(c: dict) -> int:
    prob = load_instance(c)
    tau, eta = c["tau"], c["eta"]
    a, b = prob.a.weights, prob.b.weights
    doc: dict = {}
    if c["prescribe"]:
        key, eps = _parse_prescribe(c["prescribe"])
        if key == "ef":
            doc["prescription"] = B.prescribe_functional_gap(eps, tau, a, b, prob.cost)
        elif key == "ec":
            doc["prescription"] = B.prescribe_marginal_gap(eps, prob.cost, eta, a)
        else:
            doc["prescription"] = B.prescribe_ot_gap(eps, a, b, prob.cost)
    if c["epsilon_f"] is not None:
        pr = B.prescribe_functional_gap(c["epsilon_f"], tau, a, b, prob.cost)
        pr["k_f"] = B.stopping_iteration(c["epsilon_f"], tau, pr["R"], pr["c1"], pr["c2"], prob.cost, prob.beta)
        doc["stopping"] = pr
    ks = c["k"] or []
    theorems = [c["theorem"]] if c["theorem"] else None
    report = B.bound_report(prob, tau, eta, ks=ks, theorems=theorems, u_star_inf=c["u_star"], strict=theorems is not None)
    doc = {"constants": report.constants(), "records": [r.__dict__ for r in report.records], **doc}
    sys.stdout.write(dumps(doc) + "\n")
    return EXIT_OK


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(val)
        except json.JSONDecodeError:
            out[key] = val
    return out


def cmd_experiment(c: dict) -> int:
    exp = c["id"]
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}; expected one of {', '.join(EXPERIMENTS)}")
    params = c["set"] if isinstance(c["set"], dict) else _parse_set(c["set"])
    if c["tau"] is not None:
        params["taus" if exp in ("iteration-bounds", "unregularized-bound") else "tau"] = (
            [c["tau"]] if exp in ("iteration-bounds", "unregularized-bound") else c["tau"]
        )
    if c["n"] is not None:
        params["n"] = c["n"]
    if c["iters"] is not None:
        params["iterations"] = c["iters"]
    if c["repeats"] is not None:
        params["repeats"] = c["repeats"]
    seeds = c["seed"] if c["seed"] is not None else (7,)
    if isinstance(seeds, int):
        seeds = (seeds,)
    spec = ExperimentSpec(exp, tuple(seeds), params, c["out"])
    result = run_experiment(spec)
    sys.stdout.write(result.summary_json())
    return EXIT_OK if result.passed else EXIT_VIOLATION


def cmd_round(c: dict) -> int:
    prob = load_instance(c)
    if not c["plan"]:
        raise ConfigError("--plan is required")
    try:
        X = matrix_from_csv(Path(c["plan"]).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read plan: {exc}") from exc
    Y = round_to_polytope(X, prob.a, prob.b)
    _write(c["out"], matrix_to_csv(Y.entries))
    return EXIT_OK


def cmd_generate(c: dict) -> int:
    if c.get("instance"):
        raise ConfigError("generate does not take --instance")
    prob = load_instance(c)
    _write(c["out"], prob.to_json() + "\n")
    return EXIT_OK


COMMANDS = {
    "solve": cmd_solve,
    "bounds": cmd_bounds,
    "experiment": cmd_experiment,
    "round": cmd_round,
    "generate": cmd_generate,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        conf = resolve(args)
        return COMMANDS[args.command](conf)
    except NumericalError as exc:
        print(f"srot: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError) as exc:
        print(f"srot: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
