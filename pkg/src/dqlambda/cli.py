"""Command-line front end: ``dqlambda {gen-mdp,sweep,figure1,analyze,learn}``."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import DomainError, contraction_report, empirical_contraction, radius_l2
from .engine import (CSV_COLUMNS, RunConfig, build_oracle, figure1_trace, make_grid, optimal_policy,
                     run_control, run_evaluate, summarize)
from .grid import grid_for_returns
from .learner import LearnerConfig, train, training_log_csv
from .mdp import TabularMdp, mix_policies, policy_l1_distance, random_mdp, uniform_policy
from .operators import MAX_DIRECT_UNKNOWNS, SOLVER_MODES, TraceSpec
from .svg import bar_panels, line_chart

log = logging.getLogger("dqlambda")

OUT_ENV = "DQLAMBDA_OUT"
CSV_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
SWEEP_COLUMNS = ("variant", "hyperparam", "seed") + CSV_COLUMNS + ("error",)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    return vals


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _pair(text: str) -> tuple[int, int]:
    vals = _ints(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("expected X,A")
    return vals[0], vals[1]


def csv_header(kind: str) -> str:
    return f"# dqlambda {kind} csv v{CSV_VERSION}\n"


def _out_dir(args) -> Path:
    path = Path(args.out or os.environ.get(OUT_ENV) or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _add_mdp_args(p):
    g = p.add_argument_group("MDP")
    g.add_argument("--mdp", help="MDP JSON file written by gen-mdp")
    g.add_argument("--states", type=int, default=5)
    g.add_argument("--actions", type=int, default=20)
    g.add_argument("--gamma", type=float, default=0.9)
    g.add_argument("--dirichlet", type=float, default=0.1)


def _load_mdp(args, seed: int) -> TabularMdp:
    if args.mdp:
        return TabularMdp.from_json(Path(args.mdp).read_text())
    return random_mdp(seed, args.states, args.actions, args.dirichlet, args.gamma)


def _add_common(p):
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or the current directory)")
    p.add_argument("--spec", help="JSON file of option values; command-line flags take precedence")
    p.add_argument("-v", "--verbose", action="store_true")


# --------------------------------------------------------------------------
# gen-mdp


def cmd_gen_mdp(args) -> int:
    mdp = random_mdp(args.seed, args.states, args.actions, args.dirichlet, args.gamma)
    path = Path(args.file) if args.file else _out_dir(args) / f"mdp_seed{args.seed}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(mdp.to_json())
    lo, hi = float(mdp.reward.min()), float(mdp.reward.max())
    print(f"wrote {path}: {mdp.n_states} states, {mdp.n_actions} actions, gamma={mdp.gamma:g}, "
          f"reward range [{lo:.4f}, {hi:.4f}]")
    return EXIT_OK


# --------------------------------------------------------------------------
# sweep


def sweep_variants(args) -> list[tuple[str, float | None, TraceSpec]]:
    out = []
    for name in args.variants:
        if name == "one-step":
            out.append(("one-step", None, TraceSpec.one_step()))
        elif name == "retrace":
            out += [("retrace", c, TraceSpec.retrace(c)) for c in args.cbar]
        elif name == "qlambda":
            out += [("qlambda", lam, TraceSpec.off_policy(lam)) for lam in args.lambdas]
        elif name == "peng":
            out += [("peng", lam, TraceSpec.peng(lam)) for lam in args.lambdas]
        elif name == "alt":
            out += [("alt", lam, TraceSpec.alt(lam)) for lam in args.lambdas]
        else:
            raise UsageError(f"unknown variant {name!r}")
    return out


def _sweep_cell(payload):
    """All variants for one seed; returns CSV rows."""
    args, seed = payload
    mdp = _load_mdp(args, seed)
    mu = uniform_policy(mdp)
    base = RunConfig(mode=args.mode, m=args.m, k_max=args.k_max, alpha=args.alpha, oracle=args.oracle,
                     oracle_n_traj=args.oracle_traj, oracle_refine=args.oracle_refine, refine=args.refine,
                     tracked=args.tracked, seed=seed, allow_uncovered=args.allow_uncovered,
                     solver_mode=args.solver,
                     v_min=args.v_min, v_max=args.v_max)
    grid = make_grid(mdp, base)
    pi_star = optimal_policy(mdp)
    pi = mix_policies(args.alpha, pi_star, mu)
    oracle = build_oracle(mdp, pi_star if args.mode == "control" else pi, grid, base,
                          np.random.default_rng([seed, 7]))
    rows = []
    for name, hp, trace in sweep_variants(args):
        cfg = replace(base, trace=trace)
        try:
            if args.mode == "control":
                logs = run_control(mdp, mu, cfg, oracle).logs
            else:
                logs = run_evaluate(mdp, pi, mu, cfg, oracle).logs
            rows += [(name, hp, seed) + log.row() + ("",) for log in logs]
        except Exception as exc:  # recorded per cell, reported by exit status
            rows.append((name, hp, seed) + (math.nan,) * len(CSV_COLUMNS) + (f"{type(exc).__name__}: {exc}",))
    return rows


def aggregate(rows, metric: str = "sup_l2") -> dict:
    """(variant, hyperparam) -> (k, mean, standard error) over seeds."""
    col = CSV_COLUMNS.index(metric) + 3
    cells: dict = {}
    for r in rows:
        if r[-1]:
            continue
        cells.setdefault((r[0], r[1]), {}).setdefault(int(r[3]), []).append(float(r[col]))
    out = {}
    for key, by_k in cells.items():
        ks = sorted(by_k)
        vals = [np.array(by_k[k]) for k in ks]
        mean = np.array([v.mean() for v in vals])
        se = np.array([v.std(ddof=1) / math.sqrt(len(v)) if len(v) > 1 else 0.0 for v in vals])
        out[key] = (np.array(ks), mean, se)
    return out


def _label(name, hp):
    if name == "one-step":
        return "one-step"
    if name == "retrace":
        return f"Retrace cbar={hp:g}"
    return f"{name} lambda={hp:g}"


def cmd_sweep(args) -> int:
    if not args.seeds:
        raise UsageError("sweep: --seeds must not be empty")
    if not args.variants or ("retrace" in args.variants and not args.cbar) or \
            (set(args.variants) & {"qlambda", "peng", "alt"} and not args.lambdas):
        raise UsageError("sweep: every sweep axis must be non-empty")
    sweep_variants(args)  # validate names before starting work
    out = _out_dir(args)
    payloads = [(args, s) for s in args.seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_cell, payloads))
    else:
        results = [_sweep_cell(p) for p in payloads]
    rows = [r for cell in results for r in cell]

    buf = io.StringIO()
    buf.write(csv_header("sweep"))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r[0], "" if r[1] is None else repr(r[1]), r[2], r[3]]
                   + [repr(float(v)) for v in r[4:-1]] + [r[-1]])
    (out / "sweep.csv").write_text(buf.getvalue())

    agg = aggregate(rows, args.metric)
    series = [{"label": _label(*key), "x": ks, "y": mean, "err": se} for key, (ks, mean, se) in agg.items()]
    failed = [r for r in rows if r[-1]]
    if series:
        title = f"{args.mode}: {args.metric} distance, mean +/- s.e. over {len(args.seeds)} seeds"
        (out / "sweep.svg").write_text(line_chart(series, title=title, y_label=args.metric, log_y=args.log_y))
    summary = {
        "cells": len({(r[0], r[1], r[2]) for r in rows}),
        "failed_cells": sorted({f"{r[0]}:{r[1]}:{r[2]}" for r in failed}),
        "final": {_label(*key): {"mean": float(mean[-1]), "se": float(se[-1])}
                  for key, (ks, mean, se) in agg.items()},
    }
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2))
    for name, stats in summary["final"].items():
        print(f"{name:28s} final {args.metric} = {stats['mean']:.4f} +/- {stats['se']:.4f}")
    if failed:
        print(f"{len(summary['failed_cells'])} sweep cells failed; see the error column", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# --------------------------------------------------------------------------
# negative-mass trace


def _figure1_policy(mdp, args):
    mu = uniform_policy(mdp)
    star = optimal_policy(mdp)
    if args.alpha is not None:
        return mix_policies(args.alpha, star, mu), mu
    # place the target at 90% of the l2 contraction radius
    gap = policy_l1_distance(star, mu)
    alpha = 1.0 if gap == 0 else min(1.0, 0.9 * radius_l2(mdp.gamma, args.lam) / gap)
    return mix_policies(alpha, star, mu), mu


def cmd_figure1(args) -> int:
    out = _out_dir(args)
    panels_k = args.panels
    k_max = max(args.k_max, max(panels_k))
    seeds = [args.seed] if not args.search else list(range(args.seed, args.seed + args.search))
    trace = None
    for seed in seeds:
        mdp = _load_mdp(args, seed)
        x0, a0 = args.tracked
        if not (0 <= x0 < mdp.n_states and 0 <= a0 < mdp.n_actions):
            raise UsageError(f"figure1: tracked pair {args.tracked} is outside the MDP")
        pi, mu = _figure1_policy(mdp, args)
        grid = make_grid(mdp, RunConfig(m=args.m))
        trace = figure1_trace(mdp, pi, mu, args.lam, grid, k_max, args.tracked)
        if not args.search or trace.went_negative():
            break
    text = csv_header("figure1") + trace.to_csv()
    (out / "figure1.csv").write_text(text)
    panels = [(f"k={k}  min={trace.min_mass[k]:.3g}", trace.masses[k]) for k in panels_k]
    (out / "figure1.svg").write_text(bar_panels(trace.grid.atoms, panels,
                                                title=f"tracked (x,a)={args.tracked}, lambda={args.lam:g}"))
    print(f"seed {seed}: min mass over run {trace.min_mass_overall.min():.3g}, "
          f"final min mass {trace.min_mass[-1]:.3g}, final sup-l2 to target {trace.sup_l2_to_target[-1]:.3g}")
    return EXIT_OK


# --------------------------------------------------------------------------
# analyze


def cmd_analyze(args) -> int:
    if args.mdp:
        mdp = TabularMdp.from_json(Path(args.mdp).read_text())
        mu = uniform_policy(mdp)
        star = optimal_policy(mdp)
        if args.pi == "greedy-of":
            pi = star
        elif args.pi == "uniform":
            pi = mu
        else:
            pi = mix_policies(float(args.pi.split(":", 1)[1]), star, mu)
        if args.mu != "uniform":
            raise UsageError("analyze: only --mu uniform is supported")
        eps = policy_l1_distance(pi, mu)
        gamma = mdp.gamma if args.gamma is None else args.gamma
    else:
        if args.epsilon is None or args.gamma is None:
            raise UsageError("analyze: give --gamma and --epsilon, or --mdp")
        eps, gamma, mdp = args.epsilon, args.gamma, None
    report = contraction_report(gamma, args.lam, eps).to_dict()
    if mdp is not None and args.empirical:
        grid = grid_for_returns(float(mdp.reward.min()), float(mdp.reward.max()), mdp.gamma, args.m)
        report["empirical_beta_2"] = empirical_contraction(mdp, pi, mu, TraceSpec.off_policy(args.lam), grid,
                                                           args.empirical, np.random.default_rng(args.seed))
    print(json.dumps(report, indent=2))
    if args.out:
        (_out_dir(args) / "analysis.json").write_text(json.dumps(report, indent=2))
    return EXIT_OK


# --------------------------------------------------------------------------
# learn


def cmd_learn(args) -> int:
    out = _out_dir(args)
    mdp = _load_mdp(args, args.seed)
    cfg = LearnerConfig(lam=args.lam, alpha=args.alpha, kappa=args.kappa, tau=args.tau, n=args.n,
                        batch_size=args.batch, total_steps=args.steps, eps_decay_steps=args.eps_decay,
                        m=args.m, trace=args.trace, cbar=args.cbar, seed=args.seed)
    params, logs = train(mdp, cfg)
    (out / "learn.csv").write_text(csv_header("learn") + training_log_csv(logs))
    (out / "params.json").write_text(params.to_json())
    last = logs[-1]
    print(f"step {last.step}: sup|Q - Q*| = {last.sup_q_error:.4f}, greedy accuracy {last.greedy_accuracy:.2f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dqlambda", description="Distributional off-policy Q(lambda) experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-mdp", help="write a random tabular MDP as JSON")
    g.add_argument("--states", type=int, default=5)
    g.add_argument("--actions", type=int, default=20)
    g.add_argument("--gamma", type=float, default=0.9)
    g.add_argument("--dirichlet", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--file", help="output file (default <out>/mdp_seed<seed>.json)")
    _add_common(g)
    g.set_defaults(func=cmd_gen_mdp)

    s = sub.add_parser("sweep", help="evaluate/control runs over variants, hyper-parameters and seeds")
    _add_mdp_args(s)
    s.add_argument("--mode", choices=("control", "evaluate"), default="control")
    s.add_argument("--variants", type=lambda t: [v for v in t.split(",") if v],
                   default=["one-step", "retrace", "qlambda"])
    s.add_argument("--cbar", type=_floats, default=[1.0, 2.0, 4.0])
    s.add_argument("--lambdas", type=_floats, default=[0.1, 0.3, 0.5, 0.7, 0.9])
    s.add_argument("--seeds", type=_ints, default=list(range(20)))
    s.add_argument("--k-max", type=int, default=100)
    s.add_argument("--m", type=int, default=10)
    s.add_argument("--v-min", type=float)
    s.add_argument("--v-max", type=float)
    s.add_argument("--allow-uncovered", action="store_true")
    s.add_argument("--alpha", type=float, default=1.0, help="target mixing weight on the greedy policy")
    s.add_argument("--oracle", choices=("mc", "fine_dp", "dp"), default="mc")
    s.add_argument("--oracle-traj", type=int, default=1000)
    s.add_argument("--oracle-refine", type=int, default=100)
    s.add_argument("--refine", type=int, default=8, help="solver sub-cells per grid cell")
    s.add_argument("--solver", choices=SOLVER_MODES, default="auto",
                   help="auto: dense solve up to %d unknowns, iteration beyond" % MAX_DIRECT_UNKNOWNS)
    s.add_argument("--tracked", type=_pair, default=(0, 0))
    s.add_argument("--metric", choices=("sup_l2", "pt_l2"), default="sup_l2")
    s.add_argument("--log-y", action="store_true")
    s.add_argument("--jobs", type=int, default=1)
    _add_common(s)
    s.set_defaults(func=cmd_sweep)

    f = sub.add_parser("figure1", help="bar panels of one entry along the Q(lambda) recursion")
    _add_mdp_args(f)
    f.set_defaults(gamma=0.5, actions=4)
    f.add_argument("--lambda", dest="lam", type=float, default=0.9)
    f.add_argument("--alpha", type=float, help="greedy weight of the target (default: 90%% of the l2 radius)")
    f.add_argument("--m", type=int, default=21)
    f.add_argument("--k-max", type=int, default=40)
    f.add_argument("--panels", type=_ints, default=[0, 1, 2, 5, 20])
    f.add_argument("--tracked", type=_pair, default=(0, 0))
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--search", type=int, default=0,
                   help="try this many seeds and keep the first whose iterates go negative")
    _add_common(f)
    f.set_defaults(func=cmd_figure1)

    a = sub.add_parser("analyze", help="contraction rates and radii as JSON")
    a.add_argument("--gamma", type=float)
    a.add_argument("--lambda", dest="lam", type=float, required=True)
    a.add_argument("--epsilon", type=float)
    a.add_argument("--mdp")
    a.add_argument("--pi", default="greedy-of", help="greedy-of | uniform | mix:ALPHA")
    a.add_argument("--mu", default="uniform")
    a.add_argument("--empirical", type=int, default=0, help="random signed pairs for an empirical rate")
    a.add_argument("--m", type=int, default=21)
    a.add_argument("--seed", type=int, default=0)
    _add_common(a)
    a.set_defaults(func=cmd_analyze)

    lp = sub.add_parser("learn", help="train the sample-based learner")
    _add_mdp_args(lp)
    lp.set_defaults(actions=3)
    lp.add_argument("--lambda", dest="lam", type=float, default=0.4)
    lp.add_argument("--alpha", type=float, default=0.6)
    lp.add_argument("--kappa", type=float, default=LearnerConfig.kappa)
    lp.add_argument("--tau", type=float, default=LearnerConfig.tau)
    lp.add_argument("--n", type=int, default=LearnerConfig.n)
    lp.add_argument("--batch", type=int, default=LearnerConfig.batch_size)
    lp.add_argument("--steps", type=int, default=LearnerConfig.total_steps)
    lp.add_argument("--eps-decay", type=int, default=LearnerConfig.eps_decay_steps)
    lp.add_argument("--m", type=int, default=LearnerConfig.m)
    lp.add_argument("--trace", choices=("off_policy_lambda", "retrace"), default="off_policy_lambda")
    lp.add_argument("--cbar", type=float, default=1.0)
    lp.add_argument("--seed", type=int, default=0)
    _add_common(lp)
    lp.set_defaults(func=cmd_learn)
    return p


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv=None, parser=None) -> argparse.Namespace:
    parser = build_parser() if parser is None else parser
    args = parser.parse_args(argv)
    if getattr(args, "spec", None):
        try:
            doc = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read spec file {args.spec}: {exc}")
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown keys in spec file: {sorted(unknown)}")
        # spec values become defaults, so explicit flags still win on re-parse;
        # list-valued options may be given as JSON arrays
        for action in sub._actions:
            if action.dest in doc and isinstance(doc[action.dest], list) and action.type is not None:
                doc[action.dest] = action.type(",".join(map(str, doc[action.dest])))
        sub.set_defaults(**doc)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:
        log.debug("unhandled failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
