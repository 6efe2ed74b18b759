"""Command-line entry point.

Every subcommand takes the path of a JSON experiment configuration (see
``configs/experiment.schema.json``) and writes below its ``output_dir``.

Exit codes: 0 success, 2 configuration error, 3 numerical-stage failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from . import harness
from .control import cost, simulate_closed_loop, write_trajectory_csv
from .fp_model import export_model
from .harness import ConfigError, StageError, stage
from .openloop import optimize, write_control_csv
from .projection import export_projected, project
from .reduction import save_singular_values
from .riccati import solve_care
from .tensors import feedback_tensors, save_tensor

log = logging.getLogger("polyfeedback")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _prepare(cfg):
    model = harness.build_model(cfg)
    with stage("project"):
        proj = project(model)
    return model, proj


def cmd_build_model(cfg, args):
    model, proj = _prepare(cfg)
    export_model(model, cfg.out / "model")
    export_projected(proj, cfg.out / "model")
    print(f"n={model.n} m={model.m} -> {cfg.out / 'model'}")


def cmd_reduce(cfg, args):
    model, proj = _prepare(cfg)
    red, pair = harness.reduce(cfg, proj)
    save_singular_values(red.sigma, cfg.out / "singular_values.csv")
    d = cfg.out / "reduced"
    d.mkdir(parents=True, exist_ok=True)
    np.savez(d / "reduced.npz", A=red.A, N=np.array(red.N), B=red.B, C=red.C, V=red.V, W=red.W)
    print(f"r={red.r} (gramian iterations {pair.reach.iterations}/{pair.observe.iterations})")


def _laws(cfg):
    model, proj = _prepare(cfg)
    red, _ = harness.reduce(cfg, proj)
    with stage("initial-condition"):
        rho0, _ = harness.initial_density(cfg, model)
    y0r = red.W.T @ proj.project_state(rho0 - model.rho_inf)
    for beta in cfg.law.betas:
        with stage(f"tensors beta={beta:g}"):
            ric = solve_care(red.A, red.B, red.C, beta)
            yield beta, red, y0r, feedback_tensors(red, ric, cfg.law.p_max, cfg.law.l)


def cmd_tensors(cfg, args):
    for beta, red, _, law in _laws(cfg):
        d = cfg.out / "tensors" / f"beta{harness._beta_label(beta)}"
        d.mkdir(parents=True, exist_ok=True)
        for k, T in law.tensors.items():
            save_tensor(T, d / f"T{k}.bin", {"beta": beta})
        print(f"beta={beta:g}: T_2..T_{law.p} -> {d}")


def cmd_closed_loop(cfg, args):
    for beta, red, y0r, law in _laws(cfg):
        for p in range(2, law.p + 1):
            with stage(f"closed-loop beta={beta:g} p={p}"):
                tr = simulate_closed_loop(red, law.truncate(p), y0r, cfg.horizon,
                                          samples=cfg.nodes)
            label = f"beta{harness._beta_label(beta)}_p{p}"
            write_trajectory_csv(tr, cfg.out / "trajectories" / f"{label}.csv")
            print(f"beta={beta:g} p={p}: J={cost(tr, beta):.6g}" + (" (diverged)" if tr.diverged else ""))


def cmd_open_loop(cfg, args):
    params = harness.armijo_params(cfg)
    for beta, red, y0r, law in _laws(cfg):
        with stage(f"open-loop beta={beta:g}"):
            tr = simulate_closed_loop(red, law.truncate(2), y0r, cfg.horizon, samples=cfg.nodes)
            it = optimize(red, y0r, params, beta, None if tr.diverged else tr.u)
        write_control_csv(it, cfg.out / "trajectories" / f"beta{harness._beta_label(beta)}_opt.csv")
        print(f"beta={beta:g}: J(u_opt)={it.cost:.6g} after {it.iterations} iterations")


def cmd_experiment(cfg, args):
    report = harness.run_experiment(cfg)
    path = harness.write_report(report, cfg.out)
    print(f"report written to {path}")


def cmd_compare_reduction(cfg, args):
    report = harness.compare_reduction(cfg, args.r, p_max=args.p_max)
    path = harness.write_report(report, cfg.out / "compare_reduction")
    print(json.dumps(report.tables["control_deviation"], indent=1, default=str))
    print(f"report written to {path}")


COMMANDS = {
    "build-model": (cmd_build_model, "assemble and export the discretized model"),
    "reduce": (cmd_reduce, "compute Gramians and the balanced reduced model"),
    "tensors": (cmd_tensors, "compute the feedback tensors T_2..T_p"),
    "closed-loop": (cmd_closed_loop, "simulate the reduced closed loops"),
    "open-loop": (cmd_open_loop, "compute the open-loop benchmark control"),
    "experiment": (cmd_experiment, "run the full pipeline and write a report"),
    "compare-reduction": (cmd_compare_reduction, "compare controls across reduced orders"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyfeedback", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, helptext) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("config", help="experiment configuration (JSON)")
        if name == "compare-reduction":
            p.add_argument("--r", type=int, nargs="+", required=True, help="reduced orders")
            p.add_argument("--p-max", type=int, default=3, help="highest degree compared")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = harness.load_config(args.config)
        COMMANDS[args.command][0](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
