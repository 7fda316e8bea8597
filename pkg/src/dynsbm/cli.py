"""``dynsbm`` command line: simulate | fit | select | eval | fluxes.

Exit codes: 0 success, 2 usage or parameter error, 3 input validation
failure, 4 degenerate fit.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from dynsbm import io
from dynsbm.emissions import family_from_spec
from dynsbm.errors import (
    DegenerateFit,
    DimensionMismatch,
    EmptyOverlap,
    InvalidParams,
    NotErgodic,
    UnknownPreset,
    UnsupportedFamily,
    UnsupportedValue,
)
from dynsbm.evaluation import averaged_ari, global_ari, group_fluxes, per_time_ari, pi_mse
from dynsbm.model_core import validate_network
from dynsbm.selection import select_q
from dynsbm.simulation import preset_scenario, presence_schedule, simulate
from dynsbm.vem import FitConfig, fit

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_DEGENERATE = 0, 2, 3, 4

log = logging.getLogger("dynsbm")


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _threads(args) -> int:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DYNSBM_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise CliError(EXIT_USAGE, f"DYNSBM_THREADS must be an integer, got {env!r}")
        if n < 1:
            raise CliError(EXIT_USAGE, "DYNSBM_THREADS must be >= 1")
        return n
    return 1


def _positive(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load(args):
    try:
        net = io.load_network(args.edges, args.presence, args.n, args.t)
    except (io.FormatError, OSError) as exc:
        raise CliError(EXIT_INPUT, str(exc))
    except (ValueError, IndexError) as exc:
        raise CliError(EXIT_INPUT, f"{args.edges}: {exc}")
    try:
        family = family_from_spec(args.family, net.weights[net.weights != 0])
    except UnsupportedFamily as exc:
        raise CliError(EXIT_USAGE, str(exc))
    except (InvalidParams, ValueError) as exc:
        raise CliError(EXIT_INPUT, str(exc))
    problems = validate_network(net, family)
    if problems:
        shown = "; ".join(str(v) for v in problems[:5])
        more = f" (+{len(problems) - 5} more)" if len(problems) > 5 else ""
        raise CliError(EXIT_INPUT, f"invalid network: {shown}{more}")
    return net, family


def _config(args) -> FitConfig:
    try:
        return FitConfig(max_outer_iters=args.max_iters, elbo_rel_tol=args.tol,
                         n_restarts=args.restarts, seed=args.seed,
                         map_mode="viterbi" if args.map == "viterbi" else "marginal_argmax",
                         allow_degenerate=args.allow_degenerate, threads=_threads(args))
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc))


# --------------------------------------------------------------------------
# commands

def cmd_simulate(args) -> int:
    out = _out_dir(args)
    if args.params:
        try:
            params = io.read_params(args.params)
        except (io.FormatError, OSError) as exc:
            raise CliError(EXIT_USAGE, str(exc))
        N = args.n or 100
        T = params.n_steps
        if args.t and args.t != T:
            raise CliError(EXIT_USAGE, f"params cover T={T}, got --t {args.t}")
    else:
        name = args.preset or "medium+"
        if args.pi:
            name = f"{name}/{args.pi}"
        try:
            preset = preset_scenario(name, seed=args.seed, n_nodes=args.n, n_steps=args.t)
            params = preset.params()
        except UnknownPreset as exc:
            raise CliError(EXIT_USAGE, f"UnknownPreset: {exc}")
        N, T = preset.n_nodes, preset.n_steps
    if args.absence:
        presence = presence_schedule("bernoulli", N, T, args.seed, p=1 - args.absence)
    else:
        presence = None
    try:
        net, labels = simulate(params, N, T, args.seed, presence)
    except (InvalidParams, NotErgodic, ValueError) as exc:
        raise CliError(EXIT_USAGE, str(exc))
    io.write_edges(out / "edges.tsv", net)
    io.write_labels(out / "labels.csv", labels)
    io.write_params(out / "params.json", params)
    if presence is not None:
        io.write_presence(out / "presence.tsv", presence)
    print(f"wrote {out}/edges.tsv, labels.csv, params.json"
          + (", presence.tsv" if presence is not None else ""))
    return EXIT_OK


def cmd_fit(args) -> int:
    net, family = _load(args)
    config = _config(args)
    if args.q > net.n_nodes:
        raise CliError(EXIT_USAGE, f"--q {args.q} exceeds the number of nodes {net.n_nodes}")
    out = _out_dir(args)
    try:
        result = fit(net, args.q, family, config)
        code = EXIT_OK
    except DegenerateFit as exc:
        result, code = exc.result, EXIT_DEGENERATE
        log.error("%s (use --allow-degenerate to accept)", exc)
    except UnsupportedValue as exc:
        raise CliError(EXIT_INPUT, str(exc))
    io.write_params(out / "params.json", result.params)
    io.write_labels(out / "labels.csv", result.map_labels)
    io.write_trace(out / "elbo.csv", result.elbo_trace)
    if code == EXIT_OK:
        print(f"q={args.q} elbo={result.elbo!r} iterations={len(result.elbo_trace) - 1} "
              f"converged={result.converged}")
    return code


def cmd_select(args) -> int:
    if args.qmin > args.qmax:
        raise CliError(EXIT_USAGE, f"--qmin {args.qmin} > --qmax {args.qmax}")
    net, family = _load(args)
    if args.qmax > net.n_nodes:
        raise CliError(EXIT_USAGE, f"--qmax exceeds the number of nodes {net.n_nodes}")
    config = _config(args)
    out = _out_dir(args)
    try:
        res = select_q(net, range(args.qmin, args.qmax + 1), family, config)
    except UnsupportedFamily as exc:
        raise CliError(EXIT_USAGE, str(exc))
    doc = {
        "method": res.method,
        "chosen_q": res.chosen_q,
        "elbow_suggestion": res.elbow_suggestion,
        "no_elbow": res.no_elbow,
        "records": [{"q": r.q, "complete_ll": r.complete_ll, "icl": r.icl, "elbo": r.elbo,
                     "converged": r.converged, "degenerate": r.degenerate}
                    for r in res.records],
    }
    io.write_json(out / "selection.json", doc)
    io.write_elbow(out / "elbow.csv", res.elbow)
    print(f"chosen_q={res.chosen_q} ({res.method})")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        est = io.read_labels(args.est)
        truth = io.read_labels(args.truth)
    except (io.FormatError, OSError) as exc:
        raise CliError(EXIT_INPUT, str(exc))
    try:
        per_t = per_time_ari(est, truth)
        doc = {"global_ari": global_ari(est, truth), "averaged_ari": averaged_ari(est, truth),
               "per_t_ari": per_t}
        if args.est_params and args.true_params:
            p_hat = io.read_params(args.est_params)
            p_true = io.read_params(args.true_params)
            doc["pi_mse"] = pi_mse(p_hat.pi, p_true.pi, est, truth)
    except (DimensionMismatch, EmptyOverlap) as exc:
        raise CliError(EXIT_USAGE, str(exc))
    except io.FormatError as exc:
        raise CliError(EXIT_INPUT, str(exc))
    if args.out_dir:
        io.write_json(_out_dir(args) / "metrics.json", doc)
    print(io._dumps(doc), end="")
    return EXIT_OK


def cmd_fluxes(args) -> int:
    try:
        z = io.read_labels(args.labels)
    except (io.FormatError, OSError) as exc:
        raise CliError(EXIT_INPUT, str(exc))
    out = _out_dir(args)
    io.write_fluxes(out / "fluxes.csv", group_fluxes(z))
    print(f"wrote {out}/fluxes.csv")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def _fit_flags(p):
    p.add_argument("--edges", required=True)
    p.add_argument("--presence")
    p.add_argument("--n", type=_positive, help="number of nodes (default: largest id)")
    p.add_argument("--t", type=_positive, help="number of time steps (default: largest t)")
    p.add_argument("--family", default="bernoulli",
                   help="bernoulli | finite:M | poisson | gaussian")
    p.add_argument("--tol", type=float, default=1e-4, help="relative ELBO tolerance")
    p.add_argument("--max-iters", type=_positive, default=200)
    p.add_argument("--restarts", type=_positive, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=_positive)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--map", choices=("marginal", "viterbi"), default="marginal")
    p.add_argument("--allow-degenerate", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dynsbm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample a network from a preset or params file")
    p.add_argument("--preset")
    p.add_argument("--pi", help="stability preset: low | medium | high")
    p.add_argument("--params")
    p.add_argument("--n", type=_positive)
    p.add_argument("--t", type=_positive)
    p.add_argument("--absence", type=float, default=0.0,
                   help="probability that a node-time is absent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model with a fixed number of groups")
    _fit_flags(p)
    p.add_argument("--q", type=_positive, required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="choose the number of groups")
    _fit_flags(p)
    p.add_argument("--qmin", type=_positive, default=1)
    p.add_argument("--qmax", type=_positive, required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("eval", help="compare estimated and true labels")
    p.add_argument("--est", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--est-params")
    p.add_argument("--true-params")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fluxes", help="group-to-group flux counts")
    p.add_argument("--labels", required=True)
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_fluxes)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    if getattr(args, "absence", 0) and not 0 <= args.absence < 1:
        parser.error("--absence must lie in [0, 1)")
    if getattr(args, "tol", 1) <= 0:
        parser.error("--tol must be > 0")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
