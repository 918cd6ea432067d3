"""Command-line front end.

Exit codes: 0 success, 2 configuration error, 3 dispatch error.
"""
from __future__ import annotations

import argparse
import copy
import json
import math
import sys

import numpy as np

from . import bounds as B
from .alloc import OptimizationError
from .analysis import info_rate_halfduplex
from .mc import (DEFAULT_HORIZON, DEFAULT_TRIALS, OVERFLOW, SLOPE_TOL, TAIL_FACTOR, BracketError,
                 plant_at, run_trials, threshold_search)
from .model import (Cascade, ConfigError, FullDuplex, HalfDuplex, Parallel, PlantModel, TimeShare,
                    TwoHop, load_config, validate)
from .schemes import SchemePairingError, make_scheme

EXIT_OK, EXIT_CONFIG, EXIT_DISPATCH = 0, 2, 3


class DispatchError(RuntimeError):
    pass


# ------------------------------------------------------------ output

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.12g}"
    return str(v)


def emit(rows: list[dict], fmt: str, out) -> None:
    if not rows:
        return
    cols = list(rows[0])
    cells = [[_fmt(r.get(c, "")) for c in cols] for r in rows]
    if fmt == "csv":
        out.write(",".join(cols) + "\n")
        for line in cells:
            out.write(",".join(line) + "\n")
        return
    width = [max(len(c), *(len(line[i]) for line in cells)) for i, c in enumerate(cols)]
    out.write("  ".join(c.ljust(w) for c, w in zip(cols, width)).rstrip() + "\n")
    for line in cells:
        out.write("  ".join(v.ljust(w) for v, w in zip(line, width)).rstrip() + "\n")


def kv_rows(pairs) -> list[dict]:
    return [{"quantity": k, "value": v} for k, v in pairs]


# ------------------------------------------------------------ config

def read_config(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as err:
        raise ConfigError(f"config: cannot read {path}: {err.strerror}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config: malformed JSON at line {err.lineno} column {err.colno}: {err.msg}") from err
    if not isinstance(doc, dict):
        raise ConfigError("config: expected a JSON object")
    return doc


def parse(doc: dict):
    plant, topo = load_config(doc)
    issues = validate(plant, topo)
    if issues:
        raise ConfigError("validation: " + "; ".join(issues))
    return plant, topo


def default_scheme(topo) -> str:
    if isinstance(topo, Cascade):
        return "linear_cascade"
    if isinstance(topo, Parallel):
        return "linear_parallel"
    if isinstance(topo, HalfDuplex):
        return "sk_halfduplex"
    if isinstance(topo, TimeShare):
        return "timeshare"
    raise DispatchError(f"no closed-loop scheme for topology {type(topo).__name__}")


# ---------------------------------------------------------- commands

def _alloc_pairs(alloc):
    pairs = [(f"power_{i + 1}", float(p)) for i, p in enumerate(alloc.powers)]
    if not math.isnan(alloc.multiplier):
        pairs.append(("multiplier", alloc.multiplier))
    if alloc.beta is not None:
        pairs.append(("beta", alloc.beta))
    if alloc.eta_star is not None:
        pairs.append(("eta_star", alloc.eta_star))
    return pairs


def cmd_bounds(args, doc) -> list[dict]:
    plant, topo = parse(doc)
    cert = B.certificate(topo)
    pairs = [("nec", cert.necessary_rate), ("suf", cert.sufficient_rate),
             ("gap", cert.necessary_rate - cert.sufficient_rate)]
    pairs += _alloc_pairs(cert.achieving_alloc)
    if plant is not None:
        v = B.verdict(plant, topo, cert)
        pairs += [("log_volume", v.log_volume), ("verdict", v.kind), ("boundary", v.at_boundary)]
    return kv_rows(pairs)


def cmd_alloc(args, doc) -> list[dict]:
    _, topo = parse(doc)
    cert = B.certificate(topo)
    return kv_rows(_alloc_pairs(cert.achieving_alloc) +
                   [("total", cert.achieving_alloc.total), ("objective", cert.sufficient_rate)])


def _per_relay(t: dict) -> float:
    if t.get("relay_powers"):
        return float(t["relay_powers"][0])
    n = _relay_count(t)
    return float(t["relay_budget"]) / n if n else 0.0


def _relay_count(t: dict) -> int:
    kind = t["kind"]
    if kind == "two_hop":
        return int(t["relays"])
    if kind == "cascade":
        return len(t["noise_vars"]) - 1
    if kind == "parallel":
        return len(t["relay_noise"])
    if kind in ("half_duplex", "full_duplex"):
        return len(t["relay_gains"])
    raise DispatchError(f"topology '{kind}' has no relays to sweep")


def _first(v):
    return v[0] if isinstance(v, list) else v


def with_param(topo: dict, param: str, value: float) -> dict:
    """Copy of a topology document with one parameter replaced; relay
    counts replicate the first relay and per-relay powers stay fixed."""
    t = copy.deepcopy(topo)
    kind = t["kind"]
    if param == "Ps":
        t["source_power"] = value
        return t
    if kind == "two_hop":
        if param == "L":
            t["relays"] = int(value)
        else:
            t["relay_power"] = value
        return t
    pr = _per_relay(t) if param == "L" else value
    L = _relay_count(t) if param == "Pr" else int(value)
    if param == "L":
        if kind == "cascade":
            if L < 1:
                raise ConfigError("values: cascade needs L >= 1 hops")
            n = t["noise_vars"]
            tail = n[1] if len(n) > 1 else n[0]
            t["noise_vars"] = [n[0]] + [tail] * (L - 1)
            L -= 1
        elif kind == "parallel":
            t["relay_noise"] = [_first(t["relay_noise"])] * L
            t["controller_noise"] = [_first(t["controller_noise"])] * L
        else:
            t["relay_gains"] = [_first(t["relay_gains"])] * L
            t["relay_noise"] = [_first(t["relay_noise"])] * L
    t["relay_budget"] = pr * L
    if "relay_powers" in t:
        t["relay_powers"] = [pr] * L
    return t


def _sweep_row(topo) -> dict:
    cert = B.certificate(topo)
    row = {"nec": cert.necessary_rate, "suf": cert.sufficient_rate,
           "gap": cert.necessary_rate - cert.sufficient_rate}
    if isinstance(topo, TwoHop) and np.ptp(topo.relay_powers) == 0:
        L = topo.n_relays
        row["gap_closed"] = B.twohop_gap_symmetric(topo.source_power, topo.relay_powers[0],
                                                   topo.relay_noise[0], topo.controller_noise,
                                                   topo.relay_gains[0], L)
    elif isinstance(topo, Parallel) and all(np.ptp(v) == 0 for v in (topo.relay_noise,
                                                                      topo.controller_noise)):
        # identical relays: the optimal split is equal, so the closed form applies
        pr = topo.relay_budget / topo.n_relays if topo.relay_powers is None else topo.relay_powers
        if np.ptp(np.atleast_1d(pr)) == 0:
            row["gap_closed"] = B.parallel_gap_symmetric(topo.source_power, float(np.atleast_1d(pr)[0]),
                                                         topo.relay_noise[0], topo.controller_noise[0],
                                                         topo.n_relays)
    return row


def parse_values(text: str | None) -> list[float]:
    if not text:
        raise ConfigError("values: empty grid")
    vals: list[float] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            bits = [float(b) for b in part.split(":")]
            lo, hi = bits[0], bits[1]
            step = bits[2] if len(bits) > 2 else 1.0
            if step <= 0:
                raise ConfigError("values: range step must be positive")
            vals.extend(np.arange(lo, hi + step / 2, step).tolist())
        else:
            vals.append(float(part))
    if not vals:
        raise ConfigError("values: empty grid")
    return vals


def cmd_sweep(args, doc) -> list[dict]:
    if "topology" not in doc:
        raise ConfigError("config: missing key 'topology'")
    values = parse_values(args.values)
    rows = []
    if args.param == "lambda":
        plant, topo = parse(doc)
        template = plant if plant is not None else PlantModel.scalar(1.0)
        cert = B.certificate(topo)
        for lam in values:
            p = plant_at(template, lam)
            v = B.verdict(p, topo, cert)
            rows.append({"lambda": lam, "log_volume": v.log_volume, "nec": cert.necessary_rate,
                         "suf": cert.sufficient_rate, "verdict": v.kind})
        return rows
    for val in values:
        d = dict(doc)
        d["topology"] = with_param(doc["topology"], args.param, val)
        _, topo = parse(d)
        rows.append({args.param: val, **_sweep_row(topo)})
    return rows


def _classify_kw(args):
    return {"slope_tol": args.slope_tol, "tail_factor": args.tail_factor}


def cmd_simulate(args, doc):
    plant, topo = parse(doc)
    if plant is None:
        raise ConfigError("config: missing key 'plant'")
    scheme = make_scheme(args.scheme or default_scheme(topo), plant, topo)
    trace = run_trials(scheme, args.horizon, args.trials, args.seed, overflow=args.overflow,
                       classify_kw=_classify_kw(args))
    return trace


def cmd_rate(args, doc) -> list[dict]:
    _, topo = parse(doc)
    if not isinstance(topo, HalfDuplex):
        raise DispatchError("rate needs a half-duplex or two-hop topology")
    suf, alloc = B.halfduplex_sufficient(topo)
    info = info_rate_halfduplex(topo, alloc.beta, alloc.powers)
    equal = abs(info - suf) <= 1e-12 * max(1.0, abs(suf))
    return kv_rows([("info_rate", info), ("sufficient", suf), ("beta", alloc.beta),
                    *[(f"power_{i + 1}", float(p)) for i, p in enumerate(alloc.powers)],
                    ("equal", equal)])


def cmd_threshold(args, doc) -> list[dict]:
    plant, topo = parse(doc)
    template = plant if plant is not None else PlantModel.scalar(1.0)
    name = args.scheme or default_scheme(topo)
    res = threshold_search(name, template, topo, args.lo, args.hi, seed=args.seed,
                           horizon=args.horizon, trials=args.trials, rel_width=args.rel_width,
                           budget=args.budget)
    return kv_rows([("lambda_hat", res.lam_hat), ("lambda_lo", res.lam_lo),
                    ("lambda_hi", res.lam_hi), ("log_volume", res.log_volume),
                    ("nec", res.necessary), ("suf", res.sufficient),
                    ("scheme_rate", res.scheme_rate), ("evaluations", res.evaluations)])


# ------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="JSON file with plant and topology")
    common.add_argument("--format", choices=("table", "csv"), default="table")
    common.add_argument("--out", help="write output here instead of stdout")
    mcopts = argparse.ArgumentParser(add_help=False)
    mcopts.add_argument("--seed", type=int, default=0)
    mcopts.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    mcopts.add_argument("--horizon", type=int, default=DEFAULT_HORIZON)
    mcopts.add_argument("--scheme", choices=("sk_halfduplex", "linear_cascade", "linear_parallel",
                                             "timeshare"))
    mcopts.add_argument("--slope-tol", type=float, default=SLOPE_TOL,
                        help="log-moment slope per step above which a trace is divergent")
    mcopts.add_argument("--tail-factor", type=float, default=TAIL_FACTOR)
    mcopts.add_argument("--overflow", type=float, default=OVERFLOW,
                        help="squared-state level that stops a trial as divergent")

    p = argparse.ArgumentParser(prog="relaynet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("bounds", parents=[common], help="necessary/sufficient rates and verdict")
    sub.add_parser("alloc", parents=[common], help="power allocation attaining the sufficient rate")
    sw = sub.add_parser("sweep", parents=[common], help="bounds over a parameter grid")
    sw.add_argument("--param", choices=("L", "Pr", "Ps", "lambda"), required=True)
    sw.add_argument("--values", required=True, help="comma list, ranges as lo:hi[:step]")
    sub.add_parser("simulate", parents=[common, mcopts], help="Monte Carlo closed-loop run")
    sub.add_parser("rate", parents=[common], help="half-duplex information rate")
    th = sub.add_parser("threshold", parents=[common, mcopts], help="empirical stability boundary")
    th.add_argument("--lo", type=float, required=True, help="lambda known to be stable")
    th.add_argument("--hi", type=float, required=True, help="lambda known to diverge")
    th.add_argument("--rel-width", type=float, default=0.01)
    th.add_argument("--budget", type=int, default=40, help="maximum Monte Carlo evaluations")
    return p


COMMANDS = {"bounds": cmd_bounds, "alloc": cmd_alloc, "sweep": cmd_sweep, "simulate": cmd_simulate,
            "rate": cmd_rate, "threshold": cmd_threshold}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        doc = read_config(args.config)
        result = COMMANDS[args.command](args, doc)
    except (ConfigError, ValueError, TypeError, KeyError) as err:
        if isinstance(err, SchemePairingError):
            print(f"relaynet: {err}", file=sys.stderr)
            return EXIT_DISPATCH
        print(f"relaynet: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DispatchError, BracketError, OptimizationError) as err:
        print(f"relaynet: {err}", file=sys.stderr)
        return EXIT_DISPATCH
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        if args.command == "simulate":
            if args.format == "csv":
                out.write(result.to_csv())
            else:
                tail = slice(result.moments.size // 2, None)
                emit(kv_rows([("trials", result.trials), ("horizon", int(result.checkpoints[-1])),
                              ("tail_moment_mean", float(np.mean(result.moments[tail]))),
                              ("tail_analytic_mean", float(np.mean(result.analytic[tail]))),
                              ("divergent_trials", int(result.n_divergent[-1]))]), "table", out)
            out.write(f"# verdict: {result.verdict}\n")
        else:
            emit(result, args.format, out)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
