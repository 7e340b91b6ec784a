"""``ebsde-chain`` command-line interface.

Exit codes: 0 success, 2 invalid input, 3 solver nonconvergence,
4 verification failure.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import io
import json
import logging
import os
import sys

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .chain_core import (ergodicity_estimate, is_irreducible, path_matrix, rate_matrix_from_json,
                         stationary_distribution)
from .control import (brute_force_optimal, brute_force_robust, control_problem_from_json,
                      evaluate_policy, RobustControlProblem, solve_control, solve_robust_control)
from .discounted import solve_finite_horizon, solve_stationary
from .drivers import check_balanced, driver_from_json, rate_uncertainty_driver
from .ebsde import parse_normalization, solve, solve_direct, verify_solution
from .errors import EbsdeError, Nonconvergence, StepFailure
from .mc_sim import (coupling_times, empirical_generator, project_split, simulate, split_chain_simulate,
                     trajectories_to_csv)
from .reference_table import BETA, ROWS, zeta_label

log = logging.getLogger("ebsde_chain")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_UNVERIFIED = 0, 2, 3, 4
TABLE_TOL = 5e-4

_MATRIX = {"type": "array", "minItems": 2, "items": {"type": "array", "items": {"type": "number"}}}
_CHAIN_OBJ = {
    "type": "object",
    "properties": {"n": {"type": "integer", "minimum": 2}, "rates": _MATRIX,
                   "convention": {"enum": ["rates", "generator"]}},
    "required": ["rates"],
    "additionalProperties": False,
}
CHAIN_SCHEMA = _CHAIN_OBJ
DRIVER_SCHEMA = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["rate_uncertainty", "hamiltonian", "robust_hamiltonian", "state_cost", "zero"]},
        "zeta": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "beta": {"type": "number"},
        "allow_classical": {"type": "boolean"},
        "g": {"type": "array", "items": {"type": "number"}},
        "controls": {"type": "array"},
        "costs": {"type": "array"},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "convention": {"enum": ["rates", "generator"]},
    },
    "additionalProperties": False,
}
_MATRIX_OR_CHAIN = {"anyOf": [_MATRIX, _CHAIN_OBJ]}
PROBLEM_SCHEMA = {
    "type": "object",
    "required": ["reference", "rate_matrices", "cost", "gamma"],
    "properties": {
        "states": {"type": "integer", "minimum": 2},
        "controls": {"type": "array"},
        "reference": _MATRIX_OR_CHAIN,
        "rate_matrices": {"type": "array", "minItems": 1},
        "cost": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
    },
    "additionalProperties": False,
}


class InputError(Exception):
    """Invalid user input; reported with exit code 2."""


def _load_json(path: str, schema: dict, label: str):
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise InputError(f"{label}: cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{label}: malformed JSON in {path}: {exc}") from exc
    try:
        jsonschema.validate(obj, schema)
    except jsonschema.ValidationError as exc:
        pointer = "/" + "/".join(str(p) for p in exc.absolute_path)
        raise InputError(f"{label}: invalid value at {pointer}: {exc.message}") from exc
    return obj


def _round(obj):
    """Round every float to 12 significant digits for output."""
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _round(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if not np.isfinite(x) else float(f"{x:.12g}")
    return obj


def spec_hash(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _emit(payload: dict, out: str | None, inputs):
    payload = {"tool": "ebsde-chain", "version": __version__, "spec_hash": spec_hash(*inputs), **payload}
    text = json.dumps(_round(payload), indent=2, allow_nan=True) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _chain(args):
    obj = _load_json(args.chain, CHAIN_SCHEMA, "chain")
    return obj, rate_matrix_from_json(obj)


def _driver(args, A):
    obj = _load_json(args.driver, DRIVER_SCHEMA, "driver")
    return obj, driver_from_json(obj, A)


# ------------------------------------------------------------------ commands


def cmd_solve(args) -> int:
    chain_obj, A = _chain(args)
    drv_obj, f = _driver(args, A)
    normalization, x0 = parse_normalization(args.normalize)
    kw = {"normalization": normalization, "x0": x0}
    if args.tol is not None:
        kw["tol"] = args.tol
    sol = solve(A, f, args.method, **kw)
    report = verify_solution(A, f, sol)
    _emit({"command": "solve", "method": sol.method, "normalization": args.normalize, "v": sol.v,
           "lambda": sol.lam, "residual": sol.residual, "verification": report.as_dict()},
          args.out, [chain_obj, drv_obj, args.method, args.normalize, args.tol])
    return EXIT_OK if report.passed else EXIT_UNVERIFIED


def cmd_discounted(args) -> int:
    chain_obj, A = _chain(args)
    drv_obj, f = _driver(args, A)
    sol = solve_stationary(A, f, args.alpha, check_bound=False)
    payload = {"command": "discounted", "alpha": args.alpha, "v": sol.v, "residual": sol.residual,
               "iterations": sol.iterations, "method": sol.method, "bound": sol.bound,
               "bound_ok": sol.bound_ok}
    if args.horizon is not None:
        h = solve_finite_horizon(A, f, args.alpha, args.horizon)
        payload["horizon"] = {"T": args.horizon, "v0": h.values[0], "bound_ok": h.bound_ok,
                              "gap": float(np.abs(h.values[0] - sol.v).max())}
    _emit(payload, args.out, [chain_obj, drv_obj, args.alpha, args.horizon])
    return EXIT_OK if sol.bound_ok else EXIT_UNVERIFIED


def table51_rows(beta: float = BETA):
    """Recompute the rate-uncertainty table; yields ``(zeta, v, lam, pi, deviation)``."""
    A = path_matrix()
    pi = stationary_distribution(A)
    for zeta, v_ref, lam_ref, _ in ROWS:
        sol = solve_direct(A, rate_uncertainty_driver(zeta, beta, A, allow_classical=True))
        got = np.append(sol.v, sol.lam)
        ref = np.append(v_ref, lam_ref)
        dev = float(np.abs(np.round(got, 4) - ref).max())
        yield zeta, sol.v, sol.lam, float(pi[list(zeta)].sum()), dev


def cmd_table51(args) -> int:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["zeta", "v_e1", "v_e2", "v_e3", "v_e4", "lambda", "pi_zeta", "deviation"])
    worst = 0.0
    for zeta, v, lam, p, dev in table51_rows(args.beta):
        w.writerow([zeta_label(zeta)] + [f"{x:.12g}" for x in (*v, lam, p)] + [f"{dev:.3g}"])
        worst = max(worst, dev)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(buf.getvalue())
    else:
        sys.stdout.write(buf.getvalue())
    compare = args.beta == BETA
    if compare:
        print(f"max deviation from reference table: {worst:.3g} (tolerance {TABLE_TOL:g})", file=sys.stderr)
        return EXIT_OK if worst <= TABLE_TOL else EXIT_UNVERIFIED
    return EXIT_OK


def cmd_control(args) -> int:
    obj = _load_json(args.problem, PROBLEM_SCHEMA, "problem")
    P = control_problem_from_json(obj, robust=True if args.robust else None)
    ok = True
    if isinstance(P, RobustControlProblem):
        sol, pol, worst = solve_robust_control(P)
        payload = {"robust": True, "lambda": sol.lam, "v": sol.v, "policy": list(pol.assignment),
                   "worst_case": list(worst), "residual": sol.residual}
        if args.brute_force_check:
            bf, bp = brute_force_robust(P)
            ok = abs(bf - sol.lam) <= 1e-6
            payload["brute_force"] = {"lambda": bf, "policy": list(bp.assignment), "agrees": ok}
    else:
        sol, pol = solve_control(P)
        payload = {"robust": False, "lambda": sol.lam, "v": sol.v, "policy": list(pol.assignment),
                   "policy_value": evaluate_policy(P, pol), "residual": sol.residual}
        if args.brute_force_check:
            bf, bp = brute_force_optimal(P)
            ok = abs(bf - sol.lam) <= 1e-6
            payload["brute_force"] = {"lambda": bf, "policy": list(bp.assignment), "agrees": ok}
    _emit({"command": "control", **payload}, args.out, [obj, args.robust])
    return EXIT_OK if ok else EXIT_UNVERIFIED


def cmd_simulate(args) -> int:
    chain_obj, A = _chain(args)
    trajs = [simulate(A, args.x0, args.horizon, args.seed, index=i) for i in range(args.samples)]
    gen = empirical_generator(trajs, A.n)
    occ = np.mean([tr.occupation(A.n) for tr in trajs], axis=0)
    if args.csv:
        trajectories_to_csv(trajs, args.csv)
    _emit({"command": "simulate", "samples": args.samples, "seed": args.seed, "horizon": args.horizon,
           "jumps": int(sum(tr.n_jumps for tr in trajs)), "occupation": occ,
           "stationary": stationary_distribution(A), "empirical_rates": gen.rates,
           "low_confidence": gen.low_confidence},
          args.out, [chain_obj, args.x0, args.horizon, args.samples, args.seed])
    return EXIT_OK


def cmd_couple(args) -> int:
    chain_obj, A = _chain(args)
    st = coupling_times(A, args.x, args.y, args.samples, args.seed, betas=args.betas)
    rate, r2 = st.tail_rate()
    _emit({"command": "couple", "samples": args.samples, "seed": args.seed,
           "mean_meeting_time": float(st.meeting_times.mean()), "mean_jumps": float(st.jump_counts.mean()),
           "betas": st.betas, "mgf": st.mgf, "mgf_halfwidth": st.mgf_halfwidth,
           "tail_rate": rate, "tail_r2": r2},
          args.out, [chain_obj, args.x, args.y, args.samples, args.seed, args.betas])
    return EXIT_OK


def cmd_split(args) -> int:
    chain_obj, A = _chain(args)
    target_obj = _load_json(args.target, CHAIN_SCHEMA, "target")
    B = rate_matrix_from_json(target_obj)
    trajs = [split_chain_simulate(A, B, args.gamma, args.x0, args.horizon, args.seed, index=i,
                                  refresh=not args.literal) for i in range(args.samples)]
    base = [project_split(tr) for tr in trajs]
    gen = empirical_generator(base, A.n)
    z = gen.zscores(B)
    if args.csv:
        trajectories_to_csv(trajs, args.csv)
    max_z = float(np.nanmax(np.abs(z))) if np.any(np.isfinite(z)) else float("nan")
    _emit({"command": "split", "gamma": args.gamma, "literal": args.literal, "samples": args.samples,
           "seed": args.seed, "layer1_occupation": float(np.mean([tr.layer_occupation() for tr in trajs])),
           "empirical_rates": gen.rates, "max_abs_z": max_z, "within_3sigma": bool(max_z <= 3)},
          args.out, [chain_obj, target_obj, args.gamma, args.x0, args.horizon, args.samples, args.seed,
                     args.literal])
    return EXIT_OK


def cmd_diagnose(args) -> int:
    chain_obj, A = _chain(args)
    payload = {"command": "diagnose", "n": A.n, "irreducible": is_irreducible(A)}
    inputs = [chain_obj]
    if payload["irreducible"]:
        est = ergodicity_estimate(A)
        payload.update(stationary=stationary_distribution(A), R=est.R, rho=est.rho)
    if args.driver:
        drv_obj, f = _driver(args, A)
        inputs.append(drv_obj)
        rep = check_balanced(f, A)
        payload["balance"] = {"class": rep.cls.value, "margin": rep.margin, "certificate": rep.certificate,
                              "samples": rep.samples,
                              "witnesses": [{"x": w[0], "z": w[1], "z_prime": w[2], "i": w[3]}
                                            for w in rep.witnesses]}
    _emit(payload, args.out, inputs)
    return EXIT_OK


# -------------------------------------------------------------------- parser


def _normalization(text: str) -> str:
    try:
        parse_normalization(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc
    return text


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ebsde-chain", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("solve", help="solve the ergodic equation")
    s.add_argument("--chain", required=True)
    s.add_argument("--driver", required=True)
    s.add_argument("--method", choices=["direct", "vanishing"], default="direct")
    s.add_argument("--normalize", type=_normalization, default="zero-sum", help="zero-sum or anchor:<x0>")
    s.add_argument("--tol", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_solve)

    s = sub.add_parser("discounted", help="solve the discounted equation")
    s.add_argument("--chain", required=True)
    s.add_argument("--driver", required=True)
    s.add_argument("--alpha", type=float, required=True)
    s.add_argument("--horizon", type=float, help="also integrate the finite-horizon system to this T")
    s.add_argument("--out")
    s.set_defaults(func=cmd_discounted)

    s = sub.add_parser("table51", help="recompute the rate-uncertainty table on the 4-state path chain")
    s.add_argument("--beta", type=float, default=BETA)
    s.add_argument("--out")
    s.set_defaults(func=cmd_table51)

    s = sub.add_parser("control", help="average-cost control problem")
    s.add_argument("--problem", required=True)
    s.add_argument("--robust", action="store_true")
    s.add_argument("--brute-force-check", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_control)

    s = sub.add_parser("simulate", help="simulate trajectories and estimate rates")
    s.add_argument("--chain", required=True)
    s.add_argument("--x0", type=int, default=0)
    s.add_argument("--horizon", type=float, required=True)
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", help="write (path, time, state) rows here")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("couple", help="meeting times of two independent copies")
    s.add_argument("--chain", required=True)
    s.add_argument("--x", type=int, default=0)
    s.add_argument("--y", type=int, default=1)
    s.add_argument("--samples", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--betas", type=float, nargs="+", default=[0.5, 1.0])
    s.add_argument("--out")
    s.set_defaults(func=cmd_couple)

    s = sub.add_parser("split", help="simulate the split chain and compare its projection with B")
    s.add_argument("--chain", required=True, help="dominating chain A")
    s.add_argument("--target", required=True, help="chain B strictly controlled by A")
    s.add_argument("--gamma", type=float, required=True)
    s.add_argument("--x0", type=int, default=0)
    s.add_argument("--horizon", type=float, required=True)
    s.add_argument("--samples", type=int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--literal", action="store_true", help="simulate the split matrix without layer refresh")
    s.add_argument("--csv")
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("diagnose", help="ergodicity estimate and balance report")
    s.add_argument("--chain", required=True)
    s.add_argument("--driver")
    s.add_argument("--out")
    s.set_defaults(func=cmd_diagnose)
    return p


def _thread_limit():
    raw = os.environ.get("EBSDE_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"EBSDE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"EBSDE_THREADS must be a positive integer, got {raw!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (Nonconvergence, StepFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except (InputError, ValueError, KeyError, EbsdeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
