"""Command-line harness for the learn / distill / evaluate pipeline.

Every command reads one JSON config (``--config``; defaults otherwise), takes an
explicit ``--seed`` and writes only under ``--out``. Exit codes: 0 success,
1 usage or configuration error, 2 numerical failure (details in ``error.json``).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import replace
from typing import List, Optional

import numpy as np

from . import distill as dl
from . import gp as gplib
from . import roa as roalib
from .config import ConfigError, ExperimentConfig
from .dataset import EmptyDatasetError
from .plant import DivergenceError, Disturbance, PlantParams, Trajectory, as_state_array, batch_rollout, rollout
from .policy_search import PilcoAbort, PolicyParams, PropagationError, pilco_loop

logger = logging.getLogger("pilcopid")

SCENARIOS = ("nominal", "matched", "unmatched", "param_sweep")
NUMERICAL_ERRORS = (
    DivergenceError,
    np.linalg.LinAlgError,
    FloatingPointError,
    PilcoAbort,
    PropagationError,
    gplib.FitError,
    roalib.FitQualityError,
    roalib.EmptyRoaError,
    dl.DataQualityError,
    EmptyDatasetError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _path_or_default(path: Optional[str], out: str, name: str) -> str:
    path = path or os.path.join(out, name)
    if not os.path.exists(path):
        raise UsageError(f"{path} not found; run the producing command first or pass it explicitly")
    return path


# -- pilco -------------------------------------------------------------------------


def cmd_pilco(cfg: ExperimentConfig, out: str) -> dict:
    result = pilco_loop(cfg.plant, cfg.cost, cfg.loop, seed=cfg.seed)
    result.policy.save(os.path.join(out, "policy.json"))
    result.write_log(os.path.join(out, "pilco_log.csv"))
    summary = {
        "iterations": len(result.log) - 1,
        "task_learned": result.task_learned,
        "transitions": result.log[-1].n_transitions,
        "final_J_realized": result.log[-1].J_realized,
    }
    _write_json(os.path.join(out, "pilco_summary.json"), summary)
    return summary


# -- distill -----------------------------------------------------------------------


def write_trace(path, trace: List[float]) -> None:
    with open(path, "w") as f:
        f.write("iter,objective\n")
        for i, v in enumerate(trace):
            f.write(f"{i},{v!r}\n")


def cmd_distill(cfg: ExperimentConfig, out: str, policy_path: Optional[str] = None) -> dict:
    policy = PolicyParams.load(_path_or_default(policy_path, out, "policy.json"))
    rng = np.random.default_rng(cfg.seed)
    data = dl.collect_expert_data(
        cfg.plant,
        policy,
        cfg.expert.n_rollouts,
        dl.gaussian_init_sampler(cfg.cost.init_mean, cfg.expert.init_std),
        seed=int(rng.integers(2**31)),
        horizon=cfg.expert.horizon,
        param_cov=cfg.loop.param_cov,
        randomize_params=cfg.expert.randomize_params,
        x_des=cfg.cost.target,
    )
    sigma0 = cfg.distill.sigma_init_scale * cfg.plant.u_max
    gains0 = dl.initial_gains(cfg.distill.structure, data.channels, sigma0, rng, cfg.distill.integral)
    result = dl.minimize_kld(data, gains0, cfg.distill)
    result.gains.save(os.path.join(out, "gains.json"))
    write_trace(os.path.join(out, "distill_trace.csv"), result.trace)
    data.to_csv(os.path.join(out, "expert_dataset.csv"))
    grids = dl.joint_density_grids(data, gains0, result.gains, cfg.plant.u_max, cfg.expert.kde_resolution, seed=cfg.seed)
    kld = {}
    for (tag, name), grid in grids.items():
        grid.to_csv(os.path.join(out, f"kde_{tag}_{name}.csv"))
    for name in ("x", "theta"):
        for tag in ("initial", "final"):
            kld[f"{tag}_{name}"] = dl.kld_discrete(grids[("expert", name)], grids[(tag, name)])
    summary = {
        "n_samples": len(data),
        "iterations": result.n_iter,
        "converged": result.converged,
        "objective_initial": result.trace[0],
        "objective_final": result.trace[-1],
        "gains": result.gains.to_dict(),
        "kld": kld,
    }
    _write_json(os.path.join(out, "distill_summary.json"), summary)
    return summary


# -- evaluate ----------------------------------------------------------------------


def settling_index(states, x_des, tol: float) -> Optional[int]:
    """First index after which the state stays within ``tol`` of ``x_des``; None if never."""
    with np.errstate(invalid="ignore"):
        dev = np.linalg.norm(np.asarray(states) - np.asarray(x_des), axis=-1)
    outside = ~(dev < tol)
    if outside[-1]:
        return None
    idx = np.nonzero(outside)[0]
    return 0 if idx.size == 0 else int(idx[-1] + 1)


def run_case(cfg: ExperimentConfig, gains: dl.PIDGains, params: PlantParams, x0, disturbance: Optional[Disturbance], zero_integral: bool, seed: int):
    controller = dl.PIDController(gains, params.dt, params.u_max, cfg.cost.target, cfg.evaluate.anti_windup, zero_integral)
    ev = cfg.evaluate
    try:
        if ev.noise:
            traj = rollout(controller, x0, ev.horizon, params, disturbance, seed=seed)
        else:
            traj = batch_rollout(controller, [x0], ev.horizon, params, disturbance).trajectory(0)
    except DivergenceError as exc:
        logger.warning("evaluation rollout diverged: %s", exc)
        traj = None
    x_des = as_state_array(cfg.cost.target)
    record = {
        "m": params.pendulum_mass,
        "l": params.pole_length,
        "x0": [float(v) for v in x0],
        "disturbance": None if disturbance is None else {k: getattr(disturbance, k) for k in ("channel", "profile", "magnitude", "start_time", "duration")},
        "settling_time": None,
        "recovery_time": None,
        "peak_theta": None,
        "peak_deviation": None,
        "converged": False,
    }
    if traj is None or not np.all(np.isfinite(traj.states)):
        return record, traj
    k = settling_index(traj.states, x_des, ev.settle_tol)
    tail = roalib.lyapunov_values(traj.states, x_des, params.dt, ev.settle_tol)[1][0]
    record["peak_theta"] = float(np.max(np.abs(traj.states[:, 2] - x_des[2])))
    record["peak_deviation"] = float(np.max(np.linalg.norm(traj.states - x_des, axis=1)))
    if k is not None:
        record["settling_time"] = float(traj.times[k])
    if disturbance is None:
        record["converged"] = bool(tail)
    else:
        if k is not None:
            record["recovery_time"] = max(0.0, float(traj.times[k]) - disturbance.start_time)
        record["converged"] = bool(tail and record["recovery_time"] is not None and record["recovery_time"] <= ev.recovery_window)
    return record, traj


def cmd_evaluate(cfg: ExperimentConfig, out: str, scenario: str, gains_path: Optional[str] = None, zero_integral: bool = False) -> dict:
    if scenario not in SCENARIOS:
        raise UsageError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    gains = dl.PIDGains.load(_path_or_default(gains_path, out, "gains.json"))
    x_tilt = np.array([0.0, 0.0, cfg.evaluate.theta0, 0.0]) + as_state_array(cfg.cost.target)
    x_rest = np.asarray(as_state_array(cfg.cost.target), dtype=float)
    cases = []
    if scenario == "nominal":
        cases.append(("nominal", cfg.plant, x_tilt, None))
    elif scenario == "matched":
        cases.append(("matched", cfg.plant, x_rest, cfg.matched))
    elif scenario == "unmatched":
        cases.append(("unmatched", cfg.plant, x_rest, cfg.unmatched))
    else:
        for m, l in cfg.evaluate.sweep:
            cases.append((f"m{m}_l{l}", replace(cfg.plant, pendulum_mass=float(m), pole_length=float(l)), x_tilt, None))
    runs = []
    for i, (label, params, x0, dist) in enumerate(cases):
        record, traj = run_case(cfg, gains, params, x0, dist, zero_integral, cfg.seed + i)
        record["label"] = label
        runs.append(record)
        if traj is not None:
            traj.to_csv(os.path.join(out, f"eval_{scenario}_{label}.csv"))
    summary = {
        "scenario": scenario,
        "structure": gains.structure,
        "zero_integral": zero_integral,
        "runs": runs,
        "all_converged": all(r["converged"] for r in runs),
    }
    _write_json(os.path.join(out, f"eval_{scenario}.json"), summary)
    return summary


# -- roa ---------------------------------------------------------------------------


def cmd_roa(cfg: ExperimentConfig, out: str, gains_path: Optional[str] = None, zero_integral: bool = False) -> dict:
    gains = dl.PIDGains.load(_path_or_default(gains_path, out, "gains.json"))
    rc = cfg.roa

    def factory():
        return dl.PIDController(gains, cfg.plant.dt, cfg.plant.u_max, cfg.cost.target, cfg.evaluate.anti_windup, zero_integral)

    est = roalib.estimate_roa(
        factory, cfg.plant, rc.theta_range, rc.theta_dot_range, rc.resolution, rc.horizon, rc.tail_tol, rc.n_boundary
    )
    est.to_csv(os.path.join(out, "roa_grid.csv"))
    est.write_summary(os.path.join(out, "roa_summary.json"))
    return est.summary()


# -- simulate ----------------------------------------------------------------------


def cmd_simulate(cfg: ExperimentConfig, out: str, controller: str, theta0: float, horizon: int, policy_path=None, gains_path=None, zero_integral=False) -> dict:
    x0 = np.array([0.0, 0.0, theta0, 0.0])
    if controller == "zero":
        ctrl = lambda s: 0.0  # noqa: E731
    elif controller == "policy":
        ctrl = PolicyParams.load(_path_or_default(policy_path, out, "policy.json"))
    else:
        gains = dl.PIDGains.load(_path_or_default(gains_path, out, "gains.json"))
        ctrl = dl.PIDController(gains, cfg.plant.dt, cfg.plant.u_max, cfg.cost.target, cfg.evaluate.anti_windup, zero_integral)
    traj: Trajectory = rollout(ctrl, x0, horizon, cfg.plant, seed=cfg.seed)
    traj.to_csv(os.path.join(out, f"simulate_{controller}.csv"))
    return {"controller": controller, "steps": horizon, "final_state": traj.states[-1].tolist()}


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pilcopid", description=__doc__.splitlines()[0])
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("config", parents=[common], help="write the full default config to OUT/config.json")
    sub.add_parser("pilco", parents=[common], help="learn the expert policy")
    p = sub.add_parser("distill", parents=[common], help="distill the expert into PID gains")
    p.add_argument("--policy", help="policy checkpoint (default OUT/policy.json)")
    for name, hlp in (("evaluate", "closed-loop PID scenarios"), ("roa", "region of attraction of the PID loop")):
        p = sub.add_parser(name, parents=[common], help=hlp)
        p.add_argument("--gains", help="gains file (default OUT/gains.json)")
        p.add_argument("--zero-integral", action="store_true", help="zero the integral gains (PD mode)")
        if name == "evaluate":
            p.add_argument("--scenario", default="nominal", choices=SCENARIOS)
    p = sub.add_parser("simulate", parents=[common], help="single raw rollout")
    p.add_argument("--controller", default="pid", choices=("zero", "policy", "pid"))
    p.add_argument("--policy")
    p.add_argument("--gains")
    p.add_argument("--theta0", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--zero-integral", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = args.out
    try:
        cfg = load_config(args)
        os.makedirs(out, exist_ok=True)
        if args.command == "config":
            cfg.save(os.path.join(out, "config.json"))
            result = {"config": os.path.join(out, "config.json")}
        elif args.command == "pilco":
            result = cmd_pilco(cfg, out)
        elif args.command == "distill":
            result = cmd_distill(cfg, out, args.policy)
        elif args.command == "evaluate":
            result = cmd_evaluate(cfg, out, args.scenario, args.gains, args.zero_integral)
        elif args.command == "roa":
            result = cmd_roa(cfg, out, args.gains, args.zero_integral)
        else:
            result = cmd_simulate(cfg, out, args.controller, args.theta0, args.steps, args.policy, args.gains, args.zero_integral)
    except (UsageError, ConfigError) as exc:
        print(f"pilcopid: error: {exc}", file=sys.stderr)
        return 1
    except NUMERICAL_ERRORS as exc:
        record = {"command": args.command, "error": type(exc).__name__, "message": str(exc)}
        step = getattr(exc, "step_index", None)
        if step is not None:
            record["step_index"] = step
        _write_json(os.path.join(out, "error.json"), record)
        print(f"pilcopid: numerical failure: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=1, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
