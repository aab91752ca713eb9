"""Command-line entry point.

``kinokick retarget`` runs the offline pipeline (retarget, kinematic solve,
kinodynamic solve, torque verification) and writes the trajectory, solver
and torque reports and a forward-velocity CSV.  ``kinokick inspect`` prints
the contact schedule, the termination-threshold schedule or reward
components.

Exit codes: 0 success, 1 error, 2 finished but flagged (not converged or
torque-infeasible).

Every configuration key can be overridden from the environment with the
``KINOKICK_`` prefix; nested keys are joined by ``__``, e.g.
``KINOKICK_SOLVER__EQ_TOL=1e-5`` or ``KINOKICK_MAX_ROUNDS=2``.  Values are
parsed as JSON when possible.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, imitation, mocap, synthetic
from .model import ModelError, load_model, shipped_model
from .solver import SolverOptions, fit_configurations, retarget_until_feasible, solve, verify_torques
from .transcription import (KinodynamicTrajectory, ProblemSpec, TranscriptionError, build_problem,
                            seed_centroidal, velocities_from_configurations)

ENV_PREFIX = "KINOKICK_"
EXIT_OK, EXIT_ERROR, EXIT_FLAGGED = 0, 1, 2

DEFAULT_CONFIG = {
    "model": "kick_leg",
    "clip": "synthetic:kick",
    "out": "kinokick_out",
    "seed": 0,
    "stage": "all",
    "max_rounds": 3,
    "rate": 30.0,
    "max_knots": None,
    "contacts": {"height_threshold": 0.02, "speed_threshold": 0.05, "debounce_frames": 3,
                 "lock_lead": 0.1, "require_swing": True},
    "problem": {},
    "solver": {},
    "imitation": {},
}

log = logging.getLogger("kinokick")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def env_overrides(environ=None) -> dict:
    """Nested dict from ``KINOKICK_A__B=value`` variables (keys lower-cased)."""
    environ = os.environ if environ is None else environ
    out: dict = {}
    for name in sorted(environ):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].lower().split("__")
        node = out
        for key in path[:-1]:
            node = node.setdefault(key, {})
        node[path[-1]] = _parse_value(environ[name])
    return out


def load_config(path=None, flags: dict | None = None, environ=None) -> dict:
    """Defaults, then the config file, then environment, then command-line
    flags (later wins)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        cfg = _merge(cfg, json.loads(path.read_text()))
    cfg = _merge(cfg, env_overrides(environ))
    cfg = _merge(cfg, {k: v for k, v in (flags or {}).items() if v is not None})
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if not isinstance(cfg["max_rounds"], int) or cfg["max_rounds"] < 1:
        raise ConfigError(f"max_rounds must be a positive integer, got {cfg['max_rounds']!r}")
    if cfg["stage"] not in ("kin", "full", "all"):
        raise ConfigError(f"stage must be kin, full or all, got {cfg['stage']!r}")
    if not float(cfg["rate"]) > 0:
        raise ConfigError("rate must be positive")
    if cfg["max_knots"] is not None and int(cfg["max_knots"]) < 3:
        raise ConfigError("max_knots must be at least 3")
    SolverOptions.from_dict(cfg["solver"])
    imitation.config_from_dict(cfg["imitation"])


def _portable(cfg: dict) -> dict:
    # the output location does not affect results
    return {k: v for k, v in cfg.items() if k != "out"}


def config_hash(cfg: dict) -> str:
    text = json.dumps(_portable(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# inputs
# ---------------------------------------------------------------------------

def resolve_model(name_or_path: str):
    path = Path(name_or_path)
    if path.suffix == ".json" or path.exists():
        if not path.exists():
            raise ConfigError(f"model file not found: {path}")
        return load_model(path)
    try:
        return shipped_model(name_or_path)
    except (FileNotFoundError, KeyError, ModelError):
        raise ConfigError(f"no model file or shipped model named {name_or_path!r}") from None


def resolve_clip(spec: str, model) -> mocap.MocapClip:
    """``synthetic:kick`` / ``synthetic:standing`` or a clip file path."""
    if spec.startswith("synthetic:"):
        kind = spec.split(":", 1)[1]
        if kind == "kick":
            return synthetic.kick_clip(model)
        if kind == "standing":
            return synthetic.standing_clip(model)
        raise ConfigError(f"unknown synthetic clip {kind!r}")
    path = Path(spec)
    if not path.exists():
        raise ConfigError(f"clip file not found: {path}")
    return mocap.convert_clip(path)


def prepare(cfg: dict):
    """Model, robot-scale clip, keypoint reference and contact schedule."""
    model = resolve_model(cfg["model"])
    clip = mocap.resample(resolve_clip(cfg["clip"], model), float(cfg["rate"]))
    robot = mocap.rescale_to_robot(clip, model)
    reference = mocap.keypoint_trajectory(robot, model)
    contacts = dict(cfg["contacts"])
    if cfg["clip"] == "synthetic:standing":
        contacts["require_swing"] = False       # nothing to time in a standing clip
    schedule = mocap.detect_contacts(robot, model=model, **contacts)
    n = cfg["max_knots"]
    if n is not None and n < schedule.n_knots:
        reference = reference[:n]
        schedule = mocap.ContactSchedule(schedule.active[:n], schedule.dt, schedule.timings,
                                         schedule.point_names)
    return model, robot, reference, schedule


def build_spec(cfg: dict, model, reference, schedule, q0) -> ProblemSpec:
    problem = dict(cfg["problem"])
    if problem.get("ball_xy") is None:
        problem["ball_xy"] = [float(a) for a in synthetic.default_ball(model, q0)]
    return ProblemSpec.from_config(problem, model, reference, schedule)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------

def _json(obj) -> str:
    def default(o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, (np.floating, np.integer, np.bool_)):
            return o.item()
        raise TypeError(f"cannot serialize {type(o).__name__}")
    return json.dumps(obj, indent=1, sort_keys=True, default=default) + "\n"


def _header(cfg: dict) -> dict:
    return {"tool": "kinokick", "version": __version__, "config_hash": config_hash(cfg)}


def trajectory_document(cfg, spec: ProblemSpec, traj: KinodynamicTrajectory) -> dict:
    return {**_header(cfg), "dt": traj.dt, "model": spec.model.name,
            "model_hash": spec.model.digest(), "schedule": spec.schedule.to_dict(),
            "problem": spec.to_config(), "trajectory": traj.to_dict()}


def velocity_csv(cfg, spec: ProblemSpec, traj: KinodynamicTrajectory) -> str:
    speeds = analysis.forward_velocities(spec.model, traj, spec.target_direction)
    buf = io.StringIO()
    h = _header(cfg)
    buf.write(f"# {h['tool']} {h['version']} config {h['config_hash']}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + list(speeds))
    for k, t in enumerate(traj.times):
        w.writerow([repr(float(t))] + [repr(float(s[k])) for s in speeds.values()])
    return buf.getvalue()


def write_outputs(out: Path, cfg, spec, traj, reports: dict, torques=None):
    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectory.json").write_text(_json(trajectory_document(cfg, spec, traj)))
    doc = {**_header(cfg), "config": _portable(cfg), **reports}
    if torques is not None:
        doc["torques"] = torques.to_dict()
    (out / "reports.json").write_text(_json(doc))
    if traj.n_knots:
        (out / "forward_velocity.csv").write_text(velocity_csv(cfg, spec, traj))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_retarget(cfg: dict) -> int:
    model, _, reference, schedule = prepare(cfg)
    options = SolverOptions.from_dict({"seed": cfg["seed"], **cfg["solver"]})
    q = fit_configurations(model, reference)
    spec = build_spec(cfg, model, reference, schedule, q[0])
    seed = KinodynamicTrajectory(spec.dt, q, velocities_from_configurations(q, spec.dt))
    out = Path(cfg["out"])
    stage = cfg["stage"]
    if stage == "kin":
        traj, rep = solve(build_problem(spec, "kinematics", seed), options)
        write_outputs(out, cfg, spec, traj, {"solves": [rep.to_dict()]})
        return EXIT_FLAGGED if rep.not_converged else EXIT_OK
    if stage == "full":
        traj, rep = solve(build_problem(spec, "full", seed_centroidal(spec, seed)), options)
        torques = verify_torques(model, traj)
        write_outputs(out, cfg, spec, traj, {"solves": [rep.to_dict()]}, torques)
        return EXIT_FLAGGED if rep.not_converged or not torques.feasible else EXIT_OK
    res = retarget_until_feasible(spec, cfg["max_rounds"], options)
    reports = {"solves": [r.to_dict() for r in res.reports], "rounds": res.rounds,
               "feasible": res.feasible, "not_converged": res.not_converged,
               "proxy_bounds": [[b.tolist() for b in pair] for pair in res.bounds],
               "biomechanics": {
                   "lock_window_rate": analysis.lock_window_rate(spec, res.trajectory),
                   "approach_angle_deg": float(np.degrees(analysis.initial_approach_angle(spec, res.trajectory))),
               }}
    write_outputs(out, cfg, spec, res.trajectory, reports, res.torques)
    return EXIT_FLAGGED if res.not_converged else EXIT_OK


def cmd_inspect(cfg: dict, what: str, args) -> int:
    stream = sys.stdout
    if what == "contacts":
        _, _, _, schedule = prepare(cfg)
        w = csv.writer(stream, lineterminator="\n")
        t = schedule.timings.as_dict() if schedule.timings else {}
        stream.write("# " + json.dumps(t, sort_keys=True) + "\n")
        w.writerow(["knot", "t"] + list(schedule.point_names))
        for k, row in enumerate(schedule.active):
            w.writerow([k, repr(float(k * schedule.dt))] + [int(a) for a in row])
        return EXIT_OK
    weights, sched = imitation.config_from_dict(cfg["imitation"])
    if what == "ret-schedule":
        start = 0.0 if args.start is None else args.start
        stop = sched.t_end if args.stop is None else args.stop
        steps = np.linspace(start, stop, args.num)
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["step", "threshold"])
        for t, d in zip(steps, np.atleast_1d(imitation.ret_threshold(steps, sched))):
            w.writerow([repr(float(t)), repr(float(d))])
        return EXIT_OK
    if what == "rewards":
        if args.pair is None:
            raise ConfigError("inspect rewards needs --pair FILE")
        path = Path(args.pair)
        if not path.exists():
            raise ConfigError(f"pair file not found: {path}")
        pair = json.loads(path.read_text())
        model = resolve_model(cfg["model"])
        state = (np.asarray(pair["q"]), np.asarray(pair["v"]))
        ref = (np.asarray(pair["q_ref"]), np.asarray(pair["v_ref"]))
        out = imitation.reward_imitation(state, ref, model, weights).to_dict()
        if "v_ball" in pair:
            out["ball"] = imitation.reward_ball(pair["v_ball"], pair.get("n_target", [1, 0, 0]),
                                                weights.w_ball)
        stream.write(_json({k: float(v) for k, v in out.items()}))
        return EXIT_OK
    raise ConfigError(f"unknown inspect subcommand {what!r}")


class _Parser(argparse.ArgumentParser):
    # usage errors share the error exit code; argparse's default 2 means "flagged" here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kinokick", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"kinokick {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")
        p.add_argument("--model", help="model JSON file or shipped model name")
        p.add_argument("--clip", help="clip file (.csv with sidecar, .npz) or synthetic:kick|standing")
        p.add_argument("--config", help="JSON config document")

    p = sub.add_parser("retarget", help="run the offline trajectory pipeline")
    common(p)
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--stage", choices=["kin", "full", "all"])
    p.add_argument("--max-rounds", type=int, dest="max_rounds")

    p = sub.add_parser("inspect", help="print schedules or reward components")
    p.add_argument("what", choices=["contacts", "ret-schedule", "rewards"])
    common(p)
    p.add_argument("--start", type=float, help="first step (ret-schedule)")
    p.add_argument("--stop", type=float, help="last step (ret-schedule)")
    p.add_argument("--num", type=int, default=101, help="rows (ret-schedule)")
    p.add_argument("--pair", help="JSON with q, v, q_ref, v_ref (rewards)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: getattr(args, k, None) for k in ("model", "clip", "out", "seed", "stage", "max_rounds")}
    try:
        cfg = load_config(args.config, flags)
        if args.command == "retarget":
            return cmd_retarget(cfg)
        return cmd_inspect(cfg, args.what, args)
    except (ConfigError, ModelError, mocap.MocapError, TranscriptionError, ValueError, KeyError,
            OSError, json.JSONDecodeError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        sys.stderr.write(json.dumps(err) + "\n")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
