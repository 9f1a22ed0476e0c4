"""Command-line surface: ``python -m bevslam <command>``.

Commands: simulate, optimize, evaluate, ablate, plot. Exit codes are a
stable contract: 0 success, 1 runtime failure, 2 usage error.

Run settings come from an optional flat ``key = value`` file (``--config``)
and are overridden by ``--kebab-case`` flags of the same names.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from . import evaluation as ev
from .builder import GraphConfig
from .metrology import CameraModel
from .optimizer import SolveReport, SolverConfig, graph_cost
from .posegraph import Mode, PoseGraph, save
from .plotting import timing_svg, trajectory_svg, write_svg
from .simulator import PATH_KINDS, Dataset, DatasetError, NoiseModel, ScenarioSpec, load_dataset, save_dataset, simulate

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad invocation or configuration (exit 2)."""


class RunFailure(Exception):
    """Runtime failure: missing inputs, solver breakdown, I/O (exit 1)."""


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    lie_group: str = "se2"
    # per-family weights
    w_cc: float = 10000.0
    w_vv: float = 1.0
    w_cp: float = 10000.0
    cv_gain: float = 1.0
    landmark_depth_t: float = 20.0
    anchor_landmarks: bool = True
    vv_history: int = 10
    max_coast: int = 3
    # metrology
    camera: Optional[str] = None
    d_near: float = 10.0
    d_far: float = 30.0
    # solver
    max_iterations: int = 50
    incremental_iterations: int = 5
    damping_init: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.1
    cost_tol: float = 1e-9
    step_tol: float = 1e-10
    incremental_window: int = 10
    max_damping_increases: int = 10
    jacobian: str = "analytic"

    def graph_config(self) -> GraphConfig:
        return GraphConfig(
            mode=Mode(self.lie_group.upper()),
            w_cc=self.w_cc, w_vv=self.w_vv, w_cp=self.w_cp, cv_gain=self.cv_gain,
            d_near=self.d_near, d_far=self.d_far, landmark_depth_T=self.landmark_depth_t,
            anchor_landmarks=self.anchor_landmarks, vv_history=self.vv_history, max_coast=self.max_coast,
        )

    def solver_config(self) -> SolverConfig:
        names = {f.name for f in fields(SolverConfig)}
        return SolverConfig(**{k: getattr(self, k) for k in names})


CONFIG_HELP = {
    "lie_group": "pose parameterisation: se2 or se3",
    "w_cc": "CC (odometry) edge weight, unitless",
    "w_vv": "VV (motion model) edge weight, unitless",
    "w_cp": "CP (lane landmark) edge weight, unitless",
    "cv_gain": "multiplier on the depth-dependent CV weight, unitless (0 disables CV)",
    "landmark_depth_t": "landmark depth threshold T in metres (inf keeps all)",
    "anchor_landmarks": "hold mapped lane landmarks fixed: true/false",
    "vv_history": "frames averaged by the constant-velocity predictor, count",
    "max_coast": "frames a lost track is extrapolated, count",
    "camera": "camera file overriding the dataset's camera.txt, path",
    "d_near": "depth in metres below which detections get the near CV weight",
    "d_far": "depth in metres beyond which detections get the far CV weight",
    "max_iterations": "LM iterations for batch solves, count",
    "incremental_iterations": "LM iterations per incremental step, count",
    "damping_init": "initial LM damping, unitless",
    "damping_up": "damping factor after a rejected step, unitless",
    "damping_down": "damping factor after an accepted step, unitless",
    "cost_tol": "relative cost decrease that counts as converged, unitless",
    "step_tol": "update norm that counts as converged, tangent units",
    "incremental_window": "frames kept active by the incremental solver, count",
    "max_damping_increases": "consecutive failed steps before giving up, count",
    "jacobian": "analytic or numeric (central differences)",
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise ValueError(raw)
            return low in _TRUE
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise UsageError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    known = {f.name for f in fields(RunConfig)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_").lower()
        if key not in known:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def validate_config(cfg: RunConfig) -> RunConfig:
    if cfg.lie_group.lower() not in ("se2", "se3"):
        raise UsageError("lie_group must be se2 or se3")
    cfg.lie_group = cfg.lie_group.lower()
    if cfg.camera is not None and not Path(cfg.camera).is_file():
        raise UsageError(f"camera file not found: {cfg.camera}")
    try:
        cfg.graph_config()
        cfg.solver_config()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return cfg


def load_config(path: Optional[Path], overrides: Optional[dict] = None) -> RunConfig:
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(), str(path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_config(RunConfig(**values))


# ---------------------------------------------------------------------------
# argument parsing


def _int_at_least(lo: int):
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}")
        return v

    return parse


def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value run configuration file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        kind = {"int": int, "float": float}.get(f.type, str)
        p.add_argument(flag, dest=f"cfg_{f.name}", metavar=f.name.upper(), type=kind, default=None,
                       help=CONFIG_HELP[f.name])


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    for f in fields(RunConfig):
        v = getattr(args, f"cfg_{f.name}")
        if v is not None and f.type == "bool":
            v = _coerce(f.name, v)
        overrides[f.name] = v
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m bevslam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    s.add_argument("--out", type=Path, default=Path("dataset"), help="output directory")
    s.add_argument("--kind", choices=PATH_KINDS, default="straight", help="ego path shape")
    s.add_argument("--frames", type=_int_at_least(2), default=100, help="frame count (>= 2)")
    s.add_argument("--speed", type=float, default=1.0, help="ego speed, metres per frame")
    s.add_argument("--vehicles", type=_int_at_least(0), default=2, help="other vehicles, count")
    s.add_argument("--lanes", type=_int_at_least(0), default=2, help="lane lines, count")
    s.add_argument("--lane-spacing", type=float, default=3.5, help="lane spacing, metres")
    s.add_argument("--radius", type=float, default=100.0, help="arc radius, metres")
    s.add_argument("--seed", type=int, default=0, help="noise seed")
    s.add_argument("--odo-sigma-t", type=float, default=0.0, help="odometry translation noise, metres per step")
    s.add_argument("--odo-sigma-r", type=float, default=0.0, help="odometry rotation noise, radians per step")
    s.add_argument("--det-sigma", type=float, default=0.0, help="detection position noise, metres")
    s.add_argument("--det-sigma-yaw", type=float, default=0.0, help="detection yaw noise, radians (0: no yaw)")
    s.add_argument("--lane-pixel-sigma", type=float, default=0.0, help="lane observation noise, pixels")
    s.add_argument("--odo-scale", type=float, default=1.0, help="odometry scale factor, unitless")
    s.add_argument("--dropout", type=float, default=0.0, help="detection dropout probability")

    o = sub.add_parser("optimize", help="build and solve the pose graph of a dataset")
    o.add_argument("dataset", type=Path, help="dataset directory")
    o.add_argument("--out", type=Path, default=Path("results"), help="output directory")
    o.add_argument("--mode", choices=("batch", "incremental"), default="batch", help="solver mode")
    _add_run_options(o)

    e = sub.add_parser("evaluate", help="score optimised trajectories against ground truth")
    e.add_argument("dataset", type=Path, help="dataset directory")
    e.add_argument("results", type=Path, help="directory written by optimize")

    a = sub.add_parser("ablate", help="constraint ablations, sweeps and timing")
    a.add_argument("dataset", type=Path, help="dataset directory")
    a.add_argument("--out", type=Path, default=Path("ablation"), help="output directory")
    a.add_argument("--mode", choices=("batch", "incremental"), default="batch", help="solver mode")
    a.add_argument("--families", action="store_true", help="zero one edge family at a time")
    a.add_argument("--depth-sweep", action="store_true", help="landmark depth threshold T in {12,15,18,20,inf} m")
    a.add_argument("--cp-sweep", action="store_true", help="CP weight in {1e3, 1e4, 1e5}")
    a.add_argument("--lanes", action="store_true", help="before/after lane constraints")
    a.add_argument("--timing", action="store_true", help="per-frame wall time of the chosen mode, seconds")
    _add_run_options(a)

    p = sub.add_parser("plot", help="render SVGs from optimize results")
    p.add_argument("results", type=Path, help="directory written by optimize")
    return parser


# ---------------------------------------------------------------------------
# commands


def _load(path: Path, cfg: Optional[RunConfig] = None) -> Dataset:
    try:
        d = load_dataset(path)
    except (DatasetError, ValueError, OSError) as exc:
        raise RunFailure(str(exc)) from None
    if cfg is not None and cfg.camera is not None:
        d.camera = CameraModel.load(Path(cfg.camera))
    return d


def _mkdir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise RunFailure(f"cannot create {path}: {exc}") from None


def cmd_simulate(args: argparse.Namespace) -> int:
    try:
        spec = ScenarioSpec(
            kind=args.kind, frames=args.frames, speed=args.speed, vehicles=args.vehicles,
            lanes=args.lanes, lane_spacing=args.lane_spacing, radius=args.radius,
        )
        noise = NoiseModel(
            seed=args.seed, odo_sigma_t=args.odo_sigma_t, odo_sigma_r=args.odo_sigma_r,
            det_sigma=args.det_sigma, odo_scale=args.odo_scale, dropout_prob=args.dropout,
            det_sigma_yaw=args.det_sigma_yaw, lane_pixel_sigma=args.lane_pixel_sigma,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = simulate(spec, noise)
    try:
        save_dataset(d, args.out)
    except OSError as exc:
        raise RunFailure(f"cannot write dataset to {args.out}: {exc}") from None
    print(f"seed={noise.seed} frames={d.frames} vehicles={len(d.gt_vehicles)} "
          f"detections={len(d.detections)} lane_observations={len(d.lanes)} -> {args.out}")
    return EXIT_OK


REPORT_HEADER = "iteration,cost,step_norm,accepted,time_s"


def _report_csv(mode: str, reports: list[SolveReport], step_costs: list[tuple[int, float]]) -> str:
    """Batch: row 0 is the initial state, then one row per LM iteration.
    Incremental: one row per frame step with the whole-graph cost after it."""
    lines = [REPORT_HEADER]
    if mode == "batch":
        if reports:
            r = reports[0]
            lines.append(f"0,{r.initial_cost:.17g},0,1,0.000000")
            lines += r.to_csv().splitlines()[1:]
    else:
        for (frame, cost), r in zip(step_costs, reports):
            step = r.history[-1].step_norm if r.history else 0.0
            lines.append(f"{frame},{cost:.17g},{step:.17g},{int(r.converged)},{r.wall_time_s:.6f}")
    return "\n".join(lines) + "\n"


def _vehicle_file(agent: str) -> str:
    return f"traj_{agent}.csv"


def cmd_optimize(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    d = _load(args.dataset, cfg)
    _mkdir(args.out)
    step_costs: list[tuple[int, float]] = []

    def record(g: PoseGraph, report: SolveReport) -> None:
        if args.mode == "incremental":
            step_costs.append((g.frames()[-1], graph_cost(g).total))

    try:
        run = ev.solve_dataset(d, cfg.graph_config(), cfg.solver_config(), args.mode, on_step=record)
    except (ValueError, ev.EvaluationError) as exc:
        raise RunFailure(str(exc)) from None
    out = args.out
    save(run.graph, out / "graph_final.txt")
    for agent, traj in ev.trajectories(run.graph).items():
        ev.write_trajectory_csv(out / _vehicle_file(agent), traj)
    for agent, traj in ev.ground_truth(d).items():
        ev.write_trajectory_csv(out / f"gt_{_vehicle_file(agent)}", traj)
    (out / "report.csv").write_text(_report_csv(args.mode, run.reports, step_costs))
    if args.mode == "incremental":
        rows = [ev.TimingRow(f, 0, r.wall_time_s) for (f, _), r in zip(step_costs, run.reports)]
    else:
        rows = [ev.TimingRow(d.frames - 1, 0, run.reports[0].wall_time_s)] if run.reports else []
    objects = {p.frame: len(p.vehicles) for p in d.payloads(cfg.d_near, cfg.d_far)}
    rows = [replace(r, objects=objects.get(r.frame, 0)) for r in rows]
    ev.write_timing_csv(out / "timing.csv", rows)
    status = "ok" if run.error is None else f"partial: {run.error}"
    (out / "status.txt").write_text(status + "\n")
    final = graph_cost(run.graph).total
    print(f"mode={args.mode} lie_group={cfg.lie_group} final_cost={final:.6g} status={status} -> {out}")
    if run.error is not None:
        print(f"error: numerical failure, outputs are partial: {run.error}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _read_results_dir(results: Path, prefix: str) -> dict[str, ev.TrajectoryEstimate]:
    trajs = {}
    for path in sorted(results.glob(f"{prefix}traj_*.csv")):
        agent = path.stem[len(prefix) + len("traj_"):]
        try:
            trajs[agent] = ev.read_trajectory_csv(path, agent)
        except (ev.EvaluationError, ValueError, KeyError) as exc:
            raise RunFailure(f"{path}: {exc}") from None
    return trajs


def cmd_evaluate(args: argparse.Namespace) -> int:
    d = _load(args.dataset)
    if not args.results.is_dir():
        raise RunFailure(f"results directory not found: {args.results}")
    est = _read_results_dir(args.results, "")
    if "ego" not in est:
        raise RunFailure(f"missing traj_ego.csv in {args.results}")
    try:
        results = ev.score(est, ev.ground_truth(d))
    except ev.EvaluationError as exc:
        raise RunFailure(str(exc)) from None
    rows = [ev.ResultRow("run", a, len(r.frames), r.rms) for a, r in results.items()]
    ev.write_results_csv(args.results / "ate.csv", rows)
    for r in rows:
        print(f"{r.agent:>12s}  frames={r.frames:4d}  ate_rms_m={r.ate_rms_m:.6f}")
    return EXIT_OK


def _print_rows(title: str, rows: list[ev.ResultRow]) -> None:
    print(title)
    for r in rows:
        note = f"  error: {r.error}" if r.error else ""
        print(f"  {r.config:>20s} {r.agent:>12s} {r.ate_rms_m:.6f}{note}")


def cmd_ablate(args: argparse.Namespace) -> int:
    if not (args.families or args.depth_sweep or args.cp_sweep or args.lanes or args.timing):
        raise UsageError("choose at least one of --families, --depth-sweep, --cp-sweep, --lanes, --timing")
    cfg = _run_config(args)
    d = _load(args.dataset, cfg)
    _mkdir(args.out)
    gcfg, scfg = cfg.graph_config(), cfg.solver_config()
    try:
        if args.families:
            rows = ev.ablate_families(d, gcfg, scfg, args.mode)
            ev.write_results_csv(args.out / "ablation_families.csv", rows)
            _print_rows("constraint families", rows)
        if args.depth_sweep:
            rows = ev.sweep(d, "depth_T", gcfg, scfg, args.mode)
            ev.write_results_csv(args.out / "sweep_depth.csv", rows)
            _print_rows("landmark depth threshold", rows)
        if args.cp_sweep:
            rows = ev.sweep(d, "cp_weight", gcfg, scfg, args.mode)
            ev.write_results_csv(args.out / "sweep_cp.csv", rows)
            _print_rows("CP weight", rows)
        if args.lanes:
            res = ev.lane_ablation(d, gcfg, scfg, args.mode)
            rows = res["before"] + res["after"]
            ev.write_results_csv(args.out / "lane_ablation.csv", rows)
            _print_rows("lane constraints", rows)
        if args.timing:
            trows = ev.runtime_profile(d, args.mode, gcfg, scfg)
            ev.write_timing_csv(args.out / "timing_profile.csv", trows)
            print(f"timing: {len(trows)} rows, median {1e3 * ev.median_step_time(trows):.3f} ms")
    except ev.EvaluationError as exc:
        raise RunFailure(str(exc)) from None
    return EXIT_OK


def cmd_plot(args: argparse.Namespace) -> int:
    res = args.results
    for name in ("traj_ego.csv", "gt_traj_ego.csv", "timing.csv"):
        if not (res / name).is_file():
            raise RunFailure(f"missing {name} in {res}")
    est = _read_results_dir(res, "")
    gt = _read_results_dir(res, "gt_")
    try:
        timing = ev.read_timing_csv(res / "timing.csv")
    except (ev.EvaluationError, ValueError, KeyError) as exc:
        raise RunFailure(f"timing.csv: {exc}") from None
    write_svg(res / "trajectories.svg", trajectory_svg(gt, est))
    write_svg(res / "timing.svg", timing_svg(timing))
    print(f"wrote {res / 'trajectories.svg'} and {res / 'timing.svg'}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "plot": cmd_plot,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help, 2 for usage errors
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RunFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
