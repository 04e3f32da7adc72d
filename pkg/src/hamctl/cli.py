"""Command line front door: ``hamctl <command> --config cfg.json --out DIR``.

Every command writes ``report.json`` (config echo, checks with tolerance,
measured value and verdict) plus plot data as CSV. Reports are
deterministic for fixed configs and seeds. Exit codes: 0 all checks pass,
2 input error, 3 precondition or verdict failure, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from .compiler import compile_permutation, verify_compiled
from .density import (QuadratureSpec, density_from_config, lr_distance_report,
                      pushforward, signature, signature_gap)
from .ensemble import EnsembleState, lie_rank_check, steer
from .errors import HamctlError, InputError, NotEquivalentError, NumericError, PreconditionError
from .flows import (FlowMap, HorizontalShear, VerticalShear, drift, integrate, low_discrepancy_box, phase_box,
                    symplectic_defect, trajectory_csv)
from .geometry import MeshPermutation, SpaceSpec, sup_distance
from .poisson import HamExpr
from .rearrange import DEMO_CONFIG, RearrangeConfig, _mesh_box, build_permutation, demo_pair
from .synthesis import (QuadraticFlow, bracket_schedule, drift_result, exact_horizontal, exact_vertical,
                        ladder, lie_product, oscillator_stage, potential_kick, reverse_drift_euclidean)
from .systems import (ControlSchedule, MechanicalSystem, SymbolicPotential, euclidean_preset,
                      frozen_hamiltonian)

EXIT_OK, EXIT_INPUT, EXIT_VERDICT, EXIT_NUMERIC = 0, 2, 3, 4
DEFAULT_SEED = 0


class Report:
    """Accumulates checks and artifacts for one command run."""

    def __init__(self, command: str, config: dict, seed: int):
        self.command = command
        self.data: Dict[str, object] = {"command": command, "config": config, "seed": seed}
        self.checks: List[dict] = []
        self.files: Dict[str, str] = {}

    def check(self, name: str, value: float, tol: float, kind: str = "max"):
        """kind "max": pass iff value <= tol; "min": pass iff value >= tol."""
        value = float(value)
        ok = value <= tol if kind == "max" else value >= tol
        self.checks.append({"name": name, "value": value, "tol": float(tol), "kind": kind,
                            "pass": bool(ok and math.isfinite(value))})
        return ok

    def add_file(self, name: str, text: str):
        self.files[name] = text

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks)

    def to_dict(self) -> dict:
        out = dict(self.data)
        out["checks"] = self.checks
        out["passed"] = self.passed
        out["files"] = sorted(self.files)
        return out


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _tol(args, cfg: dict, key: str, default: float) -> float:
    tol = args.tol if getattr(args, "tol", None) is not None else cfg.get(key, default)
    tol = float(tol)
    if not tol > 0:
        raise InputError(f"tolerance {key} must be positive")
    return tol


def _relative(base: Optional[Path], path: str) -> Path:
    p = Path(path)
    return p if p.is_absolute() or base is None else base / p


def _rows_csv(header: List[str], rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(float(v)) if not isinstance(v, str) else v for v in row))
    return "\n".join(lines) + "\n"


# -- simulate ----------------------------------------------------------------------------


def _load_schedule(spec, base) -> ControlSchedule:
    if spec is None:
        return ControlSchedule()
    if isinstance(spec, str):
        try:
            text = _relative(base, spec).read_text()
        except OSError as exc:
            raise InputError(f"cannot read schedule {spec!r}: {exc}") from None
        return ControlSchedule.from_csv(text)
    if isinstance(spec, list):
        try:
            return ControlSchedule(tuple((float(t), tuple(u)) for t, u in spec))
        except (TypeError, ValueError) as exc:
            raise InputError(f"bad inline schedule: {exc}") from None
    raise InputError("schedule must be a CSV path or a list of [tau, [u...]]")


def cmd_simulate(cfg: dict, args, report: Report, base=None):
    system = MechanicalSystem.from_dict(cfg.get("system", {"space": {"kind": "euclidean", "d": 1},
                                                            "preset": "euclidean"}))
    schedule = _load_schedule(cfg.get("schedule"), base)
    if not schedule.segments:
        schedule = ControlSchedule.constant(float(cfg.get("horizon", 1.0)), [0.0] * system.m)
    dt = float(cfg.get("dt", 1e-3))
    if "x0" in cfg:
        x0 = np.atleast_2d(np.asarray(cfg["x0"], dtype=float))
    else:
        rng = np.random.default_rng(args.seed)
        lo, hi = phase_box(system.space)
        x0 = lo + (hi - lo) * rng.random((int(cfg.get("points", 8)), system.space.dim))
    res = integrate(system, schedule, x0, dt, jacobian=True, trajectory=True)
    det = np.abs(np.linalg.det(res.jacobian) - 1.0)
    sym = symplectic_defect(res.jacobian)
    # each segment is autonomous, so its frozen energy is conserved up to the splitting error
    energy = 0.0
    X = x0.copy()
    for tau, u in schedule.segments:
        H = frozen_hamiltonian(system, u)
        seg = integrate(system, ControlSchedule(((tau, u),)), X, dt)
        energy = max(energy, float(np.max(np.abs(H.value(seg.x) - H.value(X)))))
        X = seg.x
    tol = _tol(args, cfg, "tol", 1e-6)
    report.check("jacobian_det", np.max(det), tol)
    report.check("symplectic_defect", np.max(sym), tol)
    report.check("energy_drift", energy, float(cfg.get("energy_tol", 1e-4)))
    report.data["final"] = np.asarray(res.x).tolist()
    report.data["horizon"] = schedule.total_duration
    report.add_file("trajectory.csv", trajectory_csv(res.times, res.trajectory, system.d))
    return {"trajectory.csv": ("t", None)}


# -- rearrange / compile-perm ----------------------------------------------------------


def _pair(cfg: dict):
    if cfg.get("demo", "rho0" not in cfg):
        r = float(cfg.get("r", 1.0))
        rho0, rho1 = demo_pair(r)
        return rho0, rho1, dict(DEMO_CONFIG)
    try:
        rho0 = density_from_config(cfg["rho0"])
        rho1 = density_from_config(cfg["rho1"])
    except KeyError as exc:
        raise InputError(f"config needs both densities, missing {exc}") from None
    return rho0, rho1, {}


def _rearrange_config(cfg: dict, defaults: dict) -> RearrangeConfig:
    data = dict(defaults)
    data.update(cfg.get("rearrange", {}))
    data.setdefault("h", cfg.get("h", 0.25))
    return RearrangeConfig.from_dict(data)


def _mc_quad(cfg: dict, seed: int) -> QuadratureSpec:
    return QuadratureSpec(mode="monte_carlo", samples=int(cfg.get("samples", 200_000)), seed=seed)


def cmd_rearrange(cfg: dict, args, report: Report, base=None):
    rho0, rho1, defaults = _pair(cfg)
    conf = _rearrange_config(cfg, defaults)
    try:
        res = build_permutation(rho0, rho1, conf)
    except NotEquivalentError as exc:
        report.data["verdict"] = "not-equivalent"
        report.data["diagnostic"] = str(exc)
        report.check("signature_equivalence", 1.0, 0.5)
        return {}
    report.data["verdict"] = "equivalent"
    report.data["rearrange"] = res.report()
    report.check("lr_error", res.lr_error, _tol(args, cfg, "tol", conf.tol))
    report.add_file("permutation.json", res.permutation.to_json(res.mesh) + "\n")
    rows = [(lv["k"], lv["xi"], lv["band_volume0"], lv["band_volume1"], lv["cover_volume"])
            for lv in res.per_level]
    report.add_file("levels.csv", _rows_csv(["k", "xi", "band_volume0", "band_volume1", "cover_volume"], rows))
    return {"levels.csv": ("xi", ["band_volume0", "band_volume1"])}


def cmd_compile(cfg: dict, args, report: Report, base=None):
    pipeline = None
    if "permutation" in cfg:
        spec = cfg["permutation"]
        if isinstance(spec, str):
            try:
                spec = json.loads(_relative(base, spec).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise InputError(f"cannot read permutation: {exc}") from None
        perm, mesh = MeshPermutation.from_dict(spec)
        keep = cfg.get("keep", [])
    else:
        rho0, rho1, defaults = _pair(cfg)
        res = build_permutation(rho0, rho1, _rearrange_config(cfg, defaults))
        perm, mesh, keep = res.permutation, res.mesh, res.keep
        pipeline = (rho0, rho1, res)
    seq = compile_permutation(perm, mesh, cfg.get("eta"), keep, cfg.get("mode"))
    fid = verify_compiled(seq, perm, mesh, cubes=set(perm.support) | set(keep))
    report.data["counts"] = seq.counts()
    report.data["stages"] = len(seq)
    report.data["synthetic_time"] = seq.synthetic_time
    report.data["fidelity"] = fid
    tol = _tol(args, cfg, "tol", 1e-9)
    report.check("center_error", fid["center_error"], tol)
    report.check("corner_error", fid["corner_error"], tol)
    if pipeline is not None:
        rho0, rho1, res = pipeline
        moved = pushforward(rho0, seq, *_mesh_box(res.mesh, rho0, rho1))
        rep = lr_distance_report(moved, rho1, res.config.r, _mc_quad(cfg, args.seed))
        report.data["end_to_end"] = {"lr_error": rep.value, "error_estimate": rep.error,
                                     "permutation_lr_error": res.lr_error}
        report.check("end_to_end_lr_error", rep.value, float(cfg.get("epsilon", 0.15)))
    report.add_file("primitive_seq.json", seq.to_json() + "\n")
    rows = [(i, st.get("role", "")) for i, st in enumerate(seq.annotations)]
    report.add_file("stages.csv", "\n".join(["i,role"] + [f"{i},{r}" for i, r in rows]) + "\n")
    return {}


# -- synth ------------------------------------------------------------------------------


def _exprs(cfg, space):
    return {k: HamExpr.parse(v, space.d) for k, v in cfg.items() if k in ("f", "g") and isinstance(v, str)}


def _synth_experiment(cfg: dict, args):
    """(ladder dict, per-rung check spec, finest result) for a named experiment."""
    kind = cfg.get("experiment", "bracket")
    d = int(cfg.get("d", 1))
    space = SpaceSpec("euclidean", d)
    lo, hi = phase_box(space, float(cfg.get("radius", 1.0)), float(cfg.get("radius", 1.0)))
    n = int(cfg.get("points", 128))
    if kind == "kick":
        system = euclidean_preset(d)
        j, s = int(cfg.get("j", 1)), float(cfg.get("s", 1.0))
        target = VerticalShear(space, system.controls[j - 1], s)
        params = cfg.get("sigmas", [1e-2, 5e-3, 2.5e-3])
        lad = ladder(lambda sg: potential_kick(system, j, s, sg), params, lambda _: target, lo, hi, n)
        return lad, "ratio", potential_kick(system, j, s, params[-1])
    if kind == "lie_product":
        f = HamExpr.parse(cfg.get("f", "q1^2/2"), d)
        if f.depends_on_p():
            raise InputError("lie_product experiment needs f = f(q)")
        system = euclidean_preset(d)
        fr, gr = exact_vertical(space, f), drift_result(system, 1.0, float(cfg.get("dt", 1e-3)))
        target = QuadraticFlow(space, f + HamExpr.kinetic(d))
        params = cfg.get("ns", [4, 8, 16, 32])
        lad = ladder(lambda k: lie_product(fr, gr, int(k)), params, lambda _: target, lo, hi, n)
        return lad, "ratio", lie_product(fr, gr, int(params[-1]))
    if kind == "bracket":
        e = _exprs({"f": "q1^2/2", "g": "p1^2/2", **cfg}, space)
        if e["f"].depends_on_p() or e["g"].depends_on_q():
            raise InputError("bracket experiment needs f = f(q) and g = g(p)")
        fr, gr = exact_vertical(space, e["f"]), exact_horizontal(space, e["g"])
        params = cfg.get("taus", [0.2, 0.1, 0.05, 0.025])
        first = bracket_schedule(fr, gr, params[0])
        target = QuadraticFlow(space, first.predicted)
        lad = ladder(lambda t: bracket_schedule(fr, gr, t), params, lambda _: target, lo, hi, n)
        return lad, "ratio", bracket_schedule(fr, gr, params[-1])
    if kind == "dilation":
        rows = []
        for tau in cfg.get("taus", [1.0, 0.25, 0.01]):
            for v in cfg.get("vs", [0.5, 1.0]):
                res = reverse_drift_euclidean(space, v, tau)
                X = low_discrepancy_box(lo, hi, n)
                err = float(np.max(sup_distance(res(X), drift(space, v)(X), space)))
                rows.append({"param": [tau, v], "error": err, "total_time": res.total_time})
        return {"rungs": rows, "ratios": []}, "absolute", None
    if kind == "reverse_drift":
        w = float(cfg.get("w", -0.5))
        realize = cfg.get("realize", "exact")
        res = reverse_drift_euclidean(space, w, realize=realize, dt=float(cfg.get("dt", 1e-4)))
        X = low_discrepancy_box(lo, hi, n)
        err = float(np.max(sup_distance(res(X), drift(space, w)(X), space)))
        osc = oscillator_stage(space, 2 * np.pi, realize, float(cfg.get("dt", 1e-4)))
        per = float(np.max(sup_distance(osc(X), X, space)))
        rows = [{"param": "backward_drift", "error": err, "total_time": res.total_time},
                {"param": "oscillator_period", "error": per, "total_time": 2 * np.pi}]
        return {"rungs": rows, "ratios": []}, "absolute", res
    raise InputError(f"unknown synth experiment {kind!r}")


def cmd_synth(cfg: dict, args, report: Report, base=None):
    lad, mode, finest = _synth_experiment(cfg, args)
    report.data["experiment"] = cfg.get("experiment", "bracket")
    report.data["ladder"] = lad
    if mode == "ratio":
        tol = _tol(args, cfg, "ratio_tol", 0.6)
        for i, r in enumerate(lad["ratios"]):
            report.check(f"ratio_{i + 1}", r, tol)
    else:
        tol = _tol(args, cfg, "tol", 1e-8)
        for row in lad["rungs"]:
            report.check(f"error_{row['param']}", row["error"], tol)
    rows = [(str(r["param"]).replace(",", ";"), r["error"], r["total_time"]) for r in lad["rungs"]]
    report.add_file("ladder.csv", "\n".join(["param,error,total_time"] +
                                            [f"{p},{e!r},{t!r}" for p, e, t in rows]) + "\n")
    if finest is not None:
        report.data["finest"] = finest.report()
        sched = finest.schedule
        if sched.segments:
            report.add_file("schedule.csv", sched.to_csv())
    return {"ladder.csv": ("param", ["error"])}


# -- steer ------------------------------------------------------------------------------


def cmd_steer(cfg: dict, args, report: Report, base=None):
    space = SpaceSpec.from_dict(cfg.get("space", {"kind": "torus", "d": 1}))
    rng = np.random.default_rng(args.seed)
    N = int(cfg.get("N", 3))

    def ensemble(key):
        if key in cfg:
            return EnsembleState(space, np.asarray(cfg[key], dtype=float))
        lo, hi = phase_box(space, 2.0, 2.0)
        return EnsembleState(space, lo + (hi - lo) * rng.random((N, space.dim)))

    start, target = ensemble("start"), ensemble("target")
    tau = float(cfg.get("tau", 0.05))
    plan = steer(start, target, tau, cfg.get("delta_max"))
    errs = plan.errors()
    tol = _tol(args, cfg, "tol", 1e-12)
    report.data["start"] = start.points.tolist()
    report.data["target"] = target.points.tolist()
    report.data["plan"] = {"tau": plan.tau, "delta": plan.delta, "delta_target": plan.delta_target,
                           "total_time": plan.total_time, "p_hat": plan.p_hat.tolist()}
    report.check("endpoint_error", float(np.max(errs)), tol)
    report.check("total_time", plan.total_time, float(cfg.get("time_budget", 0.1)))
    system = MechanicalSystem(space, SymbolicPotential(HamExpr.zero(space.d)), ())
    if "system" in cfg:
        system = MechanicalSystem.from_dict(cfg["system"])
    rank = lie_rank_check(system, EnsembleState(space, plan.flow.stages[0](start.points))
                          if plan.delta > 0 else start)
    report.data["lie_rank"] = {k: rank[k] for k in ("rank", "expected", "full_rank", "sigma_min")}
    report.check("lie_rank_sigma_min", rank["sigma_min"], float(cfg.get("sigma_min", 1e-3)), kind="min")
    report.add_file("plan.json", plan.to_json() + "\n")
    report.add_file("endpoints.csv", plan.table_csv())
    return {"endpoints.csv": ("i", ["error"])}


# -- verify-orbit -----------------------------------------------------------------------


def _flow_from_config(spec, space: SpaceSpec) -> FlowMap:
    if isinstance(spec, dict) and "stages" in spec:
        data = dict(spec)
        data.setdefault("space", space.to_dict())
        return FlowMap.from_dict(data)
    if isinstance(spec, dict) and "shear" in spec:
        f = HamExpr.parse(spec["shear"], space.d)
        s = float(spec.get("s", 1.0))
        if f.depends_on_p():
            return FlowMap(space, [HorizontalShear(space, f, s)])
        return FlowMap(space, [VerticalShear(space, SymbolicPotential(f), s)])
    if isinstance(spec, dict) and "drift" in spec:
        return FlowMap(space, [drift(space, float(spec["drift"]))])
    raise InputError("flow must be a FlowMap record, {shear: expr} or {drift: tau}")


def cmd_verify_orbit(cfg: dict, args, report: Report, base=None):
    if "rho0" not in cfg:
        raise InputError("verify-orbit needs rho0")
    rho0 = density_from_config(cfg["rho0"])
    if "rho1" in cfg:
        rho1 = density_from_config(cfg["rho1"])
    elif "flow" in cfg:
        flow = _flow_from_config(cfg["flow"], rho0.space)
        margin = float(cfg.get("margin", 1.0))
        rho1 = pushforward(rho0, flow, rho0.lo - margin, rho0.hi + margin)
    else:
        raise InputError("verify-orbit needs rho1 or a flow")
    levels = cfg.get("levels")
    if levels is None:
        raise InputError("verify-orbit needs a level grid")
    quad = QuadratureSpec(**cfg.get("quad", {"resolution": 256, "levels": 3}))
    lo = np.minimum(rho0.lo, rho1.lo)
    hi = np.maximum(rho0.hi, rho1.hi)
    s0 = signature(rho0, levels, quad, lo, hi)
    s1 = signature(rho1, levels, quad, lo, hi)
    gap = signature_gap(s0, s1)
    cells = float(cfg.get("tol_cells", 2.0))
    tol = args.tol if args.tol is not None else cells * s0.cell_volume
    ok = report.check("signature_gap", gap, tol)
    report.data["verdict"] = "match" if ok else "mismatch"
    report.data["signatures"] = [s0.to_dict(), s1.to_dict()]
    rows = [(lv, b0, b1) for lv, b0, b1 in zip(s0.levels, s0.bands, s1.bands)]
    report.add_file("signature.csv", _rows_csv(["level", "band0", "band1"], rows))
    return {"signature.csv": ("level", ["band0", "band1"])}


COMMANDS: Dict[str, Callable] = {
    "simulate": cmd_simulate,
    "rearrange": cmd_rearrange,
    "compile-perm": cmd_compile,
    "synth": cmd_synth,
    "steer": cmd_steer,
    "verify-orbit": cmd_verify_orbit,
}


def _render_plots(out: Path, report: Report, plots: dict):
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        raise InputError("--plot needs matplotlib (pip install 'artifact[plot]')") from None
    for name, (xcol, ycols) in plots.items():
        rows = list(csv.DictReader(io.StringIO(report.files[name])))
        if not rows:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        cols = ycols or [c for c in rows[0] if c != xcol][:2]
        xs = list(range(len(rows))) if xcol == "param" else [float(r[xcol]) for r in rows]
        for c in cols:
            ax.plot(xs, [float(r[c]) for r in rows], marker="o", label=c)
        if xcol == "param":
            ax.set_xticks(xs, [r["param"] for r in rows], rotation=30)
            ax.set_yscale("log")
        ax.set_xlabel(xcol)
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / (Path(name).stem + ".png"), dpi=120)
        plt.close(fig)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamctl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config (defaults run a built-in example)")
        p.add_argument("--out", type=Path, default=Path("hamctl_out"), help="output directory")
        p.add_argument("--seed", type=int, default=DEFAULT_SEED)
        p.add_argument("--tol", type=float, default=None, help="override the main tolerance")
        p.add_argument("--plot", action="store_true", help="also render PNGs of the plot data (matplotlib)")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg, base = {}, None
    report = Report(args.command, {}, args.seed)
    code = EXIT_OK
    try:
        if args.tol is not None and not args.tol > 0:
            raise InputError("--tol must be positive")
        if args.config is not None:
            try:
                cfg = json.loads(args.config.read_text())
            except OSError as exc:
                raise InputError(f"cannot read config: {exc}") from None
            except json.JSONDecodeError as exc:
                raise InputError(f"config is not valid JSON: {exc}") from None
            if not isinstance(cfg, dict):
                raise InputError("config must be a JSON object")
            base = args.config.parent
        report.data["config"] = cfg
        plots = COMMANDS[args.command](cfg, args, report, base) or {}
        if not report.passed:
            code = EXIT_VERDICT
    except InputError as exc:
        code, plots = EXIT_INPUT, {}
        report.data["error"] = {"type": type(exc).__name__, "message": str(exc)}
    except PreconditionError as exc:
        code, plots = EXIT_VERDICT, {}
        report.data["error"] = {"type": type(exc).__name__, "message": str(exc)}
    except (NumericError, FloatingPointError) as exc:
        code, plots = EXIT_NUMERIC, {}
        report.data["error"] = {"type": type(exc).__name__, "message": str(exc)}
    except HamctlError as exc:
        code, plots = EXIT_NUMERIC, {}
        report.data["error"] = {"type": type(exc).__name__, "message": str(exc)}
    report.data["exit_code"] = code
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    for name, text in report.files.items():
        (out / name).write_text(text)
    if args.plot and code in (EXIT_OK, EXIT_VERDICT):
        try:
            _render_plots(out, report, plots)
        except InputError as exc:
            report.data["plot_error"] = str(exc)
    (out / "report.json").write_text(dumps(report.to_dict()))
    for c in report.checks:
        print(f"{'PASS' if c['pass'] else 'FAIL'} {c['name']}: {c['value']:.6g} "
              f"({'<=' if c['kind'] == 'max' else '>='} {c['tol']:.3g})")
    if "error" in report.data:
        print(f"error: {report.data['error']['message']}", file=sys.stderr)
    return code


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
