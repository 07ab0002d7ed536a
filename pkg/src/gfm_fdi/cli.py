"""Command-line front end.

Subcommands follow the design flow: ``constants`` -> ``synthesize`` ->
``simulate`` (threshold, residuals, report), with ``reproduce`` chaining
all of it for the four fault kinds.  Human summaries go to stdout, machine
artifacts to ``--out``.  Every JSON artifact embeds the run manifest and
its hash; CSV traces carry the hash in a leading ``#`` comment.

The manifest hash covers the command, the option values and the content
hashes of the input files, not their paths or the output directory, so
identical inputs give identical artifacts wherever they are written.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io
from .detection import DivergenceError
from .faults import FaultKind
from .lmi import (
    METHODS, SOLVER_ENV, LmiInfeasible, ObserverDesign, SolverNumericalFailure,
    SynthesisError, default_solver, synthesize,
)
from .microgrid import (
    DETECTION_PRESETS, SettleError, four_inverter_scenario, operating_region,
    run_experiment, settle,
)
from .model import GfmParameters, build_inverter_model, gfm12_parameters
from .sector import OperatingRegion, SectorConstants, estimate_sector_constants, published_constants, validate_constants

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_INFEASIBLE = 4
EXIT_NUMERICAL = 5
EXIT_DIVERGENCE = 6

PROG = "gfm-fdi"


class UsageError(ValueError):
    pass


def _version() -> str:
    try:
        return metadata.version("gfm-fdi")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# --------------------------------------------------------------------------
# manifest

def _manifest(command: str, args: argparse.Namespace, inputs: dict[str, str | None]) -> dict:
    options = {k: v for k, v in sorted(vars(args).items())
               if k not in ("func", "out", "command") and not k.startswith("_")}
    files = {role: {"path": str(p), "sha256": io.file_hash(p)}
             for role, p in sorted(inputs.items()) if p is not None}
    return {
        "schema": 1,
        "tool": PROG,
        "version": _version(),
        "command": command,
        "options": options,
        "inputs": files,
        "solver": os.environ.get(SOLVER_ENV, "") or "default",
        "out": str(getattr(args, "out", "")),
    }


def _manifest_key(manifest: dict) -> dict:
    """The part of the manifest that determines the results."""
    keep = dict(manifest)
    keep.pop("out", None)
    keep["inputs"] = {r: f["sha256"] for r, f in manifest["inputs"].items()}
    keep["options"] = {k: v for k, v in manifest["options"].items()
                       if k not in ("model", "constants", "region", "scenario", "design")}
    return keep


def _write_artifact(path: Path, payload: dict, manifest: dict) -> Path:
    data = dict(payload)
    data["manifest"] = manifest
    data["manifest_hash"] = io.content_hash(_manifest_key(manifest))
    return io.write_json(path, data)


# --------------------------------------------------------------------------
# input helpers

def _need_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    return p


def _load_params(path) -> GfmParameters:
    return gfm12_parameters() if path is None else io.load_model_params(_need_file(path))


def _constants_file(spec):
    return None if spec in (None, "published") else spec


def _load_constants(spec) -> SectorConstants:
    path = _constants_file(spec)
    if path is None:
        return published_constants()
    data = io.read_json(_need_file(path))
    return SectorConstants.from_dict(data.get("constants", data))


def _solver():
    return default_solver()


def _region_for(params: GfmParameters) -> OperatingRegion:
    scn = four_inverter_scenario()
    idx = [g for g, p in enumerate(scn.gfms) if p == params]
    if not idx:
        scn = scn.replace(gfms=(params,) * scn.n_gfm)
        idx = [0, 1]
    return operating_region(settle(scn), idx)


def _positive(name):
    def parse(text):
        try:
            value = float(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{name} must be a number") from None
        if not value > 0:
            raise argparse.ArgumentTypeError(f"{name} must be positive")
        return value
    return parse


# --------------------------------------------------------------------------
# subcommands

def cmd_constants(args) -> int:
    if args.n < 2:
        raise UsageError("n_samples must be at least 2")
    params = _load_params(args.model)
    model = build_inverter_model(params)
    if args.region:
        region = OperatingRegion.from_dict(io.read_json(_need_file(args.region)))
    else:
        region = _region_for(params)
    t0 = time.perf_counter()
    constants = estimate_sector_constants(model, region, args.n, args.seed)
    holdout = validate_constants(constants, model, region, args.n, args.seed + 1)
    seconds = time.perf_counter() - t0
    manifest = _manifest("constants", args, {"model": args.model, "region": args.region})
    out = Path(args.out)
    payload = {"constants": constants.to_dict(),
               "holdout": {"pairs": holdout.n_pairs, "violations": holdout.violations,
                           "passed": holdout.passed}}
    path = _write_artifact(out / "constants.json" if out.suffix != ".json" else out, payload, manifest)
    c = constants
    print(f"gamma={c.gamma:.6g} rho={c.rho:.6g} delta={c.delta:.6g} phi={c.phi:.6g} "
          f"holdout_violations={holdout.violations} ({seconds:.1f} s)")
    print(f"wrote {path}")
    return EXIT_OK if holdout.passed else EXIT_VALIDATION


def _design_payload(design: ObserverDesign) -> dict:
    d = design.to_dict()
    d.pop("solve_seconds", None)   # keeps the file identical across reruns
    return {"design": d, "verified": bool(design.verified)}


def cmd_synthesize(args) -> int:
    params = _load_params(args.model)
    constants = _load_constants(args.constants)
    kind = FaultKind(args.fault)
    design = synthesize(build_inverter_model(params), kind, args.method, constants,
                        args.alpha, args.beta, _solver())
    manifest = _manifest("synthesize", args, {"model": args.model,
                                              "constants": _constants_file(args.constants)})
    out = Path(args.out)
    path = _write_artifact(out / f"design_{kind.value}_{args.method}.json" if out.suffix != ".json" else out,
                           _design_payload(design), manifest)
    eig = np.linalg.eigvals(build_inverter_model(params).A - design.L @ build_inverter_model(params).C)
    print(f"{args.method} {kind.value}: margins max={max(design.lmi_margins):.4g} "
          f"max Re eig(A-LC)={eig.real.max():.4g} verified={design.verified} "
          f"({design.solve_seconds:.2f} s)")
    print(f"wrote {path}")
    return EXIT_OK


def _synthesize_for(scn, kind, constants, alpha, beta, method="olqb") -> dict[int, ObserverDesign]:
    """One design per distinct parameter set, shared by inverters using it."""
    cache: list[tuple[GfmParameters, ObserverDesign]] = []
    designs = {}
    for g, p in enumerate(scn.gfms):
        for q, d in cache:
            if q == p:
                designs[g] = d
                break
        else:
            d = synthesize(build_inverter_model(p), kind, method, constants, alpha, beta, _solver())
            cache.append((p, d))
            designs[g] = d
    return designs


def _fault_active(scn, g) -> np.ndarray:
    t = np.arange(scn.n_steps) * scn.dt
    active = np.zeros(t.size, bool)
    for ev in scn.faults:
        if ev.gfm == g:
            active |= (t >= ev.start - 1e-12) & (t < ev.end - 1e-12)
    return active


def _write_traces(out: Path, scn, settings, result, manifest) -> list[Path]:
    paths = []
    key = io.content_hash(_manifest_key(manifest))
    for g, th in result.thresholds.items():
        trace = result.residual_trace(g)
        if settings.lowpass_hz:
            trace = trace.lowpass(settings.lowpass_hz)
        path = io.write_residual_csv(out / f"residuals_gfm{g + 1}.csv", trace, th.J_th,
                                     _fault_active(scn, g), comment=f"manifest_hash={key}")
        paths.append(path)
    return paths


def _experiment_payload(scn, settings, result) -> dict:
    return {
        "scenario": io.scenario_to_mapping(scn, settings),
        "thresholds": {str(g + 1): th.J_th for g, th in result.thresholds.items()},
        "reports": {str(g + 1): rep.to_dict() for g, rep in result.reports.items()},
    }


def _ms(value) -> str:
    return "-" if value is None else f"{value * 1e3:.2f}ms"


def _summary_lines(result) -> list[str]:
    lines = []
    for g, rep in result.reports.items():
        events = " ".join(
            f"{e.window.label}:"
            + (f"t_o={_ms(e.t_o)} t_c={_ms(e.t_c)}" if e.detected else "missed")
            for e in rep.events) or "no scheduled faults"
        lines.append(f"GFM{g + 1} J_th={result.thresholds[g].J_th:.6g} "
                     f"false_alarms={rep.false_alarms} {events}")
    return lines


def _scenario_from_args(args):
    if args.scenario:
        scn, settings = io.load_scenario(_need_file(args.scenario))
    else:
        kind = FaultKind(args.fault)
        scn = four_inverter_scenario(kind)
        settings = DETECTION_PRESETS[kind].settings
    if args.seed is not None:
        scn = scn.replace(noise=type(scn.noise)(scn.noise.sigma_w, scn.noise.sigma_v, args.seed))
    return scn, settings


def cmd_simulate(args) -> int:
    scn, settings = _scenario_from_args(args)
    kinds = {ev.kind for ev in scn.faults}
    inputs = {"scenario": args.scenario}
    if args.design:
        designs = {}
        for item in args.design:
            try:
                idx, path = item.split("=", 1)
                g = int(idx) - 1
            except ValueError:
                raise UsageError(f"--design expects N=PATH, got {item!r}") from None
            if not 0 <= g < scn.n_gfm:
                raise UsageError(f"--design names inverter {g + 1}; the scenario has {scn.n_gfm}")
            designs[g] = ObserverDesign.from_dict(io.read_json(_need_file(path))["design"])
            inputs[f"design{g + 1}"] = path
    else:
        if len(kinds) > 1:
            raise UsageError("scenario mixes fault kinds; pass one --design per inverter")
        kind = next(iter(kinds), FaultKind(args.fault))
        designs = _synthesize_for(scn, kind, _load_constants(args.constants), args.alpha, args.beta)
        inputs["constants"] = _constants_file(args.constants)
    manifest = _manifest("simulate", args, inputs)
    t0 = time.perf_counter()
    result = run_experiment(scn, designs, **settings.as_kwargs())
    seconds = time.perf_counter() - t0
    out = Path(args.out)
    _write_traces(out, scn, settings, result, manifest)
    path = _write_artifact(out / "report.json", _experiment_payload(scn, settings, result), manifest)
    for line in _summary_lines(result):
        print(line)
    print(f"simulated {scn.duration:g} s (+ calibration) in {seconds:.1f} s; wrote {path}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    constants = _load_constants(args.constants)
    out = Path(args.out)
    manifest = _manifest("reproduce", args, {"constants": _constants_file(args.constants)})
    base = four_inverter_scenario()
    steady = settle(base)
    rows = []
    for kind in FaultKind:
        preset = DETECTION_PRESETS[kind]
        noise = preset.noise if args.seed is None else type(preset.noise)(
            preset.noise.sigma_w, preset.noise.sigma_v, args.seed)
        scn = four_inverter_scenario(kind, noise=noise)
        designs = _synthesize_for(scn, kind, constants, args.alpha, args.beta)
        result = run_experiment(scn, designs, steady=steady, **preset.settings.as_kwargs())
        sub = out / kind.value
        if args.traces:
            _write_traces(sub, scn, preset.settings, result, manifest)
        _write_artifact(sub / "report.json", _experiment_payload(scn, preset.settings, result), manifest)
        for g, rep in result.reports.items():
            for e in rep.events:
                rows.append({"fault": kind.value, "gfm": g + 1, "detected": e.detected,
                             "t_o_ms": None if e.t_o is None else e.t_o * 1e3,
                             "t_c_ms": None if e.t_c is None else e.t_c * 1e3,
                             "false_alarms": rep.false_alarms,
                             "J_th": result.thresholds[g].J_th})
    _write_artifact(out / "summary.json", {"rows": rows}, manifest)
    print(f"{'fault':<15}{'GFM':>4}{'t_o [ms]':>11}{'t_c [ms]':>11}{'false':>7}{'J_th':>12}")
    for r in rows:
        to = "missed" if r["t_o_ms"] is None else f"{r['t_o_ms']:.2f}"
        tc = "-" if r["t_c_ms"] is None else f"{r['t_c_ms']:.2f}"
        print(f"{r['fault']:<15}{r['gfm']:>4}{to:>11}{tc:>11}{r['false_alarms']:>7}{r['J_th']:>12.5g}")
    print(f"wrote {out / 'summary.json'}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog=PROG,
        description="Observer-based fault detection for grid-forming inverters in a droop microgrid.",
        epilog=f"Solver choice: set {SOLVER_ENV} (CLARABEL, SCS or CVXOPT).",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {_version()}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=True):
        if model:
            p.add_argument("--model", metavar="FILE", help="inverter parameters (TOML or JSON)")
        p.add_argument("--out", required=True, metavar="PATH")

    def design_opts(p):
        p.add_argument("--constants", metavar="FILE|published", default=None,
                       help="constants JSON (as written by 'constants'); omitted or 'published' "
                            "uses the reference set for inverters 1 and 2")
        p.add_argument("--alpha", type=_positive("alpha"), default=1e5)
        p.add_argument("--beta", type=_positive("beta"), default=1e5)

    kinds = [k.value for k in FaultKind]

    p = sub.add_parser("constants", help="estimate and certify the sector constants")
    common(p)
    p.add_argument("--region", metavar="FILE", help="operating region JSON (default: box around the settled grid)")
    p.add_argument("--n", type=int, default=100_000, help="number of sampled pairs")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_constants)

    p = sub.add_parser("synthesize", help="solve the matrix inequalities for an observer gain")
    common(p)
    design_opts(p)
    p.add_argument("--fault", choices=kinds, required=True)
    p.add_argument("--method", choices=METHODS, default="olqb")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("simulate", help="calibrate thresholds, run a scenario and report detections")
    common(p, model=False)
    design_opts(p)
    p.add_argument("--scenario", metavar="FILE", help="scenario TOML (default: four-fault test grid)")
    p.add_argument("--fault", choices=kinds, default="busbar",
                   help="fault kind of the built-in scenario / of synthesized designs")
    p.add_argument("--design", action="append", metavar="N=FILE",
                   help="design file for inverter N (repeatable); synthesized when omitted")
    p.add_argument("--seed", type=int, default=None, help="override the scenario noise seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reproduce", help="full pipeline for all four fault kinds with a timing table")
    common(p, model=False)
    design_opts(p)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--traces", action="store_true", help="also write residual CSVs")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO
    except LmiInfeasible as exc:
        print(f"error[infeasible]: {exc} (status {exc.status})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except SolverNumericalFailure as exc:
        print(f"error[numerical]: {exc} (status {exc.status})", file=sys.stderr)
        return EXIT_NUMERICAL
    except SynthesisError as exc:
        print(f"error[numerical]: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DivergenceError, SettleError) as exc:
        print(f"error[divergence]: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (UsageError, io.ScenarioFormatError, ValueError, KeyError) as exc:
        print(f"error[validation]: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
