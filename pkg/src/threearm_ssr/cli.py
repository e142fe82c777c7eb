"""Command-line interface: ``threearm-ssr <command> [options]``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional

from . import __version__
from .config import ConfigError, RunConfig, build_scenarios, load_config, point_spec
from .design import AllocationRatio, DesignSpec, GroupSizes, power, required_sample_size
from .errors import DomainError, InfiniteSampleSizeError, UndefinedFactorError
from .estimators import Method, estimate, read_trial_data
from .presets import PRESETS, SMOKE_REPS, preset
from .reestimate import ReestimationPolicy, reestimate_sample_size, reference_zeta, zeta_scan
from .simulate import ScenarioConfig, SimulationReport, simulate

SIM_COLUMNS = (
    "scenario_id", "method", "mu_P", "alloc", "n1", "zeta", "reps", "seed", "power_global", "mc_err",
    "t1e_target", "n_final_median", "n_final_q1", "n_final_q3",
)
SIZE_COLUMNS = (
    "mu_P", "mu_E", "mu_R", "delta_ER", "delta_EP", "delta_RP", "sigma", "alloc", "alpha", "target_power",
    "n", "n_E", "n_R", "n_P", "power",
)
ZETA_COLUMNS = ("mu_P", "alloc", "n1", "m", "sigma", "zeta")
_DESIGN_FLAGS = ("mu_P", "mu_E", "mu_R", "delta_ER", "delta_EP", "delta_RP", "sigma", "alloc", "alpha", "target_power")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: Optional[str]
    out: Optional[str]
    seed: int
    workers: int
    scenarios: List[str] = field(default_factory=list)


def _num(x: float) -> str:
    return repr(float(x))


def _design_from_args(args, required: bool = True) -> Optional[DesignSpec]:
    given = {k: getattr(args, k) for k in _DESIGN_FLAGS if getattr(args, k) is not None}
    if "mu_P" not in given:
        if required:
            raise UsageError("the following argument is required: --mu-P")
        return None
    return DesignSpec(**given)


def _add_design_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("design")
    g.add_argument("--mu-P", dest="mu_P", type=float, help="placebo mean under the planning alternative")
    g.add_argument("--mu-E", dest="mu_E", type=float)
    g.add_argument("--mu-R", dest="mu_R", type=float)
    g.add_argument("--delta-ER", dest="delta_ER", type=float, help="non-inferiority margin (default 0.3)")
    g.add_argument("--delta-EP", dest="delta_EP", type=float)
    g.add_argument("--delta-RP", dest="delta_RP", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--alloc", type=AllocationRatio.parse, help="allocation E:R:P, e.g. 3:2:1")
    g.add_argument("--alpha", type=float)
    g.add_argument("--target-power", dest="target_power", type=float)


def _write_rows(rows, columns, args, filename: str):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / filename).write_text(buf.getvalue(), encoding="utf-8")
    if args.json:
        print(json.dumps(rows, indent=2))
    elif not args.out:
        sys.stdout.write(buf.getvalue())


def _write_manifest(args, manifest: RunManifest):
    if args.out:
        path = Path(args.out) / "manifest.json"
        path.write_text(json.dumps(asdict(manifest), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_power(args) -> int:
    spec = _design_from_args(args)
    if args.sizes:
        try:
            sizes = GroupSizes(*(float(v) for v in args.sizes.split(",")))
        except TypeError:
            raise UsageError("--sizes needs three comma-separated group sizes") from None
    elif args.n is not None:
        sizes = GroupSizes(*spec.alloc.apportion(args.n))
    else:
        raise UsageError("one of --n or --sizes is required")
    p = power(spec, sizes)
    inputs = asdict(spec)
    inputs["alloc"] = str(spec.alloc)
    record = {"inputs": inputs, "sizes": list(sizes.as_tuple()), "n": sizes.total, "power": round(p, 6)}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "power.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
    if args.json:
        print(json.dumps(record, indent=2))
    else:
        echo = " ".join(f"{k}={v}" for k, v in record["inputs"].items())
        print(echo)
        print("sizes=" + ",".join(f"{v:g}" for v in sizes.as_tuple()) + f" n={sizes.total:g}")
        print(f"power={p:.6f}")
    return 0


def _size_row(spec: DesignSpec) -> dict:
    n, sizes = required_sample_size(spec)
    row = {k: getattr(spec, k) for k in SIZE_COLUMNS[:10]}
    row["alloc"] = str(spec.alloc)
    row.update(n=n, n_E=int(sizes.n_E), n_R=int(sizes.n_R), n_P=int(sizes.n_P), power=f"{power(spec, sizes):.6f}")
    return row


def _design_points(cfg: RunConfig) -> List[DesignSpec]:
    specs = []
    for point in cfg.points():
        spec = point_spec(point)
        if spec not in specs:
            specs.append(spec)
    return specs


def cmd_samplesize(args) -> int:
    if args.config:
        specs = _design_points(load_config(args.config))
    else:
        specs = [_design_from_args(args)]
    rows = [_size_row(s) for s in specs]
    _write_rows(rows, SIZE_COLUMNS, args, "samplesize.csv")
    return 0


def cmd_zeta(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        jobs = []
        for point in cfg.points():
            spec = point_spec(point)
            m = point.get("m") or spec.alloc.block_size
            jobs.append((spec, int(point["n1"]), m))
    else:
        spec = _design_from_args(args)
        if args.n1 is None:
            raise UsageError("the following argument is required: --n1")
        jobs = [(spec, args.n1, args.m or spec.alloc.block_size)]
    sigmas = [float(v) for v in args.sigmas.split(",")] if args.sigmas else None
    rows = []
    for spec, n1, m in jobs:
        policy = ReestimationPolicy(Method.XG, n1, m)
        if sigmas:
            pairs = zeta_scan(spec, policy, sigmas)
        else:
            try:
                z, s = reference_zeta(spec, policy)
            except DomainError:
                z, s = float("nan"), float("nan")
            pairs = [(s, z)]
        for s, z in pairs:
            rows.append({"mu_P": spec.mu_P, "alloc": str(spec.alloc), "n1": n1, "m": m, "sigma": s, "zeta": z})
    _write_rows(rows, ZETA_COLUMNS, args, "zeta.csv")
    return 0


def cmd_estimate(args) -> int:
    data = read_trial_data(args.file)
    spec = _design_from_args(args, required=False)
    method = Method(args.method)
    kwargs = {}
    if method is Method.OSU:
        if spec is None:
            raise UsageError("the OSU estimator needs the planning alternative (--mu-P and friends)")
        kwargs = {"means": spec.means, "pilot_alloc": [v / data.n1 for v in spec.alloc.apportion(data.n1)]}
    est = estimate(data if method is Method.POOLED else data.blinded(), method, **kwargs)
    record = {"method": method.value, "n1": data.n1, "estimate": est.value}
    if spec is not None:
        record["n_reest"] = reestimate_sample_size(spec, est)
    if args.json:
        print(json.dumps(record, indent=2))
    else:
        print(" ".join(f"{k}={v}" for k, v in record.items()))
    return 0


def _sim_row(sc: ScenarioConfig, rep: SimulationReport) -> dict:
    return {
        "scenario_id": sc.scenario_id,
        "method": sc.policy.method.value,
        "mu_P": _num(sc.spec.mu_P),
        "alloc": str(sc.spec.alloc),
        "n1": sc.policy.n1,
        "zeta": _num(sc.policy.zeta),
        "reps": rep.reps,
        "seed": rep.seed,
        "power_global": f"{rep.power:.6f}",
        "mc_err": f"{rep.mc_err:.6f}",
        "t1e_target": "" if rep.target is None else f"{rep.t1e:.6f}",
        "n_final_median": f"{rep.n_final_median:g}",
        "n_final_q1": f"{rep.n_final_q1:g}",
        "n_final_q3": f"{rep.n_final_q3:g}",
    }


def _run_simulations(args, cfg: RunConfig, command: str, filename: str) -> int:
    reps = args.reps if args.reps is not None else (SMOKE_REPS if args.smoke else None)
    scenarios = build_scenarios(cfg, reps=reps, seed=args.seed)
    workers = max(1, args.workers)
    manifest = RunManifest(command, args.config, args.out, cfg.seed if args.seed is None else args.seed, workers)
    manifest.scenarios = [sc.scenario_id for sc in scenarios]
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 and scenarios else nullcontext()
    rows = []
    with pool as executor:
        for sc in scenarios:
            rows.append(_sim_row(sc, simulate(sc, workers, executor)))
            if args.verbose:
                print(f"done {sc.scenario_id}", file=sys.stderr)
    _write_rows(rows, SIM_COLUMNS, args, filename)
    _write_manifest(args, manifest)
    return 0


def cmd_simulate(args) -> int:
    if not args.config:
        raise UsageError("simulate needs --config")
    return _run_simulations(args, load_config(args.config), "simulate", "simulate.csv")


def cmd_reproduce(args) -> int:
    cfg = preset(args.name)
    if args.name == "table4":
        rows = [_size_row(s) for s in _design_points(cfg)]
        _write_rows(rows, SIZE_COLUMNS, args, "table4.csv")
        return 0
    return _run_simulations(args, cfg, f"reproduce {args.name}", f"{args.name}.csv")


# ---------------------------------------------------------------- parser


def _u64(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI scenario file")
    common.add_argument("--out", metavar="DIR", help="directory for result files")
    common.add_argument("--seed", type=_u64, metavar="U64", help="master seed (overrides the config)")
    common.add_argument("--workers", type=_positive, default=1, metavar="N", help="worker processes")
    common.add_argument("--reps", type=_positive, metavar="N", help="Monte Carlo replications per scenario")
    common.add_argument("--json", action="store_true", help="print machine-readable JSON")
    common.add_argument("--smoke", action="store_true", help=f"quick run with {SMOKE_REPS} replications")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="threearm-ssr",
        description="Planning, blinded sample size re-estimation and simulation for three-arm non-inferiority trials.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("power", parents=[common], help="power of a fixed design")
    _add_design_flags(p)
    p.add_argument("--n", type=int, help="total sample size, split by the allocation")
    p.add_argument("--sizes", help="explicit group sizes nE,nR,nP")
    p.set_defaults(func=cmd_power)

    p = sub.add_parser("samplesize", parents=[common], help="fixed-design sample size")
    _add_design_flags(p)
    p.set_defaults(func=cmd_samplesize)

    p = sub.add_parser("zeta", parents=[common], help="inflation factor for the Xing-Ganju procedure")
    _add_design_flags(p)
    p.add_argument("--n1", type=int, help="pilot size")
    p.add_argument("--m", type=int, help="block size (default: smallest whole block of the allocation)")
    p.add_argument("--sigmas", help="comma-separated sigma grid to scan instead of the reference factor")
    p.set_defaults(func=cmd_zeta)

    p = sub.add_parser("estimate", parents=[common], help="variance estimate from a data file")
    _add_design_flags(p)
    p.add_argument("file", help="data file: outcome [label [block]] per line")
    p.add_argument("--method", required=True, type=str.upper, choices=[m.value for m in Method if m is not Method.FIXED])
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", parents=[common], help="simulate the scenarios of a config file")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("reproduce", parents=[common], help="run a preset scenario grid")
    p.add_argument("name", choices=PRESETS)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, InfiniteSampleSizeError, UndefinedFactorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
