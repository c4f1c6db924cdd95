#!/usr/bin/env python3
"""
Range Mixing Lab CLI - Unified Command Line Interface
Sampling, mixing times, isoperimetry, renormalization and interlacement checks
for the range of a random walk on the discrete torus
"""

import sys
import json
import time
from pathlib import Path

# Add scripts to path
sys.path.insert(0, str(Path(__file__).parent / "scripts"))

import argparse
from chain_analysis import (EXACT_CAP, build_chain, confinement_lower_bound, spectral_gap, uniform_mixing_time_exact,
                            uniform_mixing_time_mc)
from config import ExperimentConfig, load_config, load_records
from experiments import ExperimentRunner
from interlacements import box_capacity, check_levels, sandwich_diagnostic
from isoperimetry import (ENUMERATION_CAP, ConductanceProfile, check_iso_inequality, morris_peres_bound,
                          profile_balls, profile_exhaustive, profile_sweep)
from lattice import Box, OccupancyGrid, TorusConfig
from logger import RunActivityLog
from renormalization import (DensityParams, RenormWindow, ScaleConstraintError, WindowTooSmallError, build_ladder,
                             check_assumptions, classify_level0, enlarged_cluster, propagate_badness,
                             select_window)
from report import write_report
from walk_sampler import RngSeed, green_at_origin, sample_range


def print_banner():
    """Print application banner"""
    print("\n" + "="*70)
    print("  🎲  RANGE MIXING LAB - Random Walk Range Experiments")
    print("="*70 + "\n")


def log_command(command, status, details, start_time, experiment_id=""):
    RunActivityLog().log_action(
        component=f"CLI {command}",
        experiment_id=experiment_id,
        action=f"{command} {'completed' if status == 'Success' else 'failed'}",
        status=status,
        details=details,
        duration=round(time.time() - start_time, 2)
    )


def save_json(data, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(data, f, indent=2, default=str)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e}") from e
    print(f"📄 JSON saved: {path}")


def load_grid(args):
    grid = OccupancyGrid.load(args.grid, u=getattr(args, 'u', None) or 1.0)
    print(f"📂 Loaded {args.grid}: d={grid.d}, N={grid.side}, |R|={grid.popcount}")
    return grid


def cmd_sample(args):
    """Sample the range of a walk and write it as a grid file"""
    print_banner()
    print(f"🎲 SAMPLING RANGE: d={args.d}, N={args.N}, u={args.u}")
    print("-" * 70 + "\n")
    start_time = time.time()

    try:
        cfg = TorusConfig(d=args.d, N=args.N, u=args.u)
        trials = getattr(args, 'trials', 1) or 1
        out_dir = getattr(args, 'out_dir', None)
        if out_dir is None and trials > 1:
            raise ValueError("--trials above 1 needs --out-dir")
        print(f"   Steps: {cfg.walk_length:,}")

        paths = []
        for stream in range(args.stream, args.stream + trials):
            trial_start = time.time()
            grid, _ = sample_range(cfg, RngSeed(args.seed, stream))
            path = Path(out_dir) / f"range_d{cfg.d}_N{cfg.N}_s{stream}.rmg" if out_dir else Path(args.out)
            grid.save(path)
            # sidecar next to each grid
            save_json({"d": cfg.d, "N": cfg.N, "u": cfg.u, "seed": args.seed, "stream": stream,
                       "popcount": grid.popcount,
                       "wall_time_ms": round(1000 * (time.time() - trial_start), 1)},
                      path.with_suffix('.json'))
            print(f"   Visited cells: {grid.popcount:,} of {grid.size:,} ({grid.popcount / grid.size:.3f})")
            paths.append(path)

        print(f"\n✅ Grids saved: {len(paths)}")
        log_command("sample", "Success", f"{len(paths)} grid(s), last |R|={grid.popcount} -> {paths[-1]}",
                    start_time)
        return True

    except Exception as e:
        print(f"❌ Error: {e}")
        log_command("sample", "Error", str(e), start_time)
        return False


def cmd_mix(args):
    """Uniform mixing time of the lazy walk on a stored range"""
    print_banner()
    print(f"⏱️  MIXING TIME: {args.grid} ({args.method})")
    print("-" * 70 + "\n")
    start_time = time.time()

    try:
        grid = load_grid(args)
        chain, _ = build_chain(grid)
        if args.method == "exact":
            estimate = uniform_mixing_time_exact(chain, cap=args.cap)
        else:
            estimate = uniform_mixing_time_mc(chain, trials=args.trials, seed=RngSeed(args.seed))
        # the Monte-Carlo path carries no spectrum
        lambda2 = estimate.lambda2 if estimate.lambda2 is not None else 1.0 - spectral_gap(chain)
        wall_ms = round(1000 * (time.time() - start_time), 1)

        report = {
            "method": estimate.method, "t_mix": estimate.value, "errbar": estimate.errbar,
            "V": chain.n_vertices, "E": chain.n_edges, "lambda2": lambda2,
            "wall_time_ms": wall_ms,
        }
        if estimate.ci:
            report["ci"] = list(estimate.ci)
        print(f"   V={chain.n_vertices}, E={chain.n_edges}")
        print(f"   t_mix = {estimate.value}" + (f" ± {estimate.errbar:.1f}" if estimate.errbar else ""))

        if args.eps:
            witness = confinement_lower_bound(chain, args.eps, args.radii)
            report["lower_bound"] = witness.to_dict()
            print(f"   Confinement lower bound: t_mix >= {witness.t_lower}")

        if args.out:
            save_json(report, args.out)
        log_command("mix", "Success", f"t_mix={estimate.value} ({estimate.method})", start_time)
        return True

    except Exception as e:
        print(f"❌ Error: {e}")
        log_command("mix", "Error", str(e), start_time)
        return False


def cmd_isop(args):
    """Conductance profiles, gamma_hat and the integral mixing bound"""
    print_banner()
    print(f"📐 ISOPERIMETRY: {args.grid}")
    print("-" * 70 + "\n")
    start_time = time.time()

    try:
        grid = load_grid(args)
        builders = {
            "exhaustive": lambda: profile_exhaustive(grid, rmax=args.rmax),
            "sweep": lambda: profile_sweep(grid),
            "ball": lambda: profile_balls(grid),
        }
        families = [f.strip() for f in args.families.split(",") if f.strip()]
        unknown = [f for f in families if f not in builders]
        if unknown:
            print(f"❌ Unknown families: {', '.join(unknown)}")
            return False

        profiles = []
        for name in families:
            profiles.append(builders[name]())
            print(f"   {name:10s}: {len(profiles[-1].breakpoints())} breakpoints")

        mu = args.mu if args.mu is not None else 1 - 1 / (4 * grid.d)
        iso = check_iso_inequality(grid, profiles, mu, complements=not args.no_complements)
        envelope = ConductanceProfile.merge(profiles)
        bound = morris_peres_bound(envelope, grid.config, constant=args.mp_constant)
        print(f"\n📊 gamma_hat = {iso.gamma_hat:.4f} at |A| = {iso.size} (|dA| = {iso.boundary}, {iso.method})")
        print(f"   Integral bound: t_mix <= {bound.value} (C = {bound.constant})")

        report = {
            "d": grid.d, "N": grid.side, "V": grid.popcount, "mu": mu,
            "profiles": [p.to_dict() for p in profiles],
            "iso": iso.to_dict(),
            "morris_peres": {"bound": bound.value, "integral": bound.integral,
                             "constant": bound.constant, "upper": bound.upper},
        }
        if args.out:
            save_json(report, args.out)
        log_command("isop", "Success", f"gamma_hat={iso.gamma_hat:.4f}", start_time)
        return True

    except Exception as e:
        print(f"❌ Error: {e}")
        log_command("isop", "Error", str(e), start_time)
        return False


def cmd_renorm(args):
    """Good/bad classification, assumption checks and the enlarged cluster"""
    print_banner()
    print(f"🧱 RENORMALIZATION: {args.grid}")
    print("-" * 70 + "\n")
    start_time = time.time()

    try:
        grid = load_grid(args)
        ladder = build_ladder(args.lam, args.L0, args.levels)
        if args.g00:
            g00, g00_se = args.g00, 0.0
        else:
            green = green_at_origin(grid.d, seed=RngSeed(args.seed))
            g00, g00_se = green.value, green.stderr
            print(f"   g(0,0) = {g00:.4f} ± {g00_se:.4f}")
        params = DensityParams.for_level(args.u, args.epsilon, g00, g00_se)
        print(f"   eta1 = {params.eta1:.4f}, eta2 = {params.eta2:.4f}")

        levels = propagate_badness(classify_level0(grid, ladder, params), ladder, args.levels)
        L_s = ladder.scale(args.levels)
        K = args.K or max(1, (6 * grid.side) // (7 * L_s) - 4)
        anchor = tuple(args.anchor) if args.anchor else (2 * L_s + args.L0,) * grid.d
        window = RenormWindow.shallow(ladder, K, anchor, s=args.levels)
        assumptions = check_assumptions(grid, window, ladder, params)
        cluster = enlarged_cluster(grid, window, assumptions)

        for level in levels.levels:
            print(f"   level {level.n}: L={level.L}, bad (a) {len(level.bad_indices('a'))}, "
                  f"bad (b) {len(level.bad_indices('b'))}")
        status = "✅" if assumptions.all_hold else "⚠️ "
        print(f"\n{status} Assumptions (a) {assumptions.a_holds}, (b) {assumptions.b_holds}, (c) {assumptions.c_holds}")
        print(f"   Enlarged cluster: {cluster.size} cells, connected: {cluster.connected}")

        # full-scale window, only defined on very large tori
        try:
            full_window = select_window(grid.config, ladder).to_dict()
        except (WindowTooSmallError, ScaleConstraintError) as e:
            full_window = {"error": str(e)}
            print(f"   Full-scale window: {e}")

        report = {
            "ladder": ladder.to_dict(), "params": params.model_dump(), "window": window.to_dict(),
            "full_window": full_window, "levels": levels.to_dict(), "assumptions": assumptions.to_dict(),
            "enlarged_cluster": cluster.to_dict(),
        }
        if args.out:
            save_json(report, args.out)
        log_command("renorm", "Success", f"assumptions hold: {assumptions.all_hold}", start_time)
        return True

    except Exception as e:
        print(f"❌ Error: {e}")
        log_command("renorm", "Error", str(e), start_time)
        return False


def cmd_interlace(args):
    """Capacity, density and coupling checks for interlacements on a box"""
    print_banner()
    print(f"🧵 INTERLACEMENTS: d={args.d}, u={args.u}, box side {args.box_side}")
    print("-" * 70 + "\n")
    start_time = time.time()

    try:
        box = Box((0,) * args.d, args.box_side)
        capacity = box_capacity(args.d, args.box_side, root=args.seed)
        print(f"   cap = {capacity.cap:.3f} ± {capacity.stderr:.3f}")
        green = green_at_origin(args.d, seed=RngSeed(args.seed))
        check = check_levels(box, args.u, green.value, green.stderr, samples=args.trials,
                             seed=RngSeed(args.seed, 1), capacity=capacity)
        for row in check.table():
            mark = "✅" if row["passed"] else "⚠️ "
            print(f"   {mark} {row['check']}: {row['value']:.4f} (target {row['target']:.4f})")

        report = {"capacity": capacity.to_dict(), "green": green.to_dict(), "levels": check.to_dict()}
        if args.N:
            cfg = TorusConfig(d=args.d, N=args.N, u=args.u)
            sandwich = sandwich_diagnostic(cfg, args.u, args.epsilon, box, trials=args.sandwich_trials,
                                           seed=RngSeed(args.seed, 2), capacity=capacity, verbose=True)
            report["sandwich"] = sandwich.to_dict()

        if args.out:
            save_json(report, args.out)
        log_command("interlace", "Success", f"density {check.density:.4f} vs eta {check.eta:.4f}", start_time)
        return True

    except Exception as e:
        print(f"❌ Error: {e}")
        log_command("interlace", "Error", str(e), start_time)
        return False


def experiment_config(args, kind):
    """Config file (if any) with command-line values laid over it"""
    data = load_config(args.config).model_dump() if args.config else {"kind": kind}
    data["kind"] = kind
    overrides = {
        "d": args.d, "N": args.N, "u": args.u, "u_values": args.u_values, "trials": args.trials,
        "seed": args.seed, "workers": args.workers, "output_dir": args.out_dir,
        "exact_cap": args.cap, "mc_trials": args.mc_trials,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(data)


def run_experiment(args, kind, title):
    print_banner()
    print(title)
    print("-" * 70 + "\n")
    start_time = time.time()
    try:
        cfg = experiment_config(args, kind)
    except Exception as e:
        print(f"❌ Invalid configuration: {e}")
        log_command(kind, "Error", str(e), start_time)
        return False
    result = ExperimentRunner().run(cfg, config_path=args.config or "")
    return result['success']


def cmd_scaling(args):
    """Mixing-time scaling study over range samples"""
    return run_experiment(args, "scaling", "📈 SCALING STUDY")


def cmd_isostudy(args):
    """Isoperimetric profile study over range samples"""
    return run_experiment(args, "iso", "📐 ISOPERIMETRY STUDY")


def cmd_density(args):
    """Occupation density of the range against the interlacement density"""
    return run_experiment(args, "density", "🎯 DENSITY STUDY")


def cmd_control(args):
    """Exact mixing times of the full torus"""
    return run_experiment(args, "torus_control", "🧊 FULL-TORUS CONTROL")


def cmd_report(args):
    """Merge record files into CSV, JSON, plot-data and Excel reports"""
    print_banner()
    print("📊 GENERATING REPORT")
    print("-" * 70 + "\n")
    start_time = time.time()

    try:
        records = []
        for path in args.records:
            loaded = load_records(path)
            print(f"   {path}: {len(loaded)} records")
            records.extend(loaded)
        files = write_report(records, args.out, allow_mixed_versions=args.allow_mixed_versions)
        for name, path in files.items():
            print(f"   {name}: {path}")
        print(f"\n✅ Report written to {args.out}")
        log_command("report", "Success", f"{len(records)} records -> {args.out}", start_time)
        return True

    except Exception as e:
        print(f"❌ Error: {e}")
        log_command("report", "Error", str(e), start_time)
        return False


def add_experiment_arguments(parser):
    parser.add_argument('-c', '--config', help='Experiment config JSON')
    parser.add_argument('--d', type=int, help='Dimension')
    parser.add_argument('--N', type=int, nargs='+', help='Side lengths')
    parser.add_argument('--u', type=float, help='Walk-time density')
    parser.add_argument('--u-values', type=float, nargs='+', help='Several densities (density study)')
    parser.add_argument('--trials', type=int, help='Trials per side length')
    parser.add_argument('--seed', type=int, help='Root seed (overrides the config)')
    parser.add_argument('--workers', type=int, help='Worker processes (capped by RANGEMIX_THREADS)')
    parser.add_argument('--cap', type=int, help='Largest |R| for the exact mixing time')
    parser.add_argument('--mc-trials', type=int, help='Walkers for the Monte-Carlo mixing time')
    parser.add_argument('-o', '--out-dir', help='Output directory')


def main():
    """Main CLI entry point"""
    parser = argparse.ArgumentParser(
        description="Range Mixing Lab - random walk range experiments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  rangemix sample --d 3 --N 16 --u 1 --seed 7 --out r.rmg     Sample a range
  rangemix mix --grid r.rmg --method exact --out mix.json      Exact mixing time
  rangemix isop --grid r.rmg --families exhaustive,sweep,ball  Conductance profiles
  rangemix renorm --grid r.rmg --lambda 1 --L0 4 --levels 0 --u 1 --epsilon 0.2
  rangemix interlace --d 3 --u 1 --box-side 3 --trials 10000   Interlacement checks
  rangemix scaling --N 6 8 10 12 --trials 20 --seed 1          Scaling study
  rangemix report Output/E001/records.jsonl --out Reports      Build report
        """
    )

    subparsers = parser.add_subparsers(dest='command', help='Commands')

    # Sample
    sample_parser = subparsers.add_parser('sample', help='Sample a range and save it as a grid file')
    sample_parser.add_argument('--d', type=int, default=3, help='Dimension')
    sample_parser.add_argument('--N', type=int, required=True, help='Torus side length')
    sample_parser.add_argument('--u', type=float, default=1.0, help='Walk runs floor(u N^d) steps')
    sample_parser.add_argument('--seed', type=int, default=0, help='Root seed')
    sample_parser.add_argument('--stream', type=int, default=0, help='Trial stream')
    sample_parser.add_argument('--trials', type=int, default=1, help='Consecutive streams to sample')
    sample_target = sample_parser.add_mutually_exclusive_group(required=True)
    sample_target.add_argument('-o', '--out', help='Grid file (single trial)')
    sample_target.add_argument('--out-dir', help='Directory for one grid per trial')

    # Mix
    mix_parser = subparsers.add_parser('mix', help='Uniform mixing time')
    mix_parser.add_argument('--grid', required=True, help='Grid file')
    mix_parser.add_argument('--method', choices=['exact', 'mc'], default='exact')
    mix_parser.add_argument('--cap', type=int, default=EXACT_CAP, help='Vertex cap for the exact method')
    mix_parser.add_argument('--trials', type=int, default=4000, help='Monte-Carlo walkers')
    mix_parser.add_argument('--seed', type=int, default=0, help='Root seed')
    mix_parser.add_argument('--eps', type=float, help='Also run the confinement lower bound with this epsilon')
    mix_parser.add_argument('--radii', type=int, nargs='+', default=[1, 2, 3], help='Ball radii for the lower bound')
    mix_parser.add_argument('-o', '--out', help='Report JSON')

    # Isoperimetry
    isop_parser = subparsers.add_parser('isop', help='Conductance profiles and gamma_hat')
    isop_parser.add_argument('--grid', required=True, help='Grid file')
    isop_parser.add_argument('--families', default='exhaustive,sweep,ball', help='Candidate families')
    isop_parser.add_argument('--rmax', type=int, default=ENUMERATION_CAP, help='Largest enumerated size')
    isop_parser.add_argument('--mu', type=float, help='Size fraction (default 1 - 1/(4d))')
    isop_parser.add_argument('--mp-constant', type=float, default=1.0, help='Constant of the integral bound')
    isop_parser.add_argument('--no-complements', action='store_true', help='Do not score complements')
    isop_parser.add_argument('-o', '--out', help='Report JSON')

    # Renormalization
    renorm_parser = subparsers.add_parser('renorm', help='Good/bad classification and assumptions')
    renorm_parser.add_argument('--grid', required=True, help='Grid file')
    renorm_parser.add_argument('--lambda', dest='lam', type=int, default=1, help='Ladder parameter')
    renorm_parser.add_argument('--L0', type=int, required=True, help='Base box side')
    renorm_parser.add_argument('--levels', type=int, default=0, help='Top level s')
    renorm_parser.add_argument('--u', type=float, default=1.0, help='Walk-time density')
    renorm_parser.add_argument('--epsilon', type=float, default=0.2, help='Density slack')
    renorm_parser.add_argument('--g00', type=float, help='g(0,0); estimated when omitted')
    renorm_parser.add_argument('--K', type=int, help='Core multiplicity')
    renorm_parser.add_argument('--anchor', type=int, nargs='+', help='Core box anchor')
    renorm_parser.add_argument('--seed', type=int, default=0, help='Root seed')
    renorm_parser.add_argument('-o', '--out', help='Report JSON')

    # Interlacements
    inter_parser = subparsers.add_parser('interlace', help='Interlacement sampler checks')
    inter_parser.add_argument('--d', type=int, default=3, help='Dimension')
    inter_parser.add_argument('--u', type=float, default=1.0, help='Level')
    inter_parser.add_argument('--box-side', type=int, default=3, help='Box side')
    inter_parser.add_argument('--trials', type=int, default=10_000, help='Box samples')
    inter_parser.add_argument('--seed', type=int, default=0, help='Root seed')
    inter_parser.add_argument('--N', type=int, help='Also run the sandwich check on this torus')
    inter_parser.add_argument('--epsilon', type=float, default=0.2, help='Sandwich slack')
    inter_parser.add_argument('--sandwich-trials', type=int, default=500, help='Sandwich trials')
    inter_parser.add_argument('-o', '--out', help='Report JSON')

    # Experiments
    add_experiment_arguments(subparsers.add_parser('scaling', help='Mixing-time scaling study'))
    add_experiment_arguments(subparsers.add_parser('isostudy', help='Isoperimetry study'))
    add_experiment_arguments(subparsers.add_parser('density', help='Range density study'))
    add_experiment_arguments(subparsers.add_parser('control', help='Full-torus control'))

    # Report
    report_parser = subparsers.add_parser('report', help='Build reports from record files')
    report_parser.add_argument('records', nargs='*', help='Record files (.jsonl or .json)')
    report_parser.add_argument('-o', '--out', default='Reports', help='Report directory')
    report_parser.add_argument('--allow-mixed-versions', action='store_true',
                               help='Merge records from different code versions')

    args = parser.parse_args()

    if not args.command:
        parser.print_help()
        sys.exit(0)

    # Route to command handlers
    commands = {
        'sample': cmd_sample,
        'mix': cmd_mix,
        'isop': cmd_isop,
        'renorm': cmd_renorm,
        'interlace': cmd_interlace,
        'scaling': cmd_scaling,
        'isostudy': cmd_isostudy,
        'density': cmd_density,
        'control': cmd_control,
        'report': cmd_report
    }

    handler = commands.get(args.command)
    if handler:
        success = handler(args)
        sys.exit(0 if success else 1)
    else:
        parser.print_help()
        sys.exit(1)


if __name__ == "__main__":
    main()
