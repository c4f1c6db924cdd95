"""
Experiment Runner
Seeded, parallel trial campaigns over range instances: mixing-time scaling,
isoperimetric profiles, occupation density and the full-torus control
"""

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from tqdm import tqdm

from chain_analysis import build_chain, uniform_mixing_time_exact, uniform_mixing_time_mc
from config import CODE_VERSION, ExperimentConfig, ExperimentRecord, save_config, worker_count
from interlacements import eta
from isoperimetry import (ConductanceProfile, calibrate_mp_constant, check_iso_inequality,
                          profile_balls, profile_exhaustive, profile_sweep)
from lattice import OccupancyGrid, TorusConfig
from logger import ExperimentRegistry, RunActivityLog
from report import write_report
from walk_sampler import RngSeed, green_at_origin, sample_range


BOOTSTRAP_RESAMPLES = 1000
# Stream reserved for the g(0,0) estimate of a density experiment
GREEN_STREAM = 1 << 32


def measure_mixing(grid: OccupancyGrid, seed: RngSeed, exact_cap: int, mc_trials: int):
    """Exact spectral t_mix when |R| <= exact_cap, the Monte-Carlo estimate otherwise"""
    chain, _ = build_chain(grid)
    if chain.n_vertices <= exact_cap:
        return chain, uniform_mixing_time_exact(chain, cap=exact_cap)
    return chain, uniform_mixing_time_mc(chain, trials=mc_trials, seed=seed)


def scaling_trial(task: Tuple) -> ExperimentRecord:
    d, N, u, root, stream, exact_cap, mc_trials = task
    started = time.perf_counter()
    seed = RngSeed(root, stream)
    grid, _ = sample_range(TorusConfig(d=d, N=N, u=u), seed)
    chain, estimate = measure_mixing(grid, seed, exact_cap, mc_trials)
    return ExperimentRecord(
        kind="scaling", d=d, N=N, u=u, seed=root, stream=stream,
        V=chain.n_vertices, E=chain.n_edges, t_mix=estimate.value, method=estimate.method,
        errbar=estimate.errbar, wall_ms=round(1000 * (time.perf_counter() - started), 3),
    )


def iso_trial(task: Tuple) -> ExperimentRecord:
    d, N, u, root, stream, rmax, mu, mp_constant, exact_cap, mc_trials = task
    started = time.perf_counter()
    seed = RngSeed(root, stream)
    cfg = TorusConfig(d=d, N=N, u=u)
    grid, _ = sample_range(cfg, seed)
    families = [profile_exhaustive(grid, rmax=rmax), profile_sweep(grid), profile_balls(grid)]
    iso = check_iso_inequality(grid, families, mu)
    envelope = ConductanceProfile.merge(families)
    integral = envelope.mp_integral(32 * d * cfg.volume)
    chain, estimate = measure_mixing(grid, seed, exact_cap, mc_trials)
    return ExperimentRecord(
        kind="iso", d=d, N=N, u=u, seed=root, stream=stream,
        V=chain.n_vertices, E=chain.n_edges, t_mix=estimate.value, method=estimate.method,
        errbar=estimate.errbar, gamma_hat=iso.gamma_hat,
        mp_bound=int(math.ceil(mp_constant * integral)) if mp_constant else None,
        wall_ms=round(1000 * (time.perf_counter() - started), 3),
        profile={"mp_integral": integral, "size": iso.size, "boundary": iso.boundary,
                 "family": iso.method, "from_complement": iso.from_complement,
                 "breakpoints": envelope.breakpoints()[:64]},
    )


def density_trial(task: Tuple) -> ExperimentRecord:
    d, N, u, root, stream = task
    started = time.perf_counter()
    grid, _ = sample_range(TorusConfig(d=d, N=N, u=u), RngSeed(root, stream))
    return ExperimentRecord(
        kind="density", d=d, N=N, u=u, seed=root, stream=stream, V=grid.popcount,
        density=grid.popcount / grid.size, wall_ms=round(1000 * (time.perf_counter() - started), 3),
    )


def torus_trial(task: Tuple) -> ExperimentRecord:
    d, N, exact_cap = task
    started = time.perf_counter()
    cfg = TorusConfig(d=d, N=N)
    chain, _ = build_chain(OccupancyGrid.full(cfg))
    estimate = uniform_mixing_time_exact(chain, cap=exact_cap)
    return ExperimentRecord(
        kind="torus_control", d=d, N=N, u=cfg.u, seed=0, V=chain.n_vertices, E=chain.n_edges,
        t_mix=estimate.value, method=estimate.method,
        wall_ms=round(1000 * (time.perf_counter() - started), 3),
    )


@dataclass
class LogLogFit:
    """Least-squares slope of log(median) against log(N) with a bootstrap interval"""

    sides: List[int]
    medians: List[float]
    slope: float
    intercept: float
    ci: Tuple[float, float]
    counts: List[int]
    spread: List[Tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "points": [{"N": N, "median": m, "trials": c, "q25": lo, "q75": hi}
                       for N, m, c, (lo, hi) in zip(self.sides, self.medians, self.counts, self.spread)],
            "slope": self.slope, "intercept": self.intercept, "ci": list(self.ci),
        }


class ScalingFit(LogLogFit):
    """Mixing-time scaling: medians of t_mix per N and the fitted exponent"""

    def covers(self, exponent: float = 2.0) -> bool:
        return self.ci[0] <= exponent <= self.ci[1]


def _group(values_by_side: Dict[int, Sequence[float]]) -> Tuple[List[int], List[np.ndarray]]:
    sides = sorted(N for N, v in values_by_side.items() if len(v))
    if len(sides) < 2:
        raise ValueError(f"a log-log fit needs at least 2 side lengths with data, got {len(sides)}")
    return sides, [np.asarray(values_by_side[N], dtype=np.float64) for N in sides]


def fit_loglog(values_by_side: Dict[int, Sequence[float]], confidence: float = 0.95,
               resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0, cls=LogLogFit) -> LogLogFit:
    """
    Slope of log median against log N; trials are resampled within each N for the interval.

    Values must be positive. With one trial per N the interval collapses to the slope.
    """
    sides, groups = _group(values_by_side)
    if any((g <= 0).any() for g in groups):
        raise ValueError("log-log fit needs positive values")
    x = np.log(sides)
    medians = np.array([np.median(g) for g in groups])
    fit = stats.linregress(x, np.log(medians))

    rng = np.random.Generator(np.random.PCG64(seed))
    slopes = np.empty(resamples)
    for b in range(resamples):
        boot = [np.median(g[rng.integers(0, len(g), len(g))]) for g in groups]
        slopes[b] = stats.linregress(x, np.log(boot)).slope
    alpha = (1 - confidence) / 2
    ci = (float(np.quantile(slopes, alpha)), float(np.quantile(slopes, 1 - alpha)))
    return cls(
        sides=sides, medians=[float(m) for m in medians], slope=float(fit.slope),
        intercept=float(fit.intercept), ci=ci, counts=[len(g) for g in groups],
        spread=[(float(np.quantile(g, 0.25)), float(np.quantile(g, 0.75))) for g in groups],
    )


def fit_scaling(records: Sequence[ExperimentRecord], confidence: float = 0.95,
                resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> ScalingFit:
    by_side: Dict[int, List[float]] = {}
    for r in records:
        if r.t_mix is not None:
            by_side.setdefault(r.N, []).append(r.t_mix)
    return fit_loglog(by_side, confidence, resamples, seed, cls=ScalingFit)


def iso_trend(records: Sequence[ExperimentRecord], confidence: float = 0.95,
              resamples: int = BOOTSTRAP_RESAMPLES, seed: int = 0) -> dict:
    """Minimum and median gamma_hat per N; log-log trend of the medians when there are 2+ sides"""
    by_side: Dict[int, List[float]] = {}
    for r in records:
        if r.gamma_hat is not None:
            by_side.setdefault(r.N, []).append(r.gamma_hat)
    sides = sorted(by_side)
    summary = {
        "min_gamma": {N: min(by_side[N]) for N in sides},
        "median_gamma": {N: float(np.median(by_side[N])) for N in sides},
        "all_positive": all(g > 0 for v in by_side.values() for g in v),
        "collapse_ratio": None, "trend": None,
    }
    if len(sides) >= 2:
        summary["collapse_ratio"] = min(by_side[sides[-1]]) / min(by_side[sides[0]])
        if summary["all_positive"]:
            summary["trend"] = fit_loglog(by_side, confidence, resamples, seed).to_dict()
    return summary


def mp_soundness(records: Sequence[ExperimentRecord], held_out: int = 0) -> Optional[dict]:
    """Calibrate C on one instance, then count instances where C * integral >= t_mix"""
    usable = [r for r in records if r.t_mix is not None and r.profile and r.profile.get("mp_integral")]
    if len(usable) < 2:
        return None
    anchor = usable[held_out]
    constant = calibrate_mp_constant([anchor.profile["mp_integral"]], [anchor.t_mix])
    rest = [r for i, r in enumerate(usable) if i != held_out]
    sound = [constant * r.profile["mp_integral"] >= r.t_mix for r in rest]
    return {"constant": constant, "held_out_stream": anchor.stream,
            "instances": len(rest), "sound_fraction": sum(sound) / len(rest)}


def density_summary(records: Sequence[ExperimentRecord], g00: float, g00_stderr: float) -> List[dict]:
    """Mean occupation density per (N, u) against 1 - exp(-u / g00), with a 3-sigma verdict"""
    groups: Dict[Tuple[int, float], List[float]] = {}
    for r in records:
        groups.setdefault((r.N, r.u), []).append(r.density)
    rows = []
    for (N, u), values in sorted(groups.items()):
        values = np.asarray(values)
        mean = float(values.mean())
        se = float(values.std(ddof=1) / math.sqrt(len(values))) if len(values) > 1 else math.nan
        predicted = eta(u, g00)
        se_eta = u / g00 ** 2 * math.exp(-u / g00) * g00_stderr
        sigma = math.hypot(se, se_eta) if not math.isnan(se) else math.nan
        rows.append({
            "N": N, "u": u, "trials": len(values), "density": mean, "stderr": se,
            "eta": predicted, "eta_stderr": se_eta,
            "z": (mean - predicted) / sigma if sigma and not math.isnan(sigma) else None,
            "within_3_sigma": bool(abs(mean - predicted) <= 3 * sigma) if not math.isnan(sigma) else None,
        })
    return rows


class ExperimentRunner:
    """Runs experiment campaigns, persists records as they arrive and logs every run"""

    def __init__(self, log_dir=None, progress=True):
        self.activity_log = RunActivityLog(log_dir)
        self.registry = ExperimentRegistry(log_dir)
        self.progress = progress

    def run(self, cfg: ExperimentConfig, config_path: str = "") -> dict:
        handlers = {
            "scaling": self.run_scaling,
            "iso": self.run_iso_study,
            "density": self.run_density,
            "torus_control": self.run_torus_control,
        }
        return handlers[cfg.kind](cfg, config_path=config_path)

    def _open(self, cfg: ExperimentConfig, title: str, config_path: str) -> Tuple[str, Path]:
        print(f"\n{'='*60}")
        print(title)
        print(f"{'='*60}\n")
        experiment_id = self.registry.add_experiment(
            kind=cfg.kind, config_path=config_path, code_version=CODE_VERSION,
            notes=f"d={cfg.d} N={cfg.N} trials={cfg.trials} seed={cfg.seed}")
        out_dir = Path(cfg.output_dir) / experiment_id
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config.json")
        return experiment_id, out_dir

    def _run_trials(self, worker: Callable, tasks: List[Tuple], records_path: Path,
                    workers: int, label: str) -> List[ExperimentRecord]:
        """
        Execute tasks in submission order and append each record to a JSON-lines file.

        Only this process writes the file, so an interrupted run leaves every
        completed record on disk. Results do not depend on the worker count.
        """
        records: List[ExperimentRecord] = []
        with open(records_path, 'a', encoding='utf-8') as sink:
            if workers <= 1 or len(tasks) <= 1:
                results = map(worker, tasks)
                pool = None
            else:
                pool = ProcessPoolExecutor(max_workers=workers)
                results = pool.map(worker, tasks)
            try:
                for record in tqdm(results, total=len(tasks), desc=label, disable=not self.progress):
                    records.append(record)
                    sink.write(record.model_dump_json() + "\n")
                    sink.flush()
            finally:
                if pool is not None:
                    pool.shutdown(cancel_futures=True)
        return records

    def _success(self, experiment_id: str, action: str, details: str, start_time: float, **payload) -> dict:
        duration = time.time() - start_time
        self.activity_log.log_action(
            component="Experiment Runner",
            experiment_id=experiment_id,
            action=action,
            status="Success",
            details=details,
            duration=round(duration, 2)
        )
        self.registry.update_status(experiment_id, "Complete", details)
        print(f"\n{'='*60}")
        print(f"✅ {action}")
        print(f"   Duration: {duration:.2f} seconds")
        print(f"{'='*60}\n")
        return {'success': True, 'experiment_id': experiment_id, 'duration': duration, **payload}

    def _failure(self, experiment_id: Optional[str], action: str, error: Exception, start_time: float,
                 records: Sequence[ExperimentRecord], records_path: Optional[Path]) -> dict:
        duration = time.time() - start_time
        self.activity_log.log_action(
            component="Experiment Runner",
            experiment_id=experiment_id or "",
            action=f"{action} Failed",
            status="Error",
            details=str(error),
            duration=round(duration, 2)
        )
        print(f"\n❌ Error in {action.lower()}: {error}")
        if records_path is not None:
            print(f"   Partial records kept in: {records_path}")
        return {
            'success': False,
            'error': str(error),
            'experiment_id': experiment_id,
            'records': list(records),
            'records_path': str(records_path) if records_path else None,
            'duration': duration
        }

    def _write(self, out_dir: Path, summary: dict, records: Sequence[ExperimentRecord]) -> Dict[str, str]:
        summary_path = out_dir / "summary.json"
        try:
            with open(summary_path, 'w', encoding='utf-8') as f:
                json.dump(summary, f, indent=2, default=str)
        except OSError as e:
            raise OSError(f"cannot write summary {summary_path}: {e}") from e
        print(f"📄 JSON saved: {summary_path}")
        files = write_report(records, out_dir)
        files["summary"] = str(summary_path)
        return files

    def run_scaling(self, cfg: ExperimentConfig, config_path: str = "") -> dict:
        """t_mix of `trials` range samples per N and the log-log slope of the medians"""
        start_time = time.time()
        experiment_id, records, records_path = None, [], None
        try:
            if len(cfg.N) < 2:
                raise ValueError(f"scaling fit needs at least 2 side lengths, got {cfg.N}")
            experiment_id, out_dir = self._open(cfg, f"📈 Mixing-time scaling: d={cfg.d}, u={cfg.u}", config_path)
            records_path = out_dir / "records.jsonl"
            tasks = [(cfg.d, N, cfg.u, cfg.seed, t, cfg.exact_cap, cfg.mc_trials)
                     for N in cfg.N for t in range(cfg.trials)]
            records = self._run_trials(scaling_trial, tasks, records_path,
                                       worker_count(cfg.workers), "scaling")
            fit = fit_scaling(records, seed=cfg.seed)
            for N, median, (lo, hi) in zip(fit.sides, fit.medians, fit.spread):
                print(f"   N={N:4d}: median t_mix = {median:10.1f}   IQR [{lo:.0f}, {hi:.0f}]")
            print(f"\n📊 Slope: {fit.slope:.3f}   CI [{fit.ci[0]:.3f}, {fit.ci[1]:.3f}]")
            summary = {"experiment_id": experiment_id, "config": cfg.model_dump(),
                       "code_version": CODE_VERSION, "fit": fit.to_dict()}
            files = self._write(out_dir, summary, records)
            return self._success(experiment_id, "Scaling Study Complete",
                                 f"slope {fit.slope:.3f} over {len(records)} trials", start_time,
                                 fit=fit, records=records, files=files)
        except Exception as e:
            return self._failure(experiment_id, "Scaling Study", e, start_time, records, records_path)

    def run_iso_study(self, cfg: ExperimentConfig, config_path: str = "") -> dict:
        """Candidate profiles, gamma_hat and the integral bound per instance"""
        start_time = time.time()
        experiment_id, records, records_path = None, [], None
        try:
            experiment_id, out_dir = self._open(cfg, f"📐 Isoperimetry study: d={cfg.d}, u={cfg.u}", config_path)
            records_path = out_dir / "records.jsonl"
            tasks = [(cfg.d, N, cfg.u, cfg.seed, t, cfg.rmax, cfg.admissible_mu, cfg.mp_constant,
                      cfg.exact_cap, cfg.mc_trials)
                     for N in cfg.N for t in range(cfg.trials)]
            records = self._run_trials(iso_trial, tasks, records_path, worker_count(cfg.workers), "iso")
            trend = iso_trend(records, seed=cfg.seed)
            soundness = mp_soundness(records) if cfg.mp_constant is None else None
            for N, gmin in trend["min_gamma"].items():
                print(f"   N={N:4d}: min gamma_hat = {gmin:.4f}")
            if records and not trend["all_positive"]:
                print("⚠️  gamma_hat vanished on some instance")
            summary = {"experiment_id": experiment_id, "config": cfg.model_dump(),
                       "code_version": CODE_VERSION, "trend": trend, "mp_soundness": soundness}
            files = self._write(out_dir, summary, records)
            return self._success(experiment_id, "Isoperimetry Study Complete",
                                 f"{len(records)} instances", start_time,
                                 trend=trend, mp_soundness=soundness, records=records, files=files)
        except Exception as e:
            return self._failure(experiment_id, "Isoperimetry Study", e, start_time, records, records_path)

    def run_density(self, cfg: ExperimentConfig, config_path: str = "",
                    green_precision: float = 0.01) -> dict:
        """Occupation density of the range for each u against the interlacement density"""
        start_time = time.time()
        experiment_id, records, records_path = None, [], None
        try:
            experiment_id, out_dir = self._open(cfg, f"🎯 Occupation density: d={cfg.d}, u={cfg.u_values}", config_path)
            records_path = out_dir / "records.jsonl"
            green = green_at_origin(cfg.d, precision=green_precision, seed=RngSeed(cfg.seed, GREEN_STREAM))
            print(f"   g(0,0) = {green.value:.4f} ± {green.stderr:.4f} "
                  f"(escape route {green.escape_value:.4f} ± {green.escape_stderr:.4f})")
            if not green.agrees():
                print("⚠️  the two g(0,0) estimators disagree beyond 3 sigma")
            tasks = [(cfg.d, N, u, cfg.seed, t)
                     for u in cfg.u_values for N in cfg.N for t in range(cfg.trials)]
            records = self._run_trials(density_trial, tasks, records_path, worker_count(cfg.workers), "density")
            rows = density_summary(records, green.value, green.stderr)
            for row in rows:
                mark = "✅" if row["within_3_sigma"] else "⚠️ "
                print(f"   {mark} N={row['N']} u={row['u']}: {row['density']:.4f} vs eta {row['eta']:.4f}")
            summary = {"experiment_id": experiment_id, "config": cfg.model_dump(),
                       "code_version": CODE_VERSION, "green": green.to_dict(), "density": rows}
            files = self._write(out_dir, summary, records)
            return self._success(experiment_id, "Density Study Complete",
                                 f"{len(rows)} (N, u) cells", start_time,
                                 green=green, density=rows, records=records, files=files)
        except Exception as e:
            return self._failure(experiment_id, "Density Study", e, start_time, records, records_path)

    def run_torus_control(self, cfg: ExperimentConfig, config_path: str = "") -> dict:
        """Exact t_mix of the full torus for every N and its log-log slope"""
        start_time = time.time()
        experiment_id, records, records_path = None, [], None
        try:
            if len(cfg.N) < 2:
                raise ValueError(f"scaling fit needs at least 2 side lengths, got {cfg.N}")
            experiment_id, out_dir = self._open(cfg, f"🧊 Full-torus control: d={cfg.d}", config_path)
            records_path = out_dir / "records.jsonl"
            tasks = [(cfg.d, N, cfg.exact_cap) for N in cfg.N]
            records = self._run_trials(torus_trial, tasks, records_path, worker_count(cfg.workers), "torus")
            fit = fit_scaling(records, seed=cfg.seed)
            for r in records:
                print(f"   N={r.N:4d}: t_mix = {r.t_mix}")
            print(f"\n📊 Slope: {fit.slope:.3f}")
            summary = {"experiment_id": experiment_id, "config": cfg.model_dump(),
                       "code_version": CODE_VERSION, "fit": fit.to_dict()}
            files = self._write(out_dir, summary, records)
            return self._success(experiment_id, "Torus Control Complete", f"slope {fit.slope:.3f}",
                                 start_time, fit=fit, records=records, files=files)
        except Exception as e:
            return self._failure(experiment_id, "Torus Control", e, start_time, records, records_path)
