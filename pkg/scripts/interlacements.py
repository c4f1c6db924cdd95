"""
Interlacements
Random interlacements restricted to a finite box of Z^d: capacity and
equilibrium measure by escape walks, box traces at one or several levels under
a monotone coupling, and the empirical sandwich diagnostic against the range of
the torus walk.

A trajectory of the interlacement that meets K enters it at a cell drawn from
e_K / cap(K), walks forward as a simple random walk and never comes back to K
along its backward half, so the trace on K is the union of forward walks from
the normalised equilibrium measure. Forward walks are stopped on a far shell;
at the shell they re-enter with the probability of ever hitting K again.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats
from tqdm import tqdm

from lattice import Box, OccupancyGrid, TorusConfig, restrict
from walk_sampler import RngSeed, green_tail_constant, sample_range, step_moves


SANDWICH_ALPHA = 6 / 7
# Largest return probability tolerated on the shell where trajectories are stopped
SHELL_RETURN = 0.5
DEDUP_EVERY = 1 << 20


class TruncationError(RuntimeError):
    """Truncation shell cannot meet its tolerance within the radius limit"""


def eta(u: float, g00: float) -> float:
    """Density 1 - exp(-u / g(0,0)) of the interlacement at level u"""
    return 1.0 - math.exp(-u / g00)


@dataclass(frozen=True)
class CapacityEstimate:
    """cap(K) with the equilibrium weight of every cell of K"""

    points: np.ndarray
    cap: float
    stderr: float
    weights: np.ndarray
    weight_stderr: np.ndarray
    radius: float
    trials: int
    truncation_bias: float

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def distribution(self) -> np.ndarray:
        """Entrance law e_K / cap(K)"""
        return self.weights / self.weights.sum()

    def to_dict(self) -> dict:
        return {
            "cells": int(len(self.points)), "cap": self.cap, "cap_stderr": self.stderr,
            "radius": self.radius, "trials": self.trials, "truncation_bias": self.truncation_bias,
        }


class _Membership:
    """Vectorised membership test for a finite set of Z^d points"""

    def __init__(self, points: np.ndarray):
        self.lo = points.min(axis=0)
        self.shape = points.max(axis=0) - self.lo + 1
        self.mask = np.zeros(tuple(self.shape), dtype=bool)
        self.mask[tuple((points - self.lo).T)] = True

    def __call__(self, coords: np.ndarray) -> np.ndarray:
        rel = coords - self.lo
        ok = np.all((rel >= 0) & (rel < self.shape), axis=1)
        hit = np.zeros(len(coords), dtype=bool)
        if ok.any():
            hit[ok] = self.mask[tuple(rel[ok].T)]
        return hit


def box_points(box: Box) -> np.ndarray:
    """Z^d coordinates of the cells of a box, row-major"""
    axes = np.indices((box.side,) * box.d).reshape(box.d, -1).T
    return axes + np.asarray(box.anchor, dtype=np.int64)


def _as_points(K: Union[Box, OccupancyGrid, np.ndarray]) -> np.ndarray:
    if isinstance(K, Box):
        return box_points(K)
    if isinstance(K, OccupancyGrid):
        return K.global_coords(K.occupied().indices)
    points = np.atleast_2d(np.asarray(K, dtype=np.int64))
    return np.unique(points, axis=0)


def _escape_walks(rng: np.random.Generator, starts: np.ndarray, member: _Membership,
                  center: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """Walks killed on returning to K or on leaving the ball of radius around center"""
    d = starts.shape[1]
    position = starts.copy()
    escaped = np.zeros(len(starts), dtype=bool)
    exit_r = np.full(len(starts), np.inf)
    alive = np.arange(len(starts))
    limit = radius * radius
    while alive.size:
        codes = rng.integers(0, 2 * d, size=alive.size, dtype=np.uint8)
        current = position[alive] + step_moves(codes, d)
        position[alive] = current
        back = member(current)
        r2 = ((current - center) ** 2).sum(axis=1)
        out = ~back & (r2 > limit)
        escaped[alive[out]] = True
        exit_r[alive[out]] = np.sqrt(r2[out])
        alive = alive[~(back | out)]
    return escaped, exit_r


def estimate_capacity(K: Union[Box, OccupancyGrid, np.ndarray], trials: int = 2000,
                      seed: Optional[RngSeed] = None, radius: Optional[float] = None,
                      radius_min: float = 16.0, max_radius: float = 512.0) -> CapacityEstimate:
    """
    cap(K) = sum_x P_x[walk never returns to K], by walks stopped on a far sphere.

    A walk reaching distance D from the centre of K has not escaped yet: it still
    hits K with probability about cap(K) a_d |y - c|^(2-d), so escapes are
    weighted by one minus that, with cap(K) solved by fixed-point iteration.
    Cells whose 2d neighbors all lie in K cannot escape and get weight zero.
    The radius doubles until the truncation bias drops under the standard error.
    """
    points = _as_points(K)
    if not len(points):
        raise ValueError("capacity of the empty set is zero; K must be nonempty")
    if trials < 2:
        raise ValueError(f"need at least two trials per cell, got {trials}")
    d = points.shape[1]
    if d < 3:
        raise ValueError(f"capacity is infinite-range only for d >= 3, got d = {d}")

    member = _Membership(points)
    lo, hi = points.min(axis=0), points.max(axis=0)
    center = (lo + hi) / 2.0
    diam = float(np.sqrt(((hi - lo) ** 2).sum()))
    tail = green_tail_constant(d)

    units = np.vstack([np.eye(d, dtype=np.int64), -np.eye(d, dtype=np.int64)])
    around = (points[:, None, :] + units[None, :, :]).reshape(-1, d)
    interior = member(around).reshape(len(points), 2 * d).all(axis=1)
    active = np.flatnonzero(~interior)

    fixed = radius is not None
    radius = float(radius) if fixed else max(radius_min, 2 * diam + 8)
    rng = (seed or RngSeed(0)).generator(3, d)
    while True:
        if radius > max_radius:
            raise TruncationError(f"truncation radius {radius:.0f} exceeds limit {max_radius:.0f}")
        starts = np.repeat(points[active], trials, axis=0)
        escaped, exit_r = _escape_walks(rng, starts, member, center, radius)
        escaped = escaped.reshape(len(active), trials)
        exit_r = exit_r.reshape(len(active), trials)

        cap = float(escaped.mean(axis=1).sum())
        for _ in range(3):
            h = np.clip(cap * tail * exit_r ** (2 - d), 0.0, 1.0)
            scores = np.where(escaped, 1.0 - h, 0.0)
            cap = float(scores.mean(axis=1).sum())

        weights = np.zeros(len(points))
        weight_se = np.zeros(len(points))
        weights[active] = scores.mean(axis=1)
        weight_se[active] = scores.std(axis=1, ddof=1) / math.sqrt(trials)
        stderr = float(math.sqrt((weight_se ** 2).sum()))
        bias = cap * tail * radius ** (2 - d) * (diam + 1) / radius
        if fixed or bias <= stderr:
            return CapacityEstimate(points, cap, stderr, weights, weight_se, radius, trials, bias)
        radius *= 2


@lru_cache(maxsize=64)
def box_capacity(d: int, side: int, trials: int = 400, root: int = 0) -> CapacityEstimate:
    """Capacity of the box [0, side)^d; translation invariant, so cached by shape"""
    return estimate_capacity(Box((0,) * d, side), trials=trials, seed=RngSeed(root, stream=side))


@dataclass(frozen=True)
class InterlacementTrace:
    """I^u restricted to a box"""

    window: Box
    u: float
    trace: OccupancyGrid
    n_trajectories: int


@dataclass
class InterlacementLevels:
    """
    Box traces at several levels from one realisation.

    Every trajectory carries a uniform label in [0, u_max]; the trace at level u
    keeps the trajectories labelled at most u, so traces grow with u cell by cell.
    """

    box: Box
    levels: Tuple[float, ...]
    first_label: np.ndarray  # (samples, cells): smallest label visiting the cell, inf if none
    counts: np.ndarray  # (samples, levels): trajectories kept at each level
    capacity: CapacityEstimate

    @property
    def samples(self) -> int:
        return self.first_label.shape[0]

    def occupancy(self, u: float) -> np.ndarray:
        if u > max(self.levels):
            raise ValueError(f"level {u} above the largest sampled level {max(self.levels)}")
        return self.first_label <= u

    def trace(self, u: float, sample: int = 0) -> InterlacementTrace:
        mask = self.occupancy(u)[sample].reshape((self.box.side,) * self.box.d)
        grid = OccupancyGrid.from_mask(mask, periodic=False, origin=self.box.anchor)
        level = self.levels.index(u) if u in self.levels else None
        count = int(self.counts[sample, level]) if level is not None else -1
        return InterlacementTrace(self.box, u, grid, count)


def _trajectory_radius(capacity: CapacityEstimate, side: int, max_radius: float) -> float:
    d = capacity.d
    diam = side * math.sqrt(d)
    needed = (capacity.cap * green_tail_constant(d) / SHELL_RETURN) ** (1.0 / (d - 2))
    radius = max(2 * diam + 8, needed)
    if radius > max_radius:
        raise TruncationError(f"shell radius {radius:.0f} for return probability "
                              f"{SHELL_RETURN} exceeds limit {max_radius:.0f}")
    return radius


def _run_trajectories(rng: np.random.Generator, starts: np.ndarray, entrance: np.ndarray,
                      side: int, d: int, cap: float, radius: float) -> np.ndarray:
    """Distinct (trajectory * cells + cell) keys of in-box visits"""
    shape = (side,) * d
    vol = side ** d
    tail = green_tail_constant(d)
    position = np.stack(np.unravel_index(starts, shape), axis=1).astype(np.int64)
    ids = np.arange(len(starts), dtype=np.int64)
    center = (side - 1) / 2.0
    limit = radius * radius
    found: List[np.ndarray] = []
    pending: List[np.ndarray] = [ids * vol + starts]
    pending_size = len(starts)

    while ids.size:
        codes = rng.integers(0, 2 * d, size=ids.size, dtype=np.uint8)
        position += step_moves(codes, d)
        inside = np.all((position >= 0) & (position < side), axis=1)
        if inside.any():
            pending.append(ids[inside] * vol + np.ravel_multi_index(tuple(position[inside].T), shape))
            pending_size += int(inside.sum())
        r2 = ((position - center) ** 2).sum(axis=1)
        out = np.flatnonzero(r2 > limit)
        if out.size:
            returns = np.minimum(1.0, cap * tail * np.sqrt(r2[out]) ** (2 - d))
            again = out[rng.random(out.size) < returns]
            if again.size:
                cells = rng.choice(vol, size=again.size, p=entrance)
                position[again] = np.stack(np.unravel_index(cells, shape), axis=1)
                pending.append(ids[again] * vol + cells)
            keep = np.ones(ids.size, dtype=bool)
            keep[out] = False
            keep[again] = True
            position, ids = position[keep], ids[keep]
        if pending_size > DEDUP_EVERY:
            found.append(np.unique(np.concatenate(pending)))
            pending, pending_size = [], 0
    return np.unique(np.concatenate(found + pending))


def sample_interlacement_levels(box: Box, levels: Sequence[float], seed: Optional[RngSeed] = None,
                                samples: int = 1, capacity: Optional[CapacityEstimate] = None,
                                max_radius: float = 512.0, verbose: bool = False) -> InterlacementLevels:
    """Independent box samples of I^u at every level, coupled across levels"""
    levels = tuple(float(u) for u in levels)
    if not levels or min(levels) < 0:
        raise ValueError(f"levels must be nonnegative, got {levels}")
    if samples < 1:
        raise ValueError("need at least one sample")
    if capacity is None:
        capacity = box_capacity(box.d, box.side)
    u_max = max(levels)
    vol = box.volume
    rng = (seed or RngSeed(0)).generator(4)

    n = rng.poisson(u_max * capacity.cap, size=samples)
    sample_of = np.repeat(np.arange(samples), n)
    labels = rng.uniform(0.0, u_max, size=len(sample_of))
    entrance = capacity.distribution()
    first = np.full((samples, vol), np.inf)

    if len(sample_of):
        radius = _trajectory_radius(capacity, box.side, max_radius)
        starts = rng.choice(vol, size=len(sample_of), p=entrance)
        if verbose:
            print(f"   Launching {len(sample_of)} trajectories (shell radius {radius:.0f})")
        keys = _run_trajectories(rng, starts, entrance, box.side, box.d, capacity.cap, radius)
        trajectory, cell = np.divmod(keys, vol)
        np.minimum.at(first, (sample_of[trajectory], cell), labels[trajectory])

    counts = np.stack([np.bincount(sample_of[labels <= u], minlength=samples) for u in levels], axis=1)
    return InterlacementLevels(box, levels, first, counts, capacity)


def sample_interlacement_box(box: Box, u: float, seed: Optional[RngSeed] = None,
                             capacity: Optional[CapacityEstimate] = None) -> InterlacementTrace:
    """One sample of I^u restricted to a box"""
    return sample_interlacement_levels(box, [u], seed, samples=1, capacity=capacity).trace(u)


@dataclass
class EmptyBoxStudy:
    """Frequency of an empty trace per box side, with a fit of log frequency on side^(d-2)"""

    d: int
    u: float
    sides: List[int]
    frequencies: List[float]
    stderr: List[float]
    slope: float
    intercept: float

    def to_dict(self) -> dict:
        return {"d": self.d, "u": self.u, "sides": self.sides, "frequencies": self.frequencies,
                "stderr": self.stderr, "slope": self.slope, "intercept": self.intercept}


def empty_box_frequency(d: int, u: float, sides: Sequence[int] = (1, 2, 3), samples: int = 10_000,
                        seed: Optional[RngSeed] = None, trials: int = 400) -> EmptyBoxStudy:
    """
    P[I^u misses the box [0, m)^d] for each side m.

    A trace is empty exactly when no trajectory is launched, since every
    trajectory starts inside the box, so only the Poisson counts are drawn.
    """
    rng = (seed or RngSeed(0)).generator(5, d)
    freqs, errors = [], []
    for m in sides:
        cap = box_capacity(d, int(m), trials).cap
        empty = rng.poisson(u * cap, size=samples) == 0
        p = float(empty.mean())
        freqs.append(p)
        errors.append(math.sqrt(p * (1 - p) / samples))
    usable = [i for i, p in enumerate(freqs) if p > 0]
    if len(usable) < 2:
        raise ValueError("fewer than two sides with a nonzero empty frequency; lower u or add samples")
    x = np.array([sides[i] ** (d - 2) for i in usable], dtype=np.float64)
    y = np.log([freqs[i] for i in usable])
    fit = stats.linregress(x, y)
    return EmptyBoxStudy(d, u, [int(m) for m in sides], freqs, errors, float(fit.slope), float(fit.intercept))


@dataclass
class SandwichReport:
    """Occupation statistics of I^{u(1-eps)}, the torus range and I^{u(1+eps)} on one box"""

    box: Box
    u: float
    epsilon: float
    trials: int
    freq_low: np.ndarray
    freq_range: np.ndarray
    freq_high: np.ndarray
    ordered_fraction: float
    popcount_means: Tuple[float, float, float]
    popcount_stderr: Tuple[float, float, float]
    means_ordered: bool
    ecdf_violation: Tuple[float, float]
    ecdf_band: float
    vacuous: bool
    traces_nested: bool = True
    capacity: Dict = field(default_factory=dict)

    @property
    def ecdf_ordered(self) -> bool:
        return max(self.ecdf_violation) <= 2 * self.ecdf_band

    def to_dict(self) -> dict:
        return {
            "box_anchor": list(self.box.anchor), "box_side": self.box.side, "u": self.u,
            "epsilon": self.epsilon, "trials": self.trials,
            "density_low": float(self.freq_low.mean()), "density_range": float(self.freq_range.mean()),
            "density_high": float(self.freq_high.mean()),
            "ordered_fraction": self.ordered_fraction,
            "popcount_means": list(self.popcount_means), "popcount_stderr": list(self.popcount_stderr),
            "means_ordered": self.means_ordered, "ecdf_violation": list(self.ecdf_violation),
            "ecdf_band": self.ecdf_band, "ecdf_ordered": self.ecdf_ordered,
            "vacuous": self.vacuous, "traces_nested": self.traces_nested,
            "capacity": self.capacity,
        }


def _ordered(lower: np.ndarray, upper: np.ndarray, trials: int, sigmas: float = 3.0) -> np.ndarray:
    """lower <= upper within sigmas combined binomial standard errors"""
    spread = np.sqrt((lower * (1 - lower) + upper * (1 - upper)) / trials)
    return lower <= upper + sigmas * spread


def _ecdf(popcounts: np.ndarray, size: int) -> np.ndarray:
    return np.cumsum(np.bincount(popcounts, minlength=size + 1)) / len(popcounts)


def sandwich_diagnostic(cfg: TorusConfig, u: float, epsilon: float, box: Box, trials: int = 500,
                        seed: Optional[RngSeed] = None, capacity: Optional[CapacityEstimate] = None,
                        verbose: bool = False) -> SandwichReport:
    """
    Distributional consequences of I^{u(1-eps)} <= range <= I^{u(1+eps)} on a box.

    The three sets are sampled independently; each cell's occupation frequency
    and the law of the box popcount must respect the ordering up to noise.
    """
    from renormalization import ScaleConstraintError

    if box.side > SANDWICH_ALPHA * cfg.N:
        raise ScaleConstraintError(f"box side {box.side} exceeds (6/7) N = {SANDWICH_ALPHA * cfg.N:.2f}")
    if not 0 <= epsilon < 1:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    if trials < 2:
        raise ValueError("need at least two trials")
    seed = seed or RngSeed(0)
    walk_cfg = TorusConfig(d=cfg.d, N=cfg.N, u=u)
    vol = box.volume

    range_occ = np.empty((trials, vol), dtype=bool)
    for t in tqdm(range(trials), desc="torus ranges", disable=not verbose):
        grid, _ = sample_range(walk_cfg, RngSeed(seed.root, stream=seed.stream + t))
        range_occ[t] = restrict(grid, box).flat_mask
    low_u, high_u = u * (1 - epsilon), u * (1 + epsilon)
    inter = sample_interlacement_levels(box, [low_u, high_u], seed, samples=trials,
                                        capacity=capacity, verbose=verbose)
    low_occ, high_occ = inter.occupancy(low_u), inter.occupancy(high_u)

    f_low, f_range, f_high = low_occ.mean(axis=0), range_occ.mean(axis=0), high_occ.mean(axis=0)
    ok = _ordered(f_low, f_range, trials) & _ordered(f_range, f_high, trials)

    pops = [occ.sum(axis=1) for occ in (low_occ, range_occ, high_occ)]
    means = tuple(float(p.mean()) for p in pops)
    errors = tuple(float(p.std(ddof=1) / math.sqrt(trials)) for p in pops)
    means_ordered = (means[0] <= means[1] + 3 * math.hypot(errors[0], errors[1])
                     and means[1] <= means[2] + 3 * math.hypot(errors[1], errors[2]))

    # First-order dominance low <= range <= high means F_low >= F_range >= F_high
    F = [_ecdf(p, vol) for p in pops]
    violation = (float(np.max(F[1] - F[0])), float(np.max(F[2] - F[1])))
    band = math.sqrt(math.log(2 / 0.05) / (2 * trials))

    report = SandwichReport(
        box=box, u=u, epsilon=epsilon, trials=trials,
        freq_low=f_low, freq_range=f_range, freq_high=f_high,
        ordered_fraction=float(ok.mean()), popcount_means=means, popcount_stderr=errors,
        means_ordered=bool(means_ordered), ecdf_violation=violation, ecdf_band=band,
        vacuous=epsilon == 0, traces_nested=not bool((low_occ & ~high_occ).any()),
        capacity=inter.capacity.to_dict(),
    )
    if not report.traces_nested:
        print("⚠️  Coupled traces are not nested: I^{u(1-eps)} has a cell outside I^{u(1+eps)}")
    if verbose:
        status = "✅" if report.ordered_fraction >= 0.95 else "⚠️"
        print(f"{status} Per-cell ordering holds at {report.ordered_fraction:.1%} of cells")
        if report.vacuous:
            print("⚠️  epsilon = 0: both interlacement levels coincide, the check is vacuous")
    return report


@dataclass
class LevelCheck:
    """Single-level statistics of sampled box traces against their closed forms"""

    box: Box
    u: float
    levels: Tuple[float, ...]
    samples: int
    density: float
    density_stderr: float
    eta: float
    eta_stderr: float
    count_mean: float
    count_var: float
    expected_count: float
    monotone: bool
    capacity: Dict = field(default_factory=dict)

    @property
    def dispersion(self) -> float:
        """Variance over mean of the trajectory count; 1 for a Poisson law"""
        return self.count_var / self.count_mean if self.count_mean > 0 else math.nan

    @property
    def density_agrees(self) -> bool:
        return abs(self.density - self.eta) <= 3 * math.hypot(self.density_stderr, self.eta_stderr)

    def table(self) -> List[Dict]:
        return [
            {"check": "density vs eta(u)", "value": self.density, "target": self.eta,
             "passed": self.density_agrees},
            {"check": "count variance / mean", "value": self.dispersion, "target": 1.0,
             "passed": 0.8 <= self.dispersion <= 1.2},
            {"check": "monotone coupling", "value": float(self.monotone), "target": 1.0,
             "passed": self.monotone},
        ]

    def to_dict(self) -> dict:
        return {
            "box_anchor": list(self.box.anchor), "box_side": self.box.side, "u": self.u,
            "levels": list(self.levels), "samples": self.samples, "density": self.density,
            "density_stderr": self.density_stderr, "eta": self.eta, "eta_stderr": self.eta_stderr,
            "count_mean": self.count_mean, "count_var": self.count_var,
            "expected_count": self.expected_count, "dispersion": self.dispersion,
            "monotone": self.monotone, "capacity": self.capacity, "table": self.table(),
        }


def check_levels(box: Box, u: float, g00: float, g00_stderr: float = 0.0, samples: int = 10_000,
                 spread: float = 0.2, seed: Optional[RngSeed] = None,
                 capacity: Optional[CapacityEstimate] = None) -> LevelCheck:
    """
    Sample I^{u(1-spread)}, I^u and I^{u(1+spread)} on one box under shared randomness.

    The per-cell occupation frequency at u is compared with eta(u), the number
    of trajectories with its Poisson law, and the three traces with the
    cell-by-cell inclusion the coupling guarantees.
    """
    if not 0 <= spread < 1:
        raise ValueError(f"spread must lie in [0, 1), got {spread}")
    levels = (u * (1 - spread), u, u * (1 + spread))
    inter = sample_interlacement_levels(box, levels, seed, samples=samples, capacity=capacity)
    low, mid, high = (inter.occupancy(level) for level in levels)
    monotone = bool(np.all(low <= mid) and np.all(mid <= high))

    per_sample = mid.mean(axis=1)
    density = float(per_sample.mean())
    density_se = float(per_sample.std(ddof=1) / math.sqrt(samples)) if samples > 1 else math.nan
    counts = inter.counts[:, 1].astype(np.float64)
    eta_se = u / g00 ** 2 * math.exp(-u / g00) * g00_stderr
    return LevelCheck(
        box=box, u=u, levels=levels, samples=samples, density=density, density_stderr=density_se,
        eta=eta(u, g00), eta_stderr=eta_se, count_mean=float(counts.mean()),
        count_var=float(counts.var(ddof=1)) if samples > 1 else math.nan,
        expected_count=u * inter.capacity.cap, monotone=monotone, capacity=inter.capacity.to_dict(),
    )
