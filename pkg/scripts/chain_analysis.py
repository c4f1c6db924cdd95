"""
Chain Analysis
Lazy random walk on a connected induced subgraph: transition law, stationary
distribution, 1/4-uniform mixing time (exact and Monte-Carlo) and the local
confinement diagnostics behind the N^2 lower bound
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, sparse
from scipy.sparse import csgraph
from scipy.sparse.linalg import eigsh

from lattice import CellSet, InducedSubgraph, OccupancyGrid, box_counts, induced_subgraph, linf_distance
from walk_sampler import RngSeed


EXACT_CAP = 4000
CRITERION = 0.25
# Slack on the 1/4 criterion so eigen-noise cannot flip the answer
SLACK = 1e-12
RESIDUAL_TOL = 1e-8
SCAN_BLOCK = 64


class DisconnectedGraphError(ValueError):
    """Chain requested on a disconnected vertex set"""


class CapExceededError(ValueError):
    """Instance larger than the exact-method cap"""


class NumericalDegeneracyError(RuntimeError):
    """Eigen-decomposition residual above tolerance"""


class BudgetExhaustedError(RuntimeError):
    """Monte-Carlo horizon reached before the criterion crossed 1/4"""


class RadiusTooLargeError(ValueError):
    """Ball radius exceeds the torus half-width"""


@dataclass(frozen=True)
class StationaryDist:
    """pi(x) = d_x / sum_y d_y"""

    pi: np.ndarray

    def __getitem__(self, vertex: int) -> float:
        return float(self.pi[vertex])

    def __len__(self) -> int:
        return len(self.pi)


@dataclass(frozen=True)
class LazyChain:
    """Lazy walk p(x,x) = 1/2, p(x,y) = 1/(2 d_x) on a connected induced subgraph"""

    subgraph: InducedSubgraph

    @property
    def grid(self) -> OccupancyGrid:
        return self.subgraph.grid

    @property
    def vertices(self) -> CellSet:
        return self.subgraph.cells

    @property
    def n_vertices(self) -> int:
        return self.subgraph.n_vertices

    @property
    def degrees(self) -> np.ndarray:
        return self.subgraph.degrees

    @property
    def n_edges(self) -> int:
        return int(self.degrees.sum()) // 2

    def edges(self) -> np.ndarray:
        return self.subgraph.edges()

    def local_id(self, cell: int) -> int:
        return int(self.subgraph.local_ids([cell])[0])

    def transition_matrix(self) -> sparse.csr_matrix:
        inv = sparse.diags(1.0 / self.degrees)
        return (0.5 * sparse.identity(self.n_vertices) + 0.5 * inv @ self.subgraph.adjacency()).tocsr()

    def symmetric_kernel(self) -> np.ndarray:
        """D^(1/2) P D^(-1/2), dense"""
        root = 1.0 / np.sqrt(self.degrees)
        adj = self.subgraph.adjacency().toarray()
        return 0.5 * np.eye(self.n_vertices) + 0.5 * root[:, None] * adj * root[None, :]

    def ball(self, vertex: int, radius: int) -> np.ndarray:
        """Local ids of vertices within l-infinity distance radius of a vertex"""
        coords = self.grid.coords(self.vertices.indices)
        side = self.grid.side if self.grid.periodic else None
        dist = linf_distance(coords, coords[vertex], side)
        return np.flatnonzero(dist <= radius)

    def neighbor_lists(self) -> np.ndarray:
        """Neighbor table with valid ids first in every row"""
        table = np.where(self.subgraph.table >= 0, self.subgraph.table, self.n_vertices)
        return np.sort(table, axis=1)


def build_chain(S: OccupancyGrid) -> Tuple[LazyChain, StationaryDist]:
    sub = induced_subgraph(S)
    if sub.n_vertices < 2:
        raise ValueError(f"a lazy chain needs at least one edge, got {sub.n_vertices} vertices")
    n_parts, _ = csgraph.connected_components(sub.adjacency(), directed=False)
    if n_parts != 1:
        raise DisconnectedGraphError(
            f"occupied set has {n_parts} components; pass a connected range")
    chain = LazyChain(sub)
    degrees = chain.degrees.astype(np.float64)
    return chain, StationaryDist(degrees / degrees.sum())


@dataclass(frozen=True)
class SpectralData:
    """Eigenpairs of the symmetrised lazy kernel, eigenvalues descending"""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    pi: np.ndarray
    residual: float

    @property
    def lambda2(self) -> float:
        return float(self.eigenvalues[1])

    def relative_kernel(self, n: int) -> np.ndarray:
        """p_n(x,y)/pi(y) - 1 for all pairs"""
        psi = self.eigenvectors[:, 1:] / np.sqrt(self.pi)[:, None]
        return (psi * self.eigenvalues[1:] ** n) @ psi.T

    def transition_power(self, n: int) -> np.ndarray:
        return (self.relative_kernel(n) + 1.0) * self.pi[None, :]


def spectral_decomposition(chain: LazyChain, pi: Optional[StationaryDist] = None) -> SpectralData:
    if pi is None:
        pi = StationaryDist(chain.degrees / chain.degrees.sum())
    kernel = chain.symmetric_kernel()
    values, vectors = linalg.eigh(kernel)
    order = np.argsort(values)[::-1]
    values, vectors = values[order], vectors[:, order]
    residual = float(np.abs(kernel @ vectors - vectors * values).max())
    if residual > RESIDUAL_TOL:
        raise NumericalDegeneracyError(f"eigen-residual {residual:.2e} above {RESIDUAL_TOL}")
    return SpectralData(np.clip(values, 0.0, 1.0), vectors, pi.pi, residual)


@dataclass
class MixingEstimate:
    """Mixing time in steps with provenance"""

    value: int
    method: str
    errbar: Optional[float] = None
    ci: Optional[Tuple[int, int]] = None
    lambda2: Optional[float] = None
    vertex: Optional[int] = None
    details: Dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "t_mix": self.value, "errbar": self.errbar,
            "ci": list(self.ci) if self.ci else None, "lambda2": self.lambda2,
            "vertex": self.vertex, **self.details,
        }


def uniform_mixing_time_exact(chain: LazyChain, cap: int = EXACT_CAP) -> MixingEstimate:
    """
    Smallest n with max_{x,y} |p_n(x,y) - pi(y)| / pi(y) <= 1/4, by spectral reconstruction.

    p_n(x,y)/pi(y) - 1 = sum_{k>=2} lambda_k^n psi_k(x) psi_k(y) is positive
    semidefinite because laziness keeps every lambda_k >= 0, so its largest
    absolute entry sits on the diagonal. Every n is scanned in turn up to the
    spectral-gap horizon, which always satisfies the criterion.
    """
    if chain.n_vertices > cap:
        raise CapExceededError(f"{chain.n_vertices} vertices exceed the exact cap {cap}")
    spectrum = spectral_decomposition(chain)
    pi = spectrum.pi
    weights = spectrum.eigenvectors[:, 1:] ** 2 / pi[:, None]
    lam = spectrum.eigenvalues[1:]
    gap = 1.0 - spectrum.lambda2
    if gap <= 0:
        raise NumericalDegeneracyError("second eigenvalue equals 1 on a connected chain")
    horizon = int(math.ceil(math.log(4.0 * (1.0 / pi.min())) / -math.log1p(-min(gap, 1 - 1e-16)))) + 1

    for start in range(0, horizon + SCAN_BLOCK, SCAN_BLOCK):
        ns = np.arange(start, start + SCAN_BLOCK)
        deviation = weights @ (lam[:, None] ** ns[None, :])
        worst = deviation.max(axis=0)
        hits = np.flatnonzero(worst <= CRITERION + SLACK)
        if hits.size:
            n = int(ns[hits[0]])
            binding = deviation[:, hits[0] - 1] if hits[0] > 0 else weights @ lam ** (n - 1)
            return MixingEstimate(
                value=n, method="exact-spectral", lambda2=spectrum.lambda2,
                vertex=int(chain.vertices.indices[int(np.argmax(binding))]),
                details={"V": chain.n_vertices, "E": chain.n_edges, "residual": spectrum.residual},
            )
    raise NumericalDegeneracyError("criterion not met within the spectral-gap horizon")


def uniform_mixing_time_matrix_power(chain: LazyChain, max_steps: int = 100_000) -> MixingEstimate:
    """Same criterion by dense n-step multiplication, for small chains"""
    P = chain.transition_matrix().toarray()
    pi = chain.degrees / chain.degrees.sum()
    power = np.eye(chain.n_vertices)
    for n in range(max_steps + 1):
        if np.abs(power / pi[None, :] - 1.0).max() <= CRITERION + SLACK:
            return MixingEstimate(value=n, method="matrix-power",
                                  details={"V": chain.n_vertices, "E": chain.n_edges})
        power = power @ P
    raise BudgetExhaustedError(f"matrix power did not mix within {max_steps} steps")


def morton_order(coords: np.ndarray) -> np.ndarray:
    """Vertex order along a Z-order space-filling sweep"""
    coords = np.asarray(coords, dtype=np.int64)
    bits = max(int(coords.max()).bit_length(), 1) if coords.size else 1
    d = coords.shape[1]
    code = np.zeros(len(coords), dtype=np.int64)
    for b in range(bits):
        for axis in range(d):
            code |= ((coords[:, axis] >> b) & 1) << (b * d + axis)
    return np.argsort(code, kind="stable")


def sample_sources(chain: LazyChain, count: int = 64) -> np.ndarray:
    """Evenly spaced vertices along a Morton sweep (both ends kept) plus the lowest-degree ones"""
    V = chain.n_vertices
    if V <= count:
        return np.arange(V)
    order = morton_order(chain.grid.coords(chain.vertices.indices))
    sweep = order[np.unique(np.linspace(0, V - 1, count - count // 4).round().astype(np.int64))]
    low = np.argsort(chain.degrees, kind="stable")[: count // 4]
    return np.unique(np.concatenate([sweep, low]))


def lazy_steps(rng: np.random.Generator, positions: np.ndarray, neighbors: np.ndarray,
               degrees: np.ndarray) -> np.ndarray:
    """One lazy step for every walker"""
    move = rng.random(len(positions)) < 0.5
    pick = (rng.random(len(positions)) * degrees[positions]).astype(np.int64)
    return np.where(move, neighbors[positions, pick], positions)


def _pair_estimates(first: np.ndarray, second: np.ndarray, group: np.ndarray, n_groups: int,
                    V: int, inv_pi: np.ndarray, per_group: int) -> np.ndarray:
    """sum_{i != j} 1{first_i = second_j} / pi / (T (T - 1)) within each group"""
    keys_a = group * V + first
    keys_b = group * V + second
    ua, ca = np.unique(keys_a, return_counts=True)
    ub, cb = np.unique(keys_b, return_counts=True)
    common, ia, ib = np.intersect1d(ua, ub, assume_unique=True, return_indices=True)
    total = np.bincount(common // V, weights=ca[ia] * cb[ib] * inv_pi[common % V], minlength=n_groups)
    same = first == second
    total -= np.bincount(group[same], weights=inv_pi[first[same]], minlength=n_groups)
    return total / (per_group * (per_group - 1))


def uniform_mixing_time_mc(chain: LazyChain, trials: int = 4000, confidence: float = 0.95,
                           seed: Optional[RngSeed] = None, sources: int = 64, batches: int = 20,
                           max_steps: int = 20_000, resamples: int = 200) -> MixingEstimate:
    """
    Monte-Carlo mixing time from the diagonal relative deviation.

    By reversibility p_{2k}(x,x)/pi(x) = sum_y p_k(x,y)^2 / pi(y) and
    p_{2k+1}(x,x)/pi(x) = sum_y p_k(x,y) p_{k+1}(x,y) / pi(y); both are estimated
    without bias from pairs of distinct walkers started at x. The off-diagonal
    deviations obey |p_n(x,y)/pi(y) - 1| <= sqrt(dev_n(x) dev_n(y)), so the
    largest diagonal deviation over the sampled sources stands in for the full
    maximum. Walkers are split into batches; the error bar is a bootstrap over
    batches of the first crossing of 1/4.
    """
    if trials < 2 * batches:
        raise ValueError(f"need at least two walkers per batch, got {trials} for {batches} batches")
    rng = (seed or RngSeed(0)).generator(1)
    per_batch = trials // batches
    src = sample_sources(chain, sources)
    V = chain.n_vertices
    degrees = chain.degrees
    neighbors = chain.neighbor_lists()
    inv_pi = degrees.sum() / degrees.astype(np.float64)

    n_groups = len(src) * batches
    group = np.repeat(np.arange(n_groups), per_batch)
    position = np.repeat(src, batches * per_batch)

    estimates: List[np.ndarray] = []  # per time m: (sources, batches)
    crossing = None
    horizon = max_steps
    m = 0
    while m <= horizon:
        following = lazy_steps(rng, position, neighbors, degrees)
        even = _pair_estimates(position, position, group, n_groups, V, inv_pi, per_batch)
        odd = _pair_estimates(position, following, group, n_groups, V, inv_pi, per_batch)
        for est in (even, odd):
            estimates.append(est.reshape(len(src), batches) - 1.0)
            worst = estimates[-1].mean(axis=1).max()
            if crossing is None and worst <= CRITERION:
                crossing = len(estimates) - 1
                horizon = min(max_steps, int(1.5 * crossing) + 8)
        position = following
        m += 2
    if crossing is None:
        raise BudgetExhaustedError(f"criterion did not cross 1/4 within {max_steps} steps")

    stack = np.stack(estimates)  # (times, sources, batches)
    worst_by_source = stack[crossing - 1].mean(axis=1) if crossing > 0 else stack[0].mean(axis=1)
    boot = np.empty(resamples, dtype=np.int64)
    censored = 0
    for r in range(resamples):
        pick = rng.integers(0, batches, size=batches)
        curve = stack[:, :, pick].mean(axis=2).max(axis=1)
        hits = np.flatnonzero(curve <= CRITERION)
        if hits.size:
            boot[r] = hits[0]
        else:
            boot[r] = len(curve)
            censored += 1
    alpha = 1.0 - confidence
    lo, hi = np.quantile(boot, [alpha / 2, 1 - alpha / 2])
    lo, hi = int(math.floor(lo)), int(math.ceil(hi))
    return MixingEstimate(
        value=int(crossing), method="mc-diagonal",
        errbar=float(max(crossing - lo, hi - crossing)), ci=(lo, hi),
        vertex=int(chain.vertices.indices[src[int(np.argmax(worst_by_source))]]),
        details={"V": V, "E": chain.n_edges, "sources": int(len(src)), "walkers": int(len(position)),
                 "censored_resamples": censored},
    )


@dataclass(frozen=True)
class LocalMass:
    """Probability mass with its standard error (zero when exact)"""

    value: float
    stderr: float
    steps: int
    method: str


def _check_radius(chain: LazyChain, radius: int):
    if chain.grid.periodic and radius > chain.grid.side // 2:
        raise RadiusTooLargeError(f"radius {radius} exceeds torus half-width {chain.grid.side // 2}")


def local_escape_mass(chain: LazyChain, x: int, n: int, eps: float, method: str = "exact",
                      trials: int = 10_000, seed: Optional[RngSeed] = None) -> LocalMass:
    """sum_{y in B(x,n)} p_m(x,y) with m = floor(eps n^2); x is a grid cell index"""
    steps = int(math.floor(eps * n * n))
    if steps < 1:
        raise ValueError(f"floor(eps n^2) = {steps}; need at least one step")
    _check_radius(chain, n)
    vertex = chain.local_id(x)
    ball = chain.ball(vertex, n)

    if method == "exact":
        transpose = chain.transition_matrix().T.tocsr()
        dist = np.zeros(chain.n_vertices)
        dist[vertex] = 1.0
        for _ in range(steps):
            dist = transpose @ dist
        return LocalMass(float(dist[ball].sum()), 0.0, steps, method)
    if method == "mc":
        rng = (seed or RngSeed(0)).generator(2)
        neighbors = chain.neighbor_lists()
        position = np.full(trials, vertex, dtype=np.int64)
        for _ in range(steps):
            position = lazy_steps(rng, position, neighbors, chain.degrees)
        inside = np.isin(position, ball)
        p = float(inside.mean())
        return LocalMass(p, math.sqrt(max(p * (1 - p), 1e-300) / trials), steps, method)
    raise ValueError(f"unknown method {method!r}; use 'exact' or 'mc'")


def stationary_ball_mass(chain: LazyChain, x: int, n: int, pi: Optional[StationaryDist] = None) -> float:
    """sum of pi over the chain vertices in B(x, n)"""
    if pi is None:
        pi = StationaryDist(chain.degrees / chain.degrees.sum())
    return float(pi.pi[chain.ball(chain.local_id(x), n)].sum())


@dataclass(frozen=True)
class LowerBoundWitness:
    """t_mix >= t_lower, certified at vertex x and radius n"""

    t_lower: int
    x: Optional[int]
    n: Optional[int]
    escape: Optional[float]
    ball_mass: Optional[float]

    def to_dict(self) -> dict:
        return {"t_lower": self.t_lower, "x": self.x, "n": self.n,
                "escape": self.escape, "ball_mass": self.ball_mass}


def confinement_lower_bound(chain: LazyChain, eps: float, radii: Sequence[int],
                            centers: Optional[Sequence[int]] = None) -> LowerBoundWitness:
    """
    Certified lower bound from local confinement.

    If the m-step mass inside B(x,n) exceeds 5/4 of the stationary mass of the
    ball, some y in the ball has p_m(x,y) > (5/4) pi(y), the criterion fails at
    m and t_mix >= m + 1.
    """
    if centers is None:
        centers = chain.vertices.indices[sample_sources(chain, 16)]
    best = LowerBoundWitness(1, None, None, None, None)
    for n in radii:
        steps = int(math.floor(eps * n * n))
        if steps < 1 or (chain.grid.periodic and n > chain.grid.side // 2):
            continue
        for x in centers:
            escape = local_escape_mass(chain, int(x), n, eps).value
            ball_mass = stationary_ball_mass(chain, int(x), n)
            if escape > 1.25 * ball_mass and steps + 1 > best.t_lower:
                best = LowerBoundWitness(steps + 1, int(x), int(n), escape, ball_mass)
    return best


def spectral_gap(chain: LazyChain, dense_limit: int = 2000) -> float:
    """1 - lambda_2 of the lazy kernel"""
    if chain.n_vertices <= dense_limit:
        values = linalg.eigh(chain.symmetric_kernel(), eigvals_only=True)
        return float(1.0 - np.sort(values)[-2])
    root = sparse.diags(1.0 / np.sqrt(chain.degrees))
    kernel = 0.5 * sparse.identity(chain.n_vertices) + 0.5 * root @ chain.subgraph.adjacency() @ root
    values = eigsh(kernel.tocsr(), k=2, which="LA", return_eigenvectors=False)
    return float(1.0 - np.sort(values)[0])


def positive_density_check(S: OccupancyGrid, frac: float = 1 / 7) -> float:
    """min over torus anchors x of |S cap (x + [0, ceil(N frac))^d)| / N^d"""
    side = int(math.ceil(S.side * frac))
    padded = np.pad(S.mask, [(0, side - 1)] * S.d, mode="wrap")
    counts = box_counts(padded, side)
    return float(counts.min()) / S.size
