"""
Isoperimetry
Conductance profiles of a range (exhaustive, spectral sweep and ball families),
the isoperimetric inequality check and the integral upper bound on mixing time
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg, sparse
from scipy.sparse.linalg import ArpackNoConvergence, eigsh

from chain_analysis import DisconnectedGraphError, NumericalDegeneracyError, build_chain
from lattice import CellSet, InducedSubgraph, OccupancyGrid, TorusConfig, edge_boundary, induced_subgraph, is_connected, linf_distance


ENUMERATION_CAP = 8
DENSE_LIMIT = 2000
BALL_CENTERS = 1024


class EnumerationCapError(ValueError):
    """Requested subset size above the enumeration cap"""


class NoAdmissibleCandidateError(ValueError):
    """No candidate set satisfies the size constraint"""


class VanishingProfileError(ValueError):
    """Profile is zero or undefined somewhere on the integration domain"""


def admissible_size(n_vertices: int, d: int) -> int:
    """floor((1 - 1/(4d)) |R|)"""
    return (4 * d - 1) * n_vertices // (4 * d)


@dataclass
class ConductanceProfile:
    """
    Best edge-boundary found for every candidate size, read as a step function.

    phi(r) is the smallest |dA|/|A| over candidates with |A| <= r, so the
    breakpoints are the sizes where that running minimum drops. Witnesses are
    kept as prefixes of stored vertex orders and materialised on request.
    """

    method: str
    sizes: np.ndarray
    boundaries: np.ndarray
    cells: Optional[CellSet] = None
    sources: List[np.ndarray] = field(default_factory=list)
    source_ids: Optional[np.ndarray] = None

    @classmethod
    def from_breakpoints(cls, points: Sequence[Tuple[int, float]], method: str = "given") -> "ConductanceProfile":
        """Profile with no witnesses from (r, phi) pairs"""
        sizes = np.array([int(r) for r, _ in points], dtype=np.int64)
        ratios = np.array([float(p) for _, p in points])
        order = np.argsort(sizes)
        return cls(method, sizes[order], ratios[order] * sizes[order])

    @property
    def ratios(self) -> np.ndarray:
        return self.boundaries / self.sizes

    def breakpoints(self) -> List[Tuple[int, float]]:
        points = []
        running = math.inf
        for r, phi in zip(self.sizes, self.ratios):
            if phi < running:
                running = float(phi)
                points.append((int(r), running))
        return points

    def value(self, r: float) -> float:
        """phi(r); infinite below the smallest candidate size"""
        keep = self.sizes <= r
        return float(self.ratios[keep].min()) if keep.any() else math.inf

    def witness(self, size: int) -> Optional[CellSet]:
        """Grid cells of the best candidate of exactly this size"""
        if self.cells is None or self.source_ids is None:
            return None
        pos = np.searchsorted(self.sizes, size)
        if pos >= len(self.sizes) or self.sizes[pos] != size:
            return None
        src = int(self.source_ids[pos])
        if src < 0:
            return None
        local = self.sources[src][:size]
        return CellSet(self.cells.indices[local])

    def mp_integral(self, upper: float) -> float:
        """integral over [1, upper] of dr / (r phi(r)^2), exact on each step"""
        points = self.breakpoints()
        if not points or points[0][0] > 1:
            raise VanishingProfileError("profile undefined at r = 1")
        total = 0.0
        for i, (r, phi) in enumerate(points):
            if r >= upper:
                break
            if phi <= 0:
                raise VanishingProfileError(f"profile vanishes at r = {r}")
            end = points[i + 1][0] if i + 1 < len(points) else upper
            total += math.log(min(end, upper) / r) / phi ** 2
        return total

    @classmethod
    def merge(cls, profiles: Sequence["ConductanceProfile"]) -> "ConductanceProfile":
        """Pointwise minimum of profiles over the same grid"""
        best: Dict[int, Tuple[float, int, int]] = {}
        sources: List[np.ndarray] = []
        for profile in profiles:
            offset = len(sources)
            sources.extend(profile.sources)
            for i, (size, boundary) in enumerate(zip(profile.sizes, profile.boundaries)):
                src = int(profile.source_ids[i]) + offset if profile.source_ids is not None else -1
                if int(size) not in best or boundary < best[int(size)][0]:
                    best[int(size)] = (float(boundary), src, i)
        sizes = np.array(sorted(best), dtype=np.int64)
        cells = next((p.cells for p in profiles if p.cells is not None), None)
        return cls(
            method="+".join(p.method for p in profiles), sizes=sizes,
            boundaries=np.array([best[s][0] for s in sizes]), cells=cells, sources=sources,
            source_ids=np.array([best[s][1] for s in sizes], dtype=np.int64) if cells is not None else None,
        )

    def to_dict(self, witnesses: bool = True) -> dict:
        rows = []
        for r, phi in self.breakpoints():
            row = {"r": r, "phi": phi}
            if witnesses:
                w = self.witness(r)
                row["witness"] = w.to_list() if w is not None else None
            rows.append(row)
        return {"method": self.method, "breakpoints": rows}


class _CandidateTable:
    """Best boundary per size among offered candidates"""

    def __init__(self, sub: InducedSubgraph, limit: int):
        self.sub = sub
        self.limit = limit
        self.best = np.full(limit + 1, np.inf)
        self.source = np.full(limit + 1, -1, dtype=np.int64)
        self.sources: List[np.ndarray] = []

    def offer(self, members: Sequence[int], boundary: int):
        size = len(members)
        if 1 <= size <= self.limit and boundary < self.best[size]:
            self.best[size] = boundary
            self.source[size] = len(self.sources)
            self.sources.append(np.asarray(members, dtype=np.int64))

    def offer_prefixes(self, order: np.ndarray, sizes: np.ndarray, boundaries: np.ndarray):
        keep = (sizes >= 1) & (sizes <= self.limit)
        sizes, boundaries = sizes[keep], boundaries[keep]
        better = boundaries < self.best[sizes]
        if better.any():
            self.best[sizes[better]] = boundaries[better]
            self.source[sizes[better]] = len(self.sources)
            self.sources.append(order)

    def build(self, method: str) -> ConductanceProfile:
        sizes = np.flatnonzero(np.isfinite(self.best))
        return ConductanceProfile(method, sizes.astype(np.int64), self.best[sizes],
                                  self.sub.cells, self.sources, self.source[sizes])


def prefix_boundaries(sub: InducedSubgraph, order: np.ndarray) -> np.ndarray:
    """|dA_j| for every prefix A_j = order[:j], j = 1..V"""
    V = sub.n_vertices
    rank = np.empty(V, dtype=np.int64)
    rank[order] = np.arange(V)
    valid = sub.table >= 0
    neighbor_rank = np.where(valid, rank[np.where(valid, sub.table, 0)], V)
    earlier = (neighbor_rank < rank[:, None]).sum(axis=1)
    return np.cumsum(sub.degrees[order] - 2 * earlier[order])


def _require_connected(S: OccupancyGrid):
    if not is_connected(S):
        raise DisconnectedGraphError("conductance profiles need a connected occupied set")


def profile_exhaustive(S: OccupancyGrid, rmax: int = ENUMERATION_CAP,
                       cap: int = ENUMERATION_CAP) -> ConductanceProfile:
    """
    Exact phi(r) for r <= rmax by enumerating connected subsets.

    Some component of any A has a ratio no larger than that of A, so connected
    sets reach the infimum. Subsets are grown from their smallest vertex with
    exclusive neighborhoods, so each is visited once, and the boundary is
    updated by deg(w) - 2 |N(w) cap A| as a vertex w joins.
    """
    if rmax > cap:
        raise EnumerationCapError(f"rmax {rmax} exceeds enumeration cap {cap}")
    _require_connected(S)
    sub = induced_subgraph(S)
    limit = min(rmax, admissible_size(sub.n_vertices, S.d))
    table = _CandidateTable(sub, limit)
    if limit < 1:
        return table.build("exhaustive")
    nbrs = [frozenset(int(u) for u in row[row >= 0]) for row in sub.table]
    degrees = sub.degrees

    def extend(members: List[int], inside: set, boundary: int, extension: set, root: int, closed: frozenset):
        table.offer(members, boundary)
        if len(members) == limit:
            return
        extension = set(extension)
        while extension:
            w = extension.pop()
            joined = boundary + int(degrees[w]) - 2 * len(nbrs[w] & inside)
            fresh = {u for u in nbrs[w] if u > root and u not in closed}
            extend(members + [w], inside | {w}, joined, extension | fresh, root, closed | nbrs[w])

    for v in range(sub.n_vertices):
        extend([v], {v}, int(degrees[v]), {u for u in nbrs[v] if u > v}, v, nbrs[v] | {v})
    return table.build("exhaustive")


def _low_eigenvectors(S: OccupancyGrid, k: int) -> np.ndarray:
    """Walk eigenfunctions of the k largest nontrivial eigenvalues of the lazy kernel"""
    chain, _ = build_chain(S)
    V = chain.n_vertices
    k = max(1, min(k, V - 1))
    try:
        if V <= DENSE_LIMIT:
            _, vectors = linalg.eigh(chain.symmetric_kernel(), subset_by_index=[V - 1 - k, V - 2])
        else:
            root = sparse.diags(1.0 / np.sqrt(chain.degrees))
            kernel = 0.5 * sparse.identity(V) + 0.5 * root @ chain.subgraph.adjacency() @ root
            values, vectors = eigsh(kernel.tocsr(), k=k + 1, which="LA")
            vectors = vectors[:, np.argsort(values)[:-1]]
    except (linalg.LinAlgError, ArpackNoConvergence) as e:
        raise NumericalDegeneracyError(f"eigensolver failed: {e}") from e
    return vectors / np.sqrt(chain.degrees)[:, None]


def profile_sweep(S: OccupancyGrid, k: int = 4, axes: bool = True) -> ConductanceProfile:
    """
    Prefix cuts along the k leading nontrivial eigenvectors, in both orders.

    With axes=True the lattice coordinates are swept as well; on a torus the
    top eigenspace is degenerate and a solver may return any rotation of it,
    while the axis sweeps always include the slab cuts.
    """
    _require_connected(S)
    sub = induced_subgraph(S)
    table = _CandidateTable(sub, admissible_size(sub.n_vertices, S.d))
    keys = list(_low_eigenvectors(S, k).T)
    if axes:
        coords = S.coords(sub.cells.indices)
        keys.extend(coords[:, axis].astype(np.float64) for axis in range(S.d))
    sizes = np.arange(1, sub.n_vertices + 1)
    for key in keys:
        for order in (np.argsort(key, kind="stable"), np.argsort(-key, kind="stable")):
            table.offer_prefixes(order, sizes, prefix_boundaries(sub, order))
    return table.build("sweep")


def profile_balls(S: OccupancyGrid, radii: Optional[Sequence[int]] = None,
                  centers: Optional[Sequence[int]] = None) -> ConductanceProfile:
    """Candidates S cap B(x, rho) for vertices x and radii rho (l-infinity balls)"""
    _require_connected(S)
    sub = induced_subgraph(S)
    table = _CandidateTable(sub, admissible_size(sub.n_vertices, S.d))
    V = sub.n_vertices
    coords = S.coords(sub.cells.indices)
    side = S.side if S.periodic else None
    if radii is None:
        radii = range(0, (S.side // 2 if S.periodic else S.side) + 1)
    radii = np.asarray(sorted(radii), dtype=np.int64)
    if centers is None:
        local = np.unique(np.linspace(0, V - 1, min(V, BALL_CENTERS)).round().astype(np.int64))
    else:
        local = sub.local_ids(centers)
    for c in local:
        dist = linf_distance(coords, coords[c], side)
        order = np.argsort(dist, kind="stable")
        sizes = np.unique(np.searchsorted(dist[order], radii, side="right"))
        sizes = sizes[sizes > 0]
        boundaries = prefix_boundaries(sub, order)[sizes - 1]
        table.offer_prefixes(order, sizes, boundaries)
    return table.build("ball")


@dataclass(frozen=True)
class SetScore:
    size: int
    boundary: int
    ratio: float


def score_set(A: CellSet, S: OccupancyGrid) -> SetScore:
    """|A|, |dA| and |dA|/|A| recomputed from the edge boundary"""
    if not len(A):
        raise ValueError("cannot score the empty set")
    count = edge_boundary(A, S).count
    return SetScore(len(A), count, count / len(A))


@dataclass
class IsoCheckReport:
    """Smallest |dA| / (|A|^(1-1/d+1/d^2) N^(-1/d)) over the admissible candidates"""

    gamma_hat: float
    size: int
    boundary: int
    witness: Optional[CellSet]
    mu: float
    exponent: float
    from_complement: bool
    candidates: int
    method: str

    def to_dict(self) -> dict:
        return {
            "gamma_hat": self.gamma_hat, "size": self.size, "boundary": self.boundary,
            "witness": self.witness.to_list() if self.witness is not None else None,
            "mu": self.mu, "exponent": self.exponent, "from_complement": self.from_complement,
            "candidates": self.candidates, "method": self.method,
        }


def iso_exponent(d: int) -> float:
    return 1 - 1 / d + 1 / d ** 2


def check_iso_inequality(S: OccupancyGrid, candidates: Sequence[ConductanceProfile], mu: float,
                         complements: bool = True) -> IsoCheckReport:
    """
    gamma_hat over every candidate with |A| <= mu |R|.

    With complements=True each candidate A also stands for R minus A, which has
    the same boundary and size |R| - |A|.
    """
    if not 0 < mu < 1:
        raise ValueError(f"mu must lie in (0, 1), got {mu}")
    if not candidates:
        raise NoAdmissibleCandidateError("no candidate profiles supplied")
    V = S.popcount
    exponent = iso_exponent(S.d)
    scale = S.side ** (-1.0 / S.d)
    bound = mu * V

    best = None
    scored = 0
    for profile in candidates:
        for size, boundary in zip(profile.sizes, profile.boundaries):
            options = [(int(size), False)]
            if complements:
                options.append((V - int(size), True))
            for m, flipped in options:
                if not 1 <= m <= bound:
                    continue
                scored += 1
                gamma = float(boundary) / (m ** exponent * scale)
                if best is None or gamma < best[0]:
                    best = (gamma, m, int(boundary), profile, int(size), flipped)
    if best is None:
        raise NoAdmissibleCandidateError(f"no candidate has size <= {mu} |R| = {bound:.1f}")

    gamma, m, boundary, profile, size, flipped = best
    witness = profile.witness(size)
    if witness is not None and flipped:
        witness = S.occupied().difference(witness)
    return IsoCheckReport(gamma, m, boundary, witness, mu, exponent, flipped, scored, profile.method)


@dataclass(frozen=True)
class PowerLawProfile:
    """phi(r) = gamma N^(-1/d) r^(-(d-1)/d^2)"""

    gamma: float
    d: int
    N: int

    def value(self, r: float) -> float:
        return self.gamma * self.N ** (-1 / self.d) * r ** (-(self.d - 1) / self.d ** 2)

    def mp_integral(self, upper: float, lower: float = 1.0) -> float:
        if self.gamma <= 0:
            raise VanishingProfileError("power-law profile with gamma <= 0")
        power = 2 * (self.d - 1) / self.d ** 2
        return (self.gamma ** -2 * self.N ** (2 / self.d) * (self.d ** 2 / (2 * (self.d - 1)))
                * (upper ** power - lower ** power))


@dataclass(frozen=True)
class MorrisPeresBound:
    value: int
    integral: float
    constant: float
    upper: int


def morris_peres_bound(profile, cfg: TorusConfig, constant: float = 1.0) -> MorrisPeresBound:
    """ceil(C * integral_1^{32 d N^d} dr / (r phi(r)^2)) for a lower-bound profile"""
    if constant <= 0:
        raise ValueError(f"constant must be positive, got {constant}")
    upper = 32 * cfg.d * cfg.volume
    integral = profile.mp_integral(upper)
    return MorrisPeresBound(int(math.ceil(constant * integral)), integral, constant, upper)


def calibrate_mp_constant(integrals: Sequence[float], t_mix_values: Sequence[int]) -> float:
    """Smallest C with C * integral >= t_mix on every calibration instance"""
    if not integrals or len(integrals) != len(t_mix_values):
        raise ValueError("need matching, nonempty integral and t_mix lists")
    if min(integrals) <= 0:
        raise ValueError("integrals must be positive")
    return max(t / i for t, i in zip(t_mix_values, integrals))
