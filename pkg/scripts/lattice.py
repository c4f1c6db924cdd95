"""
Torus Lattice
Torus geometry, bit-packed occupancy grids, induced subgraphs, edge boundaries
and connectivity. Every other module works on top of these types.
"""

import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import sparse
from scipy.sparse import csgraph


# Largest torus we agree to address (cell indices stay well inside int64)
MAX_CELLS = 2 ** 40

GRID_MAGIC = b"RMG1"
# magic, d (u8), 3 reserved bytes, N (u32), popcount (u64)
GRID_HEADER = struct.Struct("<4sB3xIQ")


class IndexOutOfRange(IndexError):
    """Cell index outside the grid"""


class NotASubsetError(ValueError):
    """A cell set is not contained in the occupied cells of a grid"""


class MalformedBoxError(ValueError):
    """Box does not fit the grid it is applied to"""


class GridFormatError(ValueError):
    """Grid file is corrupt or not in RMG1 format"""


class TorusConfig(BaseModel):
    """Dimension d, side length N and walk-time density u of a torus"""

    model_config = ConfigDict(frozen=True)

    d: int
    N: int
    u: float = 1.0

    @field_validator("d")
    @classmethod
    def _check_dimension(cls, value):
        if value < 3:
            raise ValueError(f"dimension must be >= 3, got {value}")
        return value

    @field_validator("N")
    @classmethod
    def _check_side(cls, value):
        if value < 2:
            raise ValueError(f"side length must be >= 2, got {value}")
        return value

    @field_validator("u")
    @classmethod
    def _check_density(cls, value):
        if not value > 0 or not math.isfinite(value):
            raise ValueError(f"walk-time density must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def _check_addressing(self):
        if self.N ** self.d > MAX_CELLS:
            raise ValueError(f"torus with {self.N}^{self.d} cells exceeds addressing limit {MAX_CELLS}")
        return self

    @property
    def volume(self) -> int:
        return self.N ** self.d

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.N,) * self.d

    @property
    def walk_length(self) -> int:
        """floor(u * N^d), computed exactly"""
        return math.floor(Fraction(self.u) * self.volume)


class CellSet:
    """Strictly sorted, duplicate-free cell indices of a grid"""

    __slots__ = ("indices",)

    def __init__(self, indices=(), size: Optional[int] = None):
        arr = np.unique(np.asarray(indices, dtype=np.int64).ravel())
        if size is not None and len(arr) and (arr[0] < 0 or arr[-1] >= size):
            raise IndexOutOfRange(f"cell indices must lie in [0, {size})")
        arr.setflags(write=False)
        self.indices = arr

    @classmethod
    def from_mask(cls, mask: np.ndarray) -> "CellSet":
        return cls(np.flatnonzero(np.asarray(mask).ravel()))

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[int]:
        return (int(i) for i in self.indices)

    def __contains__(self, cell) -> bool:
        pos = np.searchsorted(self.indices, cell)
        return bool(pos < len(self.indices) and self.indices[pos] == cell)

    def __eq__(self, other) -> bool:
        if not isinstance(other, CellSet):
            return NotImplemented
        return np.array_equal(self.indices, other.indices)

    def __repr__(self) -> str:
        return f"CellSet({len(self)} cells)"

    def member_mask(self, values: np.ndarray) -> np.ndarray:
        """Vectorised membership test"""
        values = np.asarray(values, dtype=np.int64)
        if not len(self.indices):
            return np.zeros(values.shape, dtype=bool)
        pos = np.clip(np.searchsorted(self.indices, values), 0, len(self.indices) - 1)
        return self.indices[pos] == values

    def union(self, other: "CellSet") -> "CellSet":
        return CellSet(np.concatenate([self.indices, other.indices]))

    def difference(self, other: "CellSet") -> "CellSet":
        return CellSet(self.indices[~other.member_mask(self.indices)])

    def to_list(self) -> List[int]:
        return [int(i) for i in self.indices]


@dataclass(frozen=True)
class Box:
    """Cube anchor + [0, side)^d; wrap=True lives on the torus, wrap=False in Z^d"""

    anchor: Tuple[int, ...]
    side: int
    wrap: bool = False

    def __post_init__(self):
        if self.side < 1:
            raise MalformedBoxError(f"box side must be >= 1, got {self.side}")
        object.__setattr__(self, "anchor", tuple(int(a) for a in self.anchor))

    @classmethod
    def ball(cls, center: Sequence[int], radius: int) -> "Box":
        """Closed l-infinity ball B(center, radius) in Z^d"""
        radius = int(math.floor(radius))
        return cls(tuple(int(c) - radius for c in center), 2 * radius + 1, wrap=False)

    @property
    def d(self) -> int:
        return len(self.anchor)

    @property
    def volume(self) -> int:
        return self.side ** self.d

    def contains(self, other: "Box") -> bool:
        return all(
            a <= b and b + other.side <= a + self.side
            for a, b in zip(self.anchor, other.anchor)
        )

    def contains_points(self, coords: np.ndarray) -> np.ndarray:
        """Mask of Z^d points (rows of coords) inside the box"""
        coords = np.atleast_2d(coords)
        lo = np.asarray(self.anchor)
        return np.all((coords >= lo) & (coords < lo + self.side), axis=1)

    def shifted(self, offset: Sequence[int]) -> "Box":
        return Box(tuple(a + int(o) for a, o in zip(self.anchor, offset)), self.side, self.wrap)


class OccupancyGrid:
    """
    Immutable bit-per-cell indicator of a subset of a cube of side `side`.

    Periodic grids are subsets of the torus; non-periodic grids are windows of
    Z^d whose first cell sits at `origin`. Cells are indexed row-major over
    (x_1, ..., x_d).
    """

    def __init__(self, d: int, side: int, bits: np.ndarray, *, periodic: bool = True,
                 origin: Optional[Sequence[int]] = None, config: Optional[TorusConfig] = None,
                 popcount: Optional[int] = None):
        self.d = int(d)
        self.side = int(side)
        self.periodic = bool(periodic)
        self.origin = tuple(int(o) for o in origin) if origin is not None else (0,) * self.d
        self.config = config
        bits = np.ascontiguousarray(bits, dtype=np.uint8)
        if len(bits) != (self.size + 7) // 8:
            raise GridFormatError(f"expected {(self.size + 7) // 8} packed bytes, got {len(bits)}")
        bits.setflags(write=False)
        self.bits = bits
        mask = np.unpackbits(bits, count=self.size, bitorder="little").astype(bool)
        mask.setflags(write=False)
        self._flat = mask
        self.popcount = int(mask.sum())
        if popcount is not None and popcount != self.popcount:
            raise GridFormatError(f"popcount {popcount} does not match {self.popcount} set bits")

    # Construction

    @classmethod
    def from_mask(cls, mask: np.ndarray, *, periodic: bool = True, origin=None,
                  config: Optional[TorusConfig] = None) -> "OccupancyGrid":
        mask = np.asarray(mask, dtype=bool)
        side = mask.shape[0]
        if any(s != side for s in mask.shape):
            raise MalformedBoxError(f"occupancy mask must be a cube, got shape {mask.shape}")
        bits = np.packbits(mask.ravel(), bitorder="little")
        return cls(mask.ndim, side, bits, periodic=periodic, origin=origin, config=config)

    @classmethod
    def from_indices(cls, config: TorusConfig, indices) -> "OccupancyGrid":
        flat = np.zeros(config.volume, dtype=bool)
        idx = np.asarray(indices, dtype=np.int64).ravel()
        if len(idx) and (idx.min() < 0 or idx.max() >= config.volume):
            raise IndexOutOfRange(f"cell indices must lie in [0, {config.volume})")
        flat[idx] = True
        return cls.from_mask(flat.reshape(config.shape), config=config)

    @classmethod
    def empty(cls, config: TorusConfig) -> "OccupancyGrid":
        return cls.from_mask(np.zeros(config.shape, dtype=bool), config=config)

    @classmethod
    def full(cls, config: TorusConfig) -> "OccupancyGrid":
        return cls.from_mask(np.ones(config.shape, dtype=bool), config=config)

    # Views

    @property
    def shape(self) -> Tuple[int, ...]:
        return (self.side,) * self.d

    @property
    def size(self) -> int:
        return self.side ** self.d

    @property
    def flat_mask(self) -> np.ndarray:
        return self._flat

    @property
    def mask(self) -> np.ndarray:
        return self._flat.reshape(self.shape)

    def occupied(self) -> CellSet:
        return CellSet(np.flatnonzero(self._flat))

    def contains(self, cell: int) -> bool:
        if not 0 <= cell < self.size:
            raise IndexOutOfRange(f"cell {cell} outside grid of {self.size} cells")
        return bool(self._flat[cell])

    def coords(self, cells) -> np.ndarray:
        """Local coordinates (m, d) of flat cell indices"""
        cells = np.asarray(cells, dtype=np.int64)
        return np.stack(np.unravel_index(cells, self.shape), axis=-1)

    def global_coords(self, cells) -> np.ndarray:
        """Z^d coordinates (m, d) of flat cell indices"""
        return self.coords(cells) + np.asarray(self.origin, dtype=np.int64)

    def index_of(self, coords) -> np.ndarray:
        """Flat indices of local coordinates (wrapped when periodic)"""
        coords = np.atleast_2d(np.asarray(coords, dtype=np.int64))
        mode = "wrap" if self.periodic else "raise"
        return np.ravel_multi_index(tuple(coords.T), self.shape, mode=mode)

    def with_cells(self, cells) -> "OccupancyGrid":
        """Copy with extra occupied cells"""
        flat = self._flat.copy()
        flat[np.asarray(cells, dtype=np.int64)] = True
        return OccupancyGrid.from_mask(flat.reshape(self.shape), periodic=self.periodic,
                                       origin=self.origin, config=self.config)

    def translated(self, shift: Sequence[int]) -> "OccupancyGrid":
        """Periodic translation of the occupancy pattern"""
        rolled = np.roll(self.mask, tuple(int(s) for s in shift), axis=tuple(range(self.d)))
        return OccupancyGrid.from_mask(rolled, periodic=self.periodic, origin=self.origin,
                                       config=self.config)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (self.d == other.d and self.side == other.side and self.periodic == other.periodic
                and self.origin == other.origin and np.array_equal(self.bits, other.bits))

    def __repr__(self) -> str:
        kind = "torus" if self.periodic else f"window@{self.origin}"
        return f"OccupancyGrid(d={self.d}, side={self.side}, {kind}, popcount={self.popcount})"

    # Persistence

    def to_bytes(self) -> bytes:
        header = GRID_HEADER.pack(GRID_MAGIC, self.d, self.side, self.popcount)
        return header + self.bits.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes, u: float = 1.0) -> "OccupancyGrid":
        if len(data) < GRID_HEADER.size:
            raise GridFormatError("grid data shorter than header")
        magic, d, side, popcount = GRID_HEADER.unpack_from(data)
        if magic != GRID_MAGIC:
            raise GridFormatError(f"bad magic {magic!r}")
        config = TorusConfig(d=d, N=side, u=u)
        bits = np.frombuffer(data, dtype=np.uint8, offset=GRID_HEADER.size)
        return cls(d, side, bits.copy(), config=config, popcount=popcount)

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
        except OSError as e:
            raise OSError(f"failed to write grid file {path}: {e}") from e
        return path

    @classmethod
    def load(cls, path, u: float = 1.0) -> "OccupancyGrid":
        path = Path(path)
        try:
            data = path.read_bytes()
        except OSError as e:
            raise OSError(f"failed to read grid file {path}: {e}") from e
        return cls.from_bytes(data, u=u)


def neighbors(cell: int, cfg: TorusConfig) -> List[int]:
    """
    The 2d torus neighbors of a cell, ordered +e_1, -e_1, ..., +e_d, -e_d.

    For N = 2 the +1 and -1 neighbor along an axis coincide and both entries are
    returned; graph code uses neighbor_table, which keeps distinct neighbors only.
    """
    if not 0 <= cell < cfg.volume:
        raise IndexOutOfRange(f"cell {cell} outside torus of {cfg.volume} cells")
    coords = np.array(np.unravel_index(cell, cfg.shape), dtype=np.int64)
    result = []
    for axis in range(cfg.d):
        for step in (1, -1):
            moved = coords.copy()
            moved[axis] = (moved[axis] + step) % cfg.N
            result.append(int(np.ravel_multi_index(tuple(moved), cfg.shape)))
    return result


def neighbor_table(grid: OccupancyGrid, cells) -> np.ndarray:
    """
    Flat indices (m, 2d) of the distinct lattice neighbors of each cell.

    Entries are -1 where the neighbor falls outside a non-periodic window or
    duplicates another entry (side-2 torus) or is the cell itself (side-1 torus).
    Occupancy is not consulted.
    """
    cells = np.asarray(cells, dtype=np.int64).ravel()
    coords = grid.coords(cells)
    table = np.full((len(cells), 2 * grid.d), -1, dtype=np.int64)
    for axis in range(grid.d):
        for col, step in ((2 * axis, 1), (2 * axis + 1, -1)):
            if grid.periodic and (grid.side == 1 or (grid.side == 2 and step == -1)):
                continue
            moved = coords.copy()
            moved[:, axis] += step
            if grid.periodic:
                moved[:, axis] %= grid.side
                ok = np.ones(len(cells), dtype=bool)
            else:
                ok = (moved[:, axis] >= 0) & (moved[:, axis] < grid.side)
            if ok.any():
                table[ok, col] = np.ravel_multi_index(tuple(moved[ok].T), grid.shape)
    return table


@dataclass(frozen=True)
class InducedSubgraph:
    """Subgraph of the lattice induced by the occupied cells of a grid"""

    grid: OccupancyGrid
    cells: CellSet
    table: np.ndarray  # (V, 2d) local vertex ids of neighbors, -1 where absent

    @property
    def n_vertices(self) -> int:
        return len(self.cells)

    @property
    def degrees(self) -> np.ndarray:
        return (self.table >= 0).sum(axis=1)

    def edges(self) -> np.ndarray:
        """Undirected edges (E, 2) as local ids with i < j, sorted"""
        rows, cols = np.nonzero(self.table >= 0)
        j = self.table[rows, cols]
        keep = rows < j
        pairs = np.column_stack([rows[keep], j[keep]])
        if len(pairs):
            pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
        return pairs

    def adjacency(self) -> sparse.csr_matrix:
        rows, cols = np.nonzero(self.table >= 0)
        data = np.ones(len(rows), dtype=np.float64)
        n = self.n_vertices
        return sparse.csr_matrix((data, (rows, self.table[rows, cols])), shape=(n, n))

    def local_ids(self, cells) -> np.ndarray:
        cells = np.asarray(cells, dtype=np.int64).ravel()
        present = self.cells.member_mask(cells)
        if not present.all():
            raise NotASubsetError(f"{int((~present).sum())} cells are not occupied")
        return np.searchsorted(self.cells.indices, cells)


def induced_subgraph(grid: OccupancyGrid) -> InducedSubgraph:
    cells = grid.occupied()
    raw = neighbor_table(grid, cells.indices)
    valid = raw >= 0
    occupied = np.zeros(raw.shape, dtype=bool)
    occupied[valid] = grid.flat_mask[raw[valid]]
    table = np.full(raw.shape, -1, dtype=np.int64)
    table[occupied] = np.searchsorted(cells.indices, raw[occupied])
    table.setflags(write=False)
    return InducedSubgraph(grid=grid, cells=cells, table=table)


@dataclass(frozen=True)
class BoundaryEdges:
    """Edge boundary of A in S: pairs (x in A, y in S minus A)"""

    count: int
    edges: np.ndarray


def edge_boundary(A: CellSet, S: OccupancyGrid) -> BoundaryEdges:
    """All edges of S with exactly one endpoint in A"""
    a = A.indices
    if len(a) and (a[0] < 0 or a[-1] >= S.size or not S.flat_mask[a].all()):
        raise NotASubsetError("boundary set must be contained in the occupied cells")
    table = neighbor_table(S, a)
    valid = table >= 0
    safe = np.where(valid, table, 0)
    hit = valid & S.flat_mask[safe] & ~A.member_mask(safe)
    rows, cols = np.nonzero(hit)
    edges = np.column_stack([a[rows], table[rows, cols]]).astype(np.int64)
    if len(edges):
        edges = edges[np.lexsort((edges[:, 1], edges[:, 0]))]
    return BoundaryEdges(count=len(edges), edges=edges.reshape(-1, 2))


def component_labels(S: OccupancyGrid) -> Tuple[int, np.ndarray, CellSet]:
    """Number of components, per-vertex labels and the occupied cells"""
    sub = induced_subgraph(S)
    if sub.n_vertices == 0:
        return 0, np.zeros(0, dtype=np.int64), sub.cells
    n, labels = csgraph.connected_components(sub.adjacency(), directed=False)
    return int(n), labels, sub.cells


def connected_components(S: OccupancyGrid) -> List[CellSet]:
    """Maximal l1-connected parts of the occupied cells, ordered by smallest cell"""
    n, labels, cells = component_labels(S)
    parts = [CellSet(cells.indices[labels == k]) for k in range(n)]
    parts.sort(key=lambda part: part.indices[0])
    return parts


def is_connected(S: OccupancyGrid) -> bool:
    return component_labels(S)[0] == 1


def restrict(S: OccupancyGrid, box: Box) -> OccupancyGrid:
    """
    Occupancy of S inside a box, as a grid over the box window.

    A periodic S is extended periodically over Z^d (canonical embedding of
    [0, N)^d), so wrap=False boxes may sit anywhere and may exceed the torus.
    The result is periodic only for a wrap box covering the whole torus.
    """
    if box.d != S.d:
        raise MalformedBoxError(f"box dimension {box.d} does not match grid dimension {S.d}")
    if box.wrap and (not S.periodic or box.side > S.side):
        raise MalformedBoxError("wrap boxes must fit on a periodic grid")
    axes = []
    for a, o in zip(box.anchor, S.origin):
        span = np.arange(a, a + box.side, dtype=np.int64)
        if S.periodic:
            axes.append(span % S.side)
        else:
            local = span - o
            if local[0] < 0 or local[-1] >= S.side:
                raise MalformedBoxError(f"box {box} leaves the window of {S}")
            axes.append(local)
    window = S.mask[np.ix_(*axes)]
    periodic = box.wrap and box.side == S.side
    return OccupancyGrid.from_mask(window, periodic=periodic, origin=box.anchor, config=S.config)


def linf_distance(a: np.ndarray, b: np.ndarray, side: Optional[int] = None) -> np.ndarray:
    """l-infinity distance between coordinate rows, torus metric when side is given"""
    diff = np.abs(np.atleast_2d(a) - np.atleast_2d(b))
    if side is not None:
        diff = np.minimum(diff, side - diff)
    return diff.max(axis=1)


def box_counts(mask: np.ndarray, side: int) -> np.ndarray:
    """Occupied-cell counts of every side^d sub-box fully inside a window, by anchor"""
    d = mask.ndim
    total = np.pad(mask.astype(np.int64), [(1, 0)] * d)
    for axis in range(d):
        total = np.cumsum(total, axis=axis)
    counts = np.zeros(tuple(n - side + 1 for n in mask.shape), dtype=np.int64)
    if any(n <= 0 for n in counts.shape):
        return counts
    # Inclusion-exclusion over the 2^d corners of each box
    for corner in range(2 ** d):
        sl = []
        sign = 1
        for axis in range(d):
            if corner >> axis & 1:
                sl.append(slice(side, None))
            else:
                sl.append(slice(0, total.shape[axis] - side))
                sign = -sign
        counts += sign * total[tuple(sl)]
    return counts
