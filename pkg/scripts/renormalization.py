"""
Renormalization
Multiscale good/bad classification of an occupied set: the scale ladder,
level-0 predicates, propagation of badness, window selection, the structural
assumptions on a window, the enlarged cluster and bad-vertex density.

Level-n vertices live on a shifted lattice base + L_n Z^d; a vertex x stands
for the box x + [0, L_n)^d. Arrays of a level are indexed by the integer k with
x = base + k L_n, offset by `lo`.
"""

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy import ndimage
from tqdm import tqdm

from interlacements import eta
from lattice import Box, OccupancyGrid, TorusConfig, box_counts, is_connected, restrict
from walk_sampler import GreenEstimate, RngSeed, sample_range


INT64_MAX = 2 ** 63 - 1
WINDOW_ALPHA = Fraction(6, 7)
EPSILON_CHOICES = (0.2, 0.1, 0.05)


class LadderOverflowError(OverflowError):
    """Ladder scale beyond 64-bit range at the requested level"""


class WindowTooSmallError(ValueError):
    """Torus too small for any valid renormalization level"""


class WindowUnderflowError(ValueError):
    """Data window holds no classifiable vertex"""


class ScaleConstraintError(ValueError):
    """Box or window larger than the allowed fraction of the torus"""


class EpsilonCalibrationError(ValueError):
    """No candidate epsilon satisfies eta1 <= eta2 < 2 eta1"""


class DisconnectedClusterError(RuntimeError):
    """Enlarged cluster split although assumptions (b) and (c) hold"""


# Scale ladder

@dataclass(frozen=True)
class ScaleLadder:
    """l_n = lambda^2 4^(n^2), r_n = lambda 2^(n^2), L_(n+1) = l_n L_n"""

    lam: int
    L0: int
    max_level: int
    l: Tuple[int, ...]
    r: Tuple[int, ...]
    L: Tuple[int, ...]

    @property
    def degenerate(self) -> bool:
        """Some l_n equals 1, so consecutive levels share a scale"""
        return any(value == 1 for value in self.l)

    def scale(self, n: int) -> int:
        """L_n as an exact integer at any level"""
        if n <= self.max_level:
            return self.L[n]
        value = self.L[-1]
        for k in range(self.max_level, n):
            value *= self.lam ** 2 * 4 ** (k * k)
        return value

    def scale_sum(self) -> float:
        """sum over the ladder of r_j / l_j"""
        return float(sum(Fraction(r, l) for r, l in zip(self.r, self.l)))

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "L0": self.L0, "l": list(self.l), "r": list(self.r),
                "L": list(self.L), "degenerate": self.degenerate, "scale_sum": self.scale_sum()}


def build_ladder(lam: int, L0: int, max_level: int) -> ScaleLadder:
    if lam < 1 or L0 < 1:
        raise ValueError(f"lambda and L0 must be >= 1, got lambda={lam}, L0={L0}")
    if max_level < 0:
        raise ValueError("max_level must be >= 0")
    l, r, L = [], [], [L0]
    for n in range(max_level):
        l.append(lam ** 2 * 4 ** (n * n))
        r.append(lam * 2 ** (n * n))
        L.append(l[-1] * L[-1])
    if L[-1] > INT64_MAX:
        level = next(n for n, value in enumerate(L) if value > INT64_MAX)
        raise LadderOverflowError(f"L_{level} exceeds the 64-bit range")
    return ScaleLadder(lam, L0, max_level, tuple(l), tuple(r), tuple(L))


# Density thresholds

class DensityParams(BaseModel):
    """eta1 = (3/4) eta(u(1-eps)), eta2 = (5/4) eta(u(1+eps))"""

    model_config = ConfigDict(frozen=True)

    eta1: float
    eta2: float
    u: Optional[float] = None
    epsilon: Optional[float] = None
    g00: Optional[float] = None
    g00_stderr: Optional[float] = None

    @model_validator(mode="after")
    def _check_thresholds(self):
        if not 0 < self.eta1 < 1:
            raise ValueError(f"eta1 must lie in (0, 1), got {self.eta1}")
        if not self.eta1 <= self.eta2 < 2 * self.eta1:
            raise ValueError(f"need eta1 <= eta2 < 2 eta1, got eta1={self.eta1}, eta2={self.eta2}")
        return self

    @classmethod
    def for_level(cls, u: float, epsilon: float, g00: float, g00_stderr: float = 0.0) -> "DensityParams":
        return cls(eta1=0.75 * eta(u * (1 - epsilon), g00), eta2=1.25 * eta(u * (1 + epsilon), g00),
                   u=u, epsilon=epsilon, g00=g00, g00_stderr=g00_stderr)

    @classmethod
    def from_green(cls, u: float, green: GreenEstimate,
                   choices: Sequence[float] = EPSILON_CHOICES) -> "DensityParams":
        """Largest epsilon among the choices with eta2 < 2 eta1 at the measured g(0,0)"""
        if not green.agrees():
            raise EpsilonCalibrationError(
                f"g(0,0) estimators disagree ({green.value:.4f} vs {green.escape_value:.4f})")
        for epsilon in sorted(choices, reverse=True):
            try:
                return cls.for_level(u, epsilon, green.value, green.stderr)
            except ValueError:
                continue
        raise EpsilonCalibrationError(f"no epsilon in {tuple(choices)} satisfies eta2 < 2 eta1 at u={u}")

    def thresholds(self, L0: int, d: int) -> Tuple[int, int]:
        """(smallest good component size, largest good box count); ties count as bad"""
        volume = L0 ** d
        min_component = math.floor(Fraction(self.eta1) * volume) + 1
        max_count = math.ceil(Fraction(self.eta2) * volume) - 1
        return min_component, max_count


# Good/bad maps

@dataclass
class GoodBadLevel:
    """(na)/(nb) badness of the level-n vertices covered by a window"""

    n: int
    L: int
    lo: Tuple[int, ...]
    bad_a: np.ndarray
    bad_b: np.ndarray
    known_a: np.ndarray
    known_b: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.bad_a.shape

    def position(self, index: Sequence[int]) -> Optional[Tuple[int, ...]]:
        pos = tuple(int(k) - lo for k, lo in zip(index, self.lo))
        if all(0 <= p < m for p, m in zip(pos, self.shape)):
            return pos
        return None

    def status(self, index: Sequence[int]) -> Optional[bool]:
        """True if n-bad, False if n-good, None if unknown"""
        pos = self.position(index)
        if pos is None or not (self.known_a[pos] and self.known_b[pos]):
            return None
        return bool(self.bad_a[pos] or self.bad_b[pos])

    def bad_indices(self, kind: str = "any") -> np.ndarray:
        if kind == "a":
            mask = self.bad_a & self.known_a
        elif kind == "b":
            mask = self.bad_b & self.known_b
        else:
            mask = (self.bad_a & self.known_a) | (self.bad_b & self.known_b)
        return np.argwhere(mask) + np.asarray(self.lo, dtype=np.int64)


@dataclass
class GoodBadMap:
    """Good/bad levels 0..s over one window, on the lattice base + L_n Z^d"""

    base: Tuple[int, ...]
    levels: List[GoodBadLevel]

    @classmethod
    def from_level0(cls, bad_a: np.ndarray, bad_b: np.ndarray, L0: int,
                    base: Optional[Sequence[int]] = None, lo: Optional[Sequence[int]] = None) -> "GoodBadMap":
        """Map from explicit level-0 arrays, every vertex known"""
        bad_a = np.asarray(bad_a, dtype=bool)
        bad_b = np.asarray(bad_b, dtype=bool)
        d = bad_a.ndim
        level = GoodBadLevel(0, L0, tuple(lo) if lo is not None else (0,) * d, bad_a, bad_b,
                             np.ones_like(bad_a), np.ones_like(bad_b))
        return cls(tuple(base) if base is not None else (0,) * d, [level])

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def level(self, n: int) -> GoodBadLevel:
        return self.levels[n]

    def vertex(self, n: int, index: Sequence[int]) -> Tuple[int, ...]:
        L = self.levels[n].L
        return tuple(b + int(k) * L for b, k in zip(self.base, index))

    def to_dict(self) -> dict:
        rows = []
        for level in self.levels:
            rows.append({
                "n": level.n, "L": level.L, "vertices": int(np.prod(level.shape)),
                "unknown": int((~(level.known_a & level.known_b)).sum()),
                "bad_a": [list(self.vertex(level.n, k)) for k in level.bad_indices("a")],
                "bad_b": [list(self.vertex(level.n, k)) for k in level.bad_indices("b")],
            })
        return {"base": list(self.base), "levels": rows}


_STRUCTURES: Dict[int, np.ndarray] = {}


def _label(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """Nearest-neighbor components of a boolean array"""
    d = mask.ndim
    if d not in _STRUCTURES:
        _STRUCTURES[d] = ndimage.generate_binary_structure(d, 1)
    return ndimage.label(mask, structure=_STRUCTURES[d])


def _data_window(S: OccupancyGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Occupancy array and Z^d origin of a grid read as a window"""
    return S.mask, np.asarray(S.origin, dtype=np.int64)


def classify_level0(S: OccupancyGrid, ladder: ScaleLadder, params: DensityParams,
                    base: Optional[Sequence[int]] = None) -> GoodBadMap:
    """
    (0a)/(0b) status of every G_0 vertex whose dependencies lie inside the window.

    x is (0b)-good when |S cap (x + [0, L0)^d)| stays under the eta2 threshold.
    x is (0a)-good when some component C_x of S cap (x + [0, L0)^d) above the
    eta1 threshold is joined, inside the union of the two boxes, to some such
    component C_y of each of its 2d nearest G_0 neighbors y. Any qualifying
    component may serve, so inserting cells never turns a good vertex bad.
    A periodic grid is read as the window [0, N)^d without wrap-around.
    """
    data, origin = _data_window(S)
    d, L0 = S.d, ladder.L0
    base = np.asarray(base if base is not None else origin, dtype=np.int64)
    min_component, max_count = params.thresholds(L0, d)

    # G_0 vertices with their box inside the window
    first = -((base - origin) // L0)
    last = (origin + np.asarray(data.shape) - base) // L0 - 1
    counts = last - first + 1
    if (counts < 1).any():
        raise WindowUnderflowError(f"window of side {S.side} holds no complete L0 = {L0} box")
    start = base + first * L0 - origin
    crop = data[tuple(slice(s, s + c * L0) for s, c in zip(start, counts))]

    shape = []
    for c in counts:
        shape += [int(c), L0]
    box_totals = crop.reshape(shape).sum(axis=tuple(range(1, 2 * d, 2)))
    bad_b = box_totals > max_count

    # one representative cell per component of at least min_component cells
    candidates: Dict[Tuple[int, ...], List[Tuple[int, ...]]] = {}
    for j in itertools.product(*(range(int(c)) for c in counts)):
        view = crop[tuple(slice(k * L0, (k + 1) * L0) for k in j)]
        labels, n = _label(view)
        reps = []
        if n:
            flat = labels.ravel()
            sizes = np.bincount(flat)[1:]
            for label in np.flatnonzero(sizes >= min_component) + 1:
                reps.append(tuple(int(p) for p in np.unravel_index(int(np.argmax(flat == label)), view.shape)))
        candidates[j] = reps

    joined: Dict[Tuple[Tuple[int, ...], int], Tuple[List[int], List[int]]] = {}

    def union_labels(j: Tuple[int, ...], axis: int) -> Tuple[List[int], List[int]]:
        """Union-of-boxes labels of the candidates of box j and of box j + e_axis"""
        key = (j, axis)
        if key not in joined:
            lo = [k * L0 for k in j]
            hi = [(k + 1) * L0 for k in j]
            hi[axis] += L0
            labels, _ = _label(crop[tuple(slice(a, b) for a, b in zip(lo, hi))])
            up = tuple(k + (a == axis) for a, k in enumerate(j))
            shift = tuple(L0 * (a == axis) for a in range(d))
            lower = [int(labels[p]) for p in candidates[j]]
            upper = [int(labels[tuple(c + s for c, s in zip(p, shift))]) for p in candidates[up]]
            joined[key] = (lower, upper)
        return joined[key]

    def qualifies(j: Tuple[int, ...], i: int) -> bool:
        """Candidate i of box j meets some candidate of each of the 2d neighboring boxes"""
        for axis in range(d):
            lower, upper = union_labels(j, axis)
            if lower[i] not in upper:
                return False
            lower, upper = union_labels(tuple(k - (a == axis) for a, k in enumerate(j)), axis)
            if upper[i] not in lower:
                return False
        return True

    known_a = np.zeros(tuple(counts), dtype=bool)
    known_a[tuple(slice(1, int(c) - 1) for c in counts)] = True
    bad_a = np.zeros(tuple(counts), dtype=bool)
    for j in map(tuple, np.argwhere(known_a)):
        bad_a[j] = not any(qualifies(j, i) for i in range(len(candidates[j])))

    level = GoodBadLevel(0, L0, tuple(int(k) for k in first), bad_a, bad_b, known_a,
                         np.ones(tuple(counts), dtype=bool))
    return GoodBadMap(tuple(int(b) for b in base), [level])


def _blocks(arr: np.ndarray, start: Sequence[int], count: Sequence[int], l: int) -> np.ndarray:
    """Children of each parent as a trailing axis of length l^d"""
    d = arr.ndim
    sub = arr[tuple(slice(s, s + c * l) for s, c in zip(start, count))]
    shape = []
    for c in count:
        shape += [int(c), l]
    perm = list(range(0, 2 * d, 2)) + list(range(1, 2 * d, 2))
    return sub.reshape(shape).transpose(perm).reshape(tuple(int(c) for c in count) + (l ** d,))


def _spread(bad: np.ndarray, offsets: np.ndarray, l: int) -> np.ndarray:
    """l-infinity diameter (in child index units) of the bad children of each parent"""
    widest = np.full(bad.shape[:-1], -1, dtype=np.int64)
    for axis in range(offsets.shape[1]):
        top = np.where(bad, offsets[:, axis], -1).max(axis=-1)
        bottom = np.where(bad, offsets[:, axis], l).min(axis=-1)
        widest = np.maximum(widest, top - bottom)
    return widest


def propagate_badness(level0: GoodBadMap, ladder: ScaleLadder, s: int) -> GoodBadMap:
    """
    Levels 1..s from level 0.

    A level-n vertex is (na)-bad when its box holds two (n-1)a-bad vertices at
    l-infinity distance >= r_(n-1) L_(n-1), and likewise for b. It is known when
    all of its children are known.
    """
    if s > ladder.max_level:
        raise ValueError(f"level {s} beyond ladder depth {ladder.max_level}")
    levels = [level0.levels[0]]
    for n in range(1, s + 1):
        child = levels[-1]
        l, r = ladder.l[n - 1], ladder.r[n - 1]
        d = child.bad_a.ndim
        first = np.array([-(-lo // l) for lo in child.lo], dtype=np.int64)
        last = np.array([(lo + m) // l - 1 for lo, m in zip(child.lo, child.shape)], dtype=np.int64)
        count = np.maximum(last - first + 1, 0)
        start = first * l - np.asarray(child.lo, dtype=np.int64)
        if (count == 0).any():
            empty = np.zeros(tuple(count), dtype=bool)
            levels.append(GoodBadLevel(n, ladder.L[n], tuple(int(k) for k in first),
                                       empty, empty.copy(), empty.copy(), empty.copy()))
            continue
        offsets = np.stack(np.unravel_index(np.arange(l ** d), (l,) * d), axis=1)
        result = {}
        for kind, bad, known in (("a", child.bad_a, child.known_a), ("b", child.bad_b, child.known_b)):
            bad_blocks = _blocks(bad & known, start, count, l)
            result[kind] = (_spread(bad_blocks, offsets, l) >= r,
                            _blocks(known, start, count, l).all(axis=-1))
        levels.append(GoodBadLevel(n, ladder.L[n], tuple(int(k) for k in first),
                                   result["a"][0], result["b"][0], result["a"][1], result["b"][1]))
    return GoodBadMap(level0.base, levels)


# Windows

@dataclass(frozen=True)
class SymbolicTorus:
    """Dimension and side of a torus used only for window arithmetic"""

    d: int
    N: int


@dataclass(frozen=True)
class RenormWindow:
    """Level s, multiplicity K and anchor of the core box anchor + [0, K L_s)^d"""

    s: int
    K: int
    L_s: int
    anchor: Tuple[int, ...]
    desk_scale: bool = False

    @classmethod
    def shallow(cls, ladder: ScaleLadder, K: int, anchor: Sequence[int], s: int = 0) -> "RenormWindow":
        """Shallow window with a free K, for desk-scale experiments"""
        if K < 1:
            raise ValueError(f"K must be >= 1, got {K}")
        return cls(s, K, ladder.scale(s), tuple(int(a) for a in anchor), desk_scale=True)

    @property
    def d(self) -> int:
        return len(self.anchor)

    @property
    def core_side(self) -> int:
        return self.K * self.L_s

    def core_box(self) -> Box:
        return Box(self.anchor, self.core_side)

    def region_box(self) -> Box:
        """anchor + [-2 L_s, (K + 2) L_s)^d"""
        return Box(tuple(a - 2 * self.L_s for a in self.anchor), (self.K + 4) * self.L_s)

    def to_dict(self) -> dict:
        return {"s": self.s, "K": self.K, "L_s": self.L_s, "anchor": list(self.anchor),
                "shallow": self.desk_scale}


def select_window(cfg: Union[TorusConfig, SymbolicTorus], ladder: ScaleLadder,
                  anchor: Optional[Sequence[int]] = None) -> RenormWindow:
    """
    s = max{s' : L_s'^(d^3+1) <= N/7} and K = min{K' : K' L_s >= N/7}.

    Checks K >= L_s^(d^3) and (K + 4) L_s <= 6N/7 in exact integers.
    """
    d, N = cfg.d, cfg.N
    power = d ** 3 + 1
    if 7 * ladder.L0 ** power > N:
        raise WindowTooSmallError(f"N = {N} is below 7 L0^{power} = {7 * ladder.L0 ** power}")
    s = 0
    while 7 * ladder.scale(s + 1) ** power <= N:
        s += 1
    L_s = ladder.scale(s)
    K = -(-N // (7 * L_s))
    if K < L_s ** (d ** 3):
        raise ScaleConstraintError(f"K = {K} is below L_s^{d ** 3}")
    if 7 * (K + 4) * L_s > 6 * N:
        raise ScaleConstraintError(f"(K + 4) L_s = {(K + 4) * L_s} exceeds 6N/7")
    return RenormWindow(s, K, L_s, tuple(anchor) if anchor is not None else (0,) * d)


@dataclass(frozen=True)
class SmallSetCheck:
    """Sets of size up to L_s^(d(d+1)) have |A|^e ((K+4) L_s)^(-1/d) <= 1"""

    holds: bool
    exponent: Fraction
    scale_power: int
    budget: int


def small_set_check(window: RenormWindow, d: int) -> SmallSetCheck:
    """
    |A|^(1-1/d+1/d^2) <= ((K+4) L_s)^(1/d) for every |A| <= L_s^(d(d+1)).

    The left side peaks at L_s^(d(d+1)(1-1/d+1/d^2)) = L_s^((d^3+1)/d), so the
    claim reduces to L_s^(d^3) <= K + 4.
    """
    exponent = d * (d + 1) * (1 - Fraction(1, d) + Fraction(1, d * d))
    if exponent != Fraction(d ** 3 + 1, d):
        raise ArithmeticError(f"exponent {exponent} differs from (d^3+1)/d")
    scale_power = window.L_s ** (d ** 3)
    return SmallSetCheck(scale_power <= window.K + 4, exponent, scale_power, window.K + 4)


def failure_bound(window: RenormWindow, d: int) -> float:
    """(K L_s)^d 2^(-2^s): union bound on an s-bad vertex among the core boxes"""
    log2 = d * math.log2(window.K * window.L_s) - 2 ** window.s
    return 2.0 ** log2 if log2 > -1074 else 0.0


def covering_anchors(cfg: Union[TorusConfig, SymbolicTorus], window: RenormWindow) -> List[Tuple[int, ...]]:
    """The 7^d anchors floor(j N / 7), j = 0..6 per axis"""
    steps = [j * cfg.N // 7 for j in range(7)]
    return list(itertools.product(steps, repeat=cfg.d))


def covers_torus(cfg: Union[TorusConfig, SymbolicTorus], window: RenormWindow,
                 anchors: Sequence[Sequence[int]]) -> bool:
    """Whether the core boxes at the anchors cover every torus cell"""
    side = window.core_side
    if side >= cfg.N:
        return len(anchors) > 0
    per_axis = [sorted({int(a[axis]) % cfg.N for a in anchors}) for axis in range(cfg.d)]
    if len(anchors) == int(np.prod([len(p) for p in per_axis])):
        return all(_axis_covered(p, side, cfg.N) for p in per_axis)
    covered = np.zeros((cfg.N,) * cfg.d, dtype=bool)
    for a in anchors:
        covered[np.ix_(*[(np.arange(side) + int(x)) % cfg.N for x in a])] = True
    return bool(covered.all())


def _axis_covered(starts: Sequence[int], side: int, N: int) -> bool:
    hit = np.zeros(N, dtype=bool)
    for a in starts:
        hit[(np.arange(side) + a) % N] = True
    return bool(hit.all())


# Assumptions and the enlarged cluster

@dataclass
class AssumptionReport:
    """Structural assumptions on a window, with witnesses on failure"""

    a_holds: bool
    a_violations: List[Tuple[int, ...]]
    a_unknown: int
    b_holds: bool
    b_pair: Optional[Tuple[Tuple[int, ...], Tuple[int, ...]]]
    c_holds: bool
    c_empty_box: Optional[Tuple[int, ...]]
    core_density: float

    @property
    def all_hold(self) -> bool:
        return self.a_holds and self.b_holds and self.c_holds

    def to_dict(self) -> dict:
        return {
            "a": self.a_holds, "a_violations": [list(v) for v in self.a_violations],
            "a_unknown": self.a_unknown, "b": self.b_holds,
            "b_pair": [list(p) for p in self.b_pair] if self.b_pair else None,
            "c": self.c_holds, "c_empty_box": list(self.c_empty_box) if self.c_empty_box else None,
            "core_density": self.core_density,
        }


def _window_data(S: OccupancyGrid, window: RenormWindow, margin: int) -> OccupancyGrid:
    """S over anchor + [-margin, K L_s + margin)^d, periodically extended"""
    box = Box(tuple(a - margin for a in window.anchor), window.core_side + 2 * margin)
    return restrict(S, box)


def _local_component(mask: np.ndarray, center: np.ndarray, radius: int) -> Tuple[np.ndarray, Tuple[slice, ...]]:
    """Component of center in mask cap B(center, radius), as a mask over the ball"""
    sl = tuple(slice(int(c) - radius, int(c) + radius + 1) for c in center)
    labels, _ = _label(mask[sl])
    return labels == labels[(radius,) * mask.ndim], sl


def check_assumptions(S: OccupancyGrid, window: RenormWindow, ladder: ScaleLadder,
                      params: DensityParams, max_witnesses: int = 10) -> AssumptionReport:
    L_s, K, d = window.L_s, window.K, window.d
    margin = 2 * L_s + ladder.L0
    data = _window_data(S, window, margin)
    mask = data.mask

    # (a) every level-s vertex of anchor + [-2 L_s, (K + 2) L_s)^d is s-good
    top = propagate_badness(classify_level0(data, ladder, params, base=window.anchor), ladder, window.s)
    top = top.level(window.s)
    violations, unknown = [], 0
    for k in itertools.product(range(-2, K + 2), repeat=d):
        status = top.status(k)
        if status is None:
            unknown += 1
        elif status:
            if len(violations) < max_witnesses:
                violations.append(tuple(a + i * L_s for a, i in zip(window.anchor, k)))
    a_holds = not violations and unknown == 0

    core = tuple(slice(margin, margin + window.core_side) for _ in range(d))
    core_mask = mask[core]
    offset = np.asarray(window.anchor, dtype=np.int64) - margin

    # (b) points of the core within L_s of each other connect inside S cap B(x, 2 L_s)
    b_pair = None
    for x in np.argwhere(core_mask) + margin:
        component, sl = _local_component(mask, x, 2 * L_s)
        inner = tuple(slice(L_s, 3 * L_s + 1) for _ in range(d))
        near = mask[sl][inner] & ~component[inner]
        near_global = np.argwhere(near) + x - L_s
        in_core = np.all((near_global >= margin) & (near_global < margin + window.core_side), axis=1)
        if in_core.any():
            y = near_global[np.argmax(in_core)]
            b_pair = (tuple(int(v) for v in x + offset), tuple(int(v) for v in y + offset))
            break

    # (c) every L_s-box inside the core meets S
    counts = box_counts(core_mask, L_s)
    c_empty = None
    if counts.size and counts.min() == 0:
        idx = np.unravel_index(int(np.argmin(counts)), counts.shape)
        c_empty = tuple(int(a + i) for a, i in zip(window.anchor, idx))

    return AssumptionReport(
        a_holds=a_holds, a_violations=violations, a_unknown=unknown,
        b_holds=b_pair is None, b_pair=b_pair, c_holds=c_empty is None, c_empty_box=c_empty,
        core_density=float(core_mask.mean()),
    )


@dataclass
class EnlargedCluster:
    """Cells of S joined to the core inside S cap B(z, 2 L_s) for some core cell z"""

    grid: OccupancyGrid
    window: RenormWindow
    core_count: int
    connected: bool

    @property
    def size(self) -> int:
        return self.grid.popcount

    def coordinates(self) -> np.ndarray:
        return self.grid.global_coords(self.grid.occupied().indices)

    def to_dict(self) -> dict:
        return {"size": self.size, "core_count": self.core_count, "connected": self.connected,
                "window": self.window.to_dict()}


def enlarged_cluster(S: OccupancyGrid, window: RenormWindow,
                     assumptions: Optional[AssumptionReport] = None) -> EnlargedCluster:
    """
    Union of the components of S cap B(z, 2 L_s) holding z, over core cells z.

    With a report where (b) and (c) hold, the cluster must come out connected:
    every sliding L_s-box of the core meets S, so two adjacent boxes link any
    split of the core cells by a pair within L_s, and (b) joins that pair
    inside the cluster. A split cluster then raises DisconnectedClusterError.
    """
    L_s, d = window.L_s, window.d
    margin = 2 * L_s
    data = _window_data(S, window, margin)
    mask = data.mask
    members = np.zeros(mask.shape, dtype=bool)
    core = tuple(slice(margin, margin + window.core_side) for _ in range(d))
    seeds = np.argwhere(mask[core]) + margin
    for z in seeds:
        component, sl = _local_component(mask, z, margin)
        members[sl] |= component
    grid = OccupancyGrid.from_mask(members, periodic=False, origin=data.origin)
    connected = grid.popcount > 0 and is_connected(grid)
    if assumptions is not None and assumptions.b_holds and assumptions.c_holds and not connected:
        raise DisconnectedClusterError(
            f"enlarged cluster of {grid.popcount} cells at anchor {window.anchor} is not connected")
    return EnlargedCluster(grid, window, len(seeds), connected)


# Bad-vertex density

@dataclass
class BadDensityReport:
    """Frequency of the origin being n-bad, per level, against 2 * 2^(-2^n)"""

    d: int
    N: int
    u: float
    trials: int
    levels: List[Dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"d": self.d, "N": self.N, "u": self.u, "trials": self.trials, "levels": self.levels}


def origin_status(S: OccupancyGrid, ladder: ScaleLadder, params: DensityParams, s: int) -> GoodBadMap:
    """Good/bad levels 0..s around the origin box [0, L_s)^d"""
    L0 = ladder.L0
    data = restrict(S, Box((-L0,) * S.d, ladder.L[s] + 2 * L0))
    return propagate_badness(classify_level0(data, ladder, params, base=(0,) * S.d), ladder, s)


def bad_density_experiment(cfg: TorusConfig, ladder: ScaleLadder, params: DensityParams, s: int,
                           trials: int, seed: Optional[RngSeed] = None,
                           verbose: bool = False) -> BadDensityReport:
    """Monte-Carlo frequency of an n-bad origin over independent ranges, n = 0..s"""
    if s > ladder.max_level:
        raise ValueError(f"level {s} beyond ladder depth {ladder.max_level}")
    if (ladder.L[s] + 2 * ladder.L0) > WINDOW_ALPHA * cfg.N:
        raise ScaleConstraintError(
            f"L_s + 2 L0 = {ladder.L[s] + 2 * ladder.L0} exceeds (6/7) N = {float(WINDOW_ALPHA * cfg.N):.1f}")
    seed = seed or RngSeed(0)
    tallies = np.zeros((s + 1, 3), dtype=np.int64)  # any, a, b
    origin = (0,) * cfg.d
    for t in tqdm(range(trials), desc="bad density", disable=not verbose):
        grid, _ = sample_range(cfg, RngSeed(seed.root, stream=seed.stream + t))
        status = origin_status(grid, ladder, params, s)
        for n in range(s + 1):
            level = status.level(n)
            pos = level.position(origin)
            a = bool(level.bad_a[pos] and level.known_a[pos])
            b = bool(level.bad_b[pos] and level.known_b[pos])
            tallies[n] += (a or b, a, b)

    report = BadDensityReport(cfg.d, cfg.N, cfg.u, trials)
    for n in range(s + 1):
        p = tallies[n, 0] / trials
        report.levels.append({
            "n": n, "L_n": ladder.L[n], "frequency": float(p),
            "stderr": float(math.sqrt(p * (1 - p) / trials)),
            "frequency_a": float(tallies[n, 1] / trials), "frequency_b": float(tallies[n, 2] / trials),
            "bound": 2.0 * 2.0 ** -(2 ** n),
        })
    return report
