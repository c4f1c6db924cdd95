#!/usr/bin/env python3
"""
Test torus lattice: cell sets, boxes, occupancy grids, subgraphs and boundaries
"""

import sys
import tempfile
from pathlib import Path

# Add scripts to path
sys.path.insert(0, str(Path(__file__).parent / "scripts"))

import numpy as np
import pytest

from lattice import (GRID_HEADER, Box, CellSet, GridFormatError, IndexOutOfRange, MalformedBoxError,
                     NotASubsetError, OccupancyGrid, TorusConfig, box_counts, connected_components,
                     edge_boundary, induced_subgraph, is_connected, linf_distance, neighbors, restrict)


def cube(N, cells, d=3):
    cfg = TorusConfig(d=d, N=N)
    return OccupancyGrid.from_indices(cfg, cells)


def test_config_validation():
    with pytest.raises(ValueError):
        TorusConfig(d=2, N=8)
    with pytest.raises(ValueError):
        TorusConfig(d=3, N=1)
    with pytest.raises(ValueError):
        TorusConfig(d=3, N=8, u=0)
    assert TorusConfig(d=3, N=10, u=0.1).walk_length == 100
    assert TorusConfig(d=4, N=3, u=2.5).walk_length == 202


def test_cell_set_sorted_and_bounded():
    cells = CellSet([5, 1, 5, 3])
    assert cells.to_list() == [1, 3, 5]
    assert 3 in cells and 4 not in cells
    assert cells.difference(CellSet([3])).to_list() == [1, 5]
    assert cells.union(CellSet([0])).to_list() == [0, 1, 3, 5]
    with pytest.raises(IndexOutOfRange):
        CellSet([0, 64], size=64)


def test_neighbors_order():
    cfg = TorusConfig(d=3, N=4)
    assert neighbors(0, cfg) == [16, 48, 4, 12, 1, 3]
    with pytest.raises(IndexOutOfRange):
        neighbors(64, cfg)


def test_two_cells_form_one_edge():
    grid = cube(4, [0, 1])
    sub = induced_subgraph(grid)
    assert sub.n_vertices == 2
    assert list(sub.degrees) == [1, 1]
    assert sub.edges().tolist() == [[0, 1]]


def test_side_two_torus_has_distinct_neighbors():
    cfg = TorusConfig(d=3, N=2)
    sub = induced_subgraph(OccupancyGrid.full(cfg))
    assert (sub.degrees == 3).all()


def test_edge_boundary_counts():
    full = OccupancyGrid.full(TorusConfig(d=3, N=4))
    assert edge_boundary(CellSet([0]), full).count == 6
    # a whole slab x_1 = 0 touches the slabs on both sides
    slab = CellSet(np.arange(16))
    assert edge_boundary(slab, full).count == 32
    grid = cube(4, [0, 1])
    with pytest.raises(NotASubsetError):
        edge_boundary(CellSet([2]), grid)


def test_components():
    grid = cube(6, [0, 2])
    assert len(connected_components(grid)) == 2
    assert not is_connected(grid)
    assert is_connected(cube(6, [0, 1, 2]))


def test_restrict_extends_periodically():
    full = OccupancyGrid.full(TorusConfig(d=3, N=4))
    window = restrict(full, Box((-3, 2, 5), 6))
    assert window.popcount == 6 ** 3
    assert not window.periodic
    assert window.origin == (-3, 2, 5)

    single = cube(4, [0])
    shifted = restrict(single, Box((4, 4, 4), 2))
    assert shifted.flat_mask[0] and shifted.popcount == 1

    with pytest.raises(MalformedBoxError):
        restrict(window, Box((-4, 2, 5), 2))
    with pytest.raises(MalformedBoxError):
        restrict(full, Box((0, 0), 2))


def test_grid_file_round_trip():
    grid = cube(5, [0, 7, 31, 124])
    data = grid.to_bytes()
    assert len(data) == GRID_HEADER.size + (125 + 7) // 8
    assert OccupancyGrid.from_bytes(data) == grid
    with tempfile.TemporaryDirectory() as tmp:
        path = grid.save(Path(tmp) / "g.rmg")
        loaded = OccupancyGrid.load(path, u=2.0)
        assert loaded == grid
        assert loaded.config.u == 2.0
    with pytest.raises(GridFormatError):
        OccupancyGrid.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(GridFormatError):
        OccupancyGrid.from_bytes(data[:10])


def test_box_counts():
    counts = box_counts(np.ones((4, 4, 4), dtype=bool), 2)
    assert counts.shape == (3, 3, 3)
    assert (counts == 8).all()
    mask = np.zeros((4, 4, 4), dtype=bool)
    mask[1, 1, 1] = True
    counts = box_counts(mask, 2)
    assert counts.sum() == 8
    assert counts[0, 0, 0] == 1 and counts[2, 2, 2] == 0


def test_torus_distance_and_translation():
    assert linf_distance(np.array([0, 0, 0]), np.array([3, 0, 0]), side=4).tolist() == [1]
    assert linf_distance(np.array([0, 0, 0]), np.array([3, 0, 0])).tolist() == [3]
    grid = cube(4, [0, 1, 5])
    moved = grid.translated((1, 2, 3))
    assert moved.popcount == 3
    assert moved.translated((-1, -2, -3)) == grid


def test_box_geometry():
    box = Box.ball((2, 2, 2), 1)
    assert box.anchor == (1, 1, 1) and box.side == 3
    assert box.contains(Box((1, 2, 1), 2))
    assert not box.contains(Box((0, 0, 0), 2))
    assert box.contains_points(np.array([[1, 1, 1], [4, 1, 1]])).tolist() == [True, False]
    with pytest.raises(MalformedBoxError):
        Box((0, 0, 0), 0)


def test_boundary_of_complement_matches():
    rng = np.random.default_rng(5)
    cfg = TorusConfig(d=3, N=6)
    for _ in range(10):
        grid = OccupancyGrid.from_mask(rng.random(cfg.shape) < 0.6, config=cfg)
        cells = grid.occupied().indices
        A = CellSet(cells[rng.random(len(cells)) < 0.4])
        rest = grid.occupied().difference(A)
        assert edge_boundary(A, grid).count == edge_boundary(rest, grid).count


def test_boundary_matches_brute_force():
    rng = np.random.default_rng(6)
    cfg = TorusConfig(d=3, N=5)
    for _ in range(10):
        mask = rng.random(cfg.shape) < 0.5
        grid = OccupancyGrid.from_mask(mask, config=cfg)
        cells = grid.occupied().indices
        chosen = cells[rng.random(len(cells)) < 0.3]
        inside = set(chosen.tolist())
        expected = 0
        for cell in chosen:
            x = np.array(np.unravel_index(cell, cfg.shape))
            for axis in range(3):
                for step in (-1, 1):
                    y = x.copy()
                    y[axis] = (y[axis] + step) % cfg.N
                    if mask[tuple(y)] and int(np.ravel_multi_index(tuple(y), cfg.shape)) not in inside:
                        expected += 1
        assert edge_boundary(CellSet(chosen), grid).count == expected


def test_components_survive_translation():
    rng = np.random.default_rng(7)
    cfg = TorusConfig(d=3, N=6)
    for _ in range(8):
        grid = OccupancyGrid.from_mask(rng.random(cfg.shape) < 0.25, config=cfg)
        shift = tuple(int(s) for s in rng.integers(-6, 7, size=3))
        before = sorted(len(part) for part in connected_components(grid))
        after = sorted(len(part) for part in connected_components(grid.translated(shift)))
        assert before == after
        for part in connected_components(grid):
            moved = OccupancyGrid.from_indices(cfg, part.indices).translated(shift)
            assert moved.occupied() in [p for p in connected_components(grid.translated(shift))]


def test_restrict_popcount_is_monotone():
    rng = np.random.default_rng(8)
    cfg = TorusConfig(d=3, N=6)
    for _ in range(10):
        grid = OccupancyGrid.from_mask(rng.random(cfg.shape) < 0.4, config=cfg)
        bigger = grid.with_cells(rng.integers(0, cfg.volume, size=20))
        anchor = tuple(int(a) for a in rng.integers(-6, 6, size=3))
        inner, outer = Box(anchor, 3), Box(tuple(a - 1 for a in anchor), 6)
        assert outer.contains(inner)
        assert restrict(grid, inner).popcount <= restrict(grid, outer).popcount
        assert restrict(grid, outer).popcount <= restrict(bigger, outer).popcount


if __name__ == "__main__":
    print("\n" + "="*70)
    print("  TORUS LATTICE TEST")
    print("="*70 + "\n")
    for name, test in list(globals().items()):
        if name.startswith("test_") and callable(test):
            test()
            print(f"[OK] {name}")
    print("\n" + "="*70)
    print("  TEST COMPLETE - LATTICE WORKING")
    print("="*70 + "\n")
