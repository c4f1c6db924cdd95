#!/usr/bin/env python3
"""
Test interlacements: capacity, coupled box traces, level checks and the sandwich diagnostic
"""

import math
import sys
from pathlib import Path

# Add scripts to path
sys.path.insert(0, str(Path(__file__).parent / "scripts"))

import numpy as np
import pytest

from interlacements import (box_capacity, box_points, check_levels, empty_box_frequency, estimate_capacity, eta,
                            sample_interlacement_box, sample_interlacement_levels, sandwich_diagnostic)
from lattice import Box, TorusConfig
from renormalization import ScaleConstraintError
from walk_sampler import RngSeed, green_tail_constant


G00 = 1.5164


def test_eta():
    assert eta(0.0, G00) == 0.0
    assert abs(eta(1.0, G00) - (1 - math.exp(-1 / G00))) < 1e-15
    assert eta(1.0, G00) < eta(2.0, G00) < 1.0


def test_single_point_capacity():
    estimate = estimate_capacity(np.array([[0, 0, 0]]), trials=4000, seed=RngSeed(1))
    assert abs(estimate.cap - 1 / G00) < 0.05
    assert estimate.stderr < 0.02
    assert estimate.distribution().tolist() == [1.0]


def test_capacity_guards():
    with pytest.raises(ValueError):
        estimate_capacity(np.empty((0, 3), dtype=np.int64))
    with pytest.raises(ValueError):
        estimate_capacity(np.array([[0, 0]]))
    with pytest.raises(ValueError):
        estimate_capacity(np.array([[0, 0, 0]]), trials=1)


def test_interior_cells_have_no_weight():
    box = Box((0, 0, 0), 3)
    estimate = estimate_capacity(box, trials=400, seed=RngSeed(2))
    center = int(np.flatnonzero((box_points(box) == 1).all(axis=1))[0])
    assert center == 13
    assert estimate.weights[center] == 0.0
    assert (np.delete(estimate.weights, center) > 0).all()
    assert estimate.cap > 1 / G00


def test_levels_are_monotone():
    box = Box((0, 0, 0), 2)
    capacity = box_capacity(3, 2, trials=200)
    levels = sample_interlacement_levels(box, [0.5, 1.0], RngSeed(3), samples=50, capacity=capacity)
    assert levels.samples == 50
    assert not (levels.occupancy(0.5) & ~levels.occupancy(1.0)).any()
    assert (levels.counts[:, 0] <= levels.counts[:, 1]).all()
    trace = levels.trace(1.0, sample=4)
    assert trace.trace.popcount == int(levels.occupancy(1.0)[4].sum())
    assert trace.n_trajectories == int(levels.counts[4, 1])
    with pytest.raises(ValueError):
        levels.occupancy(2.0)
    with pytest.raises(ValueError):
        sample_interlacement_levels(box, [-1.0], capacity=capacity)


def test_single_box_sample():
    box = Box((5, 5, 5), 2)
    trace = sample_interlacement_box(box, 1.0, RngSeed(6), capacity=box_capacity(3, 2, trials=200))
    assert trace.trace.origin == (5, 5, 5)
    assert trace.trace.popcount <= 8
    assert (trace.n_trajectories == 0) == (trace.trace.popcount == 0)


def test_level_check():
    check = check_levels(Box((0, 0, 0), 2), 1.0, G00, samples=4000, seed=RngSeed(7),
                         capacity=box_capacity(3, 2, trials=200))
    assert check.monotone
    assert abs(check.density - eta(1.0, G00)) < 0.05
    assert 0.8 <= check.dispersion <= 1.2
    assert abs(check.count_mean - check.expected_count) < 0.1 * check.expected_count
    assert [row["check"] for row in check.table()] == ["density vs eta(u)", "count variance / mean",
                                                       "monotone coupling"]
    assert check.to_dict()["levels"] == [0.8, 1.0, 1.2]
    with pytest.raises(ValueError):
        check_levels(Box((0, 0, 0), 2), 1.0, G00, spread=1.0)


def test_empty_box_frequency():
    study = empty_box_frequency(3, 0.5, sides=(1, 2), samples=20_000, seed=RngSeed(5), trials=200)
    for m, p, se in zip(study.sides, study.frequencies, study.stderr):
        expected = math.exp(-0.5 * box_capacity(3, m, 200).cap)
        assert abs(p - expected) <= 4 * se + 1e-3
    assert study.slope < 0
    with pytest.raises(ValueError):
        empty_box_frequency(3, 200.0, sides=(1, 2), samples=100, trials=200)


def test_sandwich_scale_constraint():
    with pytest.raises(ScaleConstraintError):
        sandwich_diagnostic(TorusConfig(d=3, N=4), 1.0, 0.1, Box((0, 0, 0), 4), trials=2)
    with pytest.raises(ValueError):
        sandwich_diagnostic(TorusConfig(d=3, N=6), 1.0, 1.0, Box((0, 0, 0), 2), trials=2)


def test_sandwich_without_slack_is_vacuous():
    report = sandwich_diagnostic(TorusConfig(d=3, N=6), 0.5, 0.0, Box((0, 0, 0), 2), trials=20,
                                 seed=RngSeed(9), capacity=box_capacity(3, 2, trials=200))
    assert report.vacuous
    assert np.array_equal(report.freq_low, report.freq_high)
    assert 0.0 <= report.ordered_fraction <= 1.0
    assert report.to_dict()["trials"] == 20


def test_capacity_grows_with_the_set():
    single = estimate_capacity(np.array([[0, 0, 0]]), trials=2000, seed=RngSeed(21))
    pair = estimate_capacity(np.array([[0, 0, 0], [1, 0, 0]]), trials=2000, seed=RngSeed(22))
    cube = estimate_capacity(Box((0, 0, 0), 2), trials=2000, seed=RngSeed(23))
    assert single.cap < pair.cap < cube.cap
    # g(e_1) = g(0) - 1 for the simple walk
    assert abs(pair.cap - 2 / (2 * G00 - 1)) < 0.05


def test_distant_singletons_nearly_add():
    gap = 20
    pair = estimate_capacity(np.array([[0, 0, 0], [gap, 0, 0]]), trials=4000, seed=RngSeed(24))
    expected = 2 / (G00 + green_tail_constant(3) / gap)
    assert abs(pair.cap - expected) < 0.05
    assert pair.cap < 2 / G00 + 0.03


def test_traces_nested_across_levels():
    box = Box((0, 0, 0), 3)
    levels = [0.25, 0.5, 1.0, 2.0]
    sample = sample_interlacement_levels(box, levels, RngSeed(25), samples=100,
                                         capacity=box_capacity(3, 3, trials=200))
    for low, high in zip(levels, levels[1:]):
        assert not (sample.occupancy(low) & ~sample.occupancy(high)).any()


def test_sandwich_traces_are_nested():
    report = sandwich_diagnostic(TorusConfig(d=3, N=6), 0.5, 0.2, Box((0, 0, 0), 2), trials=30,
                                 seed=RngSeed(10), capacity=box_capacity(3, 2, trials=200))
    assert report.traces_nested
    assert report.to_dict()["traces_nested"]
    assert (report.freq_low <= report.freq_high).all()


if __name__ == "__main__":
    print("\n" + "="*70)
    print("  INTERLACEMENTS TEST")
    print("="*70 + "\n")
    for name, test in list(globals().items()):
        if name.startswith("test_") and callable(test):
            test()
            print(f"[OK] {name}")
    print("\n" + "="*70)
    print("  TEST COMPLETE - INTERLACEMENTS WORKING")
    print("="*70 + "\n")
