import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chiptherm.fields import GridSpec, field_stats
from chiptherm.layout import (SIDE_BANDS, ActivityKind, ActivityProfile, CellClass, CellPlacement, Layout,
                              LayoutCongestion, generate_layout, rasterize_power, rects_overlap)

G32 = GridSpec(32, 32)
MIX = {CellClass.BasicGate: 5, CellClass.Sequential: 3, CellClass.CombinationalBlock: 1}


def test_single_cell_budget():
    lay = generate_layout(0, G32, {CellClass.BasicGate: 1}, 1e-3, activity_kinds=[ActivityKind.Constant])
    assert len(lay.cells) == 1
    assert field_stats(rasterize_power(lay, 0.0))["sum"] == pytest.approx(1e-3, rel=1e-12)


def test_deterministic():
    a = generate_layout(3, G32, MIX, 2e-3)
    b = generate_layout(3, G32, MIX, 2e-3)
    assert json.dumps(a.to_record()) == json.dumps(b.to_record())
    assert json.dumps(a.to_record()) != json.dumps(generate_layout(4, G32, MIX, 2e-3).to_record())


def test_no_overlaps_brute_force():
    for seed in range(200):
        lay = generate_layout(seed, G32, MIX, 2e-3)
        rects = [c.rect for c in lay.cells]
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                ax, ay, aw, ah = rects[i]
                bx, by, bw, bh = rects[j]
                cover_a = {(x, y) for x in range(ax, ax + aw) for y in range(ay, ay + ah)}
                cover_b = {(x, y) for x in range(bx, bx + bw) for y in range(by, by + bh)}
                assert not cover_a & cover_b


def test_budget_is_met():
    lay = generate_layout(1, G32, MIX, 2.5e-3)
    assert math.fsum(c.peak_power for c in lay.cells) == pytest.approx(2.5e-3, rel=1e-12)


def test_class_side_bands():
    n = 0
    seed = 0
    while n < 1000:
        lay = generate_layout(seed, GridSpec(64, 64), {CellClass.BasicGate: 6, CellClass.Sequential: 3,
                                                       CellClass.CombinationalBlock: 1}, 2e-3)
        for c in lay.cells:
            lo, hi = SIDE_BANDS[c.cell_class]
            assert lo <= c.rect[2] <= hi and lo <= c.rect[3] <= hi
            n += 1
        seed += 1


def test_congestion_error():
    with pytest.raises(LayoutCongestion, match="congestion"):
        generate_layout(0, GridSpec(8, 8), {CellClass.Sequential: 12}, 1e-3, max_retries=20)


def test_rasterize_uniform_split():
    cell = CellPlacement(CellClass.BasicGate, (1, 1, 2, 2), 4e-3)
    p = rasterize_power(Layout(GridSpec(8, 8), (cell,), 4e-3), 0.0).values
    assert np.all(p[1:3, 1:3] == 1e-3)
    assert p.sum() == pytest.approx(4e-3)
    assert np.count_nonzero(p) == 4


def test_square_off_phase():
    act = ActivityProfile(ActivityKind.Square, 0.5, 2e-3, 0.0)
    cell = CellPlacement(CellClass.BasicGate, (0, 0, 2, 2), 4e-3, act)
    lay = Layout(GridSpec(8, 8), (cell,), 4e-3)
    assert field_stats(rasterize_power(lay, 1.5e-3))["sum"] == 0.0
    assert field_stats(rasterize_power(lay, 0.5e-3))["sum"] == pytest.approx(4e-3)


def test_rasterize_matches_per_cell_sum():
    for seed in range(20):
        lay = generate_layout(seed, G32, MIX, 2e-3)
        for t in (0.0, 3.7e-3, 17e-3):
            expected = math.fsum(c.peak_power * c.activity(t) for c in lay.cells)
            got = field_stats(rasterize_power(lay, t))["sum"]
            assert got == pytest.approx(expected, rel=1e-12, abs=1e-18)


@settings(max_examples=100, deadline=None)
@given(st.sampled_from([ActivityKind.Square, ActivityKind.Burst]), st.floats(0.0, 1.0),
       st.floats(1e-3, 5e-2), st.floats(0.0, 5e-2), st.floats(0.0, 0.1), st.floats(0.0, 0.1))
def test_activity_integral_matches_quadrature(kind, duty, period, phase, a, b):
    act = ActivityProfile(kind, duty, period, phase)
    t0, t1 = min(a, b), max(a, b)
    ts = np.linspace(t0, t1, 20001)
    mid = 0.5 * (ts[1:] + ts[:-1])
    approx = sum(act(t) for t in mid) * (ts[1] - ts[0])
    # midpoint sampling misses at most one sub-interval per switching edge
    edges = 2 * ((t1 - t0) / period + 2)
    assert abs(act.integral(t0, t1) - approx) <= edges * (ts[1] - ts[0]) + 1e-15


def test_activity_validation():
    with pytest.raises(ValueError):
        ActivityProfile(ActivityKind.Square, 1.5, 1e-3)
    with pytest.raises(ValueError):
        ActivityProfile(ActivityKind.Square, 0.5, 0.0)


def test_layout_validation():
    g = GridSpec(8, 8)
    a = CellPlacement(CellClass.BasicGate, (0, 0, 3, 3), 1e-3)
    b = CellPlacement(CellClass.BasicGate, (2, 2, 3, 3), 1e-3)
    with pytest.raises(ValueError, match="overlap"):
        Layout(g, (a, b), 2e-3)
    with pytest.raises(ValueError, match="outside"):
        Layout(g, (CellPlacement(CellClass.BasicGate, (6, 6, 3, 3), 1e-3),), 1e-3)
    with pytest.raises(ValueError, match="budget"):
        Layout(g, (a,), 0.5e-3)
    assert rects_overlap((0, 0, 2, 2), (1, 1, 2, 2)) and not rects_overlap((0, 0, 2, 2), (2, 0, 2, 2))


def test_record_round_trip():
    lay = generate_layout(9, G32, MIX, 2e-3)
    assert Layout.from_record(json.loads(json.dumps(lay.to_record()))) == lay
