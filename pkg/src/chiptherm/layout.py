"""Synthetic circuit layouts and their power maps.

Cells are pixel-aligned rectangles in three size classes standing in for
gate-count bands (small logic, sequential elements, combinational blocks).
Each cell dissipates its peak power scaled by a piecewise-constant activity
waveform, spread uniformly over its pixels.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .fields import FieldKind, GridSpec, ScalarField


class LayoutCongestion(RuntimeError):
    """Raised when cells cannot be placed without overlap."""


class CellClass(enum.Enum):
    BasicGate = "BasicGate"
    Sequential = "Sequential"
    CombinationalBlock = "CombinationalBlock"


# inclusive side-length bands in pixels
SIDE_BANDS = {
    CellClass.BasicGate: (2, 6),
    CellClass.Sequential: (4, 10),
    CellClass.CombinationalBlock: (8, 24),
}

# largest cells are placed first; it keeps rejection sampling cheap
PLACEMENT_ORDER = (CellClass.CombinationalBlock, CellClass.Sequential, CellClass.BasicGate)


class ActivityKind(enum.Enum):
    Constant = "Constant"
    Square = "Square"
    Burst = "Burst"


@dataclass(frozen=True)
class ActivityProfile:
    """Switching activity in [0, 1] over time.

    Square: periodic, on for the first ``duty * period`` of each period after ``phase``.
    Burst: a single on-window ``[phase, phase + duty * period)``.
    """

    kind: ActivityKind = ActivityKind.Constant
    duty: float = 1.0
    period: float = 1.0
    phase: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.duty <= 1.0:
            raise ValueError("duty must lie in [0, 1]")
        if self.kind is not ActivityKind.Constant and not self.period > 0:
            raise ValueError("period must be positive")

    def __call__(self, t: float) -> float:
        if self.kind is ActivityKind.Constant:
            return 1.0
        on = self.duty * self.period
        if self.kind is ActivityKind.Square:
            return 1.0 if (t - self.phase) % self.period < on else 0.0
        return 1.0 if self.phase <= t < self.phase + on else 0.0

    def integral(self, t0: float, t1: float) -> float:
        """Exact integral of the activity over [t0, t1]."""
        if t1 < t0:
            return -self.integral(t1, t0)
        if self.kind is ActivityKind.Constant:
            return t1 - t0
        on = self.duty * self.period
        if self.kind is ActivityKind.Burst:
            return max(0.0, min(t1, self.phase + on) - max(t0, self.phase))
        return self._square_cumulative(t1) - self._square_cumulative(t0)

    def _square_cumulative(self, t: float) -> float:
        s = t - self.phase
        n = math.floor(s / self.period)
        rem = s - n * self.period
        return n * self.duty * self.period + min(rem, self.duty * self.period)

    def to_record(self) -> dict:
        return {"kind": self.kind.value, "duty": self.duty, "period": self.period, "phase": self.phase}

    @classmethod
    def from_record(cls, rec: dict) -> ActivityProfile:
        return cls(ActivityKind(rec["kind"]), rec["duty"], rec["period"], rec["phase"])


@dataclass(frozen=True)
class CellPlacement:
    cell_class: CellClass
    rect: tuple[int, int, int, int]  # x0, y0, w, h
    peak_power: float
    activity: ActivityProfile = ActivityProfile()

    def __post_init__(self):
        if not self.peak_power > 0:
            raise ValueError("peak_power must be positive")
        if self.rect[2] <= 0 or self.rect[3] <= 0:
            raise ValueError("cell rectangle must have positive size")

    @property
    def area(self) -> int:
        return self.rect[2] * self.rect[3]

    def overlaps(self, other: CellPlacement) -> bool:
        return rects_overlap(self.rect, other.rect)

    def to_record(self) -> dict:
        return {"class": self.cell_class.value, "rect": list(self.rect),
                "peak_power": self.peak_power, "activity": self.activity.to_record()}

    @classmethod
    def from_record(cls, rec: dict) -> CellPlacement:
        return cls(CellClass(rec["class"]), tuple(rec["rect"]), rec["peak_power"],
                   ActivityProfile.from_record(rec["activity"]))


def rects_overlap(a, b) -> bool:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    return ax < bx + bw and bx < ax + aw and ay < by + bh and by < ay + ah


@dataclass(frozen=True)
class Layout:
    spec: GridSpec
    cells: tuple[CellPlacement, ...]
    total_power_budget: float

    def __post_init__(self):
        cells = tuple(self.cells)
        object.__setattr__(self, "cells", cells)
        for c in cells:
            x0, y0, w, h = c.rect
            if x0 < 0 or y0 < 0 or x0 + w > self.spec.width or y0 + h > self.spec.height:
                raise ValueError(f"cell {c.rect} lies outside the grid")
        if math.fsum(c.peak_power for c in cells) > self.total_power_budget * (1 + 1e-12):
            raise ValueError("cell powers exceed the layout budget")
        for i, a in enumerate(cells):
            for b in cells[i + 1:]:
                if a.overlaps(b):
                    raise ValueError(f"cells {a.rect} and {b.rect} overlap")

    def active_power(self, t: float) -> float:
        return math.fsum(c.peak_power * c.activity(t) for c in self.cells)

    def energy(self, t0: float, t1: float) -> float:
        """Total dissipated energy in joules over [t0, t1]."""
        return math.fsum(c.peak_power * c.activity.integral(t0, t1) for c in self.cells)

    @property
    def is_constant(self) -> bool:
        return all(c.activity.kind is ActivityKind.Constant for c in self.cells)

    def to_record(self) -> dict:
        s = self.spec
        return {"width": s.width, "height": s.height, "pitch": s.pitch,
                "total_power_budget": self.total_power_budget,
                "cells": [c.to_record() for c in self.cells]}

    @classmethod
    def from_record(cls, rec: dict) -> Layout:
        spec = GridSpec(rec["width"], rec["height"], rec["pitch"])
        return cls(spec, tuple(CellPlacement.from_record(c) for c in rec["cells"]),
                   rec["total_power_budget"])


def _random_activity(rng: np.random.Generator, kinds) -> ActivityProfile:
    kind = kinds[rng.integers(len(kinds))]
    if kind is ActivityKind.Constant:
        return ActivityProfile()
    period = float(rng.uniform(5e-3, 40e-3))
    duty = float(rng.uniform(0.3, 0.9))
    phase = float(rng.uniform(0.0, period))
    return ActivityProfile(kind, duty, period, phase)


def generate_layout(seed: int, spec: GridSpec, class_mix: dict, power_budget: float, *,
                    activity_kinds=tuple(ActivityKind), max_retries: int = 500) -> Layout:
    """Place non-overlapping cells and split ``power_budget`` among them.

    ``class_mix`` maps CellClass (or its name) to a count. Placement is
    rejection sampled; a cell that cannot be placed within ``max_retries``
    attempts raises LayoutCongestion.
    """
    if not power_budget > 0:
        raise ValueError("power budget must be positive")
    mix = {CellClass(k) if isinstance(k, str) else k: int(v) for k, v in class_mix.items()}
    kinds = tuple(ActivityKind(k) if isinstance(k, str) else k for k in activity_kinds)
    rng = np.random.default_rng(seed)

    placed: list[tuple[CellClass, tuple[int, int, int, int]]] = []
    for cls in PLACEMENT_ORDER:
        lo, hi = SIDE_BANDS[cls]
        for _ in range(mix.get(cls, 0)):
            for _attempt in range(max_retries):
                w = int(rng.integers(lo, hi + 1))
                h = int(rng.integers(lo, hi + 1))
                if w > spec.width or h > spec.height:
                    continue
                x0 = int(rng.integers(0, spec.width - w + 1))
                y0 = int(rng.integers(0, spec.height - h + 1))
                rect = (x0, y0, w, h)
                if not any(rects_overlap(rect, r) for _, r in placed):
                    placed.append((cls, rect))
                    break
            else:
                raise LayoutCongestion(
                    f"layout congestion: could not place {cls.value} after {max_retries} attempts")

    if not placed:
        return Layout(spec, (), power_budget)

    # power roughly tracks area, with per-cell spread
    weights = np.array([r[2] * r[3] for _, r in placed], float) * rng.uniform(0.5, 1.5, len(placed))
    powers = [float(p) for p in power_budget * weights / weights.sum()]
    powers[-1] = power_budget - math.fsum(powers[:-1])
    cells = tuple(CellPlacement(cls, rect, p, _random_activity(rng, kinds))
                  for (cls, rect), p in zip(placed, powers))
    return Layout(spec, cells, power_budget)


def rasterize_power(layout: Layout, t: float) -> ScalarField:
    """Per-pixel power in watts at time ``t``."""
    if t < 0:
        raise ValueError("t must be non-negative")
    p = np.zeros(layout.spec.shape)
    for c in layout.cells:
        a = c.activity(t)
        if a == 0.0:
            continue
        x0, y0, w, h = c.rect
        p[y0:y0 + h, x0:x0 + w] = c.peak_power * a / c.area
    return ScalarField(layout.spec, FieldKind.PowerW, p)
