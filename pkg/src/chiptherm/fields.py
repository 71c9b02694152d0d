"""Grid geometry, scalar fields and field sequences.

Arrays are row-major with index ``[row, col] == [y, x]``. Temperatures are kept
in degrees Celsius with an explicit kind tag; everything else is SI.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PITCH = 3.9e-6


class FieldKind(enum.Enum):
    TemperatureC = "TemperatureC"
    PowerW = "PowerW"
    Dimensionless = "Dimensionless"


@dataclass(frozen=True)
class GridSpec:
    width: int
    height: int
    pitch: float = DEFAULT_PITCH
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width < 4 or self.height < 4:
            raise ValueError(f"grid must be at least 4x4, got {self.width}x{self.height}")
        if not self.pitch > 0:
            raise ValueError(f"pitch must be positive, got {self.pitch}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    @property
    def extent(self) -> tuple[float, float]:
        """Physical (x, y) size in meters."""
        return (self.width * self.pitch, self.height * self.pitch)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Pixel-center coordinates in meters as (X, Y) meshgrids."""
        x = self.origin[0] + self.pitch * np.arange(self.width)
        y = self.origin[1] + self.pitch * np.arange(self.height)
        return np.meshgrid(x, y)


@dataclass(frozen=True, eq=False)
class ScalarField:
    spec: GridSpec
    kind: FieldKind
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.shape != self.spec.shape:
            if v.size != self.spec.n_pixels:
                raise ValueError(f"expected {self.spec.n_pixels} values, got {v.size}")
            v = v.reshape(self.spec.shape)
        if self.kind is FieldKind.TemperatureC:
            if not np.all(np.isfinite(v)) or np.any(v < -273.15):
                raise ValueError("temperature field must be finite and >= -273.15 C")
        elif self.kind is FieldKind.PowerW:
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ValueError("power field must be finite and non-negative")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @classmethod
    def constant(cls, spec: GridSpec, value: float, kind: FieldKind = FieldKind.TemperatureC):
        return cls(spec, kind, np.full(spec.shape, float(value)))

    def with_values(self, values: np.ndarray, kind: FieldKind | None = None) -> ScalarField:
        return ScalarField(self.spec, kind or self.kind, values)

    def _coerce(self, other):
        if isinstance(other, ScalarField):
            if other.spec != self.spec:
                raise ValueError("grid specs differ")
            return other.values
        return other

    def __add__(self, other):
        return ScalarField(self.spec, FieldKind.Dimensionless if isinstance(other, ScalarField)
                           and other.kind is not self.kind else self.kind,
                           self.values + self._coerce(other))

    def __sub__(self, other):
        # differences of temperatures may be negative, so they lose the kind tag
        return ScalarField(self.spec, FieldKind.Dimensionless, self.values - self._coerce(other))

    def __mul__(self, other):
        return ScalarField(self.spec, FieldKind.Dimensionless, self.values * self._coerce(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def __eq__(self, other):
        return (isinstance(other, ScalarField) and self.spec == other.spec
                and self.kind is other.kind and np.array_equal(self.values, other.values))

    __hash__ = None


@dataclass(frozen=True)
class FieldSequence:
    frames: tuple[ScalarField, ...]
    dt: float

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise ValueError("a sequence needs at least 2 frames")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        spec, kind = frames[0].spec, frames[0].kind
        for f in frames[1:]:
            if f.spec != spec or f.kind is not kind:
                raise ValueError("all frames must share grid spec and kind")
        object.__setattr__(self, "frames", frames)

    @property
    def spec(self) -> GridSpec:
        return self.frames[0].spec

    def __len__(self):
        return len(self.frames)

    def __getitem__(self, i):
        return self.frames[i]

    def array(self) -> np.ndarray:
        """Stacked (n_frames, H, W) copy."""
        return np.stack([f.values for f in self.frames])

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(len(self.frames))


def field_stats(f: ScalarField) -> dict[str, float]:
    v = f.values.ravel()
    if v.size == 0:
        raise ValueError("empty field")
    total = math.fsum(v.tolist())
    return {"min": float(v.min()), "max": float(v.max()), "mean": total / v.size, "sum": total}


def _axis_weights(n_old: int, n_new: int) -> np.ndarray:
    """Linear-interpolation matrix (n_new, n_old) mapping pixel centers edge to edge."""
    if n_new == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_new) * (n_old - 1) / (n_new - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, n_old - 2)
    frac = pos - lo
    w = np.zeros((n_new, n_old))
    rows = np.arange(n_new)
    w[rows, lo] += 1.0 - frac
    w[rows, lo + 1] += frac
    return w


def resample(f: ScalarField, new_spec: GridSpec) -> ScalarField:
    """Bilinear resampling onto ``new_spec``.

    The corner pixel centers of both grids are aligned (physical extent is
    preserved), so the new pitch should be ``old_pitch * (n_old - 1) / (n_new - 1)``
    for the geometry to be consistent; the caller's ``new_spec`` is used as given.
    """
    if new_spec.width <= 0 or new_spec.height <= 0:
        raise ValueError("target dimensions must be positive")
    wy = _axis_weights(f.spec.height, new_spec.height)
    wx = _axis_weights(f.spec.width, new_spec.width)
    return ScalarField(new_spec, f.kind, wy @ f.values @ wx.T)
