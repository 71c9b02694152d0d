"""Discrete operators and the heat-equation residual.

The residual is the hyperbolic (relaxation-time) conduction balance

    dT/dt + tau * d2T/dt2 - alpha * lap(T)

optionally minus the known source/sink terms ``s - g (T - T_amb)`` so that
solver output can be checked against its own equation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import FieldKind, ScalarField
from .stencil import laplacian_array


@dataclass(frozen=True)
class ResidualConfig:
    alpha: float = 1e-4
    tau: float = 1e-13
    dt: float = 1e-3
    include_second_order: bool = True
    include_source_sink: bool = False

    def __post_init__(self):
        if not self.dt > 0 or not self.alpha > 0:
            raise ValueError("dt and alpha must be positive")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")


@dataclass(frozen=True)
class Sink:
    """Ambient coupling g (1/s) toward t_ambient (C)."""
    g: float
    t_ambient: float


def laplacian(f: ScalarField) -> ScalarField:
    """5-point Laplacian in units of f per m^2 with insulated walls."""
    if f.spec.width < 3 or f.spec.height < 3:
        raise ValueError("laplacian needs at least a 3x3 grid")
    return ScalarField(f.spec, FieldKind.Dimensionless, laplacian_array(f.values, f.spec.pitch))


def _check_frames(frames):
    spec = frames[0].spec
    if any(f.spec != spec for f in frames):
        raise ValueError("frames must share one grid spec")


def time_derivatives(frames, dt: float) -> dict[str, ScalarField]:
    """Central first and second time differences from (T(t-dt), T(t), T(t+dt))."""
    if len(frames) != 3:
        raise ValueError("time_derivatives needs exactly three frames")
    _check_frames(frames)
    prev, cur, nxt = (f.values for f in frames)
    spec = frames[0].spec
    return {
        "dTdt": ScalarField(spec, FieldKind.Dimensionless, (nxt - prev) / (2.0 * dt)),
        "d2Tdt2": ScalarField(spec, FieldKind.Dimensionless, (nxt - 2.0 * cur + prev) / (dt * dt)),
    }


def physics_residual(frames, cfg: ResidualConfig, source: ScalarField | None = None,
                     sink: Sink | None = None) -> dict:
    """Residual field (K/s) and its mean square.

    Three frames: central differences about the middle frame, Laplacian of the
    middle frame. Two frames (training pairs): forward difference with the
    Laplacian and sink taken on the later frame, and no second-order term.
    ``source`` is a heating-rate field in K/s; both ``source`` and ``sink``
    only enter when ``cfg.include_source_sink`` is set.
    """
    frames = list(frames)
    _check_frames(frames)
    spec = frames[0].spec
    if len(frames) == 3:
        d = time_derivatives(frames, cfg.dt)
        rate = d["dTdt"].values
        if cfg.include_second_order and cfg.tau:
            rate = rate + cfg.tau * d["d2Tdt2"].values
        at = frames[1].values
    elif len(frames) == 2:
        rate = (frames[1].values - frames[0].values) / cfg.dt
        at = frames[1].values
    else:
        raise ValueError("physics_residual needs two or three frames")
    r = rate - cfg.alpha * laplacian_array(at, spec.pitch)
    if cfg.include_source_sink:
        if source is not None:
            r = r - source.values
        if sink is not None:
            r = r + sink.g * (at - sink.t_ambient)
    return {"residual_field": ScalarField(spec, FieldKind.Dimensionless, r),
            "mean_sq": float(np.mean(r * r))}


def normalized_residual(prev: np.ndarray, nxt: np.ndarray, alpha: float, dt: float,
                        pitch: float, span: float) -> np.ndarray:
    """Two-frame residual scaled by dt/span, the form used in the training loss.

    ``prev`` and ``nxt`` may be raw temperatures (pass the dynamic range as
    ``span``) or already normalized maps (``span=1``).
    """
    kappa = alpha * dt / (pitch * pitch)
    return (nxt - prev) / span - kappa * laplacian_array(nxt) / span
