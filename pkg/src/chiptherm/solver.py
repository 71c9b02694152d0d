"""Finite-difference heat conduction on the die plane.

Integrates

    dT/dt + tau * d2T/dt2 = alpha * lap(T) + s - g * (T - T_amb)

where ``s = P_pixel / (rho_c * V_pixel)`` is the volumetric source in K/s and
``g = 1 / (rho_c * V_pixel * r_th * N)`` couples every pixel to ambient so that
the N pixel resistances in parallel reproduce the lumped ``r_th``.

Walls are insulated (mirror ghost cells). Two integrators are provided:
explicit FTCS for verification and backward Euler with conjugate gradients
for production runs.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .fields import FieldKind, FieldSequence, GridSpec, ScalarField
from .layout import ActivityKind, Layout
from .stencil import laplacian_array

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


class CFLViolation(SolverError):
    pass


class ConvergenceError(SolverError):
    pass


class NoSteadyState(SolverError):
    pass


class Boundary(enum.Enum):
    AdiabaticOnly = "AdiabaticOnly"
    AdiabaticPlusAmbient = "AdiabaticPlusAmbient"


class Scheme(enum.Enum):
    ExplicitFTCS = "ExplicitFTCS"
    ImplicitBackwardEuler = "ImplicitBackwardEuler"


@dataclass(frozen=True)
class SimConfig:
    alpha: float = 1e-4
    tau: float = 1e-13
    rho_c: float = 1.63e6
    die_thickness: float = 300e-6
    r_th: float = 1e4
    t_ambient: float = 25.0
    boundary: Boundary = Boundary.AdiabaticPlusAmbient
    scheme: Scheme = Scheme.ImplicitBackwardEuler
    substeps_per_frame: int = 1
    cg_tol: float = 1e-10

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if not self.rho_c > 0 or not self.die_thickness > 0:
            raise ValueError("rho_c and die_thickness must be positive")
        if not self.r_th > 0:
            raise ValueError("r_th must be positive")
        if self.substeps_per_frame < 1:
            raise ValueError("substeps_per_frame must be >= 1")

    def pixel_heat_capacity(self, spec: GridSpec) -> float:
        """rho_c * V_pixel in J/K."""
        return self.rho_c * spec.pitch * spec.pitch * self.die_thickness

    def ambient_conductance(self, spec: GridSpec) -> float:
        """Per-pixel sink rate g in 1/s (0 for purely adiabatic dies)."""
        if self.boundary is Boundary.AdiabaticOnly:
            return 0.0
        return 1.0 / (self.pixel_heat_capacity(spec) * self.r_th * spec.n_pixels)

    def to_record(self) -> dict:
        return {"alpha": self.alpha, "tau": self.tau, "rho_c": self.rho_c,
                "die_thickness": self.die_thickness, "r_th": self.r_th,
                "t_ambient": self.t_ambient, "boundary": self.boundary.value,
                "scheme": self.scheme.value, "substeps_per_frame": self.substeps_per_frame,
                "cg_tol": self.cg_tol}

    @classmethod
    def from_record(cls, rec: dict) -> SimConfig:
        rec = dict(rec)
        rec["boundary"] = Boundary(rec["boundary"])
        rec["scheme"] = Scheme(rec["scheme"])
        return cls(**rec)


@dataclass(frozen=True)
class HeatState:
    T: ScalarField
    T_prev: ScalarField | None = None
    t: float = 0.0

    def __post_init__(self):
        if self.T.kind is not FieldKind.TemperatureC:
            raise ValueError("state temperature must be a TemperatureC field")
        if self.T_prev is not None and self.T_prev.spec != self.T.spec:
            raise ValueError("T_prev grid differs from T")


def stable_dt(cfg: SimConfig, spec: GridSpec) -> float:
    """Largest stable explicit step.

    The explicit update is ``a*(T+ - 2T + T-) + b*(T+ - T) = F(T)`` with
    ``a = tau/dt^2`` and ``b = 1/dt``. Von Neumann analysis for the stiffest
    mode ``lam = 8*alpha/h^2 + g`` requires ``lam*dt^2 - 2*dt - 4*tau <= 0``,
    i.e. ``dt <= (1 + sqrt(1 + 4*lam*tau)) / lam``. For tau = 0 and no
    ambient sink this is the familiar ``h^2 / (4*alpha)``; for large tau it
    tends to the 2D wave limit ``h / (c*sqrt(2))`` with ``c = sqrt(alpha/tau)``.
    """
    h = spec.pitch
    lam = 8.0 * cfg.alpha / (h * h) + cfg.ambient_conductance(spec)
    return (1.0 + math.sqrt(1.0 + 4.0 * lam * cfg.tau)) / lam


def source_rate(cfg: SimConfig, power: ScalarField) -> np.ndarray:
    """Heating rate s in K/s from a per-pixel power map."""
    return power.values / cfg.pixel_heat_capacity(power.spec)


def conjugate_gradient(matvec, b: np.ndarray, x0: np.ndarray | None = None, *,
                       tol: float = 1e-10, max_iter: int | None = None,
                       b_norm: float | None = None) -> tuple[np.ndarray, int]:
    """Plain CG for a symmetric positive-definite operator.

    Stops when ``||b - A x|| <= tol * b_norm`` (``b_norm`` defaults to ||b||).
    """
    if max_iter is None:
        max_iter = 10 * b.size
    if b_norm is None:
        b_norm = float(np.linalg.norm(b))
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - matvec(x) if x0 is not None else b.copy()
    target = tol * b_norm
    rr = float(np.vdot(r, r))
    if math.sqrt(rr) <= target:
        return x, 0
    p = r.copy()
    for k in range(1, max_iter + 1):
        Ap = matvec(p)
        step = rr / float(np.vdot(p, Ap))
        x += step * p
        r -= step * Ap
        rr_new = float(np.vdot(r, r))
        if math.sqrt(rr_new) <= target:
            return x, k
        p *= rr_new / rr
        p += r
        rr = rr_new
    raise ConvergenceError(f"CG did not converge in {max_iter} iterations "
                           f"(residual {math.sqrt(rr):.3e}, target {target:.3e})")


def solve_shifted(shift: float, alpha: float, pitch: float, rhs: np.ndarray,
                  tol: float = 1e-10) -> np.ndarray:
    """Solve ``(shift*I - alpha*lap) x = rhs`` with zero-flux walls.

    The operator maps constants to constants and zero-mean fields to zero-mean
    fields, so the mean is solved exactly and CG only sees the fluctuation.
    Keeping the large uniform component out of the stencil avoids cancellation
    error in the matrix-vector products.
    """
    if not shift > 0:
        raise ValueError("shift must be positive")
    mean = float(rhs.mean())
    fluct = rhs - mean
    k = alpha / (pitch * pitch)

    def matvec(v):
        return shift * v - k * laplacian_array(v)

    x, _ = conjugate_gradient(matvec, fluct, tol=tol, b_norm=float(np.linalg.norm(rhs)))
    return x + mean / shift


def _explicit_update(T, T_prev, s, cfg, g, dt, pitch):
    F = cfg.alpha * laplacian_array(T, pitch) + s - g * (T - cfg.t_ambient)
    if cfg.tau == 0.0:
        return T + dt * F
    a = cfg.tau / (dt * dt)
    b = 1.0 / dt
    return (F + b * T + a * (2.0 * T - T_prev)) / (a + b)


def _implicit_update(T, T_prev, s, cfg, g, dt, pitch):
    # solve for the increment; the right side is the explicit tendency
    a = cfg.tau / (dt * dt)
    b = 1.0 / dt
    rhs = cfg.alpha * laplacian_array(T, pitch) + s - g * (T - cfg.t_ambient)
    if a:
        rhs = rhs + a * (T - T_prev)
    if not np.any(rhs):
        return T.copy()
    delta = solve_shifted(a + b + g, cfg.alpha, pitch, rhs, tol=cfg.cg_tol)
    return T + delta


def step(state: HeatState, cfg: SimConfig, power: ScalarField, dt: float) -> HeatState:
    """Advance ``state`` by one time step of length ``dt``."""
    spec = state.T.spec
    if power.spec != spec:
        raise ValueError("power map and temperature grids differ")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if cfg.scheme is Scheme.ExplicitFTCS:
        limit = stable_dt(cfg, spec)
        if dt > limit * (1.0 + 1e-12):
            raise CFLViolation(f"explicit step {dt:.3e} s exceeds stability bound {limit:.3e} s")
    T = state.T.values
    T_prev = state.T_prev.values if state.T_prev is not None else T
    g = cfg.ambient_conductance(spec)
    s = source_rate(cfg, power)
    update = _explicit_update if cfg.scheme is Scheme.ExplicitFTCS else _implicit_update
    T_new = update(T, T_prev, s, cfg, g, dt, spec.pitch)
    if not np.all(np.isfinite(T_new)):
        raise SolverError(f"non-finite temperature at t={state.t + dt:.6e} s")
    keep_prev = cfg.tau > 0
    return HeatState(ScalarField(spec, FieldKind.TemperatureC, T_new),
                     state.T if keep_prev else None, state.t + dt)


def average_power(layout: Layout, t0: float, t1: float) -> ScalarField:
    """Per-pixel power averaged over [t0, t1].

    Feeding interval averages into the integrator makes the deposited energy
    match the exact waveform integral even when switching edges fall inside a
    step.
    """
    p = np.zeros(layout.spec.shape)
    span = t1 - t0
    for c in layout.cells:
        x0, y0, w, h = c.rect
        frac = c.activity.integral(t0, t1) / span
        if frac:
            p[y0:y0 + h, x0:x0 + w] = c.peak_power * frac / c.area
    return ScalarField(layout.spec, FieldKind.PowerW, p)


def simulate(layout: Layout, cfg: SimConfig, T0: ScalarField, frame_dt: float = 1e-3,
             n_frames: int = 101) -> FieldSequence:
    """Integrate from ``T0`` and record ``n_frames`` frames (``T0`` included) spaced ``frame_dt``."""
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if T0.spec != layout.spec:
        raise ValueError("initial field and layout grids differ")
    T0 = T0.with_values(T0.values, FieldKind.TemperatureC)
    dt = frame_dt / cfg.substeps_per_frame
    state = HeatState(T0, T0 if cfg.tau > 0 else None, 0.0)
    frames = [T0]
    for f in range(1, n_frames):
        for k in range(cfg.substeps_per_frame):
            t0 = (f - 1) * frame_dt + k * dt
            state = step(state, cfg, average_power(layout, t0, t0 + dt), dt)
        frames.append(state.T)
    return FieldSequence(tuple(frames), frame_dt)


def mean_activity_power(layout: Layout) -> ScalarField:
    """Long-run average power map: duty-weighted for square waves, zero for finished bursts."""
    p = np.zeros(layout.spec.shape)
    for c in layout.cells:
        kind = c.activity.kind
        level = 1.0 if kind is ActivityKind.Constant else (
            c.activity.duty if kind is ActivityKind.Square else 0.0)
        if level:
            x0, y0, w, h = c.rect
            p[y0:y0 + h, x0:x0 + w] = c.peak_power * level / c.area
    return ScalarField(layout.spec, FieldKind.PowerW, p)


def steady_state(layout: Layout, cfg: SimConfig, power: ScalarField | None = None) -> ScalarField:
    """Solve ``0 = alpha*lap(T) + s - g*(T - T_amb)``.

    Uses the long-run average power unless an explicit ``power`` map is given.
    """
    spec = layout.spec
    if power is None:
        power = mean_activity_power(layout)
    g = cfg.ambient_conductance(spec)
    s = source_rate(cfg, power)
    if g == 0.0:
        if np.any(s):
            raise NoSteadyState("no steady state: adiabatic die with nonzero power")
        return ScalarField.constant(spec, cfg.t_ambient)
    if not np.any(s):
        return ScalarField.constant(spec, cfg.t_ambient)
    rise = solve_shifted(g, cfg.alpha, spec.pitch, s, tol=min(cfg.cg_tol, 1e-12))
    return ScalarField(spec, FieldKind.TemperatureC, cfg.t_ambient + rise)


def steady_state_residual(T: ScalarField, cfg: SimConfig, power: ScalarField) -> np.ndarray:
    """Pointwise ``alpha*lap(T) + s - g*(T - T_amb)`` in K/s."""
    g = cfg.ambient_conductance(T.spec)
    return (cfg.alpha * laplacian_array(T.values, T.spec.pitch) + source_rate(cfg, power)
            - g * (T.values - cfg.t_ambient))


def with_scheme(cfg: SimConfig, scheme: Scheme, substeps: int | None = None) -> SimConfig:
    return replace(cfg, scheme=scheme, substeps_per_frame=substeps or cfg.substeps_per_frame)
