"""Transient on-chip thermal maps: finite-difference solver, synthetic dataset
builder, physics-regularized conditional surrogate and evaluation tools."""

from .fields import FieldKind, FieldSequence, GridSpec, ScalarField, field_stats, resample
from .layout import ActivityKind, ActivityProfile, CellClass, CellPlacement, Layout, generate_layout
from .solver import Boundary, HeatState, Scheme, SimConfig, simulate, stable_dt, steady_state, step

__version__ = "0.1.0"

__all__ = [
    "FieldKind", "FieldSequence", "GridSpec", "ScalarField", "field_stats", "resample",
    "ActivityKind", "ActivityProfile", "CellClass", "CellPlacement", "Layout", "generate_layout",
    "Boundary", "HeatState", "Scheme", "SimConfig", "simulate", "stable_dt", "steady_state",
    "step"
]
