import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chiptherm.fields import FieldKind, GridSpec, ScalarField
from chiptherm.layout import CellClass, CellPlacement, Layout
from chiptherm.physics import (ResidualConfig, Sink, laplacian, normalized_residual,
                               physics_residual, time_derivatives)
from chiptherm.solver import SimConfig, simulate, source_rate
from chiptherm.stencil import laplacian_adjoint, laplacian_array


def field(values, pitch=3.9e-6, kind=FieldKind.TemperatureC):
    values = np.asarray(values, dtype=float)
    return ScalarField(GridSpec(values.shape[1], values.shape[0], pitch), kind, values)


def naive_laplacian(v, pitch):
    H, W = v.shape
    out = np.empty_like(v)
    for i in range(H):
        for j in range(W):
            n = v[max(i - 1, 0), j]
            s = v[min(i + 1, H - 1), j]
            w = v[i, max(j - 1, 0)]
            e = v[i, min(j + 1, W - 1)]
            out[i, j] = (n + s + w + e - 4.0 * v[i, j]) / pitch ** 2
    return out


def coords(n, pitch):
    c = (np.arange(n) + 0.5) * pitch
    return np.meshgrid(c, c)


# --- laplacian ----------------------------------------------------------------

def test_laplacian_of_affine_vanishes_in_interior():
    pitch, a, b = 3.9e-6, 2.0e5, -7.0e4
    X, Y = coords(16, pitch)
    lap = laplacian(field(25 + a * X + b * Y, pitch)).values
    assert np.max(np.abs(lap[1:-1, 1:-1])) < 1e-9 * a / pitch
    # insulated walls: the mirror ghost copies the wall pixel, so the boundary
    # sees a one-sided flux of the imposed gradient
    np.testing.assert_allclose(lap[5, 0], a / pitch, rtol=1e-9)
    np.testing.assert_allclose(lap[0, 5], b / pitch, rtol=1e-9)


def test_laplacian_of_quadratic():
    pitch = 1e-3
    X, Y = coords(20, pitch)
    lap = laplacian(field(X ** 2 + Y ** 2, pitch)).values
    np.testing.assert_allclose(lap[1:-1, 1:-1], 4.0, rtol=1e-6)


def test_laplacian_matches_loop_oracle(rng):
    v = rng.normal(size=(9, 13))
    assert np.array_equal(laplacian(field(v, 2.0)).values, naive_laplacian(v, 2.0))
    assert np.array_equal(laplacian_array(v), naive_laplacian(v, 1.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.floats(-5, 5), st.floats(-5, 5),
       st.integers(0, 2 ** 31))
def test_laplacian_linear(h, w, a, b, seed):
    r = np.random.default_rng(seed)
    f, g = r.normal(size=(h, w)), r.normal(size=(h, w))
    lhs = laplacian_array(a * f + b * g)
    rhs = a * laplacian_array(f) + b * laplacian_array(g)
    scale = max(1.0, np.max(np.abs(lhs)))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * scale * 10


def test_laplacian_symmetric_and_conservative(rng):
    n = 7 * 6
    basis = np.eye(n).reshape(n, 7, 6)
    A = np.stack([laplacian_array(e).ravel() for e in basis], axis=1)
    np.testing.assert_allclose(A, A.T, atol=0)
    np.testing.assert_allclose(A.sum(axis=0), 0.0, atol=1e-12)
    g = rng.normal(size=(7, 6))
    assert np.array_equal(laplacian_adjoint(g), laplacian_array(g))


def test_laplacian_small_grid_rejected():
    with pytest.raises(ValueError):
        laplacian(field(np.zeros((2, 5))))


# --- time derivatives --------------------------------------------------------

def test_time_derivatives_constant():
    f = field(np.full((4, 4), 31.0))
    d = time_derivatives([f, f, f], 1e-3)
    assert np.all(d["dTdt"].values == 0) and np.all(d["d2Tdt2"].values == 0)


def test_time_derivatives_linear_and_quadratic(rng):
    c = rng.normal(size=(5, 5))
    dt = 0.25
    lin = [field(c * t) for t in (1 * dt, 2 * dt, 3 * dt)]
    d = time_derivatives(lin, dt)
    np.testing.assert_allclose(d["dTdt"].values, c, rtol=1e-12)
    np.testing.assert_allclose(d["d2Tdt2"].values, 0.0, atol=1e-12)
    quad = [field(c * t * t) for t in (1 * dt, 2 * dt, 3 * dt)]
    np.testing.assert_allclose(time_derivatives(quad, dt)["d2Tdt2"].values, 2 * c, rtol=1e-12)


def test_time_derivatives_validation():
    f = field(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        time_derivatives([f, f], 1.0)
    with pytest.raises(ValueError):
        time_derivatives([f, f, field(np.zeros((4, 5)))], 1.0)


# --- residual -----------------------------------------------------------------

def test_residual_of_uniform_frames_is_zero():
    f = field(np.full((6, 6), 40.0))
    cfg = ResidualConfig()
    assert physics_residual([f, f, f], cfg)["mean_sq"] == 0.0
    assert physics_residual([f, f], cfg)["mean_sq"] == 0.0


def test_residual_hand_example():
    # 4x4, unit pitch: a spike of 4 at (1, 1) relaxes to 3 in one step of dt = 1
    prev = np.zeros((4, 4))
    prev[1, 1] = 4.0
    nxt = prev.copy()
    nxt[1, 1] = 3.0
    cfg = ResidualConfig(alpha=0.5, tau=0.0, dt=1.0)
    r = physics_residual([field(prev, 1.0), field(nxt, 1.0)], cfg)["residual_field"].values
    # rate -1 at the spike; lap(nxt) is -12 there and +3 at its four neighbours
    expected = np.zeros((4, 4))
    expected[1, 1] = -1.0 + 0.5 * 12
    for i, j in ((0, 1), (2, 1), (1, 0), (1, 2)):
        expected[i, j] = -0.5 * 3
    np.testing.assert_allclose(r, expected, atol=1e-15)


def test_second_order_term_toggle(rng):
    frames = [field(25 + rng.random((5, 5))) for _ in range(3)]
    with_tau = ResidualConfig(tau=1e-7, dt=1e-4)
    without = ResidualConfig(tau=1e-7, dt=1e-4, include_second_order=False)
    a = physics_residual(frames, with_tau)["residual_field"].values
    b = physics_residual(frames, without)["residual_field"].values
    d2 = time_derivatives(frames, 1e-4)["d2Tdt2"].values
    np.testing.assert_allclose(a - b, 1e-7 * d2, rtol=1e-9, atol=1e-9)


def test_translation_changes_residual_by_sink_only(rng):
    frames = [field(25 + rng.random((6, 6))) for _ in range(3)]
    shifted = [f.with_values(f.values + 7.5) for f in frames]
    plain = ResidualConfig(dt=1e-3)
    r0 = physics_residual(frames, plain)["residual_field"].values
    r1 = physics_residual(shifted, plain)["residual_field"].values
    np.testing.assert_allclose(r1, r0, atol=1e-9)
    full = ResidualConfig(dt=1e-3, include_source_sink=True)
    sink = Sink(g=40.0, t_ambient=25.0)
    r0 = physics_residual(frames, full, sink=sink)["residual_field"].values
    r1 = physics_residual(shifted, full, sink=sink)["residual_field"].values
    np.testing.assert_allclose(r1 - r0, 40.0 * 7.5, rtol=1e-9)


def _solver_frames(frame_dt=2e-7, n=24):
    spec = GridSpec(n, n)
    cell = CellPlacement(CellClass.Sequential, (8, 9, 5, 4), 2e-3)
    layout = Layout(spec, (cell,), 2e-3)
    cfg = SimConfig(tau=0.0, substeps_per_frame=4)
    seq = simulate(layout, cfg, ScalarField.constant(spec, 25.0), frame_dt, 8)
    p = np.zeros(spec.shape)
    p[9:13, 8:13] = 2e-3 / 20
    power = ScalarField(spec, FieldKind.PowerW, p)
    src = ScalarField(spec, FieldKind.Dimensionless, source_rate(cfg, power))
    sink = Sink(cfg.ambient_conductance(spec), cfg.t_ambient)
    return seq, src, sink, cfg


def test_reversed_time_has_larger_residual():
    seq, src, sink, cfg = _solver_frames()
    rc = ResidualConfig(alpha=cfg.alpha, tau=0.0, dt=seq.dt, include_source_sink=True)
    fwd = physics_residual(seq.frames[3:6], rc, src, sink)["mean_sq"]
    rev = physics_residual(seq.frames[3:6][::-1], rc, src, sink)["mean_sq"]
    assert rev > fwd


def test_full_balance_smaller_than_homogeneous():
    seq, src, sink, cfg = _solver_frames()
    full = ResidualConfig(alpha=cfg.alpha, tau=0.0, dt=seq.dt, include_source_sink=True)
    homog = ResidualConfig(alpha=cfg.alpha, tau=0.0, dt=seq.dt)
    a = physics_residual(seq.frames[3:6], full, src, sink)["mean_sq"]
    b = physics_residual(seq.frames[3:6], homog)["mean_sq"]
    assert a < 0.05 * b


def test_normalized_residual_scaling(rng):
    prev = 25 + rng.random((6, 6))
    nxt = 25 + rng.random((6, 6))
    alpha, dt, pitch, span = 1e-4, 1e-3, 3.9e-6, 30.0
    raw = physics_residual([field(prev, pitch), field(nxt, pitch)],
                           ResidualConfig(alpha=alpha, tau=0.0, dt=dt))["residual_field"].values
    np.testing.assert_allclose(normalized_residual(prev, nxt, alpha, dt, pitch, span),
                               raw * dt / span, rtol=1e-10, atol=1e-12)


def test_residual_config_validation():
    for bad in ({"dt": 0.0}, {"alpha": -1.0}, {"tau": -1.0}):
        with pytest.raises(ValueError):
            ResidualConfig(**bad)
    f = field(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        physics_residual([f], ResidualConfig())
    with pytest.raises(ValueError):
        physics_residual([f, field(np.zeros((5, 4)))], ResidualConfig())

