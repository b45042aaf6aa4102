import numpy as np
import pytest

from scoreflow.field import Frame, Grid2, Sequence
from scoreflow.ftle import (
    AnalyticFlow, FlowError, FtleField, NoChaoticStretchingError, SequenceFlow, advect,
    double_gyre, ftle_field, global_lyapunov_time, max_stretch, rotation, saddle, uniform,
)

SEEDS = np.linspace(-1, 1, 9)


def test_zero_velocity():
    flow = uniform(0.0, 0.0)
    x, y = advect(flow, SEEDS, SEEDS[::-1], 0.0, 3.0, steps=10)
    assert np.array_equal(x, SEEDS) and np.array_equal(y, SEEDS[::-1])


def test_uniform_translation():
    x, y = advect(uniform(0.3, -1.2), SEEDS, SEEDS, 0.0, 2.5, steps=7)
    assert np.allclose(x, SEEDS + 0.75, atol=1e-14) and np.allclose(y, SEEDS - 3.0, atol=1e-14)


def test_rotation_closes_orbit():
    x0, y0 = np.array([1.0, 0.3]), np.array([0.0, -0.5])
    x, y = advect(rotation(), x0, y0, 0.0, 2 * np.pi, steps=100)
    assert np.max(np.hypot(x - x0, y - y0)) < 1e-6


def test_advect_steps_validated():
    with pytest.raises(ValueError):
        advect(uniform(), SEEDS, SEEDS, 0.0, 1.0, steps=0)


def test_flow_error_reports_index():
    def blow(x, y, t):
        u = np.zeros_like(x)
        u[2] = np.nan
        return u, np.zeros_like(y)
    with pytest.raises(FlowError) as info:
        advect(AnalyticFlow(blow), np.zeros(4), np.zeros(4), 0.0, 1.0, steps=2)
    assert info.value.index == 2


@pytest.mark.parametrize("a,dtau", [(0.25, 4.0), (0.5, 2.0), (1.0, 1.0)])
def test_saddle_exponent(a, dtau):
    f = ftle_field(saddle(a), SEEDS, SEEDS, 0.0, dtau, 1e-4)
    assert np.allclose(f.chi, a, rtol=0.02)


def test_saddle_backward_invariance():
    fwd = ftle_field(saddle(0.5), SEEDS, SEEDS, 0.0, 2.0, 1e-4)
    bwd = ftle_field(saddle(0.5), SEEDS, SEEDS, 0.0, -2.0, 1e-4)
    assert np.allclose(fwd.chi, bwd.chi, rtol=1e-6)


def test_saddle_global_time():
    f = ftle_field(saddle(0.5), SEEDS, SEEDS, 0.0, 2.0, 1e-4)
    assert global_lyapunov_time(f) == pytest.approx(2.0, rel=0.02)
    assert global_lyapunov_time(f) == 1.0 / f.chi.max()


@pytest.mark.parametrize("flow", [uniform(0.7, 0.2), rotation(1.3)])
def test_rigid_motion_zero_ftle(flow):
    f = ftle_field(flow, SEEDS, SEEDS, 0.0, 1.5, 1e-3)
    assert np.all(np.abs(f.chi[1:-1, 1:-1]) <= 1e-4)


def test_lyapunov_time_reciprocal():
    f = ftle_field(double_gyre(), np.linspace(0.1, 1.9, 10), np.linspace(0.1, 0.9, 5),
                   0.0, 10.0, 1e-3)
    pos = f.chi > 0
    assert np.any(pos)
    assert np.allclose(f.lyapunov_time[pos] * f.chi[pos], 1.0, rtol=1e-15)


def test_lyapunov_time_floor():
    f = FtleField(np.zeros(3), np.zeros(3), np.array([0.0, -1.0, 2.0]), 1.0, 0.0)
    assert np.array_equal(f.lyapunov_time, [np.inf, np.inf, 0.5])


def test_uniform_has_no_stretching():
    f = ftle_field(uniform(), SEEDS, SEEDS, 0.0, 1.0, 1e-3)
    assert np.all(f.chi <= 1e-6)
    with pytest.raises(NoChaoticStretchingError):
        global_lyapunov_time(f)


def test_dtau_and_hfd_validated():
    with pytest.raises(ValueError):
        ftle_field(saddle(), SEEDS, SEEDS, 0.0, 0.0, 1e-3)
    with pytest.raises(ValueError):
        ftle_field(saddle(), SEEDS, SEEDS, 0.0, 1.0, 0.0)


def test_max_stretch_closed_form(rng):
    F = rng.standard_normal((20, 2, 2))
    lam = max_stretch(F[:, 0, 0], F[:, 0, 1], F[:, 1, 0], F[:, 1, 1])
    ref = [np.linalg.eigvalsh(f.T @ f).max() for f in F]
    assert np.allclose(lam, ref, rtol=1e-10)


def test_double_gyre_ridge_stable():
    def argmax_pos(nx, ny):
        xs = np.linspace(0.0, 2.0, nx)
        ys = np.linspace(0.0, 1.0, ny)
        f = ftle_field(double_gyre(), xs, ys, 0.0, 15.0, 1e-4, steps=150)
        i, j = np.unravel_index(np.argmax(f.chi), f.chi.shape)
        return xs[i], ys[j], xs[1] - xs[0]
    x1, y1, h = argmax_pos(21, 11)
    x2, y2, _ = argmax_pos(41, 21)
    assert abs(x1 - x2) < h and abs(y1 - y2) < h


def _shear_sequence(periodic=True):
    g = Grid2(16, 8, 0.25, 0.25, "periodic" if periodic else "replicate")
    frames = [Frame(g, {"u": np.full(g.shape, 0.5), "v": np.zeros(g.shape)}, t) for t in range(3)]
    return Sequence(frames)


def test_sequence_flow_uniform():
    flow = SequenceFlow(_shear_sequence())
    x, y = advect(flow, np.array([0.1, 3.9]), np.array([0.2, 1.0]), 0.0, 2.0, steps=8)
    assert np.allclose(x, np.mod([1.1, 4.9], 4.0)) and np.allclose(y, [0.2, 1.0])


def test_sequence_flow_clamps():
    flow = SequenceFlow(_shear_sequence(periodic=False))
    x, _ = advect(flow, np.array([3.5]), np.array([0.5]), 0.0, 2.0, steps=8)
    assert x[0] == pytest.approx(15 * 0.25)


def test_sequence_flow_interpolates_time():
    g = Grid2(4, 4)
    frames = [Frame(g, {"u": np.full(g.shape, c), "v": np.zeros(g.shape)}, t)
              for t, c in enumerate([0.0, 2.0])]
    u, _ = SequenceFlow(Sequence(frames))(np.array([0.3]), np.array([0.7]), 0.25)
    assert u[0] == pytest.approx(0.5)
