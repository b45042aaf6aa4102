"""Finite-time Lyapunov exponents from analytic or gridded velocity fields."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .field import Boundary, Sequence

CHI_FLOOR = 1e-8


class FlowError(FloatingPointError):
    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class NoChaoticStretchingError(ValueError):
    """No seed point has a positive exponent."""


class AnalyticFlow:
    """Velocity given by ``fn(x, y, t) -> (u, v)``; positions are not wrapped."""

    periodic = None

    def __init__(self, fn: Callable):
        self.fn = fn

    def __call__(self, x, y, t):
        return self.fn(x, y, t)

    def wrap(self, x, y):
        return x, y


class SequenceFlow:
    """Bilinear-in-space, linear-in-time interpolation of a frame sequence.

    Frame ``k`` sits at time ``tau_k``; grid node ``(i, j)`` at ``(i dx, j dy)``.
    Periodic grids wrap positions, replicate grids clamp them.
    """

    def __init__(self, seq: Sequence, velocity=None):
        velocity = velocity or seq.velocity_channels
        self.grid = seq.grid
        self.times = np.array([f.tau for f in seq], dtype=float)
        self.u = np.stack([f[velocity[0]] for f in seq])
        self.v = np.stack([f[velocity[1]] for f in seq])
        self.periodic = self.grid.boundary is Boundary.PERIODIC

    def wrap(self, x, y):
        lx, ly = self.grid.lengths
        if self.periodic:
            return np.mod(x, lx), np.mod(y, ly)
        return (np.clip(x, 0, (self.grid.nx - 1) * self.grid.dx),
                np.clip(y, 0, (self.grid.ny - 1) * self.grid.dy))

    def _spatial(self, arr, x, y):
        g = self.grid
        fx, fy = x / g.dx, y / g.dy
        i0, j0 = np.floor(fx).astype(int), np.floor(fy).astype(int)
        ax, ay = fx - i0, fy - j0
        if self.periodic:
            i0, j0 = i0 % g.nx, j0 % g.ny
            i1, j1 = (i0 + 1) % g.nx, (j0 + 1) % g.ny
        else:
            i0, j0 = np.clip(i0, 0, g.nx - 1), np.clip(j0, 0, g.ny - 1)
            i1, j1 = np.clip(i0 + 1, 0, g.nx - 1), np.clip(j0 + 1, 0, g.ny - 1)
        return ((1 - ax) * (1 - ay) * arr[..., i0, j0] + ax * (1 - ay) * arr[..., i1, j0]
                + (1 - ax) * ay * arr[..., i0, j1] + ax * ay * arr[..., i1, j1])

    def __call__(self, x, y, t):
        x, y = self.wrap(x, y)
        t = float(np.clip(t, self.times[0], self.times[-1]))
        k = int(np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)) \
            if len(self.times) > 1 else 0
        if len(self.times) == 1:
            return self._spatial(self.u[0], x, y), self._spatial(self.v[0], x, y)
        w = (t - self.times[k]) / (self.times[k + 1] - self.times[k])
        u = (1 - w) * self._spatial(self.u[k], x, y) + w * self._spatial(self.u[k + 1], x, y)
        v = (1 - w) * self._spatial(self.v[k], x, y) + w * self._spatial(self.v[k + 1], x, y)
        return u, v


def advect(flow, x0, y0, tau0: float, dtau: float, steps: int = 100, wrap: bool = True):
    """Classical RK4 particle integration over ``dtau`` (may be negative).

    With ``wrap=False`` positions are left unwrapped, which keeps separations of
    neighbouring particles meaningful on periodic domains.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = np.array(x0, dtype=float, copy=True)
    y = np.array(y0, dtype=float, copy=True)
    h = dtau / steps
    t = tau0
    for _ in range(steps):
        k1 = flow(x, y, t)
        k2 = flow(x + 0.5 * h * k1[0], y + 0.5 * h * k1[1], t + 0.5 * h)
        k3 = flow(x + 0.5 * h * k2[0], y + 0.5 * h * k2[1], t + 0.5 * h)
        k4 = flow(x + h * k3[0], y + h * k3[1], t + h)
        x = x + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y = y + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        t += h
        bad = ~(np.isfinite(x) & np.isfinite(y))
        if np.any(bad):
            idx = int(np.flatnonzero(bad.ravel())[0])
            raise FlowError(f"particle {idx} left the finite domain", idx)
    if wrap:
        x, y = flow.wrap(x, y)
    return x, y


@dataclass
class FtleField:
    x: np.ndarray
    y: np.ndarray
    chi: np.ndarray
    dtau: float
    tau0: float

    @property
    def lyapunov_time(self) -> np.ndarray:
        """``1 / chi`` where chi exceeds the floor, ``inf`` elsewhere."""
        out = np.full(self.chi.shape, np.inf)
        pos = self.chi > CHI_FLOOR
        out[pos] = 1.0 / self.chi[pos]
        return out

    def write_csv(self, path) -> None:
        tl = self.lyapunov_time
        rows = np.column_stack([self.x.ravel(), self.y.ravel(), self.chi.ravel(), tl.ravel()])
        np.savetxt(path, rows, delimiter=",", header="x,y,chi,tau_L", comments="", fmt="%.17g")


def max_stretch(f11, f12, f21, f22):
    """Largest eigenvalue of C = F^T F via trace and determinant."""
    c11 = f11**2 + f21**2
    c12 = f11 * f12 + f21 * f22
    c22 = f12**2 + f22**2
    half_tr = 0.5 * (c11 + c22)
    det = c11 * c22 - c12**2
    return half_tr + np.sqrt(np.maximum(half_tr**2 - det, 0.0))


def ftle_field(flow, xs, ys, tau0: float, dtau: float, h_fd: float, steps: int = 100) -> FtleField:
    """FTLE on the seed grid ``xs`` x ``ys`` using +/- h_fd auxiliary particles."""
    if dtau == 0:
        raise ValueError("dtau must be nonzero")
    if not h_fd > 0:
        raise ValueError("h_fd must be positive")
    X, Y = np.meshgrid(np.asarray(xs, float), np.asarray(ys, float), indexing="ij")
    sx = np.concatenate([X + h_fd, X - h_fd, X, X]).ravel()
    sy = np.concatenate([Y, Y, Y + h_fd, Y - h_fd]).ravel()
    fx, fy = advect(flow, sx, sy, tau0, dtau, steps, wrap=False)
    fx = fx.reshape(4, *X.shape)
    fy = fy.reshape(4, *X.shape)
    f11 = (fx[0] - fx[1]) / (2 * h_fd)
    f21 = (fy[0] - fy[1]) / (2 * h_fd)
    f12 = (fx[2] - fx[3]) / (2 * h_fd)
    f22 = (fy[2] - fy[3]) / (2 * h_fd)
    lam = max_stretch(f11, f12, f21, f22)
    with np.errstate(divide="ignore", invalid="ignore"):
        chi = np.log(np.sqrt(lam)) / abs(dtau)
    return FtleField(X, Y, chi, dtau, tau0)


def global_lyapunov_time(field: FtleField) -> float:
    finite = field.chi[np.isfinite(field.chi)]
    if finite.size == 0 or finite.max() <= CHI_FLOOR:
        raise NoChaoticStretchingError("no chaotic stretching: max FTLE is not positive")
    return float(1.0 / finite.max())


# --- built-in flows ---------------------------------------------------------


def double_gyre(A: float = 0.1, eps: float = 0.25, omega: float = 2 * np.pi / 10) -> AnalyticFlow:
    """Time-periodic double gyre on [0, 2] x [0, 1]."""
    def fn(x, y, t):
        a = eps * np.sin(omega * t)
        b = 1 - 2 * a
        f = a * x**2 + b * x
        dfdx = 2 * a * x + b
        u = -np.pi * A * np.sin(np.pi * f) * np.cos(np.pi * y)
        v = np.pi * A * np.cos(np.pi * f) * np.sin(np.pi * y) * dfdx
        return u, v
    return AnalyticFlow(fn)


def saddle(a: float = 0.5) -> AnalyticFlow:
    return AnalyticFlow(lambda x, y, t: (a * x, -a * y))


def rotation(rate: float = 1.0) -> AnalyticFlow:
    return AnalyticFlow(lambda x, y, t: (-rate * y, rate * x))


def uniform(cx: float = 1.0, cy: float = 0.0) -> AnalyticFlow:
    return AnalyticFlow(lambda x, y, t: (np.full_like(x, cx), np.full_like(y, cy)))


BUILTIN_FLOWS = {"double-gyre": double_gyre, "saddle": saddle, "rotation": rotation,
                 "uniform": uniform}
