"""Flow diagnostics: energy spectra, field metrics, vorticity and Q-criterion."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .field import Boundary, Frame, Grid2, Sequence, rfft_weights, shell_index, wavenumber_grid
from .stencil import central_diff

KL_BINS = 64
KL_SMOOTHING = 1e-10


# --- energy spectrum ----------------------------------------------------------


@dataclass
class SpectrumResult:
    """Shell energies per frame and their time average.

    Wavenumbers are integer shells in units of 2*pi / L_max.
    """

    shells: np.ndarray
    per_frame: np.ndarray
    mean: np.ndarray

    def write_csv(self, path) -> None:
        np.savetxt(path, np.column_stack([self.shells, self.mean]), delimiter=",",
                   header="shell,energy", comments="", fmt=["%d", "%.17g"])

    def write_dat(self, path) -> None:
        """Two-column whitespace data for gnuplot."""
        np.savetxt(path, np.column_stack([self.shells, self.mean]), fmt=["%d", "%.17g"])


def frame_spectrum(grid: Grid2, u: np.ndarray, v: np.ndarray, n_shells: int | None = None):
    """Shell-summed kinetic energy of velocity fluctuations for one frame."""
    if grid.boundary is not Boundary.PERIODIC:
        raise ValueError("energy spectra need a periodic grid")
    kx, ky = wavenumber_grid(grid)
    shells = shell_index(kx, ky)
    w = rfft_weights(grid.ny)[None, :]
    power = np.zeros(shells.shape)
    for comp in (u, v):
        fluct = comp - comp.mean()
        power += np.abs(np.fft.rfft2(fluct)) ** 2
    power *= w / (2.0 * grid.size**2)
    n = shells.max() + 1 if n_shells is None else n_shells
    return np.bincount(shells.ravel(), weights=power.ravel(), minlength=n)[:n]


def energy_spectrum(frames: Sequence | Iterable[Frame], velocity=None) -> SpectrumResult:
    """Time-averaged shell energy spectrum (shell 0 dropped; fluctuations have no mean)."""
    if velocity is None:
        velocity = frames.velocity_channels if isinstance(frames, Sequence) else ("u", "v")
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    grid = frames[0].grid
    kx, ky = wavenumber_grid(grid)
    n = int(shell_index(kx, ky).max()) + 1
    rows = np.array([frame_spectrum(grid, f[velocity[0]], f[velocity[1]], n)[1:] for f in frames])
    return SpectrumResult(np.arange(1, n), rows, rows.mean(axis=0))


def fit_spectrum_slope(result: SpectrumResult | tuple, k_min: int, k_max: int) -> float:
    """Least-squares slope of log E against log k over shells k_min..k_max."""
    shells, energy = (result.shells, result.mean) if isinstance(result, SpectrumResult) else result
    sel = (shells >= k_min) & (shells <= k_max) & (energy > 0)
    slope, _ = np.polyfit(np.log(shells[sel]), np.log(energy[sel]), 1)
    return float(slope)


def log_mse(e_gt, e_pred, eps: float = 1e-12) -> float:
    """Mean squared difference of log spectra."""
    if isinstance(e_gt, SpectrumResult) and isinstance(e_pred, SpectrumResult):
        if not np.array_equal(e_gt.shells, e_pred.shells):
            raise ValueError("spectra are defined on different shells")
        a, b = e_gt.mean, e_pred.mean
    else:
        a, b = np.asarray(e_gt, dtype=float), np.asarray(e_pred, dtype=float)
        if a.shape != b.shape:
            raise ValueError("spectra are defined on different shells")
    return float(np.mean((np.log(a + eps) - np.log(b + eps)) ** 2))


# --- pointwise metrics ------------------------------------------------------


def _channel_pairs(pred, gt, channels):
    if isinstance(pred, Frame):
        names = channels or pred.names
        return [(pred[c], gt[c]) for c in names]
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return [(pred, gt)]


def mse(pred, gt, channels=None) -> float:
    return float(np.mean([np.mean((p - g) ** 2) for p, g in _channel_pairs(pred, gt, channels)]))


def _pcc(p, g):
    p = p.ravel() - p.mean()
    g = g.ravel() - g.mean()
    denom = np.sqrt((p @ p) * (g @ g))
    if denom == 0:
        return None
    return float(np.clip((p @ g) / denom, -1.0, 1.0))


def pcc(pred, gt, channels=None) -> float | None:
    """Pearson correlation averaged over channels; ``None`` if every channel is constant."""
    vals = [r for r in (_pcc(p, g) for p, g in _channel_pairs(pred, gt, channels)) if r is not None]
    return float(np.mean(vals)) if vals else None


def kl_divergence(p, q) -> float:
    p, q = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
    nz = p > 0
    return float(np.sum(p[nz] * np.log(p[nz] / q[nz])))


def histogram_pair(a, b, bins: int = KL_BINS, smoothing: float = KL_SMOOTHING):
    """Smoothed, normalized histograms of ``a`` and ``b`` over their joint range."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    a, b = np.ravel(a), np.ravel(b)
    lo, hi = min(a.min(), b.min()), max(a.max(), b.max())
    if hi == lo:
        hi = lo + 1.0
    ha, _ = np.histogram(a, bins=bins, range=(lo, hi))
    hb, _ = np.histogram(b, bins=bins, range=(lo, hi))
    ha = ha / ha.sum() + smoothing
    hb = hb / hb.sum() + smoothing
    return ha / ha.sum(), hb / hb.sum()


def kl_hist(pred, gt, bins: int = KL_BINS, channels=None) -> float:
    """KL(gt || pred) between value histograms, averaged over channels."""
    vals = []
    for p, g in _channel_pairs(pred, gt, channels):
        hg, hp = histogram_pair(g, p, bins)
        vals.append(kl_divergence(hg, hp))
    return float(np.mean(vals))


@dataclass
class MetricsReport:
    mse: list = field(default_factory=list)
    pcc: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    log_mse: float | None = None

    @property
    def mean_mse(self) -> float:
        return float(np.mean(self.mse))

    @property
    def mean_pcc(self) -> float | None:
        vals = [p for p in self.pcc if p is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_kl(self) -> float:
        return float(np.mean(self.kl))

    def as_dict(self) -> dict[str, str]:
        fmt = lambda x: "degenerate" if x is None else repr(float(x))  # noqa: E731
        out = {"n_frames": str(len(self.mse)), "mse": fmt(self.mean_mse),
               "pcc": fmt(self.mean_pcc), "kl": fmt(self.mean_kl)}
        if self.log_mse is not None:
            out["log_mse"] = fmt(self.log_mse)
        for i, (m, p, k) in enumerate(zip(self.mse, self.pcc, self.kl)):
            out[f"mse.{i}"], out[f"pcc.{i}"], out[f"kl.{i}"] = fmt(m), fmt(p), fmt(k)
        return out

    def write(self, path) -> None:
        Path(path).write_text("".join(f"{k}={v}\n" for k, v in self.as_dict().items()),
                              encoding="utf-8")


def compare_sequences(pred: Sequence, gt: Sequence, channels=None, bins: int = KL_BINS,
                      spectrum: bool = True) -> MetricsReport:
    """Per-frame MSE/PCC/KL (frames paired by position) and the spectral log-MSE."""
    if len(pred) != len(gt):
        raise ValueError(f"sequence lengths differ: {len(pred)} vs {len(gt)}")
    rep = MetricsReport()
    for p, g in zip(pred, gt):
        rep.mse.append(mse(p, g, channels))
        rep.pcc.append(pcc(p, g, channels))
        rep.kl.append(kl_hist(p, g, bins, channels))
    vel = gt.velocity_channels
    if spectrum and all(c in gt.names for c in vel) and gt.grid.boundary is Boundary.PERIODIC:
        rep.log_mse = log_mse(energy_spectrum(gt, vel), energy_spectrum(pred, vel))
    return rep


# --- vortical structure -----------------------------------------------------


def velocity_gradients(u, v, grid: Grid2):
    b = grid.boundary
    return (central_diff(u, 0, grid.dx, b), central_diff(u, 1, grid.dy, b),
            central_diff(v, 0, grid.dx, b), central_diff(v, 1, grid.dy, b))


def vorticity(u, v, grid: Grid2) -> np.ndarray:
    """Scalar vorticity dv/dx - du/dy."""
    _, uy, vx, _ = velocity_gradients(u, v, grid)
    return vx - uy


def q_criterion(u, v, grid: Grid2) -> np.ndarray:
    """Q = (|Omega|^2 - |D|^2) / 2 with D, Omega the strain and rotation rate tensors."""
    ux, uy, vx, vy = velocity_gradients(u, v, grid)
    omega = vx - uy
    rot = 0.5 * omega**2
    strain = ux**2 + vy**2 + 0.5 * (uy + vx) ** 2
    return 0.5 * (rot - strain)


def velocity_magnitude_series(seq: Sequence | Iterable[Frame], velocity=None) -> np.ndarray:
    if velocity is None:
        velocity = seq.velocity_channels if isinstance(seq, Sequence) else ("u", "v")
    return np.array([np.mean(np.hypot(f[velocity[0]], f[velocity[1]])) for f in seq])
