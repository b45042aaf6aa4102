"""Residual-based correction of predicted compressible states (rho, u, v, P).

Residuals follow conservation of mass, momentum and energy with radiative
cooling. Fluxes are evaluated on the previous state only, so the residuals are
affine in the next-state conserved quantities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .field import Frame
from .stencil import divergence

GAMMA = 5.0 / 3.0
CHANNELS = ("rho", "u", "v", "P")


@dataclass(frozen=True)
class Residuals:
    r1: np.ndarray
    r2x: np.ndarray
    r2y: np.ndarray
    r3: np.ndarray


@dataclass(frozen=True)
class PhysicsCorrConfig:
    n_gd: int = 50
    eta_u: float = 1e-2
    eta_rho: float = 1e-2
    eta_p: float = 1e-2
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    tau_cool: float = math.inf
    dtau: float = 1.0
    max_halvings: int = 30

    def __post_init__(self):
        vals = (self.n_gd, self.eta_u, self.eta_rho, self.eta_p, self.lambda1, self.lambda2,
                self.lambda3, self.tau_cool, self.dtau)
        if any(not v > 0 for v in vals):
            raise ValueError("physics correction parameters must all be positive")


@dataclass
class CorrectionResult:
    frame: Frame
    history: list = field(default_factory=list)
    halvings: int = 0


def _fields(frame: Frame):
    missing = [c for c in CHANNELS if c not in frame.channels]
    if missing:
        raise KeyError(f"missing channels {missing}; need {CHANNELS}")
    return tuple(frame[c] for c in CHANNELS)


def energy(p, gamma=GAMMA):
    return p / (gamma - 1.0)


def flux_divergences(prev: Frame, gamma=GAMMA):
    """Divergences of mass, momentum and energy fluxes of the previous state."""
    rho, u, v, p = _fields(prev)
    g = prev.grid
    e = energy(p, gamma)
    div_mass = divergence(rho * u, rho * v, g)
    div_momx = divergence(rho * u * u + p, rho * u * v, g)
    div_momy = divergence(rho * u * v, rho * v * v + p, g)
    div_energy = divergence((e + p) * u, (e + p) * v, g)
    return div_mass, div_momx, div_momy, div_energy


def turbrad_residuals(state_next: Frame, state_prev: Frame, dtau: float = 1.0,
                      tau_cool: float = math.inf, gamma: float = GAMMA) -> Residuals:
    rho_n, u_n, v_n, p_n = _fields(state_next)
    rho_p, u_p, v_p, p_p = _fields(state_prev)
    dm, dmx, dmy, de = flux_divergences(state_prev, gamma)
    e_n, e_p = energy(p_n, gamma), energy(p_p, gamma)
    cool = 0.0 if math.isinf(tau_cool) else e_n / tau_cool
    return Residuals(
        r1=(rho_n - rho_p) / dtau + dm,
        r2x=(rho_n * u_n - rho_p * u_p) / dtau + dmx,
        r2y=(rho_n * v_n - rho_p * v_p) / dtau + dmy,
        r3=(e_n - e_p) / dtau + de + cool,
    )


def explicit_step(prev: Frame, dtau: float = 1.0, tau_cool: float = math.inf,
                  gamma: float = GAMMA) -> Frame:
    """One forward-Euler step of the same discrete operators; its residuals vanish."""
    rho_p, u_p, v_p, p_p = _fields(prev)
    dm, dmx, dmy, de = flux_divergences(prev, gamma)
    rho = rho_p - dtau * dm
    u = (rho_p * u_p - dtau * dmx) / rho
    v = (rho_p * v_p - dtau * dmy) / rho
    rate = 1.0 / dtau + (0.0 if math.isinf(tau_cool) else 1.0 / tau_cool)
    e = (energy(p_p, gamma) / dtau - de) / rate
    p = e * (gamma - 1.0)
    chans = dict(prev.channels)
    chans.update(rho=rho, u=u, v=v, P=p)
    return Frame(prev.grid, chans, prev.tau + 1)


def gd_loss(frame: Frame, prev: Frame, cfg: PhysicsCorrConfig, gamma=GAMMA) -> float:
    r = turbrad_residuals(frame, prev, cfg.dtau, cfg.tau_cool, gamma)
    return float(cfg.lambda1 * np.sum(r.r1**2)
                 + cfg.lambda2 * (np.sum(r.r2x**2) + np.sum(r.r2y**2))
                 + cfg.lambda3 * np.sum(r.r3**2))


def gd_gradient(frame: Frame, prev: Frame, cfg: PhysicsCorrConfig, gamma=GAMMA) -> dict:
    """Analytic gradient of the residual loss with respect to the next-state channels."""
    rho, u, v, _ = _fields(frame)
    r = turbrad_residuals(frame, prev, cfg.dtau, cfg.tau_cool, gamma)
    inv = 1.0 / cfg.dtau
    rate = inv + (0.0 if math.isinf(cfg.tau_cool) else 1.0 / cfg.tau_cool)
    return {
        "rho": 2 * cfg.lambda1 * r.r1 * inv + 2 * cfg.lambda2 * (r.r2x * u + r.r2y * v) * inv,
        "u": 2 * cfg.lambda2 * r.r2x * rho * inv,
        "v": 2 * cfg.lambda2 * r.r2y * rho * inv,
        "P": 2 * cfg.lambda3 * r.r3 * rate / (gamma - 1.0),
    }


def balanced_weights(frame: Frame, prev: Frame, cfg: PhysicsCorrConfig, gamma=GAMMA) -> PhysicsCorrConfig:
    """Copy of ``cfg`` with lambdas set so each residual starts with unit weight."""
    r = turbrad_residuals(frame, prev, cfg.dtau, cfg.tau_cool, gamma)
    norms = [np.sum(r.r1**2), np.sum(r.r2x**2) + np.sum(r.r2y**2), np.sum(r.r3**2)]
    lam = [1.0 / n if n > 0 else 1.0 for n in norms]
    return PhysicsCorrConfig(**{**cfg.__dict__, "lambda1": lam[0], "lambda2": lam[1], "lambda3": lam[2]})


def physics_correct(frame_pred: Frame, frame_prev: Frame, cfg: PhysicsCorrConfig,
                    gamma: float = GAMMA) -> CorrectionResult:
    """Gradient descent on the weighted residual loss over the predicted state.

    A trial step that raises the loss is rejected and all step sizes are halved,
    so accepted iterates never increase the loss. Non-finite trials stop the
    descent and the best iterate is returned.
    """
    etas = {"u": cfg.eta_u, "v": cfg.eta_u, "rho": cfg.eta_rho, "P": cfg.eta_p}
    cur = frame_pred
    loss = gd_loss(cur, frame_prev, cfg, gamma)
    result = CorrectionResult(cur, [loss])
    for _ in range(cfg.n_gd):
        grad = gd_gradient(cur, frame_prev, cfg, gamma)
        if all(not np.any(g) for g in grad.values()):
            break
        while True:
            trial_ch = {k: cur[k] - etas[k] * grad[k] for k in grad}
            if not all(np.all(np.isfinite(a)) for a in trial_ch.values()):
                result.frame = cur
                return result
            trial = cur.replace(**trial_ch)
            trial_loss = gd_loss(trial, frame_prev, cfg, gamma)
            if trial_loss <= loss:
                break
            result.halvings += 1
            if result.halvings > cfg.max_halvings:
                result.frame = cur
                return result
            etas = {k: e * 0.5 for k, e in etas.items()}
        cur, loss = trial, trial_loss
        result.history.append(loss)
    result.frame = cur
    return result
