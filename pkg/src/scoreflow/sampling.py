"""Reverse-time samplers and autoregressive rollout.

A score function is any callable ``score_fn(x, t) -> array`` with ``x`` of
shape ``(batch, dim)`` and scalar ``t``. Time runs on the uniform grid
``t_i = i / N``; step ``i + 1 -> i`` evaluates coefficients at ``t_{i+1}``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable

import numpy as np

from .field import Frame, Sequence
from .sde import SdeKind, SdeSpec, beta, drift_diffusion, prior_std

log = logging.getLogger(__name__)

METHODS = ("em", "pf_ode", "pc")


class SamplingError(FloatingPointError):
    """Sampler state became non-finite."""

    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


class RolloutError(RuntimeError):
    """Rollout aborted; ``partial`` holds the frames produced so far."""

    def __init__(self, msg, partial: Sequence):
        super().__init__(msg)
        self.partial = partial


@dataclass(frozen=True)
class SamplerConfig:
    method: str = "em"
    n_steps: int = 1000
    n_corr: int = 1
    snr: float = 0.16
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown sampler method {self.method!r}; choose from {METHODS}")
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        if self.n_corr < 0:
            raise ValueError("n_corr must be >= 0")
        if not self.snr > 0:
            raise ValueError("snr must be positive")


def simulate_forward(spec: SdeSpec, x0, n_steps: int, rng: np.random.Generator,
                     record: Iterable[float] = ()):
    """Euler-Maruyama integration of the forward SDE on [0, 1].

    Returns the state at t = 1 and a dict of states at each time in ``record``
    (matched to the nearest grid point).
    """
    x = np.array(x0, dtype=float, copy=True)
    dt = 1.0 / n_steps
    marks = {int(round(r * n_steps)): r for r in record}
    snaps = {}
    for i in range(n_steps):
        f, g = drift_diffusion(spec, x, i * dt)
        x = x + f * dt + g * np.sqrt(dt) * rng.standard_normal(x.shape)
        if i + 1 in marks:
            snaps[marks[i + 1]] = x.copy()
    return x, snaps


def _prior(spec, shape, rng):
    return prior_std(spec) * rng.standard_normal(shape)


def _check(x, step):
    if not np.all(np.isfinite(x)):
        raise SamplingError(f"non-finite state at step {step}", step)


def _rng(cfg, rng):
    return np.random.default_rng(cfg.seed) if rng is None else rng


def _predictor(score_fn, spec, x, t, dt, rng, stochastic=True):
    f, g = drift_diffusion(spec, x, t)
    s = score_fn(x, t)
    if stochastic:
        return x - (f - g**2 * s) * dt + g * np.sqrt(dt) * rng.standard_normal(x.shape)
    return x - (f - 0.5 * g**2 * s) * dt


def sample_backward_em(score_fn: Callable, spec: SdeSpec, shape, cfg: SamplerConfig,
                       x_init=None, rng=None) -> np.ndarray:
    """Euler-Maruyama integration of the reverse-time SDE from t = 1 to 0."""
    return sample_pc(score_fn, spec, shape, replace(cfg, n_corr=0), x_init, rng)


def sample_pf_ode(score_fn: Callable, spec: SdeSpec, shape, cfg: SamplerConfig,
                  x_init=None, rng=None) -> np.ndarray:
    """Forward-Euler integration of the probability-flow ODE from t = 1 to 0."""
    rng = _rng(cfg, rng)
    x = _prior(spec, shape, rng) if x_init is None else np.array(x_init, dtype=float)
    n = cfg.n_steps
    dt = 1.0 / n
    for i in range(n - 1, -1, -1):
        x = _predictor(score_fn, spec, x, (i + 1) * dt, dt, rng, stochastic=False)
        _check(x, i)
    return x


def _norm(a):
    """Mean over the batch of per-sample L2 norms."""
    return float(np.mean(np.sqrt((a.reshape(len(a), -1) ** 2).sum(axis=1))))


def langevin_step(score_fn, spec: SdeSpec, x, t, snr, rng, n):
    """One corrector step; returns ``(x, taken)``. Skipped if the score vanishes."""
    s = score_fn(x, t)
    z = rng.standard_normal(x.shape)
    s_norm = _norm(s)
    if s_norm == 0.0:
        log.info("zero score at t=%g: corrector step skipped", t)
        return x, False
    alpha = 1.0 - beta(spec, t) / n if spec.kind is SdeKind.VP else 1.0
    delta = 2.0 * alpha * (snr * _norm(z) / s_norm) ** 2
    return x + delta * s + np.sqrt(2.0 * delta) * z, True


def sample_pc(score_fn: Callable, spec: SdeSpec, shape, cfg: SamplerConfig,
              x_init=None, rng=None) -> np.ndarray:
    """Predictor-corrector sampling: one reverse EM step then ``n_corr`` Langevin steps.

    With ``n_corr = 0`` this is plain reverse-time Euler-Maruyama.
    """
    n = cfg.n_steps
    if cfg.n_corr and spec.kind is SdeKind.VP and spec.beta_max >= n:
        raise ValueError(f"N={n} too coarse for the VP corrector: 1 - beta(t)/N must stay positive")
    rng = _rng(cfg, rng)
    x = _prior(spec, shape, rng) if x_init is None else np.array(x_init, dtype=float)
    dt = 1.0 / n
    for i in range(n - 1, -1, -1):
        x = _predictor(score_fn, spec, x, (i + 1) * dt, dt, rng)
        for _ in range(cfg.n_corr):
            x, _ = langevin_step(score_fn, spec, x, i * dt, cfg.snr, rng, n)
        _check(x, i)
    return x


def sample(score_fn: Callable, spec: SdeSpec, shape, cfg: SamplerConfig, x_init=None, rng=None):
    """Dispatch on ``cfg.method``."""
    if cfg.method == "em":
        return sample_backward_em(score_fn, spec, shape, cfg, x_init, rng)
    if cfg.method == "pf_ode":
        return sample_pf_ode(score_fn, spec, shape, cfg, x_init, rng)
    return sample_pc(score_fn, spec, shape, cfg, x_init, rng)


def rollout(net, spec: SdeSpec, initial: Frame, n_steps: int, cfg: SamplerConfig,
            hooks: Iterable[Callable] = (), records: list | None = None,
            metadata: dict | None = None) -> Sequence:
    """Autoregressive generation conditioned on the previous generated frame.

    Each hook is called as ``hook(frame, previous_frame) -> frame`` after sampling.
    Step ``tau`` draws from its own stream seeded by ``(cfg.seed, tau)``.
    """
    width = initial.flat().size
    if net.cond_dim != width or net.data_dim != width:
        raise ValueError(f"network widths ({net.data_dim}, {net.cond_dim}) do not match frame width {width}")
    hooks = list(hooks)
    frames = [initial]
    meta = dict(metadata or {})
    for step in range(1, n_steps + 1):
        start = time.perf_counter()
        prev = frames[-1]
        rng = np.random.default_rng([cfg.seed, step])
        try:
            x = sample(net.score_fn(prev.flat()[None, :]), spec, (1, width), cfg, rng=rng)
            frame = Frame.from_flat(prev.grid, prev.names, x[0], prev.tau + 1)
            for hook in hooks:
                frame = hook(frame, prev)
        except (SamplingError, ValueError, FloatingPointError) as exc:
            raise RolloutError(f"rollout failed at step {step}: {exc}", Sequence(frames, meta)) from exc
        frames.append(frame)
        if records is not None:
            records.append({"tau": frame.tau, "seconds": time.perf_counter() - start})
    return Sequence(frames, meta)
