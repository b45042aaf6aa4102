"""Forward SDEs (VP, sub-VP, VE), their schedules and Gaussian transition kernels.

All functions accept scalar or array ``t`` and broadcast.  The diffusion is
isotropic (``g(t) * I``) for every kind, so ``Sigma = g**2 I`` and its spatial
divergence vanishes.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

T_FLOOR = 1e-5


class SdeKind(str, enum.Enum):
    VP = "vp"
    SUBVP = "subvp"
    VE = "ve"


class SdeKindError(ValueError):
    """Schedule queried on an SDE kind that does not define it."""


class SingularKernelError(ValueError):
    """Kernel score requested at t below the numerical floor."""


@dataclass(frozen=True)
class SdeSpec:
    kind: SdeKind
    beta_min: float = 0.1
    beta_max: float = 20.0
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    n_steps: int = 1000
    T: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", SdeKind(self.kind))
        if self.kind is SdeKind.VE:
            if not (0 < self.sigma_min < self.sigma_max):
                raise ValueError("VE needs 0 < sigma_min < sigma_max")
        elif not (0 <= self.beta_min < self.beta_max):
            raise ValueError("VP/sub-VP need 0 <= beta_min < beta_max")
        if self.n_steps < 2:
            raise ValueError("n_steps must be >= 2")
        if self.T != 1.0:
            raise ValueError("final diffusion time is fixed to 1")

    @classmethod
    def vp(cls, beta_min, beta_max, n_steps=1000):
        return cls(SdeKind.VP, beta_min=beta_min, beta_max=beta_max, n_steps=n_steps)

    @classmethod
    def subvp(cls, beta_min, beta_max, n_steps=1000):
        return cls(SdeKind.SUBVP, beta_min=beta_min, beta_max=beta_max, n_steps=n_steps)

    @classmethod
    def ve(cls, sigma_min, sigma_max, n_steps=1000):
        return cls(SdeKind.VE, sigma_min=sigma_min, sigma_max=sigma_max, n_steps=n_steps)

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "n_steps": self.n_steps}
        if self.kind is SdeKind.VE:
            d.update(sigma_min=self.sigma_min, sigma_max=self.sigma_max)
        else:
            d.update(beta_min=self.beta_min, beta_max=self.beta_max)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SdeSpec":
        return cls(**d)


# Best schedule parameters per (kind, regularized) and dataset.
PRESETS: dict[str, SdeSpec] = {}
_TABLE = {
    # dataset: [(kind, regularized, a, b)], a/b are beta or sigma bounds
    "transonic": [("vp", False, 0.01, 5), ("subvp", False, 0.35, 30), ("ve", False, 0.04, 8),
                  ("vp", True, 0.39, 5.6), ("subvp", True, 0.4, 28), ("ve", True, 0.05, 8)],
    "turbrad": [("vp", False, 0.1, 25), ("subvp", False, 0.4, 30), ("ve", False, 0.15, 4),
                ("vp", True, 0.1, 27), ("subvp", True, 0.25, 30), ("ve", True, 0.05, 5)],
    "mhd": [("vp", False, 0.1, 30), ("subvp", False, 0.25, 30), ("ve", False, 0.1, 6),
            ("vp", True, 0.15, 7), ("subvp", True, 0.1, 12), ("ve", True, 0.01, 4)],
}
for _ds, _rows in _TABLE.items():
    for _kind, _reg, _a, _b in _rows:
        _name = f"{_kind}-{_ds}" + ("-reg" if _reg else "")
        if _kind == "ve":
            PRESETS[_name] = SdeSpec(SdeKind.VE, sigma_min=_a, sigma_max=_b)
        else:
            PRESETS[_name] = SdeSpec(SdeKind(_kind), beta_min=_a, beta_max=_b)


def preset(name: str, n_steps: int | None = None) -> SdeSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown SDE preset {name!r}; known: {sorted(PRESETS)}") from None
    if n_steps is not None:
        spec = SdeSpec(**{**spec.__dict__, "n_steps": n_steps})
    return spec


@dataclass(frozen=True)
class KernelMoments:
    """``x_t | x_0 ~ N(mean_coeff * x_0, var * I)``."""

    mean_coeff: np.ndarray | float
    var: np.ndarray | float

    @property
    def std(self):
        return np.sqrt(self.var)


@dataclass(frozen=True)
class DiscreteSchedule:
    alphas: np.ndarray
    alpha_bars: np.ndarray


def beta(spec: SdeSpec, t):
    if spec.kind is SdeKind.VE:
        raise SdeKindError("beta(t) is undefined for a VE SDE")
    return spec.beta_min + np.asarray(t, dtype=float) * (spec.beta_max - spec.beta_min)


def integrated_beta(spec: SdeSpec, t):
    """Closed-form integral of beta from 0 to t."""
    if spec.kind is SdeKind.VE:
        raise SdeKindError("beta(t) is undefined for a VE SDE")
    t = np.asarray(t, dtype=float)
    return spec.beta_min * t + 0.5 * (spec.beta_max - spec.beta_min) * t**2


def sigma(spec: SdeSpec, t):
    if spec.kind is not SdeKind.VE:
        raise SdeKindError("sigma(t) is only defined for a VE SDE")
    t = np.asarray(t, dtype=float)
    return spec.sigma_min * (spec.sigma_max / spec.sigma_min) ** t


def kernel_moments(spec: SdeSpec, t) -> KernelMoments:
    t = np.asarray(t, dtype=float)
    if spec.kind is SdeKind.VE:
        var = sigma(spec, t) ** 2 - spec.sigma_min**2
        return KernelMoments(np.ones_like(t), var)
    ib = integrated_beta(spec, t)
    m = np.exp(-0.5 * ib)
    vp_var = -np.expm1(-ib)
    var = vp_var if spec.kind is SdeKind.VP else vp_var**2
    return KernelMoments(m, var)


def prior_std(spec: SdeSpec) -> float:
    """Standard deviation of the sampling prior at t = 1."""
    if spec.kind is SdeKind.VE:
        return float(np.sqrt(spec.sigma_max**2 - spec.sigma_min**2))
    return 1.0


def _expand(a, like):
    a = np.asarray(a, dtype=float)
    return a.reshape(a.shape + (1,) * (np.ndim(like) - a.ndim))


def perturb(spec: SdeSpec, x0, t, noise):
    """Sample ``x_t = m(t) x0 + s(t) noise``.

    ``t`` may be a scalar or one value per leading (batch) index.
    """
    x0 = np.asarray(x0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if x0.shape != noise.shape:
        raise ValueError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    km = kernel_moments(spec, t)
    return _expand(km.mean_coeff, x0) * x0 + _expand(km.std, x0) * noise


def kernel_score(spec: SdeSpec, x_t, x0, t):
    """Gradient of log p_{t|0}(x_t | x0) with respect to x_t."""
    if np.any(np.asarray(t) < T_FLOOR):
        raise SingularKernelError(f"kernel score is singular for t < {T_FLOOR}")
    x_t = np.asarray(x_t, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    if x_t.shape != x0.shape:
        raise ValueError(f"shape mismatch: x_t {x_t.shape} vs x0 {x0.shape}")
    km = kernel_moments(spec, t)
    return -(x_t - _expand(km.mean_coeff, x_t) * x0) / _expand(km.var, x_t)


def diffusion(spec: SdeSpec, t):
    """Scalar diffusion coefficient g(t)."""
    if spec.kind is SdeKind.VE:
        return sigma(spec, t) * np.sqrt(2 * np.log(spec.sigma_max / spec.sigma_min))
    b = beta(spec, t)
    if spec.kind is SdeKind.VP:
        return np.sqrt(b)
    return np.sqrt(b * -np.expm1(-2 * integrated_beta(spec, t)))


def drift_diffusion(spec: SdeSpec, x, t):
    """Forward drift vector and scalar diffusion g(t) at (x, t)."""
    x = np.asarray(x, dtype=float)
    g = diffusion(spec, t)
    if spec.kind is SdeKind.VE:
        return np.zeros_like(x), g
    return -0.5 * _expand(beta(spec, t), x) * x, g


def discrete_schedule(spec: SdeSpec, n_steps: int | None = None) -> DiscreteSchedule:
    """DDPM schedule alpha_i = 1 - beta(i/N)/N and its cumulative products."""
    if spec.kind is not SdeKind.VP:
        raise SdeKindError("the discrete DDPM schedule is defined for VP only")
    n = spec.n_steps if n_steps is None else n_steps
    t = np.arange(1, n + 1) / n
    alphas = 1.0 - beta(spec, t) / n
    if np.any(alphas <= 0) or np.any(alphas >= 1):
        raise ValueError("schedule produces alphas outside (0, 1); increase N")
    return DiscreteSchedule(alphas, np.cumprod(alphas))
