"""Score models: analytic Gaussian-mixture scores and a small trainable MLP.

The MLP carries hand-written reverse-mode gradients. Losses return a
``LossEval`` (value, parameter gradients, regularizer value) so that training,
finite-difference checks and the CLI share one code path.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from . import sde as _sde
from .field import Frame, Sequence
from .sde import SdeKind, SdeSpec, T_FLOOR, kernel_moments


# --- analytic Gaussian mixtures --------------------------------------------


@dataclass(frozen=True)
class GaussianMixture:
    """Mixture with diagonal components.

    ``means``/``stds`` are ``(K,)`` for scalar data or ``(K, d)`` for vectors.
    """

    weights: np.ndarray
    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        mu = np.asarray(self.means, dtype=float)
        sd = np.broadcast_to(np.asarray(self.stds, dtype=float), mu.shape).copy()
        if w.ndim != 1 or mu.shape[0] != w.shape[0]:
            raise ValueError("one weight per component is required")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise ValueError("mixture weights must sum to 1")
        if np.any(sd <= 0):
            raise ValueError("component stds must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "stds", sd)

    @property
    def scalar(self) -> bool:
        return self.means.ndim == 1

    def diffused(self, spec: SdeSpec | None, t) -> tuple[np.ndarray, np.ndarray]:
        """Component means and variances of the mixture pushed through the kernel."""
        if spec is None:
            return self.means, self.stds**2
        km = kernel_moments(spec, t)
        m = np.asarray(km.mean_coeff)[..., None]
        s2 = np.asarray(km.var)[..., None]
        if not self.scalar:
            m, s2 = m[..., None], s2[..., None]
        return m * self.means, m**2 * self.stds**2 + s2

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.stds[comp] * rng.standard_normal(
            (n,) + self.means.shape[1:]
        )

    def _log_terms(self, x, spec, t):
        mu, var = self.diffused(spec, t)
        x = np.asarray(x, dtype=float)
        if self.scalar:
            d = x[..., None] - mu
            lp = -0.5 * (d**2 / var + np.log(2 * np.pi * var))
        else:
            d = x[..., None, :] - mu
            lp = -0.5 * (d**2 / var + np.log(2 * np.pi * var)).sum(-1)
        return lp + np.log(self.weights), d, var

    def log_density(self, x, t=0.0, spec: SdeSpec | None = None):
        lp, _, _ = self._log_terms(x, spec, t)
        return logsumexp(lp, axis=-1)

    def score(self, x, t=0.0, spec: SdeSpec | None = None):
        lp, d, var = self._log_terms(x, spec, t)
        resp = np.exp(lp - logsumexp(lp, axis=-1, keepdims=True))
        if self.scalar:
            return -(resp * d / var).sum(-1)
        return -(resp[..., None] * d / var).sum(-2)


def gmm_score(mix: GaussianMixture, x, t, spec: SdeSpec | None):
    """Exact score of the mixture diffused to time ``t`` (``spec=None``: undiffused)."""
    return mix.score(x, t, spec)


# --- MLP score network ------------------------------------------------------


def time_embedding(t, dim: int, max_freq: float = 64.0) -> np.ndarray:
    """Sinusoidal embedding with log-spaced angular frequencies 1..max_freq."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(np.linspace(0.0, np.log(max_freq), half))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _silu(z):
    return z * expit(z)


def _silu_grad(z):
    s = expit(z)
    return s * (1 + z * (1 - s))


class ScoreNet:
    """Fully connected score model ``alpha(t_emb) * MLP([x_t, x_cond, t_emb])``.

    ``alpha`` is a logistic gate on a linear function of the time embedding.
    Hidden layers use SiLU; the output layer is linear.

    With ``std_scale`` set to an SDE, the output is further divided by the
    kernel std ``s(t)`` of that SDE, so the MLP only has to predict the
    (negated) unit noise. This is off by default.
    """

    def __init__(self, data_dim: int, cond_dim: int = 0, hidden=(64, 64), emb_dim: int = 16,
                 seed: int = 0, max_freq: float = 64.0, std_scale: SdeSpec | None = None):
        if emb_dim % 2 or emb_dim < 2:
            raise ValueError("emb_dim must be a positive even number")
        self.data_dim = int(data_dim)
        self.cond_dim = int(cond_dim)
        self.emb_dim = int(emb_dim)
        self.max_freq = float(max_freq)
        self.std_scale = std_scale
        self.sizes = [self.data_dim + self.cond_dim + self.emb_dim, *map(int, hidden), self.data_dim]
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.params[f"W{i}"] = rng.normal(0.0, 1.0 / np.sqrt(a), (a, b))
            self.params[f"b{i}"] = np.zeros(b)
        self.params["w_alpha"] = np.zeros(self.emb_dim)
        self.params["b_alpha"] = np.zeros(1)

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.n_layers):
            names += [f"W{i}", f"b{i}"]
        return names + ["w_alpha", "b_alpha"]

    def get_flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in self.param_names()])

    def set_flat(self, vec: np.ndarray) -> None:
        pos = 0
        for k in self.param_names():
            p = self.params[k]
            self.params[k] = np.asarray(vec[pos : pos + p.size], dtype=float).reshape(p.shape).copy()
            pos += p.size

    def copy(self) -> "ScoreNet":
        other = object.__new__(ScoreNet)
        other.__dict__.update(self.__dict__)
        other.sizes = list(self.sizes)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def forward(self, x, cond=None, t=0.0, return_cache: bool = False):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.data_dim:
            raise ValueError(f"expected data width {self.data_dim}, got {x.shape[1]}")
        batch = x.shape[0]
        parts = [x]
        if self.cond_dim:
            if cond is None:
                raise ValueError("this network needs a conditioning input")
            cond = np.atleast_2d(np.asarray(cond, dtype=float))
            if cond.shape[1] != self.cond_dim:
                raise ValueError(f"expected conditioning width {self.cond_dim}, got {cond.shape[1]}")
            parts.append(np.broadcast_to(cond, (batch, self.cond_dim)))
        elif cond is not None and np.size(cond):
            raise ValueError("this network takes no conditioning input")
        t = np.broadcast_to(np.asarray(t, dtype=float), (batch,))
        emb = time_embedding(t, self.emb_dim, self.max_freq)
        parts.append(emb)
        h = np.concatenate(parts, axis=1)
        acts, pre = [h], []
        for i in range(self.n_layers - 1):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            pre.append(z)
            h = _silu(z)
            acts.append(h)
        last = self.n_layers - 1
        mlp_out = h @ self.params[f"W{last}"] + self.params[f"b{last}"]
        gate = expit(emb @ self.params["w_alpha"] + self.params["b_alpha"][0])
        inv_std = np.ones(batch) if self.std_scale is None else \
            1.0 / kernel_moments(self.std_scale, np.maximum(t, T_FLOOR)).std
        out = (gate * inv_std)[:, None] * mlp_out
        if return_cache:
            return out, (acts, pre, mlp_out, gate, emb, inv_std)
        return out

    __call__ = forward

    def backward(self, cache, grad_out) -> dict[str, np.ndarray]:
        """Parameter gradients of a scalar loss given dLoss/dOutput."""
        acts, pre, mlp_out, gate, emb, inv_std = cache
        grads = {}
        grad_out = inv_std[:, None] * grad_out
        d_gate = np.einsum("bi,bi->b", grad_out, mlp_out)
        d_logit = d_gate * gate * (1 - gate)
        grads["w_alpha"] = emb.T @ d_logit
        grads["b_alpha"] = np.array([d_logit.sum()])
        delta = gate[:, None] * grad_out
        for i in reversed(range(self.n_layers)):
            grads[f"W{i}"] = acts[i].T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.params[f"W{i}"].T) * _silu_grad(pre[i - 1])
        return grads

    def score_fn(self, cond=None) -> Callable:
        """Callable ``(x, t) -> score`` for the samplers."""
        def fn(x, t):
            return self.forward(x, cond, t)
        return fn


# --- losses -----------------------------------------------------------------


class LossEval(NamedTuple):
    value: float
    grads: dict
    reg: float = 0.0


def loss_weight(spec: SdeSpec, t, weighting: str):
    if weighting == "variance":
        return kernel_moments(spec, t).var
    if weighting == "likelihood":
        return _sde.diffusion(spec, t) ** 2
    raise ValueError(f"unknown weighting {weighting!r}")


def dsm_objective(score, noise, std, weight):
    """Per-sample ``0.5 * weight * ||score + noise/std||^2`` and its output gradient."""
    resid = score + noise / std[:, None]
    per = 0.5 * weight * np.einsum("bi,bi->b", resid, resid)
    return per, weight[:, None] * resid


def _draw(spec, x0, rng, t, noise, t_floor):
    n = x0.shape[0]
    if t is None:
        t = rng.uniform(t_floor, 1.0, n)
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,)).copy()
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    return t, noise


def dsm_loss(net: ScoreNet, spec: SdeSpec, x0, rng=None, weighting="variance", cond=None,
             t=None, noise=None, t_floor=T_FLOOR) -> LossEval:
    """Monte-Carlo denoising score matching loss with parameter gradients."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = x0[:, None]
    if len(x0) == 0:
        raise ValueError("empty batch")
    t, noise = _draw(spec, x0, rng, t, noise, t_floor)
    km = kernel_moments(spec, t)
    x_t = km.mean_coeff[:, None] * x0 + km.std[:, None] * noise
    out, cache = net.forward(x_t, cond, t, return_cache=True)
    per, g = dsm_objective(out, noise, km.std, loss_weight(spec, t, weighting))
    n = len(x0)
    return LossEval(float(per.mean()), net.backward(cache, g / n))


def correlation_regularizer(u_hat, u_true, u_past):
    """Cross-correlation penalty on velocity fluctuations.

    Inputs have shape ``(..., n_components, n_points)`` (spatial axes flattened).
    The mean flow is the two-frame average of ``u_true`` and ``u_past``. Returns
    the penalty per leading index.
    """
    u_hat, u_true, u_past = (np.asarray(a, dtype=float) for a in (u_hat, u_true, u_past))
    if not (u_hat.shape == u_true.shape == u_past.shape):
        raise ValueError("velocity fields must share shape")
    mean = 0.5 * (u_true + u_past)
    fluct = u_true - mean
    fluct_hat = u_hat - mean
    fluct_past = u_past - mean
    n_pts = u_true.shape[-1]
    diff = ((fluct - fluct_hat) ** 2).sum(axis=(-2, -1))
    past = (fluct_past**2).sum(axis=(-2, -1))
    return diff * past / n_pts**2


def regularizer_term(u_hat: Frame, u_true: Frame, u_past: Frame, velocity=("u", "v")) -> float:
    """Correlation penalty between predicted and true frames at tau, given tau - 1."""
    arrs = []
    for f in (u_hat, u_true, u_past):
        missing = [c for c in velocity if c not in f.channels]
        if missing:
            raise KeyError(f"missing velocity channels {missing}")
        arrs.append(f.stack(velocity).reshape(len(velocity), -1))
    return float(correlation_regularizer(*arrs))


def velocity_index(names, grid_size: int, velocity=("u", "v")) -> np.ndarray:
    """Flat indices of velocity channels in a ``Frame.flat()`` vector, shape (2, P)."""
    names = list(names)
    missing = [c for c in velocity if c not in names]
    if missing:
        raise KeyError(f"missing velocity channels {missing}")
    return np.stack([np.arange(grid_size) + names.index(c) * grid_size for c in velocity])


def am_loss(net: ScoreNet, spec: SdeSpec, x_now, x_prev, rng=None, weighting="variance",
            lambda_w: float = 0.0, vel_index=None, t=None, noise=None,
            t_floor=T_FLOOR) -> LossEval:
    """Conditional (autoregressive) DSM loss plus the weighted correlation penalty.

    ``x_now``/``x_prev`` are ``(B, D)`` flattened frames at tau and tau - 1.
    The denoised estimate used by the penalty is ``(x_t + s^2 score) / m``.
    """
    x_now = np.atleast_2d(np.asarray(x_now, dtype=float))
    x_prev = np.atleast_2d(np.asarray(x_prev, dtype=float))
    if x_now.shape != x_prev.shape:
        raise ValueError("paired frames must share shape")
    if len(x_now) == 0:
        raise ValueError("empty batch")
    t, noise = _draw(spec, x_now, rng, t, noise, t_floor)
    km = kernel_moments(spec, t)
    x_t = km.mean_coeff[:, None] * x_now + km.std[:, None] * noise
    out, cache = net.forward(x_t, x_prev, t, return_cache=True)
    per, g = dsm_objective(out, noise, km.std, loss_weight(spec, t, weighting))
    n = len(x_now)
    g = g / n
    value = float(per.mean())
    reg = 0.0
    if lambda_w and vel_index is None:
        raise ValueError("the correlation penalty needs velocity channel indices")
    if vel_index is not None:
        idx = np.asarray(vel_index)
        x_hat = (x_t + km.var[:, None] * out) / km.mean_coeff[:, None]
        u_hat, u_true, u_past = x_hat[:, idx], x_now[:, idx], x_prev[:, idx]
        d_b = correlation_regularizer(u_hat, u_true, u_past)
        reg = float(d_b.mean())
        if lambda_w:
            value += lambda_w * reg
            mean = 0.5 * (u_true + u_past)
            coeff = ((u_past - mean) ** 2).sum(axis=(-2, -1)) / idx.shape[-1] ** 2
            d_uhat = -2.0 * coeff[:, None, None] * ((u_true - mean) - (u_hat - mean))
            scale = (km.var / km.mean_coeff)[:, None, None]
            g_out = np.zeros_like(g)
            np.add.at(g_out, (slice(None), idx), lambda_w / n * scale * d_uhat)
            g = g + g_out
    return LossEval(value, net.backward(cache, g), reg)


# --- training ---------------------------------------------------------------


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class TrainConfig:
    batch_size: int = 128
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    lambda_w: float = 0.0
    weighting: str = "variance"

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs <= 0 or self.lr < 0:
            raise ValueError("batch_size and epochs must be positive, lr nonnegative")
        if self.lambda_w < 0:
            raise ValueError("lambda_w must be >= 0")
        if self.weighting not in ("variance", "likelihood"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step_count = 0

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        c1 = 1 - self.beta1**self.step_count
        c2 = 1 - self.beta2**self.step_count
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            denom = np.sqrt(v / c2)
            denom += self.eps
            step = m / denom
            step *= self.lr / c1
            if params[k].flags.writeable:
                params[k] -= step
            else:
                params[k] = params[k] - step


@dataclass
class TrainHistory:
    loss: list = field(default_factory=list)
    reg: list = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "reg_term"])
            for i, (l, r) in enumerate(zip(self.loss, self.reg)):
                w.writerow([i, repr(l), repr(r)])


def sequence_pairs(data) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Stack (x^tau, x^{tau-1}) pairs from one or more sequences."""
    seqs = [data] if isinstance(data, Sequence) else list(data)
    now, prev = zip(*(s.pairs() for s in seqs))
    first = seqs[0]
    try:
        vidx = velocity_index(first.names, first.grid.size, first.velocity_channels)
    except KeyError:
        vidx = None
    return np.concatenate(now), np.concatenate(prev), vidx


def train(net: ScoreNet, spec: SdeSpec, data, cfg: TrainConfig, progress=None):
    """Fit ``net`` in place; returns ``(net, history)``.

    ``data`` is an array of samples (unconditional DSM) or one or more
    ``Sequence`` objects (conditional AM loss on consecutive frame pairs).
    """
    rng = np.random.default_rng(cfg.seed)
    if isinstance(data, np.ndarray):
        x = data[:, None] if data.ndim == 1 else data
        prev, vidx = None, None
    else:
        x, prev, vidx = sequence_pairs(data)
    n = len(x)
    opt = Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        tot, tot_reg = 0.0, 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            if prev is None:
                ev = dsm_loss(net, spec, x[idx], rng, cfg.weighting)
            else:
                ev = am_loss(net, spec, x[idx], prev[idx], rng, cfg.weighting, cfg.lambda_w, vidx)
            if not np.isfinite(ev.value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step}: {ev.value}"
                )
            opt.step(net.params, ev.grads)
            tot += ev.value * len(idx)
            tot_reg += ev.reg * len(idx)
        history.loss.append(tot / n)
        history.reg.append(tot_reg / n)
        if progress is not None:
            progress(epoch, history.loss[-1])
    return net, history


# --- checkpoints ------------------------------------------------------------

CKPT_MAGIC = b"SNET"
CKPT_VERSION = 1
_KIND_CODE = {SdeKind.VP: 0, SdeKind.SUBVP: 1, SdeKind.VE: 2}


def save_checkpoint(net: ScoreNet, spec: SdeSpec, path) -> None:
    """Binary checkpoint: header, layer sizes, SDE spec, then f64 parameters."""
    if net.std_scale is not None and net.std_scale != spec:
        raise ValueError("network output scaling was built for a different SDE")
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(net.sizes))]
    parts.append(struct.pack(f"<{len(net.sizes)}I", *net.sizes))
    parts.append(struct.pack("<IIId", net.data_dim, net.cond_dim, net.emb_dim, net.max_freq))
    parts.append(struct.pack("<BddddIB", _KIND_CODE[spec.kind], spec.beta_min, spec.beta_max,
                             spec.sigma_min, spec.sigma_max, spec.n_steps,
                             int(net.std_scale is not None)))
    parts.append(net.get_flat().astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[ScoreNet, SdeSpec]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError("bad magic: not a score-net checkpoint")
    try:
        version, n_sizes = struct.unpack_from("<II", buf, 4)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 12
        sizes = struct.unpack_from(f"<{n_sizes}I", buf, pos)
        pos += 4 * n_sizes
        data_dim, cond_dim, emb_dim, max_freq = struct.unpack_from("<IIId", buf, pos)
        pos += struct.calcsize("<IIId")
        code, bmin, bmax, smin, smax, nsteps, scaled = struct.unpack_from("<BddddIB", buf, pos)
        pos += struct.calcsize("<BddddIB")
    except struct.error as exc:
        raise ValueError("corrupt checkpoint header") from exc
    if code not in (0, 1, 2):
        raise ValueError(f"corrupt checkpoint: unknown SDE code {code}")
    kind = {v: k for k, v in _KIND_CODE.items()}[code]
    spec = SdeSpec(kind, bmin, bmax, smin, smax, nsteps)
    net = ScoreNet(data_dim, cond_dim, sizes[1:-1], emb_dim, max_freq=max_freq,
                   std_scale=spec if scaled else None)
    flat = np.frombuffer(buf, dtype="<f8", offset=pos)
    if flat.size != net.n_params:
        raise ValueError("corrupt checkpoint: parameter count mismatch")
    net.set_flat(flat)
    return net, spec
