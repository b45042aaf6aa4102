"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line."""

import hashlib
import math
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats

from conftest import ACCEPTANCE_LINES
from gradcheck import fd_flat, rel_error
from pm_fixtures import NON_PERIODIC, noisy_smooth, step_edge
from scoreflow.cli import run
from scoreflow.diagnostics import (energy_spectrum, fit_spectrum_slope, kl_divergence, log_mse,
                                   q_criterion, vorticity)
from scoreflow.field import Frame, Grid2, make_spectral_field, read_sequence
from scoreflow.filtering import PmConfig, edge_retention, perona_malik
from scoreflow.ftle import ftle_field, global_lyapunov_time, rotation, saddle, uniform
from scoreflow.physics import (CHANNELS, PhysicsCorrConfig, explicit_step, gd_gradient, gd_loss,
                               physics_correct, turbrad_residuals, energy)
from scoreflow.sampling import SamplerConfig, sample_backward_em, sample_pc, simulate_forward
from scoreflow.score import (GaussianMixture, ScoreNet, TrainConfig, am_loss,
                             correlation_regularizer, dsm_loss, gmm_score, train, velocity_index)
from scoreflow.sde import SdeSpec, discrete_schedule, integrated_beta, kernel_moments, preset

DEMOS = Path(__file__).resolve().parent.parent / "demos"


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------

def test_c01_kernel_consistency():
    start = time.perf_counter()
    x0, times, worst_mean, worst_var = 1.5, (0.25, 0.5, 1.0), 0.0, 0.0
    for spec in (SdeSpec.vp(0.01, 5), SdeSpec.subvp(0.35, 30), SdeSpec.ve(0.04, 8)):
        init = np.full(10_000, x0)
        _, snaps = simulate_forward(spec, init, 1000, np.random.default_rng(0), record=times)
        for t in times:
            km = kernel_moments(spec, t)
            se = km.std / np.sqrt(init.size)
            worst_mean = max(worst_mean, abs(snaps[t].mean() - km.mean_coeff * x0) / se)
            worst_var = max(worst_var, abs(snaps[t].var() / km.var - 1))
    wall = time.perf_counter() - start
    report(1, worst_mean < 3 and worst_var < 0.05 and wall < 60,
           f"max mean dev {worst_mean:.2f} SE, max var dev {100 * worst_var:.2f}%, {wall:.1f}s")


# 2 -------------------------------------------------------------------------

def test_c02_score_recovery():
    start = time.perf_counter()
    spec = SdeSpec.vp(0.1, 20)
    mix = GaussianMixture([0.5, 0.5], [-2.0, 2.0], [0.5, 0.5])
    data = mix.sample(20_000, np.random.default_rng(0))
    net = ScoreNet(1, 0, hidden=(64, 64), seed=0)
    net, _ = train(net, spec, data, TrainConfig(batch_size=256, epochs=300, lr=1e-3, seed=0))

    xs, ts = np.linspace(-4, 4, 81), np.linspace(0.1, 1.0, 10)
    err = []
    for t in ts:
        pred = net(xs[:, None], None, np.full(xs.size, t))[:, 0]
        err.append((pred - gmm_score(mix, xs, t, spec)) ** 2)
    score_mse = float(np.mean(err))

    x = sample_backward_em(net.score_fn(), spec, (10_000, 1), SamplerConfig(n_steps=1000, seed=0))
    edges = np.linspace(-4, 4, 65)
    cdf = sum(w * stats.norm(m, s).cdf(edges) for w, m, s in zip(mix.weights, mix.means, mix.stds))
    q = np.diff(cdf) / np.diff(cdf).sum()
    p, _ = np.histogram(np.clip(x[:, 0], -4, 4), bins=edges)
    p = (p + 1e-10) / (p + 1e-10).sum()
    kl = kl_divergence(q, p)
    wall = time.perf_counter() - start
    report(2, score_mse < 0.05 and kl < 0.05 and wall < 300,
           f"score MSE {score_mse:.4f}, histogram KL {kl:.4f}, {wall:.1f}s")


# 3 -------------------------------------------------------------------------

def test_c03_ddpm_vp_limit():
    spec = SdeSpec.vp(0.1, 20)
    m1 = math.exp(-0.5 * integrated_beta(spec, 1.0))
    errs = {n: abs(math.sqrt(discrete_schedule(spec, n).alpha_bars[-1]) - m1) for n in (1000, 10_000)}
    ratio = errs[1000] / errs[10_000]
    ok = all(e < 3 / n for n, e in errs.items()) and 8 < ratio < 12
    report(3, ok, f"errors {errs[1000]:.2e} (N=1000), {errs[10_000]:.2e} (N=10000), ratio {ratio:.2f}")


# 4 -------------------------------------------------------------------------

def test_c04_pc_sampler():
    spec = preset("vp-transonic", n_steps=100)
    mix = GaussianMixture([1.0], [2.0], [0.5])
    f = lambda x, t: gmm_score(mix, x, t, spec)  # noqa: E731
    cdf = stats.norm(2.0, 0.5).cdf
    pairs = []
    for seed in range(5):
        pc = sample_pc(f, spec, (10_000, 1), SamplerConfig("pc", 100, 2, 0.16, seed))[:, 0]
        em = sample_backward_em(f, spec, (10_000, 1), SamplerConfig("em", 100, seed=seed))[:, 0]
        pairs.append((stats.kstest(pc, cdf).statistic, stats.kstest(em, cdf).statistic))
    ok = all(a <= b for a, b in pairs)
    report(4, ok, "KS pc/predictor " + ", ".join(f"{a:.4f}/{b:.4f}" for a, b in pairs))


# 5 -------------------------------------------------------------------------

def brute_regularizer(u_hat, u_true, u_past):
    mean = 0.5 * (u_true + u_past)
    a = (u_true - mean) - (u_hat - mean)
    b = u_past - mean
    n = a.shape[1]
    return sum(np.sum(np.outer(a[:, r], b[:, s]) ** 2) for r in range(n) for s in range(n)) / n**2


def test_c05_regularizer_factorization():
    rng = np.random.default_rng(5)
    worst, zero = 0.0, True
    for _ in range(100):
        u_hat, u_true, u_past = (rng.standard_normal((2, 64)) for _ in range(3))
        fast = correlation_regularizer(u_hat, u_true, u_past)
        worst = max(worst, abs(fast - brute_regularizer(u_hat, u_true, u_past)) / abs(fast))
        zero &= correlation_regularizer(u_true, u_true, u_past) == 0.0
    report(5, worst <= 1e-12 and zero, f"max relative difference {worst:.1e}, D(u,u)=0: {zero}")


# 6 -------------------------------------------------------------------------

def _net_grad_error(net, loss_of_net, h=1e-6):
    ev = loss_of_net(net)
    analytic = np.concatenate([ev.grads[k].ravel() for k in net.param_names()])

    def f(v):
        other = net.copy()
        other.set_flat(v)
        return loss_of_net(other).value
    return float(np.max(rel_error(analytic, fd_flat(f, net.get_flat(), h))))


def _smooth_state(n=16):
    g = Grid2(n, n)
    x, y = g.coords()
    k = 2 * np.pi / n
    return Frame(g, {"rho": 1 + 0.1 * np.sin(k * x) * np.cos(k * y), "u": 0.1 * np.sin(k * y),
                     "v": 0.1 * np.cos(k * x), "P": 1 + 0.05 * np.cos(k * (x + y))})


def _noisy_prediction(prev, tau_cool, amp, seed=0):
    r = np.random.default_rng(seed)
    ex = explicit_step(prev, 1.0, tau_cool)
    return ex.replace(**{c: ex[c] + amp * r.standard_normal(prev.grid.shape) for c in CHANNELS})


def test_c06_gradient_oracle():
    rng = np.random.default_rng(6)
    spec = SdeSpec.vp(0.1, 20)
    net = ScoreNet(2, 0, hidden=(8, 8), emb_dim=4, seed=7)
    x0, t, noise = rng.standard_normal((6, 2)), rng.uniform(0.05, 1, 6), rng.standard_normal((6, 2))
    e_dsm = _net_grad_error(net, lambda n: dsm_loss(n, spec, x0, None, t=t, noise=noise))
    g = Grid2(4, 4)
    d = 2 * g.size
    cnet = ScoreNet(d, d, hidden=(3,), emb_dim=4, seed=2)
    xn, xp = rng.standard_normal((3, d)), rng.standard_normal((3, d))
    t3, n3 = rng.uniform(0.1, 1, 3), rng.standard_normal((3, d))
    vidx = velocity_index(["u", "v"], g.size)
    e_am = _net_grad_error(cnet, lambda n: am_loss(n, spec, xn, xp, None, "variance", 0.7, vidx,
                                                   t=t3, noise=n3))

    prev = _smooth_state()
    cfg = PhysicsCorrConfig(tau_cool=7.0, lambda1=1.3, lambda2=0.7, lambda3=2.0)
    pred = _noisy_prediction(prev, 7.0, 0.05)
    grad = gd_gradient(pred, prev, cfg)
    h, e_phys = 1e-6, 0.0
    for _ in range(50):
        c = CHANNELS[rng.integers(4)]
        i, j = rng.integers(16), rng.integers(16)
        plus, minus = pred[c].copy(), pred[c].copy()
        plus[i, j] += h
        minus[i, j] -= h
        fd = (gd_loss(pred.replace(**{c: plus}), prev, cfg)
              - gd_loss(pred.replace(**{c: minus}), prev, cfg)) / (2 * h)
        e_phys = max(e_phys, float(rel_error(grad[c][i, j], fd)))
    ok = max(e_dsm, e_am) < 1e-4 and e_phys < 1e-5
    report(6, ok, f"score_net rel err dsm {e_dsm:.1e} am {e_am:.1e}; physics {e_phys:.1e}")


# 7 -------------------------------------------------------------------------

def test_c07_spectrum():
    g = Grid2(128, 128)
    f = make_spectral_field(g, -5 / 3, 1, 60, seed=0)
    spec = energy_spectrum([f])
    slope = fit_spectrum_slope(spec, 2, 50)
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(10):
        gr = Grid2(24, 20)
        u, v = rng.standard_normal(gr.shape), rng.standard_normal(gr.shape)
        res = energy_spectrum([Frame(gr, {"u": u, "v": v})])
        direct = 0.5 * np.mean((u - u.mean()) ** 2 + (v - v.mean()) ** 2)
        worst = max(worst, abs(res.mean.sum() / direct - 1))
    lm = log_mse(spec, spec)
    ok = abs(slope + 5 / 3) <= 0.15 and worst <= 0.01 and lm == 0.0
    report(7, ok, f"slope {slope:.3f}, Parseval dev {100 * worst:.2e}%, log-MSE(E,E)={lm}")


# 8 -------------------------------------------------------------------------

def test_c08_analytic_diagnostics():
    g = Grid2(12, 10, 0.5, 0.25, "replicate")
    x, y = g.coords()
    om, a = 0.7, 1.3
    w = vorticity(-om * y, om * x, g)[1:-1, 1:-1]
    q = q_criterion(-om * y, om * x, g)[1:-1, 1:-1]
    qs = q_criterion(a * x, -a * y, g)[1:-1, 1:-1]
    errs = (np.max(np.abs(w - 2 * om)), np.max(np.abs(q - om**2)), np.max(np.abs(qs + a**2)))
    report(8, max(errs) <= 1e-12,
           "interior errors omega {:.1e}, Q rotation {:.1e}, Q strain {:.1e}".format(*errs))


# 9 -------------------------------------------------------------------------

def test_c09_perona_malik():
    cfg = PmConfig(gamma=0.05, eta=0.03, epsilon=1e-8, n_iters=20)
    const = np.full((16, 16), 0.4)
    fixpoint = np.array_equal(perona_malik(const, cfg), const)
    r = np.random.default_rng(9).standard_normal((32, 32))
    drift = abs(perona_malik(r, PmConfig(n_iters=100)).mean() - r.mean())
    smooth, noisy = noisy_smooth()
    out = perona_malik(noisy, cfg)
    reduction = 1 - np.std(out - smooth) / np.std(noisy - smooth)
    edge = step_edge()
    fe = perona_malik(edge, cfg, NON_PERIODIC)
    retention = edge_retention(edge, fe)
    ok = fixpoint and drift <= 1e-12 and reduction >= 0.30 and retention >= 0.8
    report(9, ok, f"fixpoint {fixpoint}, mean drift {drift:.1e}, noise std reduction "
                  f"{100 * reduction:.1f}% (target >= 30%), edge retention {retention:.3f}")


# 10 ------------------------------------------------------------------------

def test_c10_ftle():
    seeds = np.linspace(-1, 1, 9)
    worst = 0.0
    for a, dtau in ((0.25, 4.0), (0.5, 2.0), (1.0, 1.0)):
        f = ftle_field(saddle(a), seeds, seeds, 0.0, dtau, 1e-4)
        worst = max(worst, float(np.max(np.abs(f.chi / a - 1))))
    rigid = max(float(np.max(np.abs(ftle_field(fl, seeds, seeds, 0.0, 1.5, 1e-3).chi[1:-1, 1:-1])))
                for fl in (uniform(0.7, 0.2), rotation(1.3)))
    f = ftle_field(saddle(0.5), seeds, seeds, 0.0, 2.0, 1e-4)
    identity = global_lyapunov_time(f) == 1.0 / f.chi.max()
    ok = worst <= 0.02 and rigid <= 1e-4 and identity
    report(10, ok, f"saddle rel err {100 * worst:.3f}%, rigid max chi {rigid:.1e}, "
                   f"global tau_L identity {identity}")


# 11 ------------------------------------------------------------------------

def test_c11_turbrad_residuals():
    worst = 0.0
    for boundary in ("periodic", "replicate"):
        for tau_cool in (math.inf, 5.0):
            prev = _smooth_state()
            if boundary == "replicate":
                prev = Frame(Grid2(16, 16, boundary="replicate"), prev.channels)
            nxt = explicit_step(prev, 0.5, tau_cool)
            r = turbrad_residuals(nxt, prev, 0.5, tau_cool)
            worst = max(worst, *(float(np.max(np.abs(a))) for a in (r.r1, r.r2x, r.r2y, r.r3)))
    g = Grid2(8, 8)
    uni = Frame(g, {"rho": np.full(g.shape, 1.3), "u": np.full(g.shape, 0.2),
                    "v": np.full(g.shape, -0.1), "P": np.full(g.shape, 0.8)})
    r = turbrad_residuals(uni, uni, 1.0, 4.0)
    cooling = bool(np.array_equal(r.r3, energy(uni["P"]) / 4.0))
    prev = _smooth_state()
    res = physics_correct(_noisy_prediction(prev, 20.0, 0.01), prev,
                          PhysicsCorrConfig(n_gd=50, tau_cool=20.0))
    mono = bool(np.all(np.diff(res.history) <= 0))
    report(11, worst <= 1e-12 and cooling and mono,
           f"max consistent-state residual {worst:.1e}, R3=E/tau_cool {cooling}, "
           f"L_GD nonincreasing {mono}")


# 12 ------------------------------------------------------------------------

def _digest(directory):
    h = hashlib.sha256()
    for p in sorted(Path(directory).glob("frame_*")):
        h.update(p.read_bytes())
    return h.hexdigest()


def _pipeline(cfg, root):
    data, model, roll = root / "data", root / "model", root / "roll"
    codes = [run(["gen", "--config", cfg, "--out", str(data)]),
             run(["train", str(data), "--config", cfg, "--out", str(model)]),
             run(["rollout", str(model / "model.snet"), str(data / "seq_000"), "--config", cfg,
                  "--out", str(roll)])]
    gt = read_sequence(data / "seq_000")
    pred = read_sequence(roll)
    codes.append(run(["metrics", str(roll), str(data / "seq_000"), "--out", str(root / "m")]))
    codes.append(run(["spectrum", str(roll), "--out", str(root / "s")]))
    per_step = [float(np.mean([np.mean((p[c] - g[c]) ** 2) for c in g.names]))
                for p, g in zip(list(pred)[1:], list(gt)[1:])]
    return codes, per_step, _digest(roll), hashlib.sha256((model / "model.snet").read_bytes()).hexdigest()


@pytest.mark.slow
def test_c12_end_to_end_rollout(tmp_path):
    cfg = str(DEMOS / "blob_rollout.toml")
    start = time.perf_counter()
    codes, per_step, roll_hash, model_hash = _pipeline(cfg, tmp_path / "a")
    wall = time.perf_counter() - start
    codes2, _, roll_hash2, model_hash2 = _pipeline(cfg, tmp_path / "b")
    bounded = max(per_step) <= 5 * per_step[0]
    same = roll_hash == roll_hash2 and model_hash == model_hash2
    ok = all(c == 0 for c in codes + codes2) and bounded and wall < 600 and same and len(per_step) == 20
    report(12, ok, f"max/step-1 MSE {max(per_step) / per_step[0]:.2f} (step-1 {per_step[0]:.3f}), "
                   f"pipeline {wall:.0f}s, byte-identical rerun {same}")
