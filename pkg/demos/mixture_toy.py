"""Train a small score network on a 1D two-component mixture and sample from it.

Run: python demos/mixture_toy.py
"""

import numpy as np

from scoreflow.diagnostics import histogram_pair, kl_divergence
from scoreflow.sampling import SamplerConfig, sample
from scoreflow.score import GaussianMixture, ScoreNet, TrainConfig, gmm_score, train
from scoreflow.sde import SdeSpec

spec = SdeSpec.vp(0.1, 20)
mix = GaussianMixture([0.5, 0.5], [-2.0, 2.0], [0.5, 0.5])
data = mix.sample(20_000, np.random.default_rng(0))

net = ScoreNet(1, 0, hidden=(64, 64), seed=0)
net, hist = train(net, spec, data, TrainConfig(batch_size=256, epochs=300, lr=1e-3, seed=0),
                  progress=lambda ep, loss: ep % 50 == 0 and print(f"epoch {ep:4d}  loss {loss:.4f}"))

xs = np.linspace(-4, 4, 81)
for t in (0.1, 0.5, 1.0):
    err = np.mean((net(xs[:, None], None, np.full(xs.size, t))[:, 0] - gmm_score(mix, xs, t, spec)) ** 2)
    print(f"t={t:.1f}  score mse {err:.4f}")

for method in ("em", "pf_ode", "pc"):
    x = sample(net.score_fn(), spec, (10_000, 1), SamplerConfig(method, 1000, seed=1))[:, 0]
    p, q = histogram_pair(mix.sample(10_000, np.random.default_rng(2)), x)
    print(f"{method:7s} mean {x.mean():+.3f}  std {x.std():.3f}  KL {kl_divergence(p, q):.4f}")
