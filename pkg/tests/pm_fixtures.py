"""Pinned fixtures shared by the filter tests and the acceptance suite."""

import numpy as np

from scoreflow.field import Boundary


def noisy_smooth(n=64, sigma=0.05, seed=0):
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    smooth = 0.1 * np.sin(2 * np.pi * i / n) * np.cos(2 * np.pi * j / n)
    noise = np.random.default_rng(seed).normal(0.0, sigma, smooth.shape)
    return smooth, smooth + noise


def step_edge(n=32, height=1.0):
    a = np.zeros((n, n))
    a[n // 2:, :] = height
    return a


def smooth_ramp(n=64, scale=0.1, width=8.0):
    i = np.arange(n)[:, None] * np.ones((1, n))
    return scale * np.tanh((i - n / 2) / width)


NON_PERIODIC = Boundary.REPLICATE
