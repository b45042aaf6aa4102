"""Conditional score-based diffusion for 2D flow fields, with fluid diagnostics."""

from . import diagnostics, field, filtering, ftle, physics, sampling, score, sde
from .field import Boundary, Frame, Grid2, Sequence
from .sampling import SamplerConfig, rollout, sample
from .score import ScoreNet, TrainConfig, train
from .sde import SdeKind, SdeSpec, preset

__version__ = "0.1.0"

__all__ = [
    "diagnostics", "field", "filtering", "ftle", "physics", "sampling", "score", "sde",
    "Boundary", "Frame", "Grid2", "Sequence", "SamplerConfig", "rollout", "sample",
    "ScoreNet", "TrainConfig", "train", "SdeKind", "SdeSpec", "preset",
]
