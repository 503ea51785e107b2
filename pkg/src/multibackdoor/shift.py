"""Test-time and train-time distribution shifts: FGSM through attacker
surrogates and a per-channel statistic-transfer stand-in for AdaIN."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn
from .data import LabeledDataset, split_80_20
from .errors import ConfigurationError, InputError

FGSM_SCALE = 0.1  # eps_a is expressed against an upper limit of 1.0
MIN_STD = 1e-6


@dataclass(frozen=True)
class StyleStats:
    mean: np.ndarray  # per channel, pixel units
    std: np.ndarray
    style_id: int
    seed: int

    def __post_init__(self):
        if np.any(np.asarray(self.std) <= 0):
            raise ConfigurationError("style std must be > 0")


def train_surrogate(private: LabeledDataset, schedule: nn.TrainSchedule, spec: nn.ModelSpec,
                    attacker_id: Optional[int] = None, seed: int = 0, dtype=np.float32) -> nn.ModelParams:
    """Train an attacker's own model on its (possibly poisoned) train-time
    share, holding out 20% of it for early stopping."""
    if len(private) < 2:
        raise InputError("surrogate needs at least two private examples")
    owners = np.unique(private.owner)
    if attacker_id is not None and (len(owners) != 1 or owners[0] != attacker_id):
        raise InputError(f"surrogate data for attacker {attacker_id} contains rows owned by {owners.tolist()}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(private))
    n_fit, _ = split_80_20(len(private))
    n_fit = min(max(n_fit, 1), len(private) - 1)
    fit, hold = private.subset(order[:n_fit]), private.subset(order[n_fit:])
    params = nn.build_model(spec, seed, dtype)
    params, _ = nn.train_with_early_stopping(params, fit, hold, schedule)
    return params


def fgsm_perturb(surrogate: nn.ModelParams, x: np.ndarray, labels, eps_a: float) -> np.ndarray:
    """One signed-gradient step of ``255 * 0.1 * eps_a`` pixels that raises
    the surrogate's loss on ``labels``; clipped to [0, 255]."""
    if not 0 <= eps_a <= 1:
        raise ConfigurationError(f"eps_a must lie in [0, 1], got {eps_a}")
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    labels = np.atleast_1d(labels)
    if eps_a == 0:
        return x.copy()
    g = nn.input_gradient(surrogate, xb, labels)
    out = np.clip(xb + 255.0 * FGSM_SCALE * eps_a * np.sign(g), 0, 255).astype(xb.dtype)
    return out[0] if single else out


def sample_style(seed: int) -> StyleStats:
    """Random target channel statistics: mean in [64, 192], std in [16, 96]."""
    rng = np.random.default_rng(seed)
    return StyleStats(mean=rng.uniform(64, 192, size=3), std=rng.uniform(16, 96, size=3), style_id=int(seed), seed=int(seed))


def stylize(x: np.ndarray, style: StyleStats, alpha: float) -> np.ndarray:
    """Blend each image with a copy whose channel mean/std are replaced by
    the style's, by weight ``alpha``."""
    if not 0 <= alpha <= 1:
        raise ConfigurationError(f"alpha must lie in [0, 1], got {alpha}")
    x = np.asarray(x)
    xf = x.astype(np.float64)
    mu = xf.mean(axis=(-3, -2), keepdims=True)
    sigma = np.maximum(xf.std(axis=(-3, -2), keepdims=True), MIN_STD)
    c = x.shape[-1]
    transferred = np.asarray(style.std)[:c] * (xf - mu) / sigma + np.asarray(style.mean)[:c]
    out = np.clip((1 - alpha) * xf + alpha * transferred, 0, 255)
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out


def stylize_dataset(data: LabeledDataset, style: StyleStats, alpha: float) -> LabeledDataset:
    out = data.copy()
    out.images = stylize(out.images, style, alpha)
    return out
