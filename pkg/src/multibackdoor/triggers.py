"""Backdoor trigger patterns: generation, stamping and distances.

A trigger is a binary shape mask ``z`` and a value mask ``m`` (pixel units,
zero off the mask). Stamping replaces the masked pixels:
``x * (1 - z) + m * z``. Orthogonal triggers additionally carry one l x l
orthogonal matrix per channel that is right-multiplied into the masked terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn
from .data import NO_LABEL, LabeledDataset
from .errors import ConfigurationError, ShapeError, ValidationError

TRIGGER_KINDS = ("badnet-square", "random", "orthogonal", "clean-label")


@dataclass
class TriggerPattern:
    z: np.ndarray  # (l, w, c) in {0, 1}, identical across channels
    m: np.ndarray  # (l, w, c) in [0, 255], zero where z == 0
    epsilon: float = 0.0
    seed: Optional[int] = None
    o: Optional[np.ndarray] = None  # (c, l, l) orthogonal, optional

    @property
    def dims(self) -> tuple:
        return tuple(self.z.shape)

    def validate(self) -> None:
        if not np.isin(self.z, (0, 1)).all():
            raise ValidationError("shape mask must be binary")
        if not (self.z == self.z[..., :1]).all():
            raise ValidationError("shape mask must be identical across channels")
        if np.any(self.m[self.z == 0] != 0):
            raise ValidationError("value mask must be zero off the shape mask")
        if self.o is not None:
            check_orthogonal(self.o)


@dataclass
class AttackerStrategy:
    """One attacker's action: perturbation rate, poison rate, target policy
    and trigger algorithm, plus optional test-time shifts."""

    epsilon: float = 0.55
    p: float = 0.55
    target_policy: str = "random"
    algorithm: str = "random"
    eps_adv: Optional[float] = None
    style_alpha: Optional[float] = None
    target_label: Optional[int] = None

    def __post_init__(self):
        for name in ("epsilon", "p", "eps_adv", "style_alpha"):
            v = getattr(self, name)
            if v is not None and not 0 <= v <= 1:
                raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
        if self.algorithm not in TRIGGER_KINDS:
            raise ConfigurationError(f"unknown trigger algorithm {self.algorithm!r}; expected one of {TRIGGER_KINDS}")


def gen_random_trigger(epsilon: float, dims: tuple, seed: int) -> TriggerPattern:
    """Random-BadNet trigger.

    One uniform draw per (l, w) position decides membership (``u < epsilon``),
    so on a fixed seed the mask only grows with epsilon. Values are drawn per
    channel, uniform on [0, 255).
    """
    if not 0 <= epsilon <= 1:
        raise ConfigurationError(f"epsilon must lie in [0, 1], got {epsilon}")
    l, w, c = dims
    rng = np.random.default_rng(seed)
    u = rng.random((l, w))
    values = rng.random((l, w, c)) * 255.0
    z = np.repeat((u < epsilon)[..., None], c, axis=2).astype(np.float32)
    return TriggerPattern(z=z, m=(values * z).astype(np.float32), epsilon=epsilon, seed=seed)


def badnet_square_trigger(dims: tuple, size: int = 3, value: float = 255.0) -> TriggerPattern:
    """Opaque ``size x size`` patch in the bottom-right corner."""
    l, w, c = dims
    if not 1 <= size <= min(l, w):
        raise ConfigurationError(f"square size {size} does not fit {dims}")
    z = np.zeros(dims, dtype=np.float32)
    z[l - size :, w - size :, :] = 1
    return TriggerPattern(z=z, m=z * np.float32(value), epsilon=size * size / (l * w))


def sample_haar_orthogonal(dim: int, seed: int) -> np.ndarray:
    """Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
    signs of R's diagonal folded into Q."""
    if dim < 1:
        raise ConfigurationError("dim must be >= 1")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1
    return q * d


def check_orthogonal(o: np.ndarray, tol: float = 1e-4) -> None:
    o = np.asarray(o, dtype=np.float64)
    eye = np.eye(o.shape[-1])
    for ch in o.reshape(-1, *o.shape[-2:]):
        if np.abs(ch.T @ ch - eye).max() > tol:
            raise ValidationError("transform is not orthogonal")


def orthogonal_trigger(base: TriggerPattern, seed: int) -> TriggerPattern:
    """Attach a Haar transform (one matrix, replicated per channel) to a
    shared base trigger. Requires square images."""
    l, w, c = base.dims
    if l != w:
        raise ConfigurationError("orthogonal triggers need square images")
    o = np.repeat(sample_haar_orthogonal(l, seed)[None], c, axis=0)
    return TriggerPattern(z=base.z.copy(), m=base.m.copy(), epsilon=base.epsilon, seed=seed, o=o)


def _check_dims(x: np.ndarray, t: TriggerPattern) -> None:
    if x.shape[-3:] != t.dims:
        raise ShapeError(f"image dims {x.shape[-3:]} do not match trigger dims {t.dims}")


def apply_trigger(x: np.ndarray, t: TriggerPattern) -> np.ndarray:
    """Replace pixels on the mask with the trigger's values."""
    x = np.asarray(x)
    _check_dims(x, t)
    out = x * (1 - t.z) + t.m * t.z
    return out.astype(x.dtype, copy=False) if np.issubdtype(x.dtype, np.floating) else out


def effective_pattern(t: TriggerPattern) -> tuple[np.ndarray, np.ndarray]:
    """``(z o, (m z) o)`` per channel; the plain masks when no transform."""
    if t.o is None:
        return t.z, t.m * t.z
    zo = np.einsum("lwc,cwk->lkc", t.z.astype(np.float64), t.o)
    mzo = np.einsum("lwc,cwk->lkc", (t.m * t.z).astype(np.float64), t.o)
    return zo, mzo


def apply_orthogonal_trigger(x: np.ndarray, t: TriggerPattern) -> np.ndarray:
    """``clip(x * (1 - z o) + (m z) o, 0, 255)`` with the transform applied
    per channel by right matrix multiplication."""
    if t.o is None:
        raise ValidationError("trigger has no orthogonal transform")
    x = np.asarray(x)
    _check_dims(x, t)
    check_orthogonal(t.o)
    zo, mzo = effective_pattern(t)
    out = np.clip(x * (1 - zo) + mzo, 0, 255)
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out


def stamp(x: np.ndarray, t: TriggerPattern) -> np.ndarray:
    return apply_orthogonal_trigger(x, t) if t.o is not None else apply_trigger(x, t)


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    if np.array_equal(a, b):
        return 0.0  # exact, free of rounding in the normalisation
    return float(1 - np.clip(a @ b / (na * nb), -1, 1))


def trigger_cosine_distance(t1: TriggerPattern, t2: TriggerPattern, mode: str = "shape") -> float:
    """1 - cosine similarity of the flattened shape masks (``"shape"``) or of
    the masked values (``"shape+colour"``). A zero operand gives 1."""
    if t1.dims != t2.dims:
        raise ShapeError("triggers differ in dims")
    z1, v1 = effective_pattern(t1)
    z2, v2 = effective_pattern(t2)
    if mode == "shape":
        return _cosine_distance(z1, z2)
    if mode in ("shape+colour", "shape+color"):
        return _cosine_distance(v1, v2)
    raise ConfigurationError(f"unknown distance mode {mode!r}")


# ---------------------------------------------------------------- targets


def assign_target_labels(n_attackers: int, num_classes: int, overlap: float = 0.0, shared_label: int = 0,
                         seed: int = 3407, mode: str = "random", classes=None) -> np.ndarray:
    """Target label per attacker.

    The first ceil(overlap * N) attackers take ``shared_label``. In
    ``"random"`` mode the others draw uniformly from the remaining classes.
    In ``"structured"`` mode the others are dealt round-robin over a shuffled
    class pool (``classes``, default all); the shared label is withheld from
    the pool only when at least one attacker shares it.
    """
    if num_classes < 2:
        raise ConfigurationError("need at least two classes")
    if not 0 <= overlap <= 1:
        raise ConfigurationError(f"overlap must lie in [0, 1], got {overlap}")
    if not 0 <= shared_label < num_classes:
        raise ConfigurationError("shared label out of range")
    classes = list(range(num_classes)) if classes is None else [int(c) for c in classes]
    n_shared = min(n_attackers, int(math.ceil(overlap * n_attackers - 1e-9)))
    rng = np.random.default_rng(seed)
    labels = np.full(n_attackers, shared_label, dtype=np.int64)
    rest = n_attackers - n_shared
    if mode == "random":
        pool = np.array([c for c in range(num_classes) if c != shared_label])
        labels[n_shared:] = rng.choice(pool, size=rest)
    elif mode == "structured":
        pool = [c for c in classes if not (n_shared and c == shared_label)]
        if not pool:
            raise ConfigurationError("structured label pool is empty")
        pool = rng.permutation(pool)
        labels[n_shared:] = [pool[i % len(pool)] for i in range(rest)]
    else:
        raise ConfigurationError(f"unknown label mode {mode!r}")
    return labels


# ---------------------------------------------------------------- poisoning


def poison_private_set(share: LabeledDataset, trigger: TriggerPattern, target: int, budget: int,
                       seed: int) -> LabeledDataset:
    """Stamp ``budget`` random rows of an attacker's train-time share and
    relabel them to ``target``; clean labels are kept alongside."""
    if budget > len(share):
        raise ConfigurationError(f"budget {budget} exceeds share size {len(share)}")
    out = share.copy()
    if budget <= 0:
        return out
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(share), size=budget, replace=False))
    out.images[idx] = stamp(out.images[idx], trigger)
    out.poison_labels[idx] = target
    out.is_poisoned[idx] = True
    out.is_triggered[idx] = True
    return out


def trigger_runtime_set(share: LabeledDataset, trigger: TriggerPattern, target: int, rate: float = 1.0,
                        seed: int = 0) -> LabeledDataset:
    """Run-time evaluation set: stamped copies of a ``rate`` fraction of the
    share (poison label = ``target``) followed by untouched copies of every
    row (used for clean accuracy)."""
    if not 0 <= rate <= 1:
        raise ConfigurationError(f"run-time poison rate must lie in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    count = int(math.floor(rate * len(share) + 0.5))
    idx = np.sort(rng.choice(len(share), size=count, replace=False))
    triggered = share.subset(idx)
    triggered.images = stamp(triggered.images, trigger)
    triggered.poison_labels[:] = target
    triggered.is_poisoned[:] = True
    triggered.is_triggered[:] = True
    clean = share.copy()
    clean.poison_labels[:] = NO_LABEL
    clean.is_poisoned[:] = False
    clean.is_triggered[:] = False
    return LabeledDataset.concat([triggered, clean])


def pgd_perturb(surrogate: nn.ModelParams, x: np.ndarray, labels: np.ndarray, eps: float, steps: int,
                step_size: Optional[float] = None) -> np.ndarray:
    """Sign-gradient ascent on each example's own loss inside an L-inf ball
    of radius ``255 * eps`` pixels, clipped to the colour range."""
    radius = 255.0 * eps
    step = radius / 4 if step_size is None else 255.0 * step_size
    x0 = np.asarray(x, dtype=np.float64)
    adv = x0.copy()
    for _ in range(steps):
        g = nn.input_gradient(surrogate, adv, labels)
        adv = adv + step * np.sign(g)
        adv = np.clip(np.clip(adv, x0 - radius, x0 + radius), 0, 255)
    return adv


def clean_label_poison(share: LabeledDataset, surrogate: nn.ModelParams, trigger: TriggerPattern, eps_pgd: float,
                       steps: int = 10, budget: int = 0, seed: int = 0, target: Optional[int] = None,
                       step_size: Optional[float] = None) -> LabeledDataset:
    """Clean-label poisoning: PGD-perturb chosen rows away from their own
    label, then stamp the trigger. Labels are not changed.

    With ``target`` set, rows are drawn from that class only and the budget is
    capped by its size.
    """
    if eps_pgd <= 0:
        raise ConfigurationError("eps_pgd must be > 0")
    out = share.copy()
    candidates = np.arange(len(share)) if target is None else np.flatnonzero(share.clean_labels == target)
    budget = min(budget, len(candidates))
    if budget <= 0:
        return out
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(candidates, size=budget, replace=False))
    imgs = out.images[idx]
    if steps > 0:
        imgs = pgd_perturb(surrogate, imgs, out.clean_labels[idx], eps_pgd, steps, step_size)
    out.images[idx] = stamp(imgs, trigger).astype(out.images.dtype)
    out.poison_labels[idx] = out.clean_labels[idx]
    out.is_poisoned[idx] = True
    out.is_triggered[idx] = True
    return out
