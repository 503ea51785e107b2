"""Datasets, joint-dataset allocation and poison-rate arithmetic."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, InputError

DEFENDER = -1
NO_LABEL = -1


@dataclass
class LabeledDataset:
    """Column-oriented labelled image set.

    ``poison_labels`` holds ``-1`` where a row is not poisoned. ``uid`` is a
    stable row identifier used to audit partitions and provenance.
    """

    images: np.ndarray
    clean_labels: np.ndarray
    poison_labels: Optional[np.ndarray] = None
    is_poisoned: Optional[np.ndarray] = None
    is_triggered: Optional[np.ndarray] = None
    owner: Optional[np.ndarray] = None
    uid: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.clean_labels)
        self.clean_labels = np.asarray(self.clean_labels, dtype=np.int64)
        if self.poison_labels is None:
            self.poison_labels = np.full(n, NO_LABEL, dtype=np.int64)
        if self.is_poisoned is None:
            self.is_poisoned = np.zeros(n, dtype=bool)
        if self.is_triggered is None:
            self.is_triggered = np.zeros(n, dtype=bool)
        if self.owner is None:
            self.owner = np.full(n, DEFENDER, dtype=np.int64)
        if self.uid is None:
            self.uid = np.arange(n, dtype=np.int64)
        if len(self.images) != n:
            raise InputError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.clean_labels)

    @property
    def dims(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            self.images[idx], self.clean_labels[idx], self.poison_labels[idx], self.is_poisoned[idx],
            self.is_triggered[idx], self.owner[idx], self.uid[idx],
        )

    def copy(self) -> "LabeledDataset":
        return self.subset(np.arange(len(self)))

    def training_labels(self) -> np.ndarray:
        """Label a model is trained against: poison label where poisoned."""
        return np.where(self.is_poisoned, self.poison_labels, self.clean_labels)

    def with_owner(self, owner: int) -> "LabeledDataset":
        out = self.copy()
        out.owner[:] = owner
        return out

    def validate(self, num_classes: Optional[int] = None) -> None:
        if np.any(self.is_poisoned != (self.poison_labels >= 0)):
            raise InputError("poison_label must be present exactly on poisoned rows")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 255):
            raise InputError("pixel values must lie in [0, 255]")
        if num_classes is not None and len(self) and (
            self.clean_labels.max() >= num_classes or self.poison_labels.max() >= num_classes
        ):
            raise InputError("label out of range")

    @staticmethod
    def concat(parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        parts = [p for p in parts if p is not None]
        if not parts:
            raise InputError("nothing to concatenate")
        return LabeledDataset(
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.clean_labels for p in parts]),
            np.concatenate([p.poison_labels for p in parts]),
            np.concatenate([p.is_poisoned for p in parts]),
            np.concatenate([p.is_triggered for p in parts]),
            np.concatenate([p.owner for p in parts]),
            np.concatenate([p.uid for p in parts]),
        )


def _smooth_pattern(rng: np.random.Generator, dims: tuple, coarse: int = 4) -> np.ndarray:
    l, w, c = dims
    base = rng.standard_normal((coarse, coarse, c))
    up = ndimage.zoom(base, (l / coarse, w / coarse, 1), order=1, mode="nearest")[:l, :w, :]
    up = up - up.mean()
    return up / (up.std() + 1e-12)


def class_prototypes(k: int, dims: tuple, separation: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    protos = np.stack([127.5 + separation * _smooth_pattern(rng, dims) for _ in range(k)])
    return np.clip(protos, 0, 255)


def synth_dataset(
    num_classes: int = 10,
    dims: tuple = (16, 16, 3),
    n: int = 6000,
    separation: float = 40.0,
    noise: float = 20.0,
    seed: int = 3407,
) -> LabeledDataset:
    """Balanced synthetic classes: smooth per-class prototypes plus Gaussian
    pixel noise, clipped to [0, 255]."""
    if n < num_classes:
        raise ConfigurationError("need at least one example per class")
    if separation <= 0:
        raise ConfigurationError("class separation must be > 0")
    protos = class_prototypes(num_classes, tuple(dims), separation, seed)
    rng = np.random.default_rng(seed + 1)
    labels = rng.permutation(np.arange(n) % num_classes)
    images = protos[labels]
    if noise > 0:
        images = images + rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, 0, 255).astype(np.float32)
    return LabeledDataset(images, labels)


# ---------------------------------------------------------------- allocation


@dataclass
class GameAllocation:
    defender_train: LabeledDataset
    defender_val: LabeledDataset
    attacker_train: list
    attacker_runtime: list
    v_d: float
    n_attackers: int
    n_total: int
    n_max: Optional[int] = None

    def shares(self) -> list[LabeledDataset]:
        return [self.defender_train, self.defender_val, *self.attacker_train, *self.attacker_runtime]


def split_80_20(n: int) -> tuple[int, int]:
    first = int(math.floor(0.8 * n + 1e-9))
    return first, n - first


def _stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    buckets = [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]
    longest = max(len(b) for b in buckets)
    order = [b[i] for i in range(longest) for b in buckets if i < len(b)]
    return np.asarray(order, dtype=np.int64)


def allocate_game(data: LabeledDataset, v_d: float, n_attackers: int, seed: int = 3407,
                  stratified: bool = False, n_max: Optional[int] = None) -> GameAllocation:
    """Shuffle and carve the joint data into defender and attacker shares.

    The defender receives floor(v_d * n) rows split 80/20 train/val; the rest
    is divided equally among attackers (each 80/20 train-time/run-time). The
    integer-division remainder joins the defender train split.
    """
    if not 0 < v_d < 1:
        raise ConfigurationError(f"V_d must lie in (0, 1), got {v_d}")
    if n_attackers < 1:
        raise ConfigurationError("need at least one attacker")
    n = len(data)
    rng = np.random.default_rng(seed)
    order = _stratified_order(data.clean_labels, rng) if stratified else rng.permutation(n)
    n_def = int(math.floor(v_d * n + 1e-9))
    share = (n - n_def) // n_attackers
    remainder = n - n_def - share * n_attackers
    d_train, d_val = split_80_20(n_def)
    a_train, a_run = split_80_20(share)
    if min(d_train, d_val, a_train, a_run) < 1:
        raise ConfigurationError(
            f"allocation leaves an empty share (n={n}, V_d={v_d}, N={n_attackers}): "
            f"defender {d_train}/{d_val}, attacker {a_train}/{a_run}"
        )
    pos = 0
    def take(count):
        nonlocal pos
        idx = order[pos : pos + count]
        pos += count
        return idx

    def_train_idx = take(d_train)
    def_val_idx = take(d_val)
    attacker_train, attacker_runtime = [], []
    for i in range(n_attackers):
        attacker_train.append(data.subset(take(a_train)).with_owner(i))
        attacker_runtime.append(data.subset(take(a_run)).with_owner(i))
    def_train_idx = np.concatenate([def_train_idx, take(remainder)])
    return GameAllocation(
        defender_train=data.subset(def_train_idx).with_owner(DEFENDER),
        defender_val=data.subset(def_val_idx).with_owner(DEFENDER),
        attacker_train=attacker_train,
        attacker_runtime=attacker_runtime,
        v_d=v_d,
        n_attackers=n_attackers,
        n_total=n,
        n_max=n_max,
    )


def real_poison_rate(v_d: float, n_max: int, p: float) -> float:
    """Fraction of the joint dataset one attacker poisons."""
    if not 0 <= p <= 1:
        raise ConfigurationError(f"poison rate p must lie in [0, 1], got {p}")
    if n_max < 1:
        raise ConfigurationError("N_max must be >= 1")
    return (1 - v_d) * (1 / n_max) * p


def budget_for(n_joint: int, rho: float, cap: Optional[int] = None) -> int:
    count = int(math.floor(rho * n_joint + 0.5))
    return count if cap is None else min(count, cap)


def poison_budget(allocation: GameAllocation, attacker_id: int, rho: float) -> int:
    """Train-time rows attacker ``attacker_id`` poisons, capped at its share."""
    return budget_for(allocation.n_total, rho, len(allocation.attacker_train[attacker_id]))


# ---------------------------------------------------------------- CIFAR-10 binary

CIFAR_RECORD = 3073
CIFAR_SIDE = 32


def read_cifar10_batch(path: str | os.PathLike) -> tuple[np.ndarray, np.ndarray]:
    """Read one CIFAR-10 binary batch.

    Each record is one label byte followed by 1024 red, 1024 green and 1024
    blue bytes, row-major 32x32. Returns ``(images NHWC uint8, labels)``.
    """
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise InputError(f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).transpose(0, 2, 3, 1)
    return np.ascontiguousarray(images), labels


def write_cifar10_batch(path: str | os.PathLike, images: np.ndarray, labels: Iterable[int]) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(list(labels), dtype=np.uint8)
    planes = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    np.concatenate([labels[:, None], planes], axis=1).tofile(path)


def load_cifar10(paths: Sequence[str | os.PathLike], limit: Optional[int] = None,
                 downsample: int = 1) -> LabeledDataset:
    """Concatenate CIFAR-10 batches into a dataset; ``downsample`` averages
    ``downsample x downsample`` pixel blocks."""
    imgs, labs = zip(*(read_cifar10_batch(p) for p in paths))
    images = np.concatenate(imgs).astype(np.float32)
    labels = np.concatenate(labs)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    if downsample > 1:
        b, h, w, c = images.shape
        s = downsample
        images = images[:, : h - h % s, : w - w % s].reshape(b, h // s, s, w // s, s, c).mean(axis=(2, 4))
    return LabeledDataset(images, labels)
