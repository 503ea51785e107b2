"""Defender actions: two removal filters and two training-time augmentations.

Removal defenses score examples from a model pre-trained on the (possibly
poisoned) pool, drop the suspects and retrain from a fresh initialization.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.cluster import KMeans
from sklearn.linear_model import LogisticRegression

from . import nn
from .data import DEFENDER, LabeledDataset
from .errors import ConfigurationError, InputError
from .triggers import apply_trigger, gen_random_trigger

log = logging.getLogger(__name__)

DEFENSE_KINDS = ("none", "cutmix", "backdoor-adv-train", "spectral-signatures", "activation-clustering")


@dataclass
class DefenseKind:
    kind: str = "none"
    k_removals: Optional[int] = None  # spectral; None -> 5 per attacker
    trigger_count: int = 20  # backdoor adversarial training
    p: float = 0.4
    epsilon: float = 0.4
    reduce_dim: int = 10  # activation clustering
    full_retrain: bool = False
    threshold: float = 1.0

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigurationError(f"unknown defense {self.kind!r}; expected one of {DEFENSE_KINDS}")
        if not (0 <= self.p <= 1 and 0 <= self.epsilon <= 1):
            raise ConfigurationError("defender p and epsilon must lie in [0, 1]")
        if self.trigger_count < 1 or self.reduce_dim < 2:
            raise ConfigurationError("trigger_count must be >= 1 and reduce_dim >= 2")
        if self.k_removals is not None and self.k_removals < 0:
            raise ConfigurationError("k_removals must be >= 0")


@dataclass
class InspectionReport:
    kind: str
    scores: np.ndarray
    removed: np.ndarray  # indices into the inspected pool
    per_class_removed: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    notes: str = ""

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n_inspected": int(len(self.scores)),
            "n_removed": int(len(self.removed)),
            "removed": [int(i) for i in self.removed],
            "per_class_removed": {str(k): int(v) for k, v in sorted(self.per_class_removed.items())},
            "flags": list(self.flags),
            "notes": self.notes,
        }


def _representations(pool: LabeledDataset, model, representations) -> np.ndarray:
    if representations is not None:
        reps = np.asarray(representations, dtype=np.float64)
        if len(reps) != len(pool):
            raise InputError("one representation row per pool example is required")
        return reps
    if model is None:
        raise InputError("need a model or precomputed representations")
    return nn.penultimate_activations(model, pool).astype(np.float64)


def spectral_quotas(counts: np.ndarray, k_total: int) -> np.ndarray:
    """k_total // K per class; the remainder goes one each to the largest
    classes (lower class index first on ties)."""
    k = len(counts)
    quotas = np.full(k, k_total // k, dtype=np.int64)
    order = sorted(range(k), key=lambda c: (-counts[c], c))
    for c in order[: k_total % k]:
        quotas[c] += 1
    return quotas


def spectral_scores(reps: np.ndarray) -> np.ndarray:
    """Squared projection of centred rows onto the top right singular
    vector of the centred matrix."""
    centred = reps - reps.mean(axis=0, keepdims=True)
    if len(reps) < 2 or not np.any(centred):
        return np.zeros(len(reps))
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    return (centred @ vt[0]) ** 2


def spectral_filter(pool: LabeledDataset, model: Optional[nn.ModelParams], k_total: int, num_classes: Optional[int] = None,
                    representations=None) -> tuple[LabeledDataset, InspectionReport]:
    """Spectral-signature removal of ``k_total`` examples split across the
    classes the model was trained against."""
    if k_total >= len(pool):
        raise ConfigurationError(f"cannot remove {k_total} of {len(pool)} examples")
    labels = pool.training_labels()
    k = num_classes or (model.spec.num_classes if model is not None else int(labels.max()) + 1)
    scores = np.zeros(len(pool))
    removed = []
    per_class = {}
    flags = []
    if k_total > 0:
        reps = _representations(pool, model, representations)
        counts = np.bincount(labels, minlength=k)
        quotas = spectral_quotas(counts, k_total)
        for c in range(k):
            idx = np.flatnonzero(labels == c)
            if len(idx) == 0:
                continue
            s = spectral_scores(reps[idx])
            scores[idx] = s
            q = int(quotas[c])
            if q >= len(idx):
                q = len(idx) - 1
                flags.append(f"class {c}: quota {quotas[c]} exceeds class size {len(idx)}; kept one example")
            if q <= 0:
                continue
            top = idx[np.argsort(-s, kind="stable")[:q]]
            removed.append(top)
            per_class[c] = q
    removed_idx = np.sort(np.concatenate(removed)) if removed else np.zeros(0, dtype=np.int64)
    keep = np.setdiff1d(np.arange(len(pool)), removed_idx)
    report = InspectionReport("spectral-signatures", scores, removed_idx, per_class, flags)
    return pool.subset(keep), report


def whitened_pca(reps: np.ndarray, dim: int) -> np.ndarray:
    centred = reps - reps.mean(axis=0, keepdims=True)
    u, s, _ = np.linalg.svd(centred, full_matrices=False)
    keep = int(min(dim, np.sum(s > 1e-10 * max(s.max(initial=0), 1e-300))))
    if keep == 0:
        return np.zeros((len(reps), 1))
    return u[:, :keep] * np.sqrt(max(len(reps) - 1, 1))


def _refit_predict(train_x, train_y, test_x, seed: int) -> np.ndarray:
    classes = np.unique(train_y)
    if len(classes) == 1:
        return np.full(len(test_x), classes[0])
    clf = LogisticRegression(max_iter=500, random_state=seed)
    clf.fit(train_x, train_y)
    return clf.predict(test_x)


def activation_cluster_filter(pool: LabeledDataset, model: Optional[nn.ModelParams], reduce_dim: int = 10,
                              num_classes: Optional[int] = None, representations=None, threshold: float = 1.0,
                              seed: int = 3407, retrain_fn=None) -> tuple[LabeledDataset, InspectionReport]:
    """Activation clustering with exclusionary reclassification.

    Per class, representations are whitened onto their top principal
    components and split by 2-means. For each cluster a classifier is refit
    without it (the final dense layer, as multinomial logistic regression on
    the representations, or ``retrain_fn(kept_pool) -> predict`` for a full
    retrain) and the cluster is scored as (#members assigned to another
    class) / (#members kept in their class). At most one cluster per class,
    the highest-scoring one above ``threshold`` (the smaller on ties), is
    removed.
    """
    if reduce_dim < 2:
        raise ConfigurationError("reduce_dim must be >= 2")
    labels = pool.training_labels()
    k = num_classes or (model.spec.num_classes if model is not None else int(labels.max()) + 1)
    reps = _representations(pool, model, representations)
    scores = np.zeros(len(pool))
    removed, per_class, flags = [], {}, []
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        if len(idx) < 2:
            continue
        reduced = whitened_pca(reps[idx], reduce_dim)
        assign = KMeans(n_clusters=2, n_init=10, random_state=seed).fit_predict(reduced)
        sizes = np.bincount(assign, minlength=2)
        if sizes.min() == 0:
            flags.append(f"class {c}: degenerate clustering, nothing removed")
            continue
        cluster_scores = []
        for j in range(2):
            members = idx[assign == j]
            keep_mask = np.ones(len(pool), dtype=bool)
            keep_mask[members] = False
            if retrain_fn is not None:
                predict = retrain_fn(pool.subset(np.flatnonzero(keep_mask)))
                pred = predict(pool.subset(members))
            else:
                pred = _refit_predict(reps[keep_mask], labels[keep_mask], reps[members], seed)
            elsewhere = int(np.sum(pred != c))
            kept = int(np.sum(pred == c))
            score = elsewhere / kept if kept else np.inf
            cluster_scores.append(score)
            scores[members] = min(score, 1e12)
        # equal scores (e.g. both clusters fully reassigned) go to the smaller cluster
        j_best = max(range(2), key=lambda j: (cluster_scores[j], -sizes[j], -j))
        if cluster_scores[j_best] > threshold:
            members = idx[assign == j_best]
            removed.append(members)
            per_class[c] = len(members)
    removed_idx = np.sort(np.concatenate(removed)) if removed else np.zeros(0, dtype=np.int64)
    keep = np.setdiff1d(np.arange(len(pool)), removed_idx)
    report = InspectionReport("activation-clustering", scores, removed_idx, per_class, flags,
                              notes=f"whitened PCA to {reduce_dim} dims in place of ICA")
    return pool.subset(keep), report


# ---------------------------------------------------------------- augmentation


def cutmix_box(h: int, w: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Random box covering about (1 - lam) of the image; returns y0, y1, x0, x1."""
    ratio = np.sqrt(1.0 - lam)
    bh, bw = int(h * ratio), int(w * ratio)
    cy, cx = rng.integers(h), rng.integers(w)
    y0, y1 = np.clip(cy - bh // 2, 0, h), np.clip(cy + bh - bh // 2, 0, h)
    x0, x1 = np.clip(cx - bw // 2, 0, w), np.clip(cx + bw - bw // 2, 0, w)
    return int(y0), int(y1), int(x0), int(x1)


def cutmix_batch(batch: np.ndarray, labels: np.ndarray, seed=None, rng: Optional[np.random.Generator] = None,
                 lam: Optional[float] = None, box=None, perm=None):
    """Paste a box from a shuffled partner into every image of the batch.

    Returns ``(mixed, labels, partner_labels, weight)`` where ``weight`` is
    the fraction of each image left untouched (the loss weight of the
    original label).
    """
    if len(batch) < 2:
        raise InputError("cutmix needs a batch of at least two images")
    rng = rng if rng is not None else np.random.default_rng(seed)
    h, w = batch.shape[1:3]
    if lam is None:
        lam = rng.beta(1.0, 1.0)
    if perm is None:
        perm = rng.permutation(len(batch))
    if box is None:
        box = cutmix_box(h, w, lam, rng)
    y0, y1, x0, x1 = box
    mixed = batch.copy()
    mixed[:, y0:y1, x0:x1, :] = batch[perm, y0:y1, x0:x1, :]
    weight = 1.0 - (y1 - y0) * (x1 - x0) / (h * w)
    return mixed, np.asarray(labels), np.asarray(labels)[perm], float(weight)


def cutmix_transform(num_classes: int):
    """Batch hook for :func:`nn.train_arrays` producing soft targets."""

    def transform(xb, yb, rng):
        if len(xb) < 2:
            return xb, nn.one_hot(yb, num_classes)
        mixed, ya, yb2, weight = cutmix_batch(xb, yb, rng=rng)
        targets = weight * nn.one_hot(ya, num_classes) + (1 - weight) * nn.one_hot(yb2, num_classes)
        return mixed, targets

    return transform


def badv_train_augment(pool: LabeledDataset, trigger_count: int = 20, p: float = 0.4, epsilon: float = 0.4,
                       seed: int = 3407) -> LabeledDataset:
    """Backdoor adversarial training data.

    Half of the pool stays clean; the other half is cut into
    ``trigger_count`` equal slices and a fraction ``p`` of slice ``t`` is
    stamped with defender trigger ``t``. Labels are never changed, so the
    model learns to ignore trigger-like patterns.
    """
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    half = len(pool) // 2
    slice_size = (len(pool) - half) // trigger_count
    if slice_size < 1:
        raise ConfigurationError(f"{trigger_count} trigger slices do not fit in {len(pool) - half} examples")
    out = pool.copy()
    dims = pool.dims
    for t in range(trigger_count):
        sl = order[half + t * slice_size : half + (t + 1) * slice_size]
        n_stamp = int(np.floor(p * len(sl) + 0.5))
        if n_stamp == 0:
            continue
        chosen = sl[:n_stamp]
        trig = gen_random_trigger(epsilon, dims, seed=seed + 1 + t)
        out.images[chosen] = apply_trigger(out.images[chosen], trig)
        out.is_triggered[chosen] = True
    return out


# ---------------------------------------------------------------- orchestration


def run_defense(kind: DefenseKind, pool: LabeledDataset, val: LabeledDataset, schedule: nn.TrainSchedule,
                spec: nn.ModelSpec, seed: int = 3407, n_attackers: int = 1, dtype=np.float32):
    """Train the defender's model under ``kind``.

    Returns ``(params, report, history)``; ``report`` is ``None`` for the
    augmentation kinds and plain training.
    """
    init = nn.build_model(spec, seed, dtype)
    if kind.kind == "none":
        params, hist = nn.train_with_early_stopping(init, pool, val, schedule)
        return params, None, hist
    if kind.kind == "cutmix":
        params, hist = nn.train_with_early_stopping(init, pool, val, schedule,
                                                    batch_transform=cutmix_transform(spec.num_classes))
        return params, None, hist
    if kind.kind == "backdoor-adv-train":
        own = pool.owner == DEFENDER
        augmented = badv_train_augment(pool.subset(np.flatnonzero(own)), kind.trigger_count, kind.p, kind.epsilon, seed)
        train = LabeledDataset.concat([augmented, pool.subset(np.flatnonzero(~own))])
        params, hist = nn.train_with_early_stopping(init, train, val, schedule)
        return params, None, hist
    pre, _ = nn.train_with_early_stopping(init, pool, val, schedule)
    if kind.kind == "spectral-signatures":
        k_total = kind.k_removals if kind.k_removals is not None else 5 * n_attackers
        kept, report = spectral_filter(pool, pre, min(k_total, len(pool) - 1), spec.num_classes)
    else:
        retrain_fn = None
        if kind.full_retrain:
            def retrain_fn(sub):
                m, _ = nn.train_with_early_stopping(nn.build_model(spec, seed, dtype), sub, val, schedule)
                return lambda data: nn.predict(m, data.images)
        kept, report = activation_cluster_filter(pool, pre, kind.reduce_dim, spec.num_classes,
                                                 threshold=kind.threshold, seed=seed, retrain_fn=retrain_fn)
    log.info("%s removed %d of %d", kind.kind, len(report.removed), len(pool))
    params, hist = nn.train_with_early_stopping(nn.build_model(spec, seed, dtype), kept, val, schedule)
    return params, report, hist
