"""Subnetwork probes: lottery tickets by iterative magnitude pruning,
per-layer cosine distances, and two gradient/threshold checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import nn
from .data import LabeledDataset
from .errors import ConfigurationError, InputError, ShapeError
from .triggers import TriggerPattern, apply_trigger

log = logging.getLogger(__name__)


@dataclass
class PruneResult:
    masks: dict  # "<layer>.weight" -> {0, 1} array; biases are never pruned
    ticket: nn.ModelParams  # init * mask
    dense: nn.ModelParams  # the unpruned network after its first training run
    remaining_fraction: float
    rounds: int
    mask_history: list = field(default_factory=list)

    @property
    def spec(self) -> nn.ModelSpec:
        return self.ticket.spec


def prunable(params: nn.ModelParams) -> list[str]:
    return [k for k in params.tensors if k.endswith(".weight")]


def _remaining(masks: dict) -> float:
    kept = sum(int(m.sum()) for m in masks.values())
    total = sum(m.size for m in masks.values())
    return kept / total


def _apply_masks(params: nn.ModelParams, masks: dict) -> nn.ModelParams:
    out = params.copy()
    for k, m in masks.items():
        out.tensors[k] = out.tensors[k] * m
    return out


def imp_prune(spec: nn.ModelSpec, init: nn.ModelParams, train: LabeledDataset, val: LabeledDataset, target: float,
              rounds: int = 10, schedule: Optional[nn.TrainSchedule] = None) -> PruneResult:
    """Iterative magnitude pruning with rewinding to ``init``.

    Each round trains the current ticket, then globally drops the
    smallest-magnitude surviving weights so that ``target ** (r / rounds)``
    of all weights remain after round ``r``, and rewinds survivors to their
    initial values.
    """
    if not 0 < target <= 1:
        raise ConfigurationError(f"target fraction must lie in (0, 1], got {target}")
    if rounds < 1:
        raise ConfigurationError("rounds must be >= 1")
    if init.spec != spec:
        raise ShapeError("init parameters do not belong to spec")
    schedule = schedule or nn.TrainSchedule()
    keys = prunable(init)
    total = sum(init.tensors[k].size for k in keys)
    if target * total < len(keys):
        raise ConfigurationError(f"target {target} keeps fewer than one weight per layer ({total} weights)")
    masks = {k: np.ones_like(init.tensors[k]) for k in keys}
    history = [{k: m.copy() for k, m in masks.items()}]
    dense = None
    if target >= 1:
        dense, _ = nn.train_with_early_stopping(init, train, val, schedule)
        return PruneResult(masks, init.copy(), dense, 1.0, 0, history)
    executed = 0
    for r in range(1, rounds + 1):
        ticket = _apply_masks(init, masks)
        trained, _ = nn.train_with_early_stopping(ticket, train, val, schedule, masks=masks)
        if dense is None:
            dense = trained
        keep = int(round(total * target ** (r / rounds)))
        alive = np.concatenate([np.abs(trained.tensors[k])[masks[k] > 0] for k in keys])
        if keep < len(alive):
            # rank survivors globally; stable tie-break keeps the count exact
            flat = np.concatenate([np.where(masks[k] > 0, np.abs(trained.tensors[k]), -np.inf).ravel() for k in keys])
            order = np.argsort(-flat, kind="stable")
            new_flat = np.zeros(total, dtype=init.dtype)
            new_flat[order[:keep]] = 1
            pos = 0
            for k in keys:
                size = masks[k].size
                masks[k] = new_flat[pos : pos + size].reshape(masks[k].shape)
                pos += size
        history.append({k: m.copy() for k, m in masks.items()})
        executed = r
        log.debug("IMP round %d: %.4f remaining", r, _remaining(masks))
    ticket = _apply_masks(init, masks)
    return PruneResult(masks, ticket, dense, _remaining(masks), executed, history)


def train_ticket(result: PruneResult, train: LabeledDataset, val: LabeledDataset,
                 schedule: Optional[nn.TrainSchedule] = None):
    """Retrain a ticket with its mask held fixed."""
    return nn.train_with_early_stopping(result.ticket, train, val, schedule or nn.TrainSchedule(), masks=result.masks)


def _cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    if np.array_equal(a, b):
        return 0.0  # exact, free of rounding in the normalisation
    return float(1 - np.clip(a @ b / (na * nb), -1, 1))


def _layer_vectors(x: Union[nn.ModelParams, PruneResult], mode: str) -> dict:
    if mode == "full":
        params = x.dense if isinstance(x, PruneResult) else x
        return {name: np.concatenate([params.tensors[f"{name}.weight"].ravel(), params.tensors[f"{name}.bias"].ravel()])
                for name in params.layer_names()}
    if not isinstance(x, PruneResult):
        raise InputError(f"mode {mode!r} needs pruning results (masks)")
    names = x.dense.layer_names()
    if mode == "mask":
        return {name: x.masks[f"{name}.weight"].ravel() for name in names}
    if mode == "ticket":
        return {name: (x.dense.tensors[f"{name}.weight"] * x.masks[f"{name}.weight"]).ravel() for name in names}
    raise ConfigurationError(f"unknown distance mode {mode!r}")


def layer_cosine_distance(a, b, mode: str = "full") -> dict:
    """Per-layer ``1 - cos`` between two networks, zeros included.

    ``full`` compares raw weights and biases (the dense network of a
    :class:`PruneResult`), ``mask`` the binary weight masks and ``ticket``
    the dense weights multiplied by their masks.
    """
    spec_a = a.spec if isinstance(a, (nn.ModelParams, PruneResult)) else None
    spec_b = b.spec if isinstance(b, (nn.ModelParams, PruneResult)) else None
    if spec_a != spec_b:
        raise ShapeError("networks have different specs")
    va, vb = _layer_vectors(a, mode), _layer_vectors(b, mode)
    return {name: _cosine_distance(va[name], vb[name]) for name in va}


def lemma3_check(perturb_fraction: float, poisoned_count: int, clean_count: int) -> bool:
    """Sufficient condition for a backdoor to take hold: at least half the
    input perturbed and more than twice as many poisoned as clean rows."""
    return perturb_fraction >= 0.5 and poisoned_count > 2 * clean_count


def trigger_only_batch(trigger: TriggerPattern, n: int = 1) -> np.ndarray:
    """The trigger stamped onto all-zero images."""
    return apply_trigger(np.zeros((n, *trigger.dims), dtype=np.float64), trigger)


def dual_descent_probe(params: nn.ModelParams, clean_x, clean_y, trigger_x, trigger_y) -> float:
    """Fraction of parameters whose loss gradient is strictly negative both
    on the clean batch and on the trigger-only batch."""
    if len(clean_y) == 0 or len(trigger_y) == 0:
        raise InputError("both batches must be non-empty")
    _, g_clean = nn.loss_and_grads(params, clean_x, clean_y)
    _, g_trig = nn.loss_and_grads(params, trigger_x, trigger_y)
    both = sum(int(np.sum((g_clean[k] < 0) & (g_trig[k] < 0))) for k in g_clean)
    return both / params.n_params
