"""One defender against N backdoor attackers: game play, payoffs, payoff
matrices and pure-strategy equilibria."""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from . import nn
from .data import (DEFENDER, GameAllocation, LabeledDataset, allocate_game, load_cifar10, poison_budget,
                   real_poison_rate, synth_dataset)
from .defenses import DefenseKind, InspectionReport, run_defense
from .errors import ConfigurationError, InputError, MultiBackdoorError
from .shift import fgsm_perturb, sample_style, stylize_dataset, train_surrogate
from .triggers import (AttackerStrategy, TriggerPattern, assign_target_labels, badnet_square_trigger,
                       clean_label_poison, gen_random_trigger, orthogonal_trigger, poison_private_set,
                       trigger_runtime_set)

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- configuration


@dataclass
class DatasetSpec:
    source: str = "synthetic"
    num_classes: int = 10
    dims: tuple = (16, 16, 3)
    n: int = 6000
    separation: float = 60.0
    noise: float = 20.0
    paths: tuple = ()
    downsample: int = 2

    def build(self, seed: int) -> LabeledDataset:
        if self.source == "synthetic":
            return synth_dataset(self.num_classes, tuple(self.dims), self.n, self.separation, self.noise, seed)
        if self.source == "cifar10":
            if not self.paths:
                raise ConfigurationError("cifar10 source needs at least one batch path")
            data = load_cifar10(self.paths, limit=self.n, downsample=self.downsample)
            if data.dims != tuple(self.dims):
                raise ConfigurationError(f"CIFAR images are {data.dims}, config dims are {tuple(self.dims)}")
            return data
        raise ConfigurationError(f"unknown dataset source {self.source!r}")


@dataclass
class ModelConfig:
    arch: str = "small_cnn"
    channels: tuple = (16, 32, 32)
    head: str = "gap"
    hidden: tuple = (64,)

    def build(self, dims: tuple, num_classes: int) -> nn.ModelSpec:
        if self.arch == "small_cnn":
            return nn.small_cnn(tuple(dims), num_classes, tuple(self.channels), self.head)
        if self.arch == "mlp":
            layers: list = [nn.Flatten()]
            for h in self.hidden:
                layers += [nn.Dense(h), nn.ReLU()]
            layers.append(nn.Dense(num_classes))
            return nn.ModelSpec(tuple(layers), tuple(dims), num_classes)
        raise ConfigurationError(f"unknown architecture {self.arch!r}")


@dataclass
class GameConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    v_d: float = 0.1
    n_attackers: int = 1
    n_max: int = 50
    strategy: AttackerStrategy = field(default_factory=AttackerStrategy)
    label_overlap: Optional[float] = None  # None -> independent targets per target_policy
    shared_label: int = 0
    label_mode: str = "random"
    label_classes: Optional[tuple] = None
    runtime_rate: float = 1.0
    defense: DefenseKind = field(default_factory=DefenseKind)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: nn.TrainSchedule = field(default_factory=nn.TrainSchedule)
    square_size: int = 3
    eps_pgd: float = 16 / 255
    pgd_steps: int = 10
    base_trigger_seed: int = 0
    p_overrides: dict = field(default_factory=dict)  # attacker index -> p
    epsilon_overrides: dict = field(default_factory=dict)  # attacker index -> epsilon

    def validate(self) -> None:
        if not 0 < self.v_d < 1:
            raise ConfigurationError(f"V_d must lie in (0, 1), got {self.v_d}")
        if self.n_attackers < 1 or self.n_max < 1:
            raise ConfigurationError("n_attackers and n_max must be >= 1")
        if self.n_attackers > self.n_max:
            raise ConfigurationError(f"N={self.n_attackers} exceeds N_max={self.n_max}")
        if not 0 <= self.runtime_rate <= 1:
            raise ConfigurationError("runtime_rate must lie in [0, 1]")
        if self.label_overlap is not None and not 0 <= self.label_overlap <= 1:
            raise ConfigurationError("label_overlap must lie in [0, 1]")
        for table in (self.p_overrides, self.epsilon_overrides):
            for k, v in table.items():
                if not 0 <= float(v) <= 1:
                    raise ConfigurationError(f"override for attacker {k} must lie in [0, 1], got {v}")

    def attacker_p(self, i: int) -> float:
        return float(self.p_overrides.get(i, self.p_overrides.get(str(i), self.strategy.p)))

    def attacker_epsilon(self, i: int) -> float:
        return float(self.epsilon_overrides.get(i, self.epsilon_overrides.get(str(i), self.strategy.epsilon)))


def apply_overrides(obj, overrides: dict):
    """Copy of a (nested) dataclass with dotted-path fields replaced, e.g.
    ``{"strategy.epsilon": 0.95, "defense.kind": "cutmix"}``."""
    nested: dict = {}
    direct: dict = {}
    for key, value in overrides.items():
        head, _, rest = key.partition(".")
        if not any(f.name == head for f in dataclasses.fields(obj)):
            raise ConfigurationError(f"unknown field {key!r} for {type(obj).__name__}")
        if rest:
            nested.setdefault(head, {})[rest] = value
        else:
            direct[head] = value
    for head, sub in nested.items():
        direct[head] = apply_overrides(direct.get(head, getattr(obj, head)), sub)
    return dataclasses.replace(obj, **direct)


# ---------------------------------------------------------------- payoffs


@dataclass
class MetricsTriple:
    """Run-time accuracies for one attacker: poison labels on triggered
    inputs, clean labels on triggered inputs, clean labels on clean inputs.
    ``None`` where the attacker has no such inputs."""

    acc_poison_triggered: Optional[float]
    acc_clean_triggered: Optional[float]
    acc_clean_untriggered: Optional[float]


@dataclass
class PayoffCell:
    asr: list
    attacker_mean: float
    attacker_std: float
    defender: float
    replications: int = 1

    def to_dict(self) -> dict:
        return {"asr": [float(a) for a in self.asr], "attacker_mean": self.attacker_mean,
                "attacker_std": self.attacker_std, "defender": self.defender, "replications": self.replications}


def attacker_payoff(model: nn.ModelParams, runtime: LabeledDataset) -> float:
    """Attack success rate: accuracy against poison labels on the triggered
    rows of an attacker's run-time set."""
    rows = np.flatnonzero(runtime.is_triggered)
    if len(rows) == 0:
        raise InputError("run-time set has no triggered rows")
    return nn.accuracy(model, runtime.subset(rows), "poison")


def defender_payoff(asr: Sequence[float]) -> float:
    if len(asr) == 0:
        raise InputError("defender payoff needs at least one attacker payoff")
    return 1.0 - float(np.mean(asr))


def collective_payoff(asr: Sequence[float]) -> tuple[float, float]:
    """Mean and population standard deviation of the attackers' payoffs."""
    if len(asr) == 0:
        raise InputError("collective payoff needs at least one attacker payoff")
    a = np.asarray(asr, dtype=np.float64)
    return float(a.mean()), float(a.std())


def payoff_cell(asr: Sequence[float], replications: int = 1) -> PayoffCell:
    if len(asr) == 0:
        return PayoffCell([], float("nan"), float("nan"), float("nan"), replications)
    mean, std = collective_payoff(asr)
    return PayoffCell(list(map(float, asr)), mean, std, 1.0 - mean, replications)


# ---------------------------------------------------------------- game play


@dataclass
class AttackerRecord:
    attacker_id: int
    epsilon: float
    p: float
    rho: float
    budget: int
    target_label: int
    metrics: MetricsTriple
    trigger: Optional[TriggerPattern] = None


@dataclass
class GameResult:
    params: nn.ModelParams
    attackers: list
    cell: PayoffCell
    report: Optional[InspectionReport]
    history: list
    allocation: Optional[GameAllocation] = None
    pool: Optional[LabeledDataset] = None
    runtimes: Optional[list] = None

    @property
    def metrics(self) -> list:
        return [a.metrics for a in self.attackers]


def target_labels_for(config: GameConfig, seed: int) -> np.ndarray:
    k = config.dataset.num_classes
    n = config.n_attackers
    if config.label_overlap is not None:
        return assign_target_labels(n, k, config.label_overlap, config.shared_label, seed, config.label_mode,
                                    config.label_classes)
    policy = config.strategy.target_policy
    if policy == "random":
        return np.random.default_rng(seed).integers(0, k, size=n)
    if policy == "fixed":
        if config.strategy.target_label is None:
            raise ConfigurationError("fixed target policy needs strategy.target_label")
        return np.full(n, config.strategy.target_label, dtype=np.int64)
    raise ConfigurationError(f"unknown target policy {policy!r}")


def make_trigger(config: GameConfig, i: int, dims: tuple) -> TriggerPattern:
    algo = config.strategy.algorithm
    eps = config.attacker_epsilon(i)
    if algo == "badnet-square":
        return badnet_square_trigger(dims, config.square_size)
    if algo == "orthogonal":
        return orthogonal_trigger(gen_random_trigger(eps, dims, config.base_trigger_seed), seed=i)
    return gen_random_trigger(eps, dims, seed=i)


def _metrics(model: nn.ModelParams, runtime: LabeledDataset) -> MetricsTriple:
    trig = np.flatnonzero(runtime.is_triggered)
    clean = np.flatnonzero(~runtime.is_triggered)
    pred = nn.predict(model, runtime.images)
    m1 = m2 = m3 = None
    if len(trig):
        m1 = float(np.mean(pred[trig] == runtime.poison_labels[trig]))
        m2 = float(np.mean(pred[trig] == runtime.clean_labels[trig]))
    if len(clean):
        m3 = float(np.mean(pred[clean] == runtime.clean_labels[clean]))
    return MetricsTriple(m1, m2, m3)


def _stage(name: str):
    def wrap(exc: Exception) -> MultiBackdoorError:
        if isinstance(exc, MultiBackdoorError) and exc.stage is None:
            exc.stage = name
            return exc
        err = MultiBackdoorError(str(exc), stage=name)
        err.__cause__ = exc
        return err
    return wrap


def play_game(config: GameConfig, seed: int = 3407, keep_allocation: bool = False) -> GameResult:
    """allocate -> stylize/poison per attacker -> pool -> defend/train ->
    evaluate every attacker's run-time set."""
    config.validate()
    dims = tuple(config.dataset.dims)
    k = config.dataset.num_classes
    strat = config.strategy
    try:
        data = config.dataset.build(seed)
        alloc = allocate_game(data, config.v_d, config.n_attackers, seed, n_max=config.n_max)
        targets = target_labels_for(config, seed)
        spec = config.model.build(dims, k)
    except Exception as exc:
        raise _stage("allocate")(exc)

    train_parts = [alloc.defender_train]
    runtimes, records = [], []
    try:
        for i in range(config.n_attackers):
            p_i, eps_i = config.attacker_p(i), config.attacker_epsilon(i)
            rho = real_poison_rate(config.v_d, config.n_max, p_i)
            budget = poison_budget(alloc, i, rho)
            share, runtime_share = alloc.attacker_train[i], alloc.attacker_runtime[i]
            if strat.style_alpha:
                style = sample_style(seed=i)
                share = stylize_dataset(share, style, strat.style_alpha)
                runtime_share = stylize_dataset(runtime_share, style, strat.style_alpha)
            trigger = make_trigger(config, i, dims)
            active = trigger.z.any() and (strat.algorithm != "random" or eps_i > 0)
            target = int(targets[i])
            if strat.algorithm == "clean-label":
                surrogate = train_surrogate(share, config.schedule, spec, attacker_id=i, seed=i)
                poisoned = clean_label_poison(share, surrogate, trigger, config.eps_pgd, config.pgd_steps, budget,
                                              seed=seed + i, target=target)
            else:
                poisoned = poison_private_set(share, trigger, target, budget if active else 0, seed=seed + i)
            runtime = trigger_runtime_set(runtime_share, trigger, target, config.runtime_rate if active else 0.0,
                                          seed=seed + i)
            if strat.eps_adv:
                surrogate = train_surrogate(poisoned, config.schedule, spec, attacker_id=i, seed=i)
                labels = np.where(runtime.is_triggered, runtime.poison_labels, runtime.clean_labels)
                runtime.images = fgsm_perturb(surrogate, runtime.images, labels, strat.eps_adv)
            train_parts.append(poisoned)
            runtimes.append(runtime)
            records.append(AttackerRecord(i, eps_i, p_i, rho, int(poisoned.is_poisoned.sum()), target, None, trigger))
    except Exception as exc:
        raise _stage("poison")(exc)

    pool = LabeledDataset.concat(train_parts)
    try:
        params, report, history = run_defense(config.defense, pool, alloc.defender_val, config.schedule, spec,
                                              seed=seed, n_attackers=config.n_attackers)
    except Exception as exc:
        raise _stage("defend/train")(exc)

    try:
        for rec, runtime in zip(records, runtimes):
            rec.metrics = _metrics(params, runtime)
    except Exception as exc:
        raise _stage("evaluate")(exc)
    asr = [r.metrics.acc_poison_triggered for r in records if r.metrics.acc_poison_triggered is not None]
    if keep_allocation:
        return GameResult(params, records, payoff_cell(asr), report, history, alloc, pool, runtimes)
    return GameResult(params, records, payoff_cell(asr), report, history)


# ---------------------------------------------------------------- payoff matrices


@dataclass
class PayoffMatrix:
    attacker_axis: list  # override dicts (or labels) per attacker strategy q
    defender_axis: list  # override dicts per defender strategy u
    cells: list  # [q][u] -> PayoffCell
    games_played: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.attacker_axis), len(self.defender_axis)

    def attacker_means(self) -> np.ndarray:
        return np.array([[c.attacker_mean for c in row] for row in self.cells], dtype=np.float64)

    def defender_values(self) -> np.ndarray:
        return np.array([[c.defender for c in row] for row in self.cells], dtype=np.float64)

    @classmethod
    def from_attacker_means(cls, grid) -> "PayoffMatrix":
        grid = np.asarray(grid, dtype=np.float64)
        cells = [[payoff_cell([v]) for v in row] for row in grid]
        return cls([f"q{i}" for i in range(grid.shape[0])], [f"u{j}" for j in range(grid.shape[1])], cells)

    def to_dict(self) -> dict:
        return {"attacker_axis": self.attacker_axis, "defender_axis": self.defender_axis,
                "cells": [[c.to_dict() for c in row] for row in self.cells], "games_played": self.games_played}


def average_replications(results: Sequence[GameResult]) -> PayoffCell:
    """Per-attacker ASR averaged over replications, then summarised."""
    per_rep = [[a.metrics.acc_poison_triggered for a in r.attackers] for r in results]
    n = len(per_rep[0])
    asr = []
    for i in range(n):
        vals = [rep[i] for rep in per_rep if rep[i] is not None]
        if vals:
            asr.append(float(np.mean(vals)))
    cell = payoff_cell(asr, replications=len(results))
    return cell


def build_payoff_matrix(attacker_axis: Sequence[dict], defender_axis: Sequence[dict], base: GameConfig,
                        replications: int = 3, seed: int = 3407, threads: int = 1,
                        return_games: bool = False):
    """Play every (q, u) cell ``replications`` times (replication r uses seed
    ``seed + r`` in every cell) and average."""
    if not attacker_axis or not defender_axis:
        raise ConfigurationError("both strategy axes need at least one entry")
    jobs = [(qi, ui, r) for qi in range(len(attacker_axis)) for ui in range(len(defender_axis))
            for r in range(replications)]

    def run(job):
        qi, ui, r = job
        cfg = apply_overrides(base, {**attacker_axis[qi], **defender_axis[ui]})
        try:
            return job, play_game(cfg, seed + r)
        except Exception as exc:
            raise MultiBackdoorError(f"cell (q={qi}, u={ui}, replication={r}) failed: {exc}", stage="matrix") from exc

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            done = dict(pool.map(run, jobs))
    else:
        done = dict(map(run, jobs))
    cells = [[average_replications([done[(qi, ui, r)] for r in range(replications)])
              for ui in range(len(defender_axis))] for qi in range(len(attacker_axis))]
    matrix = PayoffMatrix(list(attacker_axis), list(defender_axis), cells, games_played=len(jobs))
    return (matrix, done) if return_games else matrix


def _attacker_grid(matrix) -> np.ndarray:
    if isinstance(matrix, PayoffMatrix):
        grid = matrix.attacker_means()
    else:
        grid = np.asarray(matrix, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0 or np.isnan(grid).any():
        raise InputError("payoff matrix must be fully populated")
    return grid


def find_pure_nash(matrix) -> list[tuple[int, int]]:
    """Cells where the attacker strategy is a best response to the defender's
    (max attacker payoff down the column) and the defender strategy is a
    best response to the attacker's (min attacker payoff along the row,
    i.e. max defender payoff in a zero-sum game). Ties are all kept."""
    a = _attacker_grid(matrix)
    col_best = a.max(axis=0, keepdims=True)
    row_best = a.min(axis=1, keepdims=True)
    hits = (a == col_best) & (a == row_best)
    return [(int(q), int(u)) for q, u in zip(*np.nonzero(hits))]


def min_regret_cell(matrix) -> tuple[tuple[int, int], float]:
    """Approximate equilibrium: the cell with the smallest summed
    best-response regret of the two players (first in row-major order)."""
    a = _attacker_grid(matrix)
    regret = (a.max(axis=0, keepdims=True) - a) + (a - a.min(axis=1, keepdims=True))
    q, u = np.unravel_index(int(np.argmin(regret)), a.shape)
    return (int(q), int(u)), float(regret[q, u])


def expected_strategy_values(matrix) -> dict:
    """Mean ``(attacker, defender)`` payoff of each strategy against all of
    the opponent's strategies."""
    a = _attacker_grid(matrix)
    d = 1.0 - a
    return {
        "attacker": [(float(a[q].mean()), float(d[q].mean())) for q in range(a.shape[0])],
        "defender": [(float(a[:, u].mean()), float(d[:, u].mean())) for u in range(a.shape[1])],
    }


def format_pair(pair: tuple[float, float]) -> str:
    """``(pi_a, pi_d)`` as percentages with one decimal."""
    return f"({100 * pair[0]:.1f},{100 * pair[1]:.1f})"
