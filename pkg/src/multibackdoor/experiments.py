"""Config-driven experiment sweeps and result files.

A config is a JSON object. Every key is optional; unknown keys are
rejected. See ``configs/`` in the repository for the desk-scale presets and
``README.md`` for the schema.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import difflib
import itertools
import json
import logging
import os
import platform
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional

import numpy as np

from . import __version__, nn
from .data import real_poison_rate
from .defenses import DefenseKind
from .errors import ConfigurationError, MultiBackdoorError
from .game import (DatasetSpec, GameConfig, ModelConfig, apply_overrides, build_payoff_matrix,
                   expected_strategy_values, find_pure_nash, format_pair, min_regret_cell, play_game)
from .triggers import AttackerStrategy

log = logging.getLogger(__name__)

DEFAULTS: dict = {
    "experiment": "custom",
    "seed": 3407,
    "replications": 3,
    "output_format": "csv",
    "V_d": 0.1,
    "N_max": 50,
    "N_list": [1],
    "runtime_rate": 1.0,
    "dataset": {"source": "synthetic", "num_classes": 10, "dims": [16, 16, 3], "n": 6000,
                "separation": 60.0, "noise": 20.0, "paths": [], "downsample": 2},
    "strategy": {"epsilon": 0.55, "p": 0.55, "target_policy": "random", "target_label": None,
                 "algorithm": "random", "eps_adv": None, "style_alpha": None},
    "labels": {"overlap": None, "shared_label": 0, "mode": "random", "classes": None},
    "attack": {"square_size": 3, "eps_pgd": 16 / 255, "pgd_steps": 10, "base_trigger_seed": 0},
    "defense": {"kind": "none", "k_removals": None, "trigger_count": 20, "p": 0.4, "epsilon": 0.4,
                "reduce_dim": 10, "full_retrain": False, "threshold": 1.0},
    "model": {"arch": "small_cnn", "channels": [16, 32, 32], "head": "gap", "hidden": [64]},
    "schedule": {"lr": 0.003, "momentum": 0.9, "batch_size": 128, "max_epochs": 18, "patience": 5,
                 "min_epochs": 1},
    "sweep": {"epsilon": None, "p": None, "label_overlap": None, "algorithm": None, "eps_adv": None,
              "style_alpha": None, "defense": None, "escalation": None},
    "matrix": {"attacker_axis": None, "defender_axis": None},
    "probe": {"target": 0.05, "rounds": 5, "modes": ["full", "mask", "ticket"]},
}

# Desk-scale replicas. Every preset states N_max explicitly.
PRESETS: dict = {
    "e1": {"experiment": "e1", "N_list": [1, 5, 15, 50], "N_max": 50, "V_d": 0.1},
    "e2": {"experiment": "e2", "N_list": [1, 5, 25], "N_max": 50, "V_d": 0.2, "sweep": {"p": [0.1, 0.55, 1.0]}},
    "e3": {"experiment": "e3", "N_list": [1, 5], "N_max": 50, "replications": 1,
           "sweep": {"eps_adv": [0.0, 0.5, 1.0], "style_alpha": [0.0, 0.5]}},
    "e4": {"experiment": "e4", "N_list": [5], "N_max": 50, "labels": {"mode": "structured", "classes": [0, 2, 4, 6, 8]},
           "sweep": {"label_overlap": [0.0, 1.0]}},
    "e5": {"experiment": "e5", "N_list": [1, 5], "N_max": 50, "replications": 1, "strategy": {"p": 1.0},
           "sweep": {"defense": ["none", "cutmix", "backdoor-adv-train", "spectral-signatures",
                                 "activation-clustering"], "algorithm": ["badnet-square", "clean-label"]},
           "matrix": {"attacker_axis": [{"strategy.algorithm": "badnet-square"}, {"strategy.algorithm": "random"}],
                      "defender_axis": [{"defense.kind": "none"}, {"defense.kind": "cutmix"},
                                        {"defense.kind": "spectral-signatures"}]}},
    "e6": {"experiment": "e6", "N_list": [1, 5, 25], "N_max": 50, "replications": 1,
           "probe": {"target": 0.05, "rounds": 5}},
}

# sweep key -> GameConfig override path
SWEEP_PATHS = {
    "epsilon": "strategy.epsilon",
    "p": "strategy.p",
    "label_overlap": "label_overlap",
    "algorithm": "strategy.algorithm",
    "eps_adv": "strategy.eps_adv",
    "style_alpha": "strategy.style_alpha",
    "defense": "defense.kind",
    "escalation": "p_overrides",
}

FRACTION_KEYS = {"V_d", "runtime_rate", "strategy.epsilon", "strategy.p", "strategy.eps_adv",
                 "strategy.style_alpha", "labels.overlap", "defense.p", "defense.epsilon", "probe.target"}

RESULT_FIELDS = ("experiment", "replication", "N", "attacker_id", "epsilon", "p", "rho", "target_label", "defense",
                 "overlap", "eps_adv", "alpha", "acc_poison", "acc_clean_triggered", "acc_clean_untriggered", "seed")


def _all_keys(tree: dict, prefix: str = "") -> list[str]:
    out = []
    for k, v in tree.items():
        out.append(k)
        if isinstance(v, dict) and v:
            out += _all_keys(v, f"{prefix}{k}.")
    return out


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    known = _all_keys(DEFAULTS)
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        full = f"{path}{key}"
        if key not in defaults:
            near = difflib.get_close_matches(key, known, n=3, cutoff=0.6)
            hint = f"; did you mean {', '.join(repr(n) for n in near)}?" if near else ""
            raise ConfigurationError(f"unknown config key {full!r}{hint}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigurationError(f"config key {full!r} must be an object")
            out[key] = _merge(defaults[key], value, f"{full}.")
        else:
            out[key] = value
    return out


def _check_fraction(cfg: dict, dotted: str) -> None:
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    if node is not None and not (isinstance(node, (int, float)) and 0 <= node <= 1):
        raise ConfigurationError(f"config key {dotted!r} must lie in [0, 1], got {node!r}")


@dataclass
class ExperimentConfig:
    raw: dict  # fully resolved config (defaults filled in)

    @property
    def experiment(self) -> str:
        return self.raw["experiment"]

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def replications(self) -> int:
        return int(self.raw["replications"])

    def game_config(self) -> GameConfig:
        r = self.raw
        ds = r["dataset"]
        st = r["strategy"]
        lb = r["labels"]
        at = r["attack"]
        sc = r["schedule"]
        return GameConfig(
            dataset=DatasetSpec(ds["source"], ds["num_classes"], tuple(ds["dims"]), ds["n"], ds["separation"],
                                ds["noise"], tuple(ds["paths"]), ds["downsample"]),
            v_d=r["V_d"], n_attackers=int(r["N_list"][0]), n_max=r["N_max"],
            strategy=AttackerStrategy(st["epsilon"], st["p"], st["target_policy"], st["algorithm"], st["eps_adv"],
                                      st["style_alpha"], st["target_label"]),
            label_overlap=lb["overlap"], shared_label=lb["shared_label"], label_mode=lb["mode"],
            label_classes=tuple(lb["classes"]) if lb["classes"] is not None else None,
            runtime_rate=r["runtime_rate"],
            defense=DefenseKind(**r["defense"]),
            model=ModelConfig(r["model"]["arch"], tuple(r["model"]["channels"]), r["model"]["head"],
                              tuple(r["model"]["hidden"])),
            schedule=nn.TrainSchedule(lr=sc["lr"], momentum=sc["momentum"], batch_size=sc["batch_size"],
                                      max_epochs=sc["max_epochs"], patience=sc["patience"], seed=self.seed,
                                      min_epochs=sc["min_epochs"]),
            square_size=at["square_size"], eps_pgd=at["eps_pgd"], pgd_steps=at["pgd_steps"],
            base_trigger_seed=at["base_trigger_seed"],
        )

    def sweep_axes(self) -> list[tuple[str, list]]:
        axes = [("n_attackers", [int(n) for n in self.raw["N_list"]])]
        for key, path in SWEEP_PATHS.items():
            values = self.raw["sweep"][key]
            if values is not None:
                if key == "escalation":
                    values = [{int(k): float(v) for k, v in step.items()} for step in values]
                axes.append((path, list(values)))
        return axes

    def cells(self) -> list[dict]:
        axes = self.sweep_axes()
        names = [a[0] for a in axes]
        return [dict(zip(names, combo)) for combo in itertools.product(*(a[1] for a in axes))]


def validate_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    for key in sorted(FRACTION_KEYS):
        _check_fraction(cfg, key)
    for key, values in cfg["sweep"].items():
        if values is not None and (not isinstance(values, list) or not values):
            raise ConfigurationError(f"sweep key 'sweep.{key}' must be a non-empty list")
        if key in ("epsilon", "p", "label_overlap", "eps_adv", "style_alpha") and values:
            for v in values:
                if v is not None and not 0 <= v <= 1:
                    raise ConfigurationError(f"sweep key 'sweep.{key}' value {v} must lie in [0, 1]")
    if not cfg["N_list"]:
        raise ConfigurationError("config key 'N_list' must be non-empty")
    if max(cfg["N_list"]) > cfg["N_max"]:
        raise ConfigurationError(f"config key 'N_list' exceeds N_max={cfg['N_max']}")
    if cfg["replications"] < 1:
        raise ConfigurationError("config key 'replications' must be >= 1")
    if cfg["output_format"] not in ("csv", "json"):
        raise ConfigurationError("config key 'output_format' must be 'csv' or 'json'")
    out = ExperimentConfig(cfg)
    try:
        out.game_config().validate()
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid config: {exc}") from exc
    return out


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Parse and validate a JSON experiment config, filling defaults."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
    return validate_config(raw)


# ---------------------------------------------------------------- results


def _fmt(x) -> Any:
    if x is None:
        return None
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(f"{float(x):.6g}")
    return x


def result_row(experiment: str, replication: int, n: int, rec, cfg: GameConfig, seed: int) -> dict:
    m = rec.metrics
    row = {
        "experiment": experiment, "replication": replication, "N": n, "attacker_id": rec.attacker_id,
        "epsilon": rec.epsilon, "p": rec.p, "rho": rec.rho, "target_label": rec.target_label,
        "defense": cfg.defense.kind, "overlap": cfg.label_overlap, "eps_adv": cfg.strategy.eps_adv,
        "alpha": cfg.strategy.style_alpha, "acc_poison": m.acc_poison_triggered,
        "acc_clean_triggered": m.acc_clean_triggered, "acc_clean_untriggered": m.acc_clean_untriggered,
        "seed": seed,
    }
    return {k: _fmt(row[k]) for k in RESULT_FIELDS}


def emit_results(rows: list[dict], fmt: str, path: str | os.PathLike) -> Path:
    """Write rows as CSV (fixed header order, empty field for absent values)
    or as a JSON array; floats carry 6 significant digits."""
    if not rows:
        raise ConfigurationError("no rows to write")
    path = Path(path)
    rows = [{k: _fmt(r.get(k)) for k in RESULT_FIELDS} for r in rows]
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(RESULT_FIELDS)
            for r in rows:
                writer.writerow(["" if r[k] is None else (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k])
                                 for k in RESULT_FIELDS])
    elif fmt == "json":
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=1)
            fh.write("\n")
    else:
        raise ConfigurationError(f"unknown result format {fmt!r}")
    return path


def read_results(path: str | os.PathLike) -> list[dict]:
    path = Path(path)
    if path.suffix == ".json":
        return json.loads(path.read_text())
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _manifest(cfg: ExperimentConfig, status: str, started: float, extra: Optional[dict] = None) -> dict:
    out = {
        "status": status,
        "config": cfg.raw,
        "versions": {"multibackdoor": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_time_s": round(time.time() - started, 3),
    }
    out.update(extra or {})
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def run_games(cfg: ExperimentConfig, threads: int = 1, partial: Optional[list] = None) -> list[dict]:
    """Play every (cell, replication) of the sweep and return result rows
    sorted by cell, replication and attacker. Rows of games finished before
    a failure are appended to ``partial`` (sequential runs only)."""
    base = cfg.game_config()
    cells = cfg.cells()
    jobs = [(ci, r) for ci in range(len(cells)) for r in range(cfg.replications)]

    def run(job):
        ci, r = job
        game = apply_overrides(base, cells[ci])
        seed = cfg.seed + r
        try:
            result = play_game(game, seed)
        except Exception as exc:
            stage = getattr(exc, "stage", None) or "game"
            msg = exc.args[0] if exc.args else repr(exc)
            raise MultiBackdoorError(f"cell {ci} {cells[ci]} replication {r} failed: {msg}", stage=stage) from exc
        return job, [result_row(cfg.experiment, r, game.n_attackers, rec, game, seed) for rec in result.attackers]

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            done = dict(pool.map(run, jobs))
    else:
        done = {}
        for job in jobs:
            key, rows = run(job)
            done[key] = rows
            if partial is not None:
                partial.extend(rows)
            log.info("cell %d replication %d done", *key)
    return [row for job in jobs for row in done[job]]


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike, threads: int = 1) -> dict:
    """Run the sweep and write ``results.<fmt>`` plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    fmt = cfg.raw["output_format"]
    result_path = out / f"results.{fmt}"
    rows: list[dict] = []
    try:
        rows = run_games(cfg, threads, partial=rows)
    except Exception as exc:
        if rows:
            emit_results(rows, fmt, result_path)
        _write_json(out / "manifest.json", _manifest(cfg, "FAILED", started, {"error": str(exc)}))
        raise
    emit_results(rows, fmt, result_path)
    _write_json(out / "manifest.json", _manifest(cfg, "OK", started, {"rows": len(rows), "results": result_path.name}))
    return {"rows": rows, "results": result_path, "manifest": out / "manifest.json"}


def summarize(rows: Iterable[dict], key: str = "N") -> dict:
    """Mean collective ASR and clean accuracy per value of ``key``:
    per-replication collective means, averaged over replications."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], {}).setdefault(r["replication"], []).append(r)
    out = {}
    for k, reps in groups.items():
        asr, clean = [], []
        for rep_rows in reps.values():
            a = [float(x["acc_poison"]) for x in rep_rows if x["acc_poison"] not in (None, "")]
            c = [float(x["acc_clean_untriggered"]) for x in rep_rows if x["acc_clean_untriggered"] not in (None, "")]
            if a:
                asr.append(np.mean(a))
            if c:
                clean.append(np.mean(c))
        out[k] = {"asr": float(np.mean(asr)) if asr else None, "clean": float(np.mean(clean)) if clean else None}
    return out


# ---------------------------------------------------------------- other verbs


def run_matrix(cfg: ExperimentConfig, out_dir: str | os.PathLike, threads: int = 1) -> dict:
    """Payoff matrix over the configured strategy axes plus an equilibrium
    report."""
    m = cfg.raw["matrix"]
    if not m["attacker_axis"] or not m["defender_axis"]:
        raise ConfigurationError("matrix verb needs 'matrix.attacker_axis' and 'matrix.defender_axis'")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    base = cfg.game_config()
    matrix = build_payoff_matrix(m["attacker_axis"], m["defender_axis"], base, cfg.replications, cfg.seed, threads)
    nash = find_pure_nash(matrix)
    approx, regret = min_regret_cell(matrix)
    values = expected_strategy_values(matrix)
    report = {
        "pure_nash": [list(c) for c in nash],
        "approximate_nash_min_regret": {"cell": list(approx), "regret": regret},
        "expected_values": {
            side: [format_pair(p) for p in pairs] for side, pairs in values.items()
        },
    }
    _write_json(out / "matrix.json", matrix.to_dict())
    _write_json(out / "nash.json", report)
    _write_json(out / "manifest.json", _manifest(cfg, "OK", started, {"games_played": matrix.games_played}))
    return {"matrix": matrix, "report": report}


def run_probe(cfg: ExperimentConfig, out_dir: str | os.PathLike, threads: int = 1) -> dict:
    """Lottery tickets from a shared initialization for every N in
    ``N_list`` and pairwise per-layer cosine distances."""
    from .subnet import imp_prune, layer_cosine_distance

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    base = cfg.game_config()
    pr = cfg.raw["probe"]
    spec = base.model.build(tuple(base.dataset.dims), base.dataset.num_classes)
    init = nn.build_model(spec, cfg.seed, np.float32)
    tickets = {}
    for n in cfg.raw["N_list"]:
        game = apply_overrides(base, {"n_attackers": int(n)})
        res = play_game(game, cfg.seed, keep_allocation=True)
        tickets[n] = imp_prune(spec, init, res.pool, res.allocation.defender_val, pr["target"], pr["rounds"],
                               base.schedule)
    rows = []
    for na, nb in itertools.combinations(cfg.raw["N_list"], 2):
        for mode in pr["modes"]:
            for layer, dist in layer_cosine_distance(tickets[na], tickets[nb], mode).items():
                rows.append({"layer": layer, "mode": mode, "N_a": na, "N_b": nb, "distance": _fmt(dist)})
    path = out / "distances.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["layer", "mode", "N_a", "N_b", "distance"], lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    _write_json(out / "manifest.json", _manifest(cfg, "OK", started, {
        "remaining_fraction": {str(n): t.remaining_fraction for n, t in tickets.items()}}))
    return {"rows": rows, "tickets": tickets}


def run_inspect(cfg: ExperimentConfig, out_dir: str | os.PathLike, threads: int = 1) -> dict:
    """Apply both removal defenses to the first configured game and report
    what they removed, scored against the poison provenance flags."""
    from .defenses import activation_cluster_filter, spectral_filter

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    base = apply_overrides(cfg.game_config(), {"defense.kind": "none"})
    res = play_game(base, cfg.seed, keep_allocation=True)
    pool = res.pool
    d = base.defense
    k_total = d.k_removals if d.k_removals is not None else 5 * base.n_attackers
    reports = {}
    for name, (_, report) in {
        "spectral-signatures": spectral_filter(pool, res.params, min(k_total, len(pool) - 1)),
        "activation-clustering": activation_cluster_filter(pool, res.params, d.reduce_dim, seed=cfg.seed),
    }.items():
        removed = np.asarray(report.removed, dtype=int)
        poisoned = np.flatnonzero(pool.is_poisoned)
        hits = np.intersect1d(removed, poisoned).size
        body = report.to_dict()
        body["recall"] = hits / len(poisoned) if len(poisoned) else None
        body["precision"] = hits / len(removed) if len(removed) else None
        reports[name] = body
        _write_json(out / f"inspect_{name}.json", body)
    _write_json(out / "manifest.json", _manifest(cfg, "OK", started))
    return reports
