"""Experiment orchestration: config ingestion, runs, metric emission, tables.

A config file is a single JSON document with sections ``model``, ``data``,
``algorithm``, ``metrics``, ``output`` plus a top-level ``seeds`` list. Every
key is validated against the schema below before any computation starts and
unknown keys are rejected by name. The fully resolved config (all defaults
applied) is echoed to the output directory as ``effective-config.json``.

For each seed and each configured algorithm the harness builds the dataset
and partition, runs training, evaluates metrics on a fixed cadence, and
appends one JSON line per evaluation to ``metrics.jsonl``. A final
``summary.csv`` aggregates across seeds per algorithm. Nothing that affects
results is read from the clock or the network, so identical configs produce
byte-identical outputs.
"""

from __future__ import annotations

import io
import json
import os
import sys
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .data import Dataset, Partition, dirichlet_partition, generate_synthetic, holdout_split, pathological_partition
from .diagnostics import flatness_incompatibility, tracking_error
from .errors import ConfigError
from .federated import ALGORITHMS, AlgoConfig, ServerState, run_training
from .models import ModelSpec, forward_loss, init_params, predict_labels
from .rng import stream

__all__ = [
    "ExperimentConfig",
    "MetricRecord",
    "RunSummary",
    "load_config",
    "parse_config",
    "run_experiment",
    "rounds_to_target",
    "compare_table",
    "REFERENCE_CONFIG",
]

# Desk-scale reference task, frozen for the acceptance experiments: strongly
# heterogeneous Dirichlet split with 20% participation.
REFERENCE_CONFIG: Dict = {
    "model": {"kind": "logistic-regression", "input_dim": 20, "num_classes": 10},
    "data": {
        "samples_per_class": 100,
        "cluster_spread": 0.3,
        "holdout_fraction": 0.2,
        "partition": "dirichlet",
        "alpha": 0.1,
    },
    "algorithm": {
        "name": ["fedavg", "fedsam", "fedvssam"],
        "rounds": 200,
        "local_steps": 10,
        "n_devices": 20,
        "devices_per_round": 4,
        "rho": 0.05,
        "local_lr": 0.05,
        "global_lr": 1.0,
        "gamma_l": 0.1,
        "gamma_g": 0.6,
        "batch_size": 32,
    },
    "metrics": {"cadence": 10, "target_accuracy": 0.90},
    "seeds": [0, 1, 2, 3, 4],
}

_SCHEMA = {
    "model": {
        "kind": (str, "logistic-regression"),
        "input_dim": (int, 20),
        "num_classes": (int, 10),
        "hidden_dim": (int, 16),
        "l2_coeff": (float, 0.0),
        "quadratic_center": (list, None),
    },
    "data": {
        "samples_per_class": (int, 100),
        "cluster_spread": (float, 0.3),
        "holdout_fraction": (float, 0.2),
        "partition": (str, "dirichlet"),
        "alpha": (float, 0.1),
        "classes_per_device": (int, 2),
    },
    "algorithm": {
        "name": ((str, list), "fedvssam"),
        "rounds": (int, 100),
        "local_steps": (int, 10),
        "n_devices": (int, 20),
        "devices_per_round": (int, 4),
        "rho": (float, 0.05),
        "local_lr": (float, 0.05),
        "global_lr": (float, 1.0),
        "gamma_l": (float, 0.4),
        "gamma_g": (float, 0.6),
        "batch_size": (int, 32),
        "local_steps_as_epochs": (bool, False),
        "sampling_with_replacement": (bool, False),
    },
    "metrics": {
        "cadence": (int, 10),
        "flatness_rule": (str, "auto"),
        "flatness_batch_size": (int, None),
        "target_accuracy": (float, None),
        "track_h_error": (bool, True),
    },
    "output": {
        "directory": (str, "out"),
        "formats": (list, ["jsonl", "csv"]),
    },
}


@dataclass
class ExperimentConfig:
    model: Dict
    data: Dict
    algorithm: Dict
    metrics: Dict
    output: Dict
    seeds: List[int]

    def algorithms(self) -> List[str]:
        name = self.algorithm["name"]
        return [name] if isinstance(name, str) else list(name)

    def model_spec(self) -> ModelSpec:
        m = self.model
        return ModelSpec(
            kind=m["kind"],
            input_dim=m["input_dim"],
            num_classes=m["num_classes"],
            hidden_dim=m["hidden_dim"],
            quadratic_center=None if m["quadratic_center"] is None else np.asarray(m["quadratic_center"]),
            l2_coeff=m["l2_coeff"],
        )

    def algo_config(self, algorithm: str, seed: int) -> AlgoConfig:
        a = self.algorithm
        return AlgoConfig(
            algorithm=algorithm,
            rounds=a["rounds"],
            local_steps=a["local_steps"],
            n_devices=a["n_devices"],
            devices_per_round=a["devices_per_round"],
            rho=a["rho"],
            local_lr=a["local_lr"],
            global_lr=a["global_lr"],
            gamma_l=a["gamma_l"],
            gamma_g=a["gamma_g"],
            batch_size=a["batch_size"],
            master_seed=seed,
            local_steps_as_epochs=a["local_steps_as_epochs"],
            sampling_with_replacement=a["sampling_with_replacement"],
        ).validate()

    def as_dict(self) -> Dict:
        return {
            "model": dict(self.model),
            "data": dict(self.data),
            "algorithm": dict(self.algorithm),
            "metrics": dict(self.metrics),
            "output": dict(self.output),
            "seeds": list(self.seeds),
        }


def _coerce(section: str, key: str, value, expected):
    types = expected if isinstance(expected, tuple) else (expected,)
    if value is None:
        return None
    if float in types and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if not isinstance(value, tuple(t for t in types)) or (
        int in types and isinstance(value, bool)
    ):
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(f"key '{key}' in section '{section}' must be {names}, got {value!r}")
    return value


def parse_config(raw: Dict) -> ExperimentConfig:
    """Validate a raw config dict and apply defaults."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known_top = set(_SCHEMA) | {"seeds"}
    for key in raw:
        if key not in known_top:
            raise ConfigError(f"unknown key '{key}' at config top level")
    resolved = {}
    for section, keys in _SCHEMA.items():
        given = raw.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"section '{section}' must be an object")
        for key in given:
            if key not in keys:
                raise ConfigError(f"unknown key '{key}' in section '{section}'")
        resolved[section] = {
            key: _coerce(section, key, given.get(key, default), typ)
            for key, (typ, default) in keys.items()
        }
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(
        isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds
    ):
        raise ConfigError("'seeds' must be a nonempty list of nonnegative integers")
    cfg = ExperimentConfig(seeds=list(seeds), **resolved)
    _validate_semantics(cfg)
    return cfg


def _validate_semantics(cfg: ExperimentConfig) -> None:
    for name in cfg.algorithms():
        if name not in ALGORITHMS:
            raise ConfigError(f"key 'name' in section 'algorithm': unknown algorithm {name!r}")
    try:
        cfg.model_spec()  # raises on inconsistent model fields
        for seed in cfg.seeds:
            cfg.algo_config(cfg.algorithms()[0], seed)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    d = cfg.data
    if d["samples_per_class"] < 1:
        raise ConfigError("key 'samples_per_class' in section 'data' must be >= 1")
    if d["cluster_spread"] < 0:
        raise ConfigError("key 'cluster_spread' in section 'data' must be nonnegative")
    if not 0.0 < d["holdout_fraction"] < 1.0:
        raise ConfigError("key 'holdout_fraction' in section 'data' must be in (0, 1)")
    if d["partition"] not in ("dirichlet", "pathological"):
        raise ConfigError("key 'partition' in section 'data' must be dirichlet or pathological")
    if d["alpha"] <= 0:
        raise ConfigError("key 'alpha' in section 'data' must be positive")
    m = cfg.metrics
    if m["cadence"] < 1:
        raise ConfigError("key 'cadence' in section 'metrics' must be >= 1")
    if m["flatness_rule"] not in ("auto", "stochastic", "full-gradient", "mixed"):
        raise ConfigError("key 'flatness_rule' in section 'metrics' is not a known rule")
    if m["target_accuracy"] is not None and not 0.0 < m["target_accuracy"] <= 1.0:
        raise ConfigError("key 'target_accuracy' in section 'metrics' must be in (0, 1]")


def load_config(path) -> ExperimentConfig:
    """Parse and validate a JSON config file."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_config(raw)


@dataclass
class MetricRecord:
    """One evaluation point. wall_ms is an annotation and never serialized."""

    seed: int
    round: int
    algorithm: str
    train_loss: float
    holdout_accuracy: Optional[float]
    flatness_dispersion: Optional[float]
    tracking_error: Optional[float]
    wall_ms: float = 0.0

    def to_json(self) -> str:
        return json.dumps(
            {
                "seed": self.seed,
                "round": self.round,
                "algorithm": self.algorithm,
                "train_loss": self.train_loss,
                "holdout_accuracy": self.holdout_accuracy,
                "flatness_dispersion": self.flatness_dispersion,
                "tracking_error": self.tracking_error,
            }
        )


@dataclass
class RunSummary:
    algorithm: str
    seed: int
    final_accuracy: Optional[float]
    final_loss: float
    rounds_to_target: Optional[int]
    target_accuracy: Optional[float]
    error: Optional[str] = None


def rounds_to_target(records: List[MetricRecord], target_accuracy: float) -> Optional[int]:
    """Smallest evaluated round whose holdout accuracy reaches the target."""
    if not records:
        raise ValueError("no records")
    rounds = [r.round for r in records]
    if rounds != sorted(rounds):
        raise ValueError("records must be sorted by round")
    for rec in records:
        if rec.holdout_accuracy is not None and rec.holdout_accuracy >= target_accuracy:
            return rec.round
    return None


def _build_data(cfg: ExperimentConfig, seed: int) -> Tuple[Dataset, Dataset, Partition]:
    spec_m = cfg.model
    d = cfg.data
    dataset = generate_synthetic(
        num_classes=spec_m["num_classes"],
        input_dim=spec_m["input_dim"],
        samples_per_class=d["samples_per_class"],
        cluster_spread=d["cluster_spread"],
        seed=seed,
    )
    train, holdout = holdout_split(dataset, d["holdout_fraction"], seed)
    if d["partition"] == "dirichlet":
        part = dirichlet_partition(train, d["alpha"], cfg.algorithm["n_devices"], seed)
    else:
        part = pathological_partition(
            train, d["classes_per_device"], cfg.algorithm["n_devices"], seed
        )
    return train, holdout, part


def _resolve_rule(cfg: ExperimentConfig, algorithm: str) -> str:
    rule = cfg.metrics["flatness_rule"]
    if rule == "auto":
        return "mixed" if algorithm == "fedvssam" else "stochastic"
    return rule


class _Evaluator:
    def __init__(self, cfg: ExperimentConfig, spec, train, holdout, part, algo_cfg, seed):
        self.cfg = cfg
        self.spec = spec
        self.train = train
        self.holdout = holdout
        self.part = part
        self.algo_cfg = algo_cfg
        self.seed = seed
        self.rule = _resolve_rule(cfg, algo_cfg.algorithm)
        self.device_batches = [train.batch(idx) for idx in part.assignments]
        self.started = time.perf_counter()

    def record(self, state: ServerState) -> MetricRecord:
        losses = [forward_loss(self.spec, state.theta, b) for b in self.device_batches]
        train_loss = float(np.mean(losses))
        if self.spec.kind == "quadratic":
            accuracy = None
        else:
            pred = predict_labels(self.spec, state.theta, self.holdout.features)
            accuracy = float(np.mean(pred == self.holdout.labels))
        dispersion = flatness_incompatibility(
            self.spec,
            self.train,
            self.part,
            state.theta,
            self.algo_cfg.rho,
            rule=self.rule,
            gamma_l=self.algo_cfg.gamma_l,
            h=state.h,
            master_seed=self.seed,
            round_=state.round,
            batch_size=self.cfg.metrics["flatness_batch_size"] or self.algo_cfg.batch_size,
        ).dispersion
        track = None
        if self.cfg.metrics["track_h_error"] and self.algo_cfg.algorithm == "fedvssam":
            track = tracking_error(state.h, self.spec, self.train, self.part, state.theta)
        return MetricRecord(
            seed=self.seed,
            round=state.round,
            algorithm=self.algo_cfg.algorithm,
            train_loss=train_loss,
            holdout_accuracy=accuracy,
            flatness_dispersion=dispersion,
            tracking_error=track,
            wall_ms=(time.perf_counter() - self.started) * 1e3,
        )


def run_single(
    cfg: ExperimentConfig, algorithm: str, seed: int, threads: int = 1
) -> Tuple[List[MetricRecord], RunSummary]:
    """One (algorithm, seed) training run with cadence evaluations."""
    spec = cfg.model_spec()
    train, holdout, part = _build_data(cfg, seed)
    algo_cfg = cfg.algo_config(algorithm, seed)
    evaluator = _Evaluator(cfg, spec, train, holdout, part, algo_cfg, seed)
    cadence = cfg.metrics["cadence"]
    records: List[MetricRecord] = []

    def hook(state: ServerState, _transcript) -> None:
        if state.round % cadence == 0 or state.round == algo_cfg.rounds:
            records.append(evaluator.record(state))

    # Round 0 is evaluated on the initial model; the "init" stream guarantees
    # this is the exact state run_training starts from.
    theta0 = init_params(spec, stream(seed, "init"))
    records.append(evaluator.record(ServerState(theta=theta0, h=np.zeros_like(theta0), round=0)))
    run_training(spec, train, part, algo_cfg, max_workers=threads, round_hook=hook)

    target = cfg.metrics["target_accuracy"]
    final = records[-1] if records else None
    summary = RunSummary(
        algorithm=algorithm,
        seed=seed,
        final_accuracy=final.holdout_accuracy if final else None,
        final_loss=final.train_loss if final else float("nan"),
        rounds_to_target=(
            rounds_to_target(records, target) if target is not None and records else None
        ),
        target_accuracy=target,
    )
    return records, summary


def _median_rounds(values: List[Optional[int]]) -> Optional[float]:
    # A run that never reaches the target counts as infinity; the median is
    # reported as a dash when it lands on such a run.
    filled = [float("inf") if v is None else float(v) for v in values]
    med = float(np.median(filled))
    return None if np.isinf(med) else med


def compare_table(summaries: List[RunSummary]) -> Tuple[str, str]:
    """Aggregate run summaries into (csv_text, aligned_text)."""
    if not summaries:
        raise ValueError("no summaries to compare")
    by_algo: Dict[str, List[RunSummary]] = {}
    for s in summaries:
        by_algo.setdefault(s.algorithm, []).append(s)
    rows = []
    for algo in sorted(by_algo):
        group = by_algo[algo]
        accs = [s.final_accuracy for s in group if s.final_accuracy is not None]
        mean = float(np.mean(accs)) if accs else float("nan")
        sd = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
        med = _median_rounds([s.rounds_to_target for s in group])
        rows.append((algo, mean, sd, "-" if med is None else f"{med:g}"))
    csv_lines = ["algorithm,final_accuracy_mean,final_accuracy_sd,rounds_to_target_median"]
    for algo, mean, sd, med in rows:
        csv_lines.append(f"{algo},{mean:.6f},{sd:.6f},{med}")
    widths = (max(len(r[0]) for r in rows + [("algorithm",)]), 10, 10, 8)
    out = io.StringIO()
    out.write(
        f"{'algorithm':<{widths[0]}}  {'acc_mean':>10}  {'acc_sd':>10}  {'rounds':>8}\n"
    )
    for algo, mean, sd, med in rows:
        out.write(f"{algo:<{widths[0]}}  {mean:>10.4f}  {sd:>10.4f}  {med:>8}\n")
    return "\n".join(csv_lines) + "\n", out.getvalue()


def run_experiment(
    cfg: ExperimentConfig,
    out_dir: Optional[str] = None,
    threads: int = 1,
    seed_override: Optional[List[int]] = None,
    cadence_override: Optional[int] = None,
    log=None,
) -> Tuple[List[MetricRecord], List[RunSummary]]:
    """Run every (algorithm, seed) pair and write the output directory.

    Failures in one run are recorded and remaining runs continue. Appends to
    metrics.jsonl happen record-group by record-group in a fixed run order, so
    outputs are byte-identical across repeats and thread counts.
    """
    if seed_override:
        cfg = parse_config({**cfg.as_dict(), "seeds": list(seed_override)})
    if cadence_override:
        merged = cfg.as_dict()
        merged["metrics"]["cadence"] = cadence_override
        cfg = parse_config(merged)
    directory = out_dir or cfg.output["directory"]
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "effective-config.json"), "w") as fh:
        json.dump(cfg.as_dict(), fh, indent=2)
        fh.write("\n")

    formats = cfg.output["formats"]
    all_records: List[MetricRecord] = []
    summaries: List[RunSummary] = []
    metrics_fh = (
        open(os.path.join(directory, "metrics.jsonl"), "w") if "jsonl" in formats else None
    )
    try:
        for algorithm in cfg.algorithms():
            for seed in cfg.seeds:
                try:
                    records, summary = run_single(cfg, algorithm, seed, threads=threads)
                except Exception as exc:  # noqa: BLE001 - keep remaining seeds running
                    summaries.append(
                        RunSummary(algorithm, seed, None, float("nan"), None, None, error=str(exc))
                    )
                    print(f"run failed ({algorithm}, seed {seed}): {exc}", file=log or sys.stderr)
                    continue
                if metrics_fh is not None:
                    for rec in records:
                        metrics_fh.write(rec.to_json() + "\n")
                        metrics_fh.flush()  # keep the file valid at record boundaries
                all_records.extend(records)
                summaries.append(summary)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    ok = [s for s in summaries if s.error is None]
    if ok and "csv" in formats:
        csv_text, aligned = compare_table(ok)
        with open(os.path.join(directory, "summary.csv"), "w") as fh:
            fh.write(csv_text)
        with open(os.path.join(directory, "summary.txt"), "w") as fh:
            fh.write(aligned)
    return all_records, summaries
