"""Experiment orchestration: config, run loop, metrics, comparison.

A run is fully determined by its config and a seed. Randomness is split
into named streams — partition, init, shuffle, adversity — each keyed as
(run seed, stream tag), so no stream can consume another's draws and any
single stream can be reasoned about in isolation.

The proposed algorithm is SCAFFOLD plus one or more merge events: at the
configured round(s), after aggregation, the server correlates the local
models it holds, groups similar nodes, and replaces each group with an
intermediary node that owns the union of the members' data. A config
with ``merge: null`` is the plain SCAFFOLD baseline.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import mlp
from .conditions import AdversityConfig, Schedule, apply_poisoning, mark_affected
from .datasets import Dataset, generate_synthetic, load_idx, partition_noniid
from .engine import (
    MODES,
    ClientState,
    DatasetObjective,
    ServerState,
    run_round,
)
from .errors import ConfigInvalid, DataLoadFailure, IoFailure
from .merging import MergeConfig, apply_merge, correlation_matrix, group_similar

log = logging.getLogger("fedmerge")

SCHEMA_VERSION = 1

# named seed-stream tags
STREAM_PARTITION = 1
STREAM_INIT = 2
STREAM_SHUFFLE = 3
STREAM_ADVERSITY = 4

DATASETS = ("mnist", "synthetic")

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CSV_HEADER = (
    "run_id,algorithm,condition,mode,seed,round,n_active_nodes,"
    "n_groups_total,test_accuracy,test_loss,wall_ms"
)
_FIELDS = CSV_HEADER.split(",")
_INT_FIELDS = {"seed", "round", "n_active_nodes", "n_groups_total"}
_FLOAT_FIELDS = {"test_accuracy", "test_loss", "wall_ms"}


@dataclass(frozen=True)
class MetricsRow:
    """One evaluated communication round of one run."""

    run_id: str
    algorithm: str
    condition: str
    mode: str
    seed: int
    round: int
    n_active_nodes: int
    n_groups_total: int
    test_accuracy: float
    test_loss: float
    wall_ms: float

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in _FIELDS}


def _check_keys(d: dict, allowed: set[str], where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigInvalid(f"unknown key(s) in {where}: {sorted(unknown)}")


def _model_from_dict(d: dict) -> mlp.ModelSpec:
    _check_keys(d, {"input_dim", "hidden_dims", "num_classes", "activation"}, "model")
    return mlp.ModelSpec(
        input_dim=int(d.get("input_dim", 784)),
        hidden_dims=tuple(int(h) for h in d.get("hidden_dims", (128,))),
        num_classes=int(d.get("num_classes", 10)),
        activation=str(d.get("activation", "relu")),
    )


def _merge_from_dict(d: dict) -> MergeConfig:
    _check_keys(d, {"threshold", "max_group_size", "merge_rounds", "alpha_rule"}, "merge")
    kwargs = dict(d)
    if "merge_rounds" in kwargs:
        kwargs["merge_rounds"] = tuple(int(r) for r in kwargs["merge_rounds"])
    return MergeConfig(**kwargs)


def _adversity_from_dict(d: dict) -> AdversityConfig:
    _check_keys(
        d,
        {
            "condition",
            "affected_fraction",
            "loss_prob",
            "poison_fraction",
            "poison_mode",
            "delay_rounds",
            "drop_prob",
            "seed",
        },
        "adversity",
    )
    return AdversityConfig(**d)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; JSON-serializable both ways."""

    dataset: str = "synthetic"
    data_dir: str | None = None
    synthetic_samples: int = 4000
    synthetic_test_samples: int = 1000
    synthetic_noise: float = 0.07
    synthetic_seed: int = 777
    num_clients: int = 10
    rounds: int = 10
    local_epochs: int = 2
    batch_size: int = 32
    eta_g: float = 1.0
    eta_l: float = 0.05
    classes_per_client: int = 8
    mode: str = "standard"
    model: mlp.ModelSpec = field(
        default_factory=lambda: mlp.ModelSpec(784, (128,), 10, "relu")
    )
    merge: MergeConfig | None = field(default_factory=MergeConfig)
    adversity: AdversityConfig = field(default_factory=AdversityConfig)
    seeds: tuple[int, ...] = (1, 2, 3)
    output_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.dataset not in DATASETS:
            raise ConfigInvalid(f"dataset must be one of {DATASETS}")
        if self.dataset == "mnist" and not self.data_dir:
            raise ConfigInvalid("mnist dataset requires data_dir")
        if self.rounds < 1:
            raise ConfigInvalid("rounds must be >= 1")
        if self.num_clients < 1:
            raise ConfigInvalid("num_clients must be >= 1")
        if self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid("local_epochs and batch_size must be >= 1")
        if self.mode not in MODES:
            raise ConfigInvalid(f"mode must be one of {MODES}")
        if not 1 <= self.classes_per_client <= self.model.num_classes:
            raise ConfigInvalid("classes_per_client must be in [1, num_classes]")
        if not self.seeds:
            raise ConfigInvalid("seeds must be non-empty")
        if self.merge is not None and any(r >= self.rounds for r in self.merge.merge_rounds):
            raise ConfigInvalid("merge rounds must all be < rounds")

    @property
    def algorithm(self) -> str:
        return "scaffold" if self.merge is None else "scaffold_merge"

    def to_dict(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "data_dir": self.data_dir,
            "synthetic_samples": self.synthetic_samples,
            "synthetic_test_samples": self.synthetic_test_samples,
            "synthetic_noise": self.synthetic_noise,
            "synthetic_seed": self.synthetic_seed,
            "num_clients": self.num_clients,
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "eta_g": self.eta_g,
            "eta_l": self.eta_l,
            "classes_per_client": self.classes_per_client,
            "mode": self.mode,
            "model": {
                "input_dim": self.model.input_dim,
                "hidden_dims": list(self.model.hidden_dims),
                "num_classes": self.model.num_classes,
                "activation": self.model.activation,
            },
            "merge": None
            if self.merge is None
            else {
                "threshold": self.merge.threshold,
                "max_group_size": self.merge.max_group_size,
                "merge_rounds": list(self.merge.merge_rounds),
                "alpha_rule": self.merge.alpha_rule,
            },
            "adversity": {
                "condition": self.adversity.condition,
                "affected_fraction": self.adversity.affected_fraction,
                "loss_prob": self.adversity.loss_prob,
                "poison_fraction": self.adversity.poison_fraction,
                "poison_mode": self.adversity.poison_mode,
                "delay_rounds": self.adversity.delay_rounds,
                "drop_prob": self.adversity.drop_prob,
                "seed": self.adversity.seed,
            },
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigInvalid("config must be a JSON object")
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigInvalid(f"unsupported schema_version {version}")
        allowed = {
            "schema_version",
            "dataset",
            "data_dir",
            "synthetic_samples",
            "synthetic_test_samples",
            "synthetic_noise",
            "synthetic_seed",
            "num_clients",
            "rounds",
            "local_epochs",
            "batch_size",
            "eta_g",
            "eta_l",
            "classes_per_client",
            "mode",
            "model",
            "merge",
            "adversity",
            "seeds",
            "output_dir",
        }
        _check_keys(d, allowed, "config")
        kwargs = {k: v for k, v in d.items() if k != "schema_version"}
        try:
            if "model" in kwargs:
                kwargs["model"] = _model_from_dict(kwargs["model"])
            if kwargs.get("merge") is not None:
                kwargs["merge"] = _merge_from_dict(kwargs["merge"])
            if "adversity" in kwargs:
                kwargs["adversity"] = _adversity_from_dict(kwargs["adversity"])
            if "seeds" in kwargs:
                kwargs["seeds"] = tuple(int(s) for s in kwargs["seeds"])
            return cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"config {path} is not valid JSON: {exc}") from exc


def run_id_for(config: ExperimentConfig) -> str:
    """Deterministic run identifier: algorithm, condition, config digest.

    output_dir is excluded from the digest so the same experiment keeps
    its identity no matter where its rows are written.
    """
    payload = config.to_dict()
    payload.pop("output_dir")
    blob = json.dumps(payload, sort_keys=True).encode()
    digest = hashlib.sha256(blob).hexdigest()[:10]
    return f"{config.algorithm}-{config.adversity.condition}-{digest}"


def _load_data(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if config.dataset == "mnist":
        base = Path(config.data_dir)
        try:
            train = load_idx(base / MNIST_FILES["train"][0], base / MNIST_FILES["train"][1])
            test = load_idx(base / MNIST_FILES["test"][0], base / MNIST_FILES["test"][1])
        except OSError as exc:
            raise DataLoadFailure(f"cannot load mnist from {base}: {exc}") from exc
        return train, test
    # one pool, one seed: train and test must share the class geometry
    pool = generate_synthetic(
        config.synthetic_samples + config.synthetic_test_samples,
        config.model.input_dim,
        config.model.num_classes,
        seed=[config.synthetic_seed, 0],
        noise=config.synthetic_noise,
    )
    n_train = config.synthetic_samples
    train = Dataset(
        inputs=pool.inputs[:n_train],
        labels=pool.labels[:n_train],
        num_classes=pool.num_classes,
    )
    test = Dataset(
        inputs=pool.inputs[n_train:],
        labels=pool.labels[n_train:],
        num_classes=pool.num_classes,
    )
    return train, test


def _run_single_seed(
    config: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    seed: int,
    run_id: str,
) -> list[MetricsRow]:
    spec = config.model
    partition = partition_noniid(
        train, config.num_clients, config.classes_per_client, seed=[seed, STREAM_PARTITION]
    )
    x0 = mlp.init_params(spec, seed=[seed, STREAM_INIT])
    c0 = np.zeros_like(x0)
    clients = [
        ClientState(id=i, partition_indices=idx, x_i=x0.copy(), c_i=c0.copy())
        for i, idx in enumerate(partition.client_indices)
    ]

    adv_seed = int(
        np.random.SeedSequence(
            [STREAM_ADVERSITY, config.adversity.seed, seed]
        ).generate_state(1, np.uint64)[0]
    )
    adversity = replace(config.adversity, seed=adv_seed)
    clients = mark_affected(clients, adversity)
    train_used = apply_poisoning(clients, train, adversity)
    schedule = Schedule(adversity)

    objective = DatasetObjective(spec, train_used)
    test_batch = mlp.Batch(inputs=test.inputs, labels=test.labels)
    server = ServerState(
        x=x0.copy(),
        c=c0.copy(),
        eta_g=config.eta_g,
        eta_l=config.eta_l,
        local_epochs=config.local_epochs,
        mode=config.mode,
    )

    def shuffle_rng_for(client_id: int, t: int) -> np.random.Generator:
        return np.random.default_rng([seed, STREAM_SHUFFLE, client_id, t])

    history: list = []
    rows: list[MetricsRow] = []
    groups_total = 0
    for _ in range(config.rounds):
        started = time.perf_counter()
        server, clients, report = run_round(
            server,
            clients,
            objective,
            config.batch_size,
            adversity=schedule,
            history=history,
            shuffle_rng_for=shuffle_rng_for,
        )
        if report.skipped:
            log.warning("round %d: no delivered updates, global state unchanged", report.round)
        if config.merge is not None and report.round in config.merge.merge_rounds:
            if len(clients) < 2:
                log.info("round %d: roster too small to merge", report.round)
            else:
                sim = correlation_matrix([c.x_i for c in clients])
                plan = group_similar(
                    sim, config.merge.threshold, config.merge.max_group_size
                )
                clients = apply_merge(clients, plan, config.merge.alpha_rule)
                groups_total += len(plan.groups)
                log.info(
                    "round %d: merged %d group(s), %d node(s) remain",
                    report.round,
                    len(plan.groups),
                    len(clients),
                )
        accuracy, loss = mlp.evaluate(spec, server.x, test_batch)
        wall_ms = (time.perf_counter() - started) * 1000.0
        rows.append(
            MetricsRow(
                run_id=run_id,
                algorithm=config.algorithm,
                condition=config.adversity.condition,
                mode=config.mode,
                seed=seed,
                round=report.round,
                n_active_nodes=len(clients),
                n_groups_total=groups_total,
                test_accuracy=accuracy,
                test_loss=loss,
                wall_ms=wall_ms,
            )
        )
    return rows


def run_experiment(config: ExperimentConfig) -> list[MetricsRow]:
    """Run every seed of the config; one MetricsRow per (seed, round)."""
    train, test = _load_data(config)
    run_id = run_id_for(config)
    rows: list[MetricsRow] = []
    for seed in config.seeds:
        log.info("run %s seed %d: %d rounds", run_id, seed, config.rounds)
        rows.extend(_run_single_seed(config, train, test, seed, run_id))
    return rows


# ------------------------------------------------------------- persistence


def _render(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_metrics(rows: list[MetricsRow], path, format: str = "csv") -> None:
    """Write rows as CSV (exact fixed header) or JSONL; floats round-trip."""
    if format not in ("csv", "jsonl"):
        raise ValueError("format must be csv or jsonl")
    try:
        with open(path, "w", newline="") as f:
            if format == "csv":
                f.write(CSV_HEADER + "\n")
                writer = csv.writer(f, lineterminator="\n")
                for row in rows:
                    writer.writerow([_render(getattr(row, name)) for name in _FIELDS])
            else:
                for row in rows:
                    f.write(json.dumps(row.as_dict()) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write metrics to {path}: {exc}") from exc


def load_metrics(path) -> list[MetricsRow]:
    """Parse a metrics CSV back into rows (inverse of emit_metrics)."""
    try:
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != _FIELDS:
                raise IoFailure(f"unexpected metrics header in {path}: {reader.fieldnames}")
            rows = []
            for rec in reader:
                kwargs = {}
                for name in _FIELDS:
                    raw = rec[name]
                    if name in _INT_FIELDS:
                        kwargs[name] = int(raw)
                    elif name in _FLOAT_FIELDS:
                        kwargs[name] = float(raw)
                    else:
                        kwargs[name] = raw
                rows.append(MetricsRow(**kwargs))
            return rows
    except OSError as exc:
        raise IoFailure(f"cannot read metrics from {path}: {exc}") from exc


def write_run(config: ExperimentConfig, out_dir=None) -> tuple[list[MetricsRow], Path]:
    """Run the experiment and persist metrics.csv + manifest.json."""
    rows = run_experiment(config)
    run_id = run_id_for(config)
    base = Path(out_dir if out_dir is not None else config.output_dir) / run_id
    try:
        base.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create run directory {base}: {exc}") from exc
    emit_metrics(rows, base / "metrics.csv", "csv")
    manifest = {"schema_version": SCHEMA_VERSION, "run_id": run_id, "config": config.to_dict()}
    try:
        (base / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest in {base}: {exc}") from exc
    return rows, base


def rerun_manifest(manifest_path) -> list[MetricsRow]:
    """Reproduce a run from its manifest file."""
    try:
        manifest = json.loads(Path(manifest_path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigInvalid(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    if not isinstance(manifest, dict) or "config" not in manifest:
        raise ConfigInvalid(f"manifest {manifest_path} has no config block")
    return run_experiment(ExperimentConfig.from_dict(manifest["config"]))


def rows_equal_ignoring_wall(a: list[MetricsRow], b: list[MetricsRow]) -> bool:
    """Bit-exact row comparison, wall-clock timing excluded."""
    if len(a) != len(b):
        return False
    skip = {"wall_ms"}
    for ra, rb in zip(a, b):
        for name in _FIELDS:
            if name in skip:
                continue
            if getattr(ra, name) != getattr(rb, name):
                return False
    return True


# -------------------------------------------------------------- comparison


def _final_accuracy_by_seed(rows: list[MetricsRow]) -> dict[int, float]:
    last_round = max(r.round for r in rows)
    return {r.seed: r.test_accuracy for r in rows if r.round == last_round}


def compare(
    baseline: ExperimentConfig,
    proposed: ExperimentConfig,
    conditions: list[str],
    seeds: list[int],
    out_dir=None,
) -> tuple[list[dict], str]:
    """Run both arms across conditions; summarize final-round accuracy.

    The two configs may differ only in their merge block; conditions and
    seeds are applied to both sides. Returns (summary rows, text table)
    and optionally writes summary.csv / summary.txt.
    """
    base_dict = baseline.to_dict()
    prop_dict = proposed.to_dict()
    base_dict.pop("merge")
    prop_dict.pop("merge")
    if base_dict != prop_dict:
        raise ConfigInvalid("baseline and proposed may differ only in the merge block")

    summary: list[dict] = []
    win_lines: list[str] = []
    for condition in conditions:
        finals: dict[str, dict[int, float]] = {}
        for config in (baseline, proposed):
            arm = replace(
                config,
                adversity=replace(config.adversity, condition=condition),
                seeds=tuple(seeds),
            )
            rows = run_experiment(arm)
            finals[config.algorithm] = _final_accuracy_by_seed(rows)
            per_seed = finals[config.algorithm]
            summary.append(
                {
                    "condition": condition,
                    "algorithm": config.algorithm,
                    "mean_final_accuracy": float(np.mean(list(per_seed.values()))),
                    "std_final_accuracy": float(np.std(list(per_seed.values()))),
                    **{f"seed_{s}": per_seed[s] for s in seeds},
                }
            )
        if len(finals) == 2:
            base_f = finals[baseline.algorithm]
            prop_f = finals[proposed.algorithm]
            for s in seeds:
                verdict = "win" if prop_f[s] >= base_f[s] else "loss"
                win_lines.append(
                    f"{condition} seed {s}: {proposed.algorithm} {prop_f[s]:.4f} "
                    f"vs {baseline.algorithm} {base_f[s]:.4f} -> {verdict}"
                )

    text = _summary_text(summary, win_lines)
    if out_dir is not None:
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_summary_csv(summary, seeds, out / "summary.csv")
            (out / "summary.txt").write_text(text)
        except OSError as exc:
            raise IoFailure(f"cannot write summary to {out}: {exc}") from exc
    return summary, text


def _write_summary_csv(summary: list[dict], seeds: list[int], path) -> None:
    fields = ["condition", "algorithm", "mean_final_accuracy", "std_final_accuracy"]
    fields += [f"seed_{s}" for s in seeds]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(fields)
        for row in summary:
            writer.writerow([_render(row[name]) for name in fields])


def _summary_text(summary: list[dict], win_lines: list[str]) -> str:
    buf = io.StringIO()
    buf.write("final-round test accuracy (mean +/- std over seeds)\n")
    for row in summary:
        buf.write(
            f"  {row['condition']:<12} {row['algorithm']:<15} "
            f"{row['mean_final_accuracy']:.4f} +/- {row['std_final_accuracy']:.4f}\n"
        )
    if win_lines:
        buf.write("per-seed outcomes (proposed vs baseline)\n")
        for line in win_lines:
            buf.write(f"  {line}\n")
    return buf.getvalue()
