"""Experiment runner: JSON config in, metrics/ledger files out.

A config describes a grid of (scheme, alpha, rounds) cells over one
dataset. Cells are independent and may run in parallel (SIM_THREADS);
results are merged in config order so outputs are byte-stable for a given
config regardless of worker count.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .contrastive import ContrastiveConfig
from .data import (
    AugmentationConfig,
    Dataset,
    PartitionConfig,
    dirichlet_partition,
    load_csv_dataset,
    partition_summary,
    split_dataset,
    synth_gaussian_blobs,
)
from .encoder import EncoderConfig
from .errors import ConfigError, SimError
from .esd import EsdConfig
from .federation import (
    SCHEMES,
    FederationConfig,
    run_fedavg,
    run_fedprox,
    run_flesd,
    run_min_local,
)
from .probe import ProbeConfig

CSV_COLUMNS = ("scheme", "alpha", "T", "E_local", "final_probe_acc",
               "mean_local_probe_acc", "uplink_bytes", "downlink_bytes",
               "wall_seconds")

LEDGER_COLUMNS = ("scheme", "alpha", "T", "round", "direction",
                  "payload_kind", "client_id", "bytes")


def _section(cfg: dict, name: str) -> dict:
    if name not in cfg:
        raise ConfigError(f"{name}: missing section")
    if not isinstance(cfg[name], dict):
        raise ConfigError(f"{name}: must be an object")
    return cfg[name]


def _get(d: dict, path: str, key: str, typ, default=None, required=False):
    if key not in d:
        if required:
            raise ConfigError(f"{path}.{key}: missing required field")
        return default
    val = d[key]
    if typ is float and isinstance(val, int):
        val = float(val)
    if typ is not None and not isinstance(val, typ):
        raise ConfigError(f"{path}.{key}: expected {typ.__name__}, "
                          f"got {type(val).__name__}")
    return val


@dataclasses.dataclass
class ExperimentPlan:
    """Fully validated config, ready to expand into cells."""

    data: dict
    partition_seed: int
    public_shard: bool
    num_clients: int
    min_shard_size: int
    alphas: list[float]
    encoder_cfg: EncoderConfig
    local_cfg: ContrastiveConfig
    esd_cfg: EsdConfig
    probe_cfg: ProbeConfig
    schemes: list[str]
    rounds_by_scheme: dict[str, list[int]]
    epochs_total: int
    sample_fraction: float
    prox_mu: float
    fed_seed: int
    wall_clock: bool

    def cells(self) -> list[dict]:
        out = []
        for scheme in self.schemes:
            for alpha in self.alphas:
                for rounds in self.rounds_by_scheme[scheme]:
                    out.append({"scheme": scheme, "alpha": alpha,
                                "rounds": rounds})
        return out


def load_plan(config_path: str, seed_override: int | None = None
              ) -> ExperimentPlan:
    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"config file not found: {config_path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config root must be an object")

    data = _section(cfg, "data")
    kind = _get(data, "data", "kind", str, required=True)
    if kind == "blobs":
        for key in ("n_classes", "per_class", "in_dim", "seed"):
            _get(data, "data", key, int, required=True)
        _get(data, "data", "spread", float, required=True)
    elif kind == "csv":
        csv_path = _get(data, "data", "path", str, required=True)
        if not Path(csv_path).exists():
            raise ConfigError(f"data.path: dataset file not found: {csv_path}")
    else:
        raise ConfigError(f"data.kind: unknown kind {kind!r}")

    part = _section(cfg, "partition")
    num_clients = _get(part, "partition", "num_clients", int, required=True)
    alphas_raw = part.get("alpha")
    if isinstance(alphas_raw, (int, float)):
        alphas = [float(alphas_raw)]
    elif isinstance(alphas_raw, list) and alphas_raw and \
            all(isinstance(a, (int, float)) for a in alphas_raw):
        alphas = [float(a) for a in alphas_raw]
    else:
        raise ConfigError("partition.alpha: expected a number or list of numbers")
    if any(a <= 0 for a in alphas):
        raise ConfigError("partition.alpha: values must be > 0")
    public_shard = _get(part, "partition", "public_shard", bool, default=True)
    min_shard_size = _get(part, "partition", "min_shard_size", int, default=1)
    partition_seed = _get(part, "partition", "seed", int, default=0)

    enc = _section(cfg, "encoder")
    sizes = _get(enc, "encoder", "layer_sizes", list, required=True)
    if not all(isinstance(s, int) for s in sizes):
        raise ConfigError("encoder.layer_sizes: expected a list of ints")
    try:
        encoder_cfg = EncoderConfig(
            tuple(sizes),
            _get(enc, "encoder", "activation", str, default="relu"),
            _get(enc, "encoder", "init_seed", int, default=0))
    except SimError as exc:
        raise ConfigError(f"encoder: {exc}")

    loc = _section(cfg, "local")
    aug_d = _get(loc, "local", "aug", dict, default={})
    try:
        aug = AugmentationConfig(
            _get(aug_d, "local.aug", "noise_sigma", float, default=0.0),
            _get(aug_d, "local.aug", "mask_prob", float, default=0.0),
            tuple(_get(aug_d, "local.aug", "scale_range", list,
                       default=[1.0, 1.0])))
        local_cfg = ContrastiveConfig(
            temperature=_get(loc, "local", "temperature", float, default=0.4),
            batch_size=_get(loc, "local", "batch_size", int, default=128),
            epochs=1,
            lr=_get(loc, "local", "lr", float, default=1e-3),
            aug=aug)
    except SimError as exc:
        raise ConfigError(f"local: {exc}")

    esd_d = _section(cfg, "esd")
    try:
        tau = _get(esd_d, "esd", "tau", float, default=0.1)
        esd_cfg = EsdConfig(
            tau_s=tau, tau_t=tau,
            momentum=_get(esd_d, "esd", "momentum", float, default=0.999),
            anchor_capacity=_get(esd_d, "esd", "anchor_capacity", int,
                                 default=2048),
            batch_size=_get(esd_d, "esd", "batch_size", int, default=128),
            epochs=_get(esd_d, "esd", "epochs", int, default=200),
            lr=_get(esd_d, "esd", "lr", float, default=1e-3))
    except SimError as exc:
        raise ConfigError(f"esd: {exc}")

    prb = _section(cfg, "probe")
    try:
        probe_cfg = ProbeConfig(
            epochs=_get(prb, "probe", "epochs", int, default=100),
            lr=_get(prb, "probe", "lr", float, default=1e-3),
            batch_size=_get(prb, "probe", "batch_size", int, default=128),
            train_fraction=_get(prb, "probe", "train_fraction", float,
                                default=0.8),
            seed=_get(prb, "probe", "seed", int, default=0))
    except SimError as exc:
        raise ConfigError(f"probe: {exc}")

    fed = _section(cfg, "federation")
    schemes = _get(fed, "federation", "schemes", list, required=True)
    if not schemes or not all(isinstance(s, str) and s in SCHEMES
                              for s in schemes):
        raise ConfigError(f"federation.schemes: expected names from {SCHEMES}")
    rounds_raw = fed.get("rounds")
    rounds_by_scheme: dict[str, list[int]] = {}
    if isinstance(rounds_raw, list):
        shared = _validate_rounds("federation.rounds", rounds_raw)
        rounds_by_scheme = {s: list(shared) for s in schemes}
    elif isinstance(rounds_raw, dict):
        for s in schemes:
            if s not in rounds_raw:
                raise ConfigError(f"federation.rounds.{s}: missing round list")
            rounds_by_scheme[s] = _validate_rounds(
                f"federation.rounds.{s}", rounds_raw[s])
    else:
        raise ConfigError("federation.rounds: expected a list or a "
                          "scheme-to-list mapping")
    epochs_total = _get(fed, "federation", "epochs_total", int, required=True)
    if epochs_total < 1:
        raise ConfigError("federation.epochs_total: must be >= 1")
    for scheme, rround in rounds_by_scheme.items():
        if scheme == "min_local":
            continue
        for r in rround:
            if r == 0:
                continue  # zero-round runs skip training entirely
            t_eff = 1 if scheme == "flesd_cc" else r
            if epochs_total % t_eff != 0:
                raise ConfigError(
                    f"federation.epochs_total: {epochs_total} not divisible "
                    f"by rounds={t_eff} for scheme {scheme}")
    sample_fraction = _get(fed, "federation", "sample_fraction", float,
                           default=1.0)
    prox_mu = _get(fed, "federation", "prox_mu", float, default=0.0)
    fed_seed = _get(fed, "federation", "seed", int, default=0)
    if seed_override is not None:
        fed_seed = int(seed_override)

    if any(s in ("flesd", "flesd_cc") for s in schemes) and not public_shard:
        raise ConfigError("partition.public_shard: must be true when a "
                          "distillation scheme is configured")

    out = cfg.get("output", {})
    wall_clock = _get(out, "output", "wall_clock", bool, default=False)

    return ExperimentPlan(
        data=data, partition_seed=partition_seed, public_shard=public_shard,
        num_clients=num_clients, min_shard_size=min_shard_size, alphas=alphas,
        encoder_cfg=encoder_cfg, local_cfg=local_cfg, esd_cfg=esd_cfg,
        probe_cfg=probe_cfg, schemes=[str(s) for s in schemes],
        rounds_by_scheme=rounds_by_scheme, epochs_total=epochs_total,
        sample_fraction=sample_fraction, prox_mu=prox_mu, fed_seed=fed_seed,
        wall_clock=wall_clock)


def _validate_rounds(path: str, rounds) -> list[int]:
    if not isinstance(rounds, list) or not rounds or \
            not all(isinstance(r, int) and r >= 0 for r in rounds):
        raise ConfigError(f"{path}: expected a nonempty list of ints >= 0")
    return [int(r) for r in rounds]


def _build_dataset(plan: ExperimentPlan) -> Dataset:
    data = plan.data
    if data["kind"] == "blobs":
        return synth_gaussian_blobs(data["n_classes"], data["per_class"],
                                    data["in_dim"], float(data["spread"]),
                                    data["seed"])
    return load_csv_dataset(data["path"])


def _partition(plan: ExperimentPlan, train: Dataset, alpha: float
               ) -> list[Dataset]:
    cfg = PartitionConfig(num_clients=plan.num_clients, alpha=alpha,
                          public_shard=plan.public_shard,
                          seed=plan.partition_seed,
                          min_shard_size=plan.min_shard_size)
    return dirichlet_partition(train, cfg)


def run_cell(plan: ExperimentPlan, cell: dict) -> dict:
    """Execute one (scheme, alpha, rounds) grid cell. Pure given the plan."""
    started = time.perf_counter()
    scheme, alpha, rounds = cell["scheme"], cell["alpha"], cell["rounds"]
    ds = _build_dataset(plan)
    train, test = split_dataset(ds, plan.probe_cfg.train_fraction,
                                plan.probe_cfg.seed)
    shards = _partition(plan, train, alpha)
    t_eff = 1 if scheme == "flesd_cc" else max(rounds, 1)
    fed_cfg = FederationConfig(
        scheme=scheme, num_clients=plan.num_clients, rounds=rounds,
        epochs_local=(plan.epochs_total // t_eff if scheme != "min_local"
                      else plan.epochs_total),
        epochs_total=plan.epochs_total,
        sample_fraction=plan.sample_fraction, prox_mu=plan.prox_mu,
        seed=plan.fed_seed)
    probe_ctx = (plan.probe_cfg, train, test)
    if scheme in ("flesd", "flesd_cc"):
        _, record, ledger = run_flesd(fed_cfg, shards, plan.encoder_cfg,
                                      plan.local_cfg, plan.esd_cfg, probe_ctx)
    elif scheme == "fedavg":
        _, record, ledger = run_fedavg(fed_cfg, shards, plan.encoder_cfg,
                                       plan.local_cfg, probe_ctx)
    elif scheme == "fedprox":
        _, record, ledger = run_fedprox(fed_cfg, shards, plan.encoder_cfg,
                                        plan.local_cfg, probe_ctx)
    else:
        _, record, ledger = run_min_local(fed_cfg, shards, plan.encoder_cfg,
                                          plan.local_cfg, probe_ctx)
    record.alpha = alpha
    record.wall_seconds = time.perf_counter() - started
    return {
        "scheme": scheme,
        "alpha": alpha,
        "rounds": fed_cfg.rounds if scheme != "min_local" else rounds,
        "epochs_local": fed_cfg.epochs_local,
        "record": record,
        "ledger_rows": ledger.rows(),
    }


def _cell_worker(args: tuple) -> dict:
    plan, cell = args
    return run_cell(plan, cell)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))  # plain-float repr even for numpy scalars
    return str(value)


def _jsonable(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def run_experiment(config_path: str, seed_override: int | None = None,
                   out_dir: str | None = None) -> dict:
    """Run the whole grid and write metrics.csv / metrics.json / ledger.csv /
    partition_report.json into ``out_dir``. Returns the file paths."""
    plan = load_plan(config_path, seed_override)
    out = Path(out_dir) if out_dir else Path("results")
    out.mkdir(parents=True, exist_ok=True)
    cells = plan.cells()
    workers = int(os.environ.get("SIM_THREADS", "1") or "1")
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_cell_worker,
                                    [(plan, c) for c in cells]))
    else:
        results = [run_cell(plan, c) for c in cells]

    csv_lines = [",".join(CSV_COLUMNS)]
    ledger_lines = [",".join(LEDGER_COLUMNS)]
    json_cells = []
    for res in results:
        rec = res["record"]
        if not plan.wall_clock:
            rec.wall_seconds = 0.0  # keep every artifact run-to-run stable
        csv_lines.append(",".join([
            res["scheme"],
            _fmt(float(res["alpha"])),
            _fmt(res["rounds"]),
            _fmt(res["epochs_local"]),
            _fmt(rec.final_probe_acc),
            _fmt(rec.mean_client_probe_acc()),
            _fmt(rec.uplink_bytes),
            _fmt(rec.downlink_bytes),
            _fmt(float(rec.wall_seconds)),
        ]))
        for row in res["ledger_rows"]:
            ledger_lines.append(",".join([
                res["scheme"], _fmt(float(res["alpha"])), _fmt(res["rounds"]),
                _fmt(row["round"]), row["direction"], row["payload_kind"],
                _fmt(row["client_id"]), _fmt(row["bytes"]),
            ]))
        cell_json = dataclasses.asdict(rec)
        cell_json["rounds_grid_value"] = res["rounds"]
        json_cells.append(_jsonable(cell_json))

    (out / "metrics.csv").write_text("\n".join(csv_lines) + "\n")
    (out / "ledger.csv").write_text("\n".join(ledger_lines) + "\n")
    (out / "metrics.json").write_text(
        json.dumps({"cells": json_cells}, indent=2, sort_keys=True) + "\n")
    (out / "partition_report.json").write_text(
        json.dumps(partition_report_data(plan), indent=2, sort_keys=True)
        + "\n")
    return {
        "metrics_csv": str(out / "metrics.csv"),
        "metrics_json": str(out / "metrics.json"),
        "ledger_csv": str(out / "ledger.csv"),
        "partition_report": str(out / "partition_report.json"),
        "cells": len(results),
    }


def partition_report_data(plan: ExperimentPlan) -> dict:
    """Per-alpha shard histograms, computed without any training."""
    ds = _build_dataset(plan)
    train, _ = split_dataset(ds, plan.probe_cfg.train_fraction,
                             plan.probe_cfg.seed)
    report = {}
    for alpha in plan.alphas:
        shards = _partition(plan, train, alpha)
        report[repr(float(alpha))] = partition_summary(shards)
    return report


def partition_report(config_path: str) -> dict:
    return partition_report_data(load_plan(config_path))
