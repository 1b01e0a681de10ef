"""Protocol orchestration: similarity-distillation rounds, weight-averaging
baselines, purely local training, and the communication-cost ledger.

Client id conventions: a partition with a public shard reserves shard 0 as
the anchor corpus. The distillation scheme trains shards 1..K only; the
weight-averaging baselines and purely local training treat shard 0 as a
simple client and train every shard.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .contrastive import ContrastiveConfig, ProxConfig, train_simclr_local
from .data import Dataset
from .encoder import (
    EncoderConfig,
    EncoderParams,
    init_encoder,
    serialize_params,
)
from .errors import ConfigError, ParameterError, ShapeError, SimError
from .esd import EsdConfig, distill
from .probe import ProbeConfig, linear_probe
from .similarity import (
    ensemble,
    infer_representations,
    rep_matrix_num_bytes,
    sharpen,
    similarity_matrix,
)

log = logging.getLogger(__name__)

SCHEMES = ("flesd", "flesd_cc", "fedavg", "fedprox", "min_local")

# seed-stream purposes, mixed into derived seeds so streams never collide
_PURPOSE_SAMPLE = 1
_PURPOSE_LOCAL = 2
_PURPOSE_DISTILL = 3


def derive_seed(*parts: int) -> int:
    """Stable, platform-independent seed mixing."""
    ss = np.random.SeedSequence([int(p) for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class FederationConfig:
    scheme: str
    num_clients: int
    rounds: int = 1
    epochs_local: int = 1
    epochs_total: int | None = None
    sample_fraction: float = 1.0
    prox_mu: float = 0.0
    seed: int = 0
    retransmit_public: bool = False

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; "
                              f"expected one of {SCHEMES}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ConfigError("sample_fraction must be in (0, 1]")
        if self.prox_mu < 0.0:
            raise ConfigError("prox_mu must be >= 0")
        if self.scheme == "flesd_cc":
            self.rounds = 1  # constant-communication variant by definition
        if self.scheme == "min_local":
            if self.epochs_total is None:
                if self.rounds >= 1:
                    self.epochs_total = self.rounds * self.epochs_local
                else:
                    raise ConfigError("min_local needs epochs_total")
            return
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.epochs_local < 0:
            raise ConfigError("epochs_local must be >= 0")
        if self.epochs_total is None:
            self.epochs_total = self.rounds * self.epochs_local
        elif self.rounds > 0 and self.epochs_total != self.rounds * self.epochs_local:
            raise ConfigError(
                f"epochs_total={self.epochs_total} inconsistent with "
                f"rounds*epochs_local={self.rounds * self.epochs_local}")


@dataclass
class ClientState:
    client_id: int
    params: EncoderParams
    shard: Dataset
    loss_history: list[float] = field(default_factory=list)


@dataclass
class LedgerEntry:
    round: int
    direction: str       # "up" | "down"
    payload_kind: str    # "weights" | "representations" | "public_data"
    num_bytes: int
    client_id: int | None = None


class CommunicationLedger:
    """Exact byte accounting of every transfer, one record per payload."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []

    def add(self, round_idx: int, direction: str, payload_kind: str,
            num_bytes: int, client_id: int | None = None) -> None:
        if direction not in ("up", "down"):
            raise ParameterError("direction must be 'up' or 'down'")
        self.entries.append(LedgerEntry(round_idx, direction, payload_kind,
                                        int(num_bytes), client_id))

    def total(self, direction: str) -> int:
        return sum(e.num_bytes for e in self.entries if e.direction == direction)

    @property
    def uplink_bytes(self) -> int:
        return self.total("up")

    @property
    def downlink_bytes(self) -> int:
        return self.total("down")

    def __len__(self) -> int:
        return len(self.entries)

    def rows(self) -> list[dict]:
        return [
            {
                "round": e.round,
                "direction": e.direction,
                "payload_kind": e.payload_kind,
                "client_id": -1 if e.client_id is None else e.client_id,
                "bytes": e.num_bytes,
            }
            for e in self.entries
        ]


@dataclass
class MetricsRecord:
    """Everything one scheme run reports."""

    scheme: str
    rounds: int
    epochs_local: int
    alpha: float | None = None
    local_losses: list[list[float]] = field(default_factory=list)
    distill_losses: list[list[float]] = field(default_factory=list)
    final_probe_acc: float | None = None
    client_probe_accs: dict[int, float] = field(default_factory=dict)
    uplink_bytes: int = 0
    downlink_bytes: int = 0
    wall_seconds: float = 0.0

    def mean_client_probe_acc(self) -> float | None:
        if not self.client_probe_accs:
            return None
        return float(np.mean(list(self.client_probe_accs.values())))


def sample_clients(num_clients: int, fraction: float, round_seed: int) -> list[int]:
    """Uniform sample without replacement of ceil(fraction * num_clients)
    ids from [0, num_clients), in ascending order."""
    if not (0.0 < fraction <= 1.0):
        raise ParameterError("fraction must be in (0, 1]")
    size = int(np.ceil(fraction * num_clients))
    if size < 1:
        raise ParameterError("sample would be empty")
    if size >= num_clients:
        return list(range(num_clients))
    rng = np.random.default_rng(round_seed)
    return sorted(int(i) for i in rng.choice(num_clients, size=size,
                                             replace=False))


def weight_average(params_list: list[EncoderParams],
                   weights: list[float]) -> EncoderParams:
    """Entrywise weighted mean of homogeneous parameter sets.

    Heterogeneous architectures are a hard error here; that limitation is
    exactly what the similarity-based aggregation path exists to avoid.
    """
    if not params_list:
        raise ParameterError("nothing to average")
    if len(weights) != len(params_list):
        raise ParameterError("need one weight per parameter set")
    w = np.asarray(weights, dtype=np.float64)
    if (w < 0.0).any() or abs(w.sum() - 1.0) > 1e-9:
        raise ParameterError("weights must be >= 0 and sum to 1")
    first = params_list[0]
    for other in params_list[1:]:
        if not first.same_architecture(other):
            raise ShapeError(
                "cannot weight-average heterogeneous architectures")
    out = first.clone()
    for p in out.parameters():
        p.value[...] = 0.0
    for wk, params in zip(w, params_list):
        for dst, src in zip(out.parameters(), params.parameters()):
            dst.value += wk * src.value
    return out


def comm_cost_check(omega: float, omega_prime: float, d_pub_size: int,
                    rep_dim: int, encoder_params: int) -> dict:
    """Scalar-count comparison of per-client transfer volumes.

    lhs: representation uploads, omega * |D_pub| * d. rhs: weight uploads,
    omega' * |f|. The distillation route is the cheaper one iff lhs <= rhs.
    A zero frequency is a route that never transmits at all.
    """
    if min(d_pub_size, rep_dim, encoder_params) <= 0:
        raise ParameterError("sizes and parameter counts must be positive")
    if omega < 0 or omega_prime < 0:
        raise ParameterError("communication frequencies must be >= 0")
    lhs = float(omega) * float(d_pub_size) * float(rep_dim)
    rhs = float(omega_prime) * float(encoder_params)
    return {"flesd_cheaper": lhs <= rhs, "lhs": lhs, "rhs": rhs}


# ---------------------------------------------------------------------------
# scheme runners
# ---------------------------------------------------------------------------

ProbeContext = tuple[ProbeConfig, Dataset, Dataset]  # (cfg, train, test)


def _maybe_probe(record: MetricsRecord, global_params: EncoderParams | None,
                 client_params: dict[int, EncoderParams],
                 probe_ctx: ProbeContext | None) -> None:
    if probe_ctx is None:
        return
    probe_cfg, train, test = probe_ctx
    for cid in sorted(client_params):
        record.client_probe_accs[cid] = linear_probe(client_params[cid],
                                                     train, test, probe_cfg)
    if global_params is not None:
        record.final_probe_acc = linear_probe(global_params, train, test,
                                              probe_cfg)
    elif record.client_probe_accs:
        record.final_probe_acc = record.mean_client_probe_acc()


def _mean_loss_rows(per_client: list[list[float]]) -> list[float]:
    if not per_client:
        return []
    return [float(v) for v in np.mean(np.asarray(per_client), axis=0)]


def run_flesd(cfg: FederationConfig, shards: list[Dataset],
              encoder_cfg: EncoderConfig, local_cfg: ContrastiveConfig,
              esd_cfg: EsdConfig, probe_ctx: ProbeContext | None = None
              ) -> tuple[EncoderParams, MetricsRecord, CommunicationLedger]:
    """Similarity-distillation protocol.

    Round t: broadcast the current model; every sampled client trains
    locally, infers its representation matrix on the public shard and
    uploads it; the server sharpens, ensembles, and distills a new global
    model starting from the previous one, then broadcasts it to all
    clients. The public shard itself is shipped once, up front.
    """
    if cfg.scheme not in ("flesd", "flesd_cc"):
        raise ConfigError(f"run_flesd cannot execute scheme {cfg.scheme!r}")
    if len(shards) != cfg.num_clients + 1:
        raise ConfigError(
            f"expected {cfg.num_clients} client shards plus a public shard, "
            f"got {len(shards)} shards")
    d_pub = shards[0]
    if len(d_pub) == 0:
        raise ConfigError("public shard is empty")
    record = MetricsRecord(cfg.scheme, cfg.rounds, cfg.epochs_local)
    ledger = CommunicationLedger()
    w = init_encoder(encoder_cfg)
    if cfg.rounds == 0:
        _maybe_probe(record, w, {}, probe_ctx)
        return w, record, ledger
    local_cfg = dataclasses.replace(local_cfg, epochs=cfg.epochs_local)
    weight_bytes = len(serialize_params(w))
    pub_bytes = 8 * len(d_pub) * d_pub.in_dim
    if not cfg.retransmit_public:
        ledger.add(0, "down", "public_data", pub_bytes)
    last_client_params: dict[int, EncoderParams] = {}
    for t in range(1, cfg.rounds + 1):
        if cfg.retransmit_public:
            ledger.add(t, "down", "public_data", pub_bytes)
        if t == 1:
            for cid in range(1, cfg.num_clients + 1):
                ledger.add(t, "down", "weights", weight_bytes, cid)
        sampled = sample_clients(cfg.num_clients, cfg.sample_fraction,
                                 derive_seed(cfg.seed, _PURPOSE_SAMPLE, t))
        client_ids = [s + 1 for s in sampled]  # shard 0 is the public corpus
        sharpened = []
        round_losses: list[list[float]] = []
        for cid in client_ids:
            try:
                client = ClientState(cid, w.clone(), shards[cid])
                client.params, losses = train_simclr_local(
                    client.params, client.shard, local_cfg,
                    seed=derive_seed(cfg.seed, _PURPOSE_LOCAL, t, cid))
                client.loss_history = losses
                round_losses.append(losses)
                rep = infer_representations(client.params, d_pub,
                                            client_id=cid)
            except SimError as exc:
                raise type(exc)(f"round {t}, client {cid}: {exc}") from exc
            ledger.add(t, "up", "representations",
                       rep_matrix_num_bytes(rep.d, rep.n), cid)
            sharpened.append(sharpen(similarity_matrix(rep), esd_cfg.tau_t))
            last_client_params[cid] = client.params
        try:
            target = ensemble(sharpened)
            w, distill_losses = distill(
                w, target, d_pub, esd_cfg, aug=local_cfg.aug,
                seed=derive_seed(cfg.seed, _PURPOSE_DISTILL, t))
        except SimError as exc:
            raise type(exc)(f"round {t}, server aggregation: {exc}") from exc
        record.local_losses.append(_mean_loss_rows(round_losses))
        record.distill_losses.append(distill_losses)
        for cid in range(1, cfg.num_clients + 1):
            ledger.add(t, "down", "weights", weight_bytes, cid)
    record.uplink_bytes = ledger.uplink_bytes
    record.downlink_bytes = ledger.downlink_bytes
    _maybe_probe(record, w, last_client_params, probe_ctx)
    return w, record, ledger


def _run_weight_scheme(cfg: FederationConfig, shards: list[Dataset],
                       encoder_cfg: EncoderConfig,
                       local_cfg: ContrastiveConfig,
                       probe_ctx: ProbeContext | None
                       ) -> tuple[EncoderParams, MetricsRecord,
                                  CommunicationLedger]:
    record = MetricsRecord(cfg.scheme, cfg.rounds, cfg.epochs_local)
    ledger = CommunicationLedger()
    w = init_encoder(encoder_cfg)
    if cfg.rounds == 0:
        _maybe_probe(record, w, {}, probe_ctx)
        return w, record, ledger
    local_cfg = dataclasses.replace(local_cfg, epochs=cfg.epochs_local)
    prox = ProxConfig(cfg.prox_mu) if cfg.scheme == "fedprox" else None
    n_clients = len(shards)  # shard 0 is a simple client here
    last_client_params: dict[int, EncoderParams] = {}
    for t in range(1, cfg.rounds + 1):
        weight_bytes = len(serialize_params(w))
        sampled = sample_clients(n_clients, cfg.sample_fraction,
                                 derive_seed(cfg.seed, _PURPOSE_SAMPLE, t))
        trained: list[EncoderParams] = []
        sizes: list[int] = []
        round_losses: list[list[float]] = []
        for cid in sampled:
            ledger.add(t, "down", "weights", weight_bytes, cid)
            client = ClientState(cid, w.clone(), shards[cid])
            client.params, losses = train_simclr_local(
                client.params, client.shard, local_cfg,
                prox=prox, global_params=w if prox else None,
                seed=derive_seed(cfg.seed, _PURPOSE_LOCAL, t, cid))
            round_losses.append(losses)
            ledger.add(t, "up", "weights", len(serialize_params(client.params)),
                       cid)
            trained.append(client.params)
            sizes.append(len(client.shard))
            last_client_params[cid] = client.params
        total = float(sum(sizes))
        w = weight_average(trained, [s / total for s in sizes])
        record.local_losses.append(_mean_loss_rows(round_losses))
    record.uplink_bytes = ledger.uplink_bytes
    record.downlink_bytes = ledger.downlink_bytes
    _maybe_probe(record, w, last_client_params, probe_ctx)
    return w, record, ledger


def run_fedavg(cfg: FederationConfig, shards: list[Dataset],
               encoder_cfg: EncoderConfig, local_cfg: ContrastiveConfig,
               probe_ctx: ProbeContext | None = None
               ) -> tuple[EncoderParams, MetricsRecord, CommunicationLedger]:
    """Size-weighted averaging of locally trained weights, per round."""
    if cfg.scheme != "fedavg":
        raise ConfigError(f"run_fedavg cannot execute scheme {cfg.scheme!r}")
    return _run_weight_scheme(cfg, shards, encoder_cfg, local_cfg, probe_ctx)


def run_fedprox(cfg: FederationConfig, shards: list[Dataset],
                encoder_cfg: EncoderConfig, local_cfg: ContrastiveConfig,
                probe_ctx: ProbeContext | None = None
                ) -> tuple[EncoderParams, MetricsRecord, CommunicationLedger]:
    """Weight averaging with a proximal pull toward the broadcast model
    during local training. prox_mu = 0 coincides with plain averaging."""
    if cfg.scheme != "fedprox":
        raise ConfigError(f"run_fedprox cannot execute scheme {cfg.scheme!r}")
    return _run_weight_scheme(cfg, shards, encoder_cfg, local_cfg, probe_ctx)


def run_min_local(cfg: FederationConfig, shards: list[Dataset],
                  encoder_cfg: EncoderConfig, local_cfg: ContrastiveConfig,
                  probe_ctx: ProbeContext | None = None
                  ) -> tuple[list[EncoderParams], MetricsRecord,
                             CommunicationLedger]:
    """No-aggregation lower bound: every client trains the full epoch
    budget on its own shard; the ledger stays empty."""
    if cfg.scheme != "min_local":
        raise ConfigError(f"run_min_local cannot execute scheme {cfg.scheme!r}")
    record = MetricsRecord(cfg.scheme, 0, cfg.epochs_total or 0)
    ledger = CommunicationLedger()
    local_cfg = dataclasses.replace(local_cfg, epochs=cfg.epochs_total or 0)
    w0 = init_encoder(encoder_cfg)
    client_params: dict[int, EncoderParams] = {}
    round_losses: list[list[float]] = []
    for cid in range(len(shards)):
        params, losses = train_simclr_local(
            w0.clone(), shards[cid], local_cfg,
            seed=derive_seed(cfg.seed, _PURPOSE_LOCAL, 1, cid))
        client_params[cid] = params
        round_losses.append(losses)
    record.local_losses.append(_mean_loss_rows(round_losses))
    _maybe_probe(record, None, client_params, probe_ctx)
    return [client_params[c] for c in sorted(client_params)], record, ledger
