"""Ensemble similarity distillation.

The server trains a student encoder so that, for each public-set query, the
student's softmax similarity distribution over a set of anchors matches the
distribution read off the ensembled target matrix. Anchors are served from
a FIFO queue of momentum-encoder outputs, so the anchor set never needs
re-encoding; the momentum encoder trails the student by an exponential
moving average.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AugmentationConfig, Dataset, augment, identity_augmentation
from .encoder import EncoderParams, encode
from .errors import DegenerateInputError, ParameterError, ShapeError
from .optim import Adam
from .similarity import EnsembleTarget

log = logging.getLogger(__name__)

_UNIT_NORM_TOL = 1e-6


@dataclass
class EsdConfig:
    """Distillation hyperparameters.

    Student and target temperatures are tied by construction; distinct
    values are only accepted with the explicit override flag, since the two
    distributions stop being same-scaled the moment they differ.
    """

    tau_s: float = 0.1
    tau_t: float = 0.1
    momentum: float = 0.999
    anchor_capacity: int = 2048
    batch_size: int = 128
    epochs: int = 200
    lr: float = 1e-3
    allow_unequal_temperatures: bool = False

    def __post_init__(self):
        if self.tau_s <= 0.0 or self.tau_t <= 0.0:
            raise ParameterError("temperatures must be > 0")
        if self.tau_s != self.tau_t and not self.allow_unequal_temperatures:
            raise ParameterError(
                "student and target temperatures are tied; set "
                "allow_unequal_temperatures to override")
        if not (0.0 <= self.momentum <= 1.0):
            raise ParameterError("momentum factor must be in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0.0:
            raise ParameterError("invalid distillation loop config")
        if self.anchor_capacity < self.batch_size:
            raise ParameterError("anchor capacity must be >= batch size")


class MomentumQueue:
    """FIFO buffer of (public index, unit-norm representation) anchors."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ParameterError("queue capacity must be >= 1")
        self.capacity = capacity
        self._entries: deque[tuple[int, np.ndarray]] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def push(self, indices, representations) -> None:
        """Append entries in order, evicting the oldest past capacity."""
        indices = np.asarray(indices, dtype=np.int64)
        reps = np.asarray(representations, dtype=np.float64)
        if reps.ndim != 2 or reps.shape[0] != indices.shape[0]:
            raise ShapeError("need one representation row per index")
        if indices.size:
            norms = np.sqrt((reps * reps).sum(axis=1))
            if np.abs(norms - 1.0).max() > _UNIT_NORM_TOL:
                raise ParameterError("queued representations must be unit-norm")
        for i in range(indices.shape[0]):
            self._entries.append((int(indices[i]), reps[i].copy()))
            if len(self._entries) > self.capacity:
                self._entries.popleft()

    def indices(self) -> np.ndarray:
        """Stored public indices, oldest first."""
        return np.array([i for i, _ in self._entries], dtype=np.int64)

    def representations(self) -> np.ndarray:
        """Stored representation rows, oldest first."""
        if not self._entries:
            return np.empty((0, 0))
        return np.stack([r for _, r in self._entries])


def queue_push(queue: MomentumQueue, indices, representations) -> MomentumQueue:
    queue.push(indices, representations)
    return queue


def ema_update(momentum_params: EncoderParams, student: EncoderParams,
               zeta: float) -> EncoderParams:
    """In-place convex combination: mu <- zeta * mu + (1 - zeta) * theta.

    zeta = 1 freezes the momentum encoder; zeta = 0 makes it a plain copy
    of the student (no momentum at all).
    """
    if not (0.0 <= zeta <= 1.0):
        raise ParameterError("zeta must be in [0, 1]")
    if not momentum_params.same_architecture(student):
        raise ShapeError("momentum encoder must share the student architecture")
    for mu_p, th_p in zip(momentum_params.parameters(), student.parameters()):
        mu_p.value *= zeta
        mu_p.value += (1.0 - zeta) * th_p.value
    return momentum_params


def target_probs(target: EnsembleTarget, query_index: int,
                 anchor_indices) -> np.ndarray:
    """Normalize the target-matrix row over the anchors.

    Anchors whose public index equals the query's are dropped first: the
    ensembled self-similarity is a constant spike carrying no information
    about the neighborhood structure. Scaling the whole target matrix by
    any positive constant leaves the result unchanged.
    """
    anchor_indices = np.asarray(anchor_indices, dtype=np.int64)
    n = target.n
    if not (0 <= query_index < n):
        raise ParameterError(f"query index {query_index} outside [0, {n})")
    if anchor_indices.size == 0:
        raise ParameterError("anchor list is empty")
    if anchor_indices.min() < 0 or anchor_indices.max() >= n:
        raise ParameterError("anchor index outside the target matrix")
    kept = anchor_indices[anchor_indices != query_index]
    if kept.size == 0:
        raise DegenerateInputError(
            f"every anchor coincides with query {query_index}")
    row = target.entries[query_index, kept]
    return row / row.sum()


def _assert_unit(rows: np.ndarray, name: str) -> None:
    norms = np.sqrt((rows * rows).sum(axis=1))
    if norms.size and np.abs(norms - 1.0).max() > _UNIT_NORM_TOL:
        raise ParameterError(f"{name} must be unit-norm")


def student_probs(query_rep, anchor_reps, tau_s: float) -> Tensor:
    """Softmax over anchor dot products at the student temperature.

    ``query_rep`` may be a graph Tensor (one row per query) so gradients
    flow back into the student; anchors are momentum outputs and constant.
    """
    if tau_s <= 0.0:
        raise ParameterError("student temperature must be > 0")
    q = query_rep if isinstance(query_rep, Tensor) else ad.constant(query_rep)
    if q.value.ndim != 2:
        raise ShapeError("query representations must be 2-D (rows)")
    anchors = np.asarray(anchor_reps, dtype=np.float64)
    if anchors.ndim != 2 or anchors.shape[1] != q.value.shape[1]:
        raise ShapeError("anchors must be rows of the query dimension")
    _assert_unit(q.value, "query representations")
    _assert_unit(anchors, "anchor representations")
    logits = ad.mul_scalar(ad.matmul(q, ad.constant(anchors.T.copy())),
                           1.0 / tau_s)
    return ad.softmax_rows(logits)


def esd_loss(p: np.ndarray, q) -> Tensor:
    """KL(p || q), averaged over rows when given batches.

    ``p`` is the constant target distribution; ``q`` carries the tape. The
    student softmax cannot emit exact zeros where p is positive, but log is
    floored anyway so a pathological caller gets a huge loss, not NaN.
    """
    p = np.asarray(p, dtype=np.float64)
    qt = q if isinstance(q, Tensor) else ad.constant(q)
    if p.shape != qt.value.shape:
        raise ShapeError(f"p/q shape mismatch: {p.shape} vs {qt.value.shape}")
    if p.size == 0 or p.min() <= 0.0:
        raise ParameterError("target distribution must be strictly positive")
    rows = 1 if p.ndim == 1 else p.shape[0]
    entropy = float((p * np.log(p)).sum())
    cross = ad.weighted_sum(ad.log(qt), p)
    return ad.add_const(ad.mul_scalar(cross, -1.0 / rows), entropy / rows)


@dataclass
class DistillationState:
    """Mutable bundle the distillation loop owns."""

    student: EncoderParams
    momentum_encoder: EncoderParams
    queue: MomentumQueue
    target: EnsembleTarget

    def __post_init__(self):
        if not self.student.same_architecture(self.momentum_encoder):
            raise ShapeError("student and momentum encoder must match")


def _batched_kl(target: EnsembleTarget, query_rows: np.ndarray,
                anchor_idx: np.ndarray, similarity: Tensor,
                tau_s: float):
    """Mean KL over the batch with per-query self-anchor exclusion.

    ``similarity`` holds the raw query-anchor dot products. Self-anchors
    are excluded by masking their logits to -1e9, which zeroes them out of
    the softmax denominator exactly (the exponential underflows to 0.0), so
    each row equals the softmax over the kept anchors alone. Equivalent to
    composing target_probs / student_probs / esd_loss query by query, in
    one tape.

    Returns None when no query has a usable anchor.
    """
    bsz = query_rows.shape[0]
    m = anchor_idx.shape[0]
    mask = np.zeros((bsz, m))
    p_mat = np.zeros((bsz, m))
    valid = 0
    for pos, qi in enumerate(query_rows):
        self_hits = anchor_idx == int(qi)
        if self_hits.all():
            continue  # row unused: p stays zero
        valid += 1
        mask[pos, self_hits] = -1e9
        keep = np.flatnonzero(~self_hits)
        p_mat[pos, keep] = target_probs(target, int(qi), anchor_idx)
    if valid == 0:
        return None
    logits = ad.mul_scalar(similarity, 1.0 / tau_s)
    logits = ad.add(logits, ad.constant(mask))
    q = ad.softmax_rows(logits)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p_mat > 0.0, p_mat * np.log(np.where(p_mat > 0.0,
                                                              p_mat, 1.0)), 0.0)
    entropy = float(plogp.sum())
    cross = ad.weighted_sum(ad.log(q), p_mat)
    return ad.add_const(ad.mul_scalar(cross, -1.0 / valid), entropy / valid)


def distill(student_init: EncoderParams, target: EnsembleTarget,
            d_pub: Dataset, cfg: EsdConfig,
            aug: AugmentationConfig | None = None,
            seed: int = 0) -> tuple[EncoderParams, list[float]]:
    """Distill the ensemble target into a student encoder.

    Per iteration: draw a public mini-batch; the student encodes one
    augmented view, the momentum encoder an independently augmented view;
    the student's similarity distribution over the current queue anchors is
    pulled toward the target-matrix rows at the anchors' public indices via
    mean KL; then the momentum encoder is EMA-updated and its batch outputs
    are enqueued. Optimizer steps start only once the queue holds
    min(capacity, 2 * batch) anchors; softmaxes over a nearly empty anchor
    set are noise.

    Anchor indices are row positions within ``d_pub``, matching the
    row/column order the target matrix was built with.
    """
    if len(d_pub) == 0:
        raise ParameterError("public dataset is empty")
    if target.n != len(d_pub):
        raise ShapeError("target matrix size must equal the public set size")
    if aug is None:
        aug = identity_augmentation()
    if cfg.anchor_capacity > len(d_pub):
        log.warning("anchor capacity %d exceeds public set size %d",
                    cfg.anchor_capacity, len(d_pub))
    state = DistillationState(
        student=student_init.clone(),
        momentum_encoder=student_init.clone(),
        queue=MomentumQueue(cfg.anchor_capacity),
        target=target,
    )
    opt = Adam(state.student.parameters(), lr=cfg.lr)
    batch = min(cfg.batch_size, len(d_pub))
    warmup = min(cfg.anchor_capacity, 2 * batch)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([int(seed), int(epoch)])
        order = rng.permutation(len(d_pub))
        epoch_losses: list[float] = []
        for start in range(0, len(d_pub) - batch + 1, batch):
            rows = order[start:start + batch]
            x = d_pub.features[rows]
            student_view = augment(x, aug, rng)
            momentum_view = augment(x, aug, rng)
            anchor_idx = state.queue.indices()
            if anchor_idx.size:
                reps = encode(state.student, student_view, record_tape=True)
                sims = ad.matmul(reps,
                                 ad.constant(state.queue.representations().T.copy()))
                loss = _batched_kl(target, rows, anchor_idx, sims, cfg.tau_s)
                if loss is not None:
                    epoch_losses.append(loss.item())
                    if len(state.queue) >= warmup:
                        opt.zero_grad()
                        loss.backward()
                        opt.step()
            ema_update(state.momentum_encoder, state.student, cfg.momentum)
            momentum_reps = encode(state.momentum_encoder, momentum_view)
            state.queue.push(rows, momentum_reps)
        losses.append(float(np.mean(epoch_losses)) if epoch_losses
                      else float("nan"))
    return state.student, losses
