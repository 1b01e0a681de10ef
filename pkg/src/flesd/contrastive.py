"""Client-side training: contrastive (NT-Xent), supervised baseline, and the
proximal-regularized variant.

The contrastive loss is the symmetric in-batch form: both augmented views
act as anchors and the negatives for an anchor are the other 2B-2 views of
the joint batch. A one-sided variant (anchor view against the B views of
the opposite side only) is kept as a plain-numpy oracle for tests.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import AugmentationConfig, Dataset, augment, identity_augmentation
from .encoder import EncoderParams, LinearHead, encode
from .errors import ParameterError, ShapeError
from .optim import Adam

log = logging.getLogger(__name__)

_UNIT_NORM_TOL = 1e-6


@dataclass
class ContrastiveConfig:
    temperature: float = 0.4
    batch_size: int = 128
    epochs: int = 1
    lr: float = 1e-3
    aug: AugmentationConfig = field(default_factory=identity_augmentation)

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ParameterError("temperature must be > 0")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2 (need in-batch negatives)")
        if self.epochs < 0 or self.lr <= 0.0:
            raise ParameterError("epochs must be >= 0 and lr > 0")


@dataclass
class SupervisedConfig:
    batch_size: int = 128
    epochs: int = 1
    lr: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0.0:
            raise ParameterError("invalid supervised training config")


@dataclass
class ProxConfig:
    prox_mu: float = 0.0

    def __post_init__(self):
        if self.prox_mu < 0.0:
            raise ParameterError("prox_mu must be >= 0")


def _check_unit_rows(value: np.ndarray, name: str) -> None:
    norms = np.sqrt((value * value).sum(axis=1))
    if np.abs(norms - 1.0).max() > _UNIT_NORM_TOL:
        raise ParameterError(f"{name} rows must be unit-norm")


def info_nce_loss(reps_a, reps_b, temperature: float) -> Tensor:
    """Symmetric in-batch contrastive loss over 2B unit-norm views.

    Row i of ``reps_a`` and row i of ``reps_b`` are the positive pair; every
    other view in the joint batch is a negative. With all views identical
    the loss is exactly ln(2B - 1).
    """
    if temperature <= 0.0:
        raise ParameterError("temperature must be > 0")
    a = reps_a if isinstance(reps_a, Tensor) else ad.constant(reps_a)
    b = reps_b if isinstance(reps_b, Tensor) else ad.constant(reps_b)
    if a.value.shape != b.value.shape:
        raise ShapeError("view batches must have identical shape")
    bsz = a.value.shape[0]
    if bsz < 2:
        raise ParameterError("need batch size >= 2 for in-batch negatives")
    _check_unit_rows(a.value, "reps_a")
    _check_unit_rows(b.value, "reps_b")
    z = ad.concat_rows(a, b)
    logits = ad.mul_scalar(ad.matmul(z, ad.transpose(z)), 1.0 / temperature)
    mask = np.zeros((2 * bsz, 2 * bsz))
    np.fill_diagonal(mask, -1e9)  # self-similarity never counts
    logits = ad.add(logits, ad.constant(mask))
    logp = ad.log_softmax_rows(logits)
    positives = np.concatenate([np.arange(bsz) + bsz, np.arange(bsz)])
    return ad.mul_scalar(ad.mean_all(ad.pick_per_row(logp, positives)), -1.0)


def info_nce_loss_one_sided(reps_a: np.ndarray, reps_b: np.ndarray,
                            temperature: float) -> float:
    """One-sided oracle: anchor a_i, positive b_i, negatives b_m (m != i)."""
    if temperature <= 0.0:
        raise ParameterError("temperature must be > 0")
    a = np.asarray(reps_a, dtype=np.float64)
    b = np.asarray(reps_b, dtype=np.float64)
    if a.shape != b.shape or a.shape[0] < 2:
        raise ParameterError("need matching view batches with B >= 2")
    logits = (a @ b.T) / temperature
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - np.diag(logits)))


def proximal_penalty(params: EncoderParams, anchor: EncoderParams,
                     mu: float) -> Tensor:
    """(mu / 2) * squared L2 distance between two parameter sets."""
    if not params.same_architecture(anchor):
        raise ShapeError("proximal anchor must share the architecture")
    total: Tensor | None = None
    for p, ref in zip(params.parameters(), anchor.parameters()):
        term = ad.sum_squares(ad.sub(p, ad.constant(ref.value)))
        total = term if total is None else ad.add(total, term)
    return ad.mul_scalar(total, 0.5 * mu)


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(epoch)])


def train_simclr_local(params: EncoderParams, shard: Dataset,
                       cfg: ContrastiveConfig,
                       prox: ProxConfig | None = None,
                       global_params: EncoderParams | None = None,
                       seed: int = 0) -> tuple[EncoderParams, list[float]]:
    """Contrastive training on one client shard.

    Per epoch: shuffle, drop the last incomplete batch (keeps the negative
    count constant), make two augmented views, one Adam step per batch on
    the contrastive loss plus an optional proximal pull toward
    ``global_params``. Returns the updated params and per-epoch mean losses.
    """
    if len(shard) == 0:
        raise ParameterError("cannot train on an empty shard")
    batch_size = cfg.batch_size
    if batch_size > len(shard):
        batch_size = len(shard)
        log.warning("batch_size clamped to shard size %d", batch_size)
    if batch_size < 2:
        raise ParameterError("shard too small for contrastive batches")
    use_prox = prox is not None and prox.prox_mu > 0.0
    if use_prox and global_params is None:
        raise ParameterError("proximal training needs the global parameters")
    opt = Adam(params.parameters(), lr=cfg.lr)
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        rng = _epoch_rng(seed, epoch)
        order = rng.permutation(len(shard))
        batch_losses: list[float] = []
        for start in range(0, len(shard) - batch_size + 1, batch_size):
            rows = order[start:start + batch_size]
            x = shard.features[rows]
            view_a = augment(x, cfg.aug, rng)
            view_b = augment(x, cfg.aug, rng)
            reps_a = encode(params, view_a, record_tape=True)
            reps_b = encode(params, view_b, record_tape=True)
            loss = info_nce_loss(reps_a, reps_b, cfg.temperature)
            if use_prox:
                loss = ad.add(loss, proximal_penalty(params, global_params,
                                                     prox.prox_mu))
            opt.zero_grad()
            loss.backward()
            opt.step()
            batch_losses.append(loss.item())
        losses.append(float(np.mean(batch_losses)))
    return params, losses


def train_supervised_local(params: EncoderParams, head: LinearHead,
                           shard: Dataset, cfg: SupervisedConfig,
                           seed: int = 0
                           ) -> tuple[EncoderParams, LinearHead, list[float]]:
    """Supervised baseline: encoder plus linear head on cross-entropy.

    A single-class shard is a legitimate input (the extreme heterogeneity
    regime); training then just drives the head toward that class.
    """
    if len(shard) == 0:
        raise ParameterError("cannot train on an empty shard")
    opt = Adam(params.parameters() + head.parameters(), lr=cfg.lr)
    accuracies: list[float] = []
    for epoch in range(cfg.epochs):
        rng = _epoch_rng(seed, epoch)
        order = rng.permutation(len(shard))
        for start in range(0, len(shard), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            reps = encode(params, shard.features[rows], record_tape=True)
            logits = head.logits_tape(reps)
            loss = ad.cross_entropy_from_logits(logits, shard.labels[rows])
            opt.zero_grad()
            loss.backward()
            opt.step()
        preds = head.logits(encode(params, shard.features)).argmax(axis=1)
        accuracies.append(float(np.mean(preds == shard.labels)))
    return params, head, accuracies
