"""Linear probing: freeze the encoder, train a softmax head on top.

The probe is the representation-quality metric everywhere in this package;
it never touches encoder parameters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .encoder import EncoderParams, encode, init_linear_head
from .errors import ParameterError
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass
class ProbeConfig:
    """Head training is a convex softmax regression on frozen features, so
    the default learning rate is much hotter than the encoder ones; small
    probe sets only see a handful of optimizer steps otherwise."""

    epochs: int = 100
    lr: float = 0.05
    batch_size: int = 128
    train_fraction: float = 0.8  # used by callers that split a single dataset
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0.0:
            raise ParameterError("invalid probe config")
        if not (0.0 < self.train_fraction < 1.0):
            raise ParameterError("train_fraction must be in (0, 1)")


def linear_probe(encoder_params: EncoderParams, train: Dataset, test: Dataset,
                 cfg: ProbeConfig) -> float:
    """Top-1 test accuracy of a linear head trained on frozen representations."""
    if len(train) == 0 or len(test) == 0:
        raise ParameterError("probe needs nonempty train and test sets")
    if train.n_classes != test.n_classes:
        raise ParameterError("train/test class counts differ")
    missing = set(np.unique(test.labels)) - set(np.unique(train.labels))
    if missing:
        log.warning("classes %s appear in test but not in probe-train",
                    sorted(int(c) for c in missing))
    reps_train = encode(encoder_params, train.features)
    reps_test = encode(encoder_params, test.features)
    head = init_linear_head(reps_train.shape[1], train.n_classes, cfg.seed)
    opt = Adam(head.parameters(), lr=cfg.lr)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([int(cfg.seed), int(epoch)])
        order = rng.permutation(len(train))
        for start in range(0, len(train), cfg.batch_size):
            rows = order[start:start + cfg.batch_size]
            logits = head.logits_tape(ad.constant(reps_train[rows]))
            loss = ad.cross_entropy_from_logits(logits, train.labels[rows])
            opt.zero_grad()
            loss.backward()
            opt.step()
    preds = head.logits(reps_test).argmax(axis=1)
    return float(np.mean(preds == test.labels))
