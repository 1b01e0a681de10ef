"""MLP encoder producing L2-normalized representations.

One parameter vessel serves every role in the protocol: client model,
distillation student, and momentum encoder are all `EncoderParams` of the
same class, possibly with different layer widths per client.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataFormatError, DegenerateInputError, ParameterError, ShapeError

_MAGIC = b"FENC"
_ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class EncoderConfig:
    layer_sizes: tuple[int, ...]
    activation: str = "relu"
    init_seed: int = 0

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ParameterError("layer_sizes needs at least input and output dims")
        if any(s < 1 for s in sizes):
            raise ParameterError("layer sizes must be >= 1")
        if sizes[-1] < 2:
            raise ParameterError("output dimension must be >= 2")
        if self.activation not in _ACTIVATIONS:
            raise ParameterError(f"activation must be one of {_ACTIVATIONS}")

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class EncoderParams:
    """Per-layer weight/bias leaves. Weights are (fan_in, fan_out) so the
    forward pass is ``h @ W + b``."""

    weights: list[Tensor]
    biases: list[Tensor]
    config: EncoderConfig

    def parameters(self) -> list[Tensor]:
        out: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def clone(self) -> "EncoderParams":
        return EncoderParams(
            [Tensor(w.value.copy()) for w in self.weights],
            [Tensor(b.value.copy()) for b in self.biases],
            self.config,
        )

    def same_architecture(self, other: "EncoderParams") -> bool:
        return (self.config.layer_sizes == other.config.layer_sizes
                and self.config.activation == other.config.activation)


def init_encoder(cfg: EncoderConfig) -> EncoderParams:
    """Seeded Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(cfg.init_seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(cfg.layer_sizes[:-1], cfg.layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out))))
        biases.append(Tensor(np.zeros((1, fan_out))))
    return EncoderParams(weights, biases, cfg)


def encode(params: EncoderParams, batch: np.ndarray, record_tape: bool = False):
    """Forward pass ending in row-wise L2 normalization.

    Returns a (batch_size, out_dim) numpy array of unit-norm rows, or the
    equivalent graph Tensor when ``record_tape`` is set. Both paths apply
    the identical operation sequence, so their values agree bitwise.
    """
    x = np.ascontiguousarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.config.in_dim:
        raise ShapeError(
            f"batch must be (n, {params.config.in_dim}), got {x.shape}")
    act = params.config.activation
    n_layers = len(params.weights)
    if record_tape:
        h: Tensor = ad.constant(x)
        for i, (w, b) in enumerate(zip(params.weights, params.biases)):
            h = ad.add(ad.matmul(h, w), b)
            if i < n_layers - 1:
                h = ad.relu(h) if act == "relu" else ad.tanh(h)
        return ad.normalize_rows(h)
    h_np = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h_np = h_np @ w.value + b.value
        if i < n_layers - 1:
            h_np = np.maximum(h_np, 0.0) if act == "relu" else np.tanh(h_np)
    norms = np.sqrt((h_np * h_np).sum(axis=1, keepdims=True))
    if (norms == 0.0).any():
        i = int(np.flatnonzero(norms[:, 0] == 0.0)[0])
        err = DegenerateInputError(
            f"sample {i} maps to the zero vector; representation collapsed")
        err.row_index = i
        raise err
    return h_np / norms


def param_count(params: EncoderParams) -> int:
    return params.param_count()


# ---------------------------------------------------------------------------
# binary snapshot format
# ---------------------------------------------------------------------------
# header: magic(4) | activation u32 | init_seed i64 | n_sizes u32 | sizes u32...
# payload: per layer, weight entries row-major then bias entries, float64 LE.

def snapshot_header_len(cfg: EncoderConfig) -> int:
    return 4 + 4 + 8 + 4 + 4 * len(cfg.layer_sizes)


def serialize_params(params: EncoderParams) -> bytes:
    cfg = params.config
    head = bytearray(_MAGIC)
    head += struct.pack("<I", _ACTIVATIONS.index(cfg.activation))
    head += struct.pack("<q", cfg.init_seed)
    head += struct.pack("<I", len(cfg.layer_sizes))
    for s in cfg.layer_sizes:
        head += struct.pack("<I", s)
    payload = bytearray()
    for w, b in zip(params.weights, params.biases):
        payload += np.ascontiguousarray(w.value).astype("<f8").tobytes()
        payload += np.ascontiguousarray(b.value).astype("<f8").tobytes()
    return bytes(head) + bytes(payload)


def deserialize_params(data: bytes) -> EncoderParams:
    if len(data) < 4 or data[:4] != _MAGIC:
        raise DataFormatError("bad magic; not an encoder snapshot")
    try:
        off = 4
        (act_code,) = struct.unpack_from("<I", data, off); off += 4
        (init_seed,) = struct.unpack_from("<q", data, off); off += 8
        (n_sizes,) = struct.unpack_from("<I", data, off); off += 4
        sizes = struct.unpack_from(f"<{n_sizes}I", data, off)
        off += 4 * n_sizes
    except struct.error as exc:
        raise DataFormatError(f"truncated snapshot header ({exc})")
    if act_code >= len(_ACTIVATIONS):
        raise DataFormatError(f"unknown activation code {act_code}")
    cfg = EncoderConfig(tuple(sizes), _ACTIVATIONS[act_code], int(init_seed))
    expected = sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:])) * 8
    if len(data) - off != expected:
        raise DataFormatError(
            f"payload length {len(data) - off} does not match architecture "
            f"(expected {expected})")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=off)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(Tensor(w.reshape(fan_in, fan_out).copy()))
        biases.append(Tensor(b.reshape(1, fan_out).copy()))
    return EncoderParams(weights, biases, cfg)


def save_params(params: EncoderParams, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_params(params))


def load_params(path: str) -> EncoderParams:
    with open(path, "rb") as fh:
        return deserialize_params(fh.read())


# ---------------------------------------------------------------------------
# linear classification head (supervised baseline and linear probing)
# ---------------------------------------------------------------------------

@dataclass
class LinearHead:
    weight: Tensor  # (d, n_classes)
    bias: Tensor    # (1, n_classes)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> "LinearHead":
        return LinearHead(Tensor(self.weight.value.copy()),
                          Tensor(self.bias.value.copy()))

    def logits(self, reps: np.ndarray) -> np.ndarray:
        return reps @ self.weight.value + self.bias.value

    def logits_tape(self, reps: Tensor) -> Tensor:
        return ad.add(ad.matmul(reps, self.weight), self.bias)


def init_linear_head(d: int, n_classes: int, seed: int = 0) -> LinearHead:
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / (d + n_classes))
    return LinearHead(
        Tensor(rng.uniform(-bound, bound, size=(d, n_classes))),
        Tensor(np.zeros((1, n_classes))),
    )
