"""Similarity matrices over the public dataset and their sharpened ensemble.

A client's geometric knowledge is summarized as the Gram matrix of its
unit-norm representations of the shared anchor corpus. Per-client matrices
are sharpened entrywise with exp(. / tau) and averaged; the result is
strictly positive and no longer a cosine matrix, which is exactly what the
distillation target normalization expects.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .encoder import EncoderParams, encode
from .errors import (
    DataFormatError,
    DegenerateInputError,
    ParameterError,
    ShapeError,
)

log = logging.getLogger(__name__)

MIN_SHARPEN_TEMPERATURE = 0.01  # exp(1/tau) overflows float64 near 0.0014
_REP_MAGIC = b"FREP"
REP_HEADER_LEN = 4 + 4 + 4 + 4 + 8  # magic, client id, d, N, tau slot


@dataclass
class RepresentationMatrix:
    """Unit-norm representation columns of the public dataset: (d, N)."""

    columns: np.ndarray
    source_client: int

    def __post_init__(self):
        self.columns = np.ascontiguousarray(self.columns, dtype=np.float64)
        if self.columns.ndim != 2:
            raise ShapeError("representation matrix must be 2-D")
        norms = np.sqrt((self.columns * self.columns).sum(axis=0))
        if norms.size and np.abs(norms - 1.0).max() > 1e-9:
            raise ParameterError("representation columns must be unit-norm")

    @property
    def d(self) -> int:
        return self.columns.shape[0]

    @property
    def n(self) -> int:
        return self.columns.shape[1]


@dataclass
class SimilarityMatrix:
    """Symmetric cosine Gram matrix with unit diagonal."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float64)
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ShapeError("similarity matrix must be square")
        if np.abs(e - e.T).max(initial=0.0) > 1e-9:
            raise ParameterError("similarity matrix must be symmetric")
        if e.size and np.abs(np.diag(e) - 1.0).max() > 1e-9:
            raise ParameterError("similarity diagonal must be 1")
        if e.size and (e.min() < -1.0 - 1e-9 or e.max() > 1.0 + 1e-9):
            raise ParameterError("similarity entries must lie in [-1, 1]")

    @property
    def n(self) -> int:
        return self.entries.shape[0]


@dataclass
class EnsembleTarget:
    """Strictly positive sharpened-and-averaged target matrix."""

    entries: np.ndarray
    target_temperature: float

    def __post_init__(self):
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float64)
        e = self.entries
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ShapeError("ensemble target must be square")
        if e.size and e.min() <= 0.0:
            raise ParameterError("ensemble target entries must be > 0")
        if np.abs(e - e.T).max(initial=0.0) > 1e-9 * max(1.0, e.max(initial=1.0)):
            raise ParameterError("ensemble target must be symmetric")

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def infer_representations(params: EncoderParams, d_pub: Dataset,
                          client_id: int = -1) -> RepresentationMatrix:
    """Encode the public dataset with clean (unaugmented) inputs."""
    if len(d_pub) == 0:
        raise ParameterError("public dataset is empty")
    try:
        reps = encode(params, d_pub.features)
    except DegenerateInputError as exc:
        row = getattr(exc, "row_index", None)
        sid = int(d_pub.ids[row]) if row is not None else "unknown"
        raise DegenerateInputError(
            f"public-set inference failed at sample id {sid}: {exc}")
    return RepresentationMatrix(reps.T.copy(), source_client=client_id)


def similarity_matrix(r: RepresentationMatrix) -> SimilarityMatrix:
    gram = r.columns.T @ r.columns
    gram = 0.5 * (gram + gram.T)  # kill float asymmetry from the product
    return SimilarityMatrix(gram)


def sharpen(m: SimilarityMatrix, target_temperature: float) -> EnsembleTarget:
    """Entrywise exp(entry / tau). The temperature floor keeps exp(1/tau)
    finite in double precision."""
    if target_temperature <= 0.0:
        raise ParameterError("target temperature must be > 0")
    if target_temperature < MIN_SHARPEN_TEMPERATURE:
        raise ParameterError(
            f"target temperature below the overflow floor "
            f"{MIN_SHARPEN_TEMPERATURE}")
    return EnsembleTarget(np.exp(m.entries / target_temperature),
                          target_temperature)


def ensemble(sharpened: list[EnsembleTarget]) -> EnsembleTarget:
    """Entrywise mean over the sampled clients' sharpened matrices."""
    if not sharpened:
        raise ParameterError("cannot ensemble an empty list")
    n = sharpened[0].n
    tau = sharpened[0].target_temperature
    for t in sharpened[1:]:
        if t.n != n:
            raise ParameterError("mixed matrix sizes in ensemble")
        if t.target_temperature != tau:
            raise ParameterError("mixed target temperatures in ensemble")
    total = np.zeros((n, n))
    for t in sharpened:
        total += t.entries
    return EnsembleTarget(total / len(sharpened), tau)


# ---------------------------------------------------------------------------
# snapshot format: what a client actually uploads is the (d, N) matrix
# ---------------------------------------------------------------------------
# header: magic(4) | client id i32 | d u32 | N u32 | tau f64 (NaN = unset)
# payload: float64 LE, column-major.

def rep_matrix_num_bytes(d: int, n: int) -> int:
    """Exact upload size for a (d, N) representation matrix."""
    return REP_HEADER_LEN + 8 * d * n


def serialize_representation_matrix(r: RepresentationMatrix) -> bytes:
    head = _REP_MAGIC + struct.pack("<iII d", r.source_client, r.d, r.n,
                                    float("nan"))
    payload = np.asfortranarray(r.columns).astype("<f8").tobytes(order="F")
    return head + payload


def deserialize_representation_matrix(data: bytes) -> RepresentationMatrix:
    if len(data) < 4 or data[:4] != _REP_MAGIC:
        raise DataFormatError("bad magic; not a representation snapshot")
    try:
        client_id, d, n, _tau = struct.unpack_from("<iII d", data, 4)
    except struct.error as exc:
        raise DataFormatError(f"truncated snapshot header ({exc})")
    if len(data) != rep_matrix_num_bytes(d, n):
        raise DataFormatError("payload length does not match header dims")
    cols = np.frombuffer(data, dtype="<f8", offset=REP_HEADER_LEN)
    cols = cols.reshape((d, n), order="F").copy()
    return RepresentationMatrix(cols, source_client=client_id)


def save_representation_matrix(r: RepresentationMatrix, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_representation_matrix(r))


def load_representation_matrix(path: str) -> RepresentationMatrix:
    with open(path, "rb") as fh:
        return deserialize_representation_matrix(fh.read())
