"""Two-tower linear encoder over hashed features.

Each tower is an independent dense projection from the hashed feature space
to d dimensions; the retrieval score is the inner product of the question
and table embeddings.  Mode flags select the ablations: ``use_structure``
toggles the structural hash channels on the table side (text-only baseline
when off) and ``schema_only`` restricts table tokens to title/section/header.

Checkpoint layout (little-endian):
    magic "TWOTOWER" | version u32 | d u32 | feature_dims u64 | flags u32
    | q_tower f32[d*dims] row-major | q_bias f32[d]
    | t_tower f32[d*dims] row-major | t_bias f32[d]
flags: bit0 = use_structure, bit1 = schema_only.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Question, Table
from .text import SparseVector, hash_features, question_tokens, flatten_table

_MAGIC = b"TWOTOWER"
_VERSION = 1


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed; messages carry the offset."""


@dataclass
class EncoderParams:
    q_tower: np.ndarray  # (d, feature_dims) float64
    q_bias: np.ndarray  # (d,)
    t_tower: np.ndarray
    t_bias: np.ndarray
    use_structure: bool = True
    schema_only: bool = False

    def __post_init__(self) -> None:
        if self.q_tower.shape != self.t_tower.shape:
            raise ValueError("towers must share (d, feature_dims)")
        if self.q_bias.shape != (self.d,) or self.t_bias.shape != (self.d,):
            raise ValueError("bias length must equal d")

    @property
    def d(self) -> int:
        return self.q_tower.shape[0]

    @property
    def feature_dims(self) -> int:
        return self.q_tower.shape[1]

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            q_tower=self.q_tower.copy(),
            q_bias=self.q_bias.copy(),
            t_tower=self.t_tower.copy(),
            t_bias=self.t_bias.copy(),
            use_structure=self.use_structure,
            schema_only=self.schema_only,
        )


def init_params(
    d: int,
    feature_dims: int,
    seed: int = 0,
    use_structure: bool = True,
    schema_only: bool = False,
) -> EncoderParams:
    """Towers i.i.d. uniform in +-1/sqrt(feature_dims); biases start at zero."""
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(feature_dims)
    return EncoderParams(
        q_tower=rng.uniform(-scale, scale, size=(d, feature_dims)),
        q_bias=np.zeros(d),
        t_tower=rng.uniform(-scale, scale, size=(d, feature_dims)),
        t_bias=np.zeros(d),
        use_structure=use_structure,
        schema_only=schema_only,
    )


def question_features(question: Question | str, feature_dims: int) -> SparseVector:
    """Question-side features: plain token hashes, no structural channels."""
    text = question.text if isinstance(question, Question) else question
    return hash_features(question_tokens(text), dims=feature_dims, use_structure=False)


def table_features(
    table: Table, feature_dims: int, use_structure: bool = True, schema_only: bool = False
) -> SparseVector:
    mode = "schema_only" if schema_only else "full"
    return hash_features(flatten_table(table, mode), dims=feature_dims, use_structure=use_structure)


def project(tower: np.ndarray, bias: np.ndarray, features: SparseVector) -> np.ndarray:
    """Dense projection of a sparse feature vector: tower @ x + bias."""
    if features.nnz == 0:
        return bias.copy()
    return tower[:, features.indices] @ features.values + bias


def encode_question(params: EncoderParams, question: Question | str) -> np.ndarray:
    return project(params.q_tower, params.q_bias, question_features(question, params.feature_dims))


def encode_table(params: EncoderParams, table: Table) -> np.ndarray:
    feats = table_features(
        table, params.feature_dims, params.use_structure, params.schema_only
    )
    return project(params.t_tower, params.t_bias, feats)


def ret_score(h_q: np.ndarray, h_t: np.ndarray) -> float:
    """Inner-product relevance score."""
    if h_q.shape != h_t.shape:
        raise ValueError(f"embedding shapes differ: {h_q.shape} vs {h_t.shape}")
    return float(np.dot(h_q, h_t))


def save_checkpoint(params: EncoderParams, path: str | Path) -> None:
    flags = (1 if params.use_structure else 0) | (2 if params.schema_only else 0)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IIQI", _VERSION, params.d, params.feature_dims, flags))
        for arr in (params.q_tower, params.q_bias, params.t_tower, params.t_bias):
            fh.write(arr.astype("<f4").tobytes(order="C"))


def _read_exact(fh, n: int, what: str) -> bytes:
    offset = fh.tell()
    raw = fh.read(n)
    if len(raw) != n:
        raise CheckpointError(
            f"truncated checkpoint: expected {n} bytes for {what} at offset {offset}, "
            f"got {len(raw)}"
        )
    return raw


def load_checkpoint(path: str | Path) -> EncoderParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise CheckpointError(f"{path}: bad magic at offset 0 (not a checkpoint)")
        version, d, feature_dims, flags = struct.unpack(
            "<IIQI", _read_exact(fh, 20, "header")
        )
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        if d < 1 or feature_dims < 1:
            raise CheckpointError(f"{path}: invalid dimensions d={d} dims={feature_dims}")

        def block(shape: tuple[int, ...], what: str) -> np.ndarray:
            count = int(np.prod(shape))
            raw = _read_exact(fh, 4 * count, what)
            return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)

        q_tower = block((d, feature_dims), "question tower")
        q_bias = block((d,), "question bias")
        t_tower = block((d, feature_dims), "table tower")
        t_bias = block((d,), "table bias")
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes at offset {fh.tell() - 1}")
    return EncoderParams(
        q_tower=q_tower, q_bias=q_bias, t_tower=t_tower, t_bias=t_bias,
        use_structure=bool(flags & 1), schema_only=bool(flags & 2),
    )
