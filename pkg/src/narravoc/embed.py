"""Embedding production and storage.

Provides a deterministic stub text encoder (a stand-in for a real
vision-text tower), clip mean-pooling, batch matrix construction over a
vocabulary, and the NVEM binary matrix format.  All vectors are unit L2
norm so a dot product is a cosine similarity.

NVEM layout (little-endian): magic "NVEM", version u32=1, dim u32,
count u64, then a 32-byte SHA-256 of the vocabulary JSONL this matrix is
aligned to (all zeros when unbound), then count*dim float32 row-major.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateClip, EmptyClip, EncoderUnavailable, FormatError
from .vocab import Vocabulary

MAGIC = b"NVEM"
VERSION = 1
_HEADER = struct.Struct("<4sIIQ")
NORM_TOL = 1e-5

Encoder = Callable[[str], np.ndarray]


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray  # (count, dim) float32, unit rows
    vocab_sha: bytes = b"\x00" * 32

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise FormatError("matrix must be 2-D")

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    @property
    def count(self) -> int:
        return self.rows.shape[0]

    def check_norms(self) -> None:
        if self.count == 0:
            return
        norms = np.linalg.norm(self.rows, axis=1)
        if not np.all(np.abs(norms - 1.0) <= NORM_TOL):
            bad = int(np.argmax(np.abs(norms - 1.0)))
            raise FormatError(f"row {bad} is not unit norm ({norms[bad]:.6f})")


def normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateClip("zero vector cannot be normalized")
    return x / norms


def text_seed(text: str) -> int:
    """Stable 64-bit seed from a normalized text, identical across platforms."""
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stub_encode_text(text: str, dim: int = 64) -> np.ndarray:
    """Deterministic pseudo-random unit vector for a text.

    Seeds a counter-based generator (Philox) from a stable hash of the
    text, draws `dim` standard normals, and L2-normalizes.  Identical text
    always yields a bitwise-identical vector.
    """
    if dim < 8:
        raise ValueError("dim must be >= 8")
    rng = np.random.Generator(np.random.Philox(key=text_seed(text)))
    v = rng.standard_normal(dim).astype(np.float32)
    return normalize_rows(v)


def make_stub_encoder(dim: int = 64) -> Encoder:
    return lambda text: stub_encode_text(text, dim)


@dataclass
class ClipEmbedding:
    frames: np.ndarray  # (n_frames, dim), unit rows
    pooled: np.ndarray  # (dim,), unit


def encode_clip(frames: Sequence[np.ndarray] | np.ndarray) -> ClipEmbedding:
    """Pool frame embeddings into one unit clip vector (normalized mean)."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 1:
        frames = frames[None, :]
    if frames.shape[0] == 0:
        raise EmptyClip("clip has no frames")
    mean = frames.mean(axis=0)
    if np.linalg.norm(mean) == 0:
        raise DegenerateClip("frame mean is the zero vector")
    return ClipEmbedding(frames=frames, pooled=normalize_rows(mean))


def vocab_file_sha(path: str | Path) -> bytes:
    return hashlib.sha256(Path(path).read_bytes()).digest()


def build_matrix(vocab: Vocabulary, kind: str, encoder: Encoder, vocab_sha: bytes = b"\x00" * 32) -> EmbeddingMatrix:
    """Encode every entry of a kind into one matrix, row i = i-th entry of
    that kind in id order.  Encoder failures propagate with the entry id
    attached."""
    rows = []
    dim = None
    for eid in vocab.by_kind[kind]:
        text = vocab.entries[eid].text
        try:
            vec = np.asarray(encoder(text), dtype=np.float32)
        except Exception as exc:
            raise EncoderUnavailable(f"encoder failed on entry {eid} ({text!r}): {exc}") from exc
        if dim is None:
            dim = vec.shape[-1]
        rows.append(vec)
    if not rows:
        return EmbeddingMatrix(rows=np.zeros((0, dim or 0), dtype=np.float32), vocab_sha=vocab_sha)
    m = EmbeddingMatrix(rows=normalize_rows(np.stack(rows)), vocab_sha=vocab_sha)
    m.check_norms()
    return m


def save_matrix(m: EmbeddingMatrix, path: str | Path) -> None:
    path = Path(path)
    with path.open("wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, m.dim, m.count))
        f.write(m.vocab_sha)
        f.write(np.ascontiguousarray(m.rows, dtype="<f4").tobytes())


def load_matrix(path: str | Path, expect_vocab: str | Path | None = None) -> EmbeddingMatrix:
    """Read an NVEM file, verifying header, row count, and row norms.

    With `expect_vocab` set, the stored SHA-256 must match that JSONL file.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _HEADER.size + 32:
        raise FormatError("file too short for NVEM header")
    magic, version, dim, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if dim <= 0:
        raise FormatError("dim must be positive")
    sha = data[_HEADER.size : _HEADER.size + 32]
    body = data[_HEADER.size + 32 :]
    expected = count * dim * 4
    if len(body) != expected:
        raise FormatError("row count mismatch")
    rows = np.frombuffer(body, dtype="<f4").reshape(count, dim).copy()
    m = EmbeddingMatrix(rows=rows, vocab_sha=sha)
    m.check_norms()
    if expect_vocab is not None and sha != vocab_file_sha(expect_vocab):
        raise FormatError("matrix is not aligned to this vocabulary file")
    return m
