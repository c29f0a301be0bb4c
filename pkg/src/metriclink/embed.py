"""Token and phrase vectors.

Word vectors come from a plain-text table (``vocab_size dim`` header, then
one ``token v1 ... vdim`` line per word).  Out-of-vocabulary tokens fall
back to hashed character n-gram buckets from a subword table, which is
stored in a small binary sidecar (see :func:`write_subword_table`).
A phrase vector is the sum of its token vectors.
"""

from __future__ import annotations

import logging
import string
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Optional, Sequence, TextIO

import numpy as np

from ._io import PathLike, open_binary, open_text

log = logging.getLogger(__name__)

SUBWORD_MAGIC = b"SUBW"
SUBWORD_VERSION = 1
_SUBWORD_HEADER = struct.Struct("<4sIIIBB")

DEFAULT_MIN_N = 3
DEFAULT_MAX_N = 6
DEFAULT_BUCKETS = 2_000_000

_PUNCT = string.punctuation


class EmbeddingError(ValueError):
    """Raised for malformed vector files."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and strip edge punctuation from each token."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok:
            tokens.append(tok)
    return tokens


@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray] = field(default_factory=dict)
    duplicates: int = 0

    def __contains__(self, token: str) -> bool:
        return token in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)


def parse_word_vectors(lines: Iterable[str]) -> EmbeddingTable:
    it = iter(lines)
    header = next(it, None)
    if header is None:
        raise EmbeddingError("line 1: missing 'vocab_size dim' header")
    try:
        vocab_size, dim = (int(x) for x in header.split())
    except ValueError:
        raise EmbeddingError(f"line 1: bad header {header.strip()!r}") from None
    if dim <= 0 or vocab_size < 0:
        raise EmbeddingError("line 1: vocab_size and dim must be positive")
    table = EmbeddingTable(dim)
    rows = 0
    for lineno, line in enumerate(it, 2):
        parts = line.rstrip("\r\n").rstrip(" ").split(" ")
        if len(parts) == 1 and not parts[0]:
            continue
        if len(parts) != dim + 1:
            raise EmbeddingError(f"line {lineno}: expected {dim} values, got {len(parts) - 1}")
        rows += 1
        token = parts[0]
        try:
            vec = np.array(parts[1:], dtype=np.float32)
        except ValueError:
            raise EmbeddingError(f"line {lineno}: non-numeric value") from None
        if not np.all(np.isfinite(vec)):
            raise EmbeddingError(f"line {lineno}: non-finite value")
        if token in table.vectors:
            table.duplicates += 1
            continue
        table.vectors[token] = vec
    if rows != vocab_size:
        raise EmbeddingError(f"header declares {vocab_size} vectors, file has {rows}")
    if table.duplicates:
        log.warning("%d duplicate tokens ignored (first occurrence kept)", table.duplicates)
    return table


def load_word_vectors(source: TextIO | PathLike) -> EmbeddingTable:
    if hasattr(source, "read"):
        return parse_word_vectors(source)
    with open_text(source) as f:
        return parse_word_vectors(f)


def write_word_vectors(table: EmbeddingTable, out: TextIO) -> None:
    out.write(f"{len(table.vectors)} {table.dim}\n")
    for token, vec in table.vectors.items():
        out.write(token + " " + " ".join(repr(float(x)) for x in vec) + "\n")


def fnv1a_32(data: bytes) -> int:
    h = 0x811C9DC5
    for byte in data:
        h ^= byte
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def char_ngrams(token: str, min_n: int = DEFAULT_MIN_N, max_n: int = DEFAULT_MAX_N) -> list[str]:
    """Character n-grams of ``<token>`` with lengths in [min_n, max_n]."""
    word = f"<{token}>"
    grams = []
    for n in range(min_n, max_n + 1):
        for i in range(len(word) - n + 1):
            grams.append(word[i : i + n])
    return grams


@dataclass
class SubwordTable:
    dim: int
    bucket_count: int
    min_n: int = DEFAULT_MIN_N
    max_n: int = DEFAULT_MAX_N
    word_vectors: dict[str, np.ndarray] = field(default_factory=dict)
    bucket_vectors: np.ndarray = None  # (bucket_count, dim) float32

    def __post_init__(self):
        if not 0 < self.min_n <= self.max_n:
            raise EmbeddingError(f"bad n-gram range {self.min_n}..{self.max_n}")
        if self.bucket_vectors is None:
            self.bucket_vectors = np.zeros((self.bucket_count, self.dim), dtype=np.float32)
        if self.bucket_vectors.shape != (self.bucket_count, self.dim):
            raise EmbeddingError("bucket array shape does not match header")

    def bucket(self, gram: str) -> int:
        return fnv1a_32(gram.encode("utf-8")) % self.bucket_count

    def ngram_vector(self, token: str) -> np.ndarray:
        out = np.zeros(self.dim)
        for gram in char_ngrams(token, self.min_n, self.max_n):
            out += self.bucket_vectors[self.bucket(gram)]
        return out


def write_subword_table(table: SubwordTable, out: BinaryIO) -> None:
    """Binary sidecar layout (little-endian)::

        magic "SUBW" | version u32 | dim u32 | bucket_count u32 | min_n u8 | max_n u8
        n_words u32
        n_words x (byte_len u32, UTF-8 bytes, dim x f32)
        bucket_count x dim x f32
    """
    out.write(
        _SUBWORD_HEADER.pack(
            SUBWORD_MAGIC, SUBWORD_VERSION, table.dim, table.bucket_count, table.min_n, table.max_n
        )
    )
    out.write(struct.pack("<I", len(table.word_vectors)))
    for word, vec in table.word_vectors.items():
        raw = word.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(np.asarray(vec, dtype="<f4").tobytes())
    out.write(np.ascontiguousarray(table.bucket_vectors, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise EmbeddingError("truncated subword file")
    return data


def read_subword_table(f: BinaryIO) -> SubwordTable:
    magic, version, dim, buckets, min_n, max_n = _SUBWORD_HEADER.unpack(_read_exact(f, _SUBWORD_HEADER.size))
    if magic != SUBWORD_MAGIC:
        raise EmbeddingError(f"bad magic {magic!r}")
    if version != SUBWORD_VERSION:
        raise EmbeddingError(f"unsupported subword version {version}")
    (n_words,) = struct.unpack("<I", _read_exact(f, 4))
    words = {}
    for _ in range(n_words):
        (length,) = struct.unpack("<I", _read_exact(f, 4))
        word = _read_exact(f, length).decode("utf-8")
        words[word] = np.frombuffer(_read_exact(f, 4 * dim), dtype="<f4").astype(np.float32)
    flat = np.frombuffer(_read_exact(f, 4 * dim * buckets), dtype="<f4")
    if f.read(1):
        raise EmbeddingError("trailing bytes after subword buckets")
    return SubwordTable(dim, buckets, min_n, max_n, words, flat.reshape(buckets, dim).astype(np.float32))


def load_subword_table(path: PathLike) -> SubwordTable:
    with open_binary(path) as f:
        return read_subword_table(f)


@dataclass
class Tables:
    """Word table plus optional subword fallback, as used for every lookup."""

    word: Optional[EmbeddingTable] = None
    subword: Optional[SubwordTable] = None

    def __post_init__(self):
        if self.word is None and self.subword is None:
            raise EmbeddingError("need a word table, a subword table, or both")
        if self.word is not None and self.subword is not None and self.word.dim != self.subword.dim:
            raise EmbeddingError(f"dimension mismatch: words {self.word.dim}, subwords {self.subword.dim}")

    @property
    def dim(self) -> int:
        return self.word.dim if self.word is not None else self.subword.dim


def embed_token(tables: Tables, token: str) -> np.ndarray:
    """64-bit vector for ``token``; unknown tokens without a subword table map to zeros."""
    if tables.word is not None and token in tables.word.vectors:
        return tables.word.vectors[token].astype(np.float64)
    sub = tables.subword
    if sub is None:
        return np.zeros(tables.dim)
    if token in sub.word_vectors:
        return sub.word_vectors[token].astype(np.float64)
    return sub.ngram_vector(token)


def embed_tokens(tables: Tables, tokens: Sequence[str]) -> np.ndarray:
    """Stack token vectors into an ``(len(tokens), dim)`` matrix."""
    out = np.zeros((len(tokens), tables.dim))
    for i, tok in enumerate(tokens):
        out[i] = embed_token(tables, tok)
    return out


def embed_phrase(tables: Tables, phrase: str | Sequence[str]) -> np.ndarray:
    """Sum of token vectors; accumulated in sorted token order so any permutation
    of the same tokens gives a bit-identical vector."""
    tokens = tokenize(phrase) if isinstance(phrase, str) else list(phrase)
    out = np.zeros(tables.dim)
    for tok in sorted(tokens):
        out += embed_token(tables, tok)
    return out
