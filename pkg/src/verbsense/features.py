"""Image feature storage, word embedding tables, and phrase vectors.

Image features live in a small binary container (magic ``MSFV``) holding a
row-major float32 matrix: one fixed-length vector per image.  Word
embeddings use the common text interchange format: a ``<count> <dim>``
header line followed by one ``token v1 ... vdim`` line per word.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"MSFV"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, count, dim


class FeatureFileError(ValueError):
    """Raised for malformed binary feature files."""


class EmbeddingFileError(ValueError):
    """Raised for malformed embedding text files."""


@dataclass(frozen=True)
class FeatureStore:
    """An id-indexed matrix of image feature vectors (float32, row-major)."""

    data: np.ndarray  # shape (count, dim)

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def row(self, index: int) -> np.ndarray:
        return self.data[index]


@dataclass(frozen=True)
class EmbeddingTable:
    """token -> dense vector map, all vectors of one fixed dimension."""

    dim: int
    entries: dict[str, np.ndarray]

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def __len__(self) -> int:
        return len(self.entries)


@dataclass(frozen=True)
class PhraseVector:
    """Mean of the in-vocabulary token embeddings of a phrase.

    ``n_known`` counts the tokens that were actually averaged; an all-OOV or
    empty phrase yields the zero vector with ``n_known == 0``.
    """

    values: np.ndarray
    n_known: int


def load_feature_store(path) -> FeatureStore:
    """Read a binary feature file.

    Layout (little-endian): ``MSFV`` magic, u32 format version (=1), u32 row
    count, u32 dimension, then count*dim IEEE-754 binary32 values row-major.
    Raises :class:`FeatureFileError` on a bad magic, a truncated payload, or
    any non-finite value (reported with its row and column).
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path}: file too short for header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r} (expected {MAGIC!r})")
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"{path}: unsupported format version {version}")
    if dim < 1:
        raise FeatureFileError(f"{path}: dimension must be >= 1, got {dim}")
    expected = count * dim * 4
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise FeatureFileError(
            f"{path}: truncated payload ({len(payload)} bytes, expected {expected})"
        )
    if len(payload) > expected:
        raise FeatureFileError(
            f"{path}: trailing bytes after payload ({len(payload) - expected} extra)"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    bad = ~np.isfinite(data)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise FeatureFileError(f"{path}: non-finite value at row {r}, col {c}")
    return FeatureStore(data=np.ascontiguousarray(data, dtype=np.float32))


def write_feature_store(store: FeatureStore, path) -> None:
    """Write the binary feature format; bit-exact round trip with the loader."""
    data = np.ascontiguousarray(store.data, dtype="<f4")
    with Path(path).open("wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, store.count, store.dim))
        fh.write(data.tobytes())


def load_embedding_table(path) -> EmbeddingTable:
    """Read a text-format embedding file.

    First line is ``<count> <dim>``; each following line is a token and dim
    space-separated decimal floats. Later duplicates of a token overwrite
    earlier ones, so the resulting table may hold fewer distinct tokens than
    the header announced. Raises :class:`EmbeddingFileError` on a malformed
    header, a wrong number of components on a line, or a line-count mismatch.
    """
    path = Path(path)
    entries: dict[str, np.ndarray] = {}
    with path.open("r", encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 2:
            raise EmbeddingFileError(f"{path}:1: malformed header {header.strip()!r}")
        try:
            count, dim = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise EmbeddingFileError(f"{path}:1: malformed header {header.strip()!r}") from exc
        if count < 0 or dim < 1:
            raise EmbeddingFileError(f"{path}:1: invalid header counts {count} {dim}")
        n_lines = 0
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            fields = line.rstrip("\n").split(" ")
            if len(fields) != dim + 1:
                raise EmbeddingFileError(
                    f"{path}:{lineno}: expected {dim} components, got {len(fields) - 1}"
                )
            token = fields[0]
            try:
                vec = np.array([float(x) for x in fields[1:]], dtype=np.float32)
            except ValueError as exc:
                raise EmbeddingFileError(f"{path}:{lineno}: non-numeric component") from exc
            if not np.isfinite(vec).all():
                raise EmbeddingFileError(f"{path}:{lineno}: non-finite component")
            entries[token] = vec
            n_lines += 1
    if n_lines != count:
        raise EmbeddingFileError(
            f"{path}: header announced {count} vectors but file has {n_lines}"
        )
    return EmbeddingTable(dim=dim, entries=entries)


def write_embedding_table(table: EmbeddingTable, path) -> None:
    """Write the text embedding format (tokens in insertion order)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(f"{len(table.entries)} {table.dim}\n")
        for token, vec in table.entries.items():
            comps = " ".join(repr(float(x)) for x in vec)
            fh.write(f"{token} {comps}\n")


def embed_phrase(phrase: str, table: EmbeddingTable) -> PhraseVector:
    """Average the embeddings of a phrase's in-vocabulary tokens.

    The phrase is lowercased and whitespace-tokenized. Out-of-vocabulary
    tokens are skipped and excluded from the averaging count, so rare words
    do not shrink the representation toward zero. Total function: an empty
    or all-OOV phrase maps to the zero vector.
    """
    tokens = phrase.lower().split()
    known = [table.entries[t] for t in tokens if t in table.entries]
    if not known:
        return PhraseVector(values=np.zeros(table.dim, dtype=np.float32), n_known=0)
    mean = np.mean(np.stack(known).astype(np.float64), axis=0)
    return PhraseVector(values=mean.astype(np.float32), n_known=len(known))
