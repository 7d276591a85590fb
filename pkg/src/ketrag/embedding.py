"""Embedding providers, similarity measures and the embedding store.

Hash-projection rule (the offline test provider)
------------------------------------------------
For a text ``t`` and dimension ``d``::

    seed = little-endian uint64 of the first 8 bytes of sha256(utf8(t))
    v    = numpy.random.default_rng(seed).standard_normal(d)
    v    = v / ||v||_2

The vector depends only on the text, the dimension and numpy's PCG64
``standard_normal`` stream, so it is reproducible across runs and platforms.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .exceptions import EmbeddingBatchError, IndexCorruptError, KetRagError

logger = logging.getLogger(__name__)

_WORD_SPLIT = re.compile(r"\w+(?:[.'’\-]\w+)*")


class EmbeddingProvider(Protocol):
    name: str
    dim: int
    deterministic: bool

    def embed(self, texts: Sequence[str]) -> np.ndarray: ...


def _hash_seed(text: str) -> int:
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")


def _hash_vector(text: str, dim: int) -> np.ndarray:
    v = np.random.default_rng(_hash_seed(text)).standard_normal(dim)
    return v / np.linalg.norm(v)


class HashEmbedder:
    """Seeded hash-projection embedder; one pseudo-random unit vector per text."""

    deterministic = True

    def __init__(self, dim: int = 64):
        if dim < 1:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.name = f"hash-v1:{dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        if not len(texts):
            return np.zeros((0, self.dim))
        return np.stack([_hash_vector(t, self.dim) for t in texts])

    def __repr__(self):
        return f"HashEmbedder(dim={self.dim})"


class HashBagEmbedder:
    """Bag-of-words variant: the normalized sum of per-word hash vectors.

    Texts sharing words get correlated vectors, which makes offline demos
    behave like a (very) crude semantic embedder.
    """

    deterministic = True

    def __init__(self, dim: int = 64):
        self.dim = dim
        self.name = f"hash-bow-v1:{dim}"
        self._cache: dict[str, np.ndarray] = {}

    def _word(self, w: str) -> np.ndarray:
        v = self._cache.get(w)
        if v is None:
            v = self._cache[w] = _hash_vector(w, self.dim)
        return v

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, t in enumerate(texts):
            words = [m.group().lower() for m in _WORD_SPLIT.finditer(t)]
            if not words:
                out[i] = _hash_vector(t, self.dim)
                continue
            v = np.sum([self._word(w) for w in words], axis=0)
            n = np.linalg.norm(v)
            out[i] = v / n if n > 0 else _hash_vector(t, self.dim)
        return out

    def __repr__(self):
        return f"HashBagEmbedder(dim={self.dim})"


class RemoteEmbedder:
    """Embeddings from an OpenAI-compatible ``/v1/embeddings`` endpoint."""

    deterministic = False

    def __init__(self, gateway, dim: int = 1536):
        self.gateway = gateway
        self.dim = dim
        self.name = f"remote:{gateway.config.embedding_model}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        vectors, _ = self.gateway.embed(list(texts))
        arr = np.asarray(vectors, dtype=float)
        if arr.size:
            self.dim = arr.shape[1]
        return arr.reshape(len(texts), self.dim)


def get_provider(name: str, dim: int = 64, gateway=None) -> EmbeddingProvider:
    """Build a provider from a CLI/manifest name (``hash``, ``hash-bow``, ``remote``)."""
    base = name.split(":", 1)[0]
    if ":" in name and base != "remote":
        dim = int(name.split(":", 1)[1])
    if base in ("hash", "hash-v1"):
        return HashEmbedder(dim)
    if base in ("hash-bow", "hash-bow-v1"):
        return HashBagEmbedder(dim)
    if base == "remote":
        if gateway is None:
            raise KetRagError("the remote embedder needs a configured gateway")
        return RemoteEmbedder(gateway)
    raise KetRagError(f"unknown embedding provider {name!r}")


def embed_batch(provider: EmbeddingProvider, texts: Sequence[str], batch_size: int = 256) -> np.ndarray:
    """Embed ``texts`` in order-aligned batches.

    Raises :class:`EmbeddingBatchError` naming the input indices of every
    batch that failed.
    """
    texts = list(texts)
    if not texts:
        return np.zeros((0, provider.dim))
    parts = []
    failed: list[int] = []
    errors = []
    for a in range(0, len(texts), batch_size):
        batch = texts[a : a + batch_size]
        try:
            parts.append(np.asarray(provider.embed(batch), dtype=float))
        except KetRagError as exc:
            failed.extend(range(a, a + len(batch)))
            errors.append(str(exc))
    if failed:
        raise EmbeddingBatchError(f"{len(errors)} embedding batch(es) failed: {errors[0]}", failed)
    out = np.concatenate(parts, axis=0)
    if out.shape[0] != len(texts):
        raise KetRagError(f"provider returned {out.shape[0]} vectors for {len(texts)} texts")
    return out


def cosine(a, b) -> float:
    """Cosine similarity; a zero vector yields 0 with a logged warning."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        logger.warning("cosine of a zero vector; returning 0")
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def euclidean(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def mean_embedding(vectors) -> np.ndarray:
    vs = [np.asarray(v, dtype=float) for v in vectors]
    if not vs:
        raise ValueError("mean_embedding of an empty list")
    return np.mean(np.stack(vs), axis=0)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0:
        logger.warning("zero embedding vector left unnormalized")
        return v
    return v / n


class EmbeddingStore:
    """Key -> float32 vector map with a fixed dimension.

    Provider outputs are L2-normalized on insert. Aggregates such as keyword
    means are inserted with ``normalize=False`` and kept as computed.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self._keys: list[str] = []
        self._index: dict[str, int] = {}
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def __len__(self):
        return len(self._keys)

    def __contains__(self, key):
        return key in self._index

    @property
    def keys(self) -> list[str]:
        return list(self._keys)

    def add(self, key: str, vector, normalize: bool = True) -> None:
        v = np.asarray(vector, dtype=float).reshape(-1)
        if v.shape[0] != self.dim:
            raise ValueError(f"vector for {key!r} has dim {v.shape[0]}, store dim is {self.dim}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite embedding for {key!r}")
        if normalize:
            v = l2_normalize(v)
        row = v.astype("<f4")
        if key in self._index:
            self._rows[self._index[key]] = row
        else:
            self._index[key] = len(self._keys)
            self._keys.append(key)
            self._rows.append(row)
        self._matrix = None

    def add_many(self, keys: Sequence[str], vectors, normalize: bool = True) -> None:
        vectors = np.asarray(vectors)
        if len(keys) != len(vectors):
            raise ValueError("keys and vectors differ in length")
        for k, v in zip(keys, vectors):
            self.add(k, v, normalize=normalize)

    def get(self, key: str) -> np.ndarray:
        return self._rows[self._index[key]]

    def matrix(self, keys: Sequence[str] | None = None) -> np.ndarray:
        if self._matrix is None:
            self._matrix = np.stack(self._rows) if self._rows else np.zeros((0, self.dim), dtype="<f4")
        if keys is None:
            return self._matrix
        return self._matrix[[self._index[k] for k in keys]] if keys else np.zeros((0, self.dim), dtype="<f4")

    def save(self, bin_path, meta_path) -> None:
        """Write little-endian float32 rows plus a ``{dim, count, keys}`` JSON sidecar."""
        Path(bin_path).write_bytes(self.matrix().astype("<f4").tobytes())
        meta = {"dim": self.dim, "count": len(self._keys), "keys": self._keys}
        Path(meta_path).write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, bin_path, meta_path) -> "EmbeddingStore":
        try:
            meta = json.loads(Path(meta_path).read_text(encoding="utf-8"))
            dim, count, keys = int(meta["dim"]), int(meta["count"]), list(meta["keys"])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise IndexCorruptError(f"unreadable embedding sidecar {meta_path}: {exc}") from exc
        raw = Path(bin_path).read_bytes()
        if len(raw) != dim * count * 4 or len(keys) != count:
            raise IndexCorruptError(
                f"embedding payload has {len(raw)} bytes, expected {dim * count * 4} for {count}x{dim}"
            )
        mat = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
        store = cls(dim)
        store._keys = keys
        store._index = {k: i for i, k in enumerate(keys)}
        store._rows = [row.copy() for row in mat]
        return store

    def __eq__(self, other):
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self._keys == other._keys
            and self.matrix().tobytes() == other.matrix().tobytes()
        )
