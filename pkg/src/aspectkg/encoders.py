"""Embedding providers and the vector math shared by every similarity feature."""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Protocol

import numpy as np

TEXT_PREFIX = "t:"
IMAGE_PREFIX = "i:"


def as_vector(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty 1-d vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def cosine(u, v) -> float:
    """Cosine similarity; 0.0 when either vector has zero norm."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu = math.sqrt(float(u @ u))
    nv = math.sqrt(float(v @ v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return max(-1.0, min(1.0, float(u @ v) / (nu * nv)))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine between rows of ``a`` and rows of ``b`` (zero rows give 0)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    na = np.where(na == 0, np.inf, na)
    nb = np.where(nb == 0, np.inf, nb)
    return np.clip((a / na[:, None]) @ (b / nb[:, None]).T, -1.0, 1.0)


def top_k_by_similarity(query, candidates, k: int) -> list[tuple[str, float]]:
    """Rank ``(id, vector)`` candidates by cosine to ``query``; ties go to the smaller id."""
    if k <= 0 or not candidates:
        return []
    scored = [(cid, cosine(query, vec)) for cid, vec in candidates]
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


class EncoderProvider(Protocol):
    text_dim: int
    image_dim: int

    def encode_text(self, text: str) -> np.ndarray: ...

    def encode_image(self, image_id: str) -> np.ndarray: ...


class MockEncoder:
    """Deterministic pseudo-random unit vectors keyed by (seed, modality, input)."""

    def __init__(self, seed: int = 0, dim: int = 64, image_dim: int | None = None):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.seed = seed
        self.text_dim = dim
        self.image_dim = image_dim or dim
        self._cache: dict[str, np.ndarray] = {}

    def _vector(self, key: str, dim: int) -> np.ndarray:
        v = self._cache.get(key)
        if v is None:
            digest = hashlib.blake2b(f"{self.seed}\x00{key}".encode("utf-8"), digest_size=16).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            v = rng.standard_normal(dim)
            v /= np.linalg.norm(v)
            v.setflags(write=False)
            self._cache[key] = v
        return v

    def encode_text(self, text: str) -> np.ndarray:
        return self._vector(TEXT_PREFIX + text, self.text_dim)

    def encode_image(self, image_id: str) -> np.ndarray:
        return self._vector(IMAGE_PREFIX + image_id, self.image_dim)


class FileEncoder:
    """Vectors read from a JSONL file of ``{"id", "vec"}`` records.

    Text vectors are stored under ``t:<text>`` and image vectors under
    ``i:<image_id>``; unprefixed ids serve both lookups.  An optional
    ``fallback`` provider answers ids missing from the file.
    """

    def __init__(self, path=None, fallback: EncoderProvider | None = None, vectors: dict | None = None):
        self.path = Path(path) if path is not None else None
        self.fallback = fallback
        table = dict(vectors or {})
        if self.path is not None:
            table.update(read_embeddings(self.path))
        self._text = {}
        self._image = {}
        for key, vec in table.items():
            vec = as_vector(vec)
            vec.setflags(write=False)
            if key.startswith(TEXT_PREFIX):
                self._text[key[len(TEXT_PREFIX):]] = vec
            elif key.startswith(IMAGE_PREFIX):
                self._image[key[len(IMAGE_PREFIX):]] = vec
            else:
                self._text.setdefault(key, vec)
                self._image.setdefault(key, vec)
        self.text_dim = _common_dim(self._text.values(), "text", fallback.text_dim if fallback else None)
        self.image_dim = _common_dim(self._image.values(), "image", fallback.image_dim if fallback else None)

    @classmethod
    def from_vectors(cls, vectors: dict, fallback=None) -> "FileEncoder":
        return cls(None, fallback=fallback, vectors=vectors)

    def has_text(self, text: str) -> bool:
        return text in self._text

    def has_image(self, image_id: str) -> bool:
        return image_id in self._image

    def encode_text(self, text: str) -> np.ndarray:
        try:
            return self._text[text]
        except KeyError:
            if self.fallback is not None:
                return self.fallback.encode_text(text)
            raise KeyError(f"no text embedding for {text!r}") from None

    def encode_image(self, image_id: str) -> np.ndarray:
        try:
            return self._image[image_id]
        except KeyError:
            if self.fallback is not None:
                return self.fallback.encode_image(image_id)
            raise KeyError(f"no image embedding for {image_id!r}") from None


def _common_dim(vectors, kind, default):
    dims = {v.shape[0] for v in vectors}
    if len(dims) > 1:
        raise ValueError(f"{kind} vectors have mixed dimensions {sorted(dims)}")
    if dims:
        dim = dims.pop()
        if default is not None and default != dim:
            raise ValueError(f"{kind} dim {dim} disagrees with fallback dim {default}")
        return dim
    return default or 0


def read_embeddings(path) -> dict[str, np.ndarray]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key, vec = rec["id"], rec["vec"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise ValueError(f"{Path(path).name}:{lineno}: expected {{\"id\", \"vec\"}} record") from None
            if key in out:
                raise ValueError(f"{Path(path).name}:{lineno}: duplicate id {key!r}")
            out[key] = as_vector(vec)
    return out


def write_embeddings(path, vectors: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(vectors):
            vec = [float(x) for x in np.asarray(vectors[key], dtype=np.float64)]
            fh.write(json.dumps({"id": key, "vec": vec}, ensure_ascii=False) + "\n")


class WordEmbeddingTable:
    """Token -> vector lookup with a fixed dimension."""

    def __init__(self, vectors: dict):
        self.vectors = {}
        dim = None
        for tok, vec in vectors.items():
            vec = as_vector(vec)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ValueError(f"token {tok!r} has dim {vec.shape[0]}, expected {dim}")
            self.vectors[tok] = vec
        self.dim = dim or 0

    def __contains__(self, token) -> bool:
        return token in self.vectors

    def __getitem__(self, token) -> np.ndarray:
        return self.vectors[token]

    def __len__(self):
        return len(self.vectors)

    @classmethod
    def load(cls, path) -> "WordEmbeddingTable":
        """Load JSONL ``{"id", "vec"}`` records or word2vec text format."""
        path = Path(path)
        if path.suffix == ".jsonl":
            return cls(read_embeddings(path))
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.rstrip("\n").split(" ")
                if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    continue  # "<count> <dim>" header
                if len(parts) < 2:
                    continue
                vectors[parts[0]] = [float(x) for x in parts[1:]]
        return cls(vectors)


def parse_provider(spec: str) -> EncoderProvider:
    """``mock:SEED:DIM`` builds a MockEncoder; anything else is an embeddings file.

    ``path.jsonl+mock:SEED:DIM`` reads the file and falls back to the mock.
    """
    if "+mock:" in spec:
        path, mock = spec.split("+", 1)
        return FileEncoder(path, fallback=parse_provider(mock))
    if spec.startswith("mock:"):
        parts = spec.split(":")
        seed = int(parts[1]) if len(parts) > 1 and parts[1] else 0
        dim = int(parts[2]) if len(parts) > 2 else 64
        return MockEncoder(seed=seed, dim=dim)
    return FileEncoder(spec)
