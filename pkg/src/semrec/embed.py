"""Semantic embedding providers: a deterministic hash embedder and a remote client.

The hash embedder is the test/desk provider: vectors are a pure function of
(text, dim, provider version), with bag-of-token blending so texts sharing
tokens are more similar. The remote client talks to an HTTP JSON batch
endpoint (a hosted LLM embedding service) with caching, bounded concurrency
and retry with exponential backoff.
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .errors import DataError, ProtocolError, ProviderError

logger = logging.getLogger(__name__)

ENDPOINT_ENV = "SEMREC_EMBED_ENDPOINT"
API_KEY_ENV = "SEMREC_EMBED_API_KEY"


@dataclass(frozen=True)
class SemanticEmbedding:
    vector: np.ndarray
    provider_id: str
    item_ref: tuple[int, str] | None = None


def _normalize_text(text: str) -> str:
    return " ".join(text.split()).lower()


def _rng_from(material: str) -> np.random.Generator:
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "big"))


def hash_embed(text: str, dim: int, base_weight: float = 0.25) -> np.ndarray:
    """Deterministic embedding: text-hash noise blended with token vectors.

    The base vector comes from a PRNG seeded by a hash of the normalized text;
    each token contributes its own hash-seeded vector, so shared tokens raise
    cosine similarity.
    """
    if dim < 1:
        raise DataError(f"embedding dim must be >= 1, got {dim}")
    normalized = _normalize_text(text)
    if not normalized:
        raise DataError("cannot embed empty text")

    vec = base_weight * _rng_from("text:" + normalized).standard_normal(dim)
    tokens = normalized.split()
    token_sum = np.zeros(dim)
    for tok in tokens:
        token_sum += _rng_from("tok:" + tok).standard_normal(dim)
    vec += token_sum / len(tokens)
    return vec


class HashEmbedder:
    """Pure-function provider used for desk-scale runs and tests."""

    version = "hash-v1"

    def __init__(self, dim: int):
        if dim < 1:
            raise DataError(f"embedding dim must be >= 1, got {dim}")
        self.dim = dim
        self.provider_id = f"{self.version}:d={dim}"

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([hash_embed(t, self.dim) for t in texts])


class EmbeddingCache:
    """Append-only binary store of (key digest, vector) records.

    Record layout: 32-byte SHA-256 key, uint32 little-endian dimension, then
    the float64 little-endian vector. Loaded fully into memory on open; safe
    for concurrent get/put within one process.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._store: dict[bytes, np.ndarray] = {}
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, "rb") as f:
            while True:
                head = f.read(36)
                if not head:
                    break
                if len(head) < 36:
                    raise DataError(f"truncated cache record in {self.path}")
                key = head[:32]
                (dim,) = struct.unpack("<I", head[32:])
                payload = f.read(8 * dim)
                if len(payload) < 8 * dim:
                    raise DataError(f"truncated cache record in {self.path}")
                self._store[key] = np.frombuffer(payload, dtype="<f8").copy()

    @staticmethod
    def key(provider_id: str, text: str) -> bytes:
        material = provider_id + "\x00" + _normalize_text(text)
        return hashlib.sha256(material.encode("utf-8")).digest()

    def get(self, key: bytes) -> np.ndarray | None:
        with self._lock:
            vec = self._store.get(key)
        return None if vec is None else vec.copy()

    def put(self, key: bytes, vector: np.ndarray) -> None:
        vector = np.ascontiguousarray(vector, dtype="<f8")
        record = key + struct.pack("<I", vector.shape[0]) + vector.tobytes()
        with self._lock:
            if key in self._store:
                return
            self._store[key] = vector.copy()
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "ab") as f:
                f.write(record)

    def __len__(self) -> int:
        with self._lock:
            return len(self._store)


@dataclass
class RemoteEmbedConfig:
    provider_id: str = "remote"
    dim: int = 4096
    endpoint: str | None = None  # falls back to SEMREC_EMBED_ENDPOINT
    batch_limit: int = 64
    max_attempts: int = 4
    backoff_base: float = 0.5
    parallelism: int = 4
    timeout: float = 30.0


class RemoteEmbedder:
    """Client for an HTTP JSON batch embedding endpoint.

    Request: POST {"texts": [...]} -> {"embeddings": [[...], ...]}, one vector
    per text in input order. Credentials come from environment variables only.
    """

    def __init__(
        self,
        config: RemoteEmbedConfig,
        cache: EmbeddingCache | None = None,
        session: requests.Session | None = None,
    ):
        self.config = config
        self.cache = cache
        self.session = session or requests.Session()
        self.provider_id = config.provider_id
        self.dim = config.dim
        self.endpoint = config.endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise ProviderError(
                f"no embedding endpoint configured (set {ENDPOINT_ENV})"
            )

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        api_key = os.environ.get(API_KEY_ENV)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        return headers

    def _request_batch(self, texts: list[str], indices: list[int]) -> np.ndarray:
        last_error: Exception | None = None
        for attempt in range(self.config.max_attempts):
            if attempt > 0:
                time.sleep(self.config.backoff_base * 2 ** (attempt - 1))
            try:
                resp = self.session.post(
                    self.endpoint,
                    json={"texts": texts},
                    headers=self._headers(),
                    timeout=self.config.timeout,
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code >= 500:
                last_error = ProviderError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ProviderError(
                    f"embedding request rejected with status {resp.status_code}",
                    failed_indices=indices,
                )
            vectors = resp.json().get("embeddings")
            if vectors is None or len(vectors) != len(texts):
                raise ProtocolError(
                    f"provider returned {0 if vectors is None else len(vectors)} "
                    f"vectors for {len(texts)} texts"
                )
            matrix = np.asarray(vectors, dtype=np.float64)
            if matrix.ndim != 2 or matrix.shape[1] != self.dim:
                raise ProtocolError(
                    f"provider returned dimension {matrix.shape[-1] if matrix.ndim == 2 else '?'}"
                    f", declared {self.dim}"
                )
            if not np.all(np.isfinite(matrix)):
                raise ProtocolError("provider returned non-finite values")
            return matrix
        raise ProviderError(
            f"embedding batch failed after {self.config.max_attempts} attempts: {last_error}",
            failed_indices=indices,
        )

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        """Embed texts in input order, consulting and filling the cache."""
        texts = list(texts)
        out: list[np.ndarray | None] = [None] * len(texts)
        missing: list[int] = []
        keys = [EmbeddingCache.key(self.provider_id, t) for t in texts]
        for i, key in enumerate(keys):
            cached = self.cache.get(key) if self.cache is not None else None
            if cached is not None:
                out[i] = cached
            else:
                missing.append(i)

        batches = [
            missing[i : i + self.config.batch_limit]
            for i in range(0, len(missing), self.config.batch_limit)
        ]

        def fetch(batch: list[int]) -> tuple[list[int], np.ndarray]:
            return batch, self._request_batch([texts[i] for i in batch], batch)

        if batches:
            with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
                for batch, matrix in pool.map(fetch, batches):
                    for row, i in enumerate(batch):
                        out[i] = matrix[row]
                        if self.cache is not None:
                            self.cache.put(keys[i], matrix[row])

        return np.stack(out)  # type: ignore[arg-type]


def standardize(matrix: np.ndarray, eps: float = 1e-8) -> np.ndarray:
    """Per-dimension standardization of an (n, D) embedding matrix."""
    mean = matrix.mean(axis=0, keepdims=True)
    std = matrix.std(axis=0, keepdims=True)
    return (matrix - mean) / (std + eps)
