"""Semantic embeddings: unit-norm vectors, a persisted store, and the
stage-1 top-K product selector.

Similarity between a query and a product is the maximum cosine similarity
over the product's view embeddings; because every vector is normalized at
construction, cosine similarity reduces to a dot product.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from .catalog import CatalogManifest, ProductRecord, gallery_images
from .errors import (
    DataError,
    EmptyClassError,
    MissingEmbeddingError,
    StoreFormatError,
)
from .imutils import block_mean, stable_hash64, to_gray

STORE_MAGIC = b"PRSM"
STORE_VERSION = 1


@dataclass(frozen=True)
class EmbeddingVector:
    """A finite, L2-normalized float32 vector."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float32).ravel()
        if arr.size == 0:
            raise DataError("embedding vector must be non-empty")
        if not np.all(np.isfinite(arr)):
            raise DataError("embedding vector has non-finite components")
        norm = float(np.linalg.norm(arr))
        if norm <= 0.0:
            raise DataError("embedding vector has zero norm")
        object.__setattr__(self, "values", arr / np.float32(norm))

    @property
    def dim(self) -> int:
        return int(self.values.size)


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Dot product of two unit vectors; symmetric, in [-1, 1]."""
    if a.dim != b.dim:
        raise DataError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return float(np.dot(a.values, b.values))


class EmbeddingStore:
    """Immutable map from image_id to EmbeddingVector, all sharing one dim."""

    def __init__(self, dim: int, entries: dict[str, EmbeddingVector] | None = None):
        if dim < 1:
            raise DataError("store dim must be >= 1")
        self.dim = int(dim)
        self._entries: dict[str, EmbeddingVector] = {}
        for image_id, vec in (entries or {}).items():
            self.put(image_id, vec)

    def put(self, image_id: str, vec: EmbeddingVector) -> None:
        if vec.dim != self.dim:
            raise DataError(f"vector dim {vec.dim} != store dim {self.dim}")
        self._entries[image_id] = vec

    def get(self, image_id: str) -> EmbeddingVector:
        try:
            return self._entries[image_id]
        except KeyError:
            raise MissingEmbeddingError(f"no embedding for image_id {image_id!r}") from None

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()


class EmbeddingProvider(Protocol):
    """Pure function of (image bytes, configuration) -> unit vector."""

    dim: int

    def embed(self, image: np.ndarray, image_id: str | None = None) -> EmbeddingVector: ...

    def fingerprint(self) -> str: ...


class HashEmbedder:
    """Deterministic test embedder.

    Downscales the image to a ``grid`` x ``grid`` grayscale thumbnail,
    flattens it, appends a 64-bit content hash expanded to 8 values, and
    L2-normalizes. Identical bytes embed identically; any pixel change
    perturbs the hash block, so distinct images never score exactly 1.0.
    """

    def __init__(self, grid: int = 16):
        if grid < 1:
            raise DataError("grid must be >= 1")
        self.grid = int(grid)
        self.dim = self.grid * self.grid + 8

    def embed(self, image: np.ndarray, image_id: str | None = None) -> EmbeddingVector:
        if image.ndim != 3 or image.shape[2] != 3:
            raise DataError("hash embedder expects an (H, W, 3) image")
        gray = to_gray(image)
        thumb = block_mean(gray, self.grid, self.grid).ravel() / 255.0
        shape_tag = struct.pack("<II", image.shape[0], image.shape[1])
        digest = stable_hash64(shape_tag + np.ascontiguousarray(image).tobytes())
        hash_block = np.frombuffer(
            digest.to_bytes(8, "little"), dtype=np.uint8
        ).astype(np.float64) / 255.0
        return EmbeddingVector(np.concatenate([thumb, hash_block]))

    def fingerprint(self) -> str:
        return f"hash(grid={self.grid})"


class StoreEmbedder:
    """Backend that looks embeddings up by image_id in a precomputed store."""

    def __init__(self, store: EmbeddingStore):
        self.store = store
        self.dim = store.dim

    def embed(self, image: np.ndarray, image_id: str | None = None) -> EmbeddingVector:
        if image_id is None:
            raise MissingEmbeddingError("store backend requires an image_id")
        return self.store.get(image_id)

    def fingerprint(self) -> str:
        return f"store(dim={self.dim},n={len(self.store)})"


def embed_image(
    provider: EmbeddingProvider, image: np.ndarray, image_id: str | None = None
) -> EmbeddingVector:
    """Embed one decodable 3-channel image through a provider."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError("expected a 3-channel raster image")
    return provider.embed(image, image_id=image_id)


@dataclass(frozen=True)
class CandidateSet:
    """Stage-1 output: products ordered by non-increasing score."""

    entries: tuple[tuple[str, float], ...]
    k: int

    def __post_init__(self) -> None:
        ids = [pid for pid, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("candidate set repeats a product_id")
        scores = [s for _, s in self.entries]
        if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
            raise DataError("candidate scores must be non-increasing")

    @property
    def product_ids(self) -> tuple[str, ...]:
        return tuple(pid for pid, _ in self.entries)


def product_similarity(
    query_vec: EmbeddingVector, product: ProductRecord, store: EmbeddingStore
) -> float:
    """Max cosine similarity over the product's view embeddings."""
    best = -2.0
    for view in product.views:
        best = max(best, cosine_similarity(query_vec, store.get(view.image_id)))
    return best


def top_k_products(
    query_vec: EmbeddingVector,
    catalog: CatalogManifest,
    store: EmbeddingStore,
    k: int,
) -> CandidateSet:
    """Select min(K, N) products by descending max-over-views similarity.

    Ties break by ascending product_id so rankings are stable across runs
    and worker partitionings.
    """
    if k < 1:
        raise DataError("K must be >= 1")
    scored = [
        (product_similarity(query_vec, p, store), p.product_id)
        for p in catalog.products
    ]
    scored.sort(key=lambda item: (-item[0], item[1]))
    top = scored[: min(k, len(scored))]
    return CandidateSet(entries=tuple((pid, s) for s, pid in top), k=k)


def class_filter_candidates(query_class: str, catalog: CatalogManifest) -> CandidateSet:
    """Candidate selection by coarse class instead of embedding similarity.

    Every product of the class is kept with score 0 (no ranking signal),
    ordered by product_id.
    """
    if query_class not in ("bagged", "bottled", "canned"):
        raise DataError(f"query class must be bagged/bottled/canned, got {query_class!r}")
    ids = sorted(
        p.product_id for p in catalog.products if p.coarse_class == query_class
    )
    if not ids:
        raise EmptyClassError(f"no products with coarse_class {query_class!r}")
    return CandidateSet(entries=tuple((pid, 0.0) for pid in ids), k=len(ids))


def build_store(
    provider: EmbeddingProvider,
    catalog: CatalogManifest,
    load_image_fn=None,
) -> EmbeddingStore:
    """Embed every gallery image and collect the vectors into a store."""
    from .imutils import load_image

    loader = load_image_fn or load_image
    store = EmbeddingStore(dim=provider.dim)
    for _, view in gallery_images(catalog):
        image = loader(view.image_ref)
        store.put(view.image_id, provider.embed(image, image_id=view.image_id))
    return store


def save_embedding_store(store: EmbeddingStore, path: str | Path) -> None:
    """Write the little-endian binary store format.

    Layout: magic "PRSM", u32 version, u32 dim, u32 count, then per record
    [u32 id byte length, UTF-8 image_id, dim float32 values].
    """
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<III", STORE_VERSION, store.dim, len(store)))
        for image_id, vec in store.items():
            encoded = image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(vec.values.astype("<f4").tobytes())


def load_embedding_store(path: str | Path) -> EmbeddingStore:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise StoreFormatError(f"cannot read store {path}: {exc}") from exc
    if len(blob) < 16:
        raise StoreFormatError("store file truncated before header")
    if blob[:4] != STORE_MAGIC:
        raise StoreFormatError(f"bad magic bytes {blob[:4]!r}")
    version, dim, count = struct.unpack("<III", blob[4:16])
    if version != STORE_VERSION:
        raise StoreFormatError(f"unsupported store version {version}")
    store = EmbeddingStore(dim=dim)
    offset = 16
    for _ in range(count):
        if offset + 4 > len(blob):
            raise StoreFormatError("store file truncated in record header")
        (id_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        end = offset + id_len + dim * 4
        if end > len(blob):
            raise StoreFormatError("store file truncated in record payload")
        image_id = blob[offset : offset + id_len].decode("utf-8")
        offset += id_len
        values = np.frombuffer(blob, dtype="<f4", count=dim, offset=offset).copy()
        offset += dim * 4
        if not np.all(np.isfinite(values)):
            raise StoreFormatError(f"non-finite values in record {image_id!r}")
        # Bypass re-normalization so the round-trip is bit-exact.
        vec = EmbeddingVector.__new__(EmbeddingVector)
        object.__setattr__(vec, "values", values)
        store.put(image_id, vec)
    return store
