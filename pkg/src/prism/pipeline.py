"""Three-stage query orchestration and candidate re-ranking.

Stage 1 prunes the gallery to K candidate products, stage 2 isolates
product regions, stage 3 scores every (query, candidate view) pair by
RANSAC inlier count. Products are re-ranked by their best view's inlier
count; stage-1 similarity and product_id break ties. Gallery-side crops
and features are computed once per catalog and cached, keyed by the
segmenter/feature configuration.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import CatalogManifest, ViewImage, ViewLabel, gallery_images
from .embedding import (
    CandidateSet,
    EmbeddingProvider,
    EmbeddingStore,
    class_filter_candidates,
    cosine_similarity,
    embed_image,
    top_k_products,
)
from .errors import DataError, PrismError
from .features import FeatureProvider, FeatureSet, filter_by_mask
from .imutils import load_image, stable_hash64
from .matching import (
    DEFAULT_RANSAC_CONFIDENCE,
    DEFAULT_RANSAC_MAX_ITERS,
    DEFAULT_RANSAC_THRESHOLD_PX,
    MatcherProvider,
    inlier_count,
    pair_seed,
    ransac_verify,
)
from .segmentation import IdentitySegmenter, PreparedRegion, SegmenterProvider, prepare_region

CANDIDATE_STRATEGIES = ("embedding_topk", "class_filter", "none")
CANDIDATE_UNITS = ("product", "image")


@dataclass(frozen=True)
class RansacParams:
    threshold_px: float = DEFAULT_RANSAC_THRESHOLD_PX
    max_iters: int = DEFAULT_RANSAC_MAX_ITERS
    confidence: float = DEFAULT_RANSAC_CONFIDENCE


@dataclass
class PipelineConfig:
    embedder: EmbeddingProvider
    segmenter: SegmenterProvider
    features: FeatureProvider
    matcher: MatcherProvider
    k: int = 35
    candidate_strategy: str = "embedding_topk"
    candidate_unit: str = "product"
    segmentation_enabled: bool = True
    ransac: RansacParams = field(default_factory=RansacParams)
    max_keypoints: int = 1024
    worker_count: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.k < 1:
            raise DataError("K must be >= 1")
        if self.candidate_strategy not in CANDIDATE_STRATEGIES:
            raise DataError(f"unknown candidate_strategy {self.candidate_strategy!r}")
        if self.candidate_unit not in CANDIDATE_UNITS:
            raise DataError(f"unknown candidate_unit {self.candidate_unit!r}")
        if self.worker_count < 1:
            raise DataError("worker_count must be >= 1")

    def fingerprint(self) -> str:
        desc = {
            "k": self.k,
            "strategy": self.candidate_strategy,
            "unit": self.candidate_unit,
            "segmentation": self.segmentation_enabled,
            "embedder": self.embedder.fingerprint(),
            "segmenter": self.segmenter.fingerprint(),
            "features": self.features.fingerprint(),
            "matcher": self.matcher.fingerprint(),
            "ransac": [self.ransac.threshold_px, self.ransac.max_iters, self.ransac.confidence],
            "max_keypoints": self.max_keypoints,
            "seed": self.seed,
        }
        blob = json.dumps(desc, sort_keys=True)
        return f"{stable_hash64(blob):016x}"

    def gallery_key(self) -> str:
        """Cache key covering everything that affects gallery-side features."""
        seg = self.segmenter.fingerprint() if self.segmentation_enabled else "disabled"
        return f"{seg}|{self.features.fingerprint()}|{self.max_keypoints}"


@dataclass(frozen=True)
class StageTrace:
    stage: str
    wall_time_ms: float
    detail: dict

    def __post_init__(self) -> None:
        if self.wall_time_ms < 0:
            raise DataError("wall_time must be >= 0")


@dataclass(frozen=True)
class RankedEntry:
    product_id: str
    inlier_score: int
    stage1_score: float
    best_view: ViewLabel | None


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked: tuple[RankedEntry, ...]
    traces: tuple[StageTrace, ...]
    fallback_flags: frozenset[str]

    def timing_ms(self, stage: str) -> float:
        for trace in self.traces:
            if trace.stage == stage:
                return trace.wall_time_ms
        return 0.0


class StageFailure(PrismError):
    """Wraps a provider/data failure with the stage it occurred in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


def rank_candidates(
    scores: list[tuple[str, int, float]] | list[tuple[str, int, float, ViewLabel | None]],
) -> list[tuple]:
    """Total order: inlier count desc, stage-1 score desc, product_id asc."""
    return sorted(scores, key=lambda s: (-s[1], -s[2], s[0]))


# ---------------------------------------------------------------------------
# Gallery-side precomputation


@dataclass(frozen=True)
class CachedView:
    product_id: str
    image_id: str
    view: ViewLabel
    features: FeatureSet
    origin: tuple[int, int]
    fallback: bool


class GalleryCache:
    """Per-catalog crops and features, keyed by the gallery config."""

    def __init__(self, key: str):
        self.key = key
        self.views: dict[str, CachedView] = {}

    def get(self, image_id: str) -> CachedView:
        try:
            return self.views[image_id]
        except KeyError:
            raise DataError(f"gallery cache missing image_id {image_id!r}") from None


def _prepare(config: PipelineConfig, image: np.ndarray, mask_path=None) -> PreparedRegion:
    if not config.segmentation_enabled:
        provider: SegmenterProvider = IdentitySegmenter()
    else:
        provider = config.segmenter
    return prepare_region(provider, image, mask_path=mask_path)


def _gated_features(config: PipelineConfig, region: PreparedRegion) -> FeatureSet:
    feats = config.features.extract(region.image, config.max_keypoints)
    mask_crop = region.mask_crop
    if mask_crop is not None:
        feats = filter_by_mask(feats, mask_crop)
    return feats


def _cache_view(config: PipelineConfig, product_id: str, view: ViewImage) -> CachedView:
    image = load_image(view.image_ref)
    region = _prepare(config, image, mask_path=view.mask_ref)
    feats = _gated_features(config, region)
    return CachedView(
        product_id=product_id,
        image_id=view.image_id,
        view=view.view,
        features=feats,
        origin=region.origin,
        fallback=region.fallback,
    )


def build_gallery_cache(
    config: PipelineConfig,
    catalog: CatalogManifest,
    workers: int | None = None,
) -> GalleryCache:
    """Crop and extract features for every gallery view once."""
    cache = GalleryCache(key=config.gallery_key())
    pairs = gallery_images(catalog)
    workers = workers if workers is not None else config.worker_count
    entries = _map_ordered(
        lambda pv: _cache_view(config, pv[0], pv[1]), pairs, workers
    )
    for entry in entries:
        cache.views[entry.image_id] = entry
    return cache


def _map_ordered(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def save_gallery_cache(cache: GalleryCache, path: str | Path) -> None:
    """Persist gallery features so later runs skip precomputation."""
    meta = {"key": cache.key, "views": []}
    arrays: dict[str, np.ndarray] = {}
    for i, (image_id, cv) in enumerate(sorted(cache.views.items())):
        meta["views"].append(
            {
                "image_id": image_id,
                "product_id": cv.product_id,
                "view": cv.view.value,
                "origin": list(cv.origin),
                "fallback": cv.fallback,
            }
        )
        pts = cv.features.points()
        resp = np.array([k.response for k in cv.features.keypoints])
        arrays[f"pts_{i}"] = pts
        arrays[f"resp_{i}"] = resp
        arrays[f"desc_{i}"] = cv.features.descriptors
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_gallery_cache(path: str | Path, expected_key: str | None = None) -> GalleryCache:
    from .features import Keypoint

    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            cache = GalleryCache(key=meta["key"])
            if expected_key is not None and meta["key"] != expected_key:
                raise DataError(
                    f"cache key {meta['key']!r} does not match config {expected_key!r}"
                )
            for i, info in enumerate(meta["views"]):
                pts = data[f"pts_{i}"]
                resp = data[f"resp_{i}"]
                desc = data[f"desc_{i}"]
                keypoints = tuple(
                    Keypoint(x=float(p[0]), y=float(p[1]), response=float(r))
                    for p, r in zip(pts, resp)
                )
                cache.views[info["image_id"]] = CachedView(
                    product_id=info["product_id"],
                    image_id=info["image_id"],
                    view=ViewLabel(info["view"]),
                    features=FeatureSet(keypoints=keypoints, descriptors=desc),
                    origin=tuple(info["origin"]),
                    fallback=bool(info["fallback"]),
                )
            return cache
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load gallery cache {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Query execution


def _select_candidates(
    config: PipelineConfig,
    catalog: CatalogManifest,
    store: EmbeddingStore,
    query_image: np.ndarray,
    query_id: str,
    query_class: str | None,
) -> tuple[CandidateSet, dict[str, list[ViewImage]]]:
    """Run the configured stage-1 strategy.

    Returns the candidate set and, per candidate product, the views that
    proceed to verification (all views unless candidate_unit = image).
    """
    if config.candidate_strategy == "none":
        entries = tuple(
            (p.product_id, 0.0) for p in sorted(catalog.products, key=lambda p: p.product_id)
        )
        candidates = CandidateSet(entries=entries, k=len(entries))
        views = {p.product_id: list(p.views) for p in catalog.products}
        return candidates, views

    if config.candidate_strategy == "class_filter":
        if query_class is None:
            raise DataError("class_filter strategy requires a query class")
        candidates = class_filter_candidates(query_class, catalog)
        views = {pid: list(catalog.product(pid).views) for pid in candidates.product_ids}
        return candidates, views

    query_vec = embed_image(config.embedder, query_image, image_id=query_id or None)
    if config.candidate_unit == "image":
        scored_views = []
        for product in catalog.products:
            for view in product.views:
                sim = cosine_similarity(query_vec, store.get(view.image_id))
                scored_views.append((sim, product.product_id, view))
        scored_views.sort(key=lambda item: (-item[0], item[1], item[2].image_id))
        top_views = scored_views[: min(config.k, len(scored_views))]
        views: dict[str, list[ViewImage]] = {}
        best: dict[str, float] = {}
        for sim, pid, view in top_views:
            views.setdefault(pid, []).append(view)
            best[pid] = max(best.get(pid, -2.0), sim)
        entries = tuple(
            sorted(((pid, s) for pid, s in best.items()), key=lambda e: (-e[1], e[0]))
        )
        return CandidateSet(entries=entries, k=config.k), views

    candidates = top_k_products(query_vec, catalog, store, config.k)
    views = {pid: list(catalog.product(pid).views) for pid in candidates.product_ids}
    return candidates, views


def _verify_pair(
    config: PipelineConfig,
    query_features: FeatureSet,
    cached: CachedView,
    query_id: str,
) -> int:
    matches = config.matcher.match(query_features, cached.features)
    verified = ransac_verify(
        matches,
        query_features,
        cached.features,
        threshold_px=config.ransac.threshold_px,
        max_iters=config.ransac.max_iters,
        confidence=config.ransac.confidence,
        seed=pair_seed(query_id, cached.image_id, salt=config.seed),
    )
    return inlier_count(verified)


def run_query(
    config: PipelineConfig,
    catalog: CatalogManifest,
    store: EmbeddingStore,
    query_image: np.ndarray,
    query_id: str = "",
    query_class: str | None = None,
    cache: GalleryCache | None = None,
    stage3_workers: int | None = None,
) -> RetrievalResult:
    """Execute the full funnel for one query image."""
    flags: set[str] = set()
    traces: list[StageTrace] = []

    t0 = time.perf_counter()
    try:
        candidates, candidate_views = _select_candidates(
            config, catalog, store, query_image, query_id, query_class
        )
    except PrismError as exc:
        raise StageFailure("stage1", exc) from exc
    if not candidates.entries:
        raise StageFailure("stage1", DataError("empty candidate set"))
    t1 = time.perf_counter()
    traces.append(
        StageTrace(
            stage="stage1",
            wall_time_ms=(t1 - t0) * 1000.0,
            detail={
                "strategy": config.candidate_strategy,
                "unit": config.candidate_unit,
                "candidates": len(candidates.entries),
            },
        )
    )

    try:
        region = _prepare(config, query_image)
    except PrismError as exc:
        raise StageFailure("stage2", exc) from exc
    if region.fallback:
        flags.add("query_segmentation_fallback")
    t2 = time.perf_counter()
    traces.append(
        StageTrace(
            stage="stage2",
            wall_time_ms=(t2 - t1) * 1000.0,
            detail={
                "fallback": region.fallback,
                "crop_size": [int(region.image.shape[1]), int(region.image.shape[0])],
            },
        )
    )

    try:
        query_features = _gated_features(config, region)
        if len(query_features) == 0:
            flags.add("query_features_empty")

        if cache is not None and cache.key != config.gallery_key():
            raise DataError(
                f"gallery cache key {cache.key!r} does not match config "
                f"{config.gallery_key()!r}"
            )
        needed: list[tuple[str, ViewImage]] = [
            (pid, view)
            for pid, _ in candidates.entries
            for view in candidate_views[pid]
        ]
        if cache is None:
            local = GalleryCache(key=config.gallery_key())
            for entry in _map_ordered(
                lambda pv: _cache_view(config, pv[0], pv[1]),
                needed,
                stage3_workers or config.worker_count,
            ):
                local.views[entry.image_id] = entry
            cache = local
        cached_views = [cache.get(view.image_id) for _, view in needed]
        for cv in cached_views:
            if cv.fallback:
                flags.add("gallery_segmentation_fallback")

        counts = _map_ordered(
            lambda cv: _verify_pair(config, query_features, cv, query_id),
            cached_views,
            stage3_workers or config.worker_count,
        )
    except StageFailure:
        raise
    except PrismError as exc:
        raise StageFailure("stage3", exc) from exc

    per_product: dict[str, tuple[int, ViewLabel | None]] = {}
    for cv, count in zip(cached_views, counts):
        prev = per_product.get(cv.product_id)
        if prev is None or count > prev[0]:
            per_product[cv.product_id] = (count, cv.view)
    stage1_scores = dict(candidates.entries)
    rows = [
        (pid, per_product.get(pid, (0, None))[0], stage1_scores[pid], per_product.get(pid, (0, None))[1])
        for pid, _ in candidates.entries
    ]
    ranked = tuple(
        RankedEntry(product_id=pid, inlier_score=score, stage1_score=s1, best_view=view)
        for pid, score, s1, view in rank_candidates(rows)
    )
    t3 = time.perf_counter()
    traces.append(
        StageTrace(
            stage="stage3",
            wall_time_ms=(t3 - t2) * 1000.0,
            detail={
                "pairs": len(cached_views),
                "query_keypoints": len(query_features),
                "inliers": {cv.image_id: int(c) for cv, c in zip(cached_views, counts)},
            },
        )
    )
    traces.append(
        StageTrace(stage="total", wall_time_ms=(t3 - t0) * 1000.0, detail={})
    )
    return RetrievalResult(
        query_id=query_id,
        ranked=ranked,
        traces=tuple(traces),
        fallback_flags=frozenset(flags),
    )


# ---------------------------------------------------------------------------
# Batch execution


@dataclass(frozen=True)
class QueryRef:
    query_id: str
    image_path: Path


@dataclass(frozen=True)
class QueryError:
    query_id: str
    stage: str
    message: str


@dataclass(frozen=True)
class BatchResult:
    results: tuple[RetrievalResult, ...]
    errors: tuple[QueryError, ...]


def run_batch(
    config: PipelineConfig,
    catalog: CatalogManifest,
    store: EmbeddingStore,
    queries: list[QueryRef],
    cache: GalleryCache | None = None,
    query_classes: dict[str, str] | None = None,
) -> BatchResult:
    """Run every query; failures are collected, not fatal.

    Results are identical to sequential run_query calls regardless of
    worker_count: each query is independent and RANSAC seeds derive from
    (query_id, image_id) pairs, not scheduling order.
    """
    if cache is None:
        cache = build_gallery_cache(config, catalog)

    def one(query: QueryRef):
        try:
            image = load_image(query.image_path)
            return run_query(
                config,
                catalog,
                store,
                image,
                query_id=query.query_id,
                query_class=(query_classes or {}).get(query.query_id),
                cache=cache,
                stage3_workers=1,
            )
        except StageFailure as exc:
            return QueryError(query_id=query.query_id, stage=exc.stage, message=str(exc.cause))
        except Exception as exc:  # corrupt image, I/O, ...
            return QueryError(query_id=query.query_id, stage="input", message=str(exc))

    outcomes = _map_ordered(one, queries, config.worker_count)
    results = tuple(o for o in outcomes if isinstance(o, RetrievalResult))
    errors = tuple(o for o in outcomes if isinstance(o, QueryError))
    return BatchResult(results=results, errors=errors)


def result_to_dict(result: RetrievalResult) -> dict:
    """Serialize one result to the export schema."""
    return {
        "query_id": result.query_id,
        "ranked": [
            {
                "product_id": e.product_id,
                "inlier_score": e.inlier_score,
                "stage1_score": e.stage1_score,
                "best_view": e.best_view.value if e.best_view else None,
            }
            for e in result.ranked
        ],
        "timings_ms": {
            "stage1": result.timing_ms("stage1"),
            "stage2": result.timing_ms("stage2"),
            "stage3": result.timing_ms("stage3"),
            "total": result.timing_ms("total"),
        },
        "flags": sorted(result.fallback_flags),
    }


def export_results(results: list[RetrievalResult], path: str | Path) -> None:
    payload = [result_to_dict(r) for r in results]
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")
