"""Staged product retrieval: semantic candidate pruning, segmentation-gated
cropping, and keypoint-level geometric verification."""

from .catalog import (
    CatalogManifest,
    ProductRecord,
    ViewImage,
    ViewLabel,
    gallery_images,
    load_manifest,
)
from .embedding import (
    CandidateSet,
    EmbeddingStore,
    EmbeddingVector,
    HashEmbedder,
    StoreEmbedder,
    build_store,
    class_filter_candidates,
    cosine_similarity,
    embed_image,
    load_embedding_store,
    product_similarity,
    save_embedding_store,
    top_k_products,
)
from .errors import (
    ConfigError,
    DataError,
    EmptyClassError,
    ManifestError,
    MissingEmbeddingError,
    NoMatchesError,
    PrismError,
    ProviderError,
    StoreFormatError,
)
from .features import FeatureSet, HarrisFeatures, Keypoint, extract_features
from .matching import (
    Correspondence,
    HomographyModel,
    MatchSet,
    MutualRatioMatcher,
    homography_from_points,
    inlier_count,
    match_descriptors,
    ransac_verify,
)
from .pipeline import (
    BatchResult,
    GalleryCache,
    PipelineConfig,
    QueryRef,
    RankedEntry,
    RansacParams,
    RetrievalResult,
    StageTrace,
    build_gallery_cache,
    rank_candidates,
    run_batch,
    run_query,
)
from .segmentation import (
    BoundingBox,
    Detection,
    IdentitySegmenter,
    MaskFileSegmenter,
    SegmentationOutput,
    ThresholdSegmenter,
    crop_with_mask,
    prepare_region,
    segment,
    select_primary_detection,
)
from .evaluation import (
    MaskRatioRecord,
    MetricsReport,
    QueryLabel,
    build_report,
    emit_report,
    histogram,
    load_report,
    out_of_mask_ratio,
    top_k_accuracy,
)
from .synthesis import SynthSpec, generate_catalog, generate_queries

__version__ = "0.1.0"
