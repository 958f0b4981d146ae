"""Command-line surface: ingest, embed, query, eval, synth, ablate.

Every command is reproducible from its config file alone. Exit codes:
0 success, 2 config error, 3 provider error, 4 data error; failures print
a single machine-parsable line to stderr.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .catalog import load_manifest
from .embedding import (
    HashEmbedder,
    StoreEmbedder,
    build_store,
    load_embedding_store,
    save_embedding_store,
)
from .errors import ConfigError, DataError, PrismError, ProviderError
from .evaluation import build_report, emit_report, load_query_set, top_k_accuracy
from .features import HarrisFeatures
from .imutils import load_image
from .matching import MutualRatioMatcher
from .pipeline import (
    PipelineConfig,
    RansacParams,
    build_gallery_cache,
    export_results,
    load_gallery_cache,
    result_to_dict,
    run_batch,
    run_query,
    save_gallery_cache,
)
from .segmentation import (
    IdentitySegmenter,
    MaskFileSegmenter,
    ThresholdSegmenter,
)
from .synthesis import SynthSpec, generate_catalog, generate_queries

REMOTE_URL_ENV = "PRISM_REMOTE_URL"
ABLATION_VARIANTS = ("no_stage1", "no_segmentation", "matcher=alt", "exhaustive")


# ---------------------------------------------------------------------------
# Run-config file handling


def _require(doc: dict, key: str, context: str):
    if key not in doc:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return doc[key]


def _endpoint_from(doc: dict, context: str):
    from .remote import EndpointConfig

    url = doc.get("url") or os.environ.get(REMOTE_URL_ENV)
    if not url:
        raise ConfigError(
            f"{context}: remote backend needs 'url' or ${REMOTE_URL_ENV}"
        )
    return EndpointConfig(
        base_url=url,
        timeout_ms=int(doc.get("timeout_ms", 5000)),
        retries=int(doc.get("retries", 1)),
        auth_token=doc.get("auth_token"),
    )


def _build_embedder(doc: dict, store):
    backend = doc.get("backend", "hash")
    if backend == "hash":
        return HashEmbedder(grid=int(doc.get("grid", 16)))
    if backend == "store":
        if store is None:
            raise ConfigError("embedder backend 'store' requires an embedding_store path")
        return StoreEmbedder(store)
    if backend == "remote":
        from .remote import RemoteEmbedder

        dim = doc.get("dim")
        if dim is None:
            raise ConfigError("remote embedder requires 'dim'")
        return RemoteEmbedder(_endpoint_from(doc, "embedder"), dim=int(dim))
    raise ConfigError(f"unknown embedder backend {backend!r}")


def _build_segmenter(doc: dict, base_dir: Path):
    backend = doc.get("backend", "identity")
    if backend == "identity":
        return IdentitySegmenter()
    if backend == "mask_file":
        return MaskFileSegmenter()
    if backend == "threshold":
        bg_ref = _require(doc, "background", "segmenter")
        bg_path = Path(bg_ref)
        if not bg_path.is_absolute():
            bg_path = base_dir / bg_path
        if not bg_path.is_file():
            raise ConfigError(f"segmenter background plate not found: {bg_path}")
        return ThresholdSegmenter(
            background=load_image(bg_path),
            threshold=int(doc.get("threshold", 25)),
            min_area=int(doc.get("min_area", 100)),
        )
    if backend == "remote":
        from .remote import RemoteSegmenter

        return RemoteSegmenter(_endpoint_from(doc, "segmenter"))
    raise ConfigError(f"unknown segmenter backend {backend!r}")


def _build_features(doc: dict):
    backend = doc.get("backend", "reference")
    if backend == "reference":
        return HarrisFeatures(
            k=float(doc.get("k", 0.04)), sigma=float(doc.get("sigma", 1.5))
        )
    if backend == "remote":
        from .remote import RemoteFeatures

        return RemoteFeatures(
            _endpoint_from(doc, "features"),
            descriptor_dim=int(doc.get("descriptor_dim", 64)),
        )
    raise ConfigError(f"unknown features backend {backend!r}")


def _build_matcher(doc: dict):
    backend = doc.get("backend", "reference")
    if backend == "reference":
        return MutualRatioMatcher(
            ratio=float(doc.get("ratio", 0.8)), mutual=bool(doc.get("mutual", True))
        )
    if backend == "remote":
        from .remote import RemoteMatcher

        return RemoteMatcher(_endpoint_from(doc, "matcher"))
    raise ConfigError(f"unknown matcher backend {backend!r}")


class RunContext:
    """Everything a command needs, loaded and validated from one config file."""

    def __init__(self, catalog, store, config: PipelineConfig, base_dir: Path):
        self.catalog = catalog
        self.store = store
        self.config = config
        self.base_dir = base_dir


def load_run_config(
    path: str | Path,
    seed_override: int | None = None,
    workers_override: int | None = None,
) -> RunContext:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config top level must be a JSON object")

    base_dir = path.parent
    manifest_ref = _require(doc, "manifest", "config")
    manifest_path = Path(manifest_ref)
    if not manifest_path.is_absolute():
        manifest_path = base_dir / manifest_path
    catalog = load_manifest(manifest_path)

    store = None
    store_ref = doc.get("embedding_store") or (
        str(catalog.embedding_store_ref) if catalog.embedding_store_ref else None
    )
    if store_ref:
        store_path = Path(store_ref)
        if not store_path.is_absolute():
            store_path = base_dir / store_path
        if store_path.is_file():
            store = load_embedding_store(store_path)

    pipe = doc.get("pipeline", {})
    if not isinstance(pipe, dict):
        raise ConfigError("'pipeline' must be a JSON object")
    ransac_doc = pipe.get("ransac", {})
    try:
        config = PipelineConfig(
            embedder=_build_embedder(pipe.get("embedder", {}), store),
            segmenter=_build_segmenter(pipe.get("segmenter", {}), base_dir),
            features=_build_features(pipe.get("features", {})),
            matcher=_build_matcher(pipe.get("matcher", {})),
            k=int(pipe.get("k", 35)),
            candidate_strategy=pipe.get("candidate_strategy", "embedding_topk"),
            candidate_unit=pipe.get("candidate_unit", "product"),
            segmentation_enabled=bool(pipe.get("segmentation_enabled", True)),
            ransac=RansacParams(
                threshold_px=float(ransac_doc.get("threshold_px", 3.0)),
                max_iters=int(ransac_doc.get("max_iters", 2000)),
                confidence=float(ransac_doc.get("confidence", 0.99)),
            ),
            max_keypoints=int(pipe.get("max_keypoints", 1024)),
            worker_count=int(pipe.get("worker_count", 1)),
            seed=int(doc.get("seed", 0)),
        )
    except DataError as exc:
        raise ConfigError(str(exc)) from exc
    if seed_override is not None:
        config.seed = seed_override
    if workers_override is not None:
        config.worker_count = workers_override

    if config.candidate_strategy == "embedding_topk" and store is None:
        raise ConfigError(
            "embedding_topk strategy requires an embedding store; build one with "
            "'prism embed' and set 'embedding_store'"
        )
    return RunContext(catalog=catalog, store=store, config=config, base_dir=base_dir)


# ---------------------------------------------------------------------------
# Commands


def cmd_ingest(args) -> int:
    ctx = load_run_config(args.config, args.seed, args.workers)
    cache = build_gallery_cache(ctx.config, ctx.catalog)
    total_kp = sum(len(cv.features) for cv in cache.views.values())
    if args.cache:
        save_gallery_cache(cache, args.cache)
        print(f"cache written to {args.cache}")
    print(
        f"catalog ok: {len(ctx.catalog)} products, {ctx.catalog.image_count} images, "
        f"{total_kp} gallery keypoints"
    )
    return 0


def cmd_embed(args) -> int:
    catalog = load_manifest(args.manifest)
    if args.backend == "hash":
        provider = _build_embedder({"backend": "hash", "grid": args.grid}, None)
    elif args.backend == "remote":
        doc = {"backend": "remote", "dim": args.dim}
        if args.url:
            doc["url"] = args.url
        provider = _build_embedder(doc, None)
    else:
        raise ConfigError(f"cannot build a store with backend {args.backend!r}")
    store = build_store(provider, catalog)
    save_embedding_store(store, args.out)
    print(f"embedded {len(store)} images (dim={store.dim}) -> {args.out}")
    return 0


def cmd_query(args) -> int:
    ctx = load_run_config(args.config, args.seed, args.workers)
    image = load_image(args.image)
    cache = None
    if args.cache:
        cache = load_gallery_cache(args.cache, expected_key=ctx.config.gallery_key())
    result = run_query(
        ctx.config,
        ctx.catalog,
        ctx.store,
        image,
        query_id=str(args.image),
        cache=cache,
    )
    top = result.ranked[: args.top]
    print(f"{'rank':>4}  {'product_id':<16} {'inliers':>7}  {'stage1':>8}  best_view")
    for rank, entry in enumerate(top, start=1):
        view = entry.best_view.value if entry.best_view else "-"
        print(
            f"{rank:>4}  {entry.product_id:<16} {entry.inlier_score:>7}  "
            f"{entry.stage1_score:>8.4f}  {view}"
        )
    timings = result_to_dict(result)["timings_ms"]
    print(
        "timings_ms "
        + " ".join(f"{stage}={timings[stage]:.1f}" for stage in ("stage1", "stage2", "stage3", "total"))
    )
    return 0


def cmd_eval(args) -> int:
    ctx = load_run_config(args.config, args.seed, args.workers)
    refs, labels, _ = load_query_set(args.queries, ctx.catalog)
    cache = None
    if args.cache:
        cache = load_gallery_cache(args.cache, expected_key=ctx.config.gallery_key())
    query_classes = _oracle_classes(ctx, labels) if ctx.config.candidate_strategy == "class_filter" else None
    batch = run_batch(
        ctx.config, ctx.catalog, ctx.store, refs, cache=cache, query_classes=query_classes
    )
    if not batch.results:
        raise DataError("no query succeeded; cannot build a report")
    scored_labels = [l for l in labels if l.query_id in {r.query_id for r in batch.results}]
    report = build_report(list(batch.results), scored_labels, ctx.config.fingerprint())
    emit_report(report, None, args.report, format=args.format)
    if args.results:
        export_results(list(batch.results), args.results)
    print(
        f"n={report.n_queries} top1={report.top1:.4f} top5={report.top5:.4f} "
        f"top35={report.top35:.4f} mean_total_ms={report.latency['total'].mean:.1f} "
        f"errors={len(batch.errors)}"
    )
    for err in batch.errors:
        print(f"query_error query_id={err.query_id} stage={err.stage}: {err.message}")
    return 0


def cmd_synth(args) -> int:
    try:
        doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        spec = SynthSpec.from_dict(doc)
    except FileNotFoundError:
        raise ConfigError(f"spec file not found: {args.spec}") from None
    except (json.JSONDecodeError, DataError) as exc:
        raise ConfigError(f"invalid synth spec: {exc}") from exc
    if args.seed is not None:
        spec = SynthSpec.from_dict({**doc, "seed": args.seed})
    catalog = generate_catalog(spec, args.out)
    records, labels = generate_queries(spec, catalog, args.out)
    print(
        f"generated {len(catalog)} products ({catalog.image_count} gallery images), "
        f"{len(records)} queries -> {args.out}"
    )
    return 0


def _oracle_classes(ctx: RunContext, labels) -> dict[str, str]:
    return {
        lab.query_id: ctx.catalog.product(lab.true_product_id).coarse_class
        for lab in labels
    }


def _variant_config(ctx: RunContext, name: str) -> PipelineConfig:
    import copy

    config = copy.copy(ctx.config)
    if name == "full":
        return config
    if name == "no_stage1":
        config.candidate_strategy = "class_filter"
        return config
    if name == "no_segmentation":
        config.segmentation_enabled = False
        return config
    if name in ("matcher=alt", "matcher_alt"):
        config.matcher = MutualRatioMatcher(ratio=0.9, mutual=False)
        return config
    if name == "exhaustive":
        config.candidate_strategy = "none"
        return config
    raise ConfigError(
        f"unknown ablation variant {name!r}; available: {', '.join(ABLATION_VARIANTS)}"
    )


def cmd_ablate(args) -> int:
    ctx = load_run_config(args.config, args.seed, args.workers)
    refs, labels, _ = load_query_set(args.queries, ctx.catalog)
    names = ["full"] + [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = {}
    for name in names:
        config = _variant_config(ctx, name)
        query_classes = (
            _oracle_classes(ctx, labels)
            if config.candidate_strategy == "class_filter"
            else None
        )
        batch = run_batch(
            config, ctx.catalog, ctx.store, refs, query_classes=query_classes
        )
        results = list(batch.results)
        if results:
            scored = [l for l in labels if l.query_id in {r.query_id for r in results}]
            mean_ms = sum(r.timing_ms("total") for r in results) / len(results)
            rows[name] = {
                "top1": top_k_accuracy(results, scored, 1),
                "top5": top_k_accuracy(results, scored, 5),
                "top35": top_k_accuracy(results, scored, 35),
                "mean_total_ms": mean_ms,
                "errors": len(batch.errors),
            }
        else:
            rows[name] = {
                "top1": 0.0, "top5": 0.0, "top35": 0.0,
                "mean_total_ms": 0.0, "errors": len(batch.errors),
            }
    print(f"{'variant':<18} {'top35':>7} {'top5':>7} {'top1':>7} {'mean_ms':>9} {'errors':>6}")
    for name, row in rows.items():
        print(
            f"{name:<18} {row['top35']:>7.4f} {row['top5']:>7.4f} {row['top1']:>7.4f} "
            f"{row['mean_total_ms']:>9.1f} {row['errors']:>6}"
        )
    if args.report:
        Path(args.report).write_text(
            json.dumps({"variants": rows}, indent=2), encoding="utf-8"
        )
    return 0


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prism", description="Staged product-retrieval engine"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="run-config JSON path")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--workers", type=int, default=None, help="worker count")

    p_ingest = sub.add_parser("ingest", help="validate catalog, precompute features")
    common(p_ingest)
    p_ingest.add_argument("--cache", default=None, help="write feature cache here")
    p_ingest.set_defaults(func=cmd_ingest)

    p_embed = sub.add_parser("embed", help="build and persist the embedding store")
    p_embed.add_argument("--manifest", required=True)
    p_embed.add_argument("--backend", choices=("hash", "remote"), default="hash")
    p_embed.add_argument("--grid", type=int, default=16, help="hash embedder grid")
    p_embed.add_argument("--dim", type=int, default=None, help="remote embedder dim")
    p_embed.add_argument("--url", default=None, help="remote endpoint URL")
    p_embed.add_argument("--out", required=True)
    p_embed.set_defaults(func=cmd_embed)

    p_query = sub.add_parser("query", help="run a single query")
    common(p_query)
    p_query.add_argument("--image", required=True)
    p_query.add_argument("--top", type=int, default=35)
    p_query.add_argument("--cache", default=None, help="gallery feature cache")
    p_query.set_defaults(func=cmd_query)

    p_eval = sub.add_parser("eval", help="batch evaluation with a metrics report")
    common(p_eval)
    p_eval.add_argument("--queries", required=True, help="queries.json path")
    p_eval.add_argument("--report", required=True)
    p_eval.add_argument("--format", choices=("json", "csv"), default="json")
    p_eval.add_argument("--results", default=None, help="also export per-query results")
    p_eval.add_argument("--cache", default=None, help="gallery feature cache")
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate a synthetic catalog + queries")
    p_synth.add_argument("--spec", required=True, help="synth spec JSON path")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--seed", type=int, default=None, help="override spec seed")
    p_synth.set_defaults(func=cmd_synth)

    p_ablate = sub.add_parser("ablate", help="run named pipeline variants")
    common(p_ablate)
    p_ablate.add_argument("--queries", required=True)
    p_ablate.add_argument(
        "--variants",
        default=",".join(ABLATION_VARIANTS),
        help="comma-separated subset of: " + ", ".join(ABLATION_VARIANTS),
    )
    p_ablate.add_argument("--report", default=None)
    p_ablate.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    from .pipeline import StageFailure

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageFailure as exc:
        if isinstance(exc.cause, ProviderError):
            print(f"error: provider: {exc}", file=sys.stderr)
            return 3
        print(f"error: data: {exc}", file=sys.stderr)
        return 4
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except ProviderError as exc:
        print(f"error: provider: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 4
    except DataError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 4
    except PrismError as exc:
        print(f"error: internal: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
