"""Top-K accuracy, latency summaries, and the out-of-mask diagnostic.

Accuracy is scored at product granularity: a query counts for Top-k when
its true product appears anywhere in the first k ranked entries. The
out-of-mask ratio measures how many correspondences land on background
when matching runs without segmentation.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import CatalogManifest
from .errors import DataError, NoMatchesError
from .features import FeatureSet
from .matching import MatchSet
from .pipeline import QueryRef, RetrievalResult

STAGES = ("stage1", "stage2", "stage3", "total")


@dataclass(frozen=True)
class QueryLabel:
    query_id: str
    true_product_id: str


@dataclass(frozen=True)
class LatencyStats:
    mean: float
    p50: float
    p95: float


@dataclass(frozen=True)
class MetricsReport:
    top1: float
    top5: float
    top35: float
    latency: dict[str, LatencyStats]
    n_queries: int
    config_fingerprint: str

    def __post_init__(self) -> None:
        if not self.top1 <= self.top5 + 1e-12 or not self.top5 <= self.top35 + 1e-12:
            raise DataError("accuracy must be monotone: top1 <= top5 <= top35")
        if self.n_queries < 1:
            raise DataError("report requires n_queries >= 1")


@dataclass(frozen=True)
class MaskRatioRecord:
    query_id: str
    out_mask: int
    in_mask: int

    def __post_init__(self) -> None:
        if self.out_mask + self.in_mask < 1:
            raise DataError("mask ratio record requires at least one match")

    @property
    def ratio(self) -> float:
        return self.out_mask / (self.out_mask + self.in_mask)


def _label_map(labels: list[QueryLabel]) -> dict[str, str]:
    return {lab.query_id: lab.true_product_id for lab in labels}


def top_k_accuracy(
    results: list[RetrievalResult], labels: list[QueryLabel], k: int
) -> float:
    """Fraction of queries whose true product is in the first k entries."""
    if k < 1:
        raise DataError("k must be >= 1")
    if not results:
        raise DataError("no results to score")
    truth = _label_map(labels)
    hits = 0
    for result in results:
        if result.query_id not in truth:
            raise DataError(f"no label for query {result.query_id!r}")
        wanted = truth[result.query_id]
        top = result.ranked[: min(k, len(result.ranked))]
        hits += any(entry.product_id == wanted for entry in top)
    return hits / len(results)


def stage1_top_k_accuracy(
    results: list[RetrievalResult], labels: list[QueryLabel], k: int
) -> float:
    """Accuracy of the stage-1 ordering alone (similarity desc, id asc)."""
    if not results:
        raise DataError("no results to score")
    truth = _label_map(labels)
    hits = 0
    for result in results:
        wanted = truth[result.query_id]
        order = sorted(result.ranked, key=lambda e: (-e.stage1_score, e.product_id))
        hits += any(e.product_id == wanted for e in order[: min(k, len(order))])
    return hits / len(results)


def out_of_mask_ratio(
    matches: MatchSet,
    a_features: FeatureSet,
    b_features: FeatureSet,
    query_mask: np.ndarray,
    gallery_mask: np.ndarray,
    query_id: str = "",
) -> MaskRatioRecord:
    """Score correspondences against ground-truth foreground masks.

    A match is in-mask only when both endpoints land on foreground pixels;
    keypoint coordinates must be in the same frame as the masks.
    """
    if len(matches) == 0:
        raise NoMatchesError("no correspondences to score")
    in_mask = 0
    out_mask = 0
    for corr in matches.correspondences:
        ka = a_features.keypoints[corr.query_idx]
        kb = b_features.keypoints[corr.gallery_idx]
        if _on_foreground(query_mask, ka.x, ka.y) and _on_foreground(
            gallery_mask, kb.x, kb.y
        ):
            in_mask += 1
        else:
            out_mask += 1
    return MaskRatioRecord(query_id=query_id, out_mask=out_mask, in_mask=in_mask)


def _on_foreground(mask: np.ndarray, x: float, y: float) -> bool:
    h, w = mask.shape
    xi = min(max(int(round(x)), 0), w - 1)
    yi = min(max(int(round(y)), 0), h - 1)
    return bool(mask[yi, xi])


def histogram(
    records: list[MaskRatioRecord], bins: int
) -> list[tuple[float, float, int]]:
    """Uniform bins over [0, 1], right-inclusive last bin."""
    if bins < 1:
        raise DataError("bins must be >= 1")
    counts = [0] * bins
    for record in records:
        idx = min(int(record.ratio * bins), bins - 1)
        counts[idx] += 1
    return [(i / bins, (i + 1) / bins, counts[i]) for i in range(bins)]


def latency_summary(results: list[RetrievalResult]) -> dict[str, LatencyStats]:
    summary = {}
    for stage in STAGES:
        times = np.array([r.timing_ms(stage) for r in results], dtype=np.float64)
        summary[stage] = LatencyStats(
            mean=float(times.mean()),
            p50=float(np.percentile(times, 50)),
            p95=float(np.percentile(times, 95)),
        )
    return summary


def build_report(
    results: list[RetrievalResult],
    labels: list[QueryLabel],
    config_fingerprint: str,
) -> MetricsReport:
    return MetricsReport(
        top1=top_k_accuracy(results, labels, 1),
        top5=top_k_accuracy(results, labels, 5),
        top35=top_k_accuracy(results, labels, 35),
        latency=latency_summary(results),
        n_queries=len(results),
        config_fingerprint=config_fingerprint,
    )


def emit_report(
    report: MetricsReport,
    records: list[MaskRatioRecord] | None,
    path: str | Path,
    format: str = "json",
    bins: int = 10,
) -> None:
    """Write a metrics report; JSON is the canonical schema, CSV flattens
    one row per mask-ratio record."""
    path = Path(path)
    if format == "json":
        doc = {
            "config": report.config_fingerprint,
            "n_queries": report.n_queries,
            "accuracy": {"top1": report.top1, "top5": report.top5, "top35": report.top35},
            "latency_ms": {
                stage: {"mean": st.mean, "p50": st.p50, "p95": st.p95}
                for stage, st in report.latency.items()
            },
            "mask_ratio_histogram": [
                {"lo": lo, "hi": hi, "count": count}
                for lo, hi, count in histogram(records or [], bins)
            ],
        }
        path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
    elif format == "csv":
        if records is None:
            records = []
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["query_id", "out_mask", "in_mask", "ratio"])
            for record in records:
                writer.writerow(
                    [record.query_id, record.out_mask, record.in_mask, f"{record.ratio:.6f}"]
                )
    else:
        raise DataError(f"unknown report format {format!r}")


def load_report(path: str | Path) -> MetricsReport:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        accuracy = doc["accuracy"]
        latency = {
            stage: LatencyStats(
                mean=entry["mean"], p50=entry["p50"], p95=entry["p95"]
            )
            for stage, entry in doc["latency_ms"].items()
        }
        return MetricsReport(
            top1=accuracy["top1"],
            top5=accuracy["top5"],
            top35=accuracy["top35"],
            latency=latency,
            n_queries=doc["n_queries"],
            config_fingerprint=doc["config"],
        )
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"cannot load report {path}: {exc}") from exc


def load_query_set(
    path: str | Path, catalog: CatalogManifest | None = None
) -> tuple[list[QueryRef], list[QueryLabel], list[dict]]:
    """Parse a queries.json file into refs, labels, and raw records."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot parse query set {path}: {exc}") from exc
    if not isinstance(raw, list) or not raw:
        raise DataError(f"query set {path} must be a non-empty JSON list")
    refs = []
    labels = []
    for entry in raw:
        try:
            query_id = entry["query_id"]
            image = entry["image"]
            true_pid = entry["true_product_id"]
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed query entry: {exc}") from exc
        image_path = Path(image)
        if not image_path.is_absolute():
            image_path = path.parent / image_path
        if catalog is not None:
            catalog.product(true_pid)  # raises on unknown product
        refs.append(QueryRef(query_id=query_id, image_path=image_path))
        labels.append(QueryLabel(query_id=query_id, true_product_id=true_pid))
    return refs, labels, raw
