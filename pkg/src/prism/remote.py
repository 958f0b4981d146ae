"""HTTP adapters that let hosted models back the provider interfaces.

Real embedders, segmenters, keypoint extractors, and matchers run behind
inference services; these clients validate every response against the
local type invariants so a remote backend is indistinguishable from a
local one downstream. Geometric verification always runs locally, even
with a remote matcher. Strictly optional: nothing in the test suite needs
a live endpoint.
"""
from __future__ import annotations

import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

from .embedding import EmbeddingVector
from .errors import DataError, ProviderError
from .features import FeatureSet, Keypoint, empty_feature_set
from .imutils import encode_png
from .matching import Correspondence, MatchSet
from .segmentation import BoundingBox, Detection, SegmentationOutput


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    timeout_ms: int = 5000
    retries: int = 1
    auth_token: str | None = None
    max_inflight: int = 4
    backoff_s: float = 0.1

    def __post_init__(self) -> None:
        if self.timeout_ms <= 0:
            raise DataError("timeout must be > 0")
        if self.retries < 0:
            raise DataError("retries must be >= 0")


class _Client:
    def __init__(self, cfg: EndpointConfig):
        self.cfg = cfg
        self._gate = threading.Semaphore(max(1, cfg.max_inflight))

    def post(self, payload: bytes | str, content_type: str) -> object:
        headers = {"Content-Type": content_type}
        if self.cfg.auth_token:
            headers["Authorization"] = f"Bearer {self.cfg.auth_token}"
        timeout = self.cfg.timeout_ms / 1000.0
        last_error: Exception | None = None
        for attempt in range(self.cfg.retries + 1):
            if attempt:
                time.sleep(self.cfg.backoff_s * (2 ** (attempt - 1)))
            try:
                with self._gate:
                    response = requests.post(
                        self.cfg.base_url, data=payload, headers=headers, timeout=timeout
                    )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if response.status_code != 200:
                last_error = ProviderError(
                    f"endpoint {self.cfg.base_url} returned HTTP {response.status_code}"
                )
                continue
            try:
                return response.json()
            except ValueError as exc:
                raise ProviderError(
                    f"endpoint {self.cfg.base_url} returned non-JSON body"
                ) from exc
        raise ProviderError(
            f"endpoint {self.cfg.base_url} failed after {self.cfg.retries + 1} attempts: "
            f"{last_error}"
        )


class RemoteEmbedder:
    """POSTs image bytes, expects a JSON array of ``dim`` floats."""

    def __init__(self, cfg: EndpointConfig, dim: int):
        if dim < 1:
            raise DataError("dim must be >= 1")
        self.dim = int(dim)
        self._client = _Client(cfg)

    def embed(self, image: np.ndarray, image_id: str | None = None) -> EmbeddingVector:
        body = self._client.post(encode_png(image), "image/png")
        if not isinstance(body, list) or len(body) != self.dim:
            raise ProviderError(
                f"embedding response must be a JSON array of {self.dim} floats"
            )
        try:
            values = np.asarray(body, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ProviderError("embedding response has non-numeric entries") from exc
        if not np.all(np.isfinite(values)):
            raise ProviderError("embedding response has non-finite entries")
        # Re-normalized locally so the unit-norm invariant holds regardless
        # of what the service returns.
        return EmbeddingVector(values)

    def fingerprint(self) -> str:
        return f"remote_embed(dim={self.dim})"


def decode_rle_mask(rle: object, width: int, height: int) -> np.ndarray:
    """Decode per-row [start, length] runs into an (H, W) bool mask."""
    if not isinstance(rle, list) or len(rle) != height:
        raise ProviderError(f"mask_rle must have exactly {height} rows")
    mask = np.zeros((height, width), dtype=bool)
    for y, runs in enumerate(rle):
        if not isinstance(runs, list):
            raise ProviderError("mask_rle rows must be lists of [start, len]")
        for run in runs:
            if (
                not isinstance(run, list)
                or len(run) != 2
                or not all(isinstance(v, int) for v in run)
            ):
                raise ProviderError("mask_rle runs must be [start, len] integer pairs")
            start, length = run
            if start < 0 or length < 1 or start + length > width:
                raise ProviderError(f"mask_rle run {run} exceeds row width {width}")
            mask[y, start : start + length] = True
    return mask


class RemoteSegmenter:
    """POSTs image bytes, expects detections with RLE-encoded masks."""

    def __init__(self, cfg: EndpointConfig):
        self._client = _Client(cfg)

    def segment(self, image: np.ndarray, mask_path=None) -> SegmentationOutput:
        h, w = image.shape[:2]
        body = self._client.post(encode_png(image), "image/png")
        if not isinstance(body, list):
            raise ProviderError("segmentation response must be a JSON list")
        detections = []
        for entry in body:
            if not isinstance(entry, dict):
                raise ProviderError("each detection must be a JSON object")
            box_raw = entry.get("box")
            if not isinstance(box_raw, list) or len(box_raw) != 4:
                raise ProviderError("detection box must be [x1, y1, x2, y2]")
            mask = decode_rle_mask(entry.get("mask_rle"), w, h)
            try:
                detection = Detection(
                    box=BoundingBox(*(int(v) for v in box_raw)),
                    mask=mask,
                    label=str(entry.get("label", "object")),
                    score=float(entry.get("score", 1.0)),
                )
                detection.validate_against(w, h)
            except (DataError, TypeError, ValueError) as exc:
                raise ProviderError(f"invalid detection in response: {exc}") from exc
            detections.append(detection)
        return SegmentationOutput(detections=tuple(detections), source_dims=(w, h))

    def fingerprint(self) -> str:
        return "remote_segment"


class RemoteFeatures:
    """POSTs image bytes, expects {"keypoints": [[x,y],...], "descriptors": [[...],...]}."""

    def __init__(self, cfg: EndpointConfig, descriptor_dim: int):
        self.descriptor_dim = int(descriptor_dim)
        self._client = _Client(cfg)

    def extract(self, image: np.ndarray, max_keypoints: int) -> FeatureSet:
        h, w = image.shape[:2]
        body = self._client.post(encode_png(image), "image/png")
        if not isinstance(body, dict):
            raise ProviderError("feature response must be a JSON object")
        kpts_raw = body.get("keypoints")
        desc_raw = body.get("descriptors")
        if not isinstance(kpts_raw, list) or not isinstance(desc_raw, list):
            raise ProviderError("feature response requires 'keypoints' and 'descriptors'")
        if len(kpts_raw) != len(desc_raw):
            raise ProviderError("keypoints and descriptors must align")
        if not kpts_raw:
            return empty_feature_set(self.descriptor_dim)
        try:
            pts = np.asarray(kpts_raw, dtype=np.float64)
            desc = np.asarray(desc_raw, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ProviderError("feature response has non-numeric entries") from exc
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ProviderError("keypoints must be [x, y] pairs")
        if desc.ndim != 2 or desc.shape[1] != self.descriptor_dim:
            raise ProviderError(f"descriptors must have length {self.descriptor_dim}")
        if np.any(pts[:, 0] < 0) or np.any(pts[:, 0] >= w) or np.any(
            pts[:, 1] < 0
        ) or np.any(pts[:, 1] >= h):
            raise ProviderError("keypoint coordinates out of image bounds")
        pts = pts[:max_keypoints]
        desc = desc[:max_keypoints]
        norms = np.linalg.norm(desc, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ProviderError("descriptor rows must be nonzero")
        desc = desc / norms
        keypoints = tuple(
            Keypoint(x=float(x), y=float(y), response=1.0) for x, y in pts
        )
        return FeatureSet(keypoints=keypoints, descriptors=desc)

    def fingerprint(self) -> str:
        return f"remote_features(dim={self.descriptor_dim})"


class RemoteMatcher:
    """POSTs both feature sets, expects {"matches": [[i, j], ...]}.

    Returned indices are validated against both sets and distances are
    recomputed locally; RANSAC verification always runs on this side.
    """

    def __init__(self, cfg: EndpointConfig):
        self._client = _Client(cfg)

    def match(self, a: FeatureSet, b: FeatureSet) -> MatchSet:
        if a.descriptor_dim != b.descriptor_dim:
            raise DataError(
                f"descriptor length mismatch: {a.descriptor_dim} vs {b.descriptor_dim}"
            )
        if len(a) == 0 or len(b) == 0:
            return MatchSet(correspondences=())
        import json

        payload = json.dumps(
            {
                "desc_a": a.descriptors.tolist(),
                "desc_b": b.descriptors.tolist(),
                "kpts_a": a.points().tolist(),
                "kpts_b": b.points().tolist(),
            }
        )
        body = self._client.post(payload, "application/json")
        if not isinstance(body, dict) or not isinstance(body.get("matches"), list):
            raise ProviderError("match response must contain a 'matches' list")
        seen_a: set[int] = set()
        seen_b: set[int] = set()
        correspondences = []
        for pair in body["matches"]:
            if (
                not isinstance(pair, list)
                or len(pair) != 2
                or not all(isinstance(v, int) for v in pair)
            ):
                raise ProviderError("matches must be [i, j] integer pairs")
            i, j = pair
            if not (0 <= i < len(a)) or not (0 <= j < len(b)):
                raise ProviderError(f"match index {pair} out of range")
            if i in seen_a or j in seen_b:
                raise ProviderError(f"match index {pair} repeats a keypoint")
            seen_a.add(i)
            seen_b.add(j)
            distance = float(np.linalg.norm(a.descriptors[i] - b.descriptors[j]))
            correspondences.append(
                Correspondence(query_idx=i, gallery_idx=j, distance=distance)
            )
        return MatchSet(correspondences=tuple(correspondences))

    def fingerprint(self) -> str:
        return "remote_match"
