"""Segmenter providers, primary-detection selection, and mask-gated cropping.

Stage 2 isolates the product region before keypoint extraction: pick the
detection with the largest box area, crop to its box, and zero every pixel
outside its mask. When a segmenter finds nothing the full image passes
through unmasked and the fallback is flagged, so retrieval degrades to
no-segmentation behavior instead of failing the query.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy import ndimage

from .errors import DataError
from .imutils import load_mask


@dataclass(frozen=True)
class BoundingBox:
    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DataError(f"degenerate box {(self.x1, self.y1, self.x2, self.y2)}")
        if self.x1 < 0 or self.y1 < 0:
            raise DataError("box coordinates must be non-negative")

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    """One detected object: box, full-frame binary mask, unused label, score."""

    box: BoundingBox
    mask: np.ndarray
    label: str = "object"
    score: float = 1.0

    def __post_init__(self) -> None:
        if self.mask.dtype != np.bool_:
            object.__setattr__(self, "mask", self.mask.astype(bool))
        if not self.mask.any():
            raise DataError("detection mask has no foreground pixels")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"detection score {self.score} outside [0, 1]")

    def validate_against(self, width: int, height: int) -> None:
        if self.mask.shape != (height, width):
            raise DataError(
                f"mask shape {self.mask.shape} != image shape {(height, width)}"
            )
        if self.box.x2 > width or self.box.y2 > height:
            raise DataError("box extends beyond image bounds")


@dataclass(frozen=True)
class SegmentationOutput:
    detections: tuple[Detection, ...]
    source_dims: tuple[int, int]  # (W, H)

    def __post_init__(self) -> None:
        w, h = self.source_dims
        for det in self.detections:
            det.validate_against(w, h)


class SegmenterProvider(Protocol):
    def segment(
        self, image: np.ndarray, mask_path: str | Path | None = None
    ) -> SegmentationOutput: ...

    def fingerprint(self) -> str: ...


class IdentitySegmenter:
    """Whole image as a single detection with an all-ones mask."""

    def segment(self, image, mask_path=None) -> SegmentationOutput:
        h, w = image.shape[:2]
        det = Detection(
            box=BoundingBox(0, 0, w, h),
            mask=np.ones((h, w), dtype=bool),
            label="object",
            score=1.0,
        )
        return SegmentationOutput(detections=(det,), source_dims=(w, h))

    def fingerprint(self) -> str:
        return "identity"


class MaskFileSegmenter:
    """Reads the ground-truth mask referenced by the catalog entry."""

    def segment(self, image, mask_path=None) -> SegmentationOutput:
        if mask_path is None:
            raise DataError("mask_file segmenter requires a mask reference")
        h, w = image.shape[:2]
        mask = load_mask(mask_path)
        if mask.shape != (h, w):
            raise DataError(
                f"mask file {mask_path} shape {mask.shape} != image shape {(h, w)}"
            )
        if not mask.any():
            return SegmentationOutput(detections=(), source_dims=(w, h))
        det = Detection(box=_tight_box(mask), mask=mask, label="object", score=1.0)
        return SegmentationOutput(detections=(det,), source_dims=(w, h))

    def fingerprint(self) -> str:
        return "mask_file"


class ThresholdSegmenter:
    """Background-difference segmenter for synthetic scenes.

    Pixels whose max per-channel absolute difference from a known
    background plate exceeds the threshold are foreground; 8-connected
    components of at least ``min_area`` pixels become detections.
    """

    _STRUCTURE = np.ones((3, 3), dtype=bool)  # 8-connectivity

    def __init__(self, background: np.ndarray, threshold: int = 25, min_area: int = 100):
        if background.ndim != 3 or background.shape[2] != 3:
            raise DataError("background plate must be an (H, W, 3) image")
        self.background = background.astype(np.int16)
        self.threshold = int(threshold)
        self.min_area = int(min_area)

    def segment(self, image, mask_path=None) -> SegmentationOutput:
        h, w = image.shape[:2]
        if self.background.shape[:2] != (h, w):
            raise DataError(
                f"image shape {(h, w)} != background plate shape "
                f"{self.background.shape[:2]}"
            )
        diff = np.abs(image.astype(np.int16) - self.background).max(axis=2)
        fg = diff > self.threshold
        labeled, n = ndimage.label(fg, structure=self._STRUCTURE)
        detections = []
        for comp in range(1, n + 1):
            mask = labeled == comp
            area = int(mask.sum())
            if area < self.min_area:
                continue
            detections.append(
                Detection(box=_tight_box(mask), mask=mask, label="object", score=1.0)
            )
        return SegmentationOutput(detections=tuple(detections), source_dims=(w, h))

    def fingerprint(self) -> str:
        return f"threshold(t={self.threshold},min_area={self.min_area})"


def _tight_box(mask: np.ndarray) -> BoundingBox:
    ys, xs = np.nonzero(mask)
    return BoundingBox(
        x1=int(xs.min()), y1=int(ys.min()), x2=int(xs.max()) + 1, y2=int(ys.max()) + 1
    )


def segment(
    provider: SegmenterProvider,
    image: np.ndarray,
    mask_path: str | Path | None = None,
) -> SegmentationOutput:
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError("expected a 3-channel raster image")
    return provider.segment(image, mask_path=mask_path)


def select_primary_detection(output: SegmentationOutput) -> Detection | None:
    """Detection with the largest box area; ties go to the lowest index."""
    best: Detection | None = None
    best_area = -1
    for det in output.detections:
        if det.box.area > best_area:
            best = det
            best_area = det.box.area
    return best


def crop_with_mask(image: np.ndarray, detection: Detection) -> np.ndarray:
    """Crop to the detection box and zero pixels outside the mask."""
    h, w = image.shape[:2]
    box = detection.box
    if box.x2 > w or box.y2 > h:
        raise DataError("detection box out of image bounds")
    crop = image[box.y1 : box.y2, box.x1 : box.x2].copy()
    mask_crop = detection.mask[box.y1 : box.y2, box.x1 : box.x2]
    crop[~mask_crop] = 0
    return crop


@dataclass(frozen=True)
class PreparedRegion:
    """Result of prepare_region: the working raster plus its provenance.

    ``origin`` is the (x1, y1) offset of the crop within the source frame,
    so keypoints found in ``image`` map back via origin + (x, y).
    """

    image: np.ndarray
    origin: tuple[int, int]
    fallback: bool
    detection: Detection | None

    @property
    def mask_crop(self) -> np.ndarray | None:
        if self.detection is None:
            return None
        box = self.detection.box
        return self.detection.mask[box.y1 : box.y2, box.x1 : box.x2]


def prepare_region(
    provider: SegmenterProvider,
    image: np.ndarray,
    mask_path: str | Path | None = None,
) -> PreparedRegion:
    """Segment, select the primary detection, and crop with its mask.

    With zero detections the full unmasked image is returned and
    ``fallback`` is set so the pipeline can record it in the stage trace.
    """
    output = segment(provider, image, mask_path=mask_path)
    primary = select_primary_detection(output)
    if primary is None:
        return PreparedRegion(image=image, origin=(0, 0), fallback=True, detection=None)
    crop = crop_with_mask(image, primary)
    return PreparedRegion(
        image=crop, origin=(primary.box.x1, primary.box.y1), fallback=False,
        detection=primary,
    )
