"""Keypoint detection and descriptor extraction.

The reference backend is a classical Harris corner detector with a
mean-subtracted intensity-patch descriptor; deterministic, dependency-free,
and good enough for near-planar product faces. Learned extractors plug in
through the remote provider.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy import ndimage

from .errors import DataError
from .imutils import bilinear_sample, to_gray

# Smallest image the reference detector will process; below this the
# descriptor footprint no longer fits and extraction returns empty.
MIN_IMAGE_SIDE = 16

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    response: float


@dataclass(frozen=True)
class FeatureSet:
    """Keypoints plus row-aligned, L2-normalized descriptors."""

    keypoints: tuple[Keypoint, ...]
    descriptors: np.ndarray  # (len(keypoints), D) float64

    def __post_init__(self) -> None:
        if self.descriptors.ndim != 2 or self.descriptors.shape[0] != len(self.keypoints):
            raise DataError("descriptor rows must align 1:1 with keypoints")

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def descriptor_dim(self) -> int:
        return int(self.descriptors.shape[1])

    def points(self) -> np.ndarray:
        if not self.keypoints:
            return np.zeros((0, 2), dtype=np.float64)
        return np.array([[k.x, k.y] for k in self.keypoints], dtype=np.float64)


def empty_feature_set(descriptor_dim: int = 64) -> FeatureSet:
    return FeatureSet(keypoints=(), descriptors=np.zeros((0, descriptor_dim)))


class FeatureProvider(Protocol):
    descriptor_dim: int

    def extract(self, image: np.ndarray, max_keypoints: int) -> FeatureSet: ...

    def fingerprint(self) -> str: ...


class HarrisFeatures:
    """Harris corners with 8x8 intensity-patch descriptors.

    Detection: Sobel gradients, Gaussian structure-tensor window
    (sigma=1.5), response det(M) - k * trace(M)^2 with k=0.04, 3x3
    non-max suppression, top-N by response.

    Description: 8x8 grayscale samples on a 2-px grid centered at the
    keypoint (D=64), mean-subtracted and L2-normalized, which cancels
    brightness shifts and contrast scaling.
    """

    descriptor_dim = 64
    _PATCH_OFFSETS = (np.arange(8, dtype=np.float64) - 3.5) * 2.0

    def __init__(self, k: float = 0.04, sigma: float = 1.5, response_floor: float = 1e-6):
        self.k = float(k)
        self.sigma = float(sigma)
        self.response_floor = float(response_floor)

    def extract(self, image: np.ndarray, max_keypoints: int) -> FeatureSet:
        if max_keypoints < 1:
            raise DataError("max_keypoints must be >= 1")
        h, w = image.shape[:2]
        if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
            return empty_feature_set(self.descriptor_dim)
        gray = to_gray(image) / 255.0
        response = self._harris_response(gray)
        xs, ys = self._local_maxima(response)
        if xs.size == 0:
            return empty_feature_set(self.descriptor_dim)

        resp = response[ys, xs]
        # Deterministic order: response desc, then scan order.
        order = np.lexsort((xs, ys, -resp))[:max_keypoints]
        xs, ys, resp = xs[order], ys[order], resp[order]

        descriptors, keep = self._describe(gray, xs, ys)
        keypoints = tuple(
            Keypoint(x=float(xs[i]), y=float(ys[i]), response=float(resp[i]))
            for i in keep
        )
        return FeatureSet(keypoints=keypoints, descriptors=descriptors)

    def _harris_response(self, gray: np.ndarray) -> np.ndarray:
        ix = ndimage.convolve(gray, _SOBEL_X, mode="nearest")
        iy = ndimage.convolve(gray, _SOBEL_Y, mode="nearest")
        sxx = ndimage.gaussian_filter(ix * ix, sigma=self.sigma, mode="nearest")
        syy = ndimage.gaussian_filter(iy * iy, sigma=self.sigma, mode="nearest")
        sxy = ndimage.gaussian_filter(ix * iy, sigma=self.sigma, mode="nearest")
        return sxx * syy - sxy * sxy - self.k * (sxx + syy) ** 2

    def _local_maxima(self, response: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        peak = ndimage.maximum_filter(response, size=3, mode="nearest")
        mask = (response >= peak) & (response > self.response_floor)
        ys, xs = np.nonzero(mask)
        return xs, ys

    def _describe(
        self, gray: np.ndarray, xs: np.ndarray, ys: np.ndarray
    ) -> tuple[np.ndarray, list[int]]:
        ox, oy = np.meshgrid(self._PATCH_OFFSETS, self._PATCH_OFFSETS)
        descriptors = []
        keep = []
        for i in range(xs.size):
            patch = bilinear_sample(gray, xs[i] + ox, ys[i] + oy).ravel()
            patch = patch - patch.mean()
            norm = np.linalg.norm(patch)
            if norm < 1e-12:
                continue  # textureless patch carries no signal
            descriptors.append(patch / norm)
            keep.append(i)
        if not descriptors:
            return np.zeros((0, self.descriptor_dim)), []
        return np.vstack(descriptors), keep

    def fingerprint(self) -> str:
        return f"harris(k={self.k},sigma={self.sigma})"


def extract_features(
    provider: FeatureProvider, image: np.ndarray, max_keypoints: int = 1024
) -> FeatureSet:
    """Extract at most ``max_keypoints`` keypoints, strongest first."""
    if image.size == 0:
        raise DataError("cannot extract features from an empty image")
    return provider.extract(image, max_keypoints)


def filter_by_mask(features: FeatureSet, mask: np.ndarray) -> FeatureSet:
    """Drop keypoints whose rounded position lands on a background pixel.

    Used by the pipeline to gate crop features with the segmentation mask,
    so boundary responses straddling the mask edge never leak background
    correspondences into verification.
    """
    if not features.keypoints:
        return features
    h, w = mask.shape
    keep = []
    for i, kp in enumerate(features.keypoints):
        xi = min(max(int(round(kp.x)), 0), w - 1)
        yi = min(max(int(round(kp.y)), 0), h - 1)
        if mask[yi, xi]:
            keep.append(i)
    if len(keep) == len(features.keypoints):
        return features
    return FeatureSet(
        keypoints=tuple(features.keypoints[i] for i in keep),
        descriptors=features.descriptors[keep]
        if keep
        else np.zeros((0, features.descriptors.shape[1])),
    )
