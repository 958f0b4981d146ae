"""Descriptor correspondence and RANSAC homography verification.

The reference matcher pairs descriptors that are mutual nearest neighbors
and pass a nearest/second-nearest ratio test. Verification fits a planar
homography (4-point DLT with coordinate normalization) under RANSAC and
scores a candidate by its inlier count.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb, log
from typing import Protocol

import numpy as np

from .errors import DataError
from .features import FeatureSet

DEFAULT_RANSAC_THRESHOLD_PX = 3.0
DEFAULT_RANSAC_MAX_ITERS = 2000
DEFAULT_RANSAC_CONFIDENCE = 0.99

_SAMPLE_CHUNK = 512
_COLLINEAR_EPS = 1e-8


@dataclass(frozen=True)
class Correspondence:
    query_idx: int
    gallery_idx: int
    distance: float


@dataclass(frozen=True)
class HomographyModel:
    """Invertible 3x3 projective map, normalized so H[2][2] = 1."""

    h: np.ndarray

    def __post_init__(self) -> None:
        mat = np.asarray(self.h, dtype=np.float64)
        if mat.shape != (3, 3):
            raise DataError("homography must be 3x3")
        if abs(mat[2, 2]) > 1e-12:
            mat = mat / mat[2, 2]
        if abs(np.linalg.det(mat)) <= 1e-12:
            raise DataError("homography is not invertible")
        object.__setattr__(self, "h", mat)

    def project(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        proj = (self.h @ np.hstack([pts, ones]).T).T
        return proj[:, :2] / proj[:, 2:3]


@dataclass(frozen=True)
class MatchSet:
    correspondences: tuple[Correspondence, ...]
    inlier_flags: tuple[bool, ...] | None = None
    model: HomographyModel | None = None

    def __post_init__(self) -> None:
        if self.inlier_flags is not None and len(self.inlier_flags) != len(
            self.correspondences
        ):
            raise DataError("inlier_flags must align with correspondences")

    def __len__(self) -> int:
        return len(self.correspondences)


class MatcherProvider(Protocol):
    def match(self, a: FeatureSet, b: FeatureSet) -> MatchSet: ...

    def fingerprint(self) -> str: ...


class MutualRatioMatcher:
    """Mutual nearest neighbor matching with a Lowe ratio test.

    A pair (i, j) is kept when j is i's nearest gallery descriptor, i is
    j's nearest query descriptor (if ``mutual``), and the nearest to
    second-nearest distance ratio is strictly below ``ratio``. Each
    keypoint therefore appears in at most one correspondence.
    """

    def __init__(self, ratio: float = 0.8, mutual: bool = True):
        if not 0.0 < ratio <= 1.0:
            raise DataError("ratio must be in (0, 1]")
        self.ratio = float(ratio)
        self.mutual = bool(mutual)

    def match(self, a: FeatureSet, b: FeatureSet) -> MatchSet:
        if len(a) == 0 or len(b) == 0:
            return MatchSet(correspondences=())
        if a.descriptor_dim != b.descriptor_dim:
            raise DataError(
                f"descriptor length mismatch: {a.descriptor_dim} vs {b.descriptor_dim}"
            )
        d2 = _sq_distance_matrix(a.descriptors, b.descriptors)
        nearest = d2.argmin(axis=1)
        rows = np.arange(len(a))
        d1 = d2[rows, nearest]

        if d2.shape[1] >= 2:
            masked = d2.copy()
            masked[rows, nearest] = np.inf
            d_second = masked.min(axis=1)
        else:
            d_second = np.full(len(a), np.inf)

        # Strict ratio in the squared domain: d1 < r^2 * d2nd. Equidistant
        # neighbors (ratio exactly 1) are ambiguous and rejected.
        with np.errstate(invalid="ignore"):
            ok = d1 < (self.ratio * self.ratio) * d_second
        if self.mutual:
            reverse = d2.argmin(axis=0)
            ok &= reverse[nearest] == rows

        correspondences = tuple(
            Correspondence(
                query_idx=int(i),
                gallery_idx=int(nearest[i]),
                distance=float(np.sqrt(max(d1[i], 0.0))),
            )
            for i in np.nonzero(ok)[0]
        )
        return MatchSet(correspondences=correspondences)

    def fingerprint(self) -> str:
        return f"mutual_ratio(ratio={self.ratio},mutual={self.mutual})"


def _sq_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    an = (a * a).sum(axis=1)[:, None]
    bn = (b * b).sum(axis=1)[None, :]
    d2 = an + bn - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def match_descriptors(provider: MatcherProvider, a: FeatureSet, b: FeatureSet) -> MatchSet:
    return provider.match(a, b)


def homography_from_points(src: np.ndarray, dst: np.ndarray) -> HomographyModel:
    """Fit a homography mapping src -> dst from >= 4 point pairs (DLT)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.shape[0] < 4 or src.shape[1] != 2:
        raise DataError("need matching (N, 2) arrays with N >= 4")
    h = _solve_batch(src[None], dst[None])[0]
    if not np.all(np.isfinite(h)):
        raise DataError("degenerate point configuration")
    return HomographyModel(h=h)


def _normalize_batch(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hartley normalization per sample: centroid to origin, mean dist sqrt(2).

    Returns (normalized points, T, T_inverse); samples whose points are
    coincident produce non-finite transforms and are filtered later.
    """
    centroid = pts.mean(axis=1, keepdims=True)
    dist = np.sqrt(((pts - centroid) ** 2).sum(axis=2)).mean(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.sqrt(2.0) / dist
    s_count = pts.shape[0]
    t_mat = np.zeros((s_count, 3, 3))
    t_mat[:, 0, 0] = scale
    t_mat[:, 1, 1] = scale
    t_mat[:, 0, 2] = -scale * centroid[:, 0, 0]
    t_mat[:, 1, 2] = -scale * centroid[:, 0, 1]
    t_mat[:, 2, 2] = 1.0
    t_inv = np.zeros((s_count, 3, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_scale = 1.0 / scale
    t_inv[:, 0, 0] = inv_scale
    t_inv[:, 1, 1] = inv_scale
    t_inv[:, 0, 2] = centroid[:, 0, 0]
    t_inv[:, 1, 2] = centroid[:, 0, 1]
    t_inv[:, 2, 2] = 1.0
    normalized = (pts - centroid) * scale[:, None, None]
    return normalized, t_mat, t_inv


def _collinear_mask(pts: np.ndarray) -> np.ndarray:
    """True where all triangles formed by a sample's 4 points are degenerate."""
    max_area = np.zeros(pts.shape[0])
    for i, j, k in itertools.combinations(range(4), 3):
        v1 = pts[:, j] - pts[:, i]
        v2 = pts[:, k] - pts[:, i]
        area = 0.5 * np.abs(v1[:, 0] * v2[:, 1] - v1[:, 1] * v2[:, 0])
        max_area = np.maximum(max_area, area)
    return max_area <= _COLLINEAR_EPS


def _solve_batch(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """DLT-solve homographies for (S, M, 2) point batches; NaN rows on failure."""
    s_count, m_count, _ = src.shape
    src_n, t_src, _ = _normalize_batch(src)
    dst_n, _, t_dst_inv = _normalize_batch(dst)

    a_mat = np.zeros((s_count, 2 * m_count, 9))
    x, y = src_n[:, :, 0], src_n[:, :, 1]
    u, v = dst_n[:, :, 0], dst_n[:, :, 1]
    a_mat[:, 0::2, 0] = x
    a_mat[:, 0::2, 1] = y
    a_mat[:, 0::2, 2] = 1.0
    a_mat[:, 0::2, 6] = -u * x
    a_mat[:, 0::2, 7] = -u * y
    a_mat[:, 0::2, 8] = -u
    a_mat[:, 1::2, 3] = x
    a_mat[:, 1::2, 4] = y
    a_mat[:, 1::2, 5] = 1.0
    a_mat[:, 1::2, 6] = -v * x
    a_mat[:, 1::2, 7] = -v * y
    a_mat[:, 1::2, 8] = -v

    bad = ~np.all(np.isfinite(a_mat), axis=(1, 2))
    a_mat[bad] = 0.0
    _, _, vt = np.linalg.svd(a_mat)
    h_norm = vt[:, -1, :].reshape(s_count, 3, 3)
    h_full = t_dst_inv @ h_norm @ t_src

    denom = h_full[:, 2, 2]
    safe = np.abs(denom) > 1e-12
    h_full[safe] = h_full[safe] / denom[safe, None, None]
    h_full[bad] = np.nan
    h_full[~safe] = np.nan
    return h_full


def _projection_errors(h_batch: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Reprojection error ||H p - p'|| for every model x correspondence."""
    n = src.shape[0]
    homog = np.hstack([src, np.ones((n, 1))])  # (n, 3)
    proj = h_batch @ homog.T  # (S, 3, n)
    w = proj[:, 2, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = proj[:, 0, :] / w
        py = proj[:, 1, :] / w
    err = np.sqrt((px - dst[:, 0]) ** 2 + (py - dst[:, 1]) ** 2)
    err[~np.isfinite(err)] = np.inf
    return err


def ransac_verify(
    matches: MatchSet,
    a: FeatureSet,
    b: FeatureSet,
    threshold_px: float = DEFAULT_RANSAC_THRESHOLD_PX,
    max_iters: int = DEFAULT_RANSAC_MAX_ITERS,
    confidence: float = DEFAULT_RANSAC_CONFIDENCE,
    seed: int = 0,
    exhaustive: bool | None = None,
) -> MatchSet:
    """Verify correspondences against a RANSAC-fit homography.

    Fewer than 4 correspondences yield zero inliers and no model. The best
    model maximizes the inlier count (reprojection error below
    ``threshold_px``); ties prefer the lower total inlier error. Iterations
    stop at the adaptive bound implied by ``confidence`` and the best
    inlier ratio so far, capped at ``max_iters``. Collinear minimal samples
    are rejected and redrawn (they still consume budget, so termination is
    guaranteed). With ``exhaustive`` (default: automatic when the number of
    4-subsets fits within ``max_iters``) every minimal sample is evaluated,
    which makes the result independent of the seed.

    Deterministic for fixed inputs and seed.
    """
    if threshold_px <= 0:
        raise DataError("threshold_px must be > 0")
    if not 0.0 < confidence < 1.0:
        raise DataError("confidence must be in (0, 1)")
    n = len(matches)
    if n < 4:
        return MatchSet(
            correspondences=matches.correspondences,
            inlier_flags=tuple(False for _ in range(n)),
            model=None,
        )

    src = np.array(
        [[a.keypoints[m.query_idx].x, a.keypoints[m.query_idx].y] for m in matches.correspondences]
    )
    dst = np.array(
        [[b.keypoints[m.gallery_idx].x, b.keypoints[m.gallery_idx].y] for m in matches.correspondences]
    )

    total_subsets = comb(n, 4)
    if exhaustive is None:
        exhaustive = total_subsets <= max_iters

    best_count = -1
    best_err_sum = np.inf
    best_h: np.ndarray | None = None
    best_flags: np.ndarray | None = None

    def consider(idx_chunk: np.ndarray) -> None:
        nonlocal best_count, best_err_sum, best_h, best_flags
        sample_src = src[idx_chunk]  # (S, 4, 2)
        sample_dst = dst[idx_chunk]
        degenerate = _collinear_mask(sample_src) | _collinear_mask(sample_dst)
        h_batch = _solve_batch(sample_src, sample_dst)
        valid = ~degenerate & np.all(np.isfinite(h_batch), axis=(1, 2))
        if not valid.any():
            return
        h_batch = h_batch[valid]
        err = _projection_errors(h_batch, src, dst)
        inliers = err < threshold_px
        counts = inliers.sum(axis=1)
        err_sums = np.where(inliers, err, 0.0).sum(axis=1)
        # Chunk-best by (count desc, inlier error asc, sample order asc);
        # boolean masking preserved sample order, so lexsort's positional
        # key keeps first-occurrence-wins semantics.
        pos = int(np.lexsort((np.arange(counts.size), err_sums, -counts))[0])
        c, e = int(counts[pos]), float(err_sums[pos])
        if c > best_count or (c == best_count and e < best_err_sum):
            best_count = c
            best_err_sum = e
            best_h = h_batch[pos]
            best_flags = inliers[pos]

    if exhaustive:
        combo_iter = itertools.combinations(range(n), 4)
        while True:
            chunk = list(itertools.islice(combo_iter, _SAMPLE_CHUNK))
            if not chunk:
                break
            consider(np.array(chunk, dtype=np.int64))
    else:
        rng = np.random.Generator(np.random.PCG64(seed))
        done = 0
        budget = max_iters
        chunk = 64  # grows toward _SAMPLE_CHUNK; high-inlier pairs exit early
        while done < budget:
            size = min(chunk, budget - done)
            chunk = min(chunk * 2, _SAMPLE_CHUNK)
            draws = rng.random((size, n)).argpartition(3, axis=1)[:, :4]
            consider(draws)
            done += size
            if best_count >= 4:
                ratio = best_count / n
                if ratio >= 1.0:
                    break
                denom = log(1.0 - ratio**4)
                if denom < 0.0:
                    needed = log(1.0 - confidence) / denom
                    budget = min(budget, max(done, int(np.ceil(needed))))

    if best_h is None or best_count < 4:
        return MatchSet(
            correspondences=matches.correspondences,
            inlier_flags=tuple(False for _ in range(n)),
            model=None,
        )
    try:
        model = HomographyModel(h=best_h)
    except DataError:
        return MatchSet(
            correspondences=matches.correspondences,
            inlier_flags=tuple(False for _ in range(n)),
            model=None,
        )
    return MatchSet(
        correspondences=matches.correspondences,
        inlier_flags=tuple(bool(f) for f in best_flags),
        model=model,
    )


def inlier_count(matches: MatchSet) -> int:
    if matches.inlier_flags is None:
        return 0
    return sum(1 for f in matches.inlier_flags if f)


def pair_seed(query_id: str, gallery_image_id: str, salt: int = 0) -> int:
    """Per-pair RANSAC seed so results stay independent of scheduling order."""
    from .imutils import stable_hash64

    return stable_hash64("ransac", str(salt), query_id, gallery_image_id)
