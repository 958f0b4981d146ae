"""Image I/O and small raster helpers used across modules.

In-memory convention: images are uint8 RGB arrays of shape (H, W, 3),
masks are bool arrays of shape (H, W). Sizes exposed through public
types use (W, H) order.
"""
from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

# Rec. 601 luma weights.
_LUMA = np.array([0.299, 0.587, 0.114])


def load_image(path: str | Path) -> np.ndarray:
    """Decode a PNG/JPEG file into an (H, W, 3) uint8 RGB array."""
    try:
        with Image.open(path) as im:
            rgb = im.convert("RGB")
            return np.asarray(rgb, dtype=np.uint8)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def save_image(image: np.ndarray, path: str | Path) -> None:
    arr = np.ascontiguousarray(image, dtype=np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    """Read a single-channel mask PNG; nonzero pixels are foreground."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
            return arr > 0
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from exc


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    arr = np.where(mask, 255, 0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


def encode_png(image: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8), mode="RGB").save(
        buf, format="PNG"
    )
    return buf.getvalue()


def to_gray(image: np.ndarray) -> np.ndarray:
    """Convert an RGB image to float64 grayscale in [0, 255]."""
    if image.ndim == 2:
        return image.astype(np.float64)
    return image[..., :3].astype(np.float64) @ _LUMA


def block_mean(gray: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Downscale by averaging axis-aligned blocks; works for any input size >= 1."""
    h, w = gray.shape
    rows = [_bin_slice(h, out_h, i) for i in range(out_h)]
    cols = [_bin_slice(w, out_w, j) for j in range(out_w)]
    out = np.empty((out_h, out_w), dtype=np.float64)
    for i, (r0, r1) in enumerate(rows):
        band = gray[r0:r1]
        for j, (c0, c1) in enumerate(cols):
            out[i, j] = band[:, c0:c1].mean()
    return out


def _bin_slice(n: int, bins: int, i: int) -> tuple[int, int]:
    start = (i * n) // bins
    end = ((i + 1) * n) // bins
    if end <= start:  # n < bins: degrade to single-pixel sampling
        end = min(start + 1, n)
        start = end - 1
    return start, end


def bilinear_sample(gray: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample a grayscale image at float coordinates; zero outside the frame."""
    h, w = gray.shape
    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0

    def at(yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros(yy.shape, dtype=np.float64)
        vals[inside] = gray[yy[inside], xx[inside]]
        return vals

    v00 = at(y0, x0)
    v01 = at(y0, x0 + 1)
    v10 = at(y0 + 1, x0)
    v11 = at(y0 + 1, x0 + 1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def apply_homography(h_mat: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Map (N, 2) points through a 3x3 homography."""
    pts = np.asarray(points, dtype=np.float64)
    ones = np.ones((pts.shape[0], 1))
    proj = (h_mat @ np.hstack([pts, ones]).T).T
    return proj[:, :2] / proj[:, 2:3]


def warp_image(
    src: np.ndarray,
    h_mat: np.ndarray,
    out_w: int,
    out_h: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Render ``src`` into an (out_h, out_w) frame under ``h_mat`` (src -> dst).

    Inverse-maps each destination pixel center; pixels whose preimage falls
    outside the source are left at zero. Returns (warped float64 RGB image,
    bool coverage mask). Coverage is a hard in-bounds test, so mask edges are
    exact rather than anti-aliased.
    """
    hinv = np.linalg.inv(h_mat)
    ys, xs = np.mgrid[0:out_h, 0:out_w]
    flat = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src_pts = apply_homography(hinv, flat)
    sx = src_pts[:, 0].reshape(out_h, out_w)
    sy = src_pts[:, 1].reshape(out_h, out_w)
    sh, sw = src.shape[:2]
    mask = (sx >= 0) & (sx <= sw - 1) & (sy >= 0) & (sy <= sh - 1)

    out = np.zeros((out_h, out_w, 3), dtype=np.float64)
    for c in range(3):
        out[..., c] = bilinear_sample(src[..., c].astype(np.float64), sx, sy)
    out[~mask] = 0.0
    return out, mask


def stable_hash64(*parts: bytes | str) -> int:
    """Deterministic 64-bit hash of a sequence of byte/string parts."""
    h = hashlib.blake2b(digest_size=8)
    for part in parts:
        data = part.encode("utf-8") if isinstance(part, str) else part
        h.update(len(data).to_bytes(8, "little"))
        h.update(data)
    return int.from_bytes(h.digest(), "little")
