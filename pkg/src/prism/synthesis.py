"""Synthetic catalog and query generation with full ground truth.

Products are procedurally textured rectangles ("label art") rendered onto
a fixed, textured background plate. Look-alike families share base art and
differ only in a small glyph patch, which makes stage-1 embeddings nearly
tie within a family while keypoint verification can still separate the
members. Queries warp the art by a recorded homography, add background
clutter, occlusion, and photometric jitter, and carry exact masks.

Everything derives from per-product RNG streams seeded by
(dataset seed, stream tag, product index), so output is bit-reproducible
and independent of generation order.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .catalog import (
    CatalogManifest,
    ProductRecord,
    ViewImage,
    ViewLabel,
    save_manifest,
)
from .errors import DataError
from .evaluation import QueryLabel
from .imutils import apply_homography, save_image, save_mask, warp_image
from .matching import homography_from_points

ART_W, ART_H = 64, 80
_CLASS_CYCLE = ("canned", "bagged", "bottled")

# Fixed per-view geometry: (rotation deg, scale, x-squeeze, y-squeeze).
# front_view is canonical (identity) so zero-warp queries reproduce it.
_VIEW_POSES: dict[ViewLabel, tuple[float, float, float, float]] = {
    ViewLabel.BACK_DROP: (8.0, 0.92, 1.0, 1.0),
    ViewLabel.BOTTOM_DROP: (-6.0, 0.88, 1.0, 0.9),
    ViewLabel.FRONT_DROP: (3.0, 0.95, 1.0, 1.0),
    ViewLabel.FRONT_VIEW: (0.0, 1.0, 1.0, 1.0),
    ViewLabel.SIDE_DROP: (14.0, 0.90, 0.8, 1.0),
    ViewLabel.TOP_DROP: (-12.0, 0.85, 1.0, 0.85),
}


@dataclass(frozen=True)
class SynthSpec:
    n_products: int = 20
    n_queries_per_product: int = 2
    canvas_size: tuple[int, int] = (128, 128)  # (W, H)
    corner_jitter: float = 0.04  # fraction of placed art size
    rotation_deg: float = 8.0
    scale_range: tuple[float, float] = (0.9, 1.05)
    clutter_density: float = 0.0  # distractor patches per query
    occlusion_range: tuple[float, float] = (0.0, 0.0)
    brightness_range: tuple[float, float] = (0.0, 0.0)
    contrast_range: tuple[float, float] = (1.0, 1.0)
    similarity_groups: int = 1  # products per look-alike family
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_products < 1:
            raise DataError("n_products must be >= 1")
        if self.n_queries_per_product < 0:
            raise DataError("n_queries_per_product must be >= 0")
        w, h = self.canvas_size
        if w < 48 or h < 48:
            raise DataError("canvas must be at least 48x48")
        for lo, hi in (
            self.scale_range,
            self.occlusion_range,
            self.brightness_range,
            self.contrast_range,
        ):
            if lo > hi:
                raise DataError("range bounds must be ordered (lo <= hi)")
        if self.similarity_groups < 1:
            raise DataError("similarity_groups must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        kwargs = {}
        for key in cls.__dataclass_fields__:
            if key in doc:
                value = doc[key]
                if isinstance(value, list):
                    value = tuple(value)
                kwargs[key] = value
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise DataError(f"unknown synth spec fields: {sorted(unknown)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class SynthRecord:
    image_path: Path
    true_product_id: str
    mask_path: Path
    homography: np.ndarray  # front_view frame -> query frame
    occlusion_polygons: tuple[tuple[tuple[float, float], ...], ...]
    occlusion_frac: float


def _rng(spec: SynthSpec, *stream: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed & 0xFFFFFFFF, *stream])


def _mosaic(rng: np.random.Generator, w: int, h: int, cell: int) -> np.ndarray:
    """High-contrast block mosaic; cell corners feed the corner detector."""
    cols = -(-w // cell)
    rows = -(-h // cell)
    palette = rng.integers(0, 256, size=(rows, cols, 3))
    art = np.repeat(np.repeat(palette, cell, axis=0), cell, axis=1)
    return art[:h, :w].astype(np.uint8)


def _product_art(spec: SynthSpec, product_idx: int) -> np.ndarray:
    family_idx = product_idx // spec.similarity_groups
    base = _mosaic(_rng(spec, 7, family_idx), ART_W, ART_H, cell=8)
    art = base.copy()
    # Thin dark frame: stable corners at the art boundary.
    art[:2, :] = 16
    art[-2:, :] = 16
    art[:, :2] = 16
    art[:, -2:] = 16
    # Member-distinguishing glyph patch.
    member_rng = _rng(spec, 11, product_idx)
    glyph = _mosaic(member_rng, 20, 20, cell=5)
    gx = int(member_rng.integers(6, ART_W - 26))
    gy = int(member_rng.integers(6, ART_H - 26))
    art[gy : gy + 20, gx : gx + 20] = glyph
    return art


def _background_plate(spec: SynthSpec) -> np.ndarray:
    w, h = spec.canvas_size
    rng = _rng(spec, 3)
    c0 = rng.integers(60, 140, size=3).astype(np.float64)
    c1 = rng.integers(60, 140, size=3).astype(np.float64)
    ramp = np.linspace(0.0, 1.0, h)[:, None, None]
    gradient = (1 - ramp) * c0[None, None, :] + ramp * c1[None, None, :]
    plate = np.broadcast_to(gradient, (h, w, 3)).astype(np.uint8).copy()
    # Speckle squares make the plate keypoint-attracting, which is what the
    # out-of-mask diagnostic needs to expose.
    n_speckles = (w * h) // 400
    for _ in range(n_speckles):
        size = int(rng.integers(3, 8))
        x = int(rng.integers(0, max(1, w - size)))
        y = int(rng.integers(0, max(1, h - size)))
        color = rng.integers(0, 256, size=3)
        plate[y : y + size, x : x + size] = color
    return plate


def _art_corners() -> np.ndarray:
    return np.array(
        [[0.0, 0.0], [ART_W - 1.0, 0.0], [ART_W - 1.0, ART_H - 1.0], [0.0, ART_H - 1.0]]
    )


def _pose_quad(
    spec: SynthSpec,
    rotation_deg: float,
    scale: float,
    squeeze_x: float,
    squeeze_y: float,
    offset: tuple[float, float] = (0.0, 0.0),
) -> np.ndarray:
    """Map art corners through rotation/scale/squeeze into the canvas center."""
    w, h = spec.canvas_size
    fit = 0.72 * min(w / ART_W, h / ART_H)
    corners = _art_corners() - np.array([(ART_W - 1) / 2.0, (ART_H - 1) / 2.0])
    corners = corners * np.array([squeeze_x, squeeze_y]) * fit * scale
    theta = np.deg2rad(rotation_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    corners = corners @ rot.T
    return corners + np.array([(w - 1) / 2.0 + offset[0], (h - 1) / 2.0 + offset[1]])


def _view_homography(spec: SynthSpec, label: ViewLabel) -> np.ndarray:
    quad = _pose_quad(spec, *_VIEW_POSES[label])
    return homography_from_points(_art_corners(), quad).h


def _paste(canvas: np.ndarray, art: np.ndarray, h_mat: np.ndarray) -> np.ndarray:
    """Warp ``art`` onto ``canvas`` in place; returns the coverage mask.

    Only the destination bounding window of the warped quad is rendered.
    """
    ch, cw = canvas.shape[:2]
    quad = apply_homography(h_mat, _corners_of(art))
    x0 = max(int(np.floor(quad[:, 0].min())), 0)
    y0 = max(int(np.floor(quad[:, 1].min())), 0)
    x1 = min(int(np.ceil(quad[:, 0].max())) + 1, cw)
    y1 = min(int(np.ceil(quad[:, 1].max())) + 1, ch)
    coverage = np.zeros((ch, cw), dtype=bool)
    if x1 <= x0 or y1 <= y0:
        return coverage
    shift = np.array([[1.0, 0.0, -x0], [0.0, 1.0, -y0], [0.0, 0.0, 1.0]])
    window, mask = warp_image(art, shift @ h_mat, x1 - x0, y1 - y0)
    region = canvas[y0:y1, x0:x1]
    region[mask] = np.clip(np.rint(window[mask]), 0, 255).astype(np.uint8)
    coverage[y0:y1, x0:x1] = mask
    return coverage


def _corners_of(art: np.ndarray) -> np.ndarray:
    h, w = art.shape[:2]
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def generate_catalog(spec: SynthSpec, out_dir: str | Path) -> CatalogManifest:
    """Render n_products x 6 gallery views plus masks and the manifest.

    The background plate is written alongside the catalog (background.png)
    so the threshold segmenter can run without any learned model.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    masks_dir = out_dir / "masks"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
        masks_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output dir {out_dir}: {exc}") from exc

    plate = _background_plate(spec)
    save_image(plate, out_dir / "background.png")

    products = []
    for idx in range(spec.n_products):
        product_id = f"p{idx:04d}"
        family_idx = idx // spec.similarity_groups
        member_idx = idx % spec.similarity_groups
        art = _product_art(spec, idx)
        views = []
        for label in ViewLabel.order():
            h_mat = _view_homography(spec, label)
            canvas = plate.copy()
            coverage = _paste(canvas, art, h_mat)
            stem = f"{product_id}__{label.value}"
            image_path = images_dir / f"{stem}.png"
            mask_path = masks_dir / f"{stem}.png"
            save_image(canvas, image_path)
            save_mask(coverage, mask_path)
            views.append(
                ViewImage(
                    view=label,
                    image_ref=image_path,
                    image_id=stem,
                    mask_ref=mask_path,
                )
            )
        products.append(
            ProductRecord(
                product_id=product_id,
                display_name=f"family{family_idx:03d}-member{member_idx}",
                coarse_class=_CLASS_CYCLE[family_idx % len(_CLASS_CYCLE)],
                views=tuple(views),
            )
        )
    catalog = CatalogManifest(products=tuple(products), root_dir=out_dir.resolve())
    save_manifest(catalog, out_dir / "manifest.json")
    return catalog


def _query_homography(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Random perspective warp around the canonical front placement."""
    rotation = float(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
    scale = float(rng.uniform(*spec.scale_range))
    w, h = spec.canvas_size
    max_off = 0.06 * min(w, h)
    offset = (
        float(rng.uniform(-max_off, max_off)),
        float(rng.uniform(-max_off, max_off)),
    )
    quad = _pose_quad(spec, rotation, scale, 1.0, 1.0, offset=offset)
    span = float(np.ptp(quad, axis=0).mean())
    jitter = spec.corner_jitter * span
    quad = quad + rng.uniform(-jitter, jitter, size=quad.shape)
    return homography_from_points(_art_corners(), quad).h


def _photometric(
    art: np.ndarray, rng: np.random.Generator, spec: SynthSpec
) -> np.ndarray:
    contrast = float(rng.uniform(*spec.contrast_range))
    brightness = float(rng.uniform(*spec.brightness_range))
    out = art.astype(np.float64) * contrast + brightness
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _place_clutter(
    canvas: np.ndarray,
    forbidden: tuple[int, int, int, int],
    rng: np.random.Generator,
    count: int,
) -> None:
    """Paste distractor mosaics outside the product's bounding window."""
    ch, cw = canvas.shape[:2]
    fx0, fy0, fx1, fy1 = forbidden
    for _ in range(count):
        size = int(rng.integers(14, 30))
        for _attempt in range(40):
            x = int(rng.integers(0, max(1, cw - size)))
            y = int(rng.integers(0, max(1, ch - size)))
            if x + size <= fx0 or x >= fx1 or y + size <= fy0 or y >= fy1:
                patch = _mosaic(rng, size, size, cell=5)
                canvas[y : y + size, x : x + size] = patch
                break


def _occlude(
    canvas: np.ndarray,
    coverage: np.ndarray,
    rng: np.random.Generator,
    target_frac: float,
) -> tuple[np.ndarray, tuple[tuple[float, float], ...] | None]:
    """Cover roughly target_frac of the product with a textured rectangle."""
    if target_frac <= 0.0 or not coverage.any():
        return coverage, None
    area = float(coverage.sum())
    aspect = float(rng.uniform(0.6, 1.6))
    occ_w = max(4, int(round(np.sqrt(target_frac * area * aspect))))
    occ_h = max(4, int(round(np.sqrt(target_frac * area / aspect))))
    ys, xs = np.nonzero(coverage)
    pick = int(rng.integers(0, len(xs)))
    cx, cy = int(xs[pick]), int(ys[pick])
    ch, cw = canvas.shape[:2]
    x0 = min(max(cx - occ_w // 2, 0), max(cw - occ_w, 0))
    y0 = min(max(cy - occ_h // 2, 0), max(ch - occ_h, 0))
    x1 = min(x0 + occ_w, cw)
    y1 = min(y0 + occ_h, ch)
    canvas[y0:y1, x0:x1] = _mosaic(rng, x1 - x0, y1 - y0, cell=6)
    visible = coverage.copy()
    visible[y0:y1, x0:x1] = False
    polygon = (
        (float(x0), float(y0)),
        (float(x1), float(y0)),
        (float(x1), float(y1)),
        (float(x0), float(y1)),
    )
    return visible, polygon


def generate_queries(
    spec: SynthSpec, catalog: CatalogManifest, out_dir: str | Path
) -> tuple[list[SynthRecord], list[QueryLabel]]:
    """Render warped, cluttered, occluded queries with ground truth.

    The recorded homography maps front_view image coordinates into the
    query frame. Writes queries.json next to the rendered assets.
    """
    out_dir = Path(out_dir)
    queries_dir = out_dir / "queries"
    qmasks_dir = out_dir / "query_masks"
    queries_dir.mkdir(parents=True, exist_ok=True)
    qmasks_dir.mkdir(parents=True, exist_ok=True)

    plate = _background_plate(spec)
    h_front = _view_homography(spec, ViewLabel.FRONT_VIEW)
    h_front_inv = np.linalg.inv(h_front)

    records: list[SynthRecord] = []
    labels: list[QueryLabel] = []
    for idx, product in enumerate(catalog.products):
        art = _product_art(spec, idx)
        for j in range(spec.n_queries_per_product):
            rng = _rng(spec, 17, idx, j)
            h_q = _query_homography(spec, rng)
            art_q = _photometric(art, rng, spec)

            canvas = plate.copy()
            quad = apply_homography(h_q, _art_corners())
            forbidden = (
                int(np.floor(quad[:, 0].min())),
                int(np.floor(quad[:, 1].min())),
                int(np.ceil(quad[:, 0].max())) + 1,
                int(np.ceil(quad[:, 1].max())) + 1,
            )
            clutter_count = int(np.ceil(spec.clutter_density)) if spec.clutter_density > 0 else 0
            _place_clutter(canvas, forbidden, rng, clutter_count)
            coverage = _paste(canvas, art_q, h_q)

            occ_frac = float(rng.uniform(*spec.occlusion_range))
            visible, polygon = _occlude(canvas, coverage, rng, occ_frac)
            full_area = float(coverage.sum())
            achieved = 0.0 if full_area == 0 else 1.0 - float(visible.sum()) / full_area

            query_id = f"q_{product.product_id}_{j:03d}"
            image_path = queries_dir / f"{query_id}.png"
            mask_path = qmasks_dir / f"{query_id}.png"
            save_image(canvas, image_path)
            save_mask(visible, mask_path)

            records.append(
                SynthRecord(
                    image_path=image_path,
                    true_product_id=product.product_id,
                    mask_path=mask_path,
                    homography=h_q @ h_front_inv,
                    occlusion_polygons=(polygon,) if polygon else (),
                    occlusion_frac=achieved,
                )
            )
            labels.append(
                QueryLabel(query_id=query_id, true_product_id=product.product_id)
            )

    doc = [
        {
            "query_id": lab.query_id,
            "image": str(rec.image_path.relative_to(out_dir)),
            "true_product_id": rec.true_product_id,
            "mask": str(rec.mask_path.relative_to(out_dir)),
            "homography": [float(v) for v in rec.homography.ravel()],
            "occlusion_frac": rec.occlusion_frac,
        }
        for rec, lab in zip(records, labels)
    ]
    (out_dir / "queries.json").write_text(json.dumps(doc, indent=2), encoding="utf-8")
    return records, labels
