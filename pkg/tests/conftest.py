import json

import numpy as np
import pytest

from prism.imutils import save_image

VIEW_ORDER = ("back_drop", "bottom_drop", "front_drop", "front_view", "side_drop", "top_drop")


def make_rgb(h: int, w: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def checkerboard(size: int = 64, cell: int = 8) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    board = (((ys // cell) + (xs // cell)) % 2) * 255
    return np.stack([board] * 3, axis=2).astype(np.uint8)


def write_manifest(tmp_path, products, root_dir=".", embedding_store=None):
    doc = {"root_dir": root_dir, "embedding_store": embedding_store, "products": products}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


@pytest.fixture
def small_catalog_dir(tmp_path):
    """Two products x full six views, with real image files."""
    products = []
    for p in range(2):
        views = []
        for i, label in enumerate(VIEW_ORDER):
            name = f"p{p}_{label}.png"
            save_image(make_rgb(40, 40, seed=100 * p + i), tmp_path / name)
            views.append(
                {"view": label, "image": name, "mask": None, "image_id": f"p{p}_{label}"}
            )
        products.append(
            {
                "product_id": f"p{p:03d}",
                "display_name": f"product {p}",
                "coarse_class": "canned" if p == 0 else "bagged",
                "views": views,
            }
        )
    write_manifest(tmp_path, products)
    return tmp_path


def make_wide_manifest(tmp_path, n_products, views_per_product=6, classes=None):
    """Many products sharing one image file (ids stay unique)."""
    shared = tmp_path / "shared.png"
    if not shared.exists():
        save_image(make_rgb(24, 24, seed=1), shared)
    products = []
    for p in range(n_products):
        views = [
            {
                "view": VIEW_ORDER[i],
                "image": "shared.png",
                "mask": None,
                "image_id": f"p{p:04d}_{VIEW_ORDER[i]}",
            }
            for i in range(views_per_product)
        ]
        cls = classes[p] if classes else "unknown"
        products.append(
            {
                "product_id": f"p{p:04d}",
                "display_name": f"product {p}",
                "coarse_class": cls,
                "views": views,
            }
        )
    return write_manifest(tmp_path, products)
