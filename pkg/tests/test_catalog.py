import json

import pytest

from prism.catalog import ViewLabel, gallery_images, load_manifest
from prism.errors import ManifestError

from conftest import VIEW_ORDER, make_wide_manifest, write_manifest
from conftest import make_rgb
from prism.imutils import save_image


def test_load_small_catalog(small_catalog_dir):
    catalog = load_manifest(small_catalog_dir / "manifest.json")
    assert len(catalog) == 2
    assert catalog.image_count == 12
    for product in catalog.products:
        for view in product.views:
            assert view.image_ref.is_file()


def test_paper_scale_catalog(tmp_path):
    path = make_wide_manifest(tmp_path, n_products=394)
    catalog = load_manifest(path)
    assert len(catalog) == 394
    assert catalog.image_count == 394 * 6 == 2364


def test_single_product_single_view(tmp_path):
    save_image(make_rgb(20, 20), tmp_path / "one.png")
    path = write_manifest(
        tmp_path,
        [
            {
                "product_id": "only",
                "display_name": "only",
                "coarse_class": "unknown",
                "views": [
                    {"view": "front_view", "image": "one.png", "mask": None, "image_id": "only_fv"}
                ],
            }
        ],
    )
    catalog = load_manifest(path)
    assert len(catalog) == 1
    assert catalog.image_count == 1


def test_duplicate_product_id_rejected(tmp_path):
    save_image(make_rgb(20, 20), tmp_path / "a.png")
    entry = {
        "product_id": "dup",
        "display_name": "dup",
        "coarse_class": "unknown",
        "views": [{"view": "front_view", "image": "a.png", "mask": None, "image_id": "v1"}],
    }
    other = dict(entry, views=[{"view": "front_view", "image": "a.png", "mask": None, "image_id": "v2"}])
    path = write_manifest(tmp_path, [entry, other])
    with pytest.raises(ManifestError, match="duplicate product_id"):
        load_manifest(path)


def test_duplicate_image_id_rejected(tmp_path):
    save_image(make_rgb(20, 20), tmp_path / "a.png")
    products = [
        {
            "product_id": f"p{i}",
            "display_name": "x",
            "coarse_class": "unknown",
            "views": [{"view": "front_view", "image": "a.png", "mask": None, "image_id": "same"}],
        }
        for i in range(2)
    ]
    path = write_manifest(tmp_path, products)
    with pytest.raises(ManifestError, match="duplicate image_id"):
        load_manifest(path)


def test_unknown_view_label_rejected(tmp_path):
    save_image(make_rgb(20, 20), tmp_path / "a.png")
    path = write_manifest(
        tmp_path,
        [
            {
                "product_id": "p",
                "display_name": "p",
                "coarse_class": "unknown",
                "views": [{"view": "diagonal_drop", "image": "a.png", "mask": None, "image_id": "v"}],
            }
        ],
    )
    with pytest.raises(ManifestError, match="unknown view label"):
        load_manifest(path)


def test_missing_asset_rejected(tmp_path):
    path = write_manifest(
        tmp_path,
        [
            {
                "product_id": "p",
                "display_name": "p",
                "coarse_class": "unknown",
                "views": [{"view": "front_view", "image": "nope.png", "mask": None, "image_id": "v"}],
            }
        ],
    )
    with pytest.raises(ManifestError, match="missing asset"):
        load_manifest(path)


def test_parse_failure(tmp_path):
    bad = tmp_path / "manifest.json"
    bad.write_text("{not json", encoding="utf-8")
    with pytest.raises(ManifestError, match="cannot parse"):
        load_manifest(bad)
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(tmp_path / "missing.json")


def test_repeated_view_label_rejected(tmp_path):
    save_image(make_rgb(20, 20), tmp_path / "a.png")
    path = write_manifest(
        tmp_path,
        [
            {
                "product_id": "p",
                "display_name": "p",
                "coarse_class": "unknown",
                "views": [
                    {"view": "front_view", "image": "a.png", "mask": None, "image_id": "v1"},
                    {"view": "front_view", "image": "a.png", "mask": None, "image_id": "v2"},
                ],
            }
        ],
    )
    with pytest.raises(ManifestError, match="repeats a view label"):
        load_manifest(path)


def test_enumeration_order_fixed(small_catalog_dir):
    catalog = load_manifest(small_catalog_dir / "manifest.json")
    pairs = gallery_images(catalog)
    assert len(pairs) == 12
    # products in manifest order, views in the fixed label order
    assert [pid for pid, _ in pairs] == ["p000"] * 6 + ["p001"] * 6
    labels = [view.view.value for _, view in pairs[:6]]
    assert labels == list(VIEW_ORDER)
    assert gallery_images(catalog) == pairs  # repeated calls identical


def test_partial_views_enumerate_in_order(tmp_path):
    save_image(make_rgb(20, 20), tmp_path / "a.png")
    path = write_manifest(
        tmp_path,
        [
            {
                "product_id": "p",
                "display_name": "p",
                "coarse_class": "unknown",
                "views": [
                    {"view": "top_drop", "image": "a.png", "mask": None, "image_id": "v3"},
                    {"view": "back_drop", "image": "a.png", "mask": None, "image_id": "v1"},
                    {"view": "front_view", "image": "a.png", "mask": None, "image_id": "v2"},
                ],
            }
        ],
    )
    catalog = load_manifest(path)
    pairs = gallery_images(catalog)
    assert [v.view for _, v in pairs] == [
        ViewLabel.BACK_DROP,
        ViewLabel.FRONT_VIEW,
        ViewLabel.TOP_DROP,
    ]


def test_root_dir_resolution(tmp_path):
    sub = tmp_path / "assets"
    sub.mkdir()
    save_image(make_rgb(20, 20), sub / "a.png")
    path = write_manifest(
        tmp_path,
        [
            {
                "product_id": "p",
                "display_name": "p",
                "coarse_class": "unknown",
                "views": [{"view": "front_view", "image": "a.png", "mask": None, "image_id": "v"}],
            }
        ],
        root_dir="assets",
    )
    catalog = load_manifest(path)
    assert catalog.products[0].views[0].image_ref == (sub / "a.png").resolve()


def test_stable_across_processes_given_same_bytes(small_catalog_dir):
    manifest = small_catalog_dir / "manifest.json"
    first = [(pid, v.image_id) for pid, v in gallery_images(load_manifest(manifest))]
    second = [(pid, v.image_id) for pid, v in gallery_images(load_manifest(manifest))]
    assert first == second


def test_empty_products_rejected(tmp_path):
    path = write_manifest(tmp_path, [])
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_manifest_requires_object(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps([1, 2]), encoding="utf-8")
    with pytest.raises(ManifestError, match="top level"):
        load_manifest(path)
