"""Gallery data model: products, canonical views, and manifest loading.

A catalog is N products, each holding up to six canonical view images.
The manifest is an explicit JSON file so the gallery composition is
reproducible; nothing is inferred from directory layout.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from .errors import ManifestError

COARSE_CLASSES = ("bagged", "bottled", "canned", "unknown")


class ViewLabel(str, Enum):
    """The six canonical capture angles, in fixed enumeration order."""

    BACK_DROP = "back_drop"
    BOTTOM_DROP = "bottom_drop"
    FRONT_DROP = "front_drop"
    FRONT_VIEW = "front_view"
    SIDE_DROP = "side_drop"
    TOP_DROP = "top_drop"

    @classmethod
    def order(cls) -> tuple["ViewLabel", ...]:
        return tuple(cls)


@dataclass(frozen=True)
class ViewImage:
    view: ViewLabel
    image_ref: Path
    image_id: str
    mask_ref: Path | None = None


@dataclass(frozen=True)
class ProductRecord:
    product_id: str
    display_name: str
    coarse_class: str
    views: tuple[ViewImage, ...]

    def __post_init__(self) -> None:
        if not 1 <= len(self.views) <= 6:
            raise ManifestError(
                f"product {self.product_id!r} has {len(self.views)} views; expected 1..6"
            )
        labels = [v.view for v in self.views]
        if len(set(labels)) != len(labels):
            raise ManifestError(f"product {self.product_id!r} repeats a view label")
        if self.coarse_class not in COARSE_CLASSES:
            raise ManifestError(
                f"product {self.product_id!r} has unknown coarse_class {self.coarse_class!r}"
            )

    def view_for(self, label: ViewLabel) -> ViewImage | None:
        for v in self.views:
            if v.view is label:
                return v
        return None


@dataclass(frozen=True)
class CatalogManifest:
    """Immutable after load; safe for concurrent reads."""

    products: tuple[ProductRecord, ...]
    root_dir: Path
    embedding_store_ref: Path | None = None
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.products:
            raise ManifestError("catalog has no products")
        by_id: dict[str, ProductRecord] = {}
        image_ids: set[str] = set()
        for product in self.products:
            if product.product_id in by_id:
                raise ManifestError(f"duplicate product_id {product.product_id!r}")
            by_id[product.product_id] = product
            for view in product.views:
                if view.image_id in image_ids:
                    raise ManifestError(f"duplicate image_id {view.image_id!r}")
                image_ids.add(view.image_id)
        object.__setattr__(self, "_by_id", by_id)

    def __len__(self) -> int:
        return len(self.products)

    def product(self, product_id: str) -> ProductRecord:
        try:
            return self._by_id[product_id]
        except KeyError:
            raise ManifestError(f"unknown product_id {product_id!r}") from None

    @property
    def image_count(self) -> int:
        return sum(len(p.views) for p in self.products)


def load_manifest(path: str | Path) -> CatalogManifest:
    """Load and validate a catalog manifest file.

    Relative asset paths are resolved against the manifest's root_dir,
    which is itself resolved against the manifest file's directory.
    Raises ManifestError on parse failures, duplicate ids, unknown view
    labels, or missing asset files.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot parse manifest {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ManifestError("manifest top level must be a JSON object")

    root = Path(raw.get("root_dir", "."))
    if not root.is_absolute():
        root = (path.parent / root).resolve()

    store_ref = raw.get("embedding_store")
    store_path = _resolve(root, store_ref) if store_ref else None

    products_raw = raw.get("products")
    if not isinstance(products_raw, list) or not products_raw:
        raise ManifestError("manifest requires a non-empty 'products' list")

    products = []
    for entry in products_raw:
        products.append(_parse_product(entry, root))
    return CatalogManifest(
        products=tuple(products), root_dir=root, embedding_store_ref=store_path
    )


def _parse_product(entry: object, root: Path) -> ProductRecord:
    if not isinstance(entry, dict):
        raise ManifestError("each product must be a JSON object")
    try:
        product_id = entry["product_id"]
        views_raw = entry["views"]
    except KeyError as exc:
        raise ManifestError(f"product entry missing key {exc}") from None
    display_name = entry.get("display_name", product_id)
    coarse_class = entry.get("coarse_class", "unknown")

    if not isinstance(views_raw, list):
        raise ManifestError(f"product {product_id!r}: 'views' must be a list")
    views = []
    for view_raw in views_raw:
        views.append(_parse_view(view_raw, product_id, root))
    return ProductRecord(
        product_id=str(product_id),
        display_name=str(display_name),
        coarse_class=str(coarse_class),
        views=tuple(views),
    )


def _parse_view(view_raw: object, product_id: str, root: Path) -> ViewImage:
    if not isinstance(view_raw, dict):
        raise ManifestError(f"product {product_id!r}: each view must be an object")
    label_raw = view_raw.get("view")
    try:
        label = ViewLabel(label_raw)
    except ValueError:
        raise ManifestError(
            f"product {product_id!r}: unknown view label {label_raw!r}"
        ) from None
    image_ref = view_raw.get("image")
    image_id = view_raw.get("image_id")
    if not image_ref or not image_id:
        raise ManifestError(f"product {product_id!r}: view requires 'image' and 'image_id'")
    image_path = _resolve(root, image_ref)
    if not image_path.is_file():
        raise ManifestError(f"missing asset file: {image_path}")
    mask_raw = view_raw.get("mask")
    mask_path = None
    if mask_raw:
        mask_path = _resolve(root, mask_raw)
        if not mask_path.is_file():
            raise ManifestError(f"missing asset file: {mask_path}")
    return ViewImage(
        view=label, image_ref=image_path, image_id=str(image_id), mask_ref=mask_path
    )


def _resolve(root: Path, ref: str | Path) -> Path:
    ref = Path(ref)
    return ref if ref.is_absolute() else root / ref


def gallery_images(catalog: CatalogManifest) -> list[tuple[str, ViewImage]]:
    """Enumerate (product_id, view) pairs in deterministic order.

    Products follow manifest order; views follow the fixed ViewLabel order.
    """
    pairs: list[tuple[str, ViewImage]] = []
    for product in catalog.products:
        for label in ViewLabel.order():
            view = product.view_for(label)
            if view is not None:
                pairs.append((product.product_id, view))
    return pairs


def save_manifest(catalog: CatalogManifest, path: str | Path) -> None:
    """Serialize a catalog back to the manifest schema (paths made relative)."""
    path = Path(path)
    root = catalog.root_dir

    def rel(p: Path | None) -> str | None:
        if p is None:
            return None
        try:
            return p.relative_to(root).as_posix()
        except ValueError:
            return str(p)

    doc = {
        "root_dir": ".",
        "embedding_store": rel(catalog.embedding_store_ref),
        "products": [
            {
                "product_id": p.product_id,
                "display_name": p.display_name,
                "coarse_class": p.coarse_class,
                "views": [
                    {
                        "view": v.view.value,
                        "image": rel(v.image_ref),
                        "mask": rel(v.mask_ref),
                        "image_id": v.image_id,
                    }
                    for v in p.views
                ],
            }
            for p in catalog.products
        ],
    }
    path.write_text(json.dumps(doc, indent=2), encoding="utf-8")
