import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from prism.catalog import load_manifest
from prism.embedding import (
    EmbeddingStore,
    EmbeddingVector,
    HashEmbedder,
    StoreEmbedder,
    class_filter_candidates,
    cosine_similarity,
    embed_image,
    load_embedding_store,
    product_similarity,
    save_embedding_store,
    top_k_products,
)
from prism.errors import (
    DataError,
    EmptyClassError,
    MissingEmbeddingError,
    StoreFormatError,
)

from conftest import make_rgb, make_wide_manifest


def unit(*values) -> EmbeddingVector:
    return EmbeddingVector(np.array(values, dtype=np.float64))


class TestEmbeddingVector:
    def test_normalized_at_construction(self):
        v = unit(3.0, 4.0)
        assert abs(np.linalg.norm(v.values) - 1.0) < 1e-6
        assert v.values.dtype == np.float32

    def test_rejects_zero_and_nonfinite(self):
        with pytest.raises(DataError):
            EmbeddingVector(np.zeros(4))
        with pytest.raises(DataError):
            EmbeddingVector(np.array([1.0, np.nan]))


class TestHashEmbedder:
    def test_identical_bytes_identical_vectors(self):
        img = make_rgb(37, 51, seed=5)
        e = HashEmbedder()
        v1 = embed_image(e, img)
        v2 = embed_image(e, img.copy())
        assert np.array_equal(v1.values, v2.values)
        assert v1.dim == 16 * 16 + 8

    def test_one_pixel_difference_changes_vector(self):
        img = make_rgb(37, 51, seed=5)
        other = img.copy()
        other[10, 10, 1] ^= 1
        e = HashEmbedder()
        v1, v2 = e.embed(img), e.embed(other)
        assert not np.array_equal(v1.values, v2.values)
        assert cosine_similarity(v1, v2) < 1.0

    def test_self_similarity_is_one(self):
        img = make_rgb(20, 20, seed=2)
        e = HashEmbedder()
        assert cosine_similarity(e.embed(img), e.embed(img)) == pytest.approx(1.0, abs=1e-6)

    def test_dimension_configurable(self):
        assert HashEmbedder(grid=8).embed(make_rgb(30, 30)).dim == 72

    def test_rejects_non_rgb(self):
        with pytest.raises(DataError):
            HashEmbedder().embed(np.zeros((10, 10), dtype=np.uint8))


def test_store_backend_missing_id():
    store = EmbeddingStore(dim=2, entries={"a": unit(1.0, 0.0)})
    provider = StoreEmbedder(store)
    assert np.array_equal(provider.embed(make_rgb(4, 4), image_id="a").values, unit(1.0, 0.0).values)
    with pytest.raises(MissingEmbeddingError):
        provider.embed(make_rgb(4, 4), image_id="absent")
    with pytest.raises(MissingEmbeddingError):
        provider.embed(make_rgb(4, 4))


class TestCosineSimilarity:
    def test_identity(self):
        v = unit(0.3, -0.5, 0.81)
        assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-6)

    def test_orthogonal(self):
        assert cosine_similarity(unit(1.0, 0.0), unit(0.0, 1.0)) == pytest.approx(0.0, abs=1e-7)

    def test_direct_dot_product(self):
        # [0.6, 0.8] is already unit; dot with [1, 0] is its first component.
        assert cosine_similarity(unit(0.6, 0.8), unit(1.0, 0.0)) == pytest.approx(0.6, abs=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(DataError, match="dimension mismatch"):
            cosine_similarity(unit(1.0, 0.0), unit(1.0, 0.0, 0.0))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_bounded(self, seed):
        rng = np.random.default_rng(seed)
        a = EmbeddingVector(rng.normal(size=8) + 1e-3)
        b = EmbeddingVector(rng.normal(size=8) + 1e-3)
        assert abs(cosine_similarity(a, b)) <= 1.0 + 1e-6


def _catalog_with_store(tmp_path, n_products, dim=4, seed=0, classes=None):
    path = make_wide_manifest(tmp_path, n_products, classes=classes)
    catalog = load_manifest(path)
    rng = np.random.default_rng(seed)
    store = EmbeddingStore(dim=dim)
    for product in catalog.products:
        for view in product.views:
            store.put(view.image_id, EmbeddingVector(rng.normal(size=dim) + 1e-3))
    return catalog, store


class TestProductSimilarity:
    def test_max_over_views(self, tmp_path):
        catalog, store = _catalog_with_store(tmp_path, 1)
        product = catalog.products[0]
        query = unit(1.0, 0.0, 0.0, 0.0)
        sims = {0.2: None, 0.9: None, 0.5: None}
        for view, s in zip(product.views[:3], sims):
            store.put(view.image_id, unit(s, np.sqrt(1 - s * s), 0.0, 0.0))
        for view in product.views[3:]:
            store.put(view.image_id, unit(0.0, 1.0, 0.0, 0.0))
        assert product_similarity(query, product, store) == pytest.approx(0.9, abs=1e-6)

    def test_single_view(self, tmp_path):
        catalog, store = _catalog_with_store(tmp_path, 1)
        product = catalog.products[0]
        single = type(product)(
            product_id="s",
            display_name="s",
            coarse_class="unknown",
            views=(product.views[0],),
        )
        expected = cosine_similarity(unit(1, 0, 0, 0), store.get(product.views[0].image_id))
        assert product_similarity(unit(1, 0, 0, 0), single, store) == pytest.approx(expected)

    def test_query_equal_to_stored_view(self, tmp_path):
        catalog, store = _catalog_with_store(tmp_path, 1)
        view = catalog.products[0].views[0]
        query = store.get(view.image_id)
        assert product_similarity(query, catalog.products[0], store) == pytest.approx(
            1.0, abs=1e-6
        )

    def test_missing_view_embedding(self, tmp_path):
        catalog, _ = _catalog_with_store(tmp_path, 1)
        empty = EmbeddingStore(dim=4)
        with pytest.raises(MissingEmbeddingError):
            product_similarity(unit(1, 0, 0, 0), catalog.products[0], empty)


class TestTopKProducts:
    def test_paper_scale_widths(self, tmp_path):
        catalog, store = _catalog_with_store(tmp_path, 394)
        result = top_k_products(unit(1, 0, 0, 0), catalog, store, 35)
        assert len(result.entries) == 35
        candidate_images = sum(
            len(catalog.product(pid).views) for pid in result.product_ids
        )
        assert candidate_images == 35 * 6 == 210

    def test_k_larger_than_catalog(self, tmp_path):
        catalog, store = _catalog_with_store(tmp_path, 10)
        result = top_k_products(unit(1, 0, 0, 0), catalog, store, 100)
        assert len(result.entries) == 10

    def test_tie_broken_by_product_id(self, tmp_path):
        catalog, store = _catalog_with_store(tmp_path, 3)
        for product in catalog.products:
            for view in product.views:
                store.put(view.image_id, unit(0.0, 1.0, 0.0, 0.0))
        result = top_k_products(unit(1, 0, 0, 0), catalog, store, 3)
        assert list(result.product_ids) == ["p0000", "p0001", "p0002"]

    @given(st.integers(0, 2**31), st.integers(1, 11), st.integers(1, 12))
    @settings(max_examples=60, deadline=None)
    def test_prefix_consistency(self, seed, k1, k2, tmp_path_factory):
        if k1 > k2:
            k1, k2 = k2, k1
        tmp_path = tmp_path_factory.mktemp("prefix")
        catalog, store = _catalog_with_store(tmp_path, 12, seed=seed)
        query = EmbeddingVector(np.random.default_rng(seed ^ 0xAB).normal(size=4) + 1e-3)
        small = top_k_products(query, catalog, store, k1)
        large = top_k_products(query, catalog, store, k2)
        assert large.entries[: len(small.entries)] == small.entries

    def test_total_ordering_at_k_equals_n(self, tmp_path):
        catalog, store = _catalog_with_store(tmp_path, 9)
        result = top_k_products(unit(1, 0, 0, 0), catalog, store, 9)
        assert sorted(result.product_ids) == sorted(p.product_id for p in catalog.products)


class TestClassFilter:
    def test_over_100_in_class(self, tmp_path):
        classes = ["canned"] * 120 + ["bagged"] * 10
        catalog, _ = _catalog_with_store(tmp_path, 130, classes=classes)
        result = class_filter_candidates("canned", catalog)
        assert len(result.entries) == 120
        assert all(score == 0.0 for _, score in result.entries)
        assert list(result.product_ids) == sorted(result.product_ids)

    def test_singleton_class(self, tmp_path):
        classes = ["bottled"] + ["canned"] * 4
        catalog, _ = _catalog_with_store(tmp_path, 5, classes=classes)
        result = class_filter_candidates("bottled", catalog)
        assert len(result.entries) == 1

    def test_empty_class_error(self, tmp_path):
        catalog, _ = _catalog_with_store(tmp_path, 4, classes=["canned"] * 4)
        with pytest.raises(EmptyClassError):
            class_filter_candidates("bottled", catalog)

    def test_unknown_class_rejected(self, tmp_path):
        catalog, _ = _catalog_with_store(tmp_path, 2)
        with pytest.raises(DataError):
            class_filter_candidates("unknown", catalog)


class TestStoreFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        store = EmbeddingStore(dim=5)
        rng = np.random.default_rng(3)
        for i in range(3):
            store.put(f"img{i}", EmbeddingVector(rng.normal(size=5)))
        path = tmp_path / "store.bin"
        save_embedding_store(store, path)
        loaded = load_embedding_store(path)
        assert len(loaded) == 3 and loaded.dim == 5
        for image_id, vec in store.items():
            assert np.array_equal(loaded.get(image_id).values, vec.values)

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "store.bin"
        path.write_bytes(b"XXXX" + b"\x00" * 12)
        with pytest.raises(StoreFormatError, match="magic"):
            load_embedding_store(path)

    def test_truncated(self, tmp_path):
        store = EmbeddingStore(dim=4, entries={"a": unit(1, 0, 0, 0)})
        path = tmp_path / "store.bin"
        save_embedding_store(store, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-3])
        with pytest.raises(StoreFormatError, match="truncated"):
            load_embedding_store(path)
        path.write_bytes(blob[:10])
        with pytest.raises(StoreFormatError):
            load_embedding_store(path)

    def test_bad_version(self, tmp_path):
        import struct

        path = tmp_path / "store.bin"
        path.write_bytes(b"PRSM" + struct.pack("<III", 9, 4, 0))
        with pytest.raises(StoreFormatError, match="version"):
            load_embedding_store(path)

    def test_file_size_matches_format(self, tmp_path):
        # dim 768, 2364 entries: 16-byte header plus per-record
        # 4 + len(id) + 768*4 bytes.
        dim, count = 768, 2364
        store = EmbeddingStore(dim=dim)
        base = np.ones(dim)
        ids = [f"img{i:05d}" for i in range(count)]
        for image_id in ids:
            vec = EmbeddingVector.__new__(EmbeddingVector)
            object.__setattr__(vec, "values", (base / np.linalg.norm(base)).astype(np.float32))
            store.put(image_id, vec)
        path = tmp_path / "store.bin"
        save_embedding_store(store, path)
        expected = 16 + sum(4 + len(i.encode()) + dim * 4 for i in ids)
        assert path.stat().st_size == expected
