import numpy as np
import pytest

from conftest import pink_texture
from wsimil.embeddings import (
    EmbeddingBag,
    PseudoPatchEncoder,
    extract_bag,
    group_regions,
    patch_grid,
    pseudo_encode,
    read_bag,
    region_grid,
    write_bag,
)
from wsimil.errors import BagFormatError
from wsimil.qc import run_slide_qc
from wsimil.slides import ImageSlide
from conftest import tissue_slide_image


class TestPseudoEncode:
    def test_deterministic(self):
        patch = pink_texture((64, 64), seed=1)
        a = pseudo_encode(patch, seed=7, dim=32)
        b = pseudo_encode(patch, seed=7, dim=32)
        np.testing.assert_array_equal(a, b)

    def test_unit_norm(self):
        rng = np.random.default_rng(0)
        for seed in range(5):
            patch = rng.integers(0, 256, (48, 48, 3)).astype(np.uint8)
            vec = pseudo_encode(patch, seed=seed, dim=24)
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-6)

    def test_rotation_near_invariance(self):
        patch = pink_texture((96, 96), seed=3)
        a = pseudo_encode(patch, seed=0, dim=48)
        b = pseudo_encode(np.rot90(patch), seed=0, dim=48)
        cosine = float(np.dot(a, b))
        assert cosine > 0.99

    def test_seed_changes_projection(self):
        patch = pink_texture((64, 64))
        a = pseudo_encode(patch, seed=0, dim=32)
        b = pseudo_encode(patch, seed=1, dim=32)
        assert not np.allclose(a, b)

    def test_distinct_content_distinct_vectors(self):
        a = pseudo_encode(pink_texture((64, 64), base=(225, 160, 190)), dim=16)
        b = pseudo_encode(pink_texture((64, 64), base=(120, 90, 200)), dim=16)
        assert float(np.dot(a, b)) < 0.999

    def test_dim_validation(self):
        with pytest.raises(ValueError, match=">= 8"):
            pseudo_encode(pink_texture((16, 16)), dim=4)

    def test_wide_projection_supported(self):
        vec = pseudo_encode(pink_texture((32, 32)), dim=128)
        assert vec.shape == (128,)
        assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-6)

    def test_sklearn_transformer_wrapper(self):
        enc = PseudoPatchEncoder(dim=16, seed=3)
        patches = [pink_texture((32, 32), seed=i) for i in range(4)]
        out = enc.fit_transform(patches)
        assert out.shape == (4, 16)
        assert enc.get_params() == {"dim": 16, "seed": 3}


def random_bag(seed=0, n=12, dim=16, tile_size=224):
    rng = np.random.default_rng(seed)
    cols, rows = np.meshgrid(np.arange(4), np.arange(3))
    coords = np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1)[:n]
    return EmbeddingBag(
        slide_id=f"slide{seed}",
        encoder_id="test-encoder",
        instances=rng.normal(0, 1, (n, dim)).astype(np.float32),
        coords=coords,
        tile_size=tile_size,
    )


class TestBagIO:
    def test_round_trip_bit_exact(self, tmp_path):
        bag = random_bag(seed=5)
        path = tmp_path / f"{bag.slide_id}.bag"
        write_bag(bag, path)
        loaded = read_bag(path)
        assert loaded.slide_id == bag.slide_id
        assert loaded.encoder_id == bag.encoder_id
        assert loaded.tile_size == bag.tile_size
        assert loaded.level_downsample == bag.level_downsample
        np.testing.assert_array_equal(loaded.instances, bag.instances)
        np.testing.assert_array_equal(loaded.coords, bag.coords)
        # writing again is byte-identical
        path2 = tmp_path / "again.bag"
        write_bag(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "x.bag"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(BagFormatError, match="not an embedding bag"):
            read_bag(path)

    def test_truncated(self, tmp_path):
        bag = random_bag()
        path = tmp_path / "t.bag"
        write_bag(bag, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 10])
        with pytest.raises(BagFormatError, match="unexpected end"):
            read_bag(path)

    def test_invariants(self):
        with pytest.raises(ValueError, match="duplicate tile coords"):
            EmbeddingBag("s", "e", np.zeros((2, 4), np.float32),
                         np.array([[0, 0], [0, 0]]), 224)
        with pytest.raises(ValueError, match="non-finite"):
            EmbeddingBag("s", "e", np.full((1, 4), np.nan, np.float32),
                         np.array([[0, 0]]), 224)
        with pytest.raises(ValueError, match="non-empty"):
            EmbeddingBag("s", "e", np.zeros((0, 4), np.float32),
                         np.zeros((0, 2)), 224)


class TestGroupRegions:
    def test_single_region_mean(self):
        bag = EmbeddingBag(
            "s", "e",
            np.array([[1, 1], [3, 3], [5, 5], [7, 7]], dtype=np.float32),
            np.array([[0, 0], [1, 0], [0, 1], [1, 1]]),
            tile_size=224,
        )
        regions = group_regions(bag, region_size=448)
        assert regions.n_regions == 1
        np.testing.assert_allclose(regions.embeddings[0], [4.0, 4.0])
        assert regions.member_counts.tolist() == [4]

    def test_identity_grouping(self):
        bag = random_bag(n=6, dim=8)
        regions = group_regions(bag, region_size=bag.tile_size)
        assert regions.n_regions == bag.n_instances
        np.testing.assert_allclose(regions.embeddings, bag.instances, atol=1e-7)

    def test_partial_occupancy(self):
        bag = EmbeddingBag(
            "s", "e",
            np.ones((3, 4), dtype=np.float32),
            np.array([[0, 0], [1, 0], [3, 3]]),
            tile_size=100,
        )
        regions = group_regions(bag, region_size=200)
        assert regions.n_regions == 2  # only non-empty regions
        assert regions.member_counts.sum() == bag.n_instances

    def test_member_counts_preserved(self):
        rng = np.random.default_rng(1)
        coords = np.array(
            [(c, r) for r in range(6) for c in range(6) if rng.random() < 0.7]
        )
        bag = EmbeddingBag(
            "s", "e",
            rng.normal(0, 1, (len(coords), 8)).astype(np.float32),
            coords, tile_size=50,
        )
        regions = group_regions(bag, region_size=150)
        assert regions.member_counts.sum() == bag.n_instances

    def test_region_size_must_be_multiple(self):
        with pytest.raises(ValueError, match="multiple"):
            group_regions(random_bag(), region_size=300)

    def test_grids(self):
        bag = random_bag(n=12, tile_size=224)
        g = patch_grid(bag)
        assert g.tile_size == 224
        assert len(g.tiles) == 12
        regions = group_regions(bag, 448)
        rg = region_grid(regions)
        assert rg.tile_size == 448
        assert len(rg.tiles) == regions.n_regions


class TestExtractBag:
    def test_end_to_end_from_slide(self):
        img = tissue_slide_image(width=896, height=672)
        slide = ImageSlide(img)
        qc = run_slide_qc(slide, "s1", tile_size=224)
        encoder = PseudoPatchEncoder(dim=16, seed=0)
        bag = extract_bag(slide, "s1", qc.grid, qc.kept, encoder)
        assert bag.n_instances == sum(qc.kept)
        assert bag.dim == 16
        norms = np.linalg.norm(bag.instances, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-5)
