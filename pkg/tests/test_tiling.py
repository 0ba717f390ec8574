import colorsys

import numpy as np
import pytest

from wsimil.tiling import (
    TileGrid,
    TissueParams,
    detect_tissue,
    grid_for_coords,
    otsu_threshold,
    plan_tiles,
    rgb_to_hsv,
)


class TestRgbToHsv:
    def test_matches_colorsys(self):
        rng = np.random.default_rng(0)
        pixels = rng.integers(0, 256, size=(50, 3))
        h, s, v = rgb_to_hsv(pixels.reshape(1, 50, 3).astype(np.uint8))
        for i, (r, g, b) in enumerate(pixels):
            eh, es, ev = colorsys.rgb_to_hsv(r / 255.0, g / 255.0, b / 255.0)
            assert h[0, i] == pytest.approx(eh, abs=1e-9)
            assert s[0, i] == pytest.approx(es, abs=1e-9)
            assert v[0, i] == pytest.approx(ev, abs=1e-9)


class TestOtsu:
    def test_bimodal_split(self):
        values = np.concatenate([np.full(500, 0.05), np.full(500, 0.8)])
        t = otsu_threshold(values)
        assert 0.05 < t < 0.8

    def test_degenerate_falls_back(self):
        assert otsu_threshold(np.full(100, 0.0)) == 0.05
        assert otsu_threshold(np.full(100, 1.0)) == 0.05


class TestDetectTissue:
    def test_uniform_white_empty_mask(self):
        img = np.full((64, 64, 3), 255, dtype=np.uint8)
        assert not detect_tissue(img).any()

    def test_all_saturated_full_mask(self):
        img = np.zeros((64, 64, 3), dtype=np.uint8)
        img[..., 0] = 255  # pure red: saturation 1 everywhere
        assert detect_tissue(img).all()

    def test_saturated_disk_iou(self):
        size, radius = 256, 60
        yy, xx = np.mgrid[:size, :size]
        disk = (xx - size // 2) ** 2 + (yy - size // 2) ** 2 <= radius**2
        img = np.full((size, size, 3), 255, dtype=np.uint8)
        img[disk] = (200, 60, 90)
        mask = detect_tissue(img, TissueParams(closing_radius=2))
        iou = np.logical_and(mask, disk).sum() / np.logical_or(mask, disk).sum()
        assert iou >= 0.95

    def test_empty_image_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            detect_tissue(np.zeros((0, 0, 3), dtype=np.uint8))


def overlap_oracle(dims, tile_size, mask):
    """Independent tile-inclusion check: slice the mask per tile footprint."""
    width, height = dims
    mh, mw = mask.shape
    tiles = []
    for row in range(height // tile_size):
        for col in range(width // tile_size):
            x0, x1 = col * tile_size, (col + 1) * tile_size
            y0, y1 = row * tile_size, (row + 1) * tile_size
            ca = (x0 * mw) // width
            cb = -(-(x1 * mw) // width)
            ra = (y0 * mh) // height
            rb = -(-(y1 * mh) // height)
            if mask[ra:rb, ca:cb].any():
                tiles.append((col, row))
    return tiles


class TestPlanTiles:
    def test_exact_division_full_mask(self):
        grid = plan_tiles((448, 448), 224, np.ones((64, 64), dtype=bool))
        assert len(grid.tiles) == 4
        assert grid.tiles == ((0, 0), (1, 0), (0, 1), (1, 1))

    def test_partial_edge_tiles_dropped(self):
        grid = plan_tiles((500, 500), 224, np.ones((50, 50), dtype=bool))
        assert len(grid.tiles) == 4

    def test_half_mask_keeps_half_grid(self):
        mask = np.zeros((448, 448), dtype=bool)
        mask[:, :224] = True  # left half only
        grid = plan_tiles((448, 448), 224, mask)
        assert grid.tiles == ((0, 0), (0, 1))
        assert grid.tiles == tuple(overlap_oracle((448, 448), 224, mask))

    def test_no_mask_keeps_all(self):
        grid = plan_tiles((448, 224), 224)
        assert grid.tiles == ((0, 0), (1, 0))

    def test_oversized_tile_warns_empty(self):
        with pytest.warns(UserWarning, match="empty grid"):
            grid = plan_tiles((100, 100), 224)
        assert grid.tiles == ()

    def test_matches_overlap_oracle_random(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            width = int(rng.integers(30, 400))
            height = int(rng.integers(30, 400))
            tile = int(rng.integers(8, 64))
            if tile > min(width, height):
                continue
            mask = rng.random((int(rng.integers(5, 40)), int(rng.integers(5, 40)))) < 0.3
            grid = plan_tiles((width, height), tile, mask)
            assert list(grid.tiles) == overlap_oracle((width, height), tile, mask)

    def test_tiles_disjoint_and_in_bounds_1000_draws(self):
        rng = np.random.default_rng(4)
        for _ in range(1000):
            width = int(rng.integers(1, 300))
            height = int(rng.integers(1, 300))
            tile = int(rng.integers(1, 80))
            if tile > min(width, height):
                continue
            grid = plan_tiles((width, height), tile)
            assert len(set(grid.tiles)) == len(grid.tiles)
            for col, row in grid.tiles:
                assert 0 <= col * tile and (col + 1) * tile <= width
                assert 0 <= row * tile and (row + 1) * tile <= height

    def test_base_geometry_with_downsample(self):
        grid = TileGrid((500, 400), 100, level_downsample=4,
                        tiles=((2, 1),))
        assert grid.base_origin(2, 1) == (800, 400)
        assert grid.base_tile_span == 400

    def test_grid_for_coords(self):
        grid = grid_for_coords([(3, 1), (0, 0)], 224, (1120, 896))
        assert grid.tiles == ((3, 1), (0, 0))
        assert grid.n_cols == 5
