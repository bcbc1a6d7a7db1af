import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hybridrefine.core import ImageFrame, InvalidArgument
from hybridrefine.masks import (
    BlockSet,
    blur_mask,
    build_pyramid,
    combine_masks,
    downsample_mask,
    laplacian_blur_map,
    opacity_mask,
    otsu_threshold,
    quantize_levels,
    tile_blocks,
)


def brute_otsu(values):
    """Try every split of the 256 level histogram on raw (unbinned) data."""
    v = np.asarray(values, dtype=float).ravel()
    lv = np.clip(np.rint(v * 255), 0, 255).astype(int)
    best, best_t = -1.0, None
    for t in range(255):
        lo, hi = lv[lv <= t] / 255.0, lv[lv > t] / 255.0
        if lo.size == 0 or hi.size == 0:
            continue
        w0, w1 = lo.size / v.size, hi.size / v.size
        between = w0 * w1 * (lo.mean() - hi.mean()) ** 2
        if between > best + 1e-15:
            best, best_t = between, t
    return best_t / 255.0


def blur_map_oracle(gray, window):
    h, w = gray.shape
    p = np.pad(gray, 1, mode="edge")
    lap = np.zeros_like(gray)
    for y in range(h):
        for x in range(w):
            lap[y, x] = p[y, x + 1] + p[y + 2, x + 1] + p[y + 1, x] + p[y + 1, x + 2] - 4 * p[y + 1, x + 1]
    r = window // 2
    q = np.pad(lap, r, mode="edge")
    out = np.zeros_like(gray)
    for y in range(h):
        for x in range(w):
            out[y, x] = q[y : y + window, x : x + window].var()
    return out


def gray_frame(g):
    return ImageFrame(np.repeat(np.asarray(g, float)[..., None], 3, axis=2))


class TestBlurMap:
    def test_constant_is_zero(self):
        assert np.all(laplacian_blur_map(gray_frame(np.full((8, 8), 0.3))) == 0)

    def test_bright_pixel(self):
        # 9x9 is not a codec size, so work on the raw luminance grid
        g = np.zeros((9, 9))
        g[4, 4] = 1.0
        m = laplacian_blur_map(np.repeat(g[..., None], 3, axis=2), window=3)
        assert np.allclose(m, blur_map_oracle(g, 3), atol=1e-12)
        assert m[4, 4] == m.max()
        assert m[0, 0] == 0 and m[8, 8] == 0

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(3):
            g = rng.uniform(0, 1, (16, 16))
            assert np.allclose(laplacian_blur_map(gray_frame(g), 7), blur_map_oracle(g, 7), atol=1e-10)

    def test_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            assert laplacian_blur_map(ImageFrame(rng.uniform(0, 1, (8, 8, 3)))).min() >= 0

    @pytest.mark.parametrize("w", [4, 1, 0])
    def test_bad_window(self, w):
        with pytest.raises(InvalidArgument):
            laplacian_blur_map(gray_frame(np.zeros((8, 8))), w)


class TestOtsu:
    def test_two_modes(self):
        v = np.array([0.1] * 50 + [0.9] * 50)
        t = otsu_threshold(v)
        assert 0.1 <= t < 0.9
        assert np.array_equal(quantize_levels(v) / 255 > t, v > 0.5)

    def test_constant(self):
        assert otsu_threshold(np.full((4, 4), 0.5)) == 0.5

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            otsu_threshold(np.array([]))

    def test_brute_force_50_grids(self):
        rng = np.random.default_rng(2)
        for i in range(50):
            grid = rng.beta(rng.uniform(0.3, 3), rng.uniform(0.3, 3), size=(16, 16))
            assert otsu_threshold(grid) == brute_otsu(grid), f"grid {i}"

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.integers(2, 64), elements=st.floats(0, 1)))
    def test_brute_force_property(self, v):
        if np.all(v == v[0]):
            assert otsu_threshold(v) == v[0]
        elif len(np.unique(quantize_levels(v))) == 1:
            # distinct values in one level: no valid split
            assert otsu_threshold(v) == 0.0
        else:
            assert otsu_threshold(v) == brute_otsu(v)


class TestBlurMask:
    def test_constant_map_empty(self):
        assert not blur_mask(np.full((16, 16), 0.2)).any()

    def test_half_sharp_half_flat(self):
        g = np.full((32, 32), 0.5)
        yy, xx = np.mgrid[0:32, 0:16]
        g[:, :16] = (yy + xx) % 2
        m = blur_mask(laplacian_blur_map(gray_frame(g)))
        # skip the transition band the 7x7 and 5x5 windows smear
        assert m[:, 24:].mean() >= 0.95
        assert m[:, :10].mean() <= 0.05

    def test_binary(self):
        rng = np.random.default_rng(3)
        m = blur_mask(laplacian_blur_map(ImageFrame(rng.uniform(0, 1, (16, 16, 3)))))
        assert m.dtype == bool

    def test_uniformly_sharp_frame_empty(self):
        yy, xx = np.mgrid[0:32, 0:32]
        g = ((yy + xx) % 2).astype(float)
        assert not blur_mask(laplacian_blur_map(gray_frame(g))).any()


class TestOpacityMask:
    def test_examples(self):
        assert not opacity_mask(np.ones((4, 4)), 0.5).any()
        assert opacity_mask(np.zeros((4, 4)), 0.5).all()
        assert opacity_mask(np.array([0.2, 0.5, 0.7]), 0.5).tolist() == [True, False, False]

    @pytest.mark.parametrize("tau", [-0.1, 1.5])
    def test_bad_tau(self, tau):
        with pytest.raises(InvalidArgument):
            opacity_mask(np.ones(3), tau)


class TestCombine:
    def test_or_identity(self):
        full = np.ones((8, 8), bool)
        rm = combine_masks([np.zeros((8, 8), bool)], [full])
        assert rm.pixel.all()

    def test_disjoint_pixels(self):
        a = np.zeros((8, 8), bool)
        b = np.zeros((8, 8), bool)
        a[1, 1] = True
        b[5, 6] = True
        assert combine_masks([a], [b]).pixel.sum() == 2

    def test_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            combine_masks([np.zeros((8, 8), bool)], [np.zeros((8, 16), bool)])

    @given(st.integers(0, 2**32 - 1))
    def test_or_properties(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random((2, 16, 16)) < 0.3
        ab = combine_masks([a], [b]).pixel[0]
        assert ab.sum() >= max(a.sum(), b.sum())
        assert np.array_equal(ab, combine_masks([b], [a]).pixel[0])
        assert np.array_equal(combine_masks([a], [a]).pixel[0], a)


class TestDownsample:
    def test_single_pixel(self):
        m = np.zeros((8, 8), bool)
        m[3, 5] = True
        assert downsample_mask(m, 8).tolist() == [[True]]

    def test_empty(self):
        for f in (1, 2, 4, 8):
            assert not downsample_mask(np.zeros((8, 8), bool), f).any()

    def test_non_divisible(self):
        with pytest.raises(InvalidArgument):
            downsample_mask(np.zeros((8, 8), bool), 3)

    @given(arrays(bool, (16, 16)))
    def test_composition(self, m):
        assert np.array_equal(downsample_mask(downsample_mask(m, 2), 2), downsample_mask(m, 4))

    @given(arrays(bool, (2, 64, 64)))
    @settings(max_examples=30)
    def test_pyramid_coverage(self, m):
        rm = build_pyramid(m)
        factors = [1, *sorted(rm.levels)]
        for fine, coarse in zip(factors, factors[1:]):
            a, b = rm.at(fine), rm.at(coarse)
            ratio = coarse // fine
            ys, xs = np.nonzero(a[0])
            assert all(b[0][y // ratio, x // ratio] for y, x in zip(ys, xs))


def brute_blocks(mask, b):
    n, h, w = mask.shape
    out = []
    for f in range(n):
        for r in range(-(-h // b)):
            for c in range(-(-w // b)):
                if mask[f, r * b : (r + 1) * b, c * b : (c + 1) * b].any():
                    out.append((f, r, c))
    return out


class TestTiles:
    def test_full(self):
        bs = tile_blocks(np.ones((8, 8), bool), 4, 1)
        assert bs.count() == 4

    def test_single_pixel(self):
        m = np.zeros((8, 8), bool)
        m[5, 2] = True
        assert tile_blocks(m, 4).active == ((0, 1, 0),)

    def test_brute_force(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            m = rng.random((2, 10, 7)) < rng.uniform(0.01, 0.3)
            assert list(tile_blocks(m, 4, 1).active) == brute_blocks(m, 4)

    def test_edge_blocks_smaller(self):
        bs = tile_blocks(np.ones((10, 7), bool), 4, 1)
        assert bs.bounds(2, 1) == (8, 10, 4, 7)

    def test_bad_args(self):
        with pytest.raises(InvalidArgument):
            tile_blocks(np.ones((4, 4), bool), 0)

    def test_relabel_and_json(self, tmp_path):
        m = np.zeros((2, 8, 8), bool)
        m[1, 0, 0] = True
        bs = tile_blocks(m, 4, 1, frames=[3, 7])
        assert bs.active == ((7, 0, 0),)
        bs.save(tmp_path / "b.json")
        assert '"active": [[7, 0, 0]]' in (tmp_path / "b.json").read_text()

    @given(arrays(bool, (9, 13)), st.integers(1, 5))
    def test_cover_property(self, m, b):
        bs = tile_blocks(m, b)
        cov = bs.coverage(0)
        assert np.all(cov[m])
        for _, r, c in bs.active:
            r0, r1, c0, c1 = bs.bounds(r, c)
            assert m[r0:r1, c0:c1].any()
        assert len(set(bs.active)) == len(bs.active)
        assert list(bs.active) == sorted(bs.active)
