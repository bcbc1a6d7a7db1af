import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from hybridrefine.core import ImageFrame, InvalidArgument
from hybridrefine.quality import (
    CalibrationRecord,
    KLogic,
    SharpnessContrastProxy,
    decile_bins,
    fit_klogic,
    interpolate_reference,
    quality_ratio,
    read_records_csv,
    score_image,
    select_k,
    write_records_csv,
)

EXAMPLE_LOGIC = KLogic((0.85, 0.92, 0.97), (10, 25, 40), k_max=40, fallback_k=0)


def checkerboard(n=16):
    yy, xx = np.mgrid[0:n, 0:n]
    c = ((yy + xx) % 2).astype(float)
    return np.repeat(c[..., None], 3, axis=2)


def proxy_oracle(rgb):
    # independent re-derivation with explicit neighbour sums
    g = rgb @ np.array([0.299, 0.587, 0.114])
    p = np.pad(g, 1, mode="edge")
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4 * g
    x = math.log1p(float((lap**2).mean())) + 4.0 * float(g.std()) - 3.0
    return 100.0 / (1.0 + math.exp(-x))


class TestProxy:
    def test_constant_gray(self):
        s = score_image(ImageFrame(np.full((8, 8, 3), 0.5)))
        assert s == pytest.approx(100.0 / (1.0 + math.exp(3.0)), abs=1e-9)
        assert s == pytest.approx(4.74, abs=0.01)

    def test_checkerboard_beats_blurred(self):
        c = checkerboard()
        blurred = ndimage.uniform_filter(c, size=(5, 5, 1), mode="nearest")
        assert score_image(ImageFrame(c)) > score_image(ImageFrame(blurred))

    def test_flip_invariant(self):
        rgb = np.random.default_rng(0).uniform(0, 1, (16, 24, 3))
        assert score_image(ImageFrame(rgb)) == pytest.approx(score_image(ImageFrame(rgb[:, ::-1])), abs=1e-9)

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            rgb = rng.uniform(0, 1, (16, 16, 3))
            assert score_image(ImageFrame(rgb)) == pytest.approx(proxy_oracle(rgb), rel=1e-10)

    def test_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            s = SharpnessContrastProxy()(rng.uniform(0, 1, (8, 8, 3)))
            assert 0.0 <= s <= 100.0


class TestInterpolation:
    def test_endpoints(self):
        assert interpolate_reference(60, 70, 0.0, 0.5) == 60
        assert interpolate_reference(60, 70, 1.0, 0.5) == 70
        assert interpolate_reference(70, 60, 0.0, 0.5) == 70
        assert interpolate_reference(70, 60, 1.0, 0.5) == 60

    def test_decreasing_branch(self):
        assert interpolate_reference(70, 60, 0.25, 0.5) == pytest.approx(68.66, abs=0.005)
        assert interpolate_reference(70, 60, 0.25, 0.5) == pytest.approx(70 - 10 * (1 - math.sqrt(0.75)), abs=1e-12)

    def test_increasing_branch(self):
        assert interpolate_reference(60, 70, 0.25, 0.5) == pytest.approx(65.0, abs=1e-12)

    @pytest.mark.parametrize("t,gamma", [(-0.1, 0.5), (1.1, 0.5), (0.5, 0.0), (0.5, 1.5)])
    def test_out_of_range(self, t, gamma):
        with pytest.raises(InvalidArgument):
            interpolate_reference(60, 70, t, gamma)

    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 1))
    def test_gamma_one_is_linear(self, c0, c1, t):
        assert interpolate_reference(c0, c1, t, 1.0) == pytest.approx(c0 + (c1 - c0) * t, abs=1e-12)

    @given(st.floats(0, 100), st.floats(0, 100), st.floats(0, 1), st.floats(0.01, 1))
    def test_stays_between_endpoints(self, c0, c1, t, gamma):
        q = interpolate_reference(c0, c1, t, gamma)
        assert min(c0, c1) - 1e-9 <= q <= max(c0, c1) + 1e-9


class TestRatio:
    def test_examples(self):
        assert quality_ratio(50, 50) == 1.0
        assert quality_ratio(47.5, 50) == pytest.approx(0.95)
        assert quality_ratio(60, 50) == pytest.approx(1.2)

    def test_zero_reference(self):
        with pytest.raises(InvalidArgument):
            quality_ratio(10, 0)


class TestKLogic:
    def test_lookup_examples(self):
        assert select_k(EXAMPLE_LOGIC, 0.5) == 0
        assert select_k(EXAMPLE_LOGIC, 0.95) == 25
        assert select_k(EXAMPLE_LOGIC, 1.1) == 40

    def test_left_closed(self):
        assert select_k(EXAMPLE_LOGIC, 0.85) == 10
        assert select_k(EXAMPLE_LOGIC, np.nextafter(0.85, 0)) == 0

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(thresholds=(0.9, 0.8), steps=(10, 20)),
            dict(thresholds=(0.8, 0.9), steps=(20, 10)),
            dict(thresholds=(0.8, 0.9), steps=(10, 45)),
            dict(thresholds=(0.8,), steps=(10,), fallback_k=20),
            dict(thresholds=(0.8, 0.9), steps=(10,)),
        ],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidArgument):
            KLogic(**kwargs)

    def test_json_round_trip(self, tmp_path):
        logic = KLogic((0.5, 0.8), (20, 40), k_max=40, fallback_k=5, alpha=0.95)
        logic.save(tmp_path / "k.json")
        assert KLogic.load(tmp_path / "k.json") == logic
        assert set(logic.to_json()) == {"alpha", "k_max", "thresholds", "steps", "fallback_k"}

    @given(
        st.lists(st.floats(0.0, 2.0, allow_nan=False), min_size=1, max_size=8, unique=True),
        st.lists(st.integers(0, 40), min_size=9, max_size=9),
    )
    def test_monotone_grid_scan(self, cuts, ks):
        cuts = sorted(cuts)
        ks = sorted(ks)
        logic = KLogic(tuple(cuts), tuple(ks[1 : len(cuts) + 1]), k_max=40, fallback_k=ks[0])
        grid = np.linspace(-0.5, 2.5, 601)
        out = [select_k(logic, r) for r in grid]
        assert all(a <= b for a, b in zip(out, out[1:]))
        assert max(out) <= 40


def synthetic_records(rng, n=200, grid=(5, 10, 15, 20, 25, 30, 35, 40, 45)):
    """Factors fall with k, faster for low ratios, plus noise."""
    recs = []
    for i in range(n):
        r = rng.uniform(0.3, 1.0)
        factors = {k: float(1.0 - (1.2 - r) * (k / 45) ** 2 * 0.4 + rng.normal(0, 0.01)) for k in grid}
        recs.append(CalibrationRecord(f"s{i // 8}", i % 8, r, factors))
    return recs


def replay_guarantee(records, logic, alpha, grid):
    """Every bin whose chosen k is nonzero has mean factor >= alpha at that k."""
    ratios = np.array([r.ratio for r in records])
    edges, idx = decile_bins(ratios)
    for j in range(10):
        members = [r for r, b in zip(records, idx) if b == j]
        if not members:
            continue
        ks = {select_k(logic, r.ratio) for r in members}
        assert len(ks) == 1, "a decile bin must map to one step"
        k = ks.pop()
        if k == 0:
            continue
        assert np.mean([r.factors[k] for r in members]) >= alpha
    return True


class TestFit:
    grid = (5, 10, 15, 20, 25, 30, 35, 40, 45)

    def test_oracle_alpha_one_clamps_to_kmax(self):
        recs = [CalibrationRecord("s", i, 0.1 * i, {k: 1.0 for k in self.grid}) for i in range(20)]
        logic = fit_klogic(recs, 1.0, self.grid)
        assert logic.fallback_k == 40
        assert all(select_k(logic, r) == 40 for r in np.linspace(0, 3, 50))

    def test_unreachable_alpha_gives_zero(self):
        recs = [CalibrationRecord("s", i, i / 40, {k: 0.9 - 0.001 * k for k in self.grid}) for i in range(40)]
        best = max(max(r.factors.values()) for r in recs)
        logic = fit_klogic(recs, best + 1e-3, self.grid)
        assert logic.fallback_k == 0 and logic.steps == ()

    def test_empty(self):
        with pytest.raises(InvalidArgument):
            fit_klogic([], 0.9)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([0.9, 0.95, 0.98]))
    def test_guarantee_and_monotone(self, seed, alpha):
        recs = synthetic_records(np.random.default_rng(seed))
        logic = fit_klogic(recs, alpha, self.grid)
        steps = [logic.fallback_k, *logic.steps]
        assert steps == sorted(steps)
        assert max(steps) <= 40
        assert replay_guarantee(recs, logic, alpha, self.grid)

    def test_non_monotone_factors_still_feasible(self):
        # factor dips at k=40 for high ratios; running minimum must re-select a feasible step
        recs = []
        for i in range(100):
            r = i / 100
            f = {k: 0.99 for k in self.grid}
            if r >= 0.5:
                f[40] = 0.5
            if r < 0.5:
                f = {k: (0.99 if k <= 35 else 0.9) for k in self.grid}
            recs.append(CalibrationRecord("s", i, r, f))
        logic = fit_klogic(recs, 0.95, self.grid)
        assert replay_guarantee(recs, logic, 0.95, self.grid)

    def test_csv_round_trip(self, tmp_path):
        recs = synthetic_records(np.random.default_rng(3), n=16)
        write_records_csv(tmp_path / "r.csv", recs)
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header == "scene_id,frame,ratio,k,quality_factor"
        back = read_records_csv(tmp_path / "r.csv")
        assert [(r.scene_id, r.frame_index, r.ratio, r.factors) for r in back] == [
            (r.scene_id, r.frame_index, r.ratio, r.factors) for r in recs
        ]
