import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridrefine.core import (
    ImageFrame,
    InvalidArgument,
    LatentCodec,
    NoiseSchedule,
    build_schedule,
    decode,
    encode,
    load_png,
    quantize,
    read_tensor,
    save_png,
    write_tensor,
)


class TestSchedule:
    def test_cosine_endpoint_exact(self):
        s = build_schedule(50, "cosine")
        assert s.abar[50] == 1.0
        assert s.total_steps == 50

    def test_linear_midpoint(self):
        s = build_schedule(50, "linear")
        assert s.abar[25] == pytest.approx(0.505, abs=1e-12)
        assert s.abar[0] == pytest.approx(0.01)

    def test_cosine_strictly_increasing_scan(self):
        a = build_schedule(50, "cosine").abar
        assert len(a) == 51
        for u in range(50):
            assert a[u] < a[u + 1]

    def test_cosine_formula(self):
        # independent evaluation of the offset cosine form
        s = build_schedule(10, "cosine")
        for u in range(11):
            expected = math.cos(math.pi / 2 * (1 - u / 10) * 0.98) ** 2
            assert s[u] == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("S", [0, 1, -3])
    def test_too_few_steps(self, S):
        with pytest.raises(InvalidArgument):
            build_schedule(S)

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgument):
            build_schedule(10, "sigmoid")

    @given(st.integers(2, 400), st.sampled_from(["cosine", "linear"]))
    def test_monotone_any_length(self, S, kind):
        a = build_schedule(S, kind).abar
        assert a[-1] == 1.0
        assert a[0] > 0
        assert np.all(np.diff(a) > 0)

    def test_rejects_non_monotone(self):
        with pytest.raises(InvalidArgument):
            NoiseSchedule(np.array([0.1, 0.1, 1.0]))
        with pytest.raises(InvalidArgument):
            NoiseSchedule(np.array([0.1, 0.5, 0.99]))


class TestImageFrame:
    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidArgument):
            ImageFrame(np.full((8, 8, 3), 1.5))

    def test_rejects_bad_dims(self):
        with pytest.raises(InvalidArgument):
            ImageFrame(np.zeros((12, 8, 3)))

    def test_rejects_bad_opacity(self):
        with pytest.raises(InvalidArgument):
            ImageFrame(np.zeros((8, 8, 3)), np.full((8, 8), -0.1))

    def test_immutable(self):
        f = ImageFrame(np.zeros((8, 8, 3)))
        with pytest.raises(ValueError):
            f.rgb[0, 0, 0] = 1.0


class TestCodec:
    def test_zero_frame(self):
        z = encode([ImageFrame(np.zeros((16, 16, 3)))])
        assert z.shape == (1, 2, 2, 192)
        assert np.all(z == 0)

    def test_zero_latent(self):
        assert np.all(decode(np.zeros((2, 1, 1, 192))) == 0)

    def test_mix_is_orthogonal(self):
        mix = LatentCodec().mix
        assert np.allclose(mix @ mix.T, np.eye(192), atol=1e-12)

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, (3, 24, 16, 3))
        assert np.max(np.abs(decode(encode(x)) - x)) < 1e-5

    def test_inverse_composition_latent_side(self):
        rng = np.random.default_rng(1)
        z = rng.standard_normal((2, 3, 2, 192))
        assert np.allclose(encode(decode(z)), z, atol=1e-6)

    def test_space_to_depth_layout(self):
        # without the mix, channel c of block (i, j) is pixel (8i + c//24, 8j + (c//3)%8, c%3)
        codec = LatentCodec()
        x = np.random.default_rng(2).uniform(0, 1, (1, 16, 8, 3))
        raw = codec.encode(x) @ codec.mix.T
        for c in (0, 5, 100, 191):
            dy, dx, ch = c // 24, (c // 3) % 8, c % 3
            assert raw[0, 1, 0, c] == pytest.approx(x[0, 8 + dy, dx, ch])

    def test_non_multiple_of_eight(self):
        with pytest.raises(InvalidArgument):
            encode(np.zeros((1, 12, 16, 3)))

    def test_decode_shape_mismatch(self):
        with pytest.raises(InvalidArgument):
            decode(np.zeros((1, 2, 2, 100)))

    def test_decode_frames_clamps(self):
        z = encode(np.full((1, 8, 8, 3), 0.5)) * 3.0
        frames = LatentCodec().decode_frames(z)
        assert frames[0].rgb.max() == 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**32 - 1))
    def test_round_trip_and_norm(self, n, hb, wb, seed):
        x = np.random.default_rng(seed).uniform(0, 1, (n, 8 * hb, 8 * wb, 3))
        z = encode(x)
        assert np.max(np.abs(decode(z) - x)) < 1e-5
        assert np.linalg.norm(z) == pytest.approx(np.linalg.norm(x), abs=1e-5)


class TestFiles:
    def test_tensor_round_trip(self, tmp_path):
        a = np.random.default_rng(3).standard_normal((2, 3, 4)).astype(np.float32)
        write_tensor(tmp_path / "a.sptx", a)
        b = read_tensor(tmp_path / "a.sptx")
        assert b.shape == a.shape
        assert b.tobytes() == a.tobytes()

    def test_tensor_header(self, tmp_path):
        write_tensor(tmp_path / "a.sptx", np.zeros((2, 5), dtype=np.float32))
        raw = (tmp_path / "a.sptx").read_bytes()
        assert raw[:4] == b"SPTX"
        assert raw[4] == 2
        assert int.from_bytes(raw[5:9], "little") == 2
        assert int.from_bytes(raw[9:13], "little") == 5
        assert len(raw) == 13 + 10 * 4

    def test_tensor_truncated(self, tmp_path):
        write_tensor(tmp_path / "a.sptx", np.zeros((4,), dtype=np.float32))
        p = tmp_path / "a.sptx"
        p.write_bytes(p.read_bytes()[:-2])
        with pytest.raises(InvalidArgument):
            read_tensor(p)

    def test_png_round_trip_on_8bit_grid(self, tmp_path):
        rgb = quantize(np.random.default_rng(4).uniform(0, 1, (16, 8, 3)))
        op = quantize(np.random.default_rng(5).uniform(0, 1, (16, 8)))
        save_png(tmp_path / "f.png", ImageFrame(rgb, op), tmp_path / "o.png")
        back = load_png(tmp_path / "f.png", tmp_path / "o.png")
        assert np.array_equal(back.rgb, rgb)
        assert np.array_equal(back.opacity, op)
