"""STFT/iSTFT: framing, windows, round trips, linearity, differentiability."""
import numpy as np
import pytest

from atkl import tensor as T
from atkl.signal import InputTooShortError, Spectrogram, StftConfig, hann, istft, stft
from atkl.tensor import ShapeError, Tensor, grad_check


def wave(n, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(-1.0, 1.0, n))


class TestConfig:
    def test_fft_defaults_to_next_pow2(self):
        assert StftConfig(8000, 400, 100).fft_size == 512
        assert StftConfig(8000, 256, 128).fft_size == 256

    def test_rejects_bad_hop(self):
        with pytest.raises(ShapeError):
            StftConfig(8000, 256, 300, 256)

    def test_rejects_non_pow2_fft(self):
        with pytest.raises(ShapeError):
            StftConfig(8000, 250, 100, 300)

    def test_frame_count_formula(self):
        cfg = StftConfig(8000, 256, 80, 256)
        assert cfg.num_frames(8000) == 1 + (8000 - 256) // 80 == 97
        teacher = StftConfig(8000, 256, 128, 256)
        assert teacher.num_frames(8000) == 61

    def test_student_has_more_frames_than_teacher(self):
        t_cfg = StftConfig(8000, 256, 128, 256)
        s_cfg = StftConfig(8000, 256, 80, 256)
        for L in (4000, 8000, 12345):
            assert s_cfg.num_frames(L) > t_cfg.num_frames(L)


class TestHann:
    def test_endpoints(self):
        w = hann(256).data
        assert w[0] == 0.0
        assert w[128] == pytest.approx(1.0)

    def test_amplitude_cola_hop_half(self):
        # periodic Hann windows at hop win/2 tile to a constant 1
        N, hop, L = 256, 128, 256 * 6
        w = hann(N).data
        s = np.zeros(L)
        for start in range(0, L - N + 1, hop):
            s[start : start + N] += w
        interior = s[N : L - N]
        np.testing.assert_allclose(interior, 1.0, atol=1e-10)

    def test_squared_cola_hop_quarter(self):
        # squared windows only tile to a constant at hop win/4 (value 3/2)
        N, hop, L = 256, 64, 256 * 6
        w = hann(N).data ** 2
        s = np.zeros(L)
        for start in range(0, L - N + 1, hop):
            s[start : start + N] += w
        interior = s[N : L - N]
        np.testing.assert_allclose(interior, 1.5, atol=1e-10)

    def test_minimum_length(self):
        with pytest.raises(ShapeError):
            hann(1)


class TestStft:
    def test_zero_wave_zero_spec(self):
        cfg = StftConfig(8000, 256, 80, 256)
        spec = stft(Tensor(np.zeros(8000)), cfg)
        assert not spec.real.data.any() and not spec.imag.data.any()

    def test_shapes(self):
        cfg = StftConfig(8000, 256, 80, 256)
        spec = stft(wave(8000), cfg)
        assert spec.real.shape == (129, 97)
        batched = stft(Tensor(np.random.default_rng(1).normal(size=(3, 8000))), cfg)
        assert batched.real.shape == (3, 129, 97)

    def test_too_short_raises(self):
        cfg = StftConfig(8000, 256, 80, 256)
        with pytest.raises(InputTooShortError):
            stft(wave(100), cfg)

    def test_pure_cosine_peaks_at_its_bin(self):
        cfg = StftConfig(8000, 256, 128, 256)
        k = 16
        n = np.arange(4000)
        x = Tensor(np.cos(2.0 * np.pi * k * n / cfg.fft_size))
        spec = stft(x, cfg)
        mag = np.hypot(spec.real.data, spec.imag.data)
        assert (mag.argmax(axis=0) == k).all()

    def test_linearity(self):
        cfg = StftConfig(8000, 256, 80, 256)
        x, y = wave(4000, 1), wave(4000, 2)
        a, b = 2.5, -1.25
        lhs = stft(Tensor(a * x.data + b * y.data), cfg)
        sx, sy = stft(x, cfg), stft(y, cfg)
        np.testing.assert_allclose(lhs.real.data, a * sx.real.data + b * sy.real.data, atol=1e-9)
        np.testing.assert_allclose(lhs.imag.data, a * sx.imag.data + b * sy.imag.data, atol=1e-9)

    def test_matches_numpy_rfft_oracle(self):
        cfg = StftConfig(8000, 256, 128, 256)
        x = wave(1000, 3)
        spec = stft(x, cfg)
        w = hann(256).data
        for t_idx in (0, 3, 5):
            frame = x.data[t_idx * 128 : t_idx * 128 + 256] * w
            ref = np.fft.rfft(frame)
            np.testing.assert_allclose(spec.real.data[:, t_idx], ref.real, atol=1e-9)
            np.testing.assert_allclose(spec.imag.data[:, t_idx], ref.imag, atol=1e-9)


class TestIstft:
    @pytest.mark.parametrize("win,hop", [(256, 128), (256, 64)])
    def test_round_trip_interior(self, win, hop):
        cfg = StftConfig(8000, win, hop, 256)
        x = wave(8000, 5)
        back = istft(stft(x, cfg), cfg, 8000)
        interior = slice(win, 8000 - win)
        err = np.linalg.norm(back.data[interior] - x.data[interior]) / np.linalg.norm(x.data[interior])
        assert err < 1e-6

    def test_zero_spec_zero_wave(self):
        cfg = StftConfig(8000, 256, 128, 256)
        spec = Spectrogram(Tensor(np.zeros((129, 10))), Tensor(np.zeros((129, 10))), cfg)
        assert not istft(spec, cfg, 2000).data.any()

    def test_scaling_linearity(self):
        cfg = StftConfig(8000, 256, 128, 256)
        spec = stft(wave(4000, 7), cfg)
        y1 = istft(spec, cfg, 4000)
        spec3 = Spectrogram(spec.real * 3.0, spec.imag * 3.0, cfg)
        y3 = istft(spec3, cfg, 4000)
        np.testing.assert_allclose(y3.data, 3.0 * y1.data, atol=1e-9)

    def test_out_len_truncates_and_pads(self):
        cfg = StftConfig(8000, 256, 128, 256)
        spec = stft(wave(4000, 8), cfg)
        assert istft(spec, cfg, 1000).shape == (1000,)
        assert istft(spec, cfg, 6000).shape == (6000,)

    def test_extent_mismatch_raises(self):
        cfg = StftConfig(8000, 256, 128, 256)
        bad = Spectrogram(Tensor(np.zeros((64, 10))), Tensor(np.zeros((64, 10))), cfg)
        with pytest.raises(ShapeError):
            istft(bad, cfg, 1000)

    def test_batched_matches_single(self):
        cfg = StftConfig(8000, 256, 80, 256)
        xs = np.random.default_rng(9).normal(size=(3, 2000))
        got = istft(stft(Tensor(xs), cfg), cfg, 2000).data
        for b in range(3):
            single = istft(stft(Tensor(xs[b]), cfg), cfg, 2000).data
            np.testing.assert_allclose(got[b], single, atol=1e-12)


class TestGradients:
    def test_stft_power_gradcheck(self):
        cfg = StftConfig(8000, 32, 16, 32)
        x = Tensor(np.random.default_rng(0).uniform(-1, 1, 96))

        def f(a):
            spec = stft(a, cfg)
            return (spec.real.square() + spec.imag.square()).sum()

        assert grad_check(f, [x]).ok(1e-4)

    def test_istft_gradcheck(self):
        cfg = StftConfig(8000, 32, 16, 32)
        rng = np.random.default_rng(1)
        re = Tensor(rng.normal(size=(17, 4)))
        im = Tensor(rng.normal(size=(17, 4)))

        def f(r, i):
            return istft(Spectrogram(r, i, cfg), cfg, 80).square().sum()

        assert grad_check(f, [re, im]).ok(1e-3)
