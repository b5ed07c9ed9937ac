"""STFT analysis/synthesis with independent hop lengths, differentiable end to end.

Frames are formed causally (no center padding) and transformed by fixed
cosine/sine matrices, so gradients flow through both directions. Synthesis
uses Hann-windowed overlap-add with window-sum normalization.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


class InputTooShortError(ValueError):
    """Waveform shorter than one analysis window."""


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int
    win_len: int
    hop_len: int
    fft_size: int = 0  # 0 -> next power of two >= win_len

    def __post_init__(self):
        if self.fft_size == 0:
            n = 1
            while n < self.win_len:
                n *= 2
            object.__setattr__(self, "fft_size", n)
        if self.win_len < 2:
            raise ShapeError(f"win_len must be >= 2, got {self.win_len}")
        if self.hop_len < 1 or self.hop_len > self.win_len:
            raise ShapeError(f"hop_len must be in [1, win_len], got {self.hop_len}")
        if self.fft_size < self.win_len or not _is_pow2(self.fft_size):
            raise ShapeError(f"fft_size must be a power of two >= win_len, got {self.fft_size}")

    @property
    def freq_bins(self):
        return self.fft_size // 2 + 1

    def num_frames(self, length):
        if length < self.win_len:
            raise InputTooShortError(f"waveform length {length} < win_len {self.win_len}")
        return 1 + (length - self.win_len) // self.hop_len


@dataclass
class Spectrogram:
    real: Tensor
    imag: Tensor
    config: StftConfig


def hann(win_len, dtype=np.float64):
    """Periodic Hann window: w[n] = 0.5 - 0.5*cos(2*pi*n/win_len)."""
    if win_len < 2:
        raise ShapeError(f"hann: win_len must be >= 2, got {win_len}")
    n = np.arange(win_len, dtype=dtype)
    return Tensor(0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_len))


_dft_cache = {}


def _dft_matrices(cfg: StftConfig, dtype):
    """Forward and inverse real-DFT matrices for a onesided transform."""
    key = (cfg.fft_size, cfg.win_len, np.dtype(dtype).name)
    if key not in _dft_cache:
        N, F = cfg.fft_size, cfg.freq_bins
        n = np.arange(N, dtype=np.float64)
        k = np.arange(F, dtype=np.float64)
        ang = 2.0 * np.pi * np.outer(n, k) / N  # (N, F)
        fwd_cos = np.cos(ang)
        fwd_sin = -np.sin(ang)
        # inverse: x[n] = (1/N) * sum_k scale_k * (re_k*cos - im_k*sin)
        scale = np.full(F, 2.0)
        scale[0] = 1.0
        if N % 2 == 0:
            scale[-1] = 1.0
        inv_cos = (scale[:, None] * np.cos(ang.T)) / N  # (F, N)
        inv_sin = (-scale[:, None] * np.sin(ang.T)) / N
        win = hann(cfg.win_len).data
        wpad = np.zeros(N)
        wpad[: cfg.win_len] = win
        # fold the analysis/synthesis window into the transform matrices
        fwd_cos = fwd_cos[: cfg.win_len] * win[:, None]
        fwd_sin = fwd_sin[: cfg.win_len] * win[:, None]
        inv_cos = inv_cos * wpad[None, :]
        inv_sin = inv_sin * wpad[None, :]
        _dft_cache[key] = tuple(
            m.astype(dtype) for m in (fwd_cos, fwd_sin, inv_cos, inv_sin, wpad)
        )
    return _dft_cache[key]


def frame_signal(wave, win_len, hop_len, num_frames):
    """Gather overlapping frames: (..., L) -> (..., T, win_len)."""
    squeeze = wave.ndim == 1
    xd = wave.data[None] if squeeze else wave.data
    B, L = xd.shape
    idx = hop_len * np.arange(num_frames)[:, None] + np.arange(win_len)[None, :]
    frames = xd[:, idx]
    out = Tensor(frames[0] if squeeze else frames)

    def backward(g):
        g3 = g[None] if squeeze else g
        gx = np.zeros_like(xd)
        for t in range(num_frames):
            gx[:, t * hop_len : t * hop_len + win_len] += g3[:, t]
        wave.accumulate_grad(gx[0] if squeeze else gx)

    return T._record(out, (wave,), "frame", backward)


def overlap_add(frames, hop_len, out_len):
    """Scatter frames back: (..., T, N) -> (..., out_len), summing overlaps."""
    squeeze = frames.ndim == 2
    fd = frames.data[None] if squeeze else frames.data
    B, num_frames, N = fd.shape
    full_len = (num_frames - 1) * hop_len + N
    y = np.zeros((B, max(full_len, out_len)), dtype=fd.dtype)
    for t in range(num_frames):
        y[:, t * hop_len : t * hop_len + N] += fd[:, t]
    y = y[:, :out_len]
    out = Tensor(y[0] if squeeze else y)

    def backward(g):
        g2 = g[None] if squeeze else g
        gpad = np.zeros((B, full_len), dtype=g2.dtype)
        n = min(out_len, full_len)
        gpad[:, :n] = g2[:, :n]
        idx = hop_len * np.arange(num_frames)[:, None] + np.arange(N)[None, :]
        frames.accumulate_grad(gpad[:, idx][0] if squeeze else gpad[:, idx])

    return T._record(out, (frames,), "overlap_add", backward)


def stft(wave, cfg: StftConfig):
    """Onesided STFT of a (L,) or (B, L) waveform -> Spectrogram of (.., F, T)."""
    L = wave.shape[-1]
    nt = cfg.num_frames(L)
    fwd_cos, fwd_sin, _, _, _ = _dft_matrices(cfg, wave.dtype)
    frames = frame_signal(wave, cfg.win_len, cfg.hop_len, nt)
    flat = frames.reshape(-1, cfg.win_len)
    re = T.matmul(flat, Tensor(fwd_cos))
    im = T.matmul(flat, Tensor(fwd_sin))
    F = cfg.freq_bins
    if wave.ndim == 1:
        re = re.reshape(nt, F).transpose(1, 0)
        im = im.reshape(nt, F).transpose(1, 0)
    else:
        re = re.reshape(wave.shape[0], nt, F).transpose(0, 2, 1)
        im = im.reshape(wave.shape[0], nt, F).transpose(0, 2, 1)
    return Spectrogram(re, im, cfg)


def istft(spec: Spectrogram, cfg: StftConfig, out_len):
    """Inverse STFT by windowed overlap-add, truncated/zero-padded to out_len."""
    re, im = spec.real, spec.imag
    if re.shape != im.shape:
        raise ShapeError(f"istft: real {re.shape} vs imag {im.shape}")
    F = cfg.freq_bins
    if re.shape[-2] != F:
        raise ShapeError(f"istft: expected {F} frequency bins, got {re.shape[-2]}")
    _, _, inv_cos, inv_sin, wpad = _dft_matrices(cfg, re.dtype)
    nt = re.shape[-1]
    batched = re.ndim == 3
    if batched:
        B = re.shape[0]
        re2 = re.transpose(0, 2, 1).reshape(B * nt, F)
        im2 = im.transpose(0, 2, 1).reshape(B * nt, F)
    else:
        re2 = re.transpose(1, 0)
        im2 = im.transpose(1, 0)
    frames = T.matmul(re2, Tensor(inv_cos)) + T.matmul(im2, Tensor(inv_sin))
    N = cfg.fft_size
    if batched:
        frames = frames.reshape(B, nt, N)
    full_len = (nt - 1) * cfg.hop_len + N
    y = overlap_add(frames, cfg.hop_len, max(full_len, out_len))
    norm = np.zeros(max(full_len, out_len), dtype=re.dtype)
    ww = wpad * wpad
    for t in range(nt):
        norm[t * cfg.hop_len : t * cfg.hop_len + N] += ww
    y = y / Tensor(np.maximum(norm, 1e-12))
    if y.shape[-1] != out_len:
        y = y.narrow(-1 if not batched else 1, 0, out_len)
    return y
