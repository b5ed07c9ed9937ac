"""Student/teacher U-Net assembly with activation taps and checkpoint I/O.

The model is a causal complex-spectrum U-Net: STFT -> complex conv encoder
(frequency stride 2) -> real LSTM bottleneck on flattened features -> complex
transposed-conv decoder with skip concatenation -> 1x1 complex conv producing
an unbounded complex ratio mask -> iSTFT. The DC bin is excluded from the
network input and restored as a zero mask row, keeping every internal
frequency extent a power of two.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import ComplexConvBlock, LstmStack, apply_mask
from .signal import StftConfig, istft, stft
from .tensor import Tensor

CHECKPOINT_MAGIC = b"ATKL"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Inconsistent model or experiment configuration."""


@dataclass
class ModelConfig:
    stft: StftConfig
    enc_channels: list[int]
    lstm_hidden: int
    lstm_layers: int = 2
    kernel: tuple = (5, 2)
    stride: tuple = (2, 1)
    freq_pad: int = 2


@dataclass
class TappedForward:
    enhanced_wave: Tensor
    enc_taps: list[Tensor] = field(default_factory=list)
    dec_taps: list[Tensor] = field(default_factory=list)


def _freq_plan(cfg: ModelConfig):
    """Frequency extent after each encoder layer, starting below the DC bin."""
    f = cfg.stft.fft_size // 2
    plan = [f]
    for _ in cfg.enc_channels:
        f = (f + 2 * cfg.freq_pad - cfg.kernel[0]) // cfg.stride[0] + 1
        if f < 1:
            raise ConfigError(
                f"frequency extent collapsed below 1 for fft_size {cfg.stft.fft_size} "
                f"and {len(cfg.enc_channels)} encoder layers"
            )
        plan.append(f)
    return plan


class Model:
    """A built network: blocks plus a flat named-parameter view."""

    def __init__(self, cfg: ModelConfig, seed, dtype=np.float32):
        for c in cfg.enc_channels:
            if c < 2 or c % 2:
                raise ConfigError(f"enc_channels must be even and >= 2, got {cfg.enc_channels}")
        self.cfg = cfg
        self.dtype = dtype
        freqs = _freq_plan(cfg)
        rng = np.random.default_rng(np.random.SeedSequence([int(seed)]))
        chans = [2] + list(cfg.enc_channels)
        self.encoder = [
            ComplexConvBlock(f"enc{k}", chans[k], chans[k + 1], cfg.kernel, cfg.stride,
                             cfg.freq_pad, rng=rng, dtype=dtype)
            for k in range(len(cfg.enc_channels))
        ]
        self.bottleneck_freq = freqs[-1]
        feat = cfg.enc_channels[-1] * self.bottleneck_freq
        self.lstm = LstmStack("lstm", feat, cfg.lstm_hidden, cfg.lstm_layers, rng, dtype)
        bound = 1.0 / np.sqrt(cfg.lstm_hidden)
        self.proj_w = Tensor(
            rng.uniform(-bound, bound, size=(feat, cfg.lstm_hidden)).astype(dtype),
            requires_grad=True,
        )
        self.proj_b = Tensor(np.zeros(feat, dtype), requires_grad=True)
        # decoder widths follow the encoder in reverse, shifted one layer down;
        # the mask comes from a separate 1x1 complex conv
        L = len(cfg.enc_channels)
        dec_out = [cfg.enc_channels[L - 2 - j] if j < L - 1 else cfg.enc_channels[0]
                   for j in range(L)]
        self.decoder = []
        prev = cfg.enc_channels[-1]
        for j in range(L):
            skip = cfg.enc_channels[L - 1 - j]
            self.decoder.append(
                ComplexConvBlock(f"dec{j}", prev + skip, dec_out[j], cfg.kernel, cfg.stride,
                                 cfg.freq_pad, transposed=True, freq_output_pad=1,
                                 rng=rng, dtype=dtype)
            )
            prev = dec_out[j]
        self.mask_conv = ComplexConvBlock("mask", cfg.enc_channels[0], 2, kernel=(1, 1),
                                          stride=(1, 1), freq_pad=0, norm_act=False,
                                          rng=rng, dtype=dtype)

    def parameters(self):
        params = {}
        for block in self.encoder + self.decoder + [self.mask_conv]:
            params.update(block.parameters())
        params.update(self.lstm.parameters())
        params["proj.w"] = self.proj_w
        params["proj.b"] = self.proj_b
        return params

    def state(self):
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state(self, state):
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise ConfigError(f"checkpoint mismatch: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ConfigError(f"checkpoint tensor {name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(self.dtype)

    def set_requires_grad(self, flag):
        for p in self.parameters().values():
            p.requires_grad = flag

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def tap_channels(self):
        """Nominal channel extents of encoder and decoder taps."""
        enc = list(self.cfg.enc_channels)
        return enc, [b.out_ch for b in self.decoder]

    def forward_tapped(self, wave):
        return forward_tapped(self, wave)


def build_model(cfg: ModelConfig, seed, dtype=np.float32) -> Model:
    """Instantiate a model with deterministic fan-in uniform initialization."""
    if not cfg.enc_channels:
        raise ConfigError("enc_channels must be non-empty")
    return Model(cfg, seed, dtype)


def forward_tapped(model: Model, wave) -> TappedForward:
    """Enhance a (L,) or (B, L) waveform, recording post-activation taps."""
    cfg = model.cfg
    batched = wave.ndim == 2
    L = wave.shape[-1]
    spec = stft(wave, cfg.stft)
    F = cfg.stft.freq_bins
    fax = 1 if batched else 0
    re = spec.real.narrow(fax, 1, F - 1)
    im = spec.imag.narrow(fax, 1, F - 1)
    if not batched:
        re = re.reshape(1, 1, *re.shape)
        im = im.reshape(1, 1, *im.shape)
    else:
        re = re.reshape(re.shape[0], 1, *re.shape[1:])
        im = im.reshape(im.shape[0], 1, *im.shape[1:])
    x = T.concat([re, im], axis=1)

    enc_taps = []
    for block in model.encoder:
        x = block.forward(x)
        enc_taps.append(x)

    B, C, Fb, Tn = x.shape
    z = x.transpose(0, 3, 1, 2).reshape(B, Tn, C * Fb)
    z = model.lstm.forward(z)
    z = T.matmul(z.reshape(B * Tn, model.cfg.lstm_hidden), model.proj_w.transpose(1, 0))
    z = z + model.proj_b
    x = z.reshape(B, Tn, C, Fb).transpose(0, 2, 3, 1)

    dec_taps = []
    nlayers = len(model.decoder)
    for j, block in enumerate(model.decoder):
        x = T.concat([x, enc_taps[nlayers - 1 - j]], axis=1)
        x = block.forward(x)
        dec_taps.append(x)

    mask = model.mask_conv.forward(x)
    zrow = Tensor(np.zeros((B, 1, Tn), x.data.dtype))
    m_r = T.concat([zrow, mask.narrow(1, 0, 1).reshape(B, F - 1, Tn)], axis=1)
    m_i = T.concat([zrow, mask.narrow(1, 1, 1).reshape(B, F - 1, Tn)], axis=1)
    if not batched:
        m_r = m_r.reshape(F, Tn)
        m_i = m_i.reshape(F, Tn)
    enhanced = apply_mask(spec, m_r, m_i)
    out = istft(enhanced, cfg.stft, L)
    if not batched:
        enc_taps = [t.reshape(*t.shape[1:]) for t in enc_taps]
        dec_taps = [t.reshape(*t.shape[1:]) for t in dec_taps]
    return TappedForward(out, enc_taps, dec_taps)


def count_params(cfg: ModelConfig) -> int:
    """Exact number of scalar parameters a built model would hold."""
    if not cfg.enc_channels:
        return 0
    model = Model(cfg, seed=0)
    return sum(p.data.size for p in model.parameters().values())


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, state):
    """Write named float32 tensors in the little-endian binary layout."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(state)))
        for name, arr in state.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as an ordered dict of float32 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ConfigError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape)
            off += 4 * n
            state[name] = arr.copy()
    except (struct.error, ValueError) as e:
        raise ConfigError(f"{path}: truncated or corrupt checkpoint") from e
    return state
