"""Neural building blocks: complex conv/deconv blocks, an LSTM stack, masking.

Channel counts follow the stacked convention used by complex spectral U-Nets:
a block's nominal in/out channels count real and imaginary planes together, so
each complex part carries half of them. Activations travel as a single tensor
with real parts in the first half of the channel axis and imaginary parts in
the second half.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .signal import Spectrogram
from .tensor import ShapeError, Tensor

NORM_EPS = 1e-5


def _uniform(rng, shape, bound, dtype):
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def channel_norm(x, gamma, beta):
    """Per-channel affine normalization over (F, T), computed per utterance."""
    axes = (x.ndim - 2, x.ndim - 1)
    mu = x.mean(axis=axes, keepdims=True)
    xc = x - mu
    var = xc.square().mean(axis=axes, keepdims=True)
    xhat = xc / (var + NORM_EPS).sqrt()
    return xhat * gamma + beta


def norm_prelu(x, gamma, beta, slope):
    """Fused channel_norm followed by PReLU with a hand-written backward.

    x: (B, C, F, T); gamma/beta/slope: (C, 1, 1). Matches the composition of
    channel_norm and prelu exactly; fused to cut temporary allocations on the
    training hot path.
    """
    xd, gd, bd, sd = x.data, gamma.data, beta.data, slope.data
    n = xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xhat = xd - mu
    var = np.einsum("bcft,bcft->bc", xhat, xhat) / n
    istd = (1.0 / np.sqrt(var + NORM_EPS))[:, :, None, None]
    xhat *= istd
    y = xhat * gd
    y += bd
    neg = y < 0
    out = Tensor(np.where(neg, sd * y, y))

    def backward(g):
        dy = np.where(neg, sd * g, g)
        if slope.requires_grad:
            gy = np.where(neg, y, 0.0)
            slope.accumulate_grad(np.einsum("bcft,bcft->c", gy, g)[:, None, None], own=True)
        if gamma.requires_grad:
            gamma.accumulate_grad(np.einsum("bcft,bcft->c", dy, xhat)[:, None, None], own=True)
        if beta.requires_grad:
            beta.accumulate_grad(np.einsum("bcft->c", dy)[:, None, None], own=True)
        if x.requires_grad:
            dxhat = dy * gd
            m1 = np.einsum("bcft->bc", dxhat)[:, :, None, None] / n
            m2 = np.einsum("bcft,bcft->bc", dxhat, xhat)[:, :, None, None] / n
            dxhat -= m1
            dxhat -= xhat * m2
            dxhat *= istd
            x.accumulate_grad(dxhat, own=True)

    return T._record(out, (x, gamma, beta, slope), "norm_prelu", backward)


class ComplexConvBlock:
    """Complex conv (or transposed conv) + per-channel norm + PReLU.

    in_ch/out_ch are nominal (real+imag stacked); weights are stored per part.
    Time is handled causally: forward convs pad kt-1 frames on the past side,
    transposed convs drop the trailing kt-1 frames.
    """

    def __init__(self, name, in_ch, out_ch, kernel=(5, 2), stride=(2, 1), freq_pad=2,
                 transposed=False, freq_output_pad=0, norm_act=True, rng=None,
                 dtype=np.float32):
        if in_ch % 2 or out_ch % 2 or in_ch < 2 or out_ch < 2:
            raise ShapeError(f"{name}: channel counts must be even and >= 2, got {in_ch}->{out_ch}")
        self.name = name
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride = kernel, stride
        self.freq_pad = freq_pad
        self.transposed = transposed
        self.freq_output_pad = freq_output_pad
        self.norm_act = norm_act
        inp, outp = in_ch // 2, out_ch // 2
        kh, kw = kernel
        wshape = (inp, outp, kh, kw) if transposed else (outp, inp, kh, kw)
        bound = 1.0 / np.sqrt(inp * kh * kw * 2)
        self.w_real = _uniform(rng, wshape, bound, dtype)
        self.w_imag = _uniform(rng, wshape, bound, dtype)
        self.bias_real = _uniform(rng, (outp,), bound, dtype)
        self.bias_imag = _uniform(rng, (outp,), bound, dtype)
        if norm_act:
            self.gamma = Tensor(np.ones((out_ch, 1, 1), dtype), requires_grad=True)
            self.beta = Tensor(np.zeros((out_ch, 1, 1), dtype), requires_grad=True)
            self.slope = Tensor(np.full((out_ch, 1, 1), 0.25, dtype), requires_grad=True)

    def parameters(self):
        names = ["w_real", "w_imag", "bias_real", "bias_imag"]
        if self.norm_act:
            names += ["gamma", "beta", "slope"]
        return {f"{self.name}.{n}": getattr(self, n) for n in names}

    def forward(self, x):
        """x: (B, in_ch, F, T) stacked real/imag -> (B, out_ch, F', T').

        A 3-d input is treated as batch size 1 and squeezed on return.
        """
        if x.shape[-3] != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {x.shape[-3]}")
        if x.ndim == 3:
            y = self.forward(x.reshape(1, *x.shape))
            return y.reshape(*y.shape[1:])
        # one conv on the block matrix [[wr, -wi], [wi, wr]] realizes the
        # complex product for stacked parts
        axis0, axis1 = (1, 0) if self.transposed else (0, 1)
        w = T.concat(
            [T.concat([self.w_real, -self.w_imag], axis=axis1),
             T.concat([self.w_imag, self.w_real], axis=axis1)],
            axis=axis0,
        )
        kt = self.kernel[1]
        if self.transposed:
            y = T.conv_transpose2d(x, w, self.stride, (self.freq_pad, 0),
                                   (self.freq_output_pad, 0))
            if kt > 1:
                y = y.narrow(y.ndim - 1, 0, y.shape[-1] - (kt - 1))
        else:
            # causal framing: pad kt-1 zero frames on the past side only
            y = T.conv2d(x, w, self.stride, (self.freq_pad, (kt - 1, 0)))
        bias = T.concat([self.bias_real, self.bias_imag], axis=0)
        y = y + bias.reshape(self.out_ch, 1, 1)
        if self.norm_act:
            y = norm_prelu(y, self.gamma, self.beta, self.slope)
        return y


def complex_conv_forward(block, x_real, x_imag):
    """Pair-wise wrapper around a block: (Cin/2,F,T) parts in, parts out."""
    cat_ax = x_real.ndim - 3
    y = block.forward(T.concat([x_real, x_imag], axis=cat_ax))
    half = block.out_ch // 2
    return y.narrow(cat_ax, 0, half), y.narrow(cat_ax, half, half)


def lstm_seq(x, w_x, w_h, b):
    """One LSTM layer over a full sequence with a fused backward pass.

    x: (B, T, D); w_x: (4H, D); w_h: (4H, H); b: (4H,) with gate layout
    [input, forget, output, cell]. States start at zero per call.
    """
    B, Tn, D = x.shape
    H = w_h.shape[1]
    xd, wxd, whd, bd = x.data, w_x.data, w_h.data, b.data
    gx = xd.reshape(B * Tn, D) @ wxd.T
    gx = gx.reshape(B, Tn, 4 * H) + bd
    h = np.zeros((B, H), dtype=xd.dtype)
    c = np.zeros((B, H), dtype=xd.dtype)
    gates = np.empty((B, Tn, 4 * H), dtype=xd.dtype)
    c_prev = np.empty((B, Tn, H), dtype=xd.dtype)
    c_tanh = np.empty((B, Tn, H), dtype=xd.dtype)
    out = np.empty((B, Tn, H), dtype=xd.dtype)
    for t in range(Tn):
        z = gx[:, t] + h @ whd.T
        z[:, : 3 * H] = T._sigmoid_raw(z[:, : 3 * H])
        z[:, 3 * H :] = np.tanh(z[:, 3 * H :])
        i, f, o, g = z[:, :H], z[:, H : 2 * H], z[:, 2 * H : 3 * H], z[:, 3 * H :]
        c_prev[:, t] = c
        c = f * c + i * g
        ct = np.tanh(c)
        c_tanh[:, t] = ct
        h = o * ct
        gates[:, t] = z
        out[:, t] = h
    result = Tensor(out)

    def backward(gout):
        dz_all = np.empty((B, Tn, 4 * H), dtype=xd.dtype)
        dh = np.zeros((B, H), dtype=xd.dtype)
        dc = np.zeros((B, H), dtype=xd.dtype)
        for t in range(Tn - 1, -1, -1):
            z = gates[:, t]
            i, f, o, g = z[:, :H], z[:, H : 2 * H], z[:, 2 * H : 3 * H], z[:, 3 * H :]
            ct = c_tanh[:, t]
            dh_t = gout[:, t] + dh
            do = dh_t * ct
            dc = dc + dh_t * o * (1.0 - ct * ct)
            di = dc * g
            df = dc * c_prev[:, t]
            dg = dc * i
            dz = dz_all[:, t]
            dz[:, :H] = di * i * (1.0 - i)
            dz[:, H : 2 * H] = df * f * (1.0 - f)
            dz[:, 2 * H : 3 * H] = do * o * (1.0 - o)
            dz[:, 3 * H :] = dg * (1.0 - g * g)
            dh = dz @ whd
            dc = dc * f
        dz2 = dz_all.reshape(B * Tn, 4 * H)
        if x.requires_grad:
            x.accumulate_grad((dz2 @ wxd).reshape(B, Tn, D))
        if w_x.requires_grad:
            w_x.accumulate_grad(dz2.T @ xd.reshape(B * Tn, D))
        if w_h.requires_grad:
            # recurrent input to step t is out[:, t-1] (zeros at t=0)
            h_prev = np.zeros((B, Tn, H), dtype=xd.dtype)
            h_prev[:, 1:] = out[:, :-1]
            w_h.accumulate_grad(dz2.T @ h_prev.reshape(B * Tn, H))
        if b.requires_grad:
            b.accumulate_grad(dz2.sum(axis=0))

    return T._record(result, (x, w_x, w_h, b), "lstm_seq", backward)


class LstmStack:
    """Stacked unidirectional LSTM layers; forget-gate bias initialized to 1."""

    def __init__(self, name, input_size, hidden, num_layers=2, rng=None, dtype=np.float32):
        self.name = name
        self.hidden = hidden
        self.num_layers = num_layers
        self.layers = []
        for k in range(num_layers):
            d = input_size if k == 0 else hidden
            bound = 1.0 / np.sqrt(hidden)
            w_x = _uniform(rng, (4 * hidden, d), bound, dtype)
            w_h = _uniform(rng, (4 * hidden, hidden), bound, dtype)
            b = np.zeros(4 * hidden, dtype)
            b[hidden : 2 * hidden] = 1.0
            self.layers.append((w_x, w_h, Tensor(b, requires_grad=True)))

    def parameters(self):
        out = {}
        for k, (w_x, w_h, b) in enumerate(self.layers):
            out[f"{self.name}.l{k}.w_x"] = w_x
            out[f"{self.name}.l{k}.w_h"] = w_h
            out[f"{self.name}.l{k}.b"] = b
        return out

    def forward(self, x):
        """x: (B, T, D) -> (B, T, hidden)."""
        for w_x, w_h, b in self.layers:
            x = lstm_seq(x, w_x, w_h, b)
        return x


def apply_mask(noisy: Spectrogram, mask_real, mask_imag):
    """Complex ratio masking: pointwise complex product of mask and spectrum."""
    if mask_real.shape != noisy.real.shape or mask_imag.shape != noisy.imag.shape:
        raise ShapeError(
            f"apply_mask: mask {mask_real.shape} vs spectrogram {noisy.real.shape}"
        )
    out_r = noisy.real * mask_real - noisy.imag * mask_imag
    out_i = noisy.real * mask_imag + noisy.imag * mask_real
    return Spectrogram(out_r, out_i, noisy.config)
