"""Attention-transfer + KL knowledge distillation for spectral speech enhancement,
built on a self-contained numpy autodiff engine."""

from .data import Dataset, MixtureSpec, derived_rng, load_wav, make_dataset, save_wav, synth_pair
from .distill import (Adam, CompressedMap, DistillConfig, LayerPairing, OptConfig, at_loss,
                      atkl_loss, build_pairing, channel_at, compress_tap, kd_loss,
                      run_distillation, si_snr, si_snr_mix_loss, time_at, train_teacher)
from .models import (ConfigError, Model, ModelConfig, TappedForward, build_model, count_params,
                     forward_tapped, load_checkpoint, save_checkpoint)
from .nn import ComplexConvBlock, LstmStack, apply_mask, complex_conv_forward
from .signal import InputTooShortError, Spectrogram, StftConfig, hann, istft, stft
from .tensor import NumericError, ShapeError, Tensor, UsageError, grad_check, no_grad

__all__ = [
    "Adam", "CompressedMap", "ComplexConvBlock", "ConfigError", "Dataset", "DistillConfig",
    "InputTooShortError", "LayerPairing", "LstmStack", "MixtureSpec", "Model", "ModelConfig",
    "NumericError", "OptConfig", "ShapeError", "Spectrogram", "StftConfig", "TappedForward",
    "Tensor", "UsageError", "apply_mask", "at_loss", "atkl_loss", "build_model", "build_pairing",
    "channel_at", "complex_conv_forward", "compress_tap", "count_params", "derived_rng",
    "forward_tapped", "grad_check", "hann", "istft", "kd_loss", "load_checkpoint", "load_wav",
    "make_dataset", "no_grad", "run_distillation", "save_checkpoint", "save_wav", "si_snr",
    "si_snr_mix_loss", "stft", "synth_pair", "time_at", "train_teacher",
]

__version__ = "0.1.0"
