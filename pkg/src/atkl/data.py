"""Deterministic synthetic clean/noisy pair generation and WAV PCM16 I/O.

Every clip is a pure function of its seed: clean signals are seeded random
tone mixtures with slow amplitude envelopes, noise is white or pink, and the
noise gain is solved analytically so the clean/noise power ratio hits the
requested SNR exactly. Both signals are then jointly peak-normalized to 0.9,
which leaves the ratio untouched.
"""
from __future__ import annotations

import csv
import wave as wave_mod
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .tensor import Tensor


class WavFormatError(ValueError):
    """WAV file is valid RIFF but not mono PCM16."""


class WavParseError(ValueError):
    """File is not parseable as RIFF/WAVE."""


def derived_rng(base_seed, stream):
    """Named random stream: PCG64 seeded from (base_seed, crc32(stream)).

    All randomness in a run flows from one base seed split by stream label;
    the labels in use are "init-teacher", "init-student", "batching" and
    "data".
    """
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), zlib.crc32(stream.encode())]))


@dataclass
class MixtureSpec:
    sample_rate: int = 8000
    duration: float = 1.0
    snr_db: float = 0.0
    clean_kind: str = "multi-tone"
    noise_kind: str = "white"
    seed: int = 0

    def __post_init__(self):
        if self.clean_kind not in ("multi-tone", "filtered-tone-sweep"):
            raise ValueError(f"unknown clean_kind {self.clean_kind!r}")
        if self.noise_kind not in ("white", "pink"):
            raise ValueError(f"unknown noise_kind {self.noise_kind!r}")


def _tone_mixture(rng, n, sr):
    t = np.arange(n) / sr
    clean = np.zeros(n)
    for _ in range(int(rng.integers(2, 5))):
        freq = rng.uniform(100.0, 3500.0)
        amp = rng.uniform(0.3, 1.0)
        env_rate = rng.uniform(0.5, 3.0)
        env_phase = rng.uniform(0.0, 2.0 * np.pi)
        env = 0.55 + 0.45 * np.sin(2.0 * np.pi * env_rate * t + env_phase)
        clean += amp * env * np.sin(2.0 * np.pi * freq * t + rng.uniform(0.0, 2.0 * np.pi))
    return clean


def _tone_sweep(rng, n, sr):
    t = np.arange(n) / sr
    f0 = rng.uniform(200.0, 1000.0)
    f1 = rng.uniform(1500.0, 3500.0)
    phase = 2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t * t / t[-1])
    sweep = np.sin(phase + rng.uniform(0.0, 2.0 * np.pi))
    env = 0.55 + 0.45 * np.sin(2.0 * np.pi * rng.uniform(0.5, 3.0) * t)
    return sweep * env


def _noise(rng, n, kind):
    white = rng.standard_normal(n)
    if kind == "white":
        return white
    # first-order 1/f approximation: y[n] = 0.95*y[n-1] + 0.05*x[n]
    return lfilter([0.05], [1.0, -0.95], white)


def synth_pair(spec: MixtureSpec):
    """Generate a (clean, noisy) pair at exactly spec.snr_db."""
    n = int(round(spec.duration * spec.sample_rate))
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), zlib.crc32(b"clip")]))
    gen = _tone_mixture if spec.clean_kind == "multi-tone" else _tone_sweep
    clean = gen(rng, n, spec.sample_rate)
    noise = _noise(rng, n, spec.noise_kind)
    if np.isinf(spec.snr_db) and spec.snr_db > 0:
        noisy = clean.copy()
    else:
        p_clean = float(np.mean(clean**2))
        p_noise = float(np.mean(noise**2))
        gain = np.sqrt(p_clean / (p_noise * 10.0 ** (spec.snr_db / 10.0)))
        noisy = clean + gain * noise
    peak = max(np.abs(clean).max(), np.abs(noisy).max())
    if peak > 0:
        scale = 0.9 / peak
        clean = clean * scale
        noisy = noisy * scale
    return Tensor(clean), Tensor(noisy)


# --------------------------------------------------------------------- wav io


def save_wav(path, wave, sample_rate):
    """Write mono PCM16; samples are clamped to [-1, 1) then rounded
    half-away-from-zero."""
    data = wave.data if isinstance(wave, Tensor) else np.asarray(wave)
    x = np.clip(data, -1.0, 32767.0 / 32768.0) * 32768.0
    q = np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5)).astype("<i2")
    with wave_mod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(q.tobytes())


def load_wav(path):
    """Read mono PCM16 as float in [-1, 1) (int16 / 32768)."""
    try:
        with wave_mod.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1:
                raise WavFormatError(f"{path}: expected mono, got {fh.getnchannels()} channels")
            if fh.getsampwidth() != 2 or fh.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: expected uncompressed PCM16")
            sr = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except wave_mod.Error as e:
        raise WavParseError(f"{path}: not a RIFF/WAVE file ({e})") from e
    except EOFError as e:
        raise WavParseError(f"{path}: truncated WAV header") from e
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Tensor(samples), sr


# ------------------------------------------------------------------- datasets


@dataclass
class Dataset:
    train: list = field(default_factory=list)  # (clean, noisy) numpy pairs
    val: list = field(default_factory=list)
    manifest: list = field(default_factory=list)  # (index, seed, snr_db, split)
    sample_rate: int = 8000


def make_dataset(n, base_seed, template: MixtureSpec) -> Dataset:
    """n clips seeded base_seed..base_seed+n-1, split 90/10 by index
    (every index with i % 10 == 9 goes to validation)."""
    if n < 2:
        raise ValueError(f"dataset needs at least 2 clips, got {n}")
    ds = Dataset(sample_rate=template.sample_rate)
    for i in range(n):
        spec = replace(template, seed=base_seed + i)
        clean, noisy = synth_pair(spec)
        split = "val" if i % 10 == 9 else "train"
        pair = (clean.data, noisy.data)
        (ds.val if split == "val" else ds.train).append(pair)
        ds.manifest.append((i, spec.seed, spec.snr_db, split))
    return ds


def write_dataset(ds: Dataset, out_dir):
    """Write WAV pairs plus a manifest CSV with columns index,seed,snr_db,split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counters = {"train": iter(ds.train), "val": iter(ds.val)}
    for index, seed, snr_db, split in ds.manifest:
        clean, noisy = next(counters[split])
        save_wav(out_dir / f"clean_{index:05d}.wav", clean, ds.sample_rate)
        save_wav(out_dir / f"noisy_{index:05d}.wav", noisy, ds.sample_rate)
    with open(out_dir / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "seed", "snr_db", "split"])
        for index, seed, snr_db, split in ds.manifest:
            w.writerow([index, seed, snr_db, split])


def load_dataset(data_dir, sample_rate=None) -> Dataset:
    """Load a directory produced by write_dataset back into memory."""
    data_dir = Path(data_dir)
    manifest_path = data_dir / "manifest.csv"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.csv under {data_dir}")
    ds = Dataset()
    with open(manifest_path, newline="") as fh:
        for row in csv.DictReader(fh):
            index = int(row["index"])
            clean, sr_c = load_wav(data_dir / f"clean_{index:05d}.wav")
            noisy, sr_n = load_wav(data_dir / f"noisy_{index:05d}.wav")
            if sample_rate is not None and sr_c != sample_rate:
                raise WavFormatError(f"clip {index}: sample rate {sr_c} != configured {sample_rate}")
            ds.sample_rate = sr_c
            pair = (clean.data, noisy.data)
            split = row["split"]
            (ds.val if split == "val" else ds.train).append(pair)
            ds.manifest.append((index, int(row["seed"]), float(row["snr_db"]), split))
    return ds
