"""Command-line pipeline: data generation, teacher pretraining, distillation in
all ablation modes, direct baseline training, evaluation, parameter counting
and gradient checking.

Configuration is YAML with nested sections (see DEFAULT_CONFIG); any file
passed via --config is deep-merged over the defaults. Exit codes: 0 success,
2 usage/config error, 3 numeric/training failure. The environment variable
ATKL_WORKDIR overrides the default working directory.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import distill as D
from . import models as M
from . import tensor as T
from .data import (Dataset, MixtureSpec, WavFormatError, WavParseError, derived_rng,
                   load_dataset, make_dataset, write_dataset)
from .models import ConfigError, ModelConfig, build_model, count_params, load_checkpoint, save_checkpoint
from .signal import InputTooShortError, StftConfig
from .tensor import NumericError, ShapeError, Tensor, UsageError

DEFAULT_CONFIG = {
    "workdir": "runs",
    "sample_rate": 8000,
    "stft": {"win_len": 256, "fft_size": 256},
    "teacher": {"hop_len": 128, "channels": [8, 16, 32, 64], "lstm_hidden": 32, "lstm_layers": 2},
    "student": {"hop_len": 80, "channels": [8, 16, 16, 32], "lstm_hidden": 16, "lstm_layers": 2},
    "fullscale": {
        "sample_rate": 16000,
        "stft": {"win_len": 400, "fft_size": 512},
        "teacher": {"hop_len": 160, "channels": [16, 32, 64, 128, 256, 256], "lstm_hidden": 256, "lstm_layers": 2},
        "student": {"hop_len": 100, "channels": [16, 32, 64, 64, 128, 256], "lstm_hidden": 64, "lstm_layers": 2},
        "dccrn": {"hop_len": 100, "channels": [16, 32, 64, 128, 256, 256], "lstm_hidden": 256, "lstm_layers": 2},
    },
    "distill": {"lambda_exp": 2.0, "alpha": 0.5, "beta": 1.0, "gamma": 1.0, "eta": 60.0,
                "kl_direction": "student_to_teacher"},
    "optimizer": {"lr": 0.001, "steps": 2000, "batch_size": 4},
    "data": {"n_clips": 220, "base_seed": 1000, "duration": 1.0, "snr_db": 0.0,
             "clean_kind": "multi-tone", "noise_kind": "white"},
    "seeds": [101, 102, 103],
}


def _deep_merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    raw: dict

    @property
    def workdir(self):
        env = os.environ.get("ATKL_WORKDIR")
        return Path(self.raw["workdir"] if "workdir" in self.raw_file_keys else (env or self.raw["workdir"]))

    raw_file_keys: set = field(default_factory=set)

    def model_config(self, which, scale="desk") -> ModelConfig:
        if scale == "fullscale":
            section = self.raw["fullscale"]
            sr = section["sample_rate"]
            stft_raw = section["stft"]
        else:
            section = self.raw
            sr = self.raw["sample_rate"]
            stft_raw = self.raw["stft"]
        if which not in section:
            raise ConfigError(f"no model named {which!r} in the {scale} config section")
        m = section[which]
        stft = StftConfig(sr, stft_raw["win_len"], m["hop_len"], stft_raw.get("fft_size", 0))
        return ModelConfig(stft, list(m["channels"]), m["lstm_hidden"], m.get("lstm_layers", 2))

    def distill_config(self) -> D.DistillConfig:
        d = self.raw["distill"]
        return D.DistillConfig(d["lambda_exp"], d["alpha"], d["beta"], d["gamma"], d["eta"],
                               d["kl_direction"])

    def opt_config(self) -> D.OptConfig:
        o = self.raw["optimizer"]
        return D.OptConfig(lr=o["lr"], steps=o["steps"], batch_size=o["batch_size"])

    def mixture_template(self) -> MixtureSpec:
        d = self.raw["data"]
        return MixtureSpec(self.raw["sample_rate"], d["duration"], float(d["snr_db"]),
                           d["clean_kind"], d["noise_kind"])

    @property
    def seeds(self):
        return list(self.raw["seeds"])


def load_config(path=None) -> ExperimentConfig:
    raw = DEFAULT_CONFIG
    file_keys = set()
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        with open(p) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config root must be a mapping: {p}")
        raw = _deep_merge(raw, loaded)
        file_keys = set(loaded)
    return ExperimentConfig(raw=raw, raw_file_keys=file_keys)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=False)


def _workdir(cfg, args):
    if getattr(args, "workdir", None):
        return Path(args.workdir)
    return cfg.workdir


def _resolve_data_dir(cfg, args):
    d = getattr(args, "data", None)
    return Path(d) if d else _workdir(cfg, args) / "data"


def _ckpt_dir(cfg, args):
    d = _workdir(cfg, args) / "checkpoints"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _metrics_dir(cfg, args):
    d = _workdir(cfg, args) / "metrics"
    d.mkdir(parents=True, exist_ok=True)
    return d


# ------------------------------------------------------------------- commands


def cmd_gen_data(cfg, args):
    out = Path(args.out) if args.out else _workdir(cfg, args) / "data"
    d = cfg.raw["data"]
    ds = make_dataset(d["n_clips"], d["base_seed"], cfg.mixture_template())
    write_dataset(ds, out)
    print(f"wrote {len(ds.train) + len(ds.val)} clip pairs to {out} "
          f"({len(ds.train)} train / {len(ds.val)} val)")
    return 0


def _load_training_data(cfg, args) -> Dataset:
    data_dir = _resolve_data_dir(cfg, args)
    if not data_dir.exists():
        raise ConfigError(f"data directory {data_dir} does not exist; run gen-data first")
    return load_dataset(data_dir, cfg.raw["sample_rate"])


def cmd_train_teacher(cfg, args):
    ds = _load_training_data(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    model = build_model(cfg.model_config("teacher"), derived_seed(seed, "init-teacher"))
    metrics = _metrics_dir(cfg, args) / f"teacher_s{seed}.csv"
    result = D.train_teacher(model, ds, cfg.opt_config(), seed=seed, metrics_path=metrics)
    out = Path(args.out) if args.out else _ckpt_dir(cfg, args) / f"teacher_s{seed}.ckpt"
    save_checkpoint(out, result.state)
    print(f"teacher checkpoint: {out}")
    print(f"final val median SI-SNR: {result.final_val_sisnr:.3f} dB")
    return 0


def cmd_train_baseline(cfg, args):
    ds = _load_training_data(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    model = build_model(cfg.model_config("student"), derived_seed(seed, "init-student"))
    metrics = _metrics_dir(cfg, args) / f"baseline_s{seed}.csv"
    result = D.train_teacher(model, ds, cfg.opt_config(), seed=seed, metrics_path=metrics)
    out = Path(args.out) if args.out else _ckpt_dir(cfg, args) / f"baseline_s{seed}.ckpt"
    save_checkpoint(out, result.state)
    print(f"baseline checkpoint: {out}")
    print(f"final val median SI-SNR: {result.final_val_sisnr:.3f} dB")
    return 0


def cmd_distill(cfg, args):
    ds = _load_training_data(cfg, args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    teacher_path = Path(args.teacher_ckpt) if args.teacher_ckpt else \
        _ckpt_dir(cfg, args) / f"teacher_s{cfg.seeds[0]}.ckpt"
    if not teacher_path.exists():
        raise ConfigError(f"teacher checkpoint {teacher_path} not found; run train-teacher first")
    teacher = build_model(cfg.model_config("teacher"), 0)
    teacher.load_state(load_checkpoint(teacher_path))
    student = build_model(cfg.model_config("student"), derived_seed(seed, "init-student"))
    metrics = _metrics_dir(cfg, args) / f"distill_{args.mode}_s{seed}.csv"
    result = D.run_distillation(teacher, student, ds, cfg.distill_config(), cfg.opt_config(),
                                mode=args.mode, seed=seed, metrics_path=metrics)
    out = Path(args.out) if args.out else _ckpt_dir(cfg, args) / f"student_{args.mode}_s{seed}.ckpt"
    save_checkpoint(out, result.state)
    print(f"student checkpoint: {out}")
    print(f"final val median SI-SNR: {result.final_val_sisnr:.3f} dB")
    return 0


def cmd_eval(cfg, args):
    ckpt_path = Path(args.ckpt)
    if not ckpt_path.exists():
        raise ConfigError(f"checkpoint {ckpt_path} not found")
    data_dir = Path(args.data)
    if not data_dir.exists():
        raise ConfigError(f"data directory {data_dir} not found")
    model = build_model(cfg.model_config(args.which), 0)
    model.load_state(load_checkpoint(ckpt_path))
    ds = load_dataset(data_dir, cfg.raw["sample_rate"])
    clips = {"val": ds.val, "train": ds.train, "all": ds.train + ds.val}[args.split]
    writer = csv.writer(sys.stdout)
    writer.writerow(["clip", "sisnr_noisy_db", "sisnr_enhanced_db", "delta_db"])
    noisy_scores, enh_scores = [], []
    with T.no_grad():
        for i, (clean, noisy) in enumerate(clips):
            noisy_t = Tensor(noisy.astype(model.dtype))
            clean_t = Tensor(clean.astype(model.dtype))
            out = model.forward_tapped(noisy_t).enhanced_wave
            s_noisy = float(D.si_snr(noisy_t, clean_t).data)
            s_enh = float(D.si_snr(out, clean_t).data)
            noisy_scores.append(s_noisy)
            enh_scores.append(s_enh)
            writer.writerow([i, f"{s_noisy:.4f}", f"{s_enh:.4f}", f"{s_enh - s_noisy:.4f}"])
    mn, me = float(np.median(noisy_scores)), float(np.median(enh_scores))
    writer.writerow(["median", f"{mn:.4f}", f"{me:.4f}", f"{me - mn:.4f}"])
    return 0


def cmd_count_params(cfg, args):
    scale = "desk" if args.desk else "fullscale"
    n = count_params(cfg.model_config(args.which, scale=scale))
    print(n)
    return 0


def cmd_gradcheck(cfg, args):
    from .gradsuite import run_gradient_suite

    failures = run_gradient_suite(verbose=True)
    return 0 if not failures else 3


def derived_seed(base_seed, stream):
    """Collapse a named stream into a single integer seed."""
    return int(derived_rng(base_seed, stream).integers(0, 2**31 - 1))


# ----------------------------------------------------------------------- main


def build_parser():
    p = argparse.ArgumentParser(prog="atkl", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="YAML config file merged over the built-in defaults")
    p.add_argument("--workdir", help="working directory (overrides config and ATKL_WORKDIR)")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("gen-data", help="synthesize the clean/noisy WAV dataset")
    q.add_argument("--out", help="output directory (default <workdir>/data)")
    q.set_defaults(fn=cmd_gen_data)

    q = sub.add_parser("train-teacher", help="pretrain the teacher on hard labels")
    q.add_argument("--data", help="dataset directory")
    q.add_argument("--seed", type=int)
    q.add_argument("--out", help="checkpoint path")
    q.set_defaults(fn=cmd_train_teacher)

    q = sub.add_parser("train-baseline", help="train the student directly, no distillation")
    q.add_argument("--data", help="dataset directory")
    q.add_argument("--seed", type=int)
    q.add_argument("--out", help="checkpoint path")
    q.set_defaults(fn=cmd_train_baseline)

    q = sub.add_parser("distill", help="distil a frozen teacher into a fresh student")
    q.add_argument("--mode", choices=D.MODES, default="at_kl")
    q.add_argument("--data", help="dataset directory")
    q.add_argument("--teacher-ckpt", help="teacher checkpoint path")
    q.add_argument("--seed", type=int)
    q.add_argument("--out", help="checkpoint path")
    q.set_defaults(fn=cmd_distill)

    q = sub.add_parser("eval", help="print per-clip and median SI-SNR as CSV")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--which", choices=["student", "teacher"], default="student")
    q.add_argument("--split", choices=["val", "train", "all"], default="val")
    q.set_defaults(fn=cmd_eval)

    q = sub.add_parser("count-params", help="exact parameter count for a model config")
    q.add_argument("--which", choices=["student", "teacher", "dccrn"], required=True)
    q.add_argument("--desk", action="store_true", help="count the desk-scale config instead")
    q.set_defaults(fn=cmd_count_params)

    q = sub.add_parser("gradcheck", help="finite-difference checks over the op suite")
    q.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.fn(cfg, args)
    except (ConfigError, UsageError, ShapeError, InputTooShortError, WavFormatError,
            WavParseError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (NumericError, D.TrainingError) as e:
        step = getattr(e, "step", None)
        suffix = f" (step {step})" if step is not None else ""
        print(f"numeric failure: {e}{suffix}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
