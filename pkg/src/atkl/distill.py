"""Feature and output distillation: activation-map compression across time and
channel dimensions, KL divergence between compressed-map distributions, mixed
soft/hard SI-SNR output loss, and the two-phase teacher/student training loops.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .models import ConfigError, Model
from .tensor import ShapeError, Tensor

MODES = ("output_only", "at", "kl_enc", "kl_dec", "kl_all", "at_kl")
KL_DIRECTIONS = ("student_to_teacher", "teacher_to_student")


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DegenerateReferenceError(ValueError):
    """SI-SNR reference signal is identically zero."""


@dataclass
class LayerPairing:
    teacher_tap: int
    student_tap: int
    channel_mismatch: bool


@dataclass
class CompressedMap:
    time_compressed: Tensor
    channel_compressed: Tensor | None = None


@dataclass
class DistillConfig:
    lambda_exp: float = 2.0
    alpha: float = 0.5
    beta: float = 1.0
    gamma: float = 1.0
    eta: float = 60.0
    kl_direction: str = "student_to_teacher"
    pairing: list[LayerPairing] | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if min(self.beta, self.gamma, self.eta) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.kl_direction not in KL_DIRECTIONS:
            raise ConfigError(f"kl_direction must be one of {KL_DIRECTIONS}")


@dataclass
class OptConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    batch_size: int = 4


# ----------------------------------------------------------- map compression


def time_at(x, lambda_exp=2.0):
    """Collapse the time axis of an (N,F,T) or (B,N,F,T) activation map.

    Sums elementwise |x|^lambda over time, then divides by the map's global
    l2 norm (per batch item), guarded at 1e-12 so all-zero maps stay zero.
    """
    if x.ndim not in (3, 4):
        raise ShapeError(f"time_at: expected (N,F,T) or (B,N,F,T), got {x.shape}")
    p = x.square() if lambda_exp == 2.0 else x.abs().pow_k(lambda_exp)
    m = p.sum(axis=x.ndim - 1)
    axes = (0, 1) if m.ndim == 2 else (1, 2)
    return m / m.l2_norm(axis=axes, keepdims=True).clamp_min(1e-12)


def channel_at(y, lambda_exp=2.0):
    """Collapse the channel axis of an (N,F) or (B,N,F) time-compressed map."""
    if y.ndim not in (2, 3):
        raise ShapeError(f"channel_at: expected (N,F) or (B,N,F), got {y.shape}")
    p = y.square() if lambda_exp == 2.0 else y.abs().pow_k(lambda_exp)
    m = p.sum(axis=y.ndim - 2)
    axes = (0,) if m.ndim == 1 else (1,)
    return m / m.l2_norm(axis=axes, keepdims=True).clamp_min(1e-12)


def compress_tap(tap, mismatch, lambda_exp=2.0) -> CompressedMap:
    """Time-compress a tap; also channel-compress it when the pair mismatches."""
    y = time_at(tap, lambda_exp)
    z = channel_at(y, lambda_exp) if mismatch else None
    return CompressedMap(y, z)


def _batch_mean(t, item_ndim):
    """Mean over the batch axis if present; identity for unbatched values."""
    return t.mean(axis=0) if t.ndim == item_ndim + 1 else t


def at_loss(teacher_maps, student_maps, pairing):
    """Sum of Euclidean distances between paired compressed maps.

    Matched-channel pairs compare time-compressed maps; mismatched pairs
    compare maps compressed in both dimensions. Teacher maps carry no gradient.
    """
    total = None
    for pair in pairing:
        tm = teacher_maps[pair.teacher_tap]
        sm = student_maps[pair.student_tap]
        if pair.channel_mismatch:
            t, s, item_ndim = tm.channel_compressed, sm.channel_compressed, 1
        else:
            t, s, item_ndim = tm.time_compressed, sm.time_compressed, 2
        if t.shape != s.shape:
            raise ShapeError(
                f"at_loss: pair ({pair.teacher_tap},{pair.student_tap}) maps "
                f"{t.shape} vs {s.shape}"
            )
        diff = t.detach() - s
        axes = tuple(range(diff.ndim - item_ndim, diff.ndim))
        dist = _batch_mean(diff.l2_norm(axis=axes), 0)
        total = dist if total is None else total + dist
    return total if total is not None else Tensor(0.0)


def _kl(p_map, q_map):
    """KL(p || q) with softmax over the frequency axis, averaged over channels
    and batch items; natural log with epsilon-guarded ratios."""
    p = p_map.softmax(axis=p_map.ndim - 1)
    q = q_map.softmax(axis=q_map.ndim - 1)
    kl = (p * (p.log() - q.log())).sum(axis=p.ndim - 1)
    if kl.ndim:
        kl = kl.mean()
    return kl


def atkl_loss(teacher_maps, student_maps, pairing, kl_direction="student_to_teacher"):
    """Sum of per-pair KL divergences between softmax-normalized compressed maps.

    Mismatched pairs use the doubly-compressed maps; matched pairs use the
    time-compressed maps per channel. The default direction treats the student
    map as p and the detached teacher map as q.
    """
    if kl_direction not in KL_DIRECTIONS:
        raise ConfigError(f"unknown kl_direction {kl_direction!r}")
    total = None
    for pair in pairing:
        tm = teacher_maps[pair.teacher_tap]
        sm = student_maps[pair.student_tap]
        if pair.channel_mismatch:
            t, s = tm.channel_compressed, sm.channel_compressed
        else:
            t, s = tm.time_compressed, sm.time_compressed
        if t.shape != s.shape:
            raise ShapeError(
                f"atkl_loss: pair ({pair.teacher_tap},{pair.student_tap}) maps "
                f"{t.shape} vs {s.shape}"
            )
        t = t.detach()
        kl = _kl(s, t) if kl_direction == "student_to_teacher" else _kl(t, s)
        total = kl if total is None else total + kl
    return total if total is not None else Tensor(0.0)


# ---------------------------------------------------------------- output loss


_LN10 = float(np.log(10.0))


def si_snr(est, ref):
    """Scale-invariant SNR in dB, clamped to [-60, 60].

    Both signals are zero-meaned; the estimate is projected onto the reference
    and residual energy is measured. Returns a scalar for (L,) inputs and a
    (B,) tensor for (B, L) inputs.
    """
    if est.shape != ref.shape:
        raise ShapeError(f"si_snr: shapes {est.shape} vs {ref.shape}")
    ref_d = ref.data if isinstance(ref, Tensor) else np.asarray(ref)
    if not np.abs(ref_d).max(axis=-1).all():
        raise DegenerateReferenceError("si_snr: reference signal is identically zero")
    ax = est.ndim - 1
    est = est - est.mean(axis=ax, keepdims=True)
    ref = ref - ref.mean(axis=ax, keepdims=True)
    dot = (est * ref).sum(axis=ax, keepdims=True)
    ref_pow = ref.square().sum(axis=ax, keepdims=True)
    s_target = ref * (dot / ref_pow.clamp_min(1e-12))
    e = est - s_target
    ratio = s_target.square().sum(axis=ax) / e.square().sum(axis=ax).clamp_min(1e-12)
    db = ratio.log() * (10.0 / _LN10)
    return db.clip(-60.0, 60.0)


def si_snr_mix_loss(student_out, clean, teacher_out, alpha):
    """alpha-weighted mix of hard (clean) and soft (teacher) negative SI-SNR."""
    hard = si_snr(student_out, clean if isinstance(clean, Tensor) else Tensor(clean))
    t = teacher_out if isinstance(teacher_out, Tensor) else Tensor(teacher_out)
    soft = si_snr(student_out, t.detach())
    loss = -(hard * alpha) - (soft * (1.0 - alpha))
    return loss.mean() if loss.ndim else loss


def kd_loss(mix, at, atkl, beta=1.0, gamma=1.0, eta=60.0):
    """Weighted sum of output, attention-transfer, and KL loss components."""
    return mix * beta + at * gamma + atkl * eta


# ------------------------------------------------------------------ optimizer


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params.values()) if isinstance(params, dict) else list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self._m, self._v, strict=True):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)


# ------------------------------------------------------------------- pairing


def build_pairing(teacher: Model, student: Model):
    """Positional pairing over all encoder then decoder taps.

    The mismatch flag is set exactly where nominal channel extents differ.
    Frequency extents must agree, which requires matching win/fft sizes.
    """
    if (teacher.cfg.stft.win_len != student.cfg.stft.win_len
            or teacher.cfg.stft.fft_size != student.cfg.stft.fft_size):
        raise ConfigError("teacher and student must share win_len and fft_size")
    t_enc, t_dec = teacher.tap_channels()
    s_enc, s_dec = student.tap_channels()
    if len(t_enc) != len(s_enc):
        raise ConfigError(f"layer counts differ: teacher {len(t_enc)} vs student {len(s_enc)}")
    pairs = []
    for k, (tc, sc) in enumerate(zip(t_enc + t_dec, s_enc + s_dec, strict=True)):
        pairs.append(LayerPairing(k, k, tc != sc))
    return pairs


# ------------------------------------------------------------- training loops

METRICS_HEADER = ["step", "loss_kd", "loss_mix", "loss_at", "loss_atkl", "val_sisnr_db", "lr"]


class MetricsLog:
    """Accumulates per-step rows and optionally writes them as CSV."""

    def __init__(self, path=None):
        self.rows = []
        self.path = path

    def add(self, step, loss_kd, loss_mix, loss_at, loss_atkl, val_sisnr, lr):
        self.rows.append([step, loss_kd, loss_mix, loss_at, loss_atkl,
                          "" if val_sisnr is None else val_sisnr, lr])

    def write(self):
        if self.path is None:
            return
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRICS_HEADER)
            for row in self.rows:
                w.writerow(row)


@dataclass
class RunResult:
    state: dict
    final_val_sisnr: float
    metrics: MetricsLog
    param_update_seen: dict | None = None


def _stack_batch(clips, idx, dtype):
    clean = np.stack([clips[i][0] for i in idx]).astype(dtype)
    noisy = np.stack([clips[i][1] for i in idx]).astype(dtype)
    return Tensor(noisy), Tensor(clean)


def validate_model(model: Model, val_clips, batch=8):
    """Median SI-SNR (dB) of enhanced vs clean over the validation clips."""
    scores = []
    with T.no_grad():
        for lo in range(0, len(val_clips), batch):
            idx = range(lo, min(lo + batch, len(val_clips)))
            noisy, clean = _stack_batch(val_clips, idx, model.dtype)
            out = forward_waves(model, noisy)
            scores.extend(np.atleast_1d(si_snr(out, clean).data))
    return float(np.median(scores)), float(np.mean(scores))


def forward_waves(model: Model, noisy):
    return model.forward_tapped(noisy).enhanced_wave


class _LrHalver:
    """Halve the learning rate when validation loss rises on two consecutive
    validation passes."""

    def __init__(self, opt):
        self.opt = opt
        self.prev = None
        self.prev_increased = False

    def update(self, val_loss):
        increased = self.prev is not None and val_loss > self.prev
        if increased and self.prev_increased:
            self.opt.lr *= 0.5
        self.prev_increased = increased
        self.prev = val_loss


def _check_finite(value, step):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value} at step {step}", step=step)


def train_teacher(model: Model, dataset, opt_cfg: OptConfig, seed=0, metrics_path=None):
    """Pre-train a model on hard labels only (negative SI-SNR loss)."""
    from .data import derived_rng

    if not dataset.train:
        raise ConfigError("dataset has no training clips")
    rng = derived_rng(seed, "batching")
    opt = Adam(model.parameters(), opt_cfg.lr, opt_cfg.beta1, opt_cfg.beta2, opt_cfg.eps)
    halver = _LrHalver(opt)
    log = MetricsLog(metrics_path)
    model.set_requires_grad(True)
    step = 0
    val_median = float("nan")
    while step < opt_cfg.steps:
        order = rng.permutation(len(dataset.train))
        for lo in range(0, len(order), opt_cfg.batch_size):
            if step >= opt_cfg.steps:
                break
            idx = order[lo : lo + opt_cfg.batch_size]
            noisy, clean = _stack_batch(dataset.train, idx, model.dtype)
            out = forward_waves(model, noisy)
            loss = -si_snr(out, clean).mean()
            lv = loss.item()
            _check_finite(lv, step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            is_val = step % _val_interval(dataset, opt_cfg) == 0 or step == opt_cfg.steps
            if is_val and dataset.val:
                val_median, val_mean = validate_model(model, dataset.val)
                halver.update(-val_mean)
            log.add(step, lv, lv, 0.0, 0.0, val_median if is_val and dataset.val else None, opt.lr)
    log.write()
    return RunResult(model.state(), val_median, log)


def _val_interval(dataset, opt_cfg):
    return max(1, (len(dataset.train) + opt_cfg.batch_size - 1) // opt_cfg.batch_size)


def precompute_teacher_targets(teacher: Model, clips, pairing, lambda_exp, batch=8):
    """Run the frozen teacher over every clip once, caching its enhanced output
    and detached compressed maps. Valid because teacher forward is
    deterministic and its parameters never change during distillation."""
    outs, maps = [], []
    num_enc = len(teacher.encoder)
    with T.no_grad():
        for lo in range(0, len(clips), batch):
            idx = range(lo, min(lo + batch, len(clips)))
            noisy = Tensor(np.stack([clips[i][1] for i in idx]).astype(teacher.dtype))
            tf = teacher.forward_tapped(noisy)
            taps = tf.enc_taps + tf.dec_taps
            per_tap = [
                compress_tap(taps[p.teacher_tap], p.channel_mismatch, lambda_exp)
                for p in pairing
            ]
            for j, _ in enumerate(idx):
                outs.append(tf.enhanced_wave.data[j].copy())
                maps.append([
                    CompressedMap(
                        Tensor(cm.time_compressed.data[j].copy()),
                        None if cm.channel_compressed is None
                        else Tensor(cm.channel_compressed.data[j].copy()),
                    )
                    for cm in per_tap
                ])
    return outs, maps


def _gather_teacher_batch(cached_maps, idx):
    """Stack cached per-clip teacher maps into batched tensors."""
    out = []
    for tap in range(len(cached_maps[idx[0]])):
        ys = np.stack([cached_maps[i][tap].time_compressed.data for i in idx])
        zmaps = [cached_maps[i][tap].channel_compressed for i in idx]
        z = None if zmaps[0] is None else Tensor(np.stack([zz.data for zz in zmaps]))
        out.append(CompressedMap(Tensor(ys), z))
    return out


def run_distillation(teacher: Model, student: Model, dataset, distill_cfg: DistillConfig,
                     opt_cfg: OptConfig, mode="at_kl", seed=0, metrics_path=None):
    """Distil a frozen teacher into a student for a fixed step budget.

    The teacher's parameters receive no gradients and are never updated; its
    per-clip outputs and compressed maps are precomputed once. Returns the
    final student state plus the metrics log.
    """
    from .data import derived_rng

    if mode not in MODES:
        raise ConfigError(f"unknown distillation mode {mode!r}; expected one of {MODES}")
    if not dataset.train:
        raise ConfigError("dataset has no training clips")
    pairing = distill_cfg.pairing or build_pairing(teacher, student)
    num_enc = len(teacher.encoder)
    at_pairs = pairing if mode in ("at", "at_kl") else []
    if mode in ("kl_all", "at_kl"):
        kl_pairs = pairing
    elif mode == "kl_enc":
        kl_pairs = pairing[:num_enc]
    elif mode == "kl_dec":
        kl_pairs = pairing[num_enc:]
    else:
        kl_pairs = []

    teacher.set_requires_grad(False)
    student.set_requires_grad(True)
    need_maps = bool(at_pairs or kl_pairs)
    t_outs, t_maps = precompute_teacher_targets(
        teacher, dataset.train, pairing if need_maps else [], distill_cfg.lambda_exp
    )

    rng = derived_rng(seed, "batching")
    opt = Adam(student.parameters(), opt_cfg.lr, opt_cfg.beta1, opt_cfg.beta2, opt_cfg.eps)
    halver = _LrHalver(opt)
    log = MetricsLog(metrics_path)
    update_seen = {name: False for name in student.parameters()}
    step = 0
    val_median = float("nan")
    while step < opt_cfg.steps:
        order = rng.permutation(len(dataset.train))
        for lo in range(0, len(order), opt_cfg.batch_size):
            if step >= opt_cfg.steps:
                break
            idx = order[lo : lo + opt_cfg.batch_size]
            noisy, clean = _stack_batch(dataset.train, idx, student.dtype)
            teacher_out = Tensor(np.stack([t_outs[i] for i in idx]))
            sf = student.forward_tapped(noisy)
            mix = si_snr_mix_loss(sf.enhanced_wave, clean, teacher_out, distill_cfg.alpha)
            at = atkl = Tensor(0.0)
            if need_maps:
                t_batch = _gather_teacher_batch(t_maps, idx)
                s_taps = sf.enc_taps + sf.dec_taps
                s_batch = [
                    compress_tap(s_taps[p.student_tap], p.channel_mismatch, distill_cfg.lambda_exp)
                    for p in pairing
                ]
                if at_pairs:
                    at = at_loss(t_batch, s_batch, at_pairs)
                if kl_pairs:
                    atkl = atkl_loss(t_batch, s_batch, kl_pairs, distill_cfg.kl_direction)
            loss = kd_loss(mix, at, atkl, distill_cfg.beta, distill_cfg.gamma, distill_cfg.eta)
            lv = loss.item()
            _check_finite(lv, step)
            opt.zero_grad()
            loss.backward()
            for name, p in student.parameters().items():
                if not update_seen[name] and p.grad is not None and np.any(p.grad):
                    update_seen[name] = True
            opt.step()
            step += 1
            is_val = step % _val_interval(dataset, opt_cfg) == 0 or step == opt_cfg.steps
            if is_val and dataset.val:
                val_median, val_mean = validate_model(student, dataset.val)
                halver.update(-val_mean)
            log.add(step, lv, mix.item(), at.item(), atkl.item(),
                    val_median if is_val and dataset.val else None, opt.lr)
    log.write()
    return RunResult(student.state(), val_median, log, update_seen)
