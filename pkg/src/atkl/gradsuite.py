"""Finite-difference gradient sweeps over every differentiable op, plus the
fully composed distillation loss on a miniature two-layer model pair.

Used by the `gradcheck` CLI command and the acceptance tests. Everything runs
at float64 with central differences (eps 1e-5); linear ops must agree to 1e-6
relative, everything else to 1e-3.
"""
from __future__ import annotations

import numpy as np

from . import distill as D
from . import tensor as T
from .models import ModelConfig, build_model
from .signal import StftConfig, istft, stft
from .tensor import Tensor, grad_check

LINEAR_TOL = 1e-6
DEFAULT_TOL = 1e-3
N_INPUTS = 5


def _rand(rng, *shape):
    return Tensor(rng.uniform(-1.0, 1.0, size=shape), requires_grad=True)


def _pos(rng, *shape):
    return Tensor(rng.uniform(0.3, 1.5, size=shape), requires_grad=True)


def op_cases(rng):
    """(name, fn, inputs-factory, tolerance) for each differentiable op."""
    return [
        ("add", lambda a, b: (a + b).sum(), lambda: (_rand(rng, 3, 4), _rand(rng, 3, 4)), LINEAR_TOL),
        ("add_broadcast", lambda a, b: (a + b).sum(), lambda: (_rand(rng, 3, 4), _rand(rng, 4)), LINEAR_TOL),
        ("sub", lambda a, b: (a - b).sum(), lambda: (_rand(rng, 3, 4), _rand(rng, 3, 4)), LINEAR_TOL),
        ("mul", lambda a, b: (a * b).sum(), lambda: (_rand(rng, 3, 4), _rand(rng, 3, 4)), DEFAULT_TOL),
        ("div", lambda a, b: (a / b).sum(), lambda: (_rand(rng, 3, 4), _pos(rng, 3, 4)), DEFAULT_TOL),
        ("neg", lambda a: (-a).sum(), lambda: (_rand(rng, 5),), LINEAR_TOL),
        ("abs", lambda a: a.abs().sum(), lambda: (_pos(rng, 3, 4),), DEFAULT_TOL),
        ("square", lambda a: a.square().sum(), lambda: (_rand(rng, 3, 4),), DEFAULT_TOL),
        ("pow_3", lambda a: a.pow_k(3).sum(), lambda: (_pos(rng, 3, 3),), DEFAULT_TOL),
        ("sqrt", lambda a: a.sqrt().sum(), lambda: (_pos(rng, 3, 3),), DEFAULT_TOL),
        ("log", lambda a: a.log().sum(), lambda: (_pos(rng, 3, 3),), DEFAULT_TOL),
        ("exp", lambda a: a.exp().sum(), lambda: (_rand(rng, 3, 3),), DEFAULT_TOL),
        ("sigmoid", lambda a: a.sigmoid().sum(), lambda: (_rand(rng, 3, 3),), DEFAULT_TOL),
        ("tanh", lambda a: a.tanh().sum(), lambda: (_rand(rng, 3, 3),), DEFAULT_TOL),
        ("prelu", lambda a, s: T.prelu(a, s).sum(),
         lambda: (_shifted(rng), _pos(rng, 2, 1, 1)), DEFAULT_TOL),
        ("clamp_min", lambda a: a.clamp_min(0.5).square().sum(), lambda: (_pos(rng, 4, 2),), DEFAULT_TOL),
        ("clip", lambda a: a.clip(-0.8, 0.8).square().sum(), lambda: (_rand(rng, 4, 3),), DEFAULT_TOL),
        ("sum_axis", lambda a: a.sum(axis=1).square().sum(), lambda: (_rand(rng, 3, 4),), DEFAULT_TOL),
        ("mean", lambda a: a.mean(axis=0).square().sum(), lambda: (_rand(rng, 3, 4),), DEFAULT_TOL),
        ("l2_norm", lambda a: a.l2_norm(), lambda: (_pos(rng, 3, 4),), DEFAULT_TOL),
        ("softmax", lambda a: (a.softmax(axis=1) * Tensor(rng.uniform(0, 1, (3, 4)))).sum(),
         lambda: (_rand(rng, 3, 4),), DEFAULT_TOL),
        ("matmul", lambda a, b: T.matmul(a, b).square().sum(),
         lambda: (_rand(rng, 3, 4), _rand(rng, 4, 2)), DEFAULT_TOL),
        ("conv2d", lambda x, w: T.conv2d(x, w, (2, 1), (1, 0)).square().sum(),
         lambda: (_rand(rng, 2, 5, 4), _rand(rng, 3, 2, 3, 2)), DEFAULT_TOL),
        ("conv_transpose2d",
         lambda x, w: T.conv_transpose2d(x, w, (2, 1), (1, 0), (1, 0)).square().sum(),
         lambda: (_rand(rng, 3, 3, 4), _rand(rng, 3, 2, 3, 2)), DEFAULT_TOL),
        ("concat", lambda a, b: T.concat([a, b], axis=1).square().sum(),
         lambda: (_rand(rng, 2, 3), _rand(rng, 2, 2)), DEFAULT_TOL),
        ("narrow", lambda a: a.narrow(1, 1, 2).square().sum(), lambda: (_rand(rng, 3, 4),), DEFAULT_TOL),
        ("reshape", lambda a: a.reshape(6, 2).square().sum(), lambda: (_rand(rng, 3, 4),), DEFAULT_TOL),
        ("transpose", lambda a: a.transpose(1, 0).square().sum(), lambda: (_rand(rng, 3, 4),), DEFAULT_TOL),
        ("stft_power", _stft_power, lambda: (_rand(rng, 96),), DEFAULT_TOL),
        ("istft", _istft_sum, lambda: (_rand(rng, 17, 4), _rand(rng, 17, 4)), DEFAULT_TOL),
        ("lstm_seq", _lstm_case(rng), lambda: (_rand(rng, 2, 3, 2),), DEFAULT_TOL),
        ("time_at", lambda a: (D.time_at(a) * Tensor(rng.uniform(0, 1, (2, 3)))).sum(),
         lambda: (_shifted3(rng),), DEFAULT_TOL),
        ("channel_at", lambda a: (D.channel_at(a) * Tensor(rng.uniform(0, 1, 3))).sum(),
         lambda: (_shifted(rng),), DEFAULT_TOL),
        ("si_snr", lambda a: D.si_snr(a, Tensor(rng.uniform(-1, 1, 24))),
         lambda: (_rand(rng, 24),), DEFAULT_TOL),
        ("softmax_log_sum", lambda a: (a.softmax(axis=0).log() * Tensor(rng.uniform(0, 1, 5))).sum(),
         lambda: (_rand(rng, 5),), DEFAULT_TOL),
    ]


def _shifted(rng):
    # keep values away from zero so kinked ops stay finite-difference friendly
    x = rng.uniform(0.2, 1.0, size=(2, 3, 3)) * rng.choice([-1.0, 1.0], size=(2, 3, 3))
    return Tensor(x, requires_grad=True)


def _shifted3(rng):
    x = rng.uniform(0.2, 1.0, size=(2, 3, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4))
    return Tensor(x, requires_grad=True)


_GC_STFT = StftConfig(8000, 32, 16, 32)


def _stft_power(x):
    spec = stft(x, _GC_STFT)
    return (spec.real.square() + spec.imag.square()).sum()


def _istft_sum(re, im):
    from .signal import Spectrogram

    y = istft(Spectrogram(re, im, _GC_STFT), _GC_STFT, 80)
    return y.square().sum()


def _lstm_case(rng):
    from .nn import lstm_seq

    w_x = Tensor(rng.uniform(-0.5, 0.5, (8, 2)), requires_grad=True)
    w_h = Tensor(rng.uniform(-0.5, 0.5, (8, 2)), requires_grad=True)
    b = Tensor(rng.uniform(-0.5, 0.5, 8), requires_grad=True)

    def f(x):
        return lstm_seq(x, w_x, w_h, b).square().sum()

    return f


def tiny_model_pair(seed=7):
    """Miniature teacher/student pair for composed-loss gradient checks."""
    stft_t = StftConfig(8000, 32, 16, 32)
    stft_s = StftConfig(8000, 32, 10, 32)
    teacher = build_model(ModelConfig(stft_t, [4, 8], lstm_hidden=4, lstm_layers=1), seed, np.float64)
    student = build_model(ModelConfig(stft_s, [4, 4], lstm_hidden=4, lstm_layers=1), seed + 1, np.float64)
    return teacher, student


def composed_kd_case(seed=7):
    """Returns (f, params) where f maps the student's parameters to kd_loss."""
    teacher, student = tiny_model_pair(seed)
    rng = np.random.default_rng(seed)
    clean = rng.uniform(-0.5, 0.5, 64)
    noisy = clean + 0.3 * rng.uniform(-0.5, 0.5, 64)
    noisy_t = Tensor(noisy)
    clean_t = Tensor(clean)
    pairing = D.build_pairing(teacher, student)
    teacher.set_requires_grad(False)
    with T.no_grad():
        tf = teacher.forward_tapped(noisy_t)
        t_taps = tf.enc_taps + tf.dec_taps
        t_maps = [D.compress_tap(t_taps[p.teacher_tap], p.channel_mismatch) for p in pairing]
        t_out = Tensor(tf.enhanced_wave.data.copy())
    params = student.parameters()
    names = list(params)

    def f(*tensors):
        sf = student.forward_tapped(noisy_t)
        s_taps = sf.enc_taps + sf.dec_taps
        s_maps = [D.compress_tap(s_taps[p.student_tap], p.channel_mismatch) for p in pairing]
        mix = D.si_snr_mix_loss(sf.enhanced_wave, clean_t, t_out, 0.5)
        at = D.at_loss(t_maps, s_maps, pairing)
        atkl = D.atkl_loss(t_maps, s_maps, pairing)
        return D.kd_loss(mix, at, atkl, 1.0, 1.0, 60.0)

    return f, [params[n] for n in names], names


def run_gradient_suite(verbose=False, seed=123):
    """Run every op case N_INPUTS times plus the composed loss; returns failures."""
    failures = []
    for trial in range(N_INPUTS):
        rng = np.random.default_rng(seed + trial)
        for name, fn, make_inputs, tol in op_cases(rng):
            report = grad_check(fn, make_inputs(), eps=1e-5)
            status = report.ok(tol)
            if verbose and trial == 0:
                print(f"{'PASS' if status else 'FAIL'} {name:<18} max_rel_err={report.max_rel_err:.3e} (tol {tol:g})")
            if not status:
                failures.append((name, trial, report.max_rel_err))
    f, params, names = composed_kd_case()
    report = grad_check(f, params, eps=1e-5)
    if verbose:
        print(f"{'PASS' if report.ok(DEFAULT_TOL) else 'FAIL'} composed_kd_loss   "
              f"max_rel_err={report.max_rel_err:.3e} (tol {DEFAULT_TOL:g})")
    if not report.ok(DEFAULT_TOL):
        worst = int(np.argmax(report.per_input))
        failures.append((f"composed_kd_loss[{names[worst]}]", 0, report.max_rel_err))
    return failures
