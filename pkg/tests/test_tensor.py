"""Tensor engine: op semantics, broadcasting, autodiff, gradient checks."""
import numpy as np
import pytest

from atkl import tensor as T
from atkl.tensor import NumericError, ShapeError, Tensor, UsageError, grad_check


def t(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestElementwise:
    def test_add_identity(self):
        x = t([1.0, -2.0, 3.5])
        out = x + T.zeros_like(x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_abs_definition(self):
        np.testing.assert_array_equal(t([-3.0, 0.0, 2.0]).abs().data, [3.0, 0.0, 2.0])

    def test_pow2_forward_and_grad(self):
        x = t([1.0, 2.0, 3.0], rg=True)
        y = x.pow_k(2)
        np.testing.assert_allclose(y.data, [1.0, 4.0, 9.0])
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])
        report = grad_check(lambda a: a.pow_k(2).sum(), [t([1.0, 2.0, 3.0])])
        assert report.ok(1e-6)

    def test_broadcast_trailing(self):
        a = t(np.ones((2, 3)))
        b = t([1.0, 2.0, 3.0])
        np.testing.assert_array_equal((a * b).data, [[1, 2, 3], [1, 2, 3]])

    def test_broadcast_rejects_mismatch(self):
        with pytest.raises(ShapeError):
            t(np.ones((2, 3))) + t(np.ones((2, 2)))

    def test_div_nan_raises(self):
        with pytest.raises(NumericError, match="div"):
            t([0.0]) / t([0.0])

    def test_pow_nan_raises(self):
        with pytest.raises(NumericError, match="pow"):
            t([-1.0]).pow_k(0.5)

    def test_log_epsilon_guard(self):
        out = t([0.0]).log()
        np.testing.assert_allclose(out.data, np.log(1e-12))

    def test_sigmoid_extremes_stable(self):
        out = t([-1000.0, 0.0, 1000.0]).sigmoid()
        np.testing.assert_allclose(out.data, [0.0, 0.5, 1.0], atol=1e-12)

    def test_prelu(self):
        x = t([[-2.0, 3.0]])
        slope = t([[0.5]])
        np.testing.assert_allclose(T.prelu(x, slope).data, [[-1.0, 3.0]])


class TestReduce:
    def test_sum_all(self):
        assert t([1.0, 2.0, 3.0]).sum().item() == 6.0

    def test_l2_norm_345(self):
        assert t([3.0, 4.0]).l2_norm().item() == pytest.approx(5.0)

    def test_l2_norm_grad(self):
        x = t([3.0, 4.0], rg=True)
        x.l2_norm().backward()
        np.testing.assert_allclose(x.grad, [0.6, 0.8])
        assert grad_check(lambda a: a.l2_norm(), [t([3.0, 4.0])]).ok(1e-6)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            t([1.0, 2.0]).sum(axis=1)

    def test_mean_keepdims(self):
        x = t(np.arange(6.0).reshape(2, 3))
        assert x.mean(axis=1, keepdims=True).shape == (2, 1)


class TestSoftmax:
    def test_uniform_for_constant(self):
        for c in (-7.0, 0.0, 3.3):
            out = t([c, c, c]).softmax(axis=0)
            np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-12)

    def test_closed_form(self):
        out = t([0.0, np.log(2.0)]).softmax(axis=0)
        np.testing.assert_allclose(out.data, [1 / 3, 2 / 3], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=7)
        s1 = t(a).softmax(axis=0).data
        s2 = t(a + 123.456).softmax(axis=0).data
        np.testing.assert_allclose(s1, s2, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_sums_to_one(self, seed):
        rng = np.random.default_rng(seed)
        x = t(rng.normal(scale=50.0, size=(4, 6)))
        out = x.softmax(axis=1)
        np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-9)


class TestMatmul:
    def test_identity(self):
        b = t(np.arange(4.0).reshape(2, 2))
        np.testing.assert_array_equal(T.matmul(t(np.eye(2)), b).data, b.data)

    def test_arithmetic(self):
        out = T.matmul(t([[1.0, 2.0], [3.0, 4.0]]), t([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_gradient(self):
        rng = np.random.default_rng(1)
        a = t(rng.normal(size=(3, 4)))
        b = t(rng.normal(size=(4, 2)))
        r = grad_check(lambda x, y: T.matmul(x, y).square().sum(), [a, b])
        assert r.ok(1e-4)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            T.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))


def conv2d_oracle(x, w, stride, pad):
    """Direct quadruple-loop convolution used as the independent reference."""
    Cin, H, W = x.shape
    Cout, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    xp = np.zeros((Cin, H + 2 * ph, W + 2 * pw))
    xp[:, ph : ph + H, pw : pw + W] = x
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((Cout, Ho, Wo))
    for o in range(Cout):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(Cin):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * sh + a, j * sw + b] * w[o, c, a, b]
                out[o, i, j] = acc
    return out


def conv_transpose2d_oracle(y, w, stride, pad, output_padding=(0, 0)):
    """Zero-stuffing oracle: spread inputs by stride, then full correlation."""
    Cout, Ho, Wo = y.shape
    _, Cin, kh, kw = w.shape
    sh, sw = stride
    H = (Ho - 1) * sh - 2 * pad[0] + kh + output_padding[0]
    W = (Wo - 1) * sw - 2 * pad[1] + kw + output_padding[1]
    out = np.zeros((Cin, H + 2 * pad[0], W + 2 * pad[1]))
    for o in range(Cout):
        for i in range(Ho):
            for j in range(Wo):
                out[:, i * sh : i * sh + kh, j * sw : j * sw + kw] += y[o, i, j] * w[o]
    if pad[0]:
        out = out[:, pad[0] : -pad[0], :]
    if pad[1]:
        out = out[:, :, pad[1] : -pad[1]]
    return out


class TestConv:
    def test_identity_kernel(self):
        x = t(np.random.default_rng(0).normal(size=(1, 4, 5)))
        w = t(np.ones((1, 1, 1, 1)))
        np.testing.assert_allclose(T.conv2d(x, w).data, x.data)

    def test_zero_input(self):
        out = T.conv2d(t(np.zeros((2, 5, 5))), t(np.ones((3, 2, 2, 2))))
        assert not out.data.any()

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(1, 3, 3))
        w = rng.normal(size=(1, 1, 2, 2))
        got = T.conv2d(t(x), t(w), (1, 1), (0, 0)).data
        want = conv2d_oracle(x, w, (1, 1), (0, 0))
        assert got.shape == (1, 2, 2)
        np.testing.assert_allclose(got, want, atol=1e-10)

    @pytest.mark.parametrize("stride,pad", [((1, 1), (0, 0)), ((2, 1), (2, 0)), ((2, 2), (1, 1))])
    def test_oracle_sweep(self, stride, pad):
        rng = np.random.default_rng(int(stride[0] * 10 + pad[0]))
        x = rng.normal(size=(3, 7, 6))
        w = rng.normal(size=(2, 3, 5, 2))
        got = T.conv2d(t(x), t(w), stride, pad).data
        np.testing.assert_allclose(got, conv2d_oracle(x, w, stride, pad), atol=1e-10)

    def test_asymmetric_pad_matches_manual(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 5))
        w = rng.normal(size=(2, 2, 3, 2))
        got = T.conv2d(t(x), t(w), (1, 1), (0, (1, 0))).data
        xp = np.concatenate([np.zeros((2, 6, 1)), x], axis=2)
        want = conv2d_oracle(xp, w, (1, 1), (0, 0))
        np.testing.assert_allclose(got, want, atol=1e-10)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            T.conv2d(t(np.ones((1, 2, 2))), t(np.ones((1, 1, 4, 4))))

    def test_batched_matches_unbatched(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 2, 6, 5))
        w = rng.normal(size=(4, 2, 3, 2))
        got = T.conv2d(t(x), t(w), (2, 1), (1, 0)).data
        for b in range(3):
            single = T.conv2d(t(x[b]), t(w), (2, 1), (1, 0)).data
            np.testing.assert_allclose(got[b], single, atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(11)
        x = t(rng.normal(size=(2, 5, 4)))
        w = t(rng.normal(size=(2, 2, 3, 2)))
        r = grad_check(lambda a, b: T.conv2d(a, b, (2, 1), (1, 0)).square().sum(), [x, w])
        assert r.ok(1e-3)


class TestConvTranspose:
    def test_unit_kernel_identity(self):
        x = t(np.random.default_rng(0).normal(size=(1, 3, 3)))
        w = t(np.ones((1, 1, 1, 1)))
        np.testing.assert_allclose(T.conv_transpose2d(x, w).data, x.data)

    def test_shape_inversion(self):
        rng = np.random.default_rng(2)
        x = t(rng.normal(size=(2, 8, 6)))
        w = t(rng.normal(size=(3, 2, 2, 2)))
        y = T.conv2d(x, w, (2, 2), (0, 0))
        back = T.conv_transpose2d(y, w, (2, 2), (0, 0))
        assert back.shape == x.shape

    def test_zero_stuffing_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 4, 4))
        w = rng.normal(size=(2, 3, 3, 2))
        for stride, pad, op in [((1, 1), (0, 0), (0, 0)), ((2, 1), (1, 0), (1, 0))]:
            got = T.conv_transpose2d(t(x), t(w), stride, pad, op).data
            want = conv_transpose2d_oracle(x, w, stride, pad, op)
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_adjoint_of_conv(self):
        # <conv(x), y> == <x, conv_transpose(y)> defines the construction
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 9, 5))
        w = rng.normal(size=(3, 2, 5, 2))
        cx = T.conv2d(t(x), t(w), (2, 1), (2, 0)).data
        y = rng.normal(size=cx.shape)
        cty = T.conv_transpose2d(t(y), t(w), (2, 1), (2, 0)).data
        assert cty.shape == x.shape
        np.testing.assert_allclose(np.vdot(cx, y), np.vdot(x, cty), rtol=1e-10)

    def test_gradient(self):
        rng = np.random.default_rng(13)
        x = t(rng.normal(size=(3, 3, 4)))
        w = t(rng.normal(size=(3, 2, 3, 2)))
        r = grad_check(
            lambda a, b: T.conv_transpose2d(a, b, (2, 1), (1, 0), (1, 0)).square().sum(), [x, w]
        )
        assert r.ok(1e-3)


class TestStructural:
    def test_concat_slice_inverse(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
        cat = T.concat([t(a), t(b)], axis=1)
        np.testing.assert_array_equal(cat.narrow(1, 0, 3).data, a)
        np.testing.assert_array_equal(cat.narrow(1, 3, 2).data, b)

    def test_reshape_row_major(self):
        x = t(np.arange(6.0))
        np.testing.assert_array_equal(x.reshape(2, 3).data, [[0, 1, 2], [3, 4, 5]])
        assert x.reshape(2, 3).size == 6

    def test_transpose_involution(self):
        x = t(np.random.default_rng(0).normal(size=(3, 4)))
        np.testing.assert_array_equal(x.transpose(1, 0).transpose(1, 0).data, x.data)

    def test_narrow_out_of_range(self):
        with pytest.raises(ShapeError):
            t(np.ones(4)).narrow(0, 2, 5)

    def test_structural_gradients(self):
        rng = np.random.default_rng(21)
        x = t(rng.normal(size=(3, 4)))
        r = grad_check(
            lambda a: T.concat([a.narrow(0, 0, 2), a.narrow(0, 1, 2)], axis=0)
            .transpose(1, 0).reshape(-1).square().sum(),
            [x],
        )
        assert r.ok(1e-3)


class TestBackward:
    def test_sum_gives_ones(self):
        x = t(np.random.default_rng(0).normal(size=(3, 2)), rg=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_product_rule(self):
        rng = np.random.default_rng(1)
        x = t(rng.normal(size=5), rg=True)
        y = t(rng.normal(size=5), rg=True)
        (x * y).sum().backward()
        np.testing.assert_allclose(x.grad, y.data)
        np.testing.assert_allclose(y.grad, x.data)

    def test_composite_softmax_log_sum(self):
        rng = np.random.default_rng(2)
        x = t(rng.normal(size=6))
        coeffs = Tensor(rng.uniform(0.5, 1.0, size=6))
        r = grad_check(lambda a: (a.softmax(axis=0).log() * coeffs).sum(), [x])
        assert r.ok(1e-4)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(UsageError):
            t(np.ones(3), rg=True).backward()

    def test_backward_accumulates(self):
        x = t([1.0, 2.0], rg=True)
        loss = x.sum()
        loss.backward()
        loss.backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_shared_subexpression(self):
        # diamond graph: both paths contribute to the gradient
        x = t([3.0], rg=True)
        y = x * x + x.square()
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [12.0])

    def test_same_tensor_concat_twice(self):
        x = t([1.0, 2.0], rg=True)
        T.concat([x, x], axis=0).square().sum().backward()
        np.testing.assert_allclose(x.grad, [4.0, 8.0])

    def test_grad_aliasing_chain_safe(self):
        # two adds share unbroadcast gradient arrays; accumulation must not
        # corrupt sibling grads
        a = t([1.0, 1.0], rg=True)
        b = t([2.0, 2.0], rg=True)
        s = a + b
        u = s + a
        u.sum().backward()
        np.testing.assert_array_equal(a.grad, [2.0, 2.0])
        np.testing.assert_array_equal(b.grad, [1.0, 1.0])

    def test_detach_blocks_gradient(self):
        x = t([2.0], rg=True)
        y = x.square().detach() * x
        y.sum().backward()
        np.testing.assert_allclose(x.grad, [4.0])


class TestDeterminism:
    def test_forward_backward_bit_identical(self):
        def run():
            rng = np.random.default_rng(42)
            x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
            w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
            loss = T.matmul(x, w).sigmoid().softmax(axis=1).log().sum()
            loss.backward()
            return loss.item(), x.grad.copy(), w.grad.copy()

        l1, gx1, gw1 = run()
        l2, gx2, gw2 = run()
        assert l1 == l2
        np.testing.assert_array_equal(gx1, gx2)
        np.testing.assert_array_equal(gw1, gw2)


class TestGradCheck:
    def test_linear_is_exact(self):
        x = t(np.random.default_rng(0).normal(size=4))
        r = grad_check(lambda a: (a * 3.0).sum(), [x])
        assert r.max_rel_err < 1e-10

    def test_reports_wrong_gradient(self):
        def bad(a):
            out = Tensor(a.data * 2.0)
            def backward(g):
                a.accumulate_grad(g * 3.0)  # wrong on purpose
            return T._record(out, (a,), "bad", backward).sum()

        x = t([1.0, 2.0])
        r = grad_check(bad, [x])
        assert not r.ok(1e-3)
