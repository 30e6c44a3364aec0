import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hrpvt import tensor as T
from hrpvt.gradcheck import check_grad, finite_diff_grad, relative_error
from hrpvt.optim import Adam, AdamState, adam_step, step_lr
from hrpvt.tensor import Tape, Tensor


def reference_conv(x, w, b, stride, pad, dil, groups):
    """Scalar-loop cross-correlation, written without any vectorisation."""
    n, cin, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    ho = (h + 2 * pad - dil * (kh - 1) - 1) // stride + 1
    wo = (wd + 2 * pad - dil * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    per_group = cout // groups
    for b_ in range(n):
        for o in range(cout):
            g = o // per_group
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for c in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride - pad + u * dil
                                s = j * stride - pad + v * dil
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[b_, g * cg + c, r, s] * w[o, c, u, v]
                    out[b_, o, i, j] = acc
    return out


def erf_series(z, terms=60):
    """Maclaurin series of erf."""
    total = 0.0
    for n in range(terms):
        total += (-1) ** n * z ** (2 * n + 1) / (math.factorial(n) * (2 * n + 1))
    return 2.0 / math.sqrt(math.pi) * total


# ---------------------------------------------------------------- conv2d


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 4))
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    assert np.array_equal(y.data, x)


def test_conv_sum_of_ones():
    y = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))))
    assert y.shape == (1, 1, 1, 1)
    assert y.data.item() == 9.0


@pytest.mark.parametrize("impl", ["direct", "gemm"])
def test_dilated_impulse_support(impl):
    T.set_conv_impl(impl)
    x = np.zeros((1, 1, 9, 9))
    x[0, 0, 4, 4] = 1.0
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), padding=2, dilation=2).data[0, 0]
    expected = reference_conv(x, np.ones((1, 1, 3, 3)), None, 1, 2, 2, 1)[0, 0]
    assert np.array_equal(y, expected)
    rows, cols = np.nonzero(y)
    offsets = {(r - 4, c - 4) for r, c in zip(rows, cols)}
    assert offsets == {(a, b) for a in (-2, 0, 2) for b in (-2, 0, 2)}


@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("dil", [1, 2, 3])
@pytest.mark.parametrize("groups", [1, 4])
@pytest.mark.parametrize("impl", ["direct", "gemm"])
def test_conv_matches_scalar_reference(rng, stride, dil, groups, impl):
    T.set_conv_impl(impl)
    x = rng.standard_normal((2, 4, 8, 7))
    w = rng.standard_normal((4 if groups == 4 else 6, 4 // groups, 3, 3))
    b = rng.standard_normal(w.shape[0])
    y = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, dil, dil, groups)
    np.testing.assert_allclose(y.data, reference_conv(x, w, b, stride, dil, dil, groups), atol=1e-12)


@pytest.mark.parametrize("stride,pad,dil", [(1, 0, 1), (2, 1, 1), (1, 2, 2), (2, 3, 3)])
def test_gemm_agrees_with_direct(rng, stride, pad, dil):
    x = Tensor(rng.standard_normal((3, 8, 11, 10)))
    w = Tensor(rng.standard_normal((5, 8, 3, 3)))
    T.set_conv_impl("direct")
    a = T.conv2d(x, w, None, stride, pad, dil)
    T.set_conv_impl("gemm")
    b = T.conv2d(x, w, None, stride, pad, dil)
    np.testing.assert_allclose(a.data, b.data, atol=1e-6, rtol=0)


def test_conv_output_size_formula():
    for h in range(5, 12):
        for k, s, p, d in [(3, 1, 1, 1), (3, 2, 1, 1), (7, 4, 3, 1), (3, 1, 3, 3), (4, 2, 0, 2)]:
            if h + 2 * p < d * (k - 1) + 1:
                continue
            x = Tensor(np.zeros((1, 1, h, h)))
            y = T.conv2d(x, Tensor(np.zeros((1, 1, k, k))), stride=s, padding=p, dilation=d)
            assert y.shape[2] == (h + 2 * p - d * (k - 1) - 1) // s + 1 == T.conv_output_size(h, k, s, p, d)


def test_conv_channel_mismatch_names_shapes():
    with pytest.raises(ValueError, match=r"\(1, 3, 5, 5\).*\(2, 4, 3, 3\)|\(2, 4, 3, 3\).*\(1, 3, 5, 5\)"):
        T.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 4, 3, 3))))


def test_conv_groups_must_divide_channels():
    with pytest.raises(ValueError):
        T.conv2d(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 1, 3, 3))), groups=2)


# ---------------------------------------------------------------- deconv2d


def test_deconv_single_tap_spread():
    y = T.deconv2d(Tensor(np.array([[[[5.0]]]])), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    assert np.array_equal(y.data, np.full((1, 1, 2, 2), 5.0))


def test_deconv_identity(rng):
    x = rng.standard_normal((2, 1, 4, 3))
    assert np.array_equal(T.deconv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1)))).data, x)


@pytest.mark.parametrize("k,s,p", [(4, 2, 1), (3, 1, 1), (3, 2, 0), (2, 2, 0)])
def test_deconv_output_size(k, s, p):
    y = T.deconv2d(Tensor(np.zeros((1, 2, 5, 6))), Tensor(np.zeros((2, 3, k, k))), stride=s, padding=p)
    assert y.shape == (1, 3, (5 - 1) * s - 2 * p + k, (6 - 1) * s - 2 * p + k)


@pytest.mark.parametrize("stride,pad,dil,groups", [(1, 0, 1, 1), (2, 1, 1, 1), (2, 1, 2, 2), (1, 2, 2, 4), (3, 1, 1, 1)])
@pytest.mark.parametrize("impl", ["direct", "gemm"])
def test_conv_deconv_adjoint(rng, stride, pad, dil, groups, impl):
    T.set_conv_impl(impl)
    # extents for which the strided conv tiles the padded input exactly, so
    # the transposed conv maps back onto the full input grid
    fits = [n for n in range(7, 20) if (n + 2 * pad - dil * 2 - 1) % stride == 0]
    h, w_ = fits[0], fits[1]
    a = rng.standard_normal((2, 4, h, w_))
    w = rng.standard_normal((4, 4 // groups, 3, 3))
    ya = T.conv2d(Tensor(a), Tensor(w), None, stride, pad, dil, groups)
    b = rng.standard_normal(ya.shape)
    # deconv weight is (Cin, Cout/groups, kh, kw); with Cin = Cout conv's weight serves both
    back = T.deconv2d(Tensor(b), Tensor(w), None, stride, pad, dil, groups)
    assert back.shape == a.shape
    lhs = float((ya.data * b).sum())
    rhs = float((a * back.data).sum())
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


# ---------------------------------------------------------------- normalisation


def test_layer_norm_constant_input_gives_offset():
    off = np.array([0.5, -1.0, 2.0])
    y = T.layer_norm(Tensor(np.full((2, 4, 3), 7.0)), Tensor(np.array([2.0, 3.0, 4.0])), Tensor(off))
    assert np.allclose(y.data, off)


def test_batch_norm_constant_input_gives_offset():
    off = np.array([0.25, -3.0])
    y = T.batch_norm(Tensor(np.full((2, 2, 3, 3), -4.0)), Tensor(np.ones(2)), Tensor(off), np.zeros(2), np.ones(2), True)
    assert np.allclose(y.data, off[None, :, None, None])


def test_layer_norm_moments(rng):
    y = T.layer_norm(Tensor(rng.standard_normal((3, 5, 16)) * 4 + 2), None, None).data
    assert np.allclose(y.mean(-1), 0.0, atol=1e-6)
    assert np.allclose(y.var(-1), 1.0, atol=1e-4)  # eps=1e-6 relative to var ~16


def test_batch_norm_inference_hand_example():
    x = np.array([1.0, 3.0]).reshape(1, 2, 1, 1)
    m, v = np.array([0.5, 1.0]), np.array([4.0, 0.25])
    g, o = np.array([2.0, -1.0]), np.array([0.1, 0.2])
    eps = 1e-5
    y = T.batch_norm(Tensor(x), Tensor(g), Tensor(o), m, v, False, eps=eps).data.reshape(2)
    expected = [(1.0 - 0.5) / math.sqrt(4.0 + eps) * 2.0 + 0.1, (3.0 - 1.0) / math.sqrt(0.25 + eps) * -1.0 + 0.2]
    assert np.allclose(y, expected, atol=1e-12)


def test_batch_norm_running_statistics(rng):
    x = rng.standard_normal((4, 3, 5, 5))
    rm, rv = np.zeros(3), np.ones(3)
    T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rm, rv, True, momentum=0.1)
    flat = x.transpose(1, 0, 2, 3).reshape(3, -1)
    assert np.allclose(rm, 0.1 * flat.mean(1))
    assert np.allclose(rv, 0.9 + 0.1 * flat.var(1, ddof=1))


def test_normalize_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        T.normalize(Tensor(np.zeros((1, 2, 3))), "layer", None, None, epsilon=0.0)


# ---------------------------------------------------------------- activations / softmax


def test_relu_values():
    assert T.relu(Tensor(np.array([-1.0, 2.5]))).data.tolist() == [0.0, 2.5]


def test_gelu_zero():
    assert T.gelu(Tensor(np.array([0.0]))).data[0] == 0.0


def test_gelu_one_against_series():
    phi = 0.5 * (1.0 + erf_series(1.0 / math.sqrt(2.0)))
    val = T.gelu(Tensor(np.array([1.0]))).data[0]
    assert abs(val - phi) < 1e-12
    assert abs(val - 0.841345) < 1e-6


def test_softmax_closed_forms():
    assert np.allclose(T.softmax_last(Tensor(np.zeros((2, 5)))).data, 0.2)
    assert np.allclose(T.softmax_last(Tensor(np.array([0.0, math.log(3.0)]))).data, [0.25, 0.75])


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-1e3, 1e3))
@settings(max_examples=60, deadline=None)
def test_softmax_shift_invariance_and_normalisation(xs, c):
    x = np.array(xs)
    a = T.softmax_last(Tensor(x)).data
    b = T.softmax_last(Tensor(x + c)).data
    assert abs(a.sum() - 1.0) < 1e-6
    assert np.allclose(a, b, atol=1e-9)


def test_softmax_large_inputs_do_not_overflow():
    y = T.softmax_last(Tensor(np.array([1000.0, 1000.0, -1000.0]))).data
    assert np.allclose(y, [0.5, 0.5, 0.0])


# ---------------------------------------------------------------- linear / reshaping


def test_linear_identity_and_bias(rng):
    x = rng.standard_normal((2, 3, 4))
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.eye(4))).data, x)
    b = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(T.linear(Tensor(x), Tensor(np.zeros((4, 3))), Tensor(b)).data, np.broadcast_to(b, (2, 3, 3)))


def test_linear_hand_example():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    w = np.array([[1.0, 0.0], [0.0, 1.0]]).T
    ref = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            ref[i, j] = sum(x[i, k] * w[k, j] for k in range(2))
    assert np.array_equal(T.linear(Tensor(x), Tensor(w)).data, ref)


def test_linear_extent_mismatch():
    with pytest.raises(ValueError, match="3"):
        T.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_img2seq_roundtrip_and_indexing(rng):
    f = rng.standard_normal((2, 3, 4, 5))
    s = T.img2seq(Tensor(f))
    assert s.shape == (2, 20, 3)
    assert np.array_equal(T.seq2img(s, 4, 5).data, f)
    ramp = np.arange(20.0).reshape(1, 1, 4, 5)
    tokens = T.img2seq(Tensor(ramp)).data[0, :, 0]
    for k in range(20):
        assert tokens[k] == ramp[0, 0, k // 5, k % 5]
    assert T.img2seq(Tensor(np.ones((1, 7, 1, 1)))).shape == (1, 1, 7)


def test_seq2img_token_mismatch():
    with pytest.raises(ValueError, match="token"):
        T.seq2img(Tensor(np.zeros((1, 10, 3))), 3, 4)


def test_seq2patches_layout():
    h, w, r, c = 4, 6, 2, 3
    s = np.arange(h * w * c, dtype=float).reshape(1, h * w, c)
    p = T.seq2patches(Tensor(s), h, w, r).data
    assert p.shape == (1, (h // r) * (w // r), r * r * c)
    img = s[0].reshape(h, w, c)
    for bi in range(h // r):
        for bj in range(w // r):
            expected = img[bi * r : (bi + 1) * r, bj * r : (bj + 1) * r, :].reshape(-1)
            assert np.array_equal(p[0, bi * (w // r) + bj], expected)


# ---------------------------------------------------------------- autodiff


def test_backward_sum_and_square(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    T.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((3, 4)))
    x.grad = None
    T.sum_(x * x).backward()
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_without_tape_is_diagnosed():
    with pytest.raises(RuntimeError, match="no tape"):
        T.backward(Tensor(np.array(1.0)))


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_tape_topological_order(rng):
    x = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    y = T.gelu(x * 2.0)
    z = T.sum_(y + x)
    tape = Tape.record(z)
    position = {id(t): i for i, (t, _) in enumerate(tape.entries)}
    for t, node in tape.entries:
        for inp in node.inputs:
            if id(inp) in position:
                assert position[id(inp)] < position[id(t)]
    assert tape.ops()[-1] == "sum"


def test_backward_is_bit_reproducible(rng):
    x0 = rng.standard_normal((1, 2, 6, 6))
    w0 = rng.standard_normal((3, 2, 3, 3))

    def grads():
        x = Tensor(x0.copy(), requires_grad=True)
        w = Tensor(w0.copy(), requires_grad=True)
        T.sum_(T.gelu(T.conv2d(x, w, padding=1)) * T.conv2d(x, w, padding=1)).backward()
        return x.grad, w.grad

    (a1, b1), (a2, b2) = grads(), grads()
    assert np.array_equal(a1, a2) and np.array_equal(b1, b2)


def test_conv_gradient_on_spec_shape(rng):
    w = Tensor(rng.standard_normal((3, 2, 3, 3)))
    proj = rng.standard_normal((1, 3, 5, 5))
    err = check_grad(lambda x: T.sum_(T.conv2d(x, w, padding=1) * proj), Tensor(rng.standard_normal((1, 2, 5, 5))))
    assert err <= 1e-5


def test_finite_diff_simple_functions():
    x = Tensor(np.array([1.0, -2.0, 0.5]))
    assert np.allclose(finite_diff_grad(lambda t: T.sum_(t), x), 1.0)
    g = finite_diff_grad(lambda t: T.sum_(t * t), Tensor(np.array([3.0])))
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_restores_input(rng):
    data = rng.standard_normal((2, 3))
    x = Tensor(data.copy())
    finite_diff_grad(lambda t: T.sum_(T.gelu(t)), x)
    assert np.array_equal(x.data, data)


def test_two_layer_composite_gradient(rng):
    w1 = Tensor(rng.standard_normal((4, 2, 3, 3)))
    w2 = Tensor(rng.standard_normal((3, 4, 3, 3)))
    proj = rng.standard_normal((1, 3, 2, 2))
    fn = lambda x: T.sum_(T.conv2d(T.gelu(T.conv2d(x, w1, padding=1)), w2, stride=2) * proj)  # noqa: E731
    assert check_grad(fn, Tensor(rng.standard_normal((1, 2, 6, 6)))) <= 1e-5


def test_relative_error_definition():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 0.0]), np.array([0.0, 0.0])) == 1.0


def test_op_gradient_suite():
    from hrpvt.gradsuite import run_cases, tensor_cases

    bad = [(r.name, r.error) for r in run_cases(tensor_cases(), 1e-5) if not r.passed]
    assert not bad


def test_float32_path_preserves_dtype(rng):
    x = Tensor(rng.standard_normal((1, 2, 5, 5)).astype(np.float32), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)).astype(np.float32), requires_grad=True)
    y = T.sum_(T.gelu(T.conv2d(x, w, padding=1)))
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32 and w.grad.dtype == np.float32


# ---------------------------------------------------------------- optimiser


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState()
    adam_step([p], [np.zeros(2)], state)
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_value():
    p = Tensor(np.array([0.0]), requires_grad=True)
    state = AdamState()
    adam_step([p], [np.array([1.0])], state, lr=5e-4)
    # m_hat = 1, v_hat = 1 after bias correction
    assert abs(p.data[0] - (-5e-4 / (1.0 + 1e-8))) < 1e-15


def test_adam_constant_gradient_is_monotone():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([p], lr=1e-2)
    prev = p.data[0]
    for _ in range(50):
        p.grad = np.array([-3.0])
        opt.step()
        assert p.data[0] > prev
        prev = p.data[0]


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError, match="do not match"):
        adam_step([p], [np.zeros(2)], AdamState())


def test_step_lr_schedule():
    lrs = [step_lr(5e-4, e, [170, 210]) for e in (0, 169, 170, 209, 210, 219)]
    assert lrs[:2] == [5e-4, 5e-4]
    assert math.isclose(lrs[2], 5e-5) and math.isclose(lrs[3], 5e-5)
    assert math.isclose(lrs[4], 5e-6) and math.isclose(lrs[5], 5e-6)
