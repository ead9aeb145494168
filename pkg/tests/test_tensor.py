import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uolo import tensor as T
from uolo.exceptions import ConfigurationError, TapeError, UsageError
from uolo.tensor import RunningStats, Tensor
from uolo.testing import gradcheck


def conv2d_loop(x, w, b, stride, pad):
    """Direct nested-loop cross-correlation."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((bsz, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((bsz, cout, ho, wo))
    for n in range(bsz):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc
    return out


def conv_transpose_loop(x, w, stride, pad):
    """Nested-loop scatter: every input pixel adds value * kernel into the output."""
    bsz, cin, h, wd = x.shape
    _, cout, k, _ = w.shape
    hf, wf = (h - 1) * stride + k, (wd - 1) * stride + k
    full = np.zeros((bsz, cout, hf, wf))
    for n in range(bsz):
        for c in range(cin):
            for i in range(h):
                for j in range(wd):
                    for o in range(cout):
                        for u in range(k):
                            for v in range(k):
                                full[n, o, i * stride + u, j * stride + v] += x[n, c, i, j] * w[c, o, u, v]
    return full[:, :, pad:hf - pad, pad:wf - pad]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------
# conv2d
# --------------------------------------------------------------------------


def test_conv2d_sum_of_ones():
    out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv2d_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 5, 6))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = T.conv2d(Tensor(x), Tensor(k), Tensor([0.0]), stride=1, padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(2, 1), (1, 0), (1, 1), (3, 2)])
def test_conv2d_matches_loop(rng, stride, pad):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, conv2d_loop(x, w, b, stride, pad), rtol=0, atol=1e-12)


def test_conv2d_output_size():
    out = T.conv2d(Tensor(np.zeros((2, 3, 9, 7))), Tensor(np.zeros((4, 3, 3, 3))), stride=2, padding=1)
    assert out.shape == (2, 4, 5, 4)


def test_conv2d_channel_mismatch():
    with pytest.raises(ConfigurationError):
        T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_kernel_too_large():
    with pytest.raises(ConfigurationError):
        T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv2d_bad_stride():
    with pytest.raises(ConfigurationError):
        T.conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)


# --------------------------------------------------------------------------
# conv2d_transpose
# --------------------------------------------------------------------------


def test_conv_transpose_broadcasts_single_value():
    out = T.conv2d_transpose(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2))), stride=2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))


@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 2, 1), (3, 1, 1), (4, 2, 1)])
def test_conv_transpose_matches_scatter_loop(rng, k, stride, pad):
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((3, 2, k, k))
    out = T.conv2d_transpose(Tensor(x), Tensor(w), stride=stride, padding=pad)
    np.testing.assert_allclose(out.data, conv_transpose_loop(x, w, stride, pad), atol=1e-12)


def test_conv_transpose_doubles_extent():
    out = T.conv2d_transpose(Tensor(np.ones((1, 4, 3, 5))), Tensor(np.ones((4, 2, 2, 2))), stride=2)
    assert out.shape == (1, 2, 6, 10)


def test_conv_transpose_zero_input():
    out = T.conv2d_transpose(Tensor(np.zeros((1, 2, 3, 3))),
                             Tensor(np.random.default_rng(0).standard_normal((2, 3, 2, 2))), stride=2)
    assert not out.data.any()


def test_conv_transpose_channel_mismatch():
    with pytest.raises(ConfigurationError):
        T.conv2d_transpose(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((3, 1, 2, 2))), stride=2)


def test_conv2d_input_grad_is_transposed_conv(rng):
    # (H + 2p - k) divisible by stride, so the adjoint restores the input extent exactly
    x = Tensor(rng.standard_normal((2, 3, 7, 7)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    out = T.conv2d(x, w, stride=2, padding=1)
    g = rng.standard_normal(out.shape)
    T.backward(T.tensor_sum(T.mul(out, Tensor(g))))
    expected = T.conv2d_transpose(Tensor(g), w, stride=2, padding=1)
    np.testing.assert_allclose(x.grad, expected.data, atol=1e-12)


def test_conv_transpose_is_conv_with_flipped_kernel(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((2, 3, 3, 3))
    flipped = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    for pad in (0, 1, 2):
        direct = T.conv2d(Tensor(x), Tensor(flipped), stride=1, padding=3 - 1 - pad)
        transposed = T.conv2d_transpose(Tensor(x), Tensor(w), stride=1, padding=pad)
        np.testing.assert_allclose(transposed.data, direct.data, atol=1e-12)


# --------------------------------------------------------------------------
# batch norm
# --------------------------------------------------------------------------


def test_batch_norm_zero_mean_unit_variance(rng):
    x = Tensor(rng.standard_normal((4, 3, 5, 5)) * 3 + 2)
    out = T.batch_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), RunningStats.create(3))
    assert np.abs(out.data.mean(axis=(0, 2, 3))).max() < 1e-9
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_batch_norm_affine(rng):
    x = Tensor(rng.standard_normal((4, 3, 5, 5)))
    out = T.batch_norm(x, Tensor(np.full(3, 2.0)), Tensor(np.full(3, 3.0)), RunningStats.create(3))
    assert np.abs(out.data.mean(axis=(0, 2, 3)) - 3.0).max() < 1e-9
    np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 4.0, atol=1e-3)


def test_batch_norm_infer_matches_closed_form(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    stats = RunningStats(rng.standard_normal(3), rng.uniform(0.5, 2.0, 3))
    gamma, beta = rng.standard_normal(3), rng.standard_normal(3)
    out = T.batch_norm(Tensor(x), Tensor(gamma), Tensor(beta), stats, mode="infer")
    expected = np.empty_like(x)
    for c in range(3):
        expected[:, c] = (x[:, c] - stats.mean[c]) / np.sqrt(stats.var[c] + 1e-5) * gamma[c] + beta[c]
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


def test_batch_norm_running_update(rng):
    x = rng.standard_normal((2, 2, 3, 3))
    stats = RunningStats.create(2)
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats)
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batch_norm_infer_leaves_running_stats():
    stats = RunningStats.create(2)
    T.batch_norm(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, "infer")
    assert stats.count == 0
    np.testing.assert_array_equal(stats.var, 1.0)


def test_batch_norm_degenerate_batch():
    with pytest.raises(ConfigurationError):
        T.batch_norm(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                     RunningStats.create(2))


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def test_sigmoid_and_relu_values():
    assert T.sigmoid(Tensor(0.0)).data == 0.5
    np.testing.assert_array_equal(T.relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_sigmoid_extremes_are_finite():
    out = T.sigmoid(Tensor([-1000.0, 1000.0]))
    assert np.isfinite(out.data).all()
    np.testing.assert_array_equal(out.data, [0.0, 1.0])


def test_sigmoid_gradient_at_zero():
    x = Tensor([0.0], requires_grad=True)
    T.backward(T.tensor_sum(T.sigmoid(x)))
    assert x.grad[0] == 0.25
    assert gradcheck(lambda: T.tensor_sum(T.sigmoid(x)), [x]) < 1e-4


def test_elementwise_shape_mismatch():
    with pytest.raises(ConfigurationError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(ConfigurationError):
        T.mul(Tensor(np.ones((2, 2))), Tensor(np.ones(4)))


def test_scalar_operands():
    x = Tensor([1.0, 2.0])
    np.testing.assert_array_equal((2.0 * x + 1.0).data, [3.0, 5.0])
    np.testing.assert_array_equal((1.0 - x).data, [0.0, -1.0])
    np.testing.assert_array_equal((4.0 / x).data, [4.0, 2.0])


# --------------------------------------------------------------------------
# reductions and reshaping
# --------------------------------------------------------------------------


def test_sum_of_ones():
    assert T.tensor_sum(Tensor(np.ones((2, 2)))).data == 4.0


def test_concat_then_slice_recovers_operands(rng):
    a, b = rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 3, 3, 3))
    c = T.concat([Tensor(a), Tensor(b)], axis=1)
    assert c.shape == (2, 5, 3, 3)
    np.testing.assert_array_equal(c[:, :2].data, a)
    np.testing.assert_array_equal(c[:, 2:].data, b)


def test_concat_incompatible():
    with pytest.raises(ConfigurationError):
        T.concat([Tensor(np.ones((1, 2, 3, 3))), Tensor(np.ones((1, 2, 4, 3)))])


def test_downsample_ones():
    out = T.spatial_downsample(Tensor(np.ones((1, 1, 4, 4))), 2)
    np.testing.assert_array_equal(out.data, np.ones((1, 1, 2, 2)))


def test_downsample_averages_windows():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = T.spatial_downsample(Tensor(x), (2, 2))
    np.testing.assert_array_equal(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])


def test_downsample_indivisible():
    with pytest.raises(ConfigurationError):
        T.spatial_downsample(Tensor(np.ones((1, 1, 6, 6))), 4)


def test_reshape_preserves_count():
    with pytest.raises(ConfigurationError):
        T.reshape(Tensor(np.ones(6)), (4, 2))


# --------------------------------------------------------------------------
# backward and tape
# --------------------------------------------------------------------------


def test_backward_quadratic():
    w = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tensor_sum(w * w))
    np.testing.assert_array_equal(w.grad, [2.0, 4.0])


def test_backward_accumulates():
    w = Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tensor_sum(w * w))
    T.backward(T.tensor_sum(w * w))
    np.testing.assert_array_equal(w.grad, [4.0, 8.0])


def test_backward_constant_is_noop():
    loss = T.tensor_sum(Tensor([1.0, 2.0]) * 3.0)
    T.backward(loss)


def test_backward_non_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(UsageError):
        T.backward(w * 2.0)


def test_backward_after_clear_is_error():
    tape = T.Tape()
    w = Tensor([1.0], requires_grad=True)
    with T.using_tape(tape):
        loss = T.tensor_sum(w * w)
        tape.clear()
        with pytest.raises(TapeError):
            T.backward(loss)


def test_tape_records_in_execution_order():
    tape = T.Tape()
    w = Tensor([1.0, 2.0], requires_grad=True)
    with T.using_tape(tape):
        a = T.exp(w)
        b = T.sigmoid(a)
        c = T.tensor_sum(b)
    assert [n.out for n in tape._nodes] == [a, b, c]


def test_no_grad_skips_tape():
    tape = T.Tape()
    w = Tensor([1.0], requires_grad=True)
    with T.using_tape(tape), T.no_grad():
        out = T.exp(w)
    assert len(tape) == 0 and not out.requires_grad


def test_replay_is_deterministic(rng):
    x0 = rng.standard_normal((2, 2, 6, 6))
    k0 = rng.standard_normal((3, 2, 3, 3))

    def run():
        x = Tensor(x0, requires_grad=True)
        k = Tensor(k0, requires_grad=True)
        loss = T.tensor_sum(T.sigmoid(T.conv2d(x, k, stride=2, padding=1)))
        T.backward(loss)
        return loss.data.copy(), x.grad.copy(), k.grad.copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert a.tobytes() == b.tobytes()


# --------------------------------------------------------------------------
# gradient checks
# --------------------------------------------------------------------------


def _proj(out, rng):
    return Tensor(rng.standard_normal(out.shape))


GRAD_CASES = {
    "add": lambda a, b, r: T.add(a, b),
    "sub": lambda a, b, r: T.sub(a, b),
    "mul": lambda a, b, r: T.mul(a, b),
    "div": lambda a, b, r: T.div(a, T.add(T.mul(b, b), 1.0)),
    "relu": lambda a, b, r: T.relu(a),
    "sigmoid": lambda a, b, r: T.sigmoid(a),
    "exp": lambda a, b, r: T.exp(a),
    "log": lambda a, b, r: T.log(T.add(T.exp(a), 0.5)),
    "log_softmax": lambda a, b, r: T.log_softmax(a, axis=-1),
    "mean_axis": lambda a, b, r: T.mean(a, axis=1, keepdims=True),
    "sum_axis": lambda a, b, r: T.tensor_sum(a, axis=(0, 2)),
    "concat": lambda a, b, r: T.concat([a, b], axis=1),
    "slice": lambda a, b, r: a[:, 1:, ::2],
    "transpose_reshape": lambda a, b, r: T.reshape(T.transpose(a, (0, 2, 3, 1)), (-1,)),
    "downsample": lambda a, b, r: T.spatial_downsample(a, 2),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
@pytest.mark.parametrize("seed", range(3))
def test_elementwise_and_shape_gradients(name, seed):
    rng = np.random.default_rng(seed)
    a = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    if name == "relu":
        a.data += np.sign(a.data) * 0.05  # keep clear of the kink
    out = GRAD_CASES[name](a, b, rng)
    proj = _proj(out, rng)
    fn = lambda: T.tensor_sum(T.mul(GRAD_CASES[name](a, b, rng), proj))  # noqa: E731
    assert gradcheck(fn, [a, b]) < 1e-4


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (2, 0)])
def test_conv2d_gradients(seed, stride, pad):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    proj = _proj(T.conv2d(x, w, b, stride, pad), rng)
    assert gradcheck(lambda: T.tensor_sum(T.mul(T.conv2d(x, w, b, stride, pad), proj)), [x, w, b]) < 1e-4


@pytest.mark.parametrize("seed", range(3))
@pytest.mark.parametrize("k,stride,pad", [(2, 2, 0), (3, 2, 1), (3, 1, 1)])
def test_conv_transpose_gradients(seed, k, stride, pad):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, k, k)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    f = lambda: T.conv2d_transpose(x, w, b, stride, pad)  # noqa: E731
    proj = _proj(f(), rng)
    assert gradcheck(lambda: T.tensor_sum(T.mul(f(), proj)), [x, w, b]) < 1e-4


@pytest.mark.parametrize("mode", ["train", "infer"])
@pytest.mark.parametrize("seed", range(3))
def test_batch_norm_gradients(mode, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    g = Tensor(rng.uniform(0.5, 2, 2), requires_grad=True)
    b = Tensor(rng.standard_normal(2), requires_grad=True)
    stats = RunningStats(rng.standard_normal(2), rng.uniform(0.5, 2, 2))
    f = lambda: T.batch_norm(x, g, b, stats, mode)  # noqa: E731
    proj = _proj(f(), rng)
    assert gradcheck(lambda: T.tensor_sum(T.mul(f(), proj)), [x, g, b]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(3, 6), st.integers(1, 2), st.integers(0, 1),
       st.integers(0, 2**31 - 1))
def test_conv2d_gradient_property(b, cin, hw, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((b, cin, hw, hw)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, cin, 3, 3)), requires_grad=True)
    f = lambda: T.conv2d(x, w, None, stride, pad)  # noqa: E731
    proj = _proj(f(), rng)
    assert gradcheck(lambda: T.tensor_sum(T.mul(f(), proj)), [x, w]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4), st.integers(0, 2**31 - 1))
def test_concat_slice_roundtrip_property(channels, seed):
    rng = np.random.default_rng(seed)
    parts = [rng.standard_normal((2, c, 3, 3)) for c in channels]
    joined = T.concat([Tensor(p) for p in parts], axis=1)
    start = 0
    for p in parts:
        np.testing.assert_array_equal(joined[:, start:start + p.shape[1]].data, p)
        start += p.shape[1]
