"""Forward semantics of the tensor operators against independent oracles.

The oracles here are deliberately naive: direct summation loops for conv
and matmul, window means for pooling, explicit log-sum-exp for the loss.
They share no code with the operators they check.
"""

import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import upanets.tensor as T
from upanets.errors import ConfigError, DimensionError, InputError, NumericError, StateError
from upanets.tensor import RunningStats, Tensor


def naive_conv2d(x, k, bias=None, stride=1, pad=0, groups=1):
    """Direct-summation convolution oracle (nested loops, no im2col)."""
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = k.shape
    xp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cout_g = cout // groups
    out = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for co in range(cout):
            ci0 = (co // cout_g) * cin_g
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(cin_g):
                        for a in range(kh):
                            for bb in range(kw):
                                acc += xp[b, ci0 + ci, i * stride + a, j * stride + bb] \
                                    * k[co, ci, a, bb]
                    out[b, co, i, j] = acc + (bias[co] if bias is not None else 0.0)
    return out


def naive_matmul(a, b):
    m, k = a.shape
    k2, p = b.shape
    out = np.zeros((m, p), dtype=a.dtype)
    for i in range(m):
        for j in range(p):
            for kk in range(k):
                out[i, j] += a[i, kk] * b[kk, j]
    return out


def naive_avgpool(x, k, stride):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i in range(ho):
        for j in range(wo):
            out[:, :, i, j] = x[:, :, i * stride:i * stride + k,
                                j * stride:j * stride + k].mean(axis=(2, 3))
    return out


def naive_crossentropy(logits, labels):
    total = 0.0
    for row, label in zip(logits, labels):
        total += np.log(np.exp(row).sum()) - row[label]
    return total / len(labels)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_ones_overlap_counting():
    # all-ones 3x3 input and kernel with pad 1: each output counts the
    # overlap of the kernel with the image
    x = Tensor(np.ones((1, 1, 3, 3)))
    k = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, k, pad=1).data[0, 0]
    assert out[1, 1] == 9.0
    for corner in (out[0, 0], out[0, 2], out[2, 0], out[2, 2]):
        assert corner == 4.0


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 6, 6)).astype(np.float32)
    k = np.zeros((3, 3, 3, 3), dtype=np.float32)
    for c in range(3):
        k[c, c, 1, 1] = 1.0  # a single 1 at the spatial center
    out = T.conv2d(Tensor(x), Tensor(k), pad=1)
    npt.assert_array_equal(out.data, x)


def test_conv2d_matches_naive_oracle():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 5, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), pad=1).data
    npt.assert_allclose(out, naive_conv2d(x, k, pad=1), atol=1e-12)


@pytest.mark.parametrize("stride,pad,h", [(1, 0, 6), (2, 1, 5), (1, 2, 6)])
def test_conv2d_stride_pad_against_oracle(stride, pad, h):
    # extents chosen so (h + 2*pad - 3) divides the stride exactly
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 2, h, h))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = T.conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad).data
    npt.assert_allclose(out, naive_conv2d(x, k, b, stride=stride, pad=pad), atol=1e-12)


@pytest.mark.parametrize("groups", [1, 2, 4])
def test_grouped_conv_equals_independent_convs(groups):
    rng = np.random.default_rng(3)
    cin, cout = 8, 4
    x = rng.standard_normal((2, cin, 5, 5))
    k = rng.standard_normal((cout, cin // groups, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(k), pad=1, groups=groups).data
    # brute force: run each group as its own ungrouped convolution
    cin_g, cout_g = cin // groups, cout // groups
    pieces = [
        T.conv2d(Tensor(x[:, g * cin_g:(g + 1) * cin_g]),
                 Tensor(k[g * cout_g:(g + 1) * cout_g]), pad=1).data
        for g in range(groups)
    ]
    npt.assert_array_equal(out, np.concatenate(pieces, axis=1))


def test_conv2d_forward_deterministic():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    k = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    a = T.conv2d(Tensor(x), Tensor(k), pad=1).data
    b = T.conv2d(Tensor(x), Tensor(k), pad=1).data
    npt.assert_array_equal(a, b)


def test_conv2d_errors():
    x = Tensor(np.zeros((1, 3, 5, 5)))
    with pytest.raises(DimensionError):
        T.conv2d(x, Tensor(np.zeros((4, 2, 3, 3))))  # channel mismatch
    with pytest.raises(ConfigError):
        T.conv2d(x, Tensor(np.zeros((4, 3, 2, 2))), stride=2)  # (5-2)%2 != 0
    with pytest.raises(DimensionError):
        T.conv2d(x, Tensor(np.zeros((4, 3, 7, 7))))  # kernel exceeds input
    with pytest.raises(ConfigError):
        T.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), groups=2)  # 3 % 2 != 0


# ---------------------------------------------------------------------------
# avgpool2d


def test_avgpool_basic_mean():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = T.avgpool2d(x, 2, 2)
    assert out.shape == (1, 1, 1, 1)
    assert out.data[0, 0, 0, 0] == 2.5


def test_avgpool_constant_input():
    x = Tensor(np.full((2, 3, 8, 8), 1.25))
    out = T.avgpool2d(x, 2, 2)
    assert out.shape == (2, 3, 4, 4)
    npt.assert_array_equal(out.data, np.full((2, 3, 4, 4), 1.25))


@pytest.mark.parametrize("k,stride", [(2, 2), (2, 1), (3, 1), (4, 4)])
def test_avgpool_matches_window_oracle(k, stride):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 2, 4, 4))
    if (4 - k) % stride:
        pytest.skip("not a tiling config")
    out = T.avgpool2d(Tensor(x), k, stride).data
    npt.assert_allclose(out, naive_avgpool(x, k, stride), atol=1e-12)


def test_avgpool_indivisible_is_config_error():
    with pytest.raises(ConfigError):
        T.avgpool2d(Tensor(np.zeros((1, 1, 5, 5))), 2, 2)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((3, 4))
    out = T.matmul(Tensor(a), Tensor(np.eye(4)))
    npt.assert_allclose(out.data, a, atol=1e-12)


def test_matmul_hand_case():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    b = Tensor(np.array([[1.0], [1.0]]))
    npt.assert_array_equal(T.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    npt.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)


def test_matmul_batched_left_factor():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((5, 3, 4))
    b = rng.standard_normal((4, 2))
    out = T.matmul(Tensor(a), Tensor(b)).data
    for i in range(5):
        npt.assert_allclose(out[i], naive_matmul(a[i], b), atol=1e-12)


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# ---------------------------------------------------------------------------
# batchnorm2d


def _bn_params(c, dtype=np.float64):
    gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
    beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    return gamma, beta, RunningStats(c, dtype=dtype)


def test_batchnorm_constant_input_is_zero():
    gamma, beta, stats = _bn_params(3)
    x = Tensor(np.broadcast_to(np.array([1.0, -2.0, 7.0])[None, :, None, None],
                               (2, 3, 4, 4)).copy())
    out = T.batchnorm2d(x, gamma, beta, stats, "train")
    npt.assert_allclose(out.data, 0.0, atol=1e-6)


def test_batchnorm_zero_gamma_gives_beta():
    gamma = Tensor(np.zeros(2), requires_grad=True)
    beta = Tensor(np.array([0.5, -1.5]), requires_grad=True)
    stats = RunningStats(2, dtype=np.float64)
    x = Tensor(np.random.default_rng(9).standard_normal((3, 2, 4, 4)))
    out = T.batchnorm2d(x, gamma, beta, stats, "train")
    npt.assert_allclose(out.data, np.broadcast_to(beta.data[None, :, None, None], out.shape),
                        atol=1e-12)


def test_batchnorm_train_normalizes_moments():
    gamma, beta, stats = _bn_params(4)
    x = Tensor(np.random.default_rng(10).standard_normal((8, 4, 6, 6)) * 3.0 + 1.0)
    out = T.batchnorm2d(x, gamma, beta, stats, "train").data
    npt.assert_allclose(out.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
    npt.assert_allclose(out.var(axis=(0, 2, 3)), 1.0, atol=1e-4)


def test_batchnorm_eval_before_train_is_state_error():
    gamma, beta, stats = _bn_params(2)
    with pytest.raises(StateError):
        T.batchnorm2d(Tensor(np.zeros((1, 2, 2, 2))), gamma, beta, stats, "eval")


def test_batchnorm_eval_uses_running_stats():
    gamma, beta, stats = _bn_params(2)
    rng = np.random.default_rng(11)
    x = rng.standard_normal((16, 2, 4, 4)) * 2.0 + 3.0
    T.batchnorm2d(Tensor(x), gamma, beta, stats, "train")
    y = rng.standard_normal((4, 2, 4, 4))
    out = T.batchnorm2d(Tensor(y), gamma, beta, stats, "eval").data
    expected = (y - stats.mean[None, :, None, None]) / np.sqrt(stats.var + 1e-5)[None, :, None, None]
    npt.assert_allclose(out, expected, atol=1e-12)


# ---------------------------------------------------------------------------
# layernorm


def test_layernorm_moments_over_last_extent():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((1, 2, 3, 4))
    gamma = Tensor(np.ones(4), requires_grad=True)
    beta = Tensor(np.zeros(4), requires_grad=True)
    out = T.layernorm(Tensor(x), gamma, beta, (4,)).data
    npt.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
    npt.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)


def test_layernorm_zero_gamma_gives_beta():
    x = Tensor(np.random.default_rng(13).standard_normal((2, 5)))
    gamma = Tensor(np.zeros(5), requires_grad=True)
    beta = Tensor(np.full(5, 5.0), requires_grad=True)
    npt.assert_allclose(T.layernorm(x, gamma, beta, (5,)).data, 5.0, atol=1e-12)


def test_layernorm_idempotent_on_standardized_input():
    rng = np.random.default_rng(14)
    v = rng.standard_normal(16)
    v = (v - v.mean()) / v.std()  # biased std, matching the op's variance
    gamma = Tensor(np.ones(16))
    beta = Tensor(np.zeros(16))
    out = T.layernorm(Tensor(v[None]), gamma, beta, (16,), eps=0.0).data[0]
    npt.assert_allclose(out, v, atol=1e-6)


def test_layernorm_extent_mismatch():
    with pytest.raises(DimensionError):
        T.layernorm(Tensor(np.zeros((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)), (4,))


# ---------------------------------------------------------------------------
# relu / softmax cross-entropy


def test_relu():
    x = Tensor(np.array([-2.0, 0.0, 3.5]))
    npt.assert_array_equal(T.relu(x).data, [0.0, 0.0, 3.5])


def test_crossentropy_uniform_logits():
    loss = T.softmax_crossentropy(Tensor(np.zeros((4, 10))), np.zeros(4, dtype=np.int64))
    npt.assert_allclose(float(loss.data), np.log(10.0), atol=1e-7)


def test_crossentropy_vanishes_with_margin():
    losses = []
    for margin in (5.0, 10.0, 20.0):
        logits = np.zeros((1, 10))
        logits[0, 3] = margin
        losses.append(float(T.softmax_crossentropy(Tensor(logits), np.array([3])).data))
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-6


def test_crossentropy_matches_logsumexp_oracle():
    rng = np.random.default_rng(15)
    logits = rng.standard_normal((4, 10))
    labels = rng.integers(0, 10, 4)
    loss = float(T.softmax_crossentropy(Tensor(logits), labels).data)
    npt.assert_allclose(loss, naive_crossentropy(logits, labels), atol=1e-10)


def test_crossentropy_label_out_of_range():
    with pytest.raises(InputError):
        T.softmax_crossentropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


# ---------------------------------------------------------------------------
# concat_channels


def test_concat_single_part_identity():
    x = np.random.default_rng(16).standard_normal((2, 3, 4, 4))
    npt.assert_array_equal(T.concat_channels([Tensor(x)]).data, x)


def test_concat_order_and_slicing():
    rng = np.random.default_rng(17)
    a = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal((2, 3, 3, 3))
    out = T.concat_channels([Tensor(a), Tensor(b)]).data
    assert out.shape == (2, 5, 3, 3)
    npt.assert_array_equal(out[:, :2], a)
    npt.assert_array_equal(out[:, 2:], b)


def test_concat_spatial_mismatch():
    with pytest.raises(DimensionError):
        T.concat_channels([Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 5, 4)))])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
def test_concat_then_slice_recovers_parts(c1, c2, c3):
    rng = np.random.default_rng(c1 * 100 + c2 * 10 + c3)
    parts = [rng.standard_normal((2, c, 3, 3)) for c in (c1, c2, c3)]
    out = T.concat_channels([Tensor(p) for p in parts]).data
    lo = 0
    for p in parts:
        npt.assert_array_equal(out[:, lo:lo + p.shape[1]], p)
        lo += p.shape[1]


# ---------------------------------------------------------------------------
# finiteness contract


def test_debug_mode_rejects_nonfinite_with_op_identity():
    big = Tensor(np.full(4, 1e300))
    with T.debug_finite():
        with pytest.raises(NumericError, match="mul"):
            T.mul(T.mul(big, 1e300), 1e300)


def test_release_mode_does_not_check():
    big = Tensor(np.full(4, 1e300))
    out = T.mul(T.mul(big, 1e300), 1e300)
    assert np.isinf(out.data).all()


@settings(max_examples=20, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6))
def test_avgpool_mean_bounded_by_extremes(h2, w2):
    rng = np.random.default_rng(h2 * 10 + w2)
    x = rng.standard_normal((1, 1, 2 * h2, 2 * w2))
    out = T.avgpool2d(Tensor(x), 2, 2).data
    assert out.min() >= x.min() - 1e-9
    assert out.max() <= x.max() + 1e-9
