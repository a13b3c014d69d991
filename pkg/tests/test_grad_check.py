"""Reverse-mode gradients of every operator against central finite
differences, all in double precision."""

import numpy as np
import numpy.testing as npt
import pytest

import upanets.tensor as T
from upanets.arch import UpaBlock, UpaBlockConfig
from upanets.errors import ConfigError, DimensionError, NumericError
from upanets.tensor import RunningStats, Tensor, grad_check

TOL = 1e-4
rng = np.random.default_rng(42)


def test_quadratic_report():
    report = grad_check(lambda x: T.sum_all(T.mul(x, x)), [np.array([1.0, 2.0])])
    assert report.max_rel_error < 1e-7
    assert report.op_name == "<lambda>"
    assert report.max_rel_error >= 0


def test_quadratic_analytic_values():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.sum_all(T.mul(x, x)).backward()
    npt.assert_allclose(x.grad, [2.0, 4.0], atol=1e-12)


def test_add_mul_broadcast():
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal(4)

    def f(av, bv):
        return T.sum_all(T.mul(T.add(av, bv), T.add(av, bv)))

    assert grad_check(f, [a, b]).max_rel_error < TOL


def test_matmul():
    a = rng.standard_normal((2, 3, 4))
    b = rng.standard_normal((4, 2))

    def f(av, bv):
        prod = T.matmul(av, bv)
        return T.sum_all(T.mul(prod, prod))

    assert grad_check(f, [a, b]).max_rel_error < TOL


def test_reshape_transpose():
    a = rng.standard_normal((2, 3, 4))

    def f(av):
        t = T.transpose(T.reshape(av, (2, 12)), (1, 0))
        return T.sum_all(T.mul(t, t))

    assert grad_check(f, [a]).max_rel_error < TOL


def test_relu():
    a = rng.standard_normal((5, 5)) + 0.05  # keep clear of the kink

    def f(av):
        r = T.relu(av)
        return T.sum_all(T.mul(r, r))

    assert grad_check(f, [a]).max_rel_error < TOL


def test_conv2d_spec_case():
    x = rng.standard_normal((1, 2, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)

    def f(xv, kv, bv):
        out = T.conv2d(xv, kv, bv, stride=1, pad=1)
        return T.sum_all(T.mul(out, out))

    assert grad_check(f, [x, k, b]).max_rel_error < TOL


@pytest.mark.parametrize("groups,stride", [(2, 1), (4, 1), (1, 2)])
def test_conv2d_grouped_strided(groups, stride):
    x = rng.standard_normal((2, 4, 5, 5))
    k = rng.standard_normal((4, 4 // groups, 3, 3))

    def f(xv, kv):
        out = T.conv2d(xv, kv, stride=stride, pad=1 if stride == 1 else 0, groups=groups)
        return T.sum_all(T.mul(out, out))

    assert grad_check(f, [x, k]).max_rel_error < TOL


@pytest.mark.parametrize("k,stride", [(2, 2), (2, 1)])
def test_avgpool(k, stride):
    x = rng.standard_normal((1, 2, 4, 4))

    def f(xv):
        out = T.avgpool2d(xv, k, stride)
        return T.sum_all(T.mul(out, out))

    assert grad_check(f, [x]).max_rel_error < TOL


def test_batchnorm_train_and_eval():
    x = rng.standard_normal((4, 3, 4, 4))
    gamma = rng.standard_normal(3) + 1.5
    beta = rng.standard_normal(3)
    stats = RunningStats(3, dtype=np.float64)

    def f_train(xv, gv, bv):
        out = T.batchnorm2d(xv, gv, bv, stats, "train")
        return T.sum_all(T.mul(out, out))

    assert grad_check(f_train, [x, gamma, beta]).max_rel_error < TOL

    def f_eval(xv, gv, bv):
        out = T.batchnorm2d(xv, gv, bv, stats, "eval")
        return T.sum_all(T.mul(out, out))

    assert grad_check(f_eval, [x, gamma, beta]).max_rel_error < TOL


def test_layernorm():
    x = rng.standard_normal((2, 3, 4))
    gamma = rng.standard_normal((3, 4)) + 1.5
    beta = rng.standard_normal((3, 4))

    def f(xv, gv, bv):
        out = T.layernorm(xv, gv, bv, (3, 4))
        return T.sum_all(T.mul(out, out))

    assert grad_check(f, [x, gamma, beta]).max_rel_error < TOL


def test_softmax_crossentropy():
    logits = rng.standard_normal((6, 5))
    labels = rng.integers(0, 5, 6)

    def f(lv):
        return T.softmax_crossentropy(lv, labels)

    assert grad_check(f, [logits]).max_rel_error < TOL


def test_concat_gradient_splits_back():
    a = rng.standard_normal((2, 2, 3, 3))
    b = rng.standard_normal((2, 3, 3, 3))
    w = rng.standard_normal((2, 5, 3, 3))

    def f(av, bv):
        cat = T.concat_channels([av, bv])
        return T.sum_all(T.mul(cat, Tensor(w)))

    report = grad_check(f, [a, b])
    assert report.max_rel_error < TOL
    # the analytic split is exact: grad of each part equals its slice of w
    at = Tensor(a.copy(), requires_grad=True)
    bt = Tensor(b.copy(), requires_grad=True)
    T.sum_all(T.mul(T.concat_channels([at, bt]), Tensor(w))).backward()
    npt.assert_array_equal(at.grad, w[:, :2])
    npt.assert_array_equal(bt.grad, w[:, 2:])


def test_spatial_mean():
    x = rng.standard_normal((2, 3, 4, 4))

    def f(xv):
        out = T.spatial_mean(xv)
        return T.sum_all(T.mul(out, out))

    assert grad_check(f, [x]).max_rel_error < TOL


def test_full_upa_block_spec_case():
    # stride-1 block with matching widths on a 2x8x8x8 input
    block = UpaBlock(UpaBlockConfig(8, 8, stride=1), (8, 8),
                     np.random.default_rng(1), dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 8, 8, 8)), requires_grad=True)
    labels = np.array([2, 5])
    params = [p.tensor for p in block.named_parameters()]

    def block_loss(*tensors):
        out = block.forward(x, "train")
        return T.softmax_crossentropy(T.spatial_mean(out), labels)

    report = grad_check(block_loss, params + [x], samples_per_input=12)
    assert report.max_rel_error < TOL


def test_stride2_block():
    block = UpaBlock(UpaBlockConfig(6, 4, stride=2), (8, 8),
                     np.random.default_rng(2), dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 6, 8, 8)), requires_grad=True)
    labels = np.array([1, 3])
    params = [p.tensor for p in block.named_parameters()]

    def block_loss(*tensors):
        out = block.forward(x, "train")
        return T.softmax_crossentropy(T.spatial_mean(out), labels)

    assert grad_check(block_loss, params + [x], samples_per_input=10).max_rel_error < TOL


def test_grad_check_rejects_nonscalar():
    with pytest.raises(DimensionError):
        grad_check(lambda x: T.mul(x, x), [np.ones(3)])


def test_grad_check_rejects_float32():
    t = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with pytest.raises(ConfigError):
        grad_check(lambda x: T.sum_all(x), [t])


def test_grad_check_raises_on_nonfinite_with_op_name():
    def explode(x):
        return T.sum_all(T.mul(T.mul(x, 1e300), 1e300))

    with pytest.raises(NumericError, match="mul"):
        grad_check(explode, [np.full(3, 1e300)])
