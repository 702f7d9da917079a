import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.lib.stride_tricks import sliding_window_view

from unrolled_rpca import functional as F
from unrolled_rpca.tensor import ContractViolation, Tensor

from conftest import fd_grad


def conv_oracle(x, w, b, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, w.shape[2:], axis=(2, 3))[:, :, ::stride, ::stride]
    return np.einsum("ncyxij,ocij->noyx", win, w) + b[None, :, None, None]


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(1, 3),
    cin=st.integers(1, 4),
    cout=st.integers(1, 4),
    h=st.integers(3, 9),
    w=st.integers(3, 9),
    k=st.sampled_from([1, 3, 5]),
    seed=st.integers(0, 1000),
)
def test_conv_forward_matches_einsum_oracle(n, cin, cout, h, w, k, seed):
    pad = (k - 1) // 2
    rng = np.random.default_rng(seed)
    x, wt, b = rng.standard_normal((n, cin, h, w)), rng.standard_normal((cout, cin, k, k)), rng.standard_normal(cout)
    out = F.conv2d(Tensor(x), Tensor(wt), Tensor(b), padding=pad)
    np.testing.assert_allclose(out.data, conv_oracle(x, wt, b, 1, pad), atol=1e-10)


@pytest.mark.parametrize("cin,cout,stride", [(3, 2, 1), (2, 5, 1), (2, 3, 2)])
def test_conv_gradients_match_fd(cin, cout, stride, rng):
    x = rng.standard_normal((2, cin, 7, 7))
    wt = rng.standard_normal((cout, cin, 3, 3))
    b = rng.standard_normal(cout)
    probe = rng.standard_normal(conv_oracle(x, wt, b, stride, 1).shape)
    tx, tw, tb = (Tensor(v, requires_grad=True) for v in (x, wt, b))
    (F.conv2d(tx, tw, tb, stride=stride, padding=1) * Tensor(probe)).sum().backward()
    np.testing.assert_allclose(tx.grad, fd_grad(lambda z: np.sum(conv_oracle(z, wt, b, stride, 1) * probe), x), atol=1e-6)
    np.testing.assert_allclose(tw.grad, fd_grad(lambda z: np.sum(conv_oracle(x, z, b, stride, 1) * probe), wt), atol=1e-6)
    np.testing.assert_allclose(tb.grad, probe.sum(axis=(0, 2, 3)), atol=1e-8)


def test_conv_unbatched_input():
    x = np.arange(16.0).reshape(1, 4, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 2.0
    out = F.conv2d(Tensor(x), Tensor(w), padding=1)
    assert out.shape == (1, 4, 4)
    np.testing.assert_allclose(out.data, 2 * x)


@pytest.mark.parametrize(
    "xshape,wshape,kw",
    [
        ((1, 2, 6, 6), (1, 2, 2, 2), {}),  # even kernel
        ((1, 2, 6, 6), (1, 3, 3, 3), {}),  # channel mismatch
        ((1, 1, 6, 6), (1, 1, 3, 3), {"stride": 2, "padding": 1}),  # non-integral output
        ((6, 6), (1, 1, 3, 3), {}),  # rank
    ],
)
def test_conv_contract_violations(xshape, wshape, kw):
    with pytest.raises(ContractViolation):
        F.conv2d(Tensor(np.zeros(xshape)), Tensor(np.zeros(wshape)), **kw)


def test_conv_bias_shape_checked():
    with pytest.raises(ContractViolation):
        F.conv2d(Tensor(np.zeros((1, 1, 5, 5))), Tensor(np.zeros((2, 1, 3, 3))), Tensor(np.zeros(3)))


def test_avg_pool2_values_and_grad(rng):
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = F.avg_pool2(Tensor(x))
    np.testing.assert_allclose(out.data[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    t = Tensor(rng.standard_normal((2, 3, 4, 6)), requires_grad=True)
    F.avg_pool2(t).sum().backward()
    np.testing.assert_allclose(t.grad, 0.25)
    with pytest.raises(ContractViolation):
        F.avg_pool2(Tensor(np.zeros((1, 5, 4))))


def test_pixel_shuffle_layout():
    x = Tensor(np.arange(4.0).reshape(4, 1, 1))
    np.testing.assert_array_equal(F.pixel_shuffle(x, 2).data, [[[0, 1], [2, 3]]])


@settings(max_examples=20, deadline=None)
@given(c=st.integers(1, 3), h=st.integers(1, 5), w=st.integers(1, 5), r=st.sampled_from([1, 2, 3]))
def test_pixel_shuffle_unshuffle_round_trip(c, h, w, r):
    x = np.random.default_rng(0).standard_normal((2, c * r * r, h, w))
    y = F.pixel_shuffle(Tensor(x), r).data
    assert y.shape == (2, c, r * h, r * w)
    np.testing.assert_array_equal(F.pixel_unshuffle(y, r), x)


def test_pixel_shuffle_grad_is_inverse_permutation(rng):
    x = Tensor(rng.standard_normal((3, 8, 2, 3)), requires_grad=True)
    probe = rng.standard_normal((3, 2, 4, 6))
    (F.pixel_shuffle(x, 2) * Tensor(probe)).sum().backward()
    np.testing.assert_allclose(x.grad, F.pixel_unshuffle(probe, 2))


def test_pixel_shuffle_channel_check():
    with pytest.raises(ContractViolation):
        F.pixel_shuffle(Tensor(np.zeros((3, 2, 2))), 2)
