import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrasnn import tensor as tc
from mrasnn.tensor import Tensor

from _oracles import conv1d_direct, gradcheck


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def leaf(a):
    return Tensor(a, requires_grad=True)


# ---------------------------------------------------------------- conv1d


def test_conv1d_box_filter():
    x = Tensor(np.array([1, 2, 3, 4.0]).reshape(1, 1, 4))
    w = Tensor(np.ones((1, 1, 3)))
    out = tc.conv1d(x, w, stride=1, padding=1)
    np.testing.assert_allclose(out.data.ravel(), [3, 6, 9, 7])


def test_conv1d_zero_weight_annihilates(rng):
    x = Tensor(rng.normal(size=(2, 3, 10)))
    out = tc.conv1d(x, Tensor(np.zeros((4, 3, 3))), padding=1)
    assert out.shape == (2, 4, 10)
    assert not out.data.any()


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 2, 5), (3, 1, 4), (1, 3, 7)])
def test_conv1d_matches_direct_loops(rng, stride, pad, k):
    with tc.precision(np.float64):
        x = rng.normal(size=(2, 3, 17))
        w = rng.normal(size=(4, 3, k))
        b = rng.normal(size=4)
        out = tc.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, conv1d_direct(x, w, b, stride, pad), atol=1e-12)


def test_conv1d_gradcheck(rng):
    with tc.precision(np.float64):
        x = leaf(rng.normal(size=(2, 3, 16)))
        w = leaf(rng.normal(size=(4, 3, 5)))
        b = leaf(rng.normal(size=4))
        r = rng.normal(size=(2, 4, 8))
        err = gradcheck(lambda: tc.sum_all(tc.mul(tc.conv1d(x, w, b, 2, 2), r)), [x, w, b])
    assert err < 1e-4


def test_conv1d_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 5, 9))
    w = np.eye(5)[:, :, None]
    out = tc.conv1d(Tensor(x), Tensor(w), stride=1, padding=0)
    np.testing.assert_allclose(out.data, x.astype(np.float32), rtol=1e-6)


def test_conv1d_errors():
    with pytest.raises(tc.DimensionError, match="channel"):
        tc.conv1d(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((1, 3, 3))))
    with pytest.raises(tc.DimensionError, match="length"):
        tc.conv1d(Tensor(np.zeros((1, 1, 2))), Tensor(np.zeros((1, 1, 5))))


# ---------------------------------------------------------------- batch norm


def test_batchnorm_already_normalised():
    x = Tensor(np.array([-1.0, 1.0]).reshape(1, 1, 2))
    out = tc.batchnorm1d(x, Tensor(np.ones(1)), Tensor(np.zeros(1)), None, True, eps=0.0)
    np.testing.assert_allclose(out.data.ravel(), [-1, 1])


def test_batchnorm_gamma_zero_gives_beta(rng):
    x = Tensor(rng.normal(size=(3, 2, 5)))
    beta = np.array([0.5, -2.0])
    out = tc.batchnorm1d(x, Tensor(np.zeros(2)), Tensor(beta), None, True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None], (3, 2, 5)))


def test_batchnorm_train_statistics(rng):
    with tc.precision(np.float64):
        x = Tensor(rng.normal(3.0, 2.0, size=(4, 8, 32)))
        out = tc.batchnorm1d(x, Tensor(np.ones(8)), Tensor(np.zeros(8)), None, True, eps=0.0)
    mu = out.data.mean(axis=(0, 2))
    var = out.data.var(axis=(0, 2))
    assert np.abs(mu).max() < 1e-6
    assert np.abs(var - 1).max() < 1e-5


def test_batchnorm_running_stats_and_eval(rng):
    run = tc.RunningStats(3)
    x = rng.normal(2.0, 1.0, size=(4, 3, 10))
    tc.batchnorm1d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), run, True, momentum=0.1)
    np.testing.assert_allclose(run.mean, 0.1 * x.mean(axis=(0, 2)), rtol=1e-5)
    out = tc.batchnorm1d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), run, False)
    expected = (x - run.mean[None, :, None]) / np.sqrt(run.var[None, :, None] + 1e-5)
    np.testing.assert_allclose(out.data, expected, rtol=1e-4)


@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradcheck(rng, training):
    with tc.precision(np.float64):
        run = tc.RunningStats(3)
        run.mean[:] = rng.normal(size=3)
        run.var[:] = rng.uniform(0.5, 2, size=3)
        x = leaf(rng.normal(size=(2, 3, 6)))
        g = leaf(rng.uniform(0.5, 1.5, size=3))
        b = leaf(rng.normal(size=3))
        r = rng.normal(size=(2, 3, 6))
        err = gradcheck(lambda: tc.sum_all(tc.mul(tc.batchnorm1d(x, g, b, None if training else run, training), r)),
                        [x, g, b])
    assert err < 1e-4


def test_batchnorm_degenerate_batch():
    with pytest.raises(tc.DegenerateBatchError):
        tc.batchnorm1d(Tensor(np.zeros((1, 2, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)), None, True)


# ---------------------------------------------------------------- pooling / fc


def test_avgpool_values():
    out = tc.avgpool1d(Tensor(np.array([1, 2, 3, 4.0]).reshape(1, 1, 4)), 2, 2)
    np.testing.assert_allclose(out.data.ravel(), [1.5, 3.5])


def test_avgpool_constant():
    out = tc.avgpool1d(Tensor(np.full((2, 3, 8), 0.7)), 2, 2)
    np.testing.assert_allclose(out.data, 0.7, rtol=1e-6)


def test_avgpool_gradcheck(rng):
    with tc.precision(np.float64):
        x = leaf(rng.normal(size=(2, 4, 64)))
        r = rng.normal(size=(2, 4, 32))
        assert gradcheck(lambda: tc.sum_all(tc.mul(tc.avgpool1d(x, 2, 2), r)), [x]) < 1e-4


def test_avgpool_kernel_too_large():
    with pytest.raises(tc.DimensionError):
        tc.avgpool1d(Tensor(np.zeros((1, 1, 3))), 4, 1)


def test_fc_identity_and_bias(rng):
    x = rng.normal(size=(3, 4))
    out = tc.fully_connected(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, x.astype(np.float32))
    bias = np.arange(5.0)
    out = tc.fully_connected(Tensor(np.zeros((2, 4))), Tensor(rng.normal(size=(5, 4))), Tensor(bias))
    np.testing.assert_allclose(out.data, np.tile(bias, (2, 1)))


def test_fc_gradcheck(rng):
    with tc.precision(np.float64):
        x, w, b = leaf(rng.normal(size=(3, 16))), leaf(rng.normal(size=(5, 16))), leaf(rng.normal(size=5))
        r = rng.normal(size=(3, 5))
        assert gradcheck(lambda: tc.sum_all(tc.mul(tc.fully_connected(x, w, b), r)), [x, w, b]) < 1e-4


def test_fc_mismatch():
    with pytest.raises(tc.DimensionError):
        tc.fully_connected(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


# ---------------------------------------------------------------- heaviside


@pytest.mark.parametrize(
    "h,spike,local",
    [(1.3, 1, 1.0), (1.51, 1, 0.0), (0.2, 0, 0.0), (1.0, 1, 1.0), (1.5, 1, 0.0), (0.5, 0, 0.0)],
)
def test_heaviside_surrogate_points(h, spike, local):
    with tc.precision(np.float64):
        x = leaf(np.array([h]))
        s = tc.heaviside_surrogate(x, 1.0, 1.0)
        s.backward(np.ones(1))
    assert s.data[0] == spike
    assert x.grad[0] == local


def test_heaviside_width_scales_height():
    with tc.precision(np.float64):
        x = leaf(np.array([1.1]))
        tc.heaviside_surrogate(x, 1.0, 0.5).backward(np.ones(1))
    assert x.grad[0] == 2.0


def test_heaviside_rejects_nonpositive_width():
    with pytest.raises(tc.ParameterError):
        tc.heaviside_surrogate(Tensor(np.zeros(2)), 1.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=50))
def test_heaviside_output_is_binary(values):
    s = tc.heaviside_surrogate(Tensor(np.array(values)), 1.0, 1.0)
    assert set(np.unique(s.data)) <= {0.0, 1.0}


# ---------------------------------------------------------------- elementwise / structure


def test_sigmoid_zero_and_extremes():
    out = tc.sigmoid(Tensor(np.array([0.0, -1e4, 1e4])))
    np.testing.assert_allclose(out.data, [0.5, 0.0, 1.0])
    assert np.isfinite(out.data).all()


def test_concat_split_round_trip(rng):
    parts = [Tensor(rng.normal(size=(2, 64, 5))) for _ in range(3)]
    cat = tc.concat_channels(parts)
    assert cat.shape == (2, 192, 5)
    for p, q in zip(parts, tc.split_channels(cat, 3)):
        np.testing.assert_array_equal(p.data, q.data)


def test_mean_over_spatial():
    out = tc.mean(Tensor(np.ones((2, 3, 4))), axis=2)
    assert out.shape == (2, 3, 1)
    np.testing.assert_array_equal(out.data, 1.0)


def test_broadcast_error():
    with pytest.raises(tc.DimensionError):
        tc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))


def test_elementwise_composition_gradcheck(rng):
    with tc.precision(np.float64):
        a = leaf(rng.normal(size=(2, 6, 1)))
        b = leaf(rng.normal(size=(2, 1, 5)))
        c = leaf(rng.normal(size=(2, 6, 5)))

        def build():
            w = tc.sigmoid(tc.mul(a, b))  # broadcast [b,c,1] x [b,1,s]
            y = tc.sub(tc.mul(w, c), tc.scale(c, 0.3))
            y = tc.add(y, tc.transpose_last(tc.transpose_last(y)))
            m = tc.mean(y, axis=(1, 2), keepdims=False)
            parts = tc.split_channels(tc.concat_channels([y, c]), 2)
            s = tc.stack([parts[0], parts[1]])
            return tc.add(tc.sum_all(tc.mul(s, s)), tc.sum_all(tc.reshape(m, (2, 1))))

        assert gradcheck(build, [a, b, c]) < 1e-4


def test_fan_out_accumulates_both_contributions():
    x = leaf(np.array([3.0]))
    y = tc.add(tc.mul(x, x), tc.scale(x, 2.0))  # x used by two consumers
    y.backward(np.ones(1))
    assert x.grad[0] == pytest.approx(2 * 3.0 + 2.0)


def test_tape_records_are_topological():
    x = leaf(np.ones(3))
    y = tc.scale(x, 2.0)
    z = tc.add(y, y)
    tape = tc.Tape.from_root(z)
    pos = {id(n): i for i, n in enumerate(tape.records)}
    for node in tape.records:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    assert len(tape) == 3


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with tc.no_grad():
        y = tc.scale(x, 3.0)
    assert not y.requires_grad and y._parents == ()
