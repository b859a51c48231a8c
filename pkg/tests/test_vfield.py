import numpy as np
import pytest

from rfsep import tensor as T
from rfsep.flow import euler_sample, rfm_loss
from rfsep.nn import param_count
from rfsep.optim import AdamState, adam_step
from rfsep.tensor import Tensor
from rfsep.vfield import VFieldConfig, VFieldNet

SMALL = VFieldConfig(widths=(8, 16, 32), mlp_hidden=32)


def _inputs(b=2, h=25, w=16, seed=0):
    z_in = T.randn((b, 8, h, w), seed)
    q = T.randn((b, 128), seed + 1)
    return z_in, np.linspace(0, 1, b), q


def _train(net, steps, seed=0, lr=1e-3, b=4):
    params = net.parameters()
    state = AdamState.for_params(params)
    for k in range(steps):
        z1 = T.randn((b, 4, 25, 16), 100 + k).data
        zm = T.randn((b, 4, 25, 16), 200 + k).data
        q = Tensor(T.randn((b, 128), seed).data)
        with T.Tape() as tape:
            loss, _, _ = rfm_loss(net, z1, q, zm, 1e-5, seed * 1000 + k)
        tape.backward(loss, wrt=params)
        adam_step(params, [p.grad for p in params], state, lr)
    return net


def test_output_shape_and_zero_init():
    net = VFieldNet()
    z_in, t, q = _inputs()
    out = net(z_in, t, q)
    assert out.shape == (2, 4, 25, 16)
    assert not out.data.any()


@pytest.mark.parametrize("h, w", [(25, 16), (7, 5), (8, 8), (1, 1)])
def test_odd_spatial_sizes_round_trip(h, w):
    net = VFieldNet(SMALL)
    z_in, t, q = _inputs(1, h, w)
    assert net(z_in, t, q).shape == (1, 4, h, w)


def test_shape_errors():
    net = VFieldNet(SMALL)
    z_in, t, q = _inputs()
    with pytest.raises(ValueError):
        net(T.randn((2, 4, 25, 16), 0), t, q)
    with pytest.raises(ValueError):
        net(z_in, t, T.randn((2, 64), 0))


def test_single_query_broadcasts_over_batch():
    net = _train(VFieldNet(SMALL), 3)
    z_in, t, q = _inputs(3)
    one = Tensor(q.data[0])
    a = net(z_in, t, one).data
    b = net(z_in, t, Tensor(np.repeat(q.data[:1], 3, axis=0))).data
    np.testing.assert_array_equal(a, b)


def test_param_count_frozen():
    assert param_count(VFieldNet()) == 532196
    assert param_count(VFieldNet(VFieldConfig(widths=(16, 32, 64)))) == 181684
    assert param_count(None) == 0


def test_param_count_width_scaling():
    a = VFieldNet(VFieldConfig(widths=(32, 64, 128)))
    b = VFieldNet(VFieldConfig(widths=(64, 128, 256)))
    # the stem's input is fixed at 8 channels, so doubling the width doubles it
    assert b.stem.weight.data.size == 2 * a.stem.weight.data.size
    # a block with both sides scaled quadruples
    assert b.block0.conv.weight.data.size == 4 * a.block0.conv.weight.data.size
    assert param_count(b) > 3 * param_count(a)


def test_deterministic_forward():
    net = _train(VFieldNet(SMALL), 2)
    z_in, t, q = _inputs()
    np.testing.assert_array_equal(net(z_in, t, q).data, net(z_in, t, q).data)
    again = _train(VFieldNet(SMALL), 2)
    np.testing.assert_array_equal(net(z_in, t, q).data, again(z_in, t, q).data)


def test_zero_head_euler_sample_is_noise():
    net = VFieldNet()
    zm = T.randn((2, 4, 25, 16), 5).data
    z0 = T.randn((2, 4, 25, 16), 6).data
    q = T.randn((2, 128), 7)
    for n in (1, 3, 10):
        np.testing.assert_array_equal(euler_sample(net, zm, q, n, 0, z0=z0), z0)


@pytest.mark.parametrize("seed", range(5))
def test_every_parameter_receives_gradient(seed):
    # zero-initialised head and FiLM projection: step 1 moves only the head,
    # step 2 the FiLM projection; from then on every parameter is reachable
    net = _train(VFieldNet(SMALL), 2, seed=seed)
    params = net.named_parameters()
    z1 = T.randn((2, 4, 25, 16), seed).data
    zm = T.randn((2, 4, 25, 16), seed + 50).data
    with T.Tape() as tape:
        loss, _, _ = rfm_loss(net, z1, T.randn((2, 128), seed + 9), zm, 1e-5, seed)
    tape.backward(loss, wrt=list(params.values()))
    dead = [n for n, p in params.items() if not np.any(p.grad)]
    assert dead == []


def test_first_step_gradient_reaches_head_only_path():
    net = VFieldNet(SMALL)
    params = net.named_parameters()
    with T.Tape() as tape:
        loss, _, _ = rfm_loss(net, T.randn((2, 4, 25, 16), 0).data, T.randn((2, 128), 1), T.randn((2, 4, 25, 16), 2).data, 1e-5, 0)
    tape.backward(loss, wrt=list(params.values()))
    assert np.any(params["head.weight"].grad)
    assert not np.any(params["stem.weight"].grad)


def test_query_sensitivity_after_training():
    net = _train(VFieldNet(SMALL), 100, lr=3e-3)
    z_in, t, q = _inputs(1)
    delta = T.randn((1, 128), 77).data * 0.1
    a = net(z_in, t, q).data
    b = net(z_in, t, Tensor(q.data + delta)).data
    assert np.abs(a - b).max() > 1e-6


def test_lipschitz_in_time():
    net = _train(VFieldNet(SMALL), 20, lr=3e-3)
    for p in net.parameters():
        p.data = p.data.astype(np.float64)
    z_in, _, q = _inputs(1)
    z_in, q = Tensor(z_in.data.astype(np.float64)), Tensor(q.data.astype(np.float64))
    r = np.random.default_rng(0)
    for t in r.uniform(0.01, 0.99, 10):
        base = net(z_in, [t], q).data
        q1, q2 = (np.abs(net(z_in, [t + h], q).data - base).max() / h for h in (1e-6, 1e-7))
        # difference quotients settle: no jump, finite local slope
        assert np.isfinite(q1) and q1 < 1e6
        assert abs(q1 - q2) <= 0.05 * q1 + 1e-3
