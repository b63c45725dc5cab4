import hashlib

import numpy as np
import pytest

import dmseg.autograd.tensor as T
from dmseg.autograd import (
    Adam,
    Checkpoint,
    LayerSpec,
    Network,
    NetworkSpec,
    PlateauDecay,
    Tensor,
    kaiming_uniform_init,
    load_checkpoint,
    lrnet_spec,
    mnet_spec,
    save_checkpoint,
)
from dmseg.errors import InvalidArgumentError, ShapeError, StateError, TrainingDivergedError
from oracles import central_difference, max_rel_err, network_fd_error


def test_identity_conv():
    spec = NetworkSpec("id", 3, [LayerSpec("conv", 3, 3, kernel=1)])
    params = {"0.weight": np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1, 1), "0.bias": np.zeros(3, np.float32)}
    x = np.random.default_rng(0).normal(size=(2, 3, 4, 4, 4)).astype(np.float32)
    np.testing.assert_array_equal(Network(spec, params)(x).data, x)


def test_softmax_constant_logits_are_uniform():
    p = T.softmax(Tensor(np.full((1, 4, 2, 2, 2), 3.7)), axis=1).data
    np.testing.assert_allclose(p, 0.25)


def test_softmax_outputs_sum_to_one(rng):
    net = Network(mnet_spec(4), seed=3)
    p = net(rng.normal(size=(2, 1, 8, 8, 8)).astype(np.float32)).data
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


def test_output_hash_is_stable():
    spec = NetworkSpec("two", 1, [LayerSpec("conv", 1, 2, activation="relu"), LayerSpec("conv", 2, 2, kernel=1)])
    x = np.linspace(-1, 1, 64, dtype=np.float32).reshape(1, 1, 4, 4, 4)
    digests = {hashlib.sha256(Network(spec, seed=11)(x).data.tobytes()).hexdigest() for _ in range(3)}
    assert len(digests) == 1


def test_single_conv_gradients_float32(rng):
    spec = NetworkSpec("c", 2, [LayerSpec("conv", 2, 3)])
    net = Network(spec, seed=1)
    x = rng.normal(size=(1, 2, 4, 4, 4)).astype(np.float32)
    proj = rng.normal(size=(1, 3, 4, 4, 4))
    net(x)
    net.backward(proj.astype(np.float32))
    for name, p in net.params.items():
        base = p.data.astype(np.float64)

        def f(w, p=p):
            p.data = w.astype(np.float32)
            return float((net(x).data.astype(np.float64) * proj).sum())

        num = central_difference(f, base, 1e-2)
        p.data = base.astype(np.float32)
        assert max_rel_err(p.grad, num, floor=1e-3) < 1e-3, name


def test_input_gradient_of_conv(rng):
    w = Tensor(rng.normal(size=(2, 1, 3, 3, 3)), requires_grad=True)
    x0 = rng.normal(size=(1, 1, 4, 4, 4))
    proj = rng.normal(size=(1, 2, 4, 4, 4))
    x = Tensor(x0.copy(), requires_grad=True)
    T.tsum(T.conv3d(x, w) * Tensor(proj)).backward()
    num = central_difference(lambda v: float((T.conv3d(Tensor(v), w).data * proj).sum()), x0, 1e-5)
    assert max_rel_err(x.grad, num) < 1e-6


@pytest.mark.parametrize("stride", [1, 2])
def test_strided_conv_and_pooling_gradients(stride, rng):
    w = rng.normal(size=(2, 2, 3, 3, 3))
    x0 = rng.normal(size=(1, 2, 4, 4, 4))
    proj = rng.normal(size=T.conv3d(Tensor(x0), Tensor(w), stride=stride).shape)
    x = Tensor(x0.copy(), requires_grad=True)
    T.tsum(T.conv3d(x, Tensor(w), stride=stride) * Tensor(proj)).backward()
    num = central_difference(lambda v: float((T.conv3d(Tensor(v), Tensor(w), stride=stride).data * proj).sum()), x0, 1e-5)
    assert max_rel_err(x.grad, num) < 1e-6

    pj = rng.normal(size=(1, 2, 2, 2, 2))
    x = Tensor(x0.copy(), requires_grad=True)
    T.tsum(T.max_pool3d(x) * Tensor(pj)).backward()
    num = central_difference(lambda v: float((T.max_pool3d(Tensor(v)).data * pj).sum()), x0, 1e-5)
    assert max_rel_err(x.grad, num) < 1e-6


def test_elementwise_ops_gradients(rng):
    x0 = rng.uniform(0.5, 2.0, size=(3, 4))
    ops = {
        "sigmoid": lambda t: T.sigmoid(t),
        "tanh": lambda t: T.tanh(t),
        "exp-log": lambda t: T.log(T.exp(t) + 1.0),
        "pow": lambda t: t ** 3 / (t + 1.0),
        "mean": lambda t: T.tmean(t * t, axis=1, keepdims=True) - t,
        "softmax": lambda t: T.softmax(t, axis=0),
    }
    for name, op in ops.items():
        proj = rng.normal(size=op(Tensor(x0)).shape)
        x = Tensor(x0.copy(), requires_grad=True)
        T.tsum(op(x) * Tensor(proj)).backward()
        num = central_difference(lambda v: float((op(Tensor(v)).data * proj).sum()), x0, 1e-5)
        assert max_rel_err(x.grad, num) < 1e-6, name


@pytest.mark.parametrize("seed", range(4))
def test_full_mnet_gradients(seed):
    net = Network(mnet_spec(2), seed=seed)
    x = np.random.default_rng(seed).normal(size=(1, 1, 4, 4, 4))
    assert network_fd_error(net, x, seed) < 1e-3


@pytest.mark.parametrize("seed", range(4))
def test_full_lrnet_gradients(seed):
    variant = ("nidm", "snidm", "nidms", "idm")[seed % 4]
    net = Network(lrnet_spec(variant, 2), seed=seed)
    x = np.random.default_rng(seed).uniform(size=(1, 2, 4, 4, 4))
    assert network_fd_error(net, x, seed) < 1e-3


def test_backward_before_forward():
    with pytest.raises(StateError):
        Network(mnet_spec(2)).backward(np.zeros((1, 2, 4, 4, 4)))


def test_residual_identity_path(rng):
    spec = NetworkSpec("res", 2, [LayerSpec("resblock", 2, 2, activation="linear")])
    params = {k: np.zeros(s) for k, s in spec.param_shapes().items()}
    net = Network(spec, params)
    x = rng.normal(size=(1, 2, 4, 4, 4))
    xt = Tensor(x, requires_grad=True)
    g = rng.normal(size=x.shape)
    net(xt)
    net.backward(g)
    np.testing.assert_array_equal(net._output.data, x)
    np.testing.assert_array_equal(xt.grad, g)


def test_shape_error_names_layer():
    net = Network(mnet_spec(2))
    with pytest.raises(ShapeError, match="layer 2"):
        net(np.zeros((1, 1, 5, 4, 4), np.float32))
    with pytest.raises(ShapeError):
        net(np.zeros((1, 3, 4, 4, 4), np.float32))


def test_spec_validation_and_round_trip():
    spec = mnet_spec(4)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(InvalidArgumentError):
        NetworkSpec("bad", 1, [LayerSpec("conv", 2, 2)])


def test_kaiming_bounds_and_seed():
    spec = NetworkSpec("k", 8, [LayerSpec("conv", 8, 16)])
    p = kaiming_uniform_init(spec, 5)
    bound = np.sqrt(6 / 216)
    assert np.abs(p["0.weight"]).max() <= bound
    assert not p["0.bias"].any()
    q = kaiming_uniform_init(spec, 5)
    np.testing.assert_array_equal(p["0.weight"], q["0.weight"])
    assert not np.array_equal(p["0.weight"], kaiming_uniform_init(spec, 6)["0.weight"])


def test_kaiming_mean_statistics():
    spec = NetworkSpec("k", 8, [LayerSpec("conv", 8, 500)])
    w = kaiming_uniform_init(spec, 0)["0.weight"].astype(np.float64).ravel()[:100_000]
    bound = np.sqrt(6 / 216)
    sigma = bound / np.sqrt(3)
    assert abs(w.mean()) < 3 * sigma / np.sqrt(w.size)
    assert w.std() == pytest.approx(sigma, rel=0.01)


def test_adam_zero_grad_and_first_step():
    p = Tensor(np.array([1.5]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    p.grad = np.zeros(1)
    opt.step()
    assert p.data[0] == 1.5
    opt = Adam({"p": p}, lr=0.01)
    p.grad = np.array([-7.0])
    opt.step()
    assert p.data[0] - 1.5 == pytest.approx(0.01, rel=1e-6)


def test_adam_quadratic_bowl():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.05)
    for step in range(500):
        w.grad = 2 * w.data
        opt.step()
        if abs(w.data[0]) < 0.1:
            break
    assert abs(w.data[0]) < 0.1


def test_adam_frozen_and_nan():
    a = Tensor(np.ones(2), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    opt = Adam({"a": a, "b": b}, lr=0.1, frozen={"b"})
    a.grad = b.grad = np.ones(2)
    opt.step()
    assert (b.data == 1).all() and (a.data < 1).all()
    a.grad = np.array([np.nan, 0.0])
    with pytest.raises(TrainingDivergedError) as info:
        opt.step()
    assert info.value.diagnostics["parameters"] == ["a"]


def _sched(patience=3):
    opt = Adam({}, lr=1.0)
    return opt, PlateauDecay(opt, factor=0.8, patience=patience)


def test_plateau_decreasing_keeps_lr():
    opt, s = _sched()
    for v in np.linspace(1, 0.1, 20):
        s.step(v)
    assert opt.lr == 1.0


def test_plateau_flat_window_decays_once():
    opt, s = _sched(3)
    for _ in range(4):
        s.step(0.5)
    assert opt.lr == pytest.approx(0.8)
    for _ in range(3):
        s.step(0.5)
    assert opt.lr == pytest.approx(0.64)


def test_plateau_cooldown():
    opt = Adam({}, lr=1.0)
    s = PlateauDecay(opt, patience=1, cooldown=2)
    for _ in range(4):
        s.step(1.0)
    # decay after epoch 2, then two cooldown epochs
    assert opt.lr == pytest.approx(0.8)
    s.step(1.0)
    assert opt.lr == pytest.approx(0.64)


def test_checkpoint_round_trip(tmp_path):
    net = Network(lrnet_spec("snidm", 4), seed=9)
    ck = Checkpoint.from_network(net, seed=9, step=12, lr=5e-4, extra={"variant": "snidm"})
    save_checkpoint(tmp_path / "c.ckpt", ck)
    back = load_checkpoint(tmp_path / "c.ckpt")
    assert back.spec == ck.spec and back.step == 12 and back.extra == {"variant": "snidm"}
    for k, v in ck.params.items():
        np.testing.assert_array_equal(back.params[k], v)
    save_checkpoint(tmp_path / "d.ckpt", back)
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "d.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b'{"magic": "nope"}\n')
    with pytest.raises(InvalidArgumentError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_training_is_deterministic(rng):
    x = rng.normal(size=(2, 1, 4, 4, 4)).astype(np.float32)

    def run():
        net = Network(mnet_spec(2), seed=4)
        opt = Adam(net.params, lr=1e-2)
        for _ in range(5):
            opt.zero_grad()
            net(x)
            net.backward(np.ones((2, 2, 4, 4, 4), np.float32))
            opt.step()
        return net.state()

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
