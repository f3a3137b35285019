import struct

import numpy as np
import pytest

from xae.gradcheck import check_gradients
from xae.models import ModelSpec, PoseMLP
from xae.nn import GRU, MLP, Conv2d, Linear, MultiHeadSelfAttention, TransformerBlock, param_count
from xae.optim import (CheckpointError, GroupOptimizer, ParamGroup, load_checkpoint, optimizer_step,
                       save_checkpoint)
from xae.tensor import Tensor, conv2d, cross_entropy, gru_cell, layer_norm, maxpool2d, softmax

F64 = np.float64


def test_softmax_symmetry_and_relu_examples():
    np.testing.assert_allclose(softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert Tensor([-1.5]).relu().data[0] == 0.0


def test_conv_output_extent():
    conv = Conv2d(3, 8, 5, np.random.default_rng(0))
    assert conv(Tensor(np.zeros((1, 3, 50, 50), dtype=np.float32))).shape == (1, 8, 46, 46)


def test_square_derivative_at_three():
    x = Tensor([3.0], requires_grad=True)
    (x * x).sum().backward()
    assert x.grad[0] == 6.0


def test_cross_entropy_grad_at_uniform_logits():
    z = Tensor(np.zeros((1, 3)), requires_grad=True)
    cross_entropy(z, np.array([0])).backward()
    np.testing.assert_allclose(z.grad[0], [-2 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_small_mlp_finite_difference():
    rng = np.random.default_rng(4)
    w = Tensor(rng.standard_normal((2, 1)), requires_grad=True)
    b = Tensor(rng.standard_normal(1), requires_grad=True)
    v = Tensor(rng.standard_normal((1, 2)), requires_grad=True)   # 5 parameters in total
    x = rng.standard_normal((4, 2))
    f = lambda: ((Tensor(x) @ w + b).tanh() @ v).sum()
    assert check_gradients(f, [w, b, v], eps=1e-6) < 1e-4


OPS = {
    "matmul": lambda r: ([r.standard_normal((2, 3)), r.standard_normal((3, 2))], lambda a, b: (a @ b).tanh().sum()),
    "add_mul": lambda r: ([r.standard_normal((2, 3)), r.standard_normal(3)], lambda a, b: (a * b + a).tanh().sum()),
    "softmax": lambda r: ([r.standard_normal((2, 4)), r.standard_normal((2, 4))],
                          lambda a, w: (softmax(a, axis=-1) * w).sum()),
    "layer_norm": lambda r: ([r.standard_normal((2, 4)), r.standard_normal(4), r.standard_normal(4)],
                             lambda x, g, b: (layer_norm(x, g, b) * x).sum()),
    "conv_pool": lambda r: ([r.standard_normal((1, 1, 6, 6)), r.standard_normal((2, 1, 3, 3))],
                            lambda x, w: maxpool2d(conv2d(x, w), 2).tanh().sum()),
    "gru": lambda r: ([r.standard_normal((1, 2)), r.standard_normal((1, 2)), r.standard_normal((2, 6)),
                       r.standard_normal((2, 6)), r.standard_normal(6), r.standard_normal(6)],
                      lambda *a: gru_cell(*a).sum()),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_randomized_gradient_trials(name):
    worst = 0.0
    for trial in range(100):
        arrays, fn = OPS[name](np.random.default_rng(trial))
        ts = [Tensor(a, requires_grad=True, dtype=F64) for a in arrays]
        worst = max(worst, check_gradients(lambda: fn(*ts), ts))
    assert worst <= 1e-4


# -- parameter accounting ------------------------------------------------------------------

def test_linear_and_pose_counts():
    assert param_count(Linear(54, 32, np.random.default_rng(0))) == 54 * 32 + 32
    spec = ModelSpec.iae_default()
    assert param_count(PoseMLP(spec, np.random.default_rng(0), np.float32)) == 2420


def test_gru_count_formula():
    i, h = 20, 32
    assert param_count(GRU(i, h, np.random.default_rng(0))) == 3 * (i * h + h * h) + 6 * h


def test_param_count_empty_and_iterables():
    assert param_count(None) == 0
    assert param_count([]) == 0
    mlp = MLP(3, 4, 2, np.random.default_rng(0))
    assert param_count(mlp) == param_count(mlp.parameters()) == (3 * 4 + 4) + (4 * 2 + 2)


def test_param_count_invariant_to_values_and_additive():
    spec = ModelSpec.xae_default()
    a, b = spec.build(np.random.default_rng(0)), spec.build(np.random.default_rng(1))
    groups = a.param_groups()
    assert param_count(a) == param_count(b) == sum(param_count(g) for g in groups.values())
    ids = [id(p) for g in groups.values() for p in g]
    assert len(ids) == len(set(ids)) == len(a.parameters())


def test_attention_shapes():
    rng = np.random.default_rng(0)
    att = MultiHeadSelfAttention(8, 2, rng)
    out, a = att(Tensor(np.zeros((3, 5, 8), dtype=np.float32)))
    assert out.shape == (3, 5, 8) and a.shape == (3, 2, 5, 5)
    np.testing.assert_allclose(a.data.sum(-1), 1.0, atol=1e-6)
    blk = TransformerBlock(8, 2, 2.0, rng)
    x, a2 = blk(Tensor(np.ones((1, 4, 8), dtype=np.float32)))
    assert x.shape == (1, 4, 8) and a2.shape == (1, 2, 4, 4)


def test_attention_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        MultiHeadSelfAttention(7, 2, np.random.default_rng(0))


# -- optimizers ----------------------------------------------------------------------------

def scalar_group(opt, value=1.0, grad=0.5, lr0=0.1, gamma=1.0):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p, ParamGroup("net1", [p], opt, lr0, gamma)


def test_lr_schedule():
    g = ParamGroup("net1", [], "SGD", 0.01, 0.5)
    assert g.lr(2) == pytest.approx(0.0025)
    for e in range(5):
        assert g.lr(e + 1) / g.lr(e) == pytest.approx(0.5, rel=1e-15)


def test_sgd_step_and_zero_grad():
    p, g = scalar_group("SGD", lr0=0.01, gamma=0.5)
    optimizer_step(g, epoch=2)
    assert p.data[0] == pytest.approx(1.0 - 0.0025 * 0.5)
    p.grad = np.zeros(1)
    before = p.data.copy()
    optimizer_step(g, 0)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_by_hand():
    p, g = scalar_group("Adam", value=1.0, grad=0.5, lr0=0.1)
    optimizer_step(g, 0)
    m = 0.1 * 0.5 / (1 - 0.9)
    v = 0.001 * 0.25 / (1 - 0.999)
    assert p.data[0] == pytest.approx(1.0 - 0.1 * m / (np.sqrt(v) + 1e-8), rel=1e-12)


def test_adam_second_step_uses_state():
    p, g = scalar_group("Adam", grad=0.5, lr0=0.1)
    st = optimizer_step(g, 0)
    p.grad = np.array([-1.0])
    optimizer_step(g, 0, st)
    m = 0.9 * 0.05 + 0.1 * -1.0
    v = 0.999 * 0.00025 + 0.001 * 1.0
    expect = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8) - 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p.data[0] == pytest.approx(expect, rel=1e-12)


def test_rms_step_by_hand():
    p, g = scalar_group("RMS", grad=0.5, lr0=0.1)
    optimizer_step(g, 0)
    v = 0.01 * 0.25
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 0.5 / (np.sqrt(v) + 1e-8), rel=1e-12)


def test_missing_gradient_rejected():
    p, g = scalar_group("SGD")
    p.grad = None
    with pytest.raises(ValueError, match="no gradient"):
        optimizer_step(g, 0)


def test_frozen_group_skipped():
    p, g = scalar_group("SGD")
    g.freeze()
    assert g.frozen
    opt = GroupOptimizer(g)
    opt.step(0)
    assert p.data[0] == 1.0 and opt.last_lr is None


@pytest.mark.parametrize("kw", [dict(optimizer="LBFGS"), dict(lr0=0.0), dict(gamma=0.0), dict(gamma=1.5)])
def test_param_group_validation(kw):
    base = dict(name="net1", params=[], optimizer="SGD", lr0=0.1, gamma=1.0)
    with pytest.raises(ValueError):
        ParamGroup(**{**base, **kw})


# -- checkpoint format -----------------------------------------------------------------------

def test_checkpoint_roundtrip_and_layout(tmp_path):
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    b = np.array([1.5], dtype=np.float32)
    path = tmp_path / "m.xae"
    save_checkpoint(path, {"net1": [Tensor(a)], "net2": [b, a.T]})
    raw = path.read_bytes()
    assert raw[:4] == b"XAE1"
    n = struct.unpack_from("<I", raw, 4)[0]
    assert raw[8:8 + n] == b"net1"
    assert struct.unpack_from("<III", raw, 8 + n) == (1, 2, 2)
    out = load_checkpoint(path)
    assert list(out) == ["net1", "net2"]
    np.testing.assert_array_equal(out["net1"][0], a)
    np.testing.assert_array_equal(out["net2"][1], a.T)


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "bad.xae"
    path.write_bytes(b"NOPE")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    save_checkpoint(path, {"net1": [np.ones((4, 4), dtype=np.float32)]})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_training_is_deterministic():
    def run():
        rng = np.random.default_rng(0)
        lin = Linear(3, 2, np.random.default_rng(5), dtype=F64)
        g = ParamGroup("net1", lin.parameters(), "Adam", 0.01)
        st = None
        for _ in range(5):
            lin.zero_grad()
            cross_entropy(lin(Tensor(rng.standard_normal((4, 3)))), np.array([0, 1, 0, 1])).backward()
            st = optimizer_step(g, 0, st)
        return np.concatenate([p.data.ravel() for p in lin.parameters()])
    np.testing.assert_array_equal(run(), run())
