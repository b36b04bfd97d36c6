import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hedgelab import diffcore as dc
from hedgelab.diffcore import Graph, NonFiniteError, ParamStore, ShapeError, adam_step, apply, backward, param
from hedgelab.gradcheck import max_relative_error


def test_matmul_example():
    out = apply("matmul", [[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_softmax_uniform():
    out = apply("softmax", np.zeros(3), axis=0)
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softplus_zero_is_ln2():
    assert apply("softplus", 0.0).item() == pytest.approx(math.log(2.0), abs=1e-15)
    assert apply("softplus", 0.0).item() == pytest.approx(0.693147, abs=1e-6)


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        apply("matmul", np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        apply("add", np.ones(3), np.ones(4))


def test_non_finite_output_names_op():
    with pytest.raises(NonFiniteError, match="exp"):
        apply("exp", [1000.0])
    with pytest.raises(NonFiniteError):
        dc.Tensor([np.nan])


def test_ln_clamps_instead_of_minus_inf():
    assert apply("ln", 0.0).item() == pytest.approx(math.log(1e-300))


def test_unknown_kind():
    with pytest.raises(ValueError):
        apply("conv2d", np.ones(2))


def _store(**arrays):
    s = ParamStore()
    for k, v in arrays.items():
        s.add(k, v)
    return s


def test_backward_square_sum():
    s = _store(w=[3.0])
    with Graph() as g:
        loss = apply("sum", apply("square", param(s, "w")))
    np.testing.assert_array_equal(backward(loss, g)["w"], [6.0])


def test_backward_mean():
    s = _store(w=np.arange(4.0))
    with Graph() as g:
        loss = apply("mean", param(s, "w"))
    np.testing.assert_array_equal(backward(loss, g)["w"], [0.25] * 4)


def test_backward_rejects_non_scalar_and_reuse():
    s = _store(w=np.ones(3))
    with Graph() as g:
        v = apply("square", param(s, "w"))
    with pytest.raises(ShapeError):
        backward(v, g)
    with Graph() as g:
        loss = apply("sum", param(s, "w"))
    backward(loss, g)
    with pytest.raises(RuntimeError):
        backward(loss, g)


def test_unreachable_parameter_gets_zero():
    s = _store(a=np.ones(2), b=np.ones((2, 2)))
    with Graph() as g:
        loss = apply("sum", param(s, "a"))
    grads = backward(loss, g, s)
    np.testing.assert_array_equal(grads["b"], np.zeros((2, 2)))


def test_fan_out_accumulates():
    s = _store(w=[2.0])
    with Graph() as g:
        w = param(s, "w")
        loss = apply("sum", w * w + w)
    np.testing.assert_allclose(backward(loss, g)["w"], [5.0])


def _loss_for(kind: str, s: ParamStore, rng_weights: np.ndarray):
    a = param(s, "a")
    b = param(s, "b")
    if kind == "matmul":
        out = a @ b
    elif kind in ("add", "sub", "mul", "div", "minimum"):
        rhs = b[:, :1].reshape(1, 3) if kind != "div" else dc.exp(b[:, :1].reshape(1, 3))
        out = apply(kind, a, rhs)
    elif kind in ("ln", "sqrt"):
        out = apply(kind, dc.exp(a))
    elif kind == "abs":
        out = apply("abs", a + 0.05)
    elif kind in ("exp", "tanh", "sigmoid", "softplus", "square"):
        out = apply(kind, a)
    elif kind == "clip":
        out = apply("clip", a, lo=-0.5, hi=0.5)
    elif kind == "softmax":
        out = apply("softmax", a, axis=1)
    elif kind == "concat":
        out = apply("concat", a, b.transpose(), axis=0)
    elif kind == "slice":
        out = a[1:, ::2]
    elif kind == "sum":
        out = apply("sum", a, axis=0)
    elif kind == "mean":
        out = apply("mean", a, axis=1, keepdims=True)
    elif kind == "reshape":
        out = a.reshape(3, 2)
    elif kind == "transpose":
        out = a.transpose(1, 0)
    elif kind == "gru_cell":
        h = dc.tanh(a[:, :2])
        out = dc.gru_cell(a, h, param(s, "wx"), param(s, "wh"), param(s, "bg"))
    else:  # pragma: no cover
        raise AssertionError(kind)
    w = rng_weights[: out.data.size].reshape(out.shape)
    return apply("sum", out * w)


@pytest.mark.parametrize("kind", sorted(dc.KERNELS))
def test_every_kernel_matches_finite_differences(kind):
    rng = np.random.default_rng(7)
    s = _store(
        a=rng.normal(size=(2, 3)),
        b=rng.normal(size=(3, 2)),
        wx=rng.normal(size=(3, 6)) * 0.5,
        wh=rng.normal(size=(2, 6)) * 0.5,
        bg=rng.normal(size=6) * 0.1,
    )
    weights = rng.normal(size=64)
    err, name = max_relative_error(lambda st_: _loss_for(kind, st_, weights), s, h=1e-5)
    assert err < 1e-4, (kind, name, err)


def test_two_layer_tanh_net_gradcheck():
    rng = np.random.default_rng(3)
    s = _store(w1=rng.normal(size=(4, 5)), b1=rng.normal(size=5), w2=rng.normal(size=(5, 1)), b2=rng.normal(size=1))
    x = rng.normal(size=(6, 4))
    y = rng.normal(size=(6, 1))

    def loss(st_):
        h = dc.tanh(x @ param(st_, "w1") + param(st_, "b1"))
        out = h @ param(st_, "w2") + param(st_, "b2")
        return dc.square(out - y).mean()

    err, name = max_relative_error(loss, s)
    assert err < 1e-4, (name, err)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-50, 50)), st.integers(0, 1))
def test_softmax_is_a_distribution(x, axis):
    out = apply("softmax", x, axis=axis).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
@example(534)  # saturates the candidate tanh
def test_gru_output_in_open_unit_interval(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(5, 3)) * 3
    h = np.tanh(rng.normal(size=(5, 4)))
    out = dc.gru_cell(x, h, rng.normal(size=(3, 12)) * 2, rng.normal(size=(4, 12)) * 2, rng.normal(size=12)).data
    assert np.all(np.abs(out) < 1.0)


def test_graph_replay_is_bit_identical():
    rng = np.random.default_rng(0)
    s = _store(w=rng.normal(size=(4, 4)))
    x = rng.normal(size=(3, 4))

    def run():
        with Graph() as g:
            y = dc.softmax(dc.tanh(x @ param(s, "w")), axis=-1)
            loss = dc.square(y).sum()
        return y.data.copy(), backward(loss, g)["w"]

    y1, g1 = run()
    y2, g2 = run()
    assert np.array_equal(y1, y2) and np.array_equal(g1, g2)


def test_adam_zero_gradient_leaves_params():
    s = _store(p=[1.0, -2.0])
    adam_step(s, {"p": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(s["p"], [1.0, -2.0])
    assert s.step == 1


def test_adam_first_step_moves_by_lr():
    # m1 = 0.1, v1 = 0.001; bias corrected both to g -> step = lr * 1 / (1 + eps)
    s = _store(p=[1.0])
    adam_step(s, {"p": np.array([1.0])}, lr=0.1)
    assert s["p"][0] == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert s["p"][0] == pytest.approx(0.9, abs=1e-6)


def test_adam_deterministic_and_key_checks():
    def run():
        s = _store(p=np.linspace(0, 1, 5))
        for k in range(5):
            adam_step(s, {"p": np.sin(np.arange(5.0) + k)}, lr=0.01)
        return s

    assert run().equals(run())
    s = _store(p=[1.0])
    with pytest.raises(KeyError):
        adam_step(s, {}, lr=0.1)
    with pytest.raises(KeyError):
        adam_step(s, {"p": np.ones(1), "q": np.ones(1)}, lr=0.1)


def test_param_names_unique_and_shapes_immutable():
    s = _store(p=[1.0])
    with pytest.raises(KeyError):
        s.add("p", [2.0])
    with pytest.raises(ShapeError):
        s.set("p", [1.0, 2.0])


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    s = _store(a=rng.normal(size=(3, 2)), b=rng.normal(size=4), c=np.array(0.123456789))
    adam_step(s, {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4), "c": np.array(1.0)}, lr=0.01)
    path = tmp_path / "ckpt.bin"
    s.save(path)
    loaded = ParamStore.load(path)
    assert loaded.equals(s)
    assert loaded.names() == ["a", "b", "c"]
    assert path.read_bytes()[:4] == b"HLCK"


def test_checkpoint_rejects_foreign_file(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"nope")
    with pytest.raises(ValueError):
        ParamStore.load(p)
