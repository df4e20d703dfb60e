import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from idea_ts import diffcore as dc


def leaf(v):
    return dc.Array(np.array(v, dtype=float), requires_grad=True)


def test_relu_definition():
    assert dc.relu(dc.Array([-1.0, 0.0, 2.0])).value.tolist() == [0.0, 0.0, 2.0]


def test_softmax_symmetric():
    assert dc.softmax(dc.Array([0.0, 0.0])).value.tolist() == [0.5, 0.5]


def test_matmul_by_hand():
    a = dc.Array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = dc.Array([[1.0], [0.0], [-1.0]])
    out = dc.matmul(a, b)
    assert out.shape == (2, 1)
    assert out.value.ravel().tolist() == [1 * 1 + 3 * -1, 4 * 1 + 6 * -1]


def test_shape_error_names_primitive():
    with pytest.raises(dc.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 1\)"):
        dc.matmul(dc.Array(np.ones((2, 3))), dc.Array(np.ones((2, 1))))
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(dc.Array(np.ones(3)), dc.Array(np.ones(4)))


def test_square_gradient():
    w = leaf(3.0)
    with dc.ComputationRecord() as rec:
        loss = w * w
    dc.backward(rec, loss)
    assert w.grad == 6.0


def test_stop_gradient_blocks_one_factor():
    w = leaf(3.0)
    with dc.ComputationRecord() as rec:
        loss = dc.stop_gradient(w) * w
    dc.backward(rec, loss)
    assert w.grad == 3.0


def test_backward_errors():
    w = leaf([1.0, 2.0])
    with dc.ComputationRecord() as rec:
        y = w * 2.0
    with pytest.raises(dc.GradientError, match="scalar"):
        dc.backward(rec, y)
    with dc.ComputationRecord() as other:
        z = dc.sum_(w)
    with pytest.raises(dc.GradientError, match="not produced"):
        dc.backward(rec, z)


def test_no_record_means_no_steps():
    w = leaf(2.0)
    y = w * w
    assert y.value == 4.0
    with dc.ComputationRecord() as rec:
        pass
    assert len(rec) == 0


def test_record_is_topologically_ordered():
    w = leaf(np.ones((2, 2)))
    with dc.ComputationRecord() as rec:
        h = dc.relu(w @ w)
        loss = dc.mean(h * h)
    produced = set()
    for step in rec.steps:
        for inp in step.inputs:
            assert id(inp) in produced or not rec.produced(inp)
        produced.add(id(step.output))
    assert rec.leaves() == [w]


def mlp_loss(w1, b1, w2, b2, w3, b3, x):
    h = dc.relu(x @ w1 + b1)
    h = dc.relu(h @ w2 + b2)
    out = h @ w3 + b3
    return dc.mean(out * out)


def test_three_layer_net_matches_finite_differences():
    rng = np.random.default_rng(7)
    shapes = [(4, 6), (6,), (6, 5), (5,), (5, 2), (2,)]
    leaves = [leaf(rng.normal(size=s)) for s in shapes]
    x = dc.Array(rng.normal(size=(3, 4)))
    report = dc.finite_diff_check(lambda *p: mlp_loss(*p, x), leaves, step=1e-5)
    assert report.max_error < 1e-4, report.errors


def test_linear_function_is_exact():
    rng = np.random.default_rng(0)
    w = leaf(rng.normal(size=5))
    c = rng.normal(size=5)
    report = dc.finite_diff_check(lambda w: dc.sum_(w * c), [w])
    assert report.max_error < 1e-9


def test_softmax_attention_composite():
    rng = np.random.default_rng(3)
    q, k, v = (leaf(rng.normal(size=s)) for s in [(2, 4), (5, 4), (5, 3)])

    def attn(q, k, v):
        a = dc.softmax((q @ dc.transpose(k)) * 0.5)
        return dc.sum_(dc.relu(a @ v) * np.arange(3.0))

    assert dc.finite_diff_check(attn, [q, k, v]).max_error < 1e-4


def test_negative_control_detects_wrong_gradient():
    def bad_square(a):
        return dc.record_op("bad_square", a.value ** 2, (a,), lambda g: (g * a.value,))  # off by 2x

    w = leaf([1.5, -0.5])
    report = dc.finite_diff_check(lambda w: dc.sum_(bad_square(w)), [w], tolerance=1e-4)
    assert not report.passed
    assert report.max_error > 0.1


def test_non_scalar_function_rejected():
    w = leaf([1.0, 2.0])
    with pytest.raises(dc.GradientError):
        dc.finite_diff_check(lambda w: w * 2.0, [w])


# one builder per primitive: (input shapes, function of leaves -> scalar)
def _weights(shape, seed=99):
    return np.random.default_rng(seed).normal(size=shape)


PRIMITIVE_CASES = {
    "add": ([(3, 4), (4,)], lambda a, b: dc.add(a, b)),
    "subtract": ([(3, 4), (3, 1)], lambda a, b: dc.sub(a, b)),
    "multiply": ([(3, 4), (3, 4)], lambda a, b: dc.mul(a, b)),
    "divide": ([(3, 4), (3, 4)], lambda a, b: dc.div(a, dc.add(dc.mul(b, b), 1.0))),
    "scale": ([(3, 4)], lambda a: dc.scale(a, -1.7)),
    "matmul": ([(2, 3, 4), (4, 5)], lambda a, b: dc.matmul(a, b)),
    "relu": ([(3, 4)], lambda a: dc.relu(a)),
    "abs": ([(3, 4)], lambda a: dc.absolute(a)),
    "softmax": ([(3, 4)], lambda a: dc.softmax(a)),
    "masked_softmax": ([(3, 4)], lambda a: dc.softmax(a, np.array([1, 0, 1, 1], dtype=bool))),
    "sum": ([(3, 4)], lambda a: dc.sum_(a, axis=0)),
    "mean": ([(3, 4)], lambda a: dc.mean(a, axis=-1, keepdims=True)),
    "concat": ([(3, 2), (3, 4)], lambda a, b: dc.concat([a, b], axis=1)),
    "slice": ([(3, 4)], lambda a: a[1:, ::2]),
    "transpose": ([(2, 3, 4)], lambda a: dc.transpose(a, (2, 0, 1))),
    "reshape": ([(3, 4)], lambda a: dc.reshape(a, (2, 6))),
    "where": ([(3, 4), (3, 4)], lambda a, b: dc.where(np.eye(3, 4, dtype=bool), a, b)),
}


@pytest.mark.parametrize("kind", sorted(PRIMITIVE_CASES))
def test_primitive_gradients_random_trials(kind):
    shapes, fn = PRIMITIVE_CASES[kind]
    worst = 0.0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        leaves = [leaf(rng.normal(size=s)) for s in shapes]
        out_shape = fn(*[dc.Array(l.value) for l in leaves]).shape
        c = _weights(out_shape, trial)
        report = dc.finite_diff_check(lambda *ls: dc.sum_(fn(*ls) * c), leaves, step=1e-5)
        worst = max(worst, report.max_error)
    assert worst < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)))
def test_softmax_rows_on_simplex(x):
    y = dc.softmax(dc.Array(x)).value
    assert np.all(y > 0)
    assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12, rtol=0)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError):
        dc.softmax(dc.Array([0.0, np.inf]))


def test_backward_deterministic():
    rng = np.random.default_rng(1)
    vals = [rng.normal(size=s) for s in [(4, 6), (6,), (6, 5), (5,), (5, 2), (2,)]]
    x = dc.Array(rng.normal(size=(3, 4)))
    grads = []
    for _ in range(2):
        ls = [leaf(v.copy()) for v in vals]
        with dc.ComputationRecord() as rec:
            loss = mlp_loss(*ls, x)
        dc.backward(rec, loss)
        grads.append([l.grad.copy() for l in ls])
    for a, b in zip(*grads):
        assert np.array_equal(a, b)


def test_stopped_edge_gets_exactly_zero():
    rng = np.random.default_rng(2)
    a = leaf(rng.normal(size=(3, 3)))
    b = leaf(rng.normal(size=(3, 3)))
    with dc.ComputationRecord() as rec:
        loss = dc.sum_(dc.softmax(dc.stop_gradient(a) @ b) * dc.stop_gradient(b))
    dc.backward(rec, loss)
    assert a.grad is None
    assert np.any(b.grad != 0)


def test_primitive_dispatch():
    assert dc.primitive("relu", dc.Array([-2.0, 3.0])).value.tolist() == [0.0, 3.0]
    with pytest.raises(ValueError):
        dc.primitive("nope", dc.Array(1.0))


# -- Adam ----------------------------------------------------------------------

def test_adam_zero_gradient_is_noop():
    p = leaf([1.0, -2.0])
    state = dc.AdamState.for_params([p], lr=0.1)
    dc.adam_step([p], [np.zeros(2)], state)
    assert p.value.tolist() == [1.0, -2.0]
    assert state.step == 1


def test_adam_moves_against_gradient():
    p = leaf(1.0)
    state = dc.AdamState.for_params([p], lr=0.1)
    dc.adam_step([p], [np.array(1.0)], state)
    assert p.value < 1.0


def test_adam_two_steps_hand_trace():
    # fixed gradient g=0.5, lr=0.1, defaults
    g, lr, b1, b2, eps = 0.5, 0.1, 0.9, 0.999, 1e-8
    p_hand, m, v = 2.0, 0.0, 0.0
    for t in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p_hand -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    p = leaf(2.0)
    state = dc.AdamState.for_params([p], lr=lr)
    for _ in range(2):
        dc.adam_step([p], [np.array(g)], state)
    assert state.step == 2
    assert p.value == pytest.approx(p_hand, abs=1e-15)


def test_adam_shape_mismatch():
    p = leaf([1.0, 2.0])
    state = dc.AdamState.for_params([p])
    with pytest.raises(dc.ShapeError):
        dc.adam_step([p], [np.zeros(3)], state)


def test_finite_diff_sampled_entries():
    rng = np.random.default_rng(3)
    a = dc.Array(rng.normal(size=(6, 5)), requires_grad=True)
    report = dc.finite_diff_check(lambda v: dc.sum_(v * v * v), [a], entries=4, rng=rng)
    assert report.passed and len(report.errors) == 1
    # a wrong gradient is still caught on a subset of coordinates
    bad = dc.finite_diff_check(lambda v: dc.sum_(dc.stop_gradient(v) * v), [a], entries=4, rng=rng)
    assert not bad.passed
