import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cirdg import ndmath as nd
from cirdg.ndmath import Tape, Tensor, gradcheck


def rand(rng, *shape, grad=True):
    return Tensor(rng.standard_normal(shape), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    assert nd.matmul(Tensor(np.eye(2)), b).data.tolist() == [[3.0, 4.0], [5.0, 6.0]]


def test_matmul_dot():
    assert nd.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nd.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nd.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_central_differences(rng):
    a, b = rand(rng, 3, 4), rand(rng, 4, 2)
    with Tape() as tape:
        out = nd.tsum(nd.matmul(a, b))
    tape.backward(out)
    h = 1e-5
    num = np.zeros_like(a.data)
    for idx in np.ndindex(a.shape):
        up, down = a.data.copy(), a.data.copy()
        up[idx] += h
        down[idx] -= h
        num[idx] = ((up @ b.data).sum() - (down @ b.data).sum()) / (2 * h)
    assert np.max(np.abs(a.grad - num) / np.maximum(np.abs(num), 1e-12)) < 1e-6


# ---------------------------------------------------------------- elementwise and norms


def test_relu():
    assert nd.relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]


def test_layer_norm_constant_row_is_zero():
    out = nd.layer_norm(Tensor([[1.0, 1.0, 1.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert out.data.tolist() == [[0.0, 0.0, 0.0]]


def test_batch_norm_closed_form():
    eps = 1e-5
    x = Tensor([[2.0], [4.0]])
    out = nd.batch_norm_1d(x, Tensor([1.0]), Tensor([0.0]), np.zeros(1), np.ones(1), "train", eps=eps)
    expected = (np.array([2.0, 4.0]) - 3.0) / math.sqrt(1.0 + eps)
    np.testing.assert_allclose(out.data[:, 0], expected, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out.data[:, 0], [-1.0, 1.0], atol=1e-5)


def test_batch_norm_rejects_single_sample():
    with pytest.raises(nd.DegenerateBatchError):
        nd.batch_norm_1d(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), np.zeros(2), np.ones(2))


def test_batch_norm_running_stats_update():
    rm, rv = np.zeros(1), np.ones(1)
    nd.batch_norm_1d(Tensor([[2.0], [4.0]]), Tensor([1.0]), Tensor([0.0]), rm, rv, "train", momentum=0.1)
    assert rm[0] == pytest.approx(0.3)
    # unbiased batch variance of [2, 4] is 2
    assert rv[0] == pytest.approx(0.9 + 0.1 * 2.0)


def test_batch_norm_eval_uses_running_stats():
    rm, rv = np.array([1.0]), np.array([4.0])
    out = nd.batch_norm_1d(Tensor([[3.0]]), Tensor([1.0]), Tensor([0.0]), rm, rv, "eval", eps=0.0)
    assert out.data[0, 0] == pytest.approx(1.0)
    assert rm[0] == 1.0 and rv[0] == 4.0


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 5)), elements=st.floats(-50, 50)),
)
def test_batch_norm_train_moments(x):
    eps = 1e-5
    out = nd.batch_norm_1d(Tensor(x), Tensor(np.ones(x.shape[1])), Tensor(np.zeros(x.shape[1])),
                           np.zeros(x.shape[1]), np.ones(x.shape[1]), "train", eps=eps).data
    assert np.all(np.abs(out.mean(axis=0)) < 1e-10)
    var = x.var(axis=0)
    np.testing.assert_allclose(out.var(axis=0), var / (var + eps), atol=1e-6)


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_row():
    np.testing.assert_allclose(nd.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3], atol=1e-15)


def test_softmax_single_survivor():
    out = nd.softmax_rows(Tensor([[5.0, 0.0]]), mask=[[False, True]]).data
    assert out.tolist() == [[0.0, 1.0]]


def test_softmax_closed_form():
    out = nd.softmax_rows(Tensor([[0.0, math.log(2), math.log(6)]]), mask=[[False, True, True]]).data
    assert out[0, 0] == 0.0
    np.testing.assert_allclose(out[0, 1:], [0.25, 0.75], atol=1e-15)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(nd.ReconstructionDegenerateError):
        nd.softmax_rows(Tensor([[1.0, 2.0], [3.0, 4.0]]), mask=[[True, True], [False, False]])


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_softmax_rows_properties(data):
    m = data.draw(st.integers(1, 8))
    n = data.draw(st.integers(1, 8))
    x = data.draw(arrays(np.float64, (m, n), elements=st.floats(-1e3, 1e3)))
    mask = data.draw(arrays(np.bool_, (m, n)))
    mask[np.arange(m), data.draw(st.lists(st.integers(0, n - 1), min_size=m, max_size=m))] = True
    y = nd.softmax_rows(Tensor(x), mask).data
    assert np.all(y[~mask] == 0.0)
    assert np.all(np.abs(y.sum(axis=1) - 1.0) <= 1e-12)


def test_masked_softmax_gradient_is_exactly_zero_on_masked_entries(rng):
    x = rand(rng, 4, 4)
    mask = ~np.eye(4, dtype=bool)
    w = Tensor(rng.standard_normal((4, 4)))
    with Tape() as tape:
        out = nd.tsum(nd.softmax_rows(x, mask) * w)
    tape.backward(out)
    assert np.all(x.grad[np.eye(4, dtype=bool)] == 0.0)


# ---------------------------------------------------------------- cosine similarity


def test_cosine_self():
    assert nd.cosine_similarity_matrix(Tensor([[1.0, 0.0]]), Tensor([[1.0, 0.0]])).data[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_cosine_orthogonal():
    assert nd.cosine_similarity_matrix(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).data[0, 0] == 0.0


def test_cosine_closed_form():
    v = nd.cosine_similarity_matrix(Tensor([[1.0, 1.0]]), Tensor([[1.0, 0.0]])).data[0, 0]
    assert v == pytest.approx(1 / math.sqrt(2), abs=1e-15)


def test_cosine_zero_row_is_guarded():
    v = nd.cosine_similarity_matrix(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]])).data
    assert np.all(np.isfinite(v))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-1e3, 1e3)))
def test_cosine_range(a):
    s = nd.cosine_similarity_matrix(Tensor(a), Tensor(a[::-1].copy())).data
    assert np.all(np.abs(s) <= 1.0 + 1e-12)


# ---------------------------------------------------------------- cross-entropy


def test_cross_entropy_uniform():
    assert nd.cross_entropy(Tensor([[0.0, 0.0]]), np.array([0])).item() == pytest.approx(math.log(2), abs=1e-15)


def test_cross_entropy_one_hot_matches_hard_labels(rng):
    z = Tensor(rng.standard_normal((5, 4)))
    y = rng.integers(0, 4, 5)
    hard = nd.cross_entropy(z, y).item()
    soft = nd.cross_entropy(z, np.eye(4)[y]).item()
    assert hard == soft


def test_cross_entropy_matches_direct_logsumexp(rng):
    z = rng.standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    expected = 0.0
    for i in range(4):
        lse = math.log(sum(math.exp(z[i, j]) for j in range(3)))
        expected += lse - z[i, y[i]]
    expected /= 4
    assert abs(nd.cross_entropy(Tensor(z), y).item() - expected) < 1e-10


def test_cross_entropy_label_range():
    with pytest.raises(nd.LabelError):
        nd.cross_entropy(Tensor([[0.0, 0.0]]), np.array([2]))


# ---------------------------------------------------------------- tape semantics


def test_tape_visits_each_node_once(rng):
    x = rand(rng, 3, 3)
    with Tape() as tape:
        y = nd.relu(x)
        z = nd.tsum(y * y + y)
    assert len(tape) == len({id(n.out) for n in tape.nodes})
    tape.backward(z)
    np.testing.assert_allclose(x.grad, np.where(x.data > 0, 2 * x.data + 1, 0.0))


def test_backward_twice_accumulates_and_reset_reproduces(rng):
    x = rand(rng, 3, 2)
    w = Tensor(rng.standard_normal((2, 4)))
    with Tape() as tape:
        out = nd.tsum(nd.exp(nd.matmul(x, w)))
    tape.backward(out)
    first = x.grad.copy()
    tape.backward(out)
    np.testing.assert_array_equal(x.grad, first + first)
    tape.zero_grad()
    tape.backward(out)
    assert np.array_equal(x.grad, first)


def test_no_recording_without_tape(rng):
    x = rand(rng, 2, 2)
    y = nd.relu(x)
    assert not y.requires_grad


def test_shared_input_gets_both_contributions():
    x = Tensor([2.0], requires_grad=True)
    with Tape() as tape:
        y = nd.tsum(x * x)
    tape.backward(y)
    assert x.grad.tolist() == [4.0]


# ---------------------------------------------------------------- gradcheck


def test_gradcheck_relu_away_from_kink(rng):
    x = Tensor(rng.uniform(0.2, 1.0, (4, 3)) * rng.choice([-1, 1], (4, 3)), requires_grad=True)
    assert gradcheck(lambda x: nd.tsum(nd.relu(x)), [x]) < 1e-7


def test_gradcheck_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)
    assert gradcheck(lambda x: Tensor(3.0), [x]) == 0.0


def test_gradcheck_flags_non_finite():
    x = Tensor([-1.0], requires_grad=True)
    with pytest.raises(nd.NumericError):
        gradcheck(lambda x: nd.tsum(nd.log(x)), [x])


@pytest.mark.parametrize(
    "name, fn, shapes",
    [
        ("exp", lambda a: nd.tsum(nd.exp(a) * 0.5), [(3, 2)]),
        ("square", lambda a: nd.tsum(nd.square(a)), [(3, 2)]),
        ("transpose", lambda a: nd.tsum(nd.transpose(a) * Tensor(np.arange(6.0).reshape(2, 3))), [(3, 2)]),
        ("mean-axis", lambda a: nd.tsum(nd.square(nd.tmean(a, axis=0))), [(4, 3)]),
        ("div", lambda a, b: nd.tsum(nd.div(a, nd.add(nd.square(b), 1.0))), [(3, 2), (3, 2)]),
        ("broadcast-sub", lambda a, b: nd.tsum(nd.square(nd.sub(a, b))), [(4, 3), (1, 3)]),
        ("row-normalize", lambda a: nd.tsum(nd.row_normalize(a) * Tensor(np.arange(12.0).reshape(4, 3))), [(4, 3)]),
    ],
)
def test_gradcheck_primitives(name, fn, shapes):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    inputs = [Tensor(rng.standard_normal(s), requires_grad=True) for s in shapes]
    assert gradcheck(fn, inputs) < 1e-5
