import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deskflow import tensor as T
from deskflow.errors import ContractError, DegenerateInputError, DimensionError, NonFiniteError, TokenIndexError
from deskflow.tensor import Tensor
from oracles import finite_difference_grads, relative_error


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float32), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal((a @ Tensor(np.eye(2))).data, a.data)

    def test_orthogonal(self):
        assert (Tensor([[1.0, 0.0]]) @ Tensor([[0.0], [1.0]])).data.tolist() == [[0.0]]

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_grad_of_sum_is_column_sums(self):
        rng = np.random.default_rng(0)
        a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
        (a @ b).sum().backward()
        np.testing.assert_allclose(a.grad, np.tile(b.data.sum(axis=1), (3, 1)), rtol=1e-6)
        fd = finite_difference_grads(lambda: (a @ b).sum(), {"a": a, "b": b})
        assert relative_error(a.grad, fd["a"]) < 1e-3
        assert relative_error(b.grad, fd["b"]) < 1e-3

    def test_batched(self):
        rng = np.random.default_rng(1)
        a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 4, 5)))
        np.testing.assert_allclose((a @ b).data, np.matmul(a.data, b.data), rtol=1e-6)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, 0.25, atol=1e-7)

    def test_no_overflow(self):
        np.testing.assert_allclose(T.softmax(Tensor([1000.0, 0.0])).data, [1.0, 0.0], atol=1e-6)

    def test_log_weights(self):
        y = T.softmax(Tensor(np.log([1.0, 2.0, 3.0]))).data
        np.testing.assert_allclose(y, [1 / 6, 2 / 6, 3 / 6], atol=1e-6)

    def test_empty_axis(self):
        with pytest.raises(DimensionError):
            T.softmax(Tensor(np.zeros((2, 0))))

    def test_fully_masked_row(self):
        with pytest.raises(ContractError):
            T.softmax(Tensor(np.zeros((2, 2))), np.array([[True, False], [False, False]]))

    @given(st.lists(st.floats(-30, 30), min_size=1, max_size=12), st.floats(-50, 50))
    def test_normalised_and_shift_invariant(self, xs, c):
        x = np.array(xs, dtype=np.float32)
        y = T.softmax(Tensor(x)).data
        assert (y > 0).all()
        assert abs(float(y.sum()) - 1.0) < 1e-6
        np.testing.assert_allclose(T.softmax(Tensor(x + np.float32(c))).data, y, atol=1e-6)


class TestCrossEntropy:
    def test_uniform(self):
        loss = T.cross_entropy(Tensor(np.zeros((5, 8))), [0, 3, 7, 1, 2])
        assert abs(loss.item() - math.log(8)) < 1e-6

    def test_confident(self):
        logits = np.zeros((3, 4), np.float32)
        targets = [1, 0, 3]
        logits[np.arange(3), targets] = 30.0
        assert T.cross_entropy(Tensor(logits), targets).item() < 1e-10

    def test_mask_selects_position(self):
        logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]], np.float32)
        full = T.cross_entropy(Tensor(logits), [2, 0], [True, False]).item()
        expected = -(0.5 - math.log(math.exp(1.0) + math.exp(2.0) + math.exp(0.5)))
        assert abs(full - expected) < 1e-6
        assert abs(full - T.cross_entropy(Tensor(logits[:1]), [2]).item()) < 1e-7

    def test_all_false_mask(self):
        with pytest.raises(DegenerateInputError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 1], [False, False])

    def test_target_out_of_range(self):
        with pytest.raises(TokenIndexError):
            T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])

    def test_masked_target_may_be_padding(self):
        T.cross_entropy(Tensor(np.zeros((2, 3))), [0, 99], [True, False])

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = leaf(rng.normal(size=(4, 5)))
        targets, mask = [1, 4, 0, 2], [True, False, True, True]
        T.cross_entropy(x, targets, mask).backward()
        fd = finite_difference_grads(lambda: T.cross_entropy(x, targets, mask), {"x": x})
        assert relative_error(x.grad, fd["x"]) < 1e-3


class TestBackward:
    def test_sum_gives_ones(self):
        x = leaf(np.arange(6.0).reshape(2, 3))
        x.sum().backward()
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square(self):
        x = leaf([1.0, -2.0, 3.5])
        (x * x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.data)

    def test_non_scalar(self):
        with pytest.raises(ContractError):
            (leaf([1.0, 2.0]) * 2.0).backward()

    def test_accumulates_until_zeroed(self):
        x = leaf([1.0, 2.0])
        x.sum().backward()
        x.sum().backward()
        assert np.array_equal(x.grad, [2.0, 2.0])
        x.zero_grad()
        x.sum().backward()
        assert np.array_equal(x.grad, [1.0, 1.0])

    def test_first_grad_not_aliased(self):
        x = leaf([1.0, 2.0])
        y = x * 1.0
        y.sum().backward()
        g = x.grad
        x.sum().backward()
        assert np.array_equal(g, [1.0, 1.0])

    def test_no_grad_records_nothing(self):
        x = leaf([1.0])
        with T.no_grad():
            y = x * 3.0
        assert not y.requires_grad

    def test_nan_detected_in_debug(self):
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
            T.log(Tensor([-1.0]))

    def test_nan_passes_when_debug_off(self):
        prev = T.set_debug(False)
        try:
            with np.errstate(invalid="ignore"):
                assert np.isnan(T.log(Tensor([-1.0])).data).all()
        finally:
            T.set_debug(prev)

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        params = {
            "w1": leaf(rng.normal(0, 0.5, size=(6, 5))),
            "g": leaf(rng.uniform(0.5, 1.5, size=6)),
            "w2": leaf(rng.normal(0, 0.5, size=(4, 6))),
        }
        x = Tensor(rng.normal(size=(3, 5)).astype(np.float32))
        targets = [0, 3, 1]

        def loss():
            h = T.gelu(T.rmsnorm(x @ params["w1"].swapaxes(0, 1), params["g"]))
            return T.cross_entropy(h @ params["w2"].swapaxes(0, 1), targets)

        loss().backward()
        fd = finite_difference_grads(loss, params)
        for k, p in params.items():
            assert relative_error(p.grad, fd[k]) < 1e-3, k

    def test_plumbing_ops(self):
        rng = np.random.default_rng(4)
        w = leaf(rng.normal(size=(5, 3)))
        a = leaf(rng.normal(size=(2, 3)))
        ids = np.array([[0, 4], [4, 4]])

        def loss():
            e = T.embedding(w, ids)  # [2, 2, 3]
            parts = T.split(T.concat([e, a.reshape(2, 1, 3)], axis=1), [1, 2], axis=1)
            z = T.softplus(parts[0]).sum() + T.exp(T.scale(parts[1], 0.3)).mean()
            return z + (e.transpose(2, 0, 1)[1] * a[:, :2]).sum()

        loss().backward()
        fd = finite_difference_grads(loss, {"w": w, "a": a})
        assert relative_error(w.grad, fd["w"]) < 1e-3
        assert relative_error(a.grad, fd["a"]) < 1e-3
        assert np.all(w.grad[1:4] == 0)

    def test_embedding_index_error(self):
        with pytest.raises(TokenIndexError):
            T.embedding(leaf(np.zeros((3, 2))), [3])

    def test_checkpoint_gradients_identical(self):
        rng = np.random.default_rng(5)
        w = leaf(rng.normal(size=(4, 4)))
        x0 = rng.normal(size=(2, 4)).astype(np.float32)

        def seg(h):
            return T.gelu(h @ w)

        x = leaf(x0)
        seg(seg(x)).sum().backward()
        g_plain, gx_plain = w.grad.copy(), x.grad.copy()
        w.zero_grad()
        x = leaf(x0)
        T.checkpoint(seg, T.checkpoint(seg, x)).sum().backward()
        assert np.array_equal(w.grad, g_plain)
        assert np.array_equal(x.grad, gx_plain)

    def test_determinism(self):
        rng = np.random.default_rng(6)
        a, b = rng.normal(size=(8, 8)).astype(np.float32), rng.normal(size=(8, 8)).astype(np.float32)
        runs = [T.softmax(T.gelu(Tensor(a) @ Tensor(b))).data for _ in range(2)]
        assert runs[0].tobytes() == runs[1].tobytes()


@st.composite
def random_graph(draw):
    """Random composition of add/mul/matmul over a few 3x3 leaves."""
    n_leaves = draw(st.integers(2, 4))
    seed = draw(st.integers(0, 2**31 - 1))
    ops = draw(st.lists(st.tuples(st.sampled_from(["add", "mul", "matmul"]), st.integers(0, 99), st.integers(0, 99)), min_size=1, max_size=6))
    return n_leaves, seed, ops


@settings(max_examples=100, deadline=None)
@given(random_graph())
def test_chain_rule_on_random_graphs(graph):
    n_leaves, seed, ops = graph
    rng = np.random.default_rng(seed)
    leaves = {f"x{i}": leaf(rng.uniform(-1, 1, size=(3, 3))) for i in range(n_leaves)}

    def loss():
        nodes = list(leaves.values())
        for op, i, j in ops:
            a, b = nodes[i % len(nodes)], nodes[j % len(nodes)]
            nodes.append(a + b if op == "add" else a * b if op == "mul" else a @ b)
        return nodes[-1].sum()

    loss().backward()
    fd = finite_difference_grads(loss, leaves)
    for k, p in leaves.items():
        g = p.grad if p.grad is not None else np.zeros_like(fd[k])
        assert relative_error(g, fd[k]) < 1e-3 or np.abs(g - fd[k]).max() < 1e-4
