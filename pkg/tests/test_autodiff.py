"""Differentiation engine tests: values, gradient rules, tape semantics.

Every differentiable operation is checked against a central
finite-difference oracle on at least three randomized shapes.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import finite_difference, rel_err, tape_grads

from s3pet import autodiff as ad
from s3pet.autodiff import Tape, Tensor
from s3pet.errors import DimensionError


def _rand(rng, shape):
    return rng.standard_normal(shape)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 0.0], [0.0, 1.0]])
        b = Tensor([[2.0, 3.0], [4.0, 5.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, b.data)

    def test_hand_computed(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_inner_dim_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((4, 5))), Tensor(np.ones((4, 3))))

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(0)
        a = Tensor(_rand(rng, (4, 5)), requires_grad=True)
        b = Tensor(_rand(rng, (5, 3)), requires_grad=True)
        ga, gb = tape_grads(lambda: ad.matmul(a, b).sum(), [a, b])
        fa, fb = finite_difference(lambda x, y: float(np.sum(x @ y)), [a.data, b.data])
        assert rel_err(ga, fa) < 1e-6
        assert rel_err(gb, fb) < 1e-6

    def test_batched_operand_gradients(self):
        rng = np.random.default_rng(1)
        a = Tensor(_rand(rng, (2, 4, 5)), requires_grad=True)
        w = Tensor(_rand(rng, (5, 3)), requires_grad=True)
        ga, gw = tape_grads(lambda: ad.matmul(a, w).sum(), [a, w])
        fa, fw = finite_difference(lambda x, y: float(np.sum(np.matmul(x, y))), [a.data, w.data])
        assert rel_err(ga, fa) < 1e-4
        assert rel_err(gw, fw) < 1e-4


class TestSigmoid:
    def test_symmetry_point(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_saturation_no_overflow(self):
        y = ad.sigmoid(Tensor(1e3)).item()
        assert abs(y - 1.0) < 1e-12
        assert np.isfinite(y)

    def test_gradient_at_zero_is_quarter(self):
        x = Tensor(np.zeros(()), requires_grad=True)
        (g,) = tape_grads(lambda: ad.sigmoid(x).sum(), [x])
        assert g == 0.25


class TestDetach:
    def test_value_preserved(self):
        x = Tensor(np.linspace(-3, 3, 7), requires_grad=True)
        np.testing.assert_array_equal(ad.detach(x).data, x.data)

    def test_single_path_gradient(self):
        # loss = sum(detach(x) * x): only the live factor contributes, so
        # grad(x) = x. Cross-checked against finite differences applied to
        # the non-detached factor alone.
        rng = np.random.default_rng(2)
        x = Tensor(_rand(rng, (5,)), requires_grad=True)
        (g,) = tape_grads(lambda: (ad.detach(x) * x).sum(), [x])
        np.testing.assert_allclose(g, x.data, atol=1e-12)
        frozen = x.data.copy()
        (fd,) = finite_difference(lambda live: float(np.sum(frozen * live)), [x.data.copy()])
        assert rel_err(g, fd) < 1e-6

    def test_fully_detached_gives_zero(self):
        x = Tensor(np.ones(4), requires_grad=True)
        (g,) = tape_grads(lambda: ad.detach(x).sum(), [x])
        np.testing.assert_array_equal(g, np.zeros(4))

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    @settings(max_examples=50, deadline=None)
    def test_value_transparent_gradient_opaque(self, vals):
        # Replacing x by detach(x) never changes the forward value, and the
        # detached edge contributes exactly zero gradient.
        x = Tensor(np.asarray(vals), requires_grad=True)
        with Tape() as tape:
            live = ad.sigmoid(x).sum()
            mixed = (ad.sigmoid(ad.detach(x)) + ad.sigmoid(x) * 0.0).sum()
        assert mixed.item() == live.item()
        tape.backward(mixed)
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))
        tape.release()


class TestLayernormScale:
    def test_unit_variance_identity(self):
        # Rows built with population variance exactly 1, s=1, b=0.
        row = np.array([1.0, -1.0, 1.0, -1.0])
        h = Tensor(np.stack([row, row + 3.0]))
        out = ad.layernorm_scale(h, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, h.data, atol=1e-12)

    def test_constant_row_is_clamped_finite(self):
        h = Tensor(np.full((2, 4), 7.0))
        out = ad.layernorm_scale(h, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, 7.0 / ad.VAR_FLOOR)

    def test_gradient_matches_finite_difference(self):
        rng = np.random.default_rng(3)
        h = Tensor(_rand(rng, (3, 8)), requires_grad=True)
        s = Tensor(_rand(rng, (8,)), requires_grad=True)
        b = Tensor(_rand(rng, (8,)), requires_grad=True)
        grads = tape_grads(lambda: ad.layernorm_scale(h, s, b).sum(), [h, s, b])

        def ref(hd, sd, bd):
            v = np.maximum(np.var(hd, axis=-1, keepdims=True), ad.VAR_FLOOR)
            return float(np.sum(hd / v * sd + bd))

        fds = finite_difference(ref, [h.data, s.data, b.data])
        for g, fd in zip(grads, fds):
            assert rel_err(g, fd) < 1e-5


def _unary_cases():
    # op name -> (tensor builder, autodiff fn, reference forward fn)
    return {
        "sigmoid": (ad.sigmoid, lambda x: 1.0 / (1.0 + np.exp(-x))),
        "relu": (ad.relu, lambda x: np.maximum(x, 0.0)),
        "exp": (ad.exp, np.exp),
        "log": (ad.log, np.log),
        "softmax": (ad.softmax, lambda x: np.exp(x - x.max(-1, keepdims=True)) / np.exp(x - x.max(-1, keepdims=True)).sum(-1, keepdims=True)),
        "mean": (lambda t: ad.reduce_mean(t, axis=-1), lambda x: np.mean(x, axis=-1)),
        "variance": (lambda t: ad.variance(t, axis=-1), lambda x: np.var(x, axis=-1)),
        "sum": (lambda t: ad.reduce_sum(t, axis=0), lambda x: np.sum(x, axis=0)),
        "transpose": (ad.transpose_last2, lambda x: np.swapaxes(x, -1, -2)),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@pytest.mark.parametrize("shape", [(6,), (3, 5), (2, 3, 4)], ids=str)
def test_unary_op_gradients_vs_finite_difference(name, shape):
    op, ref = _unary_cases()[name]
    if name == "transpose" and len(shape) < 2:
        pytest.skip("needs matrix input")
    rng = np.random.default_rng(hash(name) % 2**32)
    base = rng.standard_normal(shape)
    if name == "log":
        base = np.abs(base) + 0.5
    # Weighted sum makes the downstream gradient non-uniform.
    w = rng.standard_normal(np.asarray(ref(base)).shape)
    x = Tensor(base, requires_grad=True)
    (g,) = tape_grads(lambda: (op(x) * Tensor(w)).sum(), [x])
    (fd,) = finite_difference(lambda a: float(np.sum(ref(a) * w)), [x.data.copy()])
    assert rel_err(g, fd) < 1e-4


@pytest.mark.parametrize("op,ref", [
    (ad.add, lambda a, b: a + b),
    (ad.sub, lambda a, b: a - b),
    (ad.mul, lambda a, b: a * b),
    (ad.div, lambda a, b: a / b),
], ids=["add", "sub", "mul", "div"])
@pytest.mark.parametrize("shapes", [((4,), (4,)), ((3, 4), (4,)), ((2, 3, 4), (4,)), ((2, 3, 4), ())], ids=str)
def test_binary_op_gradients_with_trailing_broadcast(op, ref, shapes):
    rng = np.random.default_rng(7)
    a = Tensor(rng.standard_normal(shapes[0]), requires_grad=True)
    b = Tensor(rng.standard_normal(shapes[1]) + 2.0, requires_grad=True)  # away from 0 for div
    ga, gb = tape_grads(lambda: op(a, b).sum(), [a, b])
    fa, fb = finite_difference(lambda x, y: float(np.sum(ref(x, y))), [a.data.copy(), b.data.copy()])
    assert rel_err(ga, fa) < 1e-4
    assert rel_err(gb, fb) < 1e-4


def test_embedding_lookup_gradient_scatters():
    rng = np.random.default_rng(11)
    table = Tensor(rng.standard_normal((7, 3)), requires_grad=True)
    ids = np.array([[0, 2, 2], [6, 0, 1]])
    w = rng.standard_normal((2, 3, 3))
    (g,) = tape_grads(lambda: (ad.embedding(table, ids) * Tensor(w)).sum(), [table])
    (fd,) = finite_difference(lambda t: float(np.sum(t[ids] * w)), [table.data.copy()])
    assert rel_err(g, fd) < 1e-4


def test_embedding_rejects_out_of_range_ids():
    table = Tensor(np.zeros((4, 2)))
    with pytest.raises(DimensionError):
        ad.embedding(table, np.array([0, 4]))


@pytest.mark.parametrize("shape", [(5, 6), (2, 3, 6), (1, 6)], ids=str)
def test_cross_entropy_gradient_vs_finite_difference(shape):
    rng = np.random.default_rng(13)
    logits = Tensor(rng.standard_normal(shape), requires_grad=True)
    targets = rng.integers(0, shape[-1], size=shape[:-1])
    (g,) = tape_grads(lambda: ad.cross_entropy(logits, targets), [logits])

    def ref(x):
        flat = x.reshape(-1, shape[-1])
        t = targets.reshape(-1)
        shifted = flat - flat.max(-1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(-1))
        return float(-np.mean(shifted[np.arange(len(t)), t] - logz))

    (fd,) = finite_difference(ref, [logits.data.copy()])
    assert rel_err(g, fd) < 1e-4


def test_index_selects_and_scatters():
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    (g,) = tape_grads(lambda: ad.index(x, 1) * 5.0, [x])
    np.testing.assert_array_equal(g, [0.0, 5.0, 0.0])


def test_clamp_blocks_gradient_outside_bounds():
    x = Tensor(np.array([-1.0, 0.2, 0.8, 2.0]), requires_grad=True)
    (g,) = tape_grads(lambda: ad.clamp(x, 0.0, 1.0).sum(), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 1.0, 0.0])


class TestTapeSemantics:
    def test_shared_subexpression_accumulates_like_duplicated_inputs(self):
        rng = np.random.default_rng(17)
        base = rng.standard_normal(6)

        x = Tensor(base.copy(), requires_grad=True)
        (g_shared,) = tape_grads(lambda: (ad.sigmoid(x) * ad.sigmoid(x)).sum(), [x])

        # Oracle: duplicate the input, differentiate each copy separately.
        x1 = Tensor(base.copy(), requires_grad=True)
        x2 = Tensor(base.copy(), requires_grad=True)
        g1, g2 = tape_grads(lambda: (ad.sigmoid(x1) * ad.sigmoid(x2)).sum(), [x1, x2])
        np.testing.assert_allclose(g_shared, g1 + g2, atol=1e-14)

    def test_reverse_append_order_visits_consumers_first(self):
        x = Tensor(np.array(2.0), requires_grad=True)
        with Tape() as tape:
            y = x * 3.0
            z = y * y
        order = [n.op for n in tape.nodes]
        assert order == ["mul", "mul"]
        tape.backward(z)
        assert x.grad == pytest.approx(2 * 3.0 * 3.0 * 2.0)
        tape.release()

    def test_leaf_gradients_fully_accumulated_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = (x * 2.0).sum() + (x * 3.0).sum()
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, np.full(3, 5.0))
        tape.release()

    def test_release_clears_all_gradients(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            loss = (x * 2.0).sum()
        tape.backward(loss)
        tape.release()
        assert x.grad is None

    def test_no_tape_means_pure_forward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = ad.sigmoid(x)
        assert y.requires_grad
        np.testing.assert_allclose(y.data, 1.0 / (1.0 + np.exp(-1.0)))

    def test_backward_rejects_nonscalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(DimensionError):
            tape.backward(y)
