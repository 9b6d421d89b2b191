"""Autodiff substrate: op oracles, gradient checks, optimizer contracts."""

import numpy as np
import pytest

from refilter.errors import ConfigError, DimensionError, NumericsError, TrainingError
from refilter.numerics import (
    AdamW,
    Parameter,
    SIGMOID_CLAMP,
    Tensor,
    concat,
    cross_entropy,
    dropout,
    embedding,
    finite_diff_check,
    gather_positions,
    gelu,
    layer_norm,
    matmul,
    scatter_positions,
    sigmoid,
    softmax,
    sorted_sum,
    zero_grads,
)


class TestMatmul:
    def test_identity(self):
        m = np.array([[2.0, 3.0], [4.0, 5.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_product(self):
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_zero_annihilates(self):
        m = np.random.default_rng(0).normal(size=(3, 3))
        out = matmul(Tensor(np.zeros((3, 3))), Tensor(m))
        np.testing.assert_array_equal(out.data, np.zeros((3, 3)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_batched_gradients(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        out = matmul(a, b)
        (out * out).sum().backward()
        assert a.grad.shape == a.shape and b.grad.shape == b.shape


class TestSigmoid:
    def test_zero_maps_to_half(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_saturation_stays_interior(self):
        out = sigmoid(Tensor([1e6, -1e6, 40.0, -40.0]))
        assert np.all(out.data > 0.0) and np.all(out.data < 1.0)
        assert out.data[0] > 0.99

    def test_symmetry(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-50, 50, size=1000)
        total = sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data
        np.testing.assert_allclose(total, 1.0, atol=1e-12)

    def test_strictly_interior_on_million_inputs(self):
        rng = np.random.default_rng(3)
        x = rng.normal(scale=50.0, size=1_000_000)
        out = sigmoid(Tensor(x)).data
        assert out.min() > 0.0 and out.max() < 1.0

    def test_clamp_zeroes_gradient_outside(self):
        x = Tensor([0.0, SIGMOID_CLAMP + 5.0], requires_grad=True)
        sigmoid(x).sum().backward()
        assert x.grad[0] == pytest.approx(0.25)
        assert x.grad[1] == 0.0


class TestLayerNorm:
    def test_constant_row_maps_to_bias(self):
        x = Tensor(np.full((2, 4), 3.0))
        out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_two_point_row(self):
        out = layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)

    def test_rows_have_zero_mean_unit_variance(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.normal(size=(8, 16)))
        out = layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
        np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-6)
        np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-4)

    def test_affine_shape_check(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.random.default_rng(5).normal(size=(3, 3)))
        out = dropout(x, 0.5, training=False, seed=0)
        assert out is x

    def test_p_zero_is_identity(self):
        x = Tensor(np.ones((2, 2)))
        assert dropout(x, 0.0, training=True, seed=0) is x

    def test_seed_reproduces_mask(self):
        x = Tensor(np.ones((100,)))
        a = dropout(x, 0.5, training=True, seed=11).data
        b = dropout(x, 0.5, training=True, seed=11).data
        np.testing.assert_array_equal(a, b)
        c = dropout(x, 0.5, training=True, seed=12).data
        assert not np.array_equal(a, c)

    def test_survivors_rescaled(self):
        x = Tensor(np.ones((10000,)))
        out = dropout(x, 0.25, training=True, seed=3).data
        kept = out[out != 0.0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)

    def test_p_out_of_range(self):
        with pytest.raises(ConfigError):
            dropout(Tensor(np.ones(3)), 1.0, training=True, seed=0)


class TestCrossEntropy:
    def test_uniform_logits_give_log_vocab(self):
        v = 17
        logits = Tensor(np.zeros((2, 3, v)))
        targets = np.zeros((2, 3), dtype=int)
        loss = cross_entropy(logits, targets)
        assert loss.item() == pytest.approx(np.log(v))

    def test_dominant_logit_near_zero_loss(self):
        logits = np.full((1, 1, 5), -10.0)
        logits[0, 0, 2] = 10.0
        loss = cross_entropy(Tensor(logits), np.array([[2]]))
        assert loss.item() < 1e-6

    def test_all_ignored_is_zero_with_zero_grad(self):
        logits = Tensor(np.random.default_rng(6).normal(size=(2, 3, 4)), requires_grad=True)
        loss = cross_entropy(logits, np.full((2, 3), -100))
        assert loss.item() == 0.0
        loss.backward()
        assert logits.grad is None or np.all(logits.grad == 0.0)

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((1, 1, 4))), np.array([[9]]))

    def test_ignored_positions_excluded_from_mean(self):
        logits = np.zeros((1, 2, 4))
        targets = np.array([[1, -100]])
        loss = cross_entropy(Tensor(logits), targets)
        assert loss.item() == pytest.approx(np.log(4))


class TestAdamW:
    def _params(self):
        return {
            "a": Parameter("a", Tensor(np.ones(3))),
            "b": Parameter("b", Tensor(np.full(2, 2.0)), trainable=False),
        }

    def test_zero_gradient_changes_only_by_weight_decay(self):
        params = self._params()
        opt = AdamW(params, lr=0.1, total_steps=10, warmup_frac=0.0, weight_decay=0.5)
        params["a"].tensor.grad = np.zeros(3)
        opt.step()
        np.testing.assert_allclose(params["a"].data, 1.0 * (1 - 0.1 * 0.5))

    def test_frozen_parameter_bitwise_unchanged(self):
        params = self._params()
        before = params["b"].data.copy()
        opt = AdamW(params, lr=0.1, total_steps=10)
        params["a"].tensor.grad = np.ones(3)
        params["b"].tensor.grad = np.ones(2)  # present but must be ignored
        opt.step()
        assert np.array_equal(params["b"].data, before)

    def test_warmup_schedule_closed_form(self):
        params = self._params()
        opt = AdamW(params, lr=1.0, total_steps=1000, warmup_frac=0.05)
        # warmup over the first 50 steps: lr(t) = base * min(1, t / 50)
        assert opt.lr_at(1) == pytest.approx(1.0 / 50)
        assert opt.lr_at(25) == pytest.approx(0.5)
        assert opt.lr_at(50) == pytest.approx(1.0)
        assert opt.lr_at(700) == pytest.approx(1.0)

    def test_missing_gradient_raises(self):
        params = self._params()
        opt = AdamW(params, lr=0.1, total_steps=10)
        with pytest.raises(TrainingError, match="'a'"):
            opt.step()

    def test_state_roundtrip(self):
        params = self._params()
        opt = AdamW(params, lr=0.1, total_steps=10)
        params["a"].tensor.grad = np.ones(3)
        opt.step()
        state = opt.state_dict()
        opt2 = AdamW(self._params(), lr=0.1, total_steps=10)
        opt2.load_state_dict(state)
        assert opt2.step_count == 1
        np.testing.assert_array_equal(opt2.m["a"], opt.m["a"])


class TestFiniteDiff:
    def test_quadratic_matches_closed_form(self):
        p = Parameter("x", Tensor([1.0, 2.0]))

        def loss_fn():
            t = p.tensor
            return (t * t).sum()

        report = finite_diff_check(loss_fn, {"x": p}, tol=1e-6)
        assert report.passed
        analytic = sorted(e.analytic for e in report.entries)
        np.testing.assert_allclose(analytic, [2.0, 4.0], rtol=1e-9)

    def test_constant_loss_zero_gradient(self):
        p = Parameter("x", Tensor([3.0]))

        def loss_fn():
            return p.tensor.sum() * 0.0

        report = finite_diff_check(loss_fn, {"x": p}, tol=1e-6)
        assert report.passed

    def test_nonfinite_loss_raises(self):
        p = Parameter("x", Tensor([0.0]))

        def loss_fn():
            from refilter.numerics import log

            return log(p.tensor).sum()  # log(0) = -inf

        with pytest.raises(NumericsError):
            finite_diff_check(loss_fn, {"x": p})


def _check_op(build, n_params_shapes, seed=0, tol=1e-4):
    """Generic central-difference check over random small tensors."""
    rng = np.random.default_rng(seed)
    params = {
        f"p{i}": Parameter(f"p{i}", Tensor(rng.normal(size=shape)))
        for i, shape in enumerate(n_params_shapes)
    }

    def loss_fn():
        return build([params[f"p{i}"].tensor for i in range(len(n_params_shapes))])

    report = finite_diff_check(loss_fn, params, tol=tol, max_coords_per_param=6, seed=seed)
    assert report.passed, report.summary()


class TestOpGradients:
    """Analytic vs central-difference gradients on random small tensors."""

    def test_matmul(self):
        _check_op(lambda ps: (matmul(ps[0], ps[1]) * matmul(ps[0], ps[1])).sum(),
                  [(3, 4), (4, 2)])

    def test_sigmoid(self):
        _check_op(lambda ps: (sigmoid(ps[0]) * sigmoid(ps[0])).sum(), [(5, 3)])

    def test_gelu(self):
        _check_op(lambda ps: (gelu(ps[0]) * gelu(ps[0])).sum(), [(4, 4)])

    def test_softmax(self):
        _check_op(lambda ps: (softmax(ps[0]) * softmax(ps[0])).sum(), [(3, 5)])

    def test_layer_norm(self):
        def build(ps):
            out = layer_norm(ps[0], ps[1], ps[2])
            return (out * out).sum()

        _check_op(build, [(4, 6), (6,), (6,)])

    def test_sorted_sum(self):
        _check_op(lambda ps: (sorted_sum(ps[0], axis=1) * sorted_sum(ps[0], axis=1)).sum(),
                  [(3, 7)])

    def test_concat_and_slice(self):
        def build(ps):
            c = concat([ps[0], ps[1]], axis=1)
            return (c[:, 1:4] * c[:, 1:4]).sum()

        _check_op(build, [(2, 3), (2, 4)])

    def test_embedding(self):
        ids = np.array([[0, 2], [1, 1]])
        _check_op(lambda ps: (embedding(ps[0], ids) * embedding(ps[0], ids)).sum(),
                  [(4, 5)])

    def test_gather_scatter_positions(self):
        pos = np.array([[1], [2]])

        def build(ps):
            rows = gather_positions(ps[0], pos)
            edited = scatter_positions(ps[0], pos, rows * 2.0)
            return (edited * edited).sum()

        _check_op(build, [(2, 4, 3)])

    def test_cross_entropy(self):
        targets = np.array([[1, 3], [0, -100]])
        _check_op(lambda ps: cross_entropy(ps[0], targets), [(2, 2, 5)])

    def test_dropout_fixed_seed(self):
        _check_op(
            lambda ps: (dropout(ps[0], 0.3, True, seed=7)
                        * dropout(ps[0], 0.3, True, seed=7)).sum(),
            [(4, 5)],
        )


class TestSortedSum:
    def test_permutation_invariant_bitwise(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 9, 4))
        base = sorted_sum(Tensor(x), axis=1).data
        for _ in range(10):
            perm = rng.permutation(9)
            out = sorted_sum(Tensor(x[:, perm, :]), axis=1).data
            assert np.array_equal(base, out)

    def test_equals_plain_sum_numerically(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 50))
        np.testing.assert_allclose(
            sorted_sum(Tensor(x), axis=1).data, x.sum(axis=1), rtol=1e-12
        )


class TestScatterGuards:
    def test_duplicate_positions_rejected(self):
        x = Tensor(np.zeros((1, 4, 2)))
        rows = Tensor(np.ones((1, 2, 2)))
        with pytest.raises(DimensionError):
            scatter_positions(x, np.array([[1, 1]]), rows)

    def test_out_of_range_position(self):
        x = Tensor(np.zeros((1, 4, 2)))
        with pytest.raises(IndexError):
            gather_positions(x, np.array([[4]]))


class TestDeterminism:
    def test_same_inputs_same_outputs(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(4, 8))
        a = gelu(Tensor(x)).data
        b = gelu(Tensor(x)).data
        assert np.array_equal(a, b)
