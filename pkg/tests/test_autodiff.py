import math

import numpy as np
import pytest

from xastruct.autodiff import (
    BatchNormState,
    Parameter,
    ShapeError,
    Tensor,
    adamw_step,
    add,
    avg_pool1d,
    backward,
    batch_norm_1d,
    concat,
    conv1d,
    cross_entropy_loss,
    finite_difference_check,
    gather_rows,
    layer_norm,
    linear,
    load_into,
    load_params,
    masked_mean,
    matmul,
    mse_loss,
    mul,
    relu,
    reshape,
    save_params,
    sigmoid,
    softmax,
    swish_beta,
    total,
    zero_grad,
)


def assert_grads_match(build_loss, params, tol=1e-4):
    worst, failures = finite_difference_check(build_loss, params, eps=1e-4, rel_tol=tol)
    assert worst < tol, f"max rel err {worst:.3e}, first failures {failures[:3]}"


def away_from_zero(rng, shape, floor=0.1):
    # keep relu/abs kinks out of the finite-difference stencil
    x = rng.normal(size=shape)
    return np.sign(x) * (floor + np.abs(x))


class TestTensorBasics:
    def test_finite_enforced(self):
        with pytest.raises(ValueError):
            Tensor([1.0, np.inf])

    def test_item_requires_scalar(self):
        with pytest.raises(ShapeError):
            Tensor([1.0, 2.0]).item()

    def test_parameter_state(self):
        p = Parameter(np.ones((2, 2)))
        assert p.t == 0
        assert np.all(p.m == 0) and np.all(p.v == 0)
        assert p.grad.shape == (2, 2)

    def test_shape_errors_report_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


class TestForwardValues:
    def test_sigmoid_at_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5

    def test_sigmoid_saturation_is_stable(self):
        y = sigmoid(Tensor([-800.0, 800.0]))
        assert np.allclose(y.data, [0.0, 1.0])

    def test_swish_at_zero(self):
        for beta in (0.0, 1.0, 7.5):
            assert swish_beta(Tensor(0.0), Tensor(beta)).item() == 0.0

    def test_swish_beta_zero_halves(self):
        x = Tensor([1.0, -2.0, 0.5])
        assert np.allclose(swish_beta(x, Tensor(0.0)).data, 0.5 * x.data)

    def test_masked_mean_all_ones(self):
        H = Tensor(np.arange(12.0).reshape(4, 3))
        z = masked_mean(H, Tensor(np.ones(4)))
        assert np.allclose(z.data, H.data.mean(axis=0))

    def test_masked_mean_all_zeros(self):
        H = Tensor(np.arange(12.0).reshape(4, 3))
        assert np.allclose(masked_mean(H, Tensor(np.zeros(4))).data, 0.0)

    def test_masked_mean_divides_by_node_count(self):
        H = Tensor(np.ones((4, 2)))
        m = Tensor(np.array([1.0, 1.0, 0.0, 0.0]))
        assert np.allclose(masked_mean(H, m).data, 0.5)  # 2 selected / 4 nodes
        assert np.allclose(masked_mean(H, m, by_mask_sum=True).data, 1.0)

    def test_masked_mean_empty_mask_sum_rejected(self):
        with pytest.raises(ValueError):
            masked_mean(Tensor(np.ones((3, 2))), Tensor(np.zeros(3)), by_mask_sum=True)

    def test_conv1d_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 9)))
        W = np.zeros((3, 3, 3))
        for c in range(3):
            W[c, c, 1] = 1.0  # single 1 at kernel center
        y = conv1d(x, Tensor(W), Tensor(np.zeros(3)))
        assert np.allclose(y.data, x.data)

    def test_conv1d_rejects_even_kernel(self):
        with pytest.raises(ShapeError):
            conv1d(Tensor(np.zeros((1, 2, 8))), Tensor(np.zeros((2, 2, 4))), Tensor(np.zeros(2)))

    def test_avg_pool_halves_length(self):
        x = Tensor(np.arange(12.0).reshape(1, 2, 6))
        y = avg_pool1d(x)
        assert y.shape == (1, 2, 3)
        assert np.allclose(y.data[0, 0], [0.5, 2.5, 4.5])

    def test_avg_pool_odd_length_floors(self):
        assert avg_pool1d(Tensor(np.zeros((1, 1, 7)))).shape == (1, 1, 3)

    def test_layer_norm_standardizes(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.normal(size=(6, 8)) * 3.0 + 2.0)
        y = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        assert np.max(np.abs(y.data.mean(axis=-1))) < 1e-6
        assert np.max(np.abs(y.data.var(axis=-1) - 1.0)) < 1e-6

    def test_batch_norm_train_vs_eval(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(16, 4)) * 2.0 + 1.0)
        gamma, beta = Tensor(np.ones(4)), Tensor(np.zeros(4))
        state = BatchNormState(4)
        y = batch_norm_1d(x, gamma, beta, state, training=True)
        assert np.max(np.abs(y.data.mean(axis=0))) < 1e-9
        # running stats moved toward the batch stats
        assert np.allclose(state.running_mean, 0.1 * x.data.mean(axis=0))
        y_eval = batch_norm_1d(x, gamma, beta, state, training=False)
        assert not np.allclose(y_eval.data, y.data)

    def test_batch_norm_channel_layout(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(size=(4, 3, 10)))
        state = BatchNormState(3)
        y = batch_norm_1d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), state, training=True)
        assert np.max(np.abs(y.data.mean(axis=(0, 2)))) < 1e-9

    def test_gather_rows(self):
        table = Tensor(np.arange(10.0).reshape(5, 2))
        out = gather_rows(table, [3, 0, 3])
        assert np.allclose(out.data, [[6.0, 7.0], [0.0, 1.0], [6.0, 7.0]])
        with pytest.raises(ValueError):
            gather_rows(table, [5])


class TestBackward:
    def test_linear_map_gradient(self):
        # loss = sum(W x): dloss/dW = ones outer x, dloss/dx = column sums of W
        rng = np.random.default_rng(4)
        W = Parameter(rng.normal(size=(3, 5)))
        x = Parameter(rng.normal(size=5))
        loss = total(linear(x, W))
        backward(loss)
        assert np.allclose(W.grad, np.outer(np.ones(3), x.data))
        assert np.allclose(x.grad, W.data.sum(axis=0))

    def test_disconnected_parameter_gets_zero_grad(self):
        a = Parameter(np.ones(3))
        b = Parameter(np.ones(3))
        zero_grad([a, b])
        backward(total(mul(a, a)))
        assert np.all(b.grad == 0.0)

    def test_grad_accumulates_on_reuse(self):
        a = Parameter(np.array(2.0))
        backward(total(mul(a, a)))  # d(a^2)/da = 2a = 4
        assert a.grad == pytest.approx(4.0)

    def test_non_scalar_loss_rejected(self):
        with pytest.raises(ShapeError):
            backward(Tensor(np.ones(3)))


class TestFiniteDifferences:
    def test_add_broadcast(self):
        rng = np.random.default_rng(10)
        a = Parameter(rng.normal(size=(4, 3)))
        b = Parameter(rng.normal(size=3))
        c = rng.normal(size=(4, 3))
        assert_grads_match(lambda: total(mul(add(a, b), Tensor(c))), [a, b])

    def test_mul_and_matmul(self):
        rng = np.random.default_rng(11)
        a = Parameter(rng.normal(size=(3, 4)))
        b = Parameter(rng.normal(size=(4, 2)))
        c = rng.normal(size=(3, 2))
        assert_grads_match(lambda: total(mul(matmul(a, b), Tensor(c))), [a, b])

    def test_linear_both_ranks(self):
        rng = np.random.default_rng(12)
        W = Parameter(rng.normal(size=(3, 5)))
        b = Parameter(rng.normal(size=3))
        x1 = Parameter(rng.normal(size=5))
        x2 = Parameter(rng.normal(size=(4, 5)))
        c1 = rng.normal(size=3)
        c2 = rng.normal(size=(4, 3))
        assert_grads_match(lambda: total(mul(linear(x1, W, b), Tensor(c1))), [W, b, x1])
        assert_grads_match(lambda: total(mul(linear(x2, W, b), Tensor(c2))), [W, b, x2])

    def test_concat_and_reshape(self):
        rng = np.random.default_rng(13)
        a = Parameter(rng.normal(size=(2, 3)))
        b = Parameter(rng.normal(size=(2, 2)))
        c = rng.normal(size=10)
        assert_grads_match(
            lambda: total(mul(reshape(concat([a, b], axis=1), (10,)), Tensor(c))), [a, b]
        )

    def test_sigmoid_relu_swish(self):
        rng = np.random.default_rng(14)
        x = Parameter(away_from_zero(rng, (3, 4)))
        beta = Parameter(np.array(1.3))
        c = rng.normal(size=(3, 4))
        assert_grads_match(lambda: total(mul(sigmoid(x), Tensor(c))), [x])
        assert_grads_match(lambda: total(mul(relu(x), Tensor(c))), [x])
        assert_grads_match(lambda: total(mul(swish_beta(x, beta), Tensor(c))), [x, beta])

    def test_layer_norm(self):
        rng = np.random.default_rng(15)
        x = Parameter(rng.normal(size=(4, 6)))
        gain = Parameter(rng.normal(size=6))
        bias = Parameter(rng.normal(size=6))
        c = rng.normal(size=(4, 6))
        assert_grads_match(lambda: total(mul(layer_norm(x, gain, bias), Tensor(c))), [x, gain, bias])

    def test_batch_norm_training_mode(self):
        rng = np.random.default_rng(16)
        x = Parameter(rng.normal(size=(6, 3)))
        gamma = Parameter(rng.normal(size=3))
        beta = Parameter(rng.normal(size=3))
        c = rng.normal(size=(6, 3))

        def build():
            state = BatchNormState(3)  # fresh state keeps the loss pure
            return total(mul(batch_norm_1d(x, gamma, beta, state, training=True), Tensor(c)))

        assert_grads_match(build, [x, gamma, beta])

    def test_batch_norm_eval_mode(self):
        rng = np.random.default_rng(17)
        x = Parameter(rng.normal(size=(5, 3)))
        gamma = Parameter(rng.normal(size=3))
        beta = Parameter(rng.normal(size=3))
        state = BatchNormState(3)
        state.running_mean = rng.normal(size=3)
        state.running_var = np.abs(rng.normal(size=3)) + 0.5
        c = rng.normal(size=(5, 3))
        assert_grads_match(
            lambda: total(mul(batch_norm_1d(x, gamma, beta, state, training=False), Tensor(c))),
            [x, gamma, beta],
        )

    def test_batch_norm_channels(self):
        rng = np.random.default_rng(18)
        x = Parameter(rng.normal(size=(2, 3, 8)))
        gamma = Parameter(rng.normal(size=3))
        beta = Parameter(rng.normal(size=3))
        c = rng.normal(size=(2, 3, 8))

        def build():
            state = BatchNormState(3)
            return total(mul(batch_norm_1d(x, gamma, beta, state, training=True), Tensor(c)))

        assert_grads_match(build, [x, gamma, beta])

    def test_conv_and_pool(self):
        rng = np.random.default_rng(19)
        x = Parameter(rng.normal(size=(2, 3, 7)))
        W = Parameter(rng.normal(size=(4, 3, 3)))
        b = Parameter(rng.normal(size=4))
        c = rng.normal(size=(2, 4, 3))
        assert_grads_match(
            lambda: total(mul(avg_pool1d(conv1d(x, W, b)), Tensor(c))), [x, W, b]
        )

    def test_masked_mean(self):
        rng = np.random.default_rng(20)
        H = Parameter(rng.normal(size=(5, 4)))
        m = Tensor(np.array([1.0, 0.0, 1.0, 1.0, 0.0]))
        c = rng.normal(size=4)
        assert_grads_match(lambda: total(mul(masked_mean(H, m), Tensor(c))), [H])
        assert_grads_match(
            lambda: total(mul(masked_mean(H, m, by_mask_sum=True), Tensor(c))), [H]
        )

    def test_gather_rows_scatter_add(self):
        rng = np.random.default_rng(21)
        table = Parameter(rng.normal(size=(5, 3)))
        c = rng.normal(size=(4, 3))
        assert_grads_match(
            lambda: total(mul(gather_rows(table, [1, 1, 3, 0]), Tensor(c))), [table]
        )

    def test_losses(self):
        rng = np.random.default_rng(22)
        pred = Parameter(rng.normal(size=(4, 3)))
        target = rng.normal(size=(4, 3))
        assert_grads_match(lambda: mse_loss(pred, target), [pred])
        logits = Parameter(rng.normal(size=(5, 4)))
        labels = np.array([0, 3, 2, 1, 3])
        assert_grads_match(lambda: cross_entropy_loss(logits, labels), [logits])

    def test_composed_network(self):
        rng = np.random.default_rng(23)
        W1 = Parameter(rng.normal(size=(6, 4)) * 0.5)
        b1 = Parameter(rng.normal(size=6) * 0.1)
        gain = Parameter(np.ones(6))
        bias = Parameter(np.zeros(6))
        W2 = Parameter(rng.normal(size=(2, 6)) * 0.5)
        b2 = Parameter(rng.normal(size=2) * 0.1)
        x = Tensor(rng.normal(size=(3, 4)))
        target = rng.normal(size=(3, 2))

        def build():
            h = layer_norm(linear(x, W1, b1), gain, bias)
            h = mul(h, sigmoid(h))
            return mse_loss(linear(h, W2, b2), target)

        assert_grads_match(build, [W1, b1, gain, bias, W2, b2])


class TestLosses:
    def test_mse_zero_at_match(self):
        p = Tensor(np.array([1.0, 2.0, 3.0]))
        assert mse_loss(p, np.array([1.0, 2.0, 3.0])).item() == 0.0

    def test_mse_shape_error(self):
        with pytest.raises(ShapeError):
            mse_loss(Tensor(np.zeros(3)), np.zeros(4))

    def test_uniform_logits_give_log_c(self):
        for c in (2, 5, 13):
            ce = cross_entropy_loss(Tensor(np.zeros(c)), 0)
            assert ce.item() == pytest.approx(math.log(c), abs=1e-12)

    def test_two_class_hand_value(self):
        # ce([2, 0], class 0) = -log(e^2/(e^2+1)) = log(1 + e^-2)
        ce = cross_entropy_loss(Tensor(np.array([2.0, 0.0])), 0)
        assert ce.item() == pytest.approx(math.log(1.0 + math.exp(-2.0)), abs=1e-12)
        assert ce.item() == pytest.approx(0.126928, abs=1e-6)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            cross_entropy_loss(Tensor(np.zeros(3)), 3)
        with pytest.raises(ValueError):
            cross_entropy_loss(Tensor(np.zeros((2, 3))), np.array([0, -1]))

    def test_softmax_normalized(self):
        rng = np.random.default_rng(24)
        p = softmax(rng.normal(size=(10, 7)) * 30.0)
        assert np.max(np.abs(p.sum(axis=-1) - 1.0)) < 1e-9

    def test_batch_ce_is_mean_of_rows(self):
        rng = np.random.default_rng(25)
        logits = rng.normal(size=(6, 4))
        labels = np.array([1, 0, 3, 2, 2, 0])
        per_row = [cross_entropy_loss(Tensor(l), int(y)).item() for l, y in zip(logits, labels)]
        batch = cross_entropy_loss(Tensor(logits), labels).item()
        assert batch == pytest.approx(np.mean(per_row), abs=1e-12)


class TestAdamW:
    def test_pure_decay_with_zero_grad(self):
        p = Parameter(np.array([2.0, -4.0]))
        zero_grad([p])
        adamw_step([p], lr=0.1, weight_decay=0.01)
        assert np.allclose(p.data, [2.0, -4.0] - 0.1 * 0.01 * np.array([2.0, -4.0]), atol=1e-15)

    def test_descends_on_quadratic(self):
        w = Parameter(np.array(1.0))
        zero_grad([w])
        backward(mul(w, w))
        adamw_step([w], lr=0.1, weight_decay=0.0)
        assert float(w.data) < 1.0

    def test_converges_on_two_parameter_quadratic(self):
        # f(a, b) = (a - 3)^2 + 2 (b + 1)^2, minimum 0
        a = Parameter(np.array(0.0))
        b = Parameter(np.array(0.0))

        def loss():
            da = add(a, Tensor(np.array(-3.0)))
            db = add(b, Tensor(np.array(1.0)))
            return add(mul(da, da), mul(Tensor(np.array(2.0)), mul(db, db)))

        initial = loss().item()
        for _ in range(200):
            zero_grad([a, b])
            backward(loss())
            adamw_step([a, b], lr=0.1, weight_decay=0.0)
        assert loss().item() < 1e-3 * initial

    def test_matches_reference_adam_when_decay_is_zero(self):
        # independent Adam written straight from the update equations
        rng = np.random.default_rng(26)
        w0 = rng.normal(size=4)
        target = rng.normal(size=4)

        p = Parameter(w0.copy())
        ref_w = w0.copy()
        ref_m = np.zeros(4)
        ref_v = np.zeros(4)
        lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
        for t in range(1, 51):
            zero_grad([p])
            backward(mse_loss(p, target))
            adamw_step([p], lr=lr, weight_decay=0.0, beta1=b1, beta2=b2, eps=eps)

            g = 2.0 * (ref_w - target) / 4.0
            ref_m = b1 * ref_m + (1 - b1) * g
            ref_v = b2 * ref_v + (1 - b2) * g * g
            ref_w = ref_w - lr * (ref_m / (1 - b1**t)) / (np.sqrt(ref_v / (1 - b2**t)) + eps)
            assert np.allclose(p.data, ref_w, atol=1e-14), f"diverged at step {t}"


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(27)
        params = {
            "layer.W": Parameter(rng.normal(size=(3, 2))),
            "layer.b": Parameter(rng.normal(size=3)),
        }
        path = tmp_path / "model.json"
        save_params(params, path, header={"d": 2})
        header, arrays = load_params(path)
        assert header == {"d": 2}
        fresh = {
            "layer.W": Parameter(np.zeros((3, 2))),
            "layer.b": Parameter(np.zeros(3)),
        }
        load_into(fresh, arrays)
        assert np.array_equal(fresh["layer.W"].data, params["layer.W"].data)

    def test_deterministic_bytes(self, tmp_path):
        params = {"b": Parameter(np.array([1.0, 2.0])), "a": Parameter(np.array(3.0))}
        save_params(params, tmp_path / "x.json", header={"k": 1})
        save_params(params, tmp_path / "y.json", header={"k": 1})
        assert (tmp_path / "x.json").read_bytes() == (tmp_path / "y.json").read_bytes()

    def test_shape_mismatch_rejected(self, tmp_path):
        save_params({"w": Parameter(np.zeros(3))}, tmp_path / "m.json")
        _, arrays = load_params(tmp_path / "m.json")
        with pytest.raises(ShapeError):
            load_into({"w": Parameter(np.zeros(4))}, arrays)

    def test_missing_key_rejected(self, tmp_path):
        save_params({"w": Parameter(np.zeros(3))}, tmp_path / "m.json")
        _, arrays = load_params(tmp_path / "m.json")
        with pytest.raises(KeyError):
            load_into({"w": Parameter(np.zeros(3)), "extra": Parameter(np.zeros(1))}, arrays)
