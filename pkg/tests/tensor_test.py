import functools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from purearl import agents, tensor
from purearl.errors import ConfigError, NumericAbort, ShapeError


def numeric_gradient(func, param, eps=1e-6):
    grad = np.zeros_like(param.value)
    it = np.nditer(param.value, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = param.value[idx]
        param.value[idx] = original + eps
        plus = func().item()
        param.value[idx] = original - eps
        minus = func().item()
        param.value[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def random_head(rng, layer_norm):
    """gaussian head with every weight drawn, log_std strictly inside its clamp"""
    head = tensor.GaussianPolicyHead("pi", [3, 4, 2], layer_norm, rng=rng)
    for param in head.net.online:
        param.value = rng.normal(scale=0.5, size=param.value.shape)
    head.log_std.value = rng.uniform(-1.0, 0.5, size=2)
    return head


def assert_matches_finite_difference(loss, params, label, analytic=None):
    """backward() of analytic (default loss) against central differences of loss"""
    grads = tensor.gradients_for(tensor.backward((analytic or loss)()), params)
    for param, grad in zip(params, grads):
        expected = numeric_gradient(loss, param)
        np.testing.assert_allclose(grad, expected, rtol=1e-4, atol=1e-6, err_msg=f"{label} {param.name}")


# squares of the smallest magnitudes stay normal
coordinates = st.floats(min_value=-50, max_value=50, allow_nan=False).filter(
    lambda x: x == 0.0 or abs(x) > 1e-100
)

finite_vectors = arrays(np.float64, st.integers(min_value=1, max_value=6), elements=coordinates)


class TestAutodiff:
    def test_simple_ops(self):
        a = tensor.Parameter(np.array([1.0, 2.0, 3.0]), "a")
        b = tensor.Parameter(np.array([0.5, -1.0, 2.0]), "b")
        loss = tensor.reduce_sum(a * b + a / b - tensor.square(a))
        grads = tensor.backward(loss)
        np.testing.assert_allclose(grads[a], b.value + 1 / b.value - 2 * a.value)
        np.testing.assert_allclose(grads[b], a.value - a.value / b.value**2)

    def test_broadcast(self):
        a = tensor.Parameter(np.ones((4, 3)), "a")
        b = tensor.Parameter(np.array([1.0, 2.0, 3.0]), "b")
        grads = tensor.backward(tensor.reduce_sum(a + b))
        np.testing.assert_allclose(grads[b], [4.0, 4.0, 4.0])

    @pytest.mark.parametrize("layer_norm", [True, False])
    def test_mlp_finite_difference(self, layer_norm):
        rng = np.random.default_rng(3)
        net = tensor.NetBundle("v", [3, 5, 1], layer_norm, rng=rng)
        x = rng.standard_normal((4, 3))

        def loss():
            return tensor.reduce_mean(tensor.square(tensor.mlp_forward(net, x)))

        grads = tensor.backward(loss())
        for param in net.online:
            expected = numeric_gradient(loss, param)
            np.testing.assert_allclose(grads[param], expected, rtol=1e-4, atol=1e-6)

    def test_log_softmax_finite_difference(self):
        a = tensor.Parameter(np.array([[0.1, -0.3, 2.0], [1.0, 1.0, 1.0]]), "a")
        w = np.array([[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]])

        def loss():
            return tensor.reduce_sum(tensor.log_softmax(a) * w)

        grads = tensor.backward(loss())
        np.testing.assert_allclose(grads[a], numeric_gradient(loss, a), rtol=1e-5, atol=1e-7)

    def test_expectile_finite_difference(self):
        rng = np.random.default_rng(10)
        for draw in range(100):
            net = tensor.NetBundle("v", [4, 5, 1], draw % 2 == 0, rng=rng)
            x = rng.standard_normal((6, 4))
            target = rng.standard_normal((6, 1))
            tau = float(rng.uniform(0.1, 0.9))

            def loss():
                return tensor.reduce_mean(tensor.expectile_loss(target - tensor.mlp_forward(net, x), tau))

            assert_matches_finite_difference(loss, net.online, draw)

    def test_awr_finite_difference(self):
        rng = np.random.default_rng(11)
        for draw in range(100):
            head = random_head(rng, draw % 2 == 0)
            x = rng.standard_normal((5, 3))
            actions = rng.standard_normal((5, 2))
            weights = agents.awr_weights(rng.normal(scale=0.5, size=5), 3.0, 100.0)
            loss = functools.partial(agents.awr_loss, head, x, actions, weights)
            assert_matches_finite_difference(loss, head.parameters(), draw)

    def test_ddpgbc_finite_difference(self):
        rng = np.random.default_rng(12)
        for draw in range(100):
            head = random_head(rng, draw % 2 == 0)
            critic_net = tensor.NetBundle("q", [5, 4, 1], rng=rng)
            x = rng.standard_normal((5, 3))
            actions = rng.standard_normal((5, 2))

            def critic(mu):
                return tensor.mlp_forward(critic_net, tensor.concat([x, mu]), frozen=True)

            # the Q scale is a constant of the loss, so it stays fixed while differencing
            scale = max(float(np.mean(np.abs(critic(head.mean(x)).value))), 1e-6)

            def fixed_scale_loss():
                q = critic(head.mean(x))
                return -(tensor.reduce_mean(q) * (1.0 / scale)) - 0.5 * tensor.reduce_mean(head.log_prob(x, actions))

            loss = functools.partial(agents.ddpgbc_loss, head, x, actions, critic, 0.5)
            assert math.isclose(loss().item(), fixed_scale_loss().item(), rel_tol=1e-12), draw
            grads = tensor.backward(loss())
            for param in critic_net.online:
                assert param not in grads, param
            assert_matches_finite_difference(fixed_scale_loss, head.parameters(), draw, analytic=loss)

    def test_stopgrad(self):
        a = tensor.Parameter(np.array([1.0, 2.0]), "a")
        b = tensor.Parameter(np.array([3.0, 4.0]), "b")
        loss = tensor.reduce_sum(a * tensor.stopgrad(b))
        grads = tensor.backward(loss)
        assert b not in grads, grads
        np.testing.assert_allclose(grads[a], b.value)

    def test_frozen_forward_passes_input_gradient(self):
        net = tensor.NetBundle("pi", [2, 4, 2], rng=np.random.default_rng(0))
        x = tensor.Parameter(np.array([[0.3, -0.2]]), "x")
        grads = tensor.backward(tensor.reduce_sum(tensor.mlp_forward(net, x, frozen=True)))
        assert x in grads
        for param in net.online:
            assert param not in grads, param

    def test_gradients_for_fills_zeros(self):
        a = tensor.Parameter(np.ones(2), "a")
        b = tensor.Parameter(np.ones(3), "b")
        grads = tensor.backward(tensor.reduce_sum(a))
        filled = tensor.gradients_for(grads, [a, b])
        np.testing.assert_array_equal(filled[1], np.zeros(3))

    def test_width_mismatch(self):
        net = tensor.NetBundle("v", [3, 4, 1])
        with pytest.raises(ShapeError):
            tensor.mlp_forward(net, np.zeros((2, 5)))


class TestNormalizers:
    @settings(deadline=None)
    @given(finite_vectors)
    def test_length_normalize_norm(self, v):
        out = tensor.length_normalize(v, len(v)).value
        norm = np.linalg.norm(out)
        if np.linalg.norm(v) < tensor.NORM_FLOOR:
            assert norm == 0.0, out
        else:
            assert math.isclose(norm, math.sqrt(len(v)), rel_tol=1e-9), (norm, v)

    @settings(deadline=None)
    @given(finite_vectors)
    def test_soft_normalize_bounded(self, v):
        out = tensor.soft_normalize(v, len(v)).value
        assert np.linalg.norm(out) <= math.sqrt(len(v)) * (1 + 1e-12), out
        assert np.all(np.isfinite(out)), out

    @pytest.mark.parametrize("d", [2, 10])
    @settings(deadline=None, max_examples=10_000)
    @given(data=st.data())
    def test_option_norms(self, d, data):
        v = data.draw(arrays(np.float64, d, elements=coordinates))
        r = np.linalg.norm(v)
        length = np.linalg.norm(tensor.length_normalize(v, d).value)
        if r < tensor.NORM_FLOOR:
            assert length == 0.0, v
        else:
            assert math.isclose(length**2, d, rel_tol=1e-9), (length, v)
        soft = np.linalg.norm(tensor.soft_normalize(v, d).value)
        assert math.isclose(soft, math.tanh(r) * math.sqrt(d), rel_tol=1e-9), (soft, v)

    @pytest.mark.parametrize("d", [2, 10])
    @pytest.mark.parametrize("r", [0.0, 1e-9, 5e-5, 0.999e-4, 1.001e-4, 0.3, 2.0, 40.0])
    def test_soft_normalize_norm_either_side_of_series(self, d, r):
        direction = np.random.default_rng(d).standard_normal((3, d))
        v = r * direction / np.linalg.norm(direction, axis=-1, keepdims=True)
        norms = np.linalg.norm(tensor.soft_normalize(v, d).value, axis=-1)
        np.testing.assert_allclose(norms, np.full(3, math.tanh(r) * math.sqrt(d)), rtol=1e-12, atol=0.0)

    def test_soft_normalize_zero(self):
        v = tensor.Parameter(np.zeros((1, 3)), "v")
        out = tensor.soft_normalize(v, 3)
        np.testing.assert_array_equal(out.value, np.zeros((1, 3)))
        grads = tensor.backward(tensor.reduce_sum(out))
        np.testing.assert_allclose(grads[v], np.full((1, 3), math.sqrt(3)))

    @pytest.mark.parametrize("scale", [1e-6, 1e-2, 1.0, 7.0])
    def test_soft_normalize_finite_difference(self, scale):
        v = tensor.Parameter(scale * np.array([[0.3, -0.5, 0.8]]), "v")
        w = np.array([[1.0, 2.0, -1.0]])

        def loss():
            return tensor.reduce_sum(tensor.soft_normalize(v, 3) * w)

        grads = tensor.backward(loss())
        expected = numeric_gradient(loss, v, eps=scale * 1e-4)
        np.testing.assert_allclose(grads[v], expected, rtol=1e-4, atol=1e-6)

    def test_length_normalize_degenerate(self):
        stats = tensor.NormalizeStats()
        out = tensor.length_normalize(np.array([[0.0, 0.0], [3.0, 4.0]]), 2, stats)
        assert stats.degenerate == 1, stats.degenerate
        np.testing.assert_allclose(out.value[0], [0.0, 0.0])
        np.testing.assert_allclose(out.value[1], np.array([0.6, 0.8]) * math.sqrt(2))

    def test_dimension_check(self):
        with pytest.raises(ShapeError):
            tensor.length_normalize(np.ones(3), 4)


class TestOptim:
    def test_expectile_weights(self):
        out = tensor.expectile_loss(np.array([-2.0, 0.0, 3.0]), 0.9).value
        np.testing.assert_allclose(out, [0.1 * 4.0, 0.0, 0.9 * 9.0])

    def test_expectile_range(self):
        with pytest.raises(ConfigError):
            tensor.expectile_loss(np.zeros(2), 1.0)

    def test_adam_descends(self):
        x = tensor.Parameter(np.array([5.0, -3.0]), "x")
        opt = tensor.Adam([x], lr=0.1)
        for _ in range(500):
            opt.step(tensor.backward(tensor.reduce_sum(tensor.square(x))))
        assert np.all(np.abs(x.value) < 0.1), x.value

    def test_adam_step_scalar_quadratic(self):
        w = tensor.Parameter(np.array([0.0]), "w")
        state = tensor.AdamState([w])
        for _ in range(100):
            grads = tensor.backward(tensor.reduce_sum(tensor.square(w - 3.0)))
            tensor.adam_step([w], [grads[w]], state, lr=0.1)
        assert state.t == 100
        assert abs(w.value[0] - 3.0) < 0.5, w.value

    def test_adam_first_step(self):
        w = tensor.Parameter(np.array([1.0, 1.0, 1.0]), "w")
        state = tensor.AdamState([w])
        tensor.adam_step([w], [np.array([0.0, 4.0, -0.5])], state, lr=0.01)
        # bias correction makes the first move lr * sign(g)
        np.testing.assert_allclose(w.value, [1.0, 0.99, 1.01], rtol=0.0, atol=1e-8)

    def test_adam_abort_leaves_parameters(self):
        a = tensor.Parameter(np.ones(2), "a")
        b = tensor.Parameter(np.ones(2), "b")
        state = tensor.AdamState([a, b])
        with pytest.raises(NumericAbort) as excinfo:
            tensor.adam_step([a, b], [np.ones(2), np.array([np.nan, 0.0])], state)
        assert excinfo.value.parameter == "b", excinfo.value.parameter
        np.testing.assert_array_equal(a.value, np.ones(2))
        assert state.t == 0, state.t

    def test_polyak(self):
        net = tensor.NetBundle("v", [2, 3, 1], rng=np.random.default_rng(1))
        for p in net.online:
            p.value = p.value + 1.0
        before = [t.value.copy() for t in net.target]
        tensor.polyak_update(net, 0.25)
        for t, b, o in zip(net.target, before, net.online):
            np.testing.assert_allclose(t.value, 0.75 * b + 0.25 * o.value)
        with pytest.raises(ConfigError):
            tensor.polyak_update(net, 0.0)


class TestHeads:
    def test_gaussian_log_prob(self):
        head = tensor.GaussianPolicyHead("pi", [2, 4, 2], rng=np.random.default_rng(0))
        features = np.zeros((1, 2))
        # zero final layer gives a zero mean, log_std starts at 0
        logp = head.log_prob(features, np.array([[1.0, -1.0]])).value
        np.testing.assert_allclose(logp, [-1.0 - math.log(2 * math.pi)])

    def test_log_std_projection(self):
        head = tensor.GaussianPolicyHead("pi", [2, 4, 1], log_std_range=(-1.0, 0.5))
        head.log_std.value = np.array([3.0])
        head.project()
        np.testing.assert_array_equal(head.log_std.value, [0.5])

    def test_categorical_sample_one_hot(self):
        head = tensor.CategoricalPolicyHead("pi", [2, 4, 5], rng=np.random.default_rng(0))
        out = head.sample(np.zeros((3, 2)), np.random.default_rng(1), deterministic=False)
        assert out.shape == (3, 5), out.shape
        np.testing.assert_array_equal(out.sum(axis=-1), np.ones(3))

    def test_records(self):
        net = tensor.NetBundle("v", [2, 3, 1], rng=np.random.default_rng(4))
        loaded = tensor.NetBundle.from_records("v", net.to_records())
        for a, b in zip(net.online + net.target, loaded.online + loaded.target):
            np.testing.assert_array_equal(a.value, b.value)
