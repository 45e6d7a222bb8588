import numpy as np
import pytest

from deepgmm.errors import ConfigMismatch, ShapeError, StaleActivations
from deepgmm.image import MultiChannelImage
from deepgmm.network import (
    NetworkConfig,
    NetworkState,
    adamw_step,
    backward,
    finite_diff_check,
    forward,
    init_state,
    toy_config,
)

from conftest import image_from

MEANS = np.array([[-1.0], [1.0]])
VAR = np.array([[0.5], [0.7]])


@pytest.fixture
def toy(rng):
    cfg = toy_config(1, 2)
    return cfg, init_state(cfg, 0), image_from(rng.normal(size=(1, 6, 6)))


class TestForward:
    def test_rows_on_simplex(self, toy):
        cfg, state, img = toy
        w = forward(state, cfg, img).weights
        np.testing.assert_allclose(w.sum(1), 1, atol=1e-12)
        assert (w > 0).all()

    def test_odd_shape_and_roi(self, rng):
        cfg = NetworkConfig(2, 3, depth=2, base_width=4)
        roi = rng.random((7, 9)) < 0.7
        roi[0, 0] = True
        img = image_from(rng.normal(size=(2, 7, 9)), roi)
        w = forward(init_state(cfg, 1), cfg, img)
        assert w.weights.shape == (img.n_pixels, 3)
        assert w.to_grid().shape == (3, 7, 9)

    def test_zero_head_is_uniform(self, toy):
        cfg, state, img = toy
        state.params["head.weight"][:] = 0
        state.params["head.bias"][:] = 0
        np.testing.assert_array_equal(forward(state, cfg, img).weights, 0.5)

    def test_channel_mismatch(self, toy):
        cfg, state, _ = toy
        with pytest.raises(ConfigMismatch):
            forward(state, cfg, image_from(np.zeros((2, 4, 4))))

    def test_pixel_logits_shape_mismatch(self):
        cfg = NetworkConfig(1, 2, arch="pixel_logits", image_shape=(3, 3))
        with pytest.raises(ShapeError):
            forward(init_state(cfg), cfg, image_from(np.zeros((1, 4, 4))))

    def test_deterministic(self, rng):
        cfg = toy_config(1, 3)
        img = image_from(rng.normal(size=(1, 5, 5)))
        a = forward(init_state(cfg, 9), cfg, img).weights
        b = forward(init_state(cfg, 9), cfg, img).weights
        assert np.array_equal(a, b)

    def test_toy_is_small(self):
        assert init_state(toy_config(1, 2)).n_params <= 5000


class TestBackward:
    def test_zero_grad(self, toy):
        cfg, state, img = toy
        w = forward(state, cfg, img).weights
        grads = backward(state, cfg, img, np.zeros_like(w))
        assert set(grads) == set(state.params)
        assert all(not g.any() for g in grads.values())

    def test_scalar_softmax_chain_rule(self):
        # one pixel, two free logits, loss = w_0: dL/dz = (w0 (1 - w0), -w0 w1)
        cfg = NetworkConfig(1, 2, arch="pixel_logits", image_shape=(1, 1))
        state = NetworkState({"logits": np.array([[[0.3]], [[-0.2]]])})
        img = image_from([[0.0]])
        w = forward(state, cfg, img).weights[0]
        g = backward(state, cfg, img, np.array([[1.0, 0.0]]))["logits"].ravel()
        np.testing.assert_allclose(g, [w[0] * (1 - w[0]), -w[0] * w[1]], rtol=1e-14)

    def test_stale_without_forward(self, toy):
        cfg, state, img = toy
        with pytest.raises(StaleActivations):
            backward(state, cfg, img, np.zeros((36, 2)))

    def test_stale_after_update(self, toy):
        cfg, state, img = toy
        w = forward(state, cfg, img).weights
        grads = backward(state, cfg, img, np.ones_like(w))
        adamw_step(state, grads)
        with pytest.raises(StaleActivations):
            backward(state, cfg, img, np.ones_like(w))

    def test_stale_other_image(self, toy, rng):
        cfg, state, img = toy
        forward(state, cfg, img)
        other = image_from(rng.normal(size=(1, 6, 6)))
        with pytest.raises(StaleActivations):
            backward(state, cfg, other, np.zeros((36, 2)))

    def test_bad_grad_shape(self, toy):
        cfg, state, img = toy
        forward(state, cfg, img)
        with pytest.raises(ShapeError):
            backward(state, cfg, img, np.zeros((5, 2)))


class TestGradCheck:
    def test_toy_passes(self, toy):
        cfg, state, img = toy
        rep = finite_diff_check(state, cfg, img, MEANS, VAR, step=1e-5, tolerance=1e-4)
        assert rep.n_checked >= 100
        assert rep.passed and rep.max_rel_error < 1e-4

    def test_large_step_detected(self, toy):
        cfg, state, img = toy
        rep = finite_diff_check(state, cfg, img, MEANS, VAR, step=1e-1, tolerance=1e-4)
        assert not rep.passed and rep.max_rel_error > 1e-4

    def test_deterministic(self, toy):
        cfg, state, img = toy
        a = finite_diff_check(state, cfg, img, MEANS, VAR)
        b = finite_diff_check(state, cfg, img, MEANS, VAR)
        assert a == b

    def test_deeper_padded_net(self, rng):
        cfg = NetworkConfig(3, 3, depth=2, base_width=3)
        img = image_from(rng.normal(size=(3, 7, 9)))
        means = rng.normal(size=(3, 3))
        var = rng.uniform(0.5, 1.5, size=(3, 3))
        rep = finite_diff_check(init_state(cfg, 2), cfg, img, means, var, n_samples=120)
        assert rep.passed, rep


def scalar_adam(theta, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta * (1 - lr * wd)
        theta = theta - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return theta


class TestAdamW:
    def state(self, value):
        return NetworkState({"p": np.array([value], dtype=float)})

    def test_first_step(self):
        s = self.state(0.0)
        adamw_step(s, {"p": np.array([1.0])}, lr=1e-3)
        assert s.params["p"][0] == pytest.approx(-1e-3, rel=1e-7)
        assert s.step == 1

    def test_zero_grad(self):
        s = self.state(2.5)
        adamw_step(s, {"p": np.array([0.0])}, lr=1e-3)
        assert s.params["p"][0] == 2.5

    def test_decay_alone(self):
        s = self.state(2.0)
        adamw_step(s, {"p": np.array([0.0])}, lr=0.1, weight_decay=0.5)
        assert s.params["p"][0] == pytest.approx(2.0 * (1 - 0.05), abs=1e-15)

    @pytest.mark.parametrize("wd", [0.0, 0.01])
    def test_matches_scalar_oracle(self, rng, wd):
        grads = rng.normal(size=25)
        s = self.state(0.7)
        for g in grads:
            adamw_step(s, {"p": np.array([g])}, lr=0.01, weight_decay=wd)
        assert s.params["p"][0] == pytest.approx(scalar_adam(0.7, grads, 0.01, wd), abs=1e-14)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            adamw_step(self.state(0.0), {"p": np.zeros(2)})
        with pytest.raises(ShapeError):
            adamw_step(self.state(0.0), {})
