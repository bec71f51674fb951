import numpy as np
import pytest

from plad import autodiff as ad
from plad import nn
from plad.autodiff import NumericError, Tape, Tensor, backward


def spec_620_1():
    return nn.MlpSpec.uniform([6, 20, 1], "relu")


class TestInit:
    def test_deterministic(self):
        a = nn.init_params(spec_620_1(), seed=7)
        b = nn.init_params(spec_620_1(), seed=7)
        for la, lb in zip(a, b):
            np.testing.assert_array_equal(la.weight.data, lb.weight.data)
            np.testing.assert_array_equal(la.bias.data, lb.bias.data)

    def test_weight_bound(self):
        # fan-in 6 -> every weight in [-1, 1] = +-sqrt(6/6)
        layers = nn.init_params(spec_620_1(), seed=0)
        assert np.all(np.abs(layers[0].weight.data) <= 1.0)
        bound2 = np.sqrt(6.0 / 20.0)
        assert np.all(np.abs(layers[1].weight.data) <= bound2)

    def test_biases_zero(self):
        for layer in nn.init_params(spec_620_1(), seed=3):
            np.testing.assert_array_equal(layer.bias.data, 0.0)

    def test_bias_flags(self):
        spec = nn.MlpSpec.uniform([4, 8, 1], "leaky_relu", bias=False)
        for layer in nn.init_params(spec, seed=0):
            assert layer.bias is None


class TestForward:
    def test_zero_net_maps_to_zero(self):
        spec = spec_620_1()
        layers = nn.init_params(spec, seed=0)
        for layer in layers:
            layer.weight.data = np.zeros_like(layer.weight.data)
        x = Tensor(np.random.default_rng(0).normal(size=(5, 6)))
        out = nn.mlp_forward(layers, spec, x)
        np.testing.assert_array_equal(out.data, 0.0)

    def test_identity_layer(self):
        spec = nn.MlpSpec([3, 3], ["none"], [False])
        layers = [nn.LinearLayer(Tensor(np.eye(3), requires_grad=True))]
        x = Tensor([[0.5, -1.0, 2.0]])
        out = nn.mlp_forward(layers, spec, x)
        np.testing.assert_array_equal(out.data, x.data)

    def test_hand_computed(self):
        # dims [2,2,1], relu between; x=[1,1]
        spec = nn.MlpSpec([2, 2, 1], ["relu", "none"], [True, True])
        l1 = nn.LinearLayer(Tensor([[1.0, -1.0], [2.0, 0.5]], requires_grad=True),
                            Tensor([0.1, -0.2], requires_grad=True))
        l2 = nn.LinearLayer(Tensor([[3.0, -1.0]], requires_grad=True),
                            Tensor([0.25], requires_grad=True))
        out = nn.mlp_forward([l1, l2], spec, Tensor([[1.0, 1.0]]))
        # h = relu([1-1+0.1, 2+0.5-0.2]) = [0.1, 2.3]; y = 3*0.1 - 2.3 + 0.25 = -1.75
        np.testing.assert_allclose(out.data, [[-1.75]])

    def test_dim_mismatch(self):
        spec = spec_620_1()
        layers = nn.init_params(spec, seed=0)
        with pytest.raises(ad.DimensionError):
            nn.mlp_forward(layers, spec, Tensor(np.zeros((2, 5))))

    def test_gradients_reach_all_parameters(self):
        spec = nn.MlpSpec.uniform([4, 6, 1], "leaky_relu")
        layers = nn.init_params(spec, seed=1)
        params = nn.parameters(layers)
        x = Tensor(np.random.default_rng(2).normal(size=(8, 4)))
        with Tape() as tape:
            loss = ad.mean_all(ad.square(nn.mlp_forward(layers, spec, x)))
        grads = backward(loss, tape, params=params)
        assert all(np.any(grads[p.id] != 0) for p in params)


class TestOptimizer:
    def test_sgd_update(self):
        p = Tensor([1.0], requires_grad=True)
        state = nn.OptimizerState("sgd", learning_rate=0.1)
        nn.optimizer_step(state, [p], {p.id: np.array([0.5])})
        np.testing.assert_allclose(p.data, [0.95])

    def test_zero_gradient_is_noop(self):
        for kind in ("sgd", "adam"):
            p = Tensor([2.0, -3.0], requires_grad=True)
            state = nn.OptimizerState(kind, learning_rate=0.01)
            nn.optimizer_step(state, [p], {p.id: np.zeros(2)})
            np.testing.assert_array_equal(p.data, [2.0, -3.0])

    def test_adam_first_step(self):
        # bias-corrected m/sqrt(v) is exactly 1 on the first step
        p = Tensor([0.3], requires_grad=True)
        state = nn.OptimizerState("adam", learning_rate=0.001)
        nn.optimizer_step(state, [p], {p.id: np.array([1.0])})
        np.testing.assert_allclose(p.data, [0.3 - 0.001], atol=1e-8)
        assert state.t == 1

    def test_step_count(self):
        p = Tensor([0.0], requires_grad=True)
        state = nn.OptimizerState("adam", learning_rate=0.01)
        for _ in range(5):
            nn.optimizer_step(state, [p], {p.id: np.array([0.1])})
        assert state.t == 5

    def test_non_finite_grad_aborts(self):
        p = Tensor([1.0], requires_grad=True)
        state = nn.OptimizerState("adam", learning_rate=0.01)
        with pytest.raises(NumericError):
            nn.optimizer_step(state, [p], {p.id: np.array([np.nan])})
        np.testing.assert_array_equal(p.data, [1.0])
        assert state.t == 0

    def test_sgd_descends_quadratic_bowl(self):
        spec = nn.MlpSpec([1, 1], ["none"], [False])
        layers = [nn.LinearLayer(Tensor([[3.0]], requires_grad=True))]
        state = nn.OptimizerState("sgd", learning_rate=0.1)
        prev = None
        for _ in range(20):
            with Tape() as tape:
                loss = ad.sum_all(ad.square(layers[0].weight))
            grads = backward(loss, tape, params=[layers[0].weight])
            val = loss.item()
            if prev is not None:
                assert val < prev
            prev = val
            nn.optimizer_step(state, [layers[0].weight], grads)

    def test_deterministic_training_sequence(self):
        def run():
            spec = nn.MlpSpec.uniform([3, 5, 1], "relu")
            layers = nn.init_params(spec, seed=9)
            params = nn.parameters(layers)
            state = nn.OptimizerState("adam", learning_rate=0.01)
            rng = np.random.default_rng(4)
            for _ in range(10):
                x = Tensor(rng.normal(size=(4, 3)))
                with Tape() as tape:
                    loss = ad.mean_all(ad.square(nn.mlp_forward(layers, spec, x)))
                nn.optimizer_step(state, params, backward(loss, tape, params=params))
            return [p.data.copy() for p in params]

        a, b = run(), run()
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa, pb)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        spec = nn.MlpSpec([7, 7, 14], ["leaky_relu", "none"], [True, False])
        layers = nn.init_params(spec, seed=42)
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(path, layers)
        loaded = nn.load_checkpoint(path)
        assert len(loaded) == len(layers)
        for a, b in zip(layers, loaded):
            np.testing.assert_array_equal(a.weight.data, b.weight.data)
            if a.bias is None:
                assert b.bias is None
            else:
                np.testing.assert_array_equal(a.bias.data, b.bias.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(nn.CheckpointError, match="magic"):
            nn.load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        spec = nn.MlpSpec([4, 2], ["none"], [True])
        layers = nn.init_params(spec, seed=1)
        path = tmp_path / "model.ckpt"
        nn.save_checkpoint(path, layers)
        path.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(nn.CheckpointError, match="truncated"):
            nn.load_checkpoint(path)
