import numpy as np
import pytest

from plad import autodiff as ad
from plad import classifier as clf
from plad import perturbator as pt
from plad.autodiff import ContractError, Tape, Tensor, backward, grad_check


def zero_out(mlp):
    for layer in mlp.layers:
        layer.weight.data = np.zeros_like(layer.weight.data)
        if layer.bias is not None:
            layer.bias.data = np.zeros_like(layer.bias.data)


class TestForwardPerturb:
    def test_zero_noise_gives_mu(self):
        p = pt.VaePerturbator(dim=4, seed=1)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        out = pt.forward_perturb(p, x, Tensor(np.zeros((3, 4))))
        np.testing.assert_array_equal(out.z.data, out.mu.data)

    def test_zero_decoder_gives_zero_perturbation(self):
        p = pt.VaePerturbator(dim=4, seed=1)
        zero_out(p.decoder)
        x = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
        out = pt.forward_perturb(p, x, Tensor(np.random.default_rng(1).normal(size=(3, 4))))
        np.testing.assert_array_equal(out.alpha.data, 0.0)
        np.testing.assert_array_equal(out.beta.data, 0.0)

    def test_deterministic_given_seed(self):
        x_arr = np.random.default_rng(0).normal(size=(5, 6))
        outs = []
        for _ in range(2):
            p = pt.VaePerturbator(dim=6, seed=9)
            noise = Tensor(np.random.default_rng(77).standard_normal((5, 6)))
            outs.append(pt.forward_perturb(p, Tensor(x_arr), noise))
        np.testing.assert_array_equal(outs[0].alpha.data, outs[1].alpha.data)
        np.testing.assert_array_equal(outs[0].beta.data, outs[1].beta.data)
        np.testing.assert_array_equal(outs[0].z.data, outs[1].z.data)

    def test_noise_shape_mismatch(self):
        p = pt.VaePerturbator(dim=4, seed=0)
        with pytest.raises(ContractError):
            pt.forward_perturb(p, Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))))

    def test_alpha_beta_are_decoder_halves(self):
        p = pt.VaePerturbator(dim=3, seed=2)
        x = Tensor(np.random.default_rng(4).normal(size=(2, 3)))
        noise = Tensor(np.zeros((2, 3)))
        out = pt.forward_perturb(p, x, noise)
        decoded = p.decoder(out.z)
        np.testing.assert_array_equal(out.alpha.data, decoded.data[:, :3])
        np.testing.assert_array_equal(out.beta.data, decoded.data[:, 3:])


class TestApplyPerturbation:
    def test_identity_is_bitwise(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            x = Tensor(rng.normal(scale=10, size=(4, 7)))
            out = pt.apply_perturbation(x, Tensor(np.ones((4, 7))), Tensor(np.zeros((4, 7))))
            np.testing.assert_array_equal(out.data, x.data)

    def test_elementwise_example(self):
        out = pt.apply_perturbation(Tensor([2.0, 3.0]), Tensor([0.5, 2.0]), Tensor([1.0, -1.0]))
        np.testing.assert_array_equal(out.data, [2.0, 5.0])

    def test_zero_alpha_yields_beta(self):
        x = Tensor(np.random.default_rng(6).normal(size=(3, 3)))
        beta = Tensor(np.random.default_rng(7).normal(size=(3, 3)))
        out = pt.apply_perturbation(x, Tensor(np.zeros((3, 3))), beta)
        np.testing.assert_array_equal(out.data, beta.data)

    def test_dim_mismatch(self):
        with pytest.raises(ad.DimensionError):
            pt.apply_perturbation(Tensor(np.zeros(3)), Tensor(np.zeros(4)), Tensor(np.zeros(3)))


class TestKl:
    def test_standard_normal_is_zero(self):
        kl = pt.kl_standard_normal(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
        assert kl.item() == 0.0

    def test_unit_mean_closed_form(self):
        kl = pt.kl_standard_normal(Tensor([[1.0]]), Tensor([[0.0]]))
        np.testing.assert_allclose(kl.item(), 0.5)

    def test_nonnegative_on_random_draws(self):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            mu = Tensor(rng.normal(size=(1, 4)))
            logvar = Tensor(rng.uniform(-4, 4, size=(1, 4)))
            assert pt.kl_standard_normal(mu, logvar).item() >= 0.0

    def test_batch_mean_semantics(self):
        mu = Tensor([[1.0, 0.0], [0.0, 0.0]])
        logvar = Tensor(np.zeros((2, 2)))
        # sample KLs are 0.5 and 0 -> mean 0.25
        np.testing.assert_allclose(pt.kl_standard_normal(mu, logvar).item(), 0.25)


class TestReconstructionPenalty:
    def test_target_hit_exactly(self):
        r = pt.reconstruction_penalty(Tensor(np.ones((2, 5))), Tensor(np.zeros((2, 5))))
        assert r.item() == 0.0

    def test_closed_form(self):
        r = pt.reconstruction_penalty(Tensor([[2.0]]), Tensor([[1.0]]))
        np.testing.assert_allclose(r.item(), 2.0)

    def test_beta_scaling_is_quadratic(self):
        alpha = Tensor(np.ones((1, 3)))
        beta = np.array([[0.5, -1.0, 2.0]])
        r1 = pt.reconstruction_penalty(alpha, Tensor(beta)).item()
        r2 = pt.reconstruction_penalty(alpha, Tensor(2 * beta)).item()
        np.testing.assert_allclose(r2, 4 * r1)


class TestAeVariant:
    def test_zero_decoder(self):
        p = pt.AePerturbator(dim=4, seed=3)
        zero_out(p.decoder)
        alpha, beta = pt.forward_perturb_ae(p, Tensor(np.random.default_rng(0).normal(size=(2, 4))))
        np.testing.assert_array_equal(alpha.data, 0.0)
        np.testing.assert_array_equal(beta.data, 0.0)

    def test_deterministic_without_noise(self):
        p = pt.AePerturbator(dim=4, seed=3)
        x = Tensor(np.random.default_rng(1).normal(size=(2, 4)))
        a1, b1 = pt.forward_perturb_ae(p, x)
        a2, b2 = pt.forward_perturb_ae(p, x)
        np.testing.assert_array_equal(a1.data, a2.data)
        np.testing.assert_array_equal(b1.data, b2.data)

    def test_output_dims(self):
        p = pt.AePerturbator(dim=5, seed=0)
        alpha, beta = pt.forward_perturb_ae(p, Tensor(np.zeros((7, 5))))
        assert alpha.shape == (7, 5)
        assert beta.shape == (7, 5)


def vae_regularizer_loss(p, x, noise):
    out = pt.forward_perturb(p, x, noise)
    return ad.add(pt.reconstruction_penalty(out.alpha, out.beta),
                  pt.kl_standard_normal(out.mu, out.logvar))


class TestEndToEndGradients:
    def test_vae_path_grad_check_wrt_input(self):
        # full chain encoder -> heads -> reparameterized z -> decoder -> penalties
        p = pt.VaePerturbator(dim=3, seed=11)
        noise_arr = np.random.default_rng(42).standard_normal((2, 3))

        def f(x):
            return vae_regularizer_loss(p, x, Tensor(noise_arr))

        worst = 0.0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            worst = max(worst, grad_check(f, Tensor(rng.uniform(-2, 2, size=(2, 3))), h=1e-6))
        assert worst < 1e-4, f"max relative error {worst}"

    def test_vae_path_grad_check_wrt_decoder_weight(self):
        p = pt.VaePerturbator(dim=3, seed=11)
        x_arr = np.random.default_rng(1).normal(size=(2, 3))
        noise_arr = np.random.default_rng(2).standard_normal((2, 3))
        final = p.decoder.layers[-1]
        saved = final.weight

        def f(w):
            final.weight = w
            try:
                return vae_regularizer_loss(p, Tensor(x_arr), Tensor(noise_arr))
            finally:
                final.weight = saved

        err = grad_check(f, Tensor(saved.data.copy()), h=1e-6)
        assert err < 1e-4

    def test_gradients_reach_every_perturbator_parameter(self):
        p = pt.VaePerturbator(dim=3, seed=5)
        params = p.parameters()
        x = Tensor(np.random.default_rng(3).normal(size=(4, 3)))
        noise = Tensor(np.random.default_rng(4).standard_normal((4, 3)))
        with Tape() as tape:
            loss = vae_regularizer_loss(p, x, noise)
        grads = backward(loss, tape, params=params)
        assert all(np.any(grads[q.id] != 0) for q in params)
