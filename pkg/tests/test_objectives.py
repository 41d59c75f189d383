"""ELBO objectives: composition oracles, gradient checks, freezing contracts."""

import math

import numpy as np
import pytest
import torch
from torch import nn

from dvae.errors import ConfigError, DimensionError
from dvae.latent import GaussianParams, LatentPartition
from dvae.objectives import (
    GAUSSIAN,
    LAPLACE,
    ElboWeights,
    ReconTerm,
    consistency_loss_zu,
    elbo_cvae,
    elbo_dis,
    elbo_dis_u,
    elbo_emb,
    elbo_emb_prime,
    frozen_params,
    recon_log_likelihood,
)

DTYPE = torch.float64


class TinyEncoder(nn.Module):
    """Linear Gaussian head; small enough for exhaustive finite differences."""

    def __init__(self, n_in, d, seed):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.w_m = nn.Parameter(0.4 * torch.randn(d, n_in, generator=gen, dtype=DTYPE))
        self.b_m = nn.Parameter(0.1 * torch.randn(d, generator=gen, dtype=DTYPE))
        self.w_v = nn.Parameter(0.2 * torch.randn(d, n_in, generator=gen, dtype=DTYPE))
        self.b_v = nn.Parameter(0.1 * torch.randn(d, generator=gen, dtype=DTYPE))

    def forward(self, x):
        return GaussianParams(x @ self.w_m.T + self.b_m, (x @ self.w_v.T + self.b_v).clamp(-10, 10))


class TinyDecoder(nn.Module):
    def __init__(self, d, n_out, seed):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.w = nn.Parameter(0.5 * torch.randn(n_out, d, generator=gen, dtype=DTYPE))
        self.b = nn.Parameter(0.1 * torch.randn(n_out, generator=gen, dtype=DTYPE))

    def forward(self, z):
        return torch.tanh(z @ self.w.T) + self.b


def np_encoder(enc, x):
    mu = x @ enc.w_m.detach().numpy().T + enc.b_m.detach().numpy()
    lv = np.clip(x @ enc.w_v.detach().numpy().T + enc.b_v.detach().numpy(), -10, 10)
    return mu, lv


def np_decoder(dec, z):
    return np.tanh(z @ dec.w.detach().numpy().T) + dec.b.detach().numpy()


def np_gauss_ll(target, recon):
    return -0.5 * np.sum((target - recon) ** 2, axis=1).mean()


def np_kl(mu, lv):
    return (0.5 * np.sum(np.exp(lv) + mu**2 - 1.0 - lv, axis=1)).mean()


def fd_gradcheck(loss_fn, modules, step=1e-5, tol=1e-4):
    """Compare autograd gradients against central finite differences."""
    params = [p for m in modules for p in m.parameters()]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    analytic, numeric = [], []
    for p, g in zip(params, grads):
        g = torch.zeros_like(p) if g is None else g
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = loss_fn().item()
            flat[i] = orig - step
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric.append((f_plus - f_minus) / (2 * step))
            analytic.append(g.view(-1)[i].item())
    analytic, numeric = np.array(analytic), np.array(numeric)
    scale = max(np.abs(numeric).max(), 1e-8)
    assert np.abs(analytic - numeric).max() / scale < tol


class TestReconLogLikelihood:
    def test_perfect_reconstruction(self):
        t = torch.randn(3, 4, dtype=DTYPE)
        assert recon_log_likelihood(ReconTerm(t, t.clone())).item() == 0.0

    def test_gaussian_example(self):
        term = ReconTerm(torch.tensor([1.0, 1.0]), torch.tensor([0.0, 0.0]))
        assert recon_log_likelihood(term).item() == pytest.approx(-1.0)

    def test_laplace_example(self):
        term = ReconTerm(torch.tensor([1.0, -1.0]), torch.tensor([0.0, 0.0]), LAPLACE)
        assert recon_log_likelihood(term).item() == pytest.approx(-2.0)

    def test_elementwise_loop_oracle(self):
        rng = np.random.default_rng(0)
        target = rng.normal(size=(32, 32, 3))
        recon = rng.normal(size=(32, 32, 3))
        total = 0.0
        for i in range(32):
            for j in range(32):
                for c in range(3):
                    total += -0.5 * (target[i, j, c] - recon[i, j, c]) ** 2
        got = recon_log_likelihood(
            ReconTerm(torch.tensor(target), torch.tensor(recon))
        ).item()
        assert abs(got - total) < 1e-6

    def test_batch_average(self):
        t = torch.zeros(4, 5, dtype=DTYPE)
        r = torch.ones(4, 5, dtype=DTYPE)
        assert recon_log_likelihood(ReconTerm(t, r), batch_dims=1).item() == pytest.approx(-2.5)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ReconTerm(torch.zeros(3), torch.zeros(4))

    def test_unknown_likelihood(self):
        with pytest.raises(ConfigError):
            ReconTerm(torch.zeros(3), torch.zeros(3), "poisson")


class TestWeights:
    def test_paper_configurations_accepted(self):
        # synthesis: lambdas 1/0.01, beta 100; pose estimation: beta 0.01
        ElboWeights(1.0, {"pose": 0.01, "content": 0.01}, 100.0)
        ElboWeights(1.0, {"cpose": 0.01, "view": 0.01}, 0.01)

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            ElboWeights(-1.0, {}, 1.0)

    def test_nan_rejected(self):
        with pytest.raises(ConfigError):
            ElboWeights(float("nan"), {}, 1.0)

    def test_missing_factor(self):
        with pytest.raises(ConfigError):
            ElboWeights(1.0, {"a": 1.0}, 1.0).lambda_for("b")


def make_cvae(seed=0):
    enc = TinyEncoder(3, 2, seed)
    dec_x = TinyDecoder(2, 3, seed + 1)
    dec_y = TinyDecoder(2, 2, seed + 2)
    x = torch.randn(2, 3, generator=torch.Generator().manual_seed(5), dtype=DTYPE)
    y = torch.randn(2, 2, generator=torch.Generator().manual_seed(6), dtype=DTYPE)
    noise = torch.randn(2, 2, generator=torch.Generator().manual_seed(7), dtype=DTYPE)
    return enc, dec_x, dec_y, x, y, noise


class TestElboCvae:
    def test_manual_composition_oracle(self):
        enc, dec_x, dec_y, x, y, noise = make_cvae()
        w = ElboWeights(0.7, {"y": 0.3}, 0.5)
        got = elbo_cvae(x, y, enc, dec_x, dec_y, w, noise).item()

        mu, lv = np_encoder(enc, x.numpy())
        z = mu + np.exp(0.5 * lv) * noise.numpy()
        expected = (
            0.7 * np_gauss_ll(x.numpy(), np_decoder(dec_x, z))
            + 0.3 * np_gauss_ll(y.numpy(), np_decoder(dec_y, z))
            - 0.5 * np_kl(mu, lv)
        )
        assert got == pytest.approx(expected, abs=1e-6)

    def test_prior_encoder_perfect_recon_is_zero(self):
        # Encoder pinned at the prior and identity-like decoders on a
        # one-dimensional toy: KL term 0, reconstructions exact, ELBO 0.
        class PriorEncoder(nn.Module):
            def forward(self, x):
                return GaussianParams(torch.zeros_like(x), torch.zeros_like(x))

        class Memorize(nn.Module):
            def __init__(self, value):
                super().__init__()
                self.value = value

            def forward(self, z):
                return self.value

        x = torch.tensor([[0.3]], dtype=DTYPE)
        y = torch.tensor([[-0.2]], dtype=DTYPE)
        w = ElboWeights(1.0, {"y": 1.0}, 1.0)
        got = elbo_cvae(x, y, PriorEncoder(), Memorize(x), Memorize(y), w, torch.zeros(1, 1, dtype=DTYPE))
        assert got.item() == 0.0

    def test_pose_estimation_weights_accepted(self):
        enc, dec_x, dec_y, x, y, noise = make_cvae()
        w = ElboWeights(1.0, {"y": 0.01}, 0.01)
        assert math.isfinite(elbo_cvae(x, y, enc, dec_x, dec_y, w, noise).item())

    def test_bit_reproducible(self):
        enc, dec_x, dec_y, x, y, noise = make_cvae()
        w = ElboWeights(1.0, {"y": 0.5}, 1.0)
        a = elbo_cvae(x, y, enc, dec_x, dec_y, w, noise).item()
        b = elbo_cvae(x, y, enc, dec_x, dec_y, w, noise).item()
        assert a == b

    def test_gradient_finite_differences(self):
        enc, dec_x, dec_y, x, y, noise = make_cvae()
        w = ElboWeights(0.9, {"y": 0.4}, 0.8)
        fd_gradcheck(lambda: elbo_cvae(x, y, enc, dec_x, dec_y, w, noise), [enc, dec_x, dec_y])


def make_dis(seed=0):
    part = LatentPartition((("p", 2), ("q", 2)))
    encs = {"p": TinyEncoder(3, 2, seed), "q": TinyEncoder(2, 2, seed + 1)}
    decs = {"p": TinyDecoder(2, 3, seed + 2), "q": TinyDecoder(2, 2, seed + 3),
            "x": TinyDecoder(4, 3, seed + 4)}
    gen = torch.Generator().manual_seed(11)
    x = torch.randn(2, 3, generator=gen, dtype=DTYPE)
    ys = {"p": torch.randn(2, 3, generator=gen, dtype=DTYPE),
          "q": torch.randn(2, 2, generator=gen, dtype=DTYPE)}
    noise = torch.randn(2, 4, generator=gen, dtype=DTYPE)
    return part, encs, decs, x, ys, noise


class TestElboDis:
    def test_manual_composition_oracle(self):
        part, encs, decs, x, ys, noise = make_dis()
        w = ElboWeights(0.6, {"p": 0.2, "q": 0.3}, 0.4)
        got = elbo_dis(x, ys, encs, decs, w, part, noise).item()

        mu_p, lv_p = np_encoder(encs["p"], ys["p"].numpy())
        mu_q, lv_q = np_encoder(encs["q"], ys["q"].numpy())
        z_p = mu_p + np.exp(0.5 * lv_p) * noise.numpy()[:, :2]
        z_q = mu_q + np.exp(0.5 * lv_q) * noise.numpy()[:, 2:]
        z = np.concatenate([z_p, z_q], axis=1)
        expected = (
            0.6 * np_gauss_ll(x.numpy(), np_decoder(decs["x"], z))
            + 0.2 * np_gauss_ll(ys["p"].numpy(), np_decoder(decs["p"], z_p))
            + 0.3 * np_gauss_ll(ys["q"].numpy(), np_decoder(decs["q"], z_q))
            - 0.4 * (np_kl(mu_p, lv_p) + np_kl(mu_q, lv_q))
        )
        assert got == pytest.approx(expected, abs=1e-6)

    def test_synthesis_weights_accepted(self):
        part, encs, decs, x, ys, noise = make_dis()
        w = ElboWeights(1.0, {"p": 0.01, "q": 0.01}, 100.0)
        assert math.isfinite(elbo_dis(x, ys, encs, decs, w, part, noise).item())

    def test_monotone_in_beta(self):
        part, encs, decs, x, ys, noise = make_dis()
        values = [
            elbo_dis(x, ys, encs, decs, ElboWeights(1.0, {"p": 1.0, "q": 1.0}, b), part, noise).item()
            for b in (0.0, 0.5, 1.0, 10.0, 100.0)
        ]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_single_factor_reduces_to_cvae(self):
        # One factor, y == x, all weights 1: same term structure as the
        # cross-modal bound with the y-encoder in the x-encoder slot.
        part = LatentPartition((("y", 2),))
        enc = TinyEncoder(3, 2, 0)
        dec_x = TinyDecoder(2, 3, 1)
        dec_y = TinyDecoder(2, 3, 2)
        gen = torch.Generator().manual_seed(4)
        x = torch.randn(2, 3, generator=gen, dtype=DTYPE)
        noise = torch.randn(2, 2, generator=gen, dtype=DTYPE)
        w = ElboWeights(1.0, {"y": 1.0}, 1.0)
        via_dis = elbo_dis(x, {"y": x}, {"y": enc}, {"y": dec_y, "x": dec_x}, w, part, noise)
        via_cvae = elbo_cvae(x, x, enc, dec_x, dec_y, w, noise)
        assert abs(via_dis.item() - via_cvae.item()) < 1e-10

    def test_gradient_finite_differences(self):
        part, encs, decs, x, ys, noise = make_dis()
        w = ElboWeights(0.6, {"p": 0.2, "q": 0.3}, 0.4)
        fd_gradcheck(
            lambda: elbo_dis(x, ys, encs, decs, w, part, noise),
            [encs["p"], encs["q"], decs["p"], decs["q"], decs["x"]],
        )


class TestElboEmb:
    def test_manual_composition_oracle(self):
        part, _, decs, x, ys, noise = make_dis()
        enc_x = TinyEncoder(3, 4, 9)
        w = ElboWeights(0.5, {"p": 0.3, "q": 0.2}, 0.7)
        got = elbo_emb(x, ys, enc_x, decs, w, part, noise).item()

        mu, lv = np_encoder(enc_x, x.numpy())
        z = mu + np.exp(0.5 * lv) * noise.numpy()
        expected = (
            0.5 * np_gauss_ll(x.numpy(), np_decoder(decs["x"], z))
            + 0.3 * np_gauss_ll(ys["p"].numpy(), np_decoder(decs["p"], z[:, :2]))
            + 0.2 * np_gauss_ll(ys["q"].numpy(), np_decoder(decs["q"], z[:, 2:]))
            - 0.7 * np_kl(mu, lv)
        )
        assert got == pytest.approx(expected, abs=1e-6)

    def test_decoder_gradient_exactly_zero(self):
        part, _, decs, x, ys, noise = make_dis()
        enc_x = TinyEncoder(3, 4, 9)
        loss = -elbo_emb(x, ys, enc_x, decs, ElboWeights(1, {"p": 1, "q": 1}, 1), part, noise)
        loss.backward()
        for dec in decs.values():
            for p in dec.parameters():
                assert p.grad is None or p.grad.abs().max().item() == 0.0
        assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in enc_x.parameters())

    def test_requires_grad_restored_after_call(self):
        part, _, decs, x, ys, noise = make_dis()
        enc_x = TinyEncoder(3, 4, 9)
        elbo_emb(x, ys, enc_x, decs, ElboWeights(1, {"p": 1, "q": 1}, 1), part, noise)
        for dec in decs.values():
            assert all(p.requires_grad for p in dec.parameters())

    def test_gradient_finite_differences_encoder_only(self):
        part, _, decs, x, ys, noise = make_dis()
        enc_x = TinyEncoder(3, 4, 9)
        w = ElboWeights(0.5, {"p": 0.3, "q": 0.2}, 0.7)
        fd_gradcheck(lambda: elbo_emb(x, ys, enc_x, decs, w, part, noise), [enc_x])


def make_dis_u(seed=0):
    part = LatentPartition((("p", 2), ("u", 2)))
    encs = {"p": TinyEncoder(3, 2, seed), "u": TinyEncoder(4, 2, seed + 1)}
    decs = {"p": TinyDecoder(4, 3, seed + 2), "x": TinyDecoder(4, 4, seed + 3)}
    gen = torch.Generator().manual_seed(21)
    x = torch.randn(2, 4, generator=gen, dtype=DTYPE)
    y1 = torch.randn(2, 3, generator=gen, dtype=DTYPE)
    noise = torch.randn(2, 4, generator=gen, dtype=DTYPE)
    return part, encs, decs, x, y1, noise


class TestElboDisU:
    def test_manual_composition_oracle(self):
        part, encs, decs, x, y1, noise = make_dis_u()
        w = ElboWeights(0.8, {"p": 0.4}, 0.6)
        got = elbo_dis_u(x, y1, encs, decs, w, part, noise).item()

        mu_p, lv_p = np_encoder(encs["p"], y1.numpy())
        mu_u, lv_u = np_encoder(encs["u"], x.numpy())
        z = np.concatenate(
            [mu_p + np.exp(0.5 * lv_p) * noise.numpy()[:, :2],
             mu_u + np.exp(0.5 * lv_u) * noise.numpy()[:, 2:]],
            axis=1,
        )
        # the label decoder consumes the full code in this variant
        expected = (
            0.8 * np_gauss_ll(x.numpy(), np_decoder(decs["x"], z))
            + 0.4 * np_gauss_ll(y1.numpy(), np_decoder(decs["p"], z))
            - 0.6 * (np_kl(mu_p, lv_p) + np_kl(mu_u, lv_u))
        )
        assert got == pytest.approx(expected, abs=1e-6)

    def test_paper_scale_partition_accepted(self):
        part = LatentPartition((("pose", 32), ("u", 32)))
        encs = {"pose": TinyEncoder(3, 32, 0), "u": TinyEncoder(4, 32, 1)}
        decs = {"pose": TinyDecoder(64, 3, 2), "x": TinyDecoder(64, 4, 3)}
        gen = torch.Generator().manual_seed(2)
        x = torch.randn(2, 4, generator=gen, dtype=DTYPE)
        y1 = torch.randn(2, 3, generator=gen, dtype=DTYPE)
        noise = torch.randn(2, 64, generator=gen, dtype=DTYPE)
        w = ElboWeights(1.0, {"pose": 0.01}, 1.0)
        assert math.isfinite(elbo_dis_u(x, y1, encs, decs, w, part, noise).item())

    def test_partition_must_end_in_u(self):
        part = LatentPartition((("p", 2), ("q", 2)))
        encs, decs = {}, {}
        with pytest.raises(ConfigError):
            elbo_dis_u(torch.zeros(1, 4), torch.zeros(1, 3), encs, decs,
                       ElboWeights(1, {"p": 1}, 1), part, torch.zeros(1, 4))

    def test_gradient_finite_differences(self):
        part, encs, decs, x, y1, noise = make_dis_u()
        w = ElboWeights(0.8, {"p": 0.4}, 0.6)
        fd_gradcheck(
            lambda: elbo_dis_u(x, y1, encs, decs, w, part, noise),
            [encs["p"], encs["u"], decs["p"], decs["x"]],
        )


class TestConsistencyLossZu:
    def test_decoder_ignoring_residual_slice_gives_zero(self):
        part = LatentPartition((("p", 2), ("u", 2)))

        class SliceDecoder(nn.Module):
            def __init__(self, target):
                super().__init__()
                self.target = target

            def forward(self, z):
                return self.target + 0.0 * z[:, :2] @ torch.zeros(2, 3, dtype=DTYPE)

        y1 = torch.randn(2, 3, generator=torch.Generator().manual_seed(0), dtype=DTYPE)
        enc = TinyEncoder(3, 2, 0)
        stats = (torch.zeros(2, 2, dtype=DTYPE), torch.ones(2, 2, dtype=DTYPE))
        noise = torch.randn(2, 4, generator=torch.Generator().manual_seed(1), dtype=DTYPE)
        loss = consistency_loss_zu(y1, enc, SliceDecoder(y1), stats, part, noise)
        assert loss.item() == 0.0

    def test_zero_sigma_reduces_to_reconstruction(self):
        part, encs, decs, x, y1, noise = make_dis_u()
        mu = torch.randn(2, 2, generator=torch.Generator().manual_seed(3), dtype=DTYPE)
        got = consistency_loss_zu(y1, encs["p"], decs["p"], (mu, torch.zeros_like(mu)), part, noise)

        mu_p, lv_p = np_encoder(encs["p"], y1.numpy())
        z = np.concatenate([mu_p + np.exp(0.5 * lv_p) * noise.numpy()[:, :2], mu.numpy()], axis=1)
        expected = -np_gauss_ll(y1.numpy(), np_decoder(decs["p"], z))
        assert got.item() == pytest.approx(expected, abs=1e-6)

    def test_nonnegative(self):
        part, encs, decs, x, y1, noise = make_dis_u()
        stats = (torch.zeros(2, 2, dtype=DTYPE), torch.ones(2, 2, dtype=DTYPE))
        assert consistency_loss_zu(y1, encs["p"], decs["p"], stats, part, noise).item() >= 0.0

    def test_no_gradient_into_stats(self):
        part, encs, decs, x, y1, noise = make_dis_u()
        mu = torch.randn(2, 2, dtype=DTYPE, requires_grad=True)
        sigma = torch.rand(2, 2, dtype=DTYPE, requires_grad=True)
        loss = consistency_loss_zu(y1, encs["p"], decs["p"], (mu, sigma), part, noise)
        loss.backward()
        assert mu.grad is None and sigma.grad is None


class TestElboEmbPrime:
    def test_manual_composition_oracle(self):
        part, _, decs, x, ys, noise = make_dis()
        enc_xhat = TinyEncoder(5, 4, 13)
        x_hat = torch.randn(2, 5, generator=torch.Generator().manual_seed(17), dtype=DTYPE)
        w = ElboWeights(0.5, {"p": 0.3, "q": 0.2}, 0.01)
        got = elbo_emb_prime(x_hat, x, ys, enc_xhat, decs, w, part, noise).item()

        mu, lv = np_encoder(enc_xhat, x_hat.numpy())
        z = mu + np.exp(0.5 * lv) * noise.numpy()
        expected = (
            0.5 * np_gauss_ll(x.numpy(), np_decoder(decs["x"], z))
            + 0.3 * np_gauss_ll(ys["p"].numpy(), np_decoder(decs["p"], z[:, :2]))
            + 0.2 * np_gauss_ll(ys["q"].numpy(), np_decoder(decs["q"], z[:, 2:]))
            - 0.01 * np_kl(mu, lv)
        )
        assert got == pytest.approx(expected, abs=1e-6)

    def test_decoder_gradient_exactly_zero(self):
        part, _, decs, x, ys, noise = make_dis()
        enc_xhat = TinyEncoder(5, 4, 13)
        x_hat = torch.randn(2, 5, generator=torch.Generator().manual_seed(17), dtype=DTYPE)
        loss = -elbo_emb_prime(x_hat, x, ys, enc_xhat, decs,
                               ElboWeights(1, {"p": 1, "q": 1}, 0.01), part, noise)
        loss.backward()
        for dec in decs.values():
            for p in dec.parameters():
                assert p.grad is None or p.grad.abs().max().item() == 0.0

    def test_gradient_finite_differences_encoder_only(self):
        part, _, decs, x, ys, noise = make_dis()
        enc_xhat = TinyEncoder(5, 4, 13)
        x_hat = torch.randn(2, 5, generator=torch.Generator().manual_seed(17), dtype=DTYPE)
        w = ElboWeights(0.5, {"p": 0.3, "q": 0.2}, 0.01)
        fd_gradcheck(lambda: elbo_emb_prime(x_hat, x, ys, enc_xhat, decs, w, part, noise), [enc_xhat])


class TestFrozenParams:
    def test_gradients_flow_through_frozen_net_to_inputs(self):
        dec = TinyDecoder(2, 2, 0)
        z = torch.randn(1, 2, dtype=DTYPE, requires_grad=True)
        with frozen_params(dec):
            out = dec(z).sum()
        out.backward()
        assert z.grad is not None and z.grad.abs().sum() > 0
        assert all(p.grad is None for p in dec.parameters())

    def test_non_module_callables_pass_through(self):
        with frozen_params(lambda z: z * 2):
            pass
