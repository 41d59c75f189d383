"""Latent primitives: reparameterization, closed-form KL, code partitioning."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dvae.errors import DimensionError, NumericError
from dvae.latent import (
    GaussianParams,
    LatentCode,
    LatentPartition,
    concat_latent,
    kl_standard_normal,
    reparameterize,
    split_latent,
)


def gp(mean, log_var, dtype=torch.float64):
    return GaussianParams(torch.tensor(mean, dtype=dtype), torch.tensor(log_var, dtype=dtype))


class TestReparameterize:
    def test_zero_noise_returns_mean(self):
        out = reparameterize(gp([2.0, -1.0], [0.0, 0.0]), torch.zeros(2, dtype=torch.float64))
        assert torch.equal(out, torch.tensor([2.0, -1.0], dtype=torch.float64))

    def test_unit_variance_adds_noise(self):
        out = reparameterize(gp([0.0], [0.0]), torch.tensor([1.5], dtype=torch.float64))
        assert torch.equal(out, torch.tensor([1.5], dtype=torch.float64))

    def test_monte_carlo_statistics(self):
        # mean 1, variance 4: sample statistics must land within 3 standard
        # errors at 1e5 draws.
        n = 100_000
        params = gp([1.0], [math.log(4.0)])
        noise = torch.randn(n, 1, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        draws = reparameterize(GaussianParams(params.mean.expand(n, 1), params.log_var.expand(n, 1)), noise)
        se_mean = 2.0 / math.sqrt(n)
        se_var = 4.0 * math.sqrt(2.0 / (n - 1))
        assert abs(draws.mean().item() - 1.0) < 3 * se_mean
        assert abs(draws.var().item() - 4.0) < 3 * se_var

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            reparameterize(gp([0.0, 0.0], [0.0, 0.0]), torch.zeros(3, dtype=torch.float64))

    def test_log_var_clamped_before_exp(self):
        out = reparameterize(gp([0.0], [500.0]), torch.ones(1, dtype=torch.float64))
        assert torch.isfinite(out).all()
        assert out.item() == pytest.approx(math.exp(5.0))


class TestKlStandardNormal:
    def test_prior_gives_zero(self):
        assert kl_standard_normal(gp([0.0] * 4, [0.0] * 4)).item() == 0.0

    def test_closed_form_mean_only(self):
        assert kl_standard_normal(gp([1.0], [0.0])).item() == pytest.approx(0.5)

    def test_monte_carlo_oracle_log2(self):
        # E_q[log q - log p] estimated by brute force sampling from q.
        mean, var = 0.0, 2.0
        exact = kl_standard_normal(gp([mean], [math.log(var)])).item()
        rng = np.random.default_rng(7)
        x = rng.normal(mean, math.sqrt(var), size=1_000_000)
        log_q = -0.5 * math.log(2 * math.pi * var) - (x - mean) ** 2 / (2 * var)
        log_p = -0.5 * math.log(2 * math.pi) - x**2 / 2
        mc = float(np.mean(log_q - log_p))
        assert abs(exact - mc) / abs(mc) < 0.01

    def test_batch_reduction_is_mean(self):
        params = GaussianParams(torch.ones(4, 3, dtype=torch.float64),
                                torch.zeros(4, 3, dtype=torch.float64))
        single = kl_standard_normal(gp([1.0] * 3, [0.0] * 3))
        assert kl_standard_normal(params).item() == pytest.approx(single.item())

    def test_nonfinite_mean_raises(self):
        with pytest.raises(NumericError):
            kl_standard_normal(gp([float("nan")], [0.0]))

    def test_nonfinite_log_var_raises(self):
        with pytest.raises(NumericError):
            GaussianParams(torch.zeros(1), torch.tensor([float("inf")]))

    @given(
        st.lists(st.floats(-3, 3), min_size=1, max_size=8),
        st.lists(st.floats(-2, 2), min_size=1, max_size=8),
    )
    @settings(deadline=None, max_examples=60)
    def test_nonnegative(self, mean, log_var):
        d = min(len(mean), len(log_var))
        value = kl_standard_normal(gp(mean[:d], log_var[:d])).item()
        assert value >= 0.0

    def test_zero_iff_standard(self):
        assert kl_standard_normal(gp([0.0, 0.0], [0.0, 0.0])).item() <= 1e-12
        assert kl_standard_normal(gp([1e-3, 0.0], [0.0, 0.0])).item() > 1e-12
        assert kl_standard_normal(gp([0.0], [1e-3])).item() > 1e-12

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        mean = torch.tensor(rng.uniform(-2, 2, 5), dtype=torch.float64, requires_grad=True)
        log_var = torch.tensor(rng.uniform(-1.5, 1.5, 5), dtype=torch.float64, requires_grad=True)
        kl = kl_standard_normal(GaussianParams(mean, log_var))
        kl.backward()

        def f(m, lv):
            return kl_standard_normal(gp(m.tolist(), lv.tolist())).item()

        h = 1e-5
        for i in range(5):
            for tensor, grad in ((mean, mean.grad), (log_var, log_var.grad)):
                plus, minus = tensor.detach().clone(), tensor.detach().clone()
                plus[i] += h
                minus[i] -= h
                if tensor is mean:
                    fd = (f(plus, log_var.detach()) - f(minus, log_var.detach())) / (2 * h)
                else:
                    fd = (f(mean.detach(), plus) - f(mean.detach(), minus)) / (2 * h)
                assert abs(grad[i].item() - fd) / max(abs(fd), 1e-8) < 1e-4


class TestPartition:
    def test_paper_scale_partition(self):
        part = LatentPartition((("pose", 32), ("content", 32)))
        code = concat_latent([torch.zeros(32), torch.ones(32)], part)
        assert code.values.shape == (64,)
        assert torch.equal(code.get("content"), torch.ones(32))

    def test_slice_example(self):
        part = LatentPartition((("a", 1), ("b", 3)))
        code = LatentCode(torch.tensor([1.0, 2.0, 3.0, 4.0]), part)
        assert torch.equal(split_latent(code, "b"), torch.tensor([2.0, 3.0, 4.0]))

    def test_layout_by_construction(self):
        part = LatentPartition((("p", 3), ("q", 5)))
        a, b = torch.arange(3.0), torch.arange(5.0) + 10
        code = concat_latent([a, b], part)
        assert torch.equal(split_latent(code, "q"), b)

    def test_duplicate_names_rejected(self):
        with pytest.raises(DimensionError):
            LatentPartition((("a", 2), ("a", 3)))

    def test_nonpositive_dim_rejected(self):
        with pytest.raises(DimensionError):
            LatentPartition((("a", 0),))

    def test_wrong_part_count(self):
        part = LatentPartition((("a", 2), ("b", 2)))
        with pytest.raises(DimensionError):
            concat_latent([torch.zeros(2)], part)

    def test_wrong_part_length(self):
        part = LatentPartition((("a", 2), ("b", 2)))
        with pytest.raises(DimensionError):
            concat_latent([torch.zeros(2), torch.zeros(3)], part)

    def test_unknown_name(self):
        part = LatentPartition((("a", 2),))
        code = LatentCode(torch.zeros(2), part)
        with pytest.raises(KeyError):
            split_latent(code, "missing")

    @given(st.integers(1, 5), st.integers(0, 2**31 - 1))
    @settings(deadline=None, max_examples=40)
    def test_round_trip_random_partitions(self, n_segments, seed):
        rng = np.random.default_rng(seed)
        dims = [int(rng.integers(1, 7)) for _ in range(n_segments)]
        part = LatentPartition(tuple((f"s{i}", d) for i, d in enumerate(dims)))
        parts = [torch.tensor(rng.normal(size=d)) for d in dims]
        code = concat_latent(parts, part)
        for (name, _), original in zip(part.segments, parts):
            assert torch.equal(split_latent(code, name), original)
        rebuilt = concat_latent([split_latent(code, n) for n, _ in part.segments], part)
        assert torch.equal(rebuilt.values, code.values)

    def test_batched_codes(self):
        part = LatentPartition((("a", 2), ("b", 3)))
        code = concat_latent([torch.zeros(4, 2), torch.ones(4, 3)], part)
        assert code.values.shape == (4, 5)
        assert torch.equal(code.get("b"), torch.ones(4, 3))
