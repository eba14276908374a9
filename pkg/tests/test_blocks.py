import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from oracles import kl_monte_carlo, modulated_conv_loops, partial_conv_loops
from refharm.blocks import (GaussianCode, MappingNetwork, ModulatedConv2d, PartialConv2d,
                            grad_check, kl_diag_gaussians, lsgan_d_loss, lsgan_g_loss,
                            modulated_conv, partial_conv, reparameterize)
from refharm.errors import ContractViolation

D64 = torch.float64


def gen(seed):
    return torch.Generator().manual_seed(seed)


def code(mu, sigma):
    mu = torch.as_tensor(mu, dtype=D64)
    return GaussianCode(mu, torch.log(torch.as_tensor(sigma, dtype=D64)).expand_as(mu).clone())


class TestModulatedConv:
    def test_unit_style_is_plain_conv(self):
        x = torch.randn(2, 4, 6, 6, generator=gen(0), dtype=D64)
        w = torch.randn(5, 4, 3, 3, generator=gen(1), dtype=D64)
        out = modulated_conv(x, w, torch.ones(4, dtype=D64), demodulate=False)
        assert (out - F.conv2d(x, w, padding=1)).abs().max() <= 1e-6

    def test_unit_style_float32(self):
        # Grouped and plain kernels sum in different orders; float32 rounding only.
        x = torch.randn(2, 4, 6, 6, generator=gen(0))
        w = torch.randn(5, 4, 3, 3, generator=gen(1))
        out = modulated_conv(x, w, torch.ones(4), demodulate=False)
        torch.testing.assert_close(out, F.conv2d(x, w, padding=1), rtol=1e-6, atol=1e-5)

    def test_style_two_doubles(self):
        x = torch.randn(1, 3, 5, 5, generator=gen(2), dtype=D64)
        w = torch.randn(2, 3, 3, 3, generator=gen(3), dtype=D64)
        out = modulated_conv(x, w, 2 * torch.ones(3, dtype=D64), demodulate=False)
        torch.testing.assert_close(out, 2 * F.conv2d(x, w, padding=1), rtol=0, atol=1e-12)

    def test_scalar(self):
        x = torch.full((1, 1, 1, 1), 0.7)
        out = modulated_conv(x, torch.full((1, 1, 1, 1), 3.0), torch.tensor([0.5]), demodulate=False)
        assert out.item() == pytest.approx(1.05)

    @pytest.mark.parametrize("demod", [False, True])
    def test_against_loops(self, demod):
        rng = np.random.default_rng(4)
        x, w, s = rng.standard_normal((3, 5, 5)), rng.standard_normal((2, 3, 3, 3)), rng.random(3) + 0.5
        out = modulated_conv(torch.tensor(x[None]), torch.tensor(w), torch.tensor(s), demod)
        np.testing.assert_allclose(out[0].numpy(), modulated_conv_loops(x, w, s, demod), atol=1e-10)

    def test_demod_unit_norm_filters(self):
        # With demodulation a delta input returns each filter at unit norm.
        w = torch.randn(3, 1, 3, 3, generator=gen(5), dtype=D64)
        x = torch.zeros(1, 1, 3, 3, dtype=D64)
        x[0, 0, 1, 1] = 1
        out = modulated_conv(x, w, torch.tensor([4.0], dtype=D64), True)
        norms = out[0].pow(2).sum(dim=(1, 2)).sqrt()
        torch.testing.assert_close(norms, torch.ones(3, dtype=D64), rtol=0, atol=1e-8)

    def test_per_sample_style(self):
        x = torch.randn(2, 3, 4, 4, generator=gen(6))
        w = torch.randn(2, 3, 3, 3, generator=gen(7))
        s = torch.rand(2, 3, generator=gen(8)) + 0.5
        out = modulated_conv(x, w, s, True)
        for b in range(2):
            single = modulated_conv(x[b:b + 1], w, s[b], True)
            assert (out[b:b + 1] - single).abs().max() <= 1e-6

    def test_mismatch(self):
        with pytest.raises(ContractViolation):
            modulated_conv(torch.zeros(1, 3, 4, 4), torch.zeros(2, 3, 3, 3), torch.ones(4))

    def test_module(self):
        layer = ModulatedConv2d(4, 6, demodulate=False)
        x = torch.randn(2, 4, 5, 5, generator=gen(9))
        out = layer(x, torch.ones(2, 4))
        ref = F.conv2d(x, layer.weight, layer.bias, padding=1)
        assert (out - ref).abs().max() <= 1e-6


class TestPartialConv:
    @pytest.mark.parametrize("stride,k", [(1, 3), (2, 4), (2, 3)])
    def test_all_one_mask_is_vanilla(self, stride, k):
        layer = PartialConv2d(3, 5, k, stride=stride, padding=1)
        x = torch.randn(2, 3, 9, 9, generator=gen(10))
        out, valid = layer(x, torch.ones(2, 1, 9, 9))
        assert (out - layer.forward_vanilla(x)).abs().max() <= 1e-6
        assert bool((valid == 1).all())

    def test_all_zero_mask(self):
        layer = PartialConv2d(2, 3, 3, padding=1)
        out, valid = layer(torch.randn(1, 2, 5, 5, generator=gen(11)), torch.zeros(1, 1, 5, 5))
        assert bool((out == 0).all()) and bool((valid == 0).all())

    def test_half_masked_constant(self):
        x = torch.full((1, 1, 6, 6), 2.0, dtype=D64)
        mask = torch.zeros(1, 1, 6, 6, dtype=D64)
        mask[..., :3] = 1
        out, valid = partial_conv(x, mask, torch.ones(1, 1, 3, 3, dtype=D64), torch.zeros(1, dtype=D64))
        # Interior windows touching the mask renormalize to the full 9-tap sum.
        torch.testing.assert_close(out[0, 0, 1:5, 1:4], torch.full((4, 3), 18.0, dtype=D64))
        assert bool((valid[0, 0, :, :4] == 1).all()) and bool((valid[0, 0, :, 4:] == 0).all())

    @pytest.mark.parametrize("seed", range(3))
    def test_against_loops(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 7, 7))
        m = (rng.random((7, 7)) > 0.6).astype(np.float64)
        w, b = rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        for stride in (1, 2):
            out, valid = partial_conv(torch.tensor(x[None]), torch.tensor(m[None, None]),
                                      torch.tensor(w), torch.tensor(b), stride, 1)
            ref, ref_mask = partial_conv_loops(x, m, w, b, stride, 1)
            np.testing.assert_allclose(out[0].numpy(), ref, atol=1e-10)
            np.testing.assert_array_equal(valid[0, 0].numpy(), ref_mask)

    def test_kernel_gradient_matches_vanilla(self):
        x = torch.randn(1, 2, 6, 6, generator=gen(12), dtype=D64)
        w = torch.randn(3, 2, 3, 3, generator=gen(13), dtype=D64, requires_grad=True)
        proj = torch.randn(1, 3, 6, 6, generator=gen(14), dtype=D64)
        g1, = torch.autograd.grad((partial_conv(x, torch.ones(1, 1, 6, 6, dtype=D64), w)[0] * proj).sum(), w)
        g2, = torch.autograd.grad((F.conv2d(x, w, padding=1) * proj).sum(), w)
        assert (g1 - g2).abs().max() <= 1e-6

    def test_mask_shape_contract(self):
        with pytest.raises(ContractViolation):
            partial_conv(torch.zeros(1, 2, 4, 4), torch.ones(1, 1, 5, 4), torch.zeros(1, 2, 3, 3))


class TestGaussian:
    def test_clamp(self):
        c = GaussianCode.from_head(torch.zeros(3), torch.tensor([-50.0, 0.0, 50.0]))
        assert c.sigma.min() >= math.exp(-10) * (1 - 1e-6)
        assert c.sigma.max() <= math.exp(10) * (1 + 1e-6)

    def test_clamp_passes_gradient(self):
        raw = torch.tensor([-50.0, 0.0, 50.0], requires_grad=True)
        GaussianCode.from_head(torch.zeros(3), raw).log_sigma.sum().backward()
        assert raw.grad.tolist() == [1.0, 1.0, 1.0]

    def test_reparameterize_degenerate(self):
        c = GaussianCode.from_head(torch.tensor([0.3, -1.0], dtype=D64), torch.full((2,), -40.0, dtype=D64))
        z = reparameterize(c, gen(0))
        assert (z - c.mu).abs().max() <= 1e-4

    def test_reparameterize_formula(self):
        z = reparameterize(code(torch.zeros(4), 0.5), eps=torch.ones(4, dtype=D64))
        torch.testing.assert_close(z, torch.full((4,), 0.5, dtype=D64))

    def test_reparameterize_moments(self):
        z = reparameterize(code(torch.ones(100_000), 2.0), gen(1))
        assert abs(z.mean().item() - 1) <= 0.03
        assert abs(z.std().item() - 2) <= 0.03

    def test_reparameterize_jacobian(self):
        eps = torch.randn(5, generator=gen(2), dtype=D64)
        mu = torch.randn(5, generator=gen(3), dtype=D64)
        sigma = torch.rand(5, generator=gen(4), dtype=D64) + 0.5
        jac_mu, jac_sigma = torch.autograd.functional.jacobian(
            lambda m, s: reparameterize(GaussianCode(m, s.log()), eps=eps), (mu, sigma))
        torch.testing.assert_close(jac_mu, torch.eye(5, dtype=D64))
        torch.testing.assert_close(jac_sigma, torch.diag(eps))
        report = grad_check(lambda m, s: reparameterize(GaussianCode(m, s.log()), eps=eps), [mu, sigma])
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("p,q,expected", [
        ((1.0, 1.0), (0.0, 1.0), 0.5),
        ((0.0, 2.0), (0.0, 1.0), 2 - 0.5 - math.log(2)),
    ])
    def test_kl_hand_values(self, p, q, expected):
        kl = kl_diag_gaussians(code([p[0]], p[1]), code([q[0]], q[1])).item()
        assert kl == pytest.approx(expected, abs=1e-12)
        assert abs(kl_monte_carlo([p[0]], [p[1]], [q[0]], [q[1]], 10**6, np.random.default_rng(0)) - kl) <= 0.01

    @pytest.mark.parametrize("seed", range(5))
    def test_kl_monte_carlo(self, seed):
        rng = np.random.default_rng(100 + seed)
        mp, mq = rng.normal(0, 0.5, 3), rng.normal(0, 0.5, 3)
        sp, sq = rng.uniform(0.6, 1.4, 3), rng.uniform(0.8, 1.4, 3)
        kl = kl_diag_gaussians(GaussianCode(torch.tensor(mp), torch.tensor(np.log(sp))),
                               GaussianCode(torch.tensor(mq), torch.tensor(np.log(sq)))).item()
        assert abs(kl - kl_monte_carlo(mp, sp, mq, sq, 10**6, rng)) <= 0.01

    def test_kl_zero_for_equal(self):
        c = code(torch.randn(6, generator=gen(5), dtype=D64), 0.7)
        assert abs(kl_diag_gaussians(c, c).item()) <= 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-2, 2), st.floats(-3, 3), st.floats(-2, 2)),
                    min_size=1, max_size=6))
    def test_kl_nonnegative(self, params):
        mp, lp, mq, lq = (torch.tensor(v, dtype=D64) for v in zip(*params))
        assert kl_diag_gaussians(GaussianCode(mp, lp), GaussianCode(mq, lq)).item() >= -1e-12

    def test_kl_batch_mean(self):
        p = GaussianCode(torch.tensor([[1.0], [0.0]], dtype=D64), torch.zeros(2, 1, dtype=D64))
        q = GaussianCode.standard(p.mu)
        assert kl_diag_gaussians(p, q).item() == pytest.approx(0.25)

    def test_kl_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            kl_diag_gaussians(code([0.0, 0.0], 1.0), code([0.0], 1.0))


class TestLsgan:
    def test_g(self):
        assert lsgan_g_loss(torch.ones(3)).item() == 0
        assert lsgan_g_loss(torch.zeros(3)).item() == 1
        assert lsgan_g_loss(torch.tensor([0.5, 1.5])).item() == pytest.approx(0.25)

    def test_d(self):
        assert lsgan_d_loss(torch.ones(2), torch.zeros(2)).item() == 0
        assert lsgan_d_loss(torch.zeros(2), torch.ones(2)).item() == 2
        assert lsgan_d_loss(torch.tensor([0.8]), torch.tensor([0.2])).item() == pytest.approx(0.08)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
    def test_nonnegative(self, scores):
        s = torch.tensor(scores, dtype=D64)
        assert lsgan_g_loss(s).item() >= 0 and lsgan_d_loss(s, s).item() >= 0


class TestGradChecks:
    def test_kl(self):
        mu = torch.full((4,), 0.3, dtype=D64)
        ls = torch.full((4,), math.log(1.2), dtype=D64)
        report = grad_check(lambda m, s: kl_diag_gaussians(GaussianCode(m, s), GaussianCode.standard(m)),
                            [mu, ls])
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("seed", range(5))
    def test_kl_random_points(self, seed):
        t = torch.randn(4, 3, generator=gen(seed), dtype=D64) * 0.5
        report = grad_check(lambda a, b, c, d: kl_diag_gaussians(GaussianCode(a, b), GaussianCode(c, d)),
                            list(t))
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("demod", [False, True])
    def test_modulated_conv(self, seed, demod):
        x = torch.randn(1, 3, 4, 4, generator=gen(seed), dtype=D64)
        w = torch.randn(2, 3, 3, 3, generator=gen(seed + 50), dtype=D64)
        s = torch.rand(3, generator=gen(seed + 99), dtype=D64) + 0.5
        report = grad_check(lambda x_, w_, s_: modulated_conv(x_, w_, s_, demod), [x, w, s])
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("seed", range(5))
    def test_partial_conv(self, seed):
        x = torch.randn(1, 2, 5, 5, generator=gen(seed), dtype=D64)
        w = torch.randn(2, 2, 3, 3, generator=gen(seed + 7), dtype=D64)
        b = torch.randn(2, generator=gen(seed + 8), dtype=D64)
        m = (torch.rand(1, 1, 5, 5, generator=gen(seed + 9)) > 0.4).to(D64)
        report = grad_check(lambda x_, w_, b_: partial_conv(x_, m, w_, b_, 2, 1)[0], [x, w, b])
        assert report.passed, report.max_rel_error

    @pytest.mark.parametrize("seed", range(5))
    def test_lsgan(self, seed):
        r = torch.randn(4, generator=gen(seed), dtype=D64)
        f = torch.randn(4, generator=gen(seed + 1), dtype=D64)
        assert grad_check(lsgan_d_loss, [r, f]).passed
        assert grad_check(lsgan_g_loss, [f]).passed

    def test_mapping_network(self):
        net = MappingNetwork(4, 3, hidden=8).double()
        z = torch.randn(2, 4, generator=gen(3), dtype=D64)
        report = grad_check(net, [z])
        assert report.passed and report.flagged == 0

    def test_kink_is_flagged_not_failed(self):
        report = grad_check(lambda x: x.abs().sum(), [torch.tensor([0.0, 1.0], dtype=D64)])
        assert report.flagged == 1 and report.passed

    def test_detects_wrong_gradient(self):
        class Wrong(torch.autograd.Function):
            @staticmethod
            def forward(ctx, x):
                return (x ** 2).sum()

            @staticmethod
            def backward(ctx, g):
                return g * torch.ones(3, dtype=D64)

        assert not grad_check(Wrong.apply, [torch.tensor([0.5, 1.0, 2.0], dtype=D64)]).passed


def test_mapping_network_starts_near_unit_style():
    net = MappingNetwork(16, 32)
    last = net.net[-1]
    assert torch.equal(last.bias, torch.ones(32))
