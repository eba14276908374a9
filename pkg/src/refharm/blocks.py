"""Differentiable building blocks: modulated and partial convolutions,
diagonal Gaussian codes, least-squares GAN losses and a finite-difference
gradient checker."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation

LOG_SIGMA_BOUNDS = (-10.0, 10.0)
DEMOD_EPS = 1e-8


def modulated_conv(x: torch.Tensor, weight: torch.Tensor, style: torch.Tensor,
                   demodulate: bool = True, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Convolve ``x`` with a kernel whose input channels are scaled per sample.

    ``x`` is (B, Cin, H, W), ``weight`` (Cout, Cin, k, k) and ``style`` either
    (Cin,) or (B, Cin). With ``demodulate`` each output filter is rescaled to
    unit norm. Same padding, stride 1.
    """
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if style.dim() == 1:
        style = style.unsqueeze(0).expand(b, -1)
    if wcin != cin or style.shape != (b, cin):
        raise ContractViolation(
            f"style {tuple(style.shape)} / kernel {tuple(weight.shape)} do not match input channels {cin}")
    wmod = weight.unsqueeze(0) * style.view(b, 1, cin, 1, 1)
    if demodulate:
        wmod = wmod * torch.rsqrt(wmod.pow(2).sum(dim=(2, 3, 4), keepdim=True) + DEMOD_EPS)
    out = F.conv2d(x.reshape(1, b * cin, h, w), wmod.reshape(b * cout, cin, kh, kw),
                   padding=(kh // 2, kw // 2), groups=b)
    out = out.view(b, cout, h, w)
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1)
    return out


def partial_conv(x: torch.Tensor, mask: torch.Tensor, weight: torch.Tensor,
                 bias: torch.Tensor | None = None, stride: int = 1, padding: int | None = None):
    """Mask-renormalised convolution.

    ``mask`` is (B, 1, H, W) with values in {0, 1} shared by all input
    channels. Each window computes ``W^T (X*M) * n_window / sum(M) + b`` where
    ``n_window`` counts in-bounds pixels, so zero padding is not treated as
    a hole. Windows without valid pixels output 0 (bias included) and mark
    the updated mask 0.
    """
    if mask.shape[-2:] != x.shape[-2:] or mask.shape[1] != 1:
        raise ContractViolation(f"mask {tuple(mask.shape)} does not fit features {tuple(x.shape)}")
    k = weight.shape[-1]
    if padding is None:
        padding = k // 2
    ones_k = torch.ones(1, 1, k, k, dtype=x.dtype, device=x.device)
    with torch.no_grad():
        msum = F.conv2d(mask, ones_k, stride=stride, padding=padding)
        window = F.conv2d(torch.ones_like(mask[:1]), ones_k, stride=stride, padding=padding)
        valid = (msum > 0).to(x.dtype)
        ratio = window / msum.clamp(min=1.0) * valid
    out = F.conv2d(x * mask, weight, stride=stride, padding=padding) * ratio
    if bias is not None:
        out = out + bias.view(1, -1, 1, 1) * valid
    return out, valid


class PartialConv2d(nn.Conv2d):
    def forward(self, x, mask):
        return partial_conv(x, mask, self.weight, self.bias, self.stride[0], self.padding[0])

    def forward_vanilla(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ModulatedConv2d(nn.Module):
    """Style-modulated k x k convolution; no bias inside the modulation."""

    def __init__(self, in_channels, out_channels, kernel_size=3, demodulate=True):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(out_channels, in_channels, kernel_size, kernel_size)
                                   / math.sqrt(in_channels * kernel_size ** 2))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.demodulate = demodulate

    def forward(self, x, style):
        return modulated_conv(x, self.weight, style, self.demodulate, self.bias)


class MappingNetwork(nn.Module):
    """Fully connected stack mapping a latent code to per-channel styles.

    The last layer's bias starts at 1 so the initial styles are close to
    unit modulation.
    """

    def __init__(self, latent_dim, out_channels, hidden=128, depth=3):
        super().__init__()
        layers = []
        width = latent_dim
        for _ in range(depth - 1):
            layers += [nn.Linear(width, hidden), nn.LeakyReLU(0.2)]
            width = hidden
        last = nn.Linear(width, out_channels)
        nn.init.ones_(last.bias)
        self.net = nn.Sequential(*layers, last)

    def forward(self, z):
        return self.net(z)


@dataclass
class GaussianCode:
    """Diagonal Gaussian with standard deviation ``sigma = exp(log_sigma)``."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    @classmethod
    def from_head(cls, mu, raw_log_sigma):
        """Clamp log-sigma to its bounds in the forward pass only.

        The gradient passes straight through, so a head pushed past a bound
        can still be pulled back by the KL terms.
        """
        clamped = raw_log_sigma.clamp(*LOG_SIGMA_BOUNDS)
        return cls(mu, raw_log_sigma + (clamped - raw_log_sigma).detach())

    @classmethod
    def standard(cls, like: torch.Tensor):
        return cls(torch.zeros_like(like), torch.zeros_like(like))

    @property
    def sigma(self):
        return self.log_sigma.exp()

    @property
    def dim(self):
        return self.mu.shape[-1]

    def detach(self):
        return GaussianCode(self.mu.detach(), self.log_sigma.detach())


def reparameterize(code: GaussianCode, generator: torch.Generator | None = None,
                   eps: torch.Tensor | None = None) -> torch.Tensor:
    """``mu + sigma * eps`` with ``eps`` standard normal unless given."""
    if eps is None:
        eps = torch.randn(code.mu.shape, generator=generator, dtype=code.mu.dtype,
                          device=code.mu.device)
    return code.mu + code.sigma * eps


def kl_diag_gaussians(p: GaussianCode, q: GaussianCode) -> torch.Tensor:
    """KL(p || q) summed over the latent dimension, averaged over any batch dims."""
    if p.mu.shape != q.mu.shape:
        raise ContractViolation(f"code shapes differ: {tuple(p.mu.shape)} vs {tuple(q.mu.shape)}")
    var_p = (2 * p.log_sigma).exp()
    var_q = (2 * q.log_sigma).exp()
    kl = q.log_sigma - p.log_sigma + (var_p + (p.mu - q.mu) ** 2) / (2 * var_q) - 0.5
    return kl.sum(dim=-1).mean()


def lsgan_g_loss(score: torch.Tensor) -> torch.Tensor:
    return ((score - 1) ** 2).mean()


def lsgan_d_loss(real_score: torch.Tensor, fake_score: torch.Tensor) -> torch.Tensor:
    return ((real_score - 1) ** 2).mean() + (fake_score ** 2).mean()


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_errors: list = field(default_factory=list)
    flagged: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(fn: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps=1e-4, tol=1e-4,
               scale_floor=1e-3, kink_tol=1e-2, projection_seed=0) -> GradCheckReport:
    """Compare autograd gradients of ``fn`` with central finite differences.

    Non-scalar outputs are reduced by a fixed random projection. The relative
    error of each element is ``|analytic - numeric| / max(|analytic|,
    |numeric|, scale_floor)``. Elements where the two one-sided differences
    disagree by more than ``kink_tol`` are treated as non-differentiable:
    counted in ``flagged`` and left out of the maximum.
    """
    inputs = [t.detach().clone(memory_format=torch.contiguous_format).requires_grad_(True)
              for t in inputs]
    out = fn(*inputs)
    proj = None
    if out.numel() != 1:
        gen = torch.Generator().manual_seed(projection_seed)
        proj = torch.randn(out.shape, generator=gen, dtype=out.dtype)

    def scalar(*args):
        val = fn(*args)
        return (val * proj).sum() if proj is not None else val.reshape(())

    analytic = torch.autograd.grad(scalar(*inputs), inputs, allow_unused=True)
    errors, flagged = [], 0
    with torch.no_grad():
        base = [t.detach().clone() for t in inputs]
        f0 = float(scalar(*base))
        for idx, t in enumerate(base):
            grad = analytic[idx]
            flat = t.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                fp = float(scalar(*base))
                flat[j] = orig - eps
                fm = float(scalar(*base))
                flat[j] = orig
                numeric = (fp - fm) / (2 * eps)
                if abs((fp - f0) / eps - (f0 - fm) / eps) > kink_tol * max(1.0, abs(numeric)):
                    flagged += 1
                    continue
                a = 0.0 if grad is None else float(grad.reshape(-1)[j])
                errors.append(abs(a - numeric) / max(abs(a), abs(numeric), scale_floor))
    return GradCheckReport(max(errors, default=0.0), errors, flagged, tol)
