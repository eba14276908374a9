"""Diverse reflectance generation: encoder E, generator G, discriminator D_a
and the losses of the supervised and unsupervised branches.

The supervised branch encodes the original foreground image (all-one mask)
and reconstructs the ground-truth foreground reflectance. The unsupervised
branch encodes only the composite foreground through partial convolutions,
is pulled towards the supervised code by a KL term and trained adversarially;
it is the branch used at test time.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .batch import SceneBatch
from .blocks import (GaussianCode, MappingNetwork, ModulatedConv2d, PartialConv2d,
                     kl_diag_gaussians, lsgan_d_loss, lsgan_g_loss, reparameterize)
from .errors import ContractViolation
from .retinex import RHO_MIN
from .unet import UNet

ADV_WEIGHT = 0.1


class Encoder(nn.Module):
    """Four stride-2 partial-convolution stages, masked average pooling and
    two linear heads for the mean and log standard deviation."""

    def __init__(self, latent_dim=16, base=32, in_channels=3):
        super().__init__()
        chans = [in_channels, base, 2 * base, 4 * base, 4 * base]
        self.convs = nn.ModuleList(
            PartialConv2d(chans[i], chans[i + 1], 4, stride=2, padding=1) for i in range(4))
        self.mu = nn.Linear(chans[-1], latent_dim)
        self.log_sigma = nn.Linear(chans[-1], latent_dim)

    def _heads(self, feats, mask):
        pooled = (feats * mask).sum(dim=(2, 3)) / mask.sum(dim=(2, 3)).clamp(min=1.0)
        return GaussianCode.from_head(self.mu(pooled), self.log_sigma(pooled))

    def forward(self, image, mask):
        x = image
        for conv in self.convs:
            x, mask = conv(x, mask)
            x = F.leaky_relu(x, 0.2)
        return self._heads(x, mask)

    def forward_vanilla(self, image):
        """Same weights, plain convolutions; reference for the all-one-mask path."""
        x = image
        for conv in self.convs:
            x = F.leaky_relu(conv.forward_vanilla(x), 0.2)
        return self._heads(x, torch.ones_like(x[:, :1]))


class Generator(nn.Module):
    """U-Net over [composite, mask]; the guidance code drives a modulated
    convolution on the final decoder feature map."""

    def __init__(self, latent_dim=16, base=32, depth=4, demodulate=True, mapping_hidden=128,
                 mapping_depth=3):
        super().__init__()
        self.latent_dim = latent_dim
        self.unet = UNet(4, base, depth)
        width = self.unet.out_channels
        self.mapping = MappingNetwork(latent_dim, width, mapping_hidden, mapping_depth)
        self.modconv = ModulatedConv2d(width, width, 3, demodulate=demodulate)
        self.head = nn.Conv2d(width, 3, 3, padding=1)

    def forward(self, composite, mask, z):
        if z.shape[-1] != self.latent_dim:
            raise ContractViolation(f"latent code has dim {z.shape[-1]}, expected {self.latent_dim}")
        feats = self.unet(torch.cat([composite, mask], dim=1))
        feats = F.leaky_relu(self.modconv(feats, self.mapping(z)), 0.2)
        return RHO_MIN + (1.0 - RHO_MIN) * torch.sigmoid(self.head(feats))


class Discriminator(nn.Module):
    """Conditional critic over [A*M, I_c*M, M]; one realism score per sample."""

    def __init__(self, base=32, stages=3):
        super().__init__()
        layers, width = [], 7
        for i in range(stages):
            layers += [nn.Conv2d(width, base * 2 ** i, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            width = base * 2 ** i
        self.features = nn.Sequential(*layers)
        self.score = nn.Linear(width, 1)

    def forward(self, reflectance, composite, mask):
        x = torch.cat([reflectance * mask, composite * mask, mask], dim=1)
        return self.score(self.features(x).mean(dim=(2, 3))).squeeze(1)


class ReflectanceModel(nn.Module):
    def __init__(self, latent_dim=16, base=32, depth=4, demodulate=True):
        super().__init__()
        self.latent_dim = latent_dim
        self.E = Encoder(latent_dim, base)
        self.G = Generator(latent_dim, base, depth, demodulate)
        self.D = Discriminator(base)

    def generator_parameters(self):
        return list(self.E.parameters()) + list(self.G.parameters())


def encode(model: ReflectanceModel, image, mask=None) -> GaussianCode:
    """Gaussian guidance code of ``image``; ``mask=None`` means all-one."""
    if mask is None:
        mask = torch.ones_like(image[:, :1])
    return model.E(image, mask)


def generate(model: ReflectanceModel, composite, mask, z):
    return model.G(composite, mask, z)


def foreground_mse(pred, target, mask):
    """Squared error over foreground pixels, normalised by |M| * channels."""
    diff = ((pred - target) * mask) ** 2
    return diff.sum() / (mask.sum() * pred.shape[1]).clamp(min=1.0)


def reconstruction_loss(pred, target, mask, reduction="sum"):
    """Foreground reconstruction error of the supervised branch.

    ``"sum"`` is the squared norm of the masked difference per sample,
    averaged over the batch; ``"mean"`` divides by |M| * channels instead.
    The per-pixel mean is tiny next to the KL terms at 32x32 and lets the
    guidance code collapse onto the prior, so training uses ``"sum"``.
    """
    if reduction == "sum":
        return (((pred - target) * mask) ** 2).sum() / pred.shape[0]
    if reduction == "mean":
        return foreground_mse(pred, target, mask)
    raise ContractViolation(f"unknown reduction {reduction!r}")


@dataclass
class SupervisedOut:
    rec: torch.Tensor
    kl_gt: torch.Tensor
    prediction: torch.Tensor
    code: GaussianCode


@dataclass
class UnsupervisedOut:
    kl_pre: torch.Tensor
    adv: torch.Tensor
    prediction: torch.Tensor
    code: GaussianCode


def supervised_step(model: ReflectanceModel, batch: SceneBatch, generator=None,
                    rec_reduction="sum") -> SupervisedOut:
    code = encode(model, batch.original)
    z = reparameterize(code, generator)
    pred = generate(model, batch.composite, batch.mask, z)
    rec = reconstruction_loss(pred, batch.reflectance, batch.mask, rec_reduction)
    kl = kl_diag_gaussians(code, GaussianCode.standard(code.mu))
    return SupervisedOut(rec, kl, pred, code)


def unsupervised_step(model: ReflectanceModel, batch: SceneBatch, code_gt: GaussianCode,
                      generator=None) -> UnsupervisedOut:
    """Unsupervised branch. The pre-KL term pulls both codes together: the
    gradient reaches the supervised code as well, since E is shared and a
    detached target would move with every update."""
    code = encode(model, batch.composite, batch.mask)
    z = reparameterize(code, generator)
    pred = generate(model, batch.composite, batch.mask, z)
    kl = kl_diag_gaussians(code, code_gt)
    adv = lsgan_g_loss(model.D(pred, batch.composite, batch.mask))
    return UnsupervisedOut(kl, adv, pred, code)


def discriminator_step(model: ReflectanceModel, batch: SceneBatch, fake):
    real_score = model.D(batch.reflectance, batch.composite, batch.mask)
    fake_score = model.D(fake.detach(), batch.composite, batch.mask)
    return lsgan_d_loss(real_score, fake_score)


def total_generator_loss(rec, kl_gt, kl_pre, adv, lam=ADV_WEIGHT):
    return rec + kl_gt + kl_pre + lam * adv


@torch.no_grad()
def sample_diverse(model: ReflectanceModel, composite, mask, k, generator=None, source="posterior"):
    """``k`` reflectance maps for one composite (tensors of shape (1, C, H, W)).

    ``source="posterior"`` samples codes from the unsupervised encoder;
    ``source="prior"`` samples from the unit Gaussian instead (ablation).
    """
    if k < 1:
        raise ContractViolation("k must be >= 1")
    composite_k = composite.expand(k, -1, -1, -1)
    mask_k = mask.expand(k, -1, -1, -1)
    if source == "posterior":
        code = encode(model, composite, mask)
        code = GaussianCode(code.mu.expand(k, -1), code.log_sigma.expand(k, -1))
    elif source == "prior":
        zeros = torch.zeros(k, model.latent_dim, dtype=composite.dtype)
        code = GaussianCode(zeros, zeros)
    else:
        raise ContractViolation(f"unknown code source {source!r}")
    # One draw per candidate keeps the first j candidates identical for any k >= j.
    eps = torch.cat([torch.randn(1, model.latent_dim, generator=generator, dtype=composite.dtype)
                     for _ in range(k)])
    z = reparameterize(code, eps=eps)
    maps = generate(model, composite_k, mask_k, z)
    return list(maps.split(1))
