# -*- coding: utf-8 -*-
"""the toy noise prediction network and its control branch.

Parameter names are stable because checkpoints store them:
``base.encoder.*``, ``base.decoder.*``, ``control.*`` and ``rcf.*``.
"""
import copy
import logging
import math

import torch
import torch.nn.functional as F
from torch import nn

from dagen.app.rcf import RCFConfig, ResidualConditionFusion
from dagen.base.errors import DiffusionError
from dagen.base.gradcheck import max_gradient_error

log = logging.getLogger(__name__)


def timestep_embedding(tau, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = tau.to(torch.float64)[:, None] * freqs[None, :].to(tau.device)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def group_norm(channels):
    return nn.GroupNorm(4 if channels % 4 == 0 else 1, channels)


def zero_module(module):
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):

    def __init__(self, in_channels, out_channels, emb_channels):
        super().__init__()
        self.norm1 = group_norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.emb = nn.Linear(emb_channels, out_channels)
        self.norm2 = group_norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class EncoderTrunk(nn.Module):
    """time and prompt embedding, the two down blocks and the prompt modulated bottleneck.

    Returns the embedding and the skip features ``[s1, s2, mid]``.
    """

    def __init__(self, latent_channels, model_channels, prompt_width):
        super().__init__()
        mc = model_channels
        emb = 4 * mc
        self.model_channels = mc
        self.time_embed = nn.Sequential(nn.Linear(mc, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.prompt_embed = nn.Linear(prompt_width, emb)
        self.conv_in = nn.Conv2d(latent_channels, mc, 3, padding=1)
        self.block1 = ResBlock(mc, mc, emb)
        self.down1 = nn.Conv2d(mc, 2 * mc, 3, stride=2, padding=1)
        self.block2 = ResBlock(2 * mc, 2 * mc, emb)
        self.down2 = nn.Conv2d(2 * mc, 2 * mc, 3, stride=2, padding=1)
        self.mid = ResBlock(2 * mc, 2 * mc, emb)
        self.mid_film = nn.Linear(emb, 4 * mc)

    def embed(self, tau, prompt_emb):
        t = timestep_embedding(tau, self.model_channels).to(prompt_emb.dtype)
        return self.time_embed(t) + self.prompt_embed(prompt_emb)

    def forward(self, z, tau, prompt_emb, hint=None):
        emb = self.embed(tau, prompt_emb)
        h = self.conv_in(z)
        if hint is not None:
            h = h + hint
        s1 = self.block1(h, emb)
        s2 = self.block2(self.down1(s1), emb)
        mid = self.mid(self.down2(s2), emb)
        scale, shift = self.mid_film(F.silu(emb)).chunk(2, dim=1)
        mid = mid * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        return emb, [s1, s2, mid]


class Decoder(nn.Module):

    def __init__(self, latent_channels, model_channels):
        super().__init__()
        mc = model_channels
        emb = 4 * mc
        self.up2 = nn.Conv2d(2 * mc, 2 * mc, 3, padding=1)
        self.block_up2 = ResBlock(4 * mc, 2 * mc, emb)
        self.up1 = nn.Conv2d(2 * mc, mc, 3, padding=1)
        self.block_up1 = ResBlock(2 * mc, mc, emb)
        self.norm_out = group_norm(mc)
        self.conv_out = zero_module(nn.Conv2d(mc, latent_channels, 3, padding=1))

    def forward(self, emb, skips):
        s1, s2, mid = skips
        h = self.up2(F.interpolate(mid, scale_factor=2, mode="nearest"))
        h = self.block_up2(torch.cat([h, s2], dim=1), emb)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.block_up1(torch.cat([h, s1], dim=1), emb)
        return self.conv_out(F.silu(self.norm_out(h)))


class BaseDenoiser(nn.Module):
    """eps_theta(z, tau, prompt_emb)"""

    def __init__(self, latent_channels=4, model_channels=32, prompt_width=64):
        super().__init__()
        self.latent_channels = latent_channels
        self.encoder = EncoderTrunk(latent_channels, model_channels, prompt_width)
        self.decoder = Decoder(latent_channels, model_channels)

    def forward(self, z, tau, prompt_emb):
        emb, skips = self.encoder(z, tau, prompt_emb)
        return self.decoder(emb, skips)


class ControlBranch(nn.Module):
    """a trainable copy of the base encoder fed with c_f; its features reach the
    base decoder through zero initialized 1x1 convolutions"""

    def __init__(self, base_encoder, feature_channels):
        super().__init__()
        mc = base_encoder.model_channels
        self.trunk = copy.deepcopy(base_encoder)
        self.hint = nn.Conv2d(feature_channels, mc, 3, padding=1)
        self.zero_convs = nn.ModuleList([
            zero_module(nn.Conv2d(mc, mc, 1)),
            zero_module(nn.Conv2d(2 * mc, 2 * mc, 1)),
            zero_module(nn.Conv2d(2 * mc, 2 * mc, 1)),
        ])

    def forward(self, z, tau, prompt_emb, c_f):
        _, features = self.trunk(z, tau, prompt_emb, hint=self.hint(c_f))
        return [zc(f) for zc, f in zip(self.zero_convs, features)]


class ControlledDenoiser(nn.Module):
    """eps_{phi,theta}(z, tau, prompt_emb, c_f): base features plus zero projected control features"""

    def __init__(self, base, rcf_cfg):
        super().__init__()
        self.base = base
        self.rcf = ResidualConditionFusion(rcf_cfg)
        self.control = ControlBranch(base.encoder, rcf_cfg.feature_channels)

    @property
    def latent_channels(self):
        return self.base.latent_channels

    def fuse_conditions(self, one_hot, sketch):
        return self.rcf(one_hot, sketch)

    def forward(self, z, tau, prompt_emb, c_f=None):
        emb, skips = self.base.encoder(z, tau, prompt_emb)
        if c_f is not None:
            if c_f.shape[0] != z.shape[0] or c_f.shape[-2:] != z.shape[-2:]:
                raise DiffusionError("c_f of shape %s does not match the latent %s" % (tuple(c_f.shape), tuple(z.shape)))
            residuals = self.control(z, tau, prompt_emb, c_f)
            skips = [s + r for s, r in zip(skips, residuals)]
        return self.base.decoder(emb, skips)

    def parameter_groups(self):
        """(control and fusion, base decoder); the base encoder stays frozen"""
        control = list(self.control.parameters()) + list(self.rcf.parameters())
        return control, list(self.base.decoder.parameters())


def build_base_denoiser(config):
    return BaseDenoiser(latent_channels=config.dm.latent_channels,
                        model_channels=config.dm.model_channels,
                        prompt_width=config.prompt.embedding_width)


def build_controlled_denoiser(config, base=None):
    if base is None:
        base = build_base_denoiser(config)
    return ControlledDenoiser(base, RCFConfig.from_config(config))


class DenoiserFeatureEmbedder(object):
    """frozen base encoder features of clean latents (tau = 0, empty prompt).

    ``layers`` gives the per-layer features for perceptual distances,
    ``vector`` a pooled feature vector for Frechet statistics.
    """

    def __init__(self, base, autoencoder, embedder_id="toy-denoiser-encoder"):
        self.encoder = copy.deepcopy(base.encoder).eval()
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        self.autoencoder = autoencoder
        self.prompt_width = base.encoder.prompt_embed.in_features
        self.embedder_id = embedder_id

    @torch.no_grad()
    def layers(self, images):
        if images.dim() == 3:
            images = images.unsqueeze(0)
        z = self.autoencoder.encode(images)
        tau = torch.zeros(z.shape[0], dtype=torch.long)
        prompt = torch.zeros(z.shape[0], self.prompt_width, dtype=z.dtype)
        _, features = self.encoder(z, tau, prompt)
        return features

    @torch.no_grad()
    def vector(self, images):
        return torch.cat([f.mean(dim=(2, 3)) for f in self.layers(images)], dim=1)


def denoiser_gradcheck(model, z, tau, prompt_emb, c_f=None, epsilon=1e-4, seed=0):
    """max relative error of autograd against central differences on a 64 bit
    copy, w.r.t. the latent, the prompt embedding, c_f and all parameters"""
    twin = copy.deepcopy(model).double()
    z = z.detach().double().clone().requires_grad_(True)
    prompt_emb = prompt_emb.detach().double().clone().requires_grad_(True)
    tensors = [z, prompt_emb]
    if c_f is not None:
        c_f = c_f.detach().double().clone().requires_grad_(True)
        tensors.append(c_f)
    extra = (c_f,) if c_f is not None else ()
    with torch.no_grad():
        shape = twin(z, tau, prompt_emb, *extra).shape
    weights = torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)

    def functional():
        return (twin(z, tau, prompt_emb, *extra) * weights).sum()

    for p in twin.parameters():
        p.requires_grad_(True)
    return max_gradient_error(functional, tensors + list(twin.parameters()), epsilon, error=DiffusionError)
