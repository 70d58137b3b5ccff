# -*- coding: utf-8 -*-
"""noise schedule, forward noising, the noise prediction loss, deterministic
DDIM sampling and the reference latent encoder/decoder pair."""
import logging
import math

import torch
import torch.nn.functional as F

from dagen.base.errors import DiffusionError

log = logging.getLogger(__name__)

COSINE_MAX_BETA = 0.999


class NoiseSchedule(object):
    """``betas[t - 1]`` is the variance increment of step t in 1..T,
    ``alpha_bar[t]`` the cumulative product with ``alpha_bar[0] == 1``.
    Both are 64 bit."""

    def __init__(self, betas, kind="custom"):
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise DiffusionError("a noise schedule needs at least one step")
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise DiffusionError("betas must lie in (0, 1)")
        self.betas = betas
        self.kind = kind
        self.alpha_bar = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1 - betas, dim=0)])
        if not bool((self.alpha_bar[1:] < self.alpha_bar[:-1]).all()):
            raise DiffusionError("alpha_bar must be strictly decreasing")

    @property
    def T(self):
        return self.betas.numel()

    def beta(self, tau):
        return float(self.betas[tau - 1])

    def as_dict(self):
        return {"kind": self.kind, "betas": self.betas.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["betas"], d.get("kind", "custom"))

    def __eq__(self, other):
        return isinstance(other, NoiseSchedule) and torch.equal(self.betas, other.betas)

    def __repr__(self):
        return "<NoiseSchedule %s T=%s>" % (self.kind, self.T)


def make_schedule(T, beta_start, beta_end, shape="linear"):
    """linear betas from beta_start to beta_end, or the cosine alpha_bar curve
    with betas clipped at COSINE_MAX_BETA (the beta range is then unused)"""
    if T < 1:
        raise DiffusionError("T must be at least 1")
    if not 0 < beta_start <= beta_end < 1:
        raise DiffusionError("betas must satisfy 0 < beta_start <= beta_end < 1, got %s, %s" % (beta_start, beta_end))
    if shape == "linear":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    elif shape == "cosine":
        s = 0.008
        t = torch.arange(T + 1, dtype=torch.float64) / T
        f = torch.cos((t + s) / (1 + s) * math.pi / 2) ** 2
        betas = (1 - f[1:] / f[:-1]).clamp(max=COSINE_MAX_BETA)
    else:
        raise DiffusionError("unknown schedule shape %r" % shape)
    return NoiseSchedule(betas, shape)


def schedule_from_config(config):
    return make_schedule(config.dm.timesteps, config.dm.beta_start, config.dm.beta_end, config.dm.schedule)


def _per_sample(values, tau, like):
    tau = torch.as_tensor(tau, dtype=torch.long)
    coeff = values[tau.cpu()].to(dtype=like.dtype, device=like.device)
    if coeff.dim() == 0:
        return coeff
    return coeff.view(-1, *([1] * (like.dim() - 1)))


def q_sample(z0, tau, eps, schedule):
    """z_tau = sqrt(alpha_bar) z0 + sqrt(1 - alpha_bar) eps; tau is an int or one per sample"""
    if eps.shape != z0.shape:
        raise DiffusionError("noise of shape %s for a latent of shape %s" % (tuple(eps.shape), tuple(z0.shape)))
    taus = torch.as_tensor(tau)
    if bool((taus < 1).any()) or bool((taus > schedule.T).any()):
        raise DiffusionError("tau must lie in [1, %s]" % schedule.T)
    ab = _per_sample(schedule.alpha_bar, tau, z0)
    return torch.sqrt(ab) * z0 + torch.sqrt(1 - ab) * eps


def controlled_eps(denoiser, z_tau, tau, prompt_emb, c_f=None):
    """evaluate eps_{phi,theta}; any callable with the denoiser signature works"""
    if c_f is None:
        eps = denoiser(z_tau, tau, prompt_emb)
    else:
        eps = denoiser(z_tau, tau, prompt_emb, c_f)
    if eps.shape != z_tau.shape:
        raise DiffusionError("noise prediction of shape %s for a latent of shape %s" % (tuple(eps.shape), tuple(z_tau.shape)))
    return eps


def training_loss(denoiser, z0, prompt_emb, c_f, generator, schedule):
    """mean squared error between the drawn noise and its prediction at a
    uniformly drawn tau in 1..T"""
    B = z0.shape[0]
    tau = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype).to(z0.device)
    z_tau = q_sample(z0, tau, eps, schedule)
    pred = controlled_eps(denoiser, z_tau, tau.to(z0.device), prompt_emb, c_f)
    loss = F.mse_loss(pred, eps)
    if not bool(torch.isfinite(loss)):
        raise DiffusionError("non-finite diffusion loss (tau=%s, max |pred|=%s, max |z0|=%s)"
                             % (tau.tolist(), float(pred.detach().abs().max()), float(z0.abs().max())))
    return loss


def ddim_step(z_tau, eps_pred, tau, tau_prev, schedule):
    """one deterministic (eta = 0) DDIM update from tau to tau_prev"""
    tau, tau_prev = int(tau), int(tau_prev)
    if tau_prev > tau:
        raise DiffusionError("DDIM steps go backwards in time, got %s -> %s" % (tau, tau_prev))
    if tau_prev == tau:
        return z_tau.clone()
    ab = float(schedule.alpha_bar[tau])
    ab_prev = float(schedule.alpha_bar[tau_prev])
    if ab == 0:
        raise DiffusionError("alpha_bar at tau=%s is zero" % tau)
    z0_hat = (z_tau - math.sqrt(1 - ab) * eps_pred) / math.sqrt(ab)
    return math.sqrt(ab_prev) * z0_hat + math.sqrt(1 - ab_prev) * eps_pred


def make_ddim_timesteps(T, steps):
    """``steps + 1`` strictly decreasing timesteps from T down to 0"""
    if not 1 <= steps <= T:
        raise DiffusionError("DDIM steps must lie in [1, %s], got %s" % (T, steps))
    return [int(t) for t in torch.linspace(T, 0, steps + 1, dtype=torch.float64).round().long()]


@torch.no_grad()
def ddim_sample(denoiser, zT, prompt_emb, c_f, step_schedule, schedule):
    """iterate ddim_step along step_schedule (T, ..., 0); a pure function of its inputs"""
    if not step_schedule or len(step_schedule) < 2:
        raise DiffusionError("empty DDIM step schedule")
    if any(b >= a for a, b in zip(step_schedule, step_schedule[1:])):
        raise DiffusionError("DDIM step schedule must be strictly decreasing")
    if step_schedule[-1] != 0:
        raise DiffusionError("DDIM step schedule must end at 0")
    if step_schedule[0] > schedule.T:
        raise DiffusionError("DDIM step schedule starts after T=%s" % schedule.T)
    z = zT
    B = zT.shape[0]
    for tau, tau_prev in zip(step_schedule, step_schedule[1:]):
        taus = torch.full((B,), tau, dtype=torch.long, device=zT.device)
        eps = controlled_eps(denoiser, z, taus, prompt_emb, c_f)
        z = ddim_step(z, eps, tau, tau_prev, schedule)
    return z


def haar_matrix(size):
    """orthonormal Haar basis of length ``size`` (a power of two); row 0 is the mean"""
    h = torch.ones(1, 1, dtype=torch.float64)
    while h.shape[0] < size:
        n = h.shape[0]
        top = torch.kron(h, torch.tensor([[1.0, 1.0]], dtype=torch.float64))
        bottom = torch.kron(torch.eye(n, dtype=torch.float64), torch.tensor([[1.0, -1.0]], dtype=torch.float64))
        h = torch.cat([top, bottom]) / math.sqrt(2)
    return h


# luminance first, then two opponent chroma axes
COLOR_BASIS = torch.tensor([
    [1 / math.sqrt(3), 1 / math.sqrt(3), 1 / math.sqrt(3)],
    [1 / math.sqrt(2), -1 / math.sqrt(2), 0.0],
    [1 / math.sqrt(6), 1 / math.sqrt(6), -2 / math.sqrt(6)],
], dtype=torch.float64)


class HaarAutoencoder(object):
    """fixed linear latent pair: an orthonormal color x Haar transform of each
    stride x stride block, truncated to the leading ``latent_channels`` coefficients
    (the three color means first, then luminance detail, then chroma detail).

    decode(encode(x)) is exact on the kept subspace and drops fine chroma and
    diagonal detail otherwise.
    """

    def __init__(self, stride=2, latent_channels=4):
        if stride < 1 or stride & (stride - 1):
            raise DiffusionError("latent stride must be a power of two")
        block = stride * stride
        if not 1 <= latent_channels <= 3 * block:
            raise DiffusionError("latent channels must lie in [1, %s] for stride %s" % (3 * block, stride))
        self.stride = stride
        self.latent_channels = latent_channels
        spatial = torch.kron(haar_matrix(stride), haar_matrix(stride))
        full = torch.kron(COLOR_BASIS, spatial)
        # row c * block + j is color axis c with spatial basis j
        order = [c * block for c in range(3)]
        order += [j for j in range(1, block)]
        order += [c * block + j for c in (1, 2) for j in range(1, block)]
        self.basis = full[order][:latent_channels]
        self.scale = 1.0 / stride

    @property
    def autoencoder_id(self):
        return "haar-%s-%s" % (self.stride, self.latent_channels)

    def encode(self, image):
        single = image.dim() == 3
        x = image.unsqueeze(0) if single else image
        if x.shape[-1] % self.stride or x.shape[-2] % self.stride:
            raise DiffusionError("image size %s is not divisible by the latent stride %s" % (tuple(x.shape[-2:]), self.stride))
        if bool((x < 0).any()) or bool((x > 1).any()):
            log.warning("clamping image values outside [0, 1] before encoding")
            x = x.clamp(0, 1)
        u = F.pixel_unshuffle(x * 2 - 1, self.stride)
        z = torch.einsum("kd,bdhw->bkhw", self.basis.to(x.dtype), u) * self.scale
        return z[0] if single else z

    def decode(self, z):
        single = z.dim() == 3
        z = z.unsqueeze(0) if single else z
        u = torch.einsum("kd,bkhw->bdhw", self.basis.to(z.dtype), z / self.scale)
        x = ((F.pixel_shuffle(u, self.stride) + 1) / 2).clamp(0, 1)
        return x[0] if single else x


def autoencoder_from_config(config):
    return HaarAutoencoder(config.dm.latent_stride, config.dm.latent_channels)
