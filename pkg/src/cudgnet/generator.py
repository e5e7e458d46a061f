"""Domain augmentation generator: variational feature perturbation + learnable mixup."""
from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .style_ops import DEFAULT_BETA_CONCENTRATION, batch_efdmix

SIGMA_FLOOR = 1e-6
BETA_FLOOR = 1e-3


class PerturbationParams(NamedTuple):
    mu: torch.Tensor
    sigma: torch.Tensor


class MixupParams(NamedTuple):
    a: torch.Tensor
    b: torch.Tensor
    tau: torch.Tensor


class PerturbationNet(nn.Module):
    """Two parallel convolutions predicting the mean and scale of a Gaussian feature perturbation."""

    def __init__(self, channels: int, kernel_size: int = 3, sigma_cap: float | None = 5.0, zero_init: bool = False):
        super().__init__()
        self.channels = channels
        self.sigma_cap = sigma_cap
        pad = kernel_size // 2
        self.mu_conv = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        self.sigma_conv = nn.Conv2d(channels, channels, kernel_size, padding=pad)
        if zero_init:
            for conv in (self.mu_conv, self.sigma_conv):
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)

    def forward(self, h: torch.Tensor) -> PerturbationParams:
        if h.dim() != 4 or h.shape[1] != self.channels:
            raise ValueError(f"expected features with {self.channels} channels, got shape {tuple(h.shape)}")
        mu = self.mu_conv(h)
        sigma = F.softplus(self.sigma_conv(h)) + SIGMA_FLOOR
        if self.sigma_cap is not None:
            sigma = sigma.clamp(max=self.sigma_cap)
        return PerturbationParams(mu, sigma)


class MixupHead(nn.Module):
    """Pools (mu, sigma), then one linear layer predicts Beta(a, b) and the label-smoothing lottery."""

    def __init__(self, channels: int):
        super().__init__()
        self.fc = nn.Linear(2 * channels, 3)

    def forward(self, params: PerturbationParams) -> MixupParams:
        pooled = torch.cat([params.mu.mean(dim=(2, 3)), params.sigma.mean(dim=(2, 3))], dim=1)
        out = self.fc(pooled)
        a = F.softplus(out[:, 0]) + BETA_FLOOR
        b = F.softplus(out[:, 1]) + BETA_FLOOR
        return MixupParams(a, b, torch.sigmoid(out[:, 2]))


def perturb(h, params: PerturbationParams, *, h_style=None, eps=None, c: float = DEFAULT_BETA_CONCENTRATION):
    """``h_plus = EFDMix(h, r) + e`` with ``e = mu + sigma * eps`` and ``eps ~ N(0, I)``.

    Pass ``h_style`` to reuse an existing EFDMix output (or ``h`` itself to skip
    style mixing).
    """
    if h_style is None:
        h_style = batch_efdmix(h, c)
    if eps is None:
        eps = torch.randn_like(params.mu)
    return h_style + params.mu + params.sigma * eps


def smooth_labels(y: torch.Tensor, smoothing: float) -> torch.Tensor:
    return (1.0 - smoothing) * y + smoothing / y.shape[-1]


def check_label_distribution(y: torch.Tensor, atol: float = 1e-4) -> None:
    if y.dim() != 2:
        raise ValueError(f"labels must be a (batch, classes) distribution, got shape {tuple(y.shape)}")
    if (y < -atol).any() or not torch.allclose(y.sum(dim=1), torch.ones_like(y[:, 0]), atol=atol):
        raise ValueError("labels are not probability distributions (negative entries or rows not summing to 1)")


def learnable_mixup(h_style, h_plus, y, mix: MixupParams, *, smoothing: float = 0.1, lam=None, fire=None):
    """Interpolate between the styled source feature and its perturbed version.

    Returns ``(h_mixed, y_plus, lam)``. ``lam ~ Beta(a, b)`` per sample, drawn with
    the reparameterised sampler so gradients reach ``(a, b)``. The smoothed label
    replaces ``y`` for samples whose lottery fires (Bernoulli(tau)); a
    straight-through estimator lets the lottery probability receive gradient.
    """
    check_label_distribution(y)
    n = h_plus.shape[0]
    if lam is None:
        lam = torch.distributions.Beta(mix.a, mix.b).rsample()
    lam = torch.as_tensor(lam, dtype=h_plus.dtype, device=h_plus.device).expand(n).clamp(0.0, 1.0)
    if fire is None:
        hard = torch.bernoulli(mix.tau.detach())
        fire = hard + mix.tau - mix.tau.detach()
    fire = torch.as_tensor(fire, dtype=y.dtype, device=y.device).expand(n)

    lam_f = lam.view(n, *([1] * (h_plus.dim() - 1)))
    h_mixed = lam_f * h_style + (1.0 - lam_f) * h_plus

    y_tilde = fire[:, None] * smooth_labels(y, smoothing) + (1.0 - fire[:, None]) * y
    lam_y = lam.to(y.dtype)[:, None]
    y_plus = lam_y * y + (1.0 - lam_y) * y_tilde
    return h_mixed, y_plus, lam


class DomainGenerator(nn.Module):
    """Generator G: style mixing, Gaussian perturbation and uncertainty-conditioned mixup.

    ``use_style`` and ``use_mixup`` switch the corresponding stages off, which
    the ablation ladder and the sampling baseline rely on.
    """

    def __init__(self, channels: int, *, c: float = DEFAULT_BETA_CONCENTRATION, smoothing: float = 0.1,
                 sigma_cap: float | None = 5.0, use_style: bool = True, use_mixup: bool = True,
                 zero_init: bool = False):
        super().__init__()
        self.perturbation = PerturbationNet(channels, sigma_cap=sigma_cap, zero_init=zero_init)
        self.mixup_head = MixupHead(channels)
        self.c = c
        self.smoothing = smoothing
        self.use_style = use_style
        self.use_mixup = use_mixup

    def forward(self, h, y=None, *, perm=None, d=None, eps=None, lam=None, fire=None, use_style=None, use_mixup=None):
        use_style = self.use_style if use_style is None else use_style
        use_mixup = self.use_mixup if use_mixup is None else use_mixup
        params = self.perturbation(h)
        h_style = batch_efdmix(h, self.c, perm=perm, d=d) if use_style else h
        h_plus = perturb(h, params, h_style=h_style, eps=eps)
        out = {"params": params, "h_style": h_style, "h_plus": h_plus, "lam": None, "mix": None}
        if use_mixup:
            mix = self.mixup_head(params)
            # a placeholder one-class label keeps the feature path usable without targets
            y_in = y if y is not None else torch.ones((h.shape[0], 1), dtype=h.dtype, device=h.device)
            h_mixed, y_plus, lam_s = learnable_mixup(h_style, h_plus, y_in, mix, smoothing=self.smoothing,
                                                     lam=lam, fire=fire)
            out.update(h_mixed=h_mixed, y_plus=y_plus if y is not None else None, lam=lam_s, mix=mix)
        else:
            out.update(h_mixed=h_plus, y_plus=y)
        return out
