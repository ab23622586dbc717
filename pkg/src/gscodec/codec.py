"""Rate-conditioned feature codec: analysis/synthesis transforms, a two-level
(hyper + main) latent hierarchy, quantization and rate estimation.

Level 0 is the hyper-latent (per-channel factorized prior), level 1 the main
latent (Gaussian conditional predicted from the decoded hyper-latent).
"""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .coder import ideal_bits, quantize_cdf, rc_decode, rc_encode

LAMBDA_MIN = 16.0
LAMBDA_MAX = 1024.0
BOUND = 64
SIGMA_MIN = 0.11
P_MIN = 2.0 ** -16


def check_lambda(lam):
    if not LAMBDA_MIN <= lam <= LAMBDA_MAX:
        raise ValueError(f"lambda {lam} outside [{LAMBDA_MIN:g}, {LAMBDA_MAX:g}]")
    return float(lam)


def round_half_away(x):
    return torch.sign(x) * torch.floor(x.abs() + 0.5)


def quantize(z, mode, bound=BOUND, generator=None):
    """``round``: inference symbols; ``noise``: additive U(-1/2, 1/2);
    ``ste``: rounded forward, identity backward."""
    if mode == "round":
        return round_half_away(z).clamp(-bound, bound)
    if mode == "noise":
        noise = torch.rand(z.shape, dtype=z.dtype, generator=generator) - 0.5
        return z + noise
    if mode == "ste":
        return z + (round_half_away(z).clamp(-bound, bound) - z).detach()
    raise ValueError(f"unknown quantization mode {mode!r}")


class _LowerBound(torch.autograd.Function):
    """``max(x, bound)`` whose gradient still flows where it would raise ``x``."""

    @staticmethod
    def forward(ctx, x, bound):
        ctx.save_for_backward(x)
        ctx.bound = bound
        return x.clamp(min=bound)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        keep = (x >= ctx.bound) | (grad < 0)
        return grad * keep.to(grad.dtype), None


def lower_bound(x, bound):
    return _LowerBound.apply(x, bound)


def gaussian_likelihood(z, mean, scale):
    """Probability mass of the unit-width bin around ``z``; floored at ``P_MIN``.

    Differences of upper tails are used on the positive side so the mass stays
    accurate far from the mean.
    """
    scale = lower_bound(scale, SIGMA_MIN)
    norm = math.sqrt(0.5)
    d = torch.abs(z - mean)  # the discretized Gaussian is symmetric about its mean
    upper = torch.special.erfc((d - 0.5) / scale * norm) * 0.5
    lower = torch.special.erfc((d + 0.5) / scale * norm) * 0.5
    return lower_bound(upper - lower, P_MIN)


def bits(likelihood):
    return -torch.log2(likelihood).sum()


@dataclass
class SymbolDistribution:
    """Per-position discretized Gaussian parameters (numpy, float32 as computed)."""

    mean: np.ndarray
    scale: np.ndarray

    def tables(self, bound=BOUND):
        return quantize_cdf(self.mean.reshape(-1), self.scale.reshape(-1), bound)


@dataclass
class LatentStack:
    hyper: torch.Tensor  # (B, C_h, H/16, W/16)
    main: torch.Tensor  # (B, C_z, H/4, W/4)


class RateEmbedding(nn.Module):
    """``e_lambda``: features non-decreasing in log2(lambda)."""

    def __init__(self, dim=16):
        super().__init__()
        self.weight = nn.Parameter(torch.linspace(-1.0, 2.0, dim))
        self.bias = nn.Parameter(torch.linspace(-3.0, 1.0, dim))

    def forward(self, lam):
        t = (math.log2(lam) - math.log2(LAMBDA_MIN)) / (math.log2(LAMBDA_MAX) - math.log2(LAMBDA_MIN))
        return torch.sigmoid(F.softplus(self.weight) * 4.0 * t + self.bias)


class MonotoneGain(nn.Module):
    """Per-channel positive gain, monotone in the rate embedding."""

    def __init__(self, dim, channels):
        super().__init__()
        self.weight = nn.Parameter(torch.full((channels, dim), -1.0))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, e):
        return torch.exp(F.softplus(self.weight) @ e + self.bias)


def _conv(cin, cout, k, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _deconv(cin, cout, k=5):
    return nn.ConvTranspose2d(cin, cout, k, stride=2, padding=k // 2, output_padding=1)


def _act():
    return nn.LeakyReLU(0.1)


class FeatureCodec(nn.Module):
    def __init__(self, c_f=32, c_z=64, c_h=32, embed_dim=16, bound=BOUND):
        super().__init__()
        self.bound = bound
        self.c_z, self.c_h = c_z, c_h
        self.embed = RateEmbedding(embed_dim)
        self.gain = MonotoneGain(embed_dim, c_z)
        self.g_a = nn.Sequential(_conv(c_f, c_z, 5, 2), _act(), _conv(c_z, c_z, 5, 2), _act(), _conv(c_z, c_z, 3))
        self.g_s = nn.Sequential(_deconv(c_z, c_z), _act(), _deconv(c_z, c_f), _act(), _conv(c_f, c_f, 3))
        # linear block-transform shortcuts alongside the nonlinear paths
        self.g_a_skip = nn.Conv2d(c_f, c_z, 4, stride=4)
        self.g_s_skip = nn.ConvTranspose2d(c_z, c_f, 4, stride=4)
        self.h_a = nn.Sequential(_conv(c_z, c_h, 3, 2), _act(), _conv(c_h, c_h, 3, 2))
        self.h_s_in = nn.Sequential(_deconv(c_h, c_z, 3), _act())
        self.h_s_film = nn.Linear(embed_dim, c_z)
        self.h_s_out = nn.Sequential(_deconv(c_z, c_z, 3), _act(), _conv(c_z, 2 * c_z, 3))
        self.prior = nn.Linear(embed_dim, 2 * c_h)
        self.calibrate_gain()

    @torch.no_grad()
    def calibrate_gain(self, low=1.0, high=8.0):
        """Start every channel at gain ``low`` for the smallest lambda and ``high`` for the largest."""
        e_lo, e_hi = self.embed(LAMBDA_MIN), self.embed(LAMBDA_MAX)
        slope = math.log(high / low) / float((e_hi - e_lo).sum())
        self.gain.weight.fill_(math.log(math.expm1(slope)))
        self.gain.bias.fill_(math.log(low) - slope * float(e_lo.sum()))

    @torch.no_grad()
    def shrink_synthesis(self, factor=0.1):
        """Scale down the synthesis output layers so a fresh codec starts near its bias."""
        self.g_s[-1].weight *= factor
        self.g_s_skip.weight *= factor

    @torch.no_grad()
    def center_on(self, features):
        """Data-dependent start: the transforms see features with their
        per-channel mean removed, and the synthesis adds it back."""
        mean = features.mean(dim=(0, 2, 3))
        for layer in (self.g_a[0], self.g_a_skip):
            layer.bias -= torch.einsum("oikl,i->o", layer.weight, mean)
        self.g_s_skip.bias += mean

    # -- transforms ------------------------------------------------------
    def analysis(self, feature, e, gain=True):
        """Unquantized latents; ``gain=False`` drops the rate-conditioned gain."""
        main = self.g_a(feature) + self.g_a_skip(feature)
        if gain:
            main = main * self.gain(e)[None, :, None, None]
        return LatentStack(self.h_a(main), main)

    def synthesis(self, main_hat, e):
        y = main_hat / self.gain(e)[None, :, None, None]
        return self.g_s(y) + self.g_s_skip(y)

    def hyper_prior(self, e):
        """Per-channel (mean, scale) for the hyper-latent."""
        mean, raw = self.prior(e).chunk(2)
        return mean, lower_bound(F.softplus(raw + 1.0), SIGMA_MIN)

    def entropy_parameters(self, hyper_hat, e):
        """(mean, scale) of the main latent from the decoded hyper-latent."""
        h = self.h_s_in(hyper_hat) + self.h_s_film(e)[None, :, None, None]
        mean, raw = self.h_s_out(h).chunk(2, dim=1)
        return mean, lower_bound(F.softplus(raw), SIGMA_MIN)

    # -- training path ---------------------------------------------------
    def forward(self, feature, lam, generator=None, relax=False):
        """Returns ``(reconstruction, rate_bits, latents)``.

        Rate uses the additive-noise relaxation; the reconstruction uses
        straight-through rounding, or noise too when ``relax`` is set.
        """
        e = self.embed(lam)
        z = self.analysis(feature, e)
        hyper_noisy = quantize(z.hyper, "noise", generator=generator)
        hyper_hat = hyper_noisy if relax else quantize(z.hyper, "ste")
        pm, ps = self.hyper_prior(e)
        rate = bits(gaussian_likelihood(hyper_noisy, pm[None, :, None, None], ps[None, :, None, None]))
        mean, scale = self.entropy_parameters(hyper_hat, e)
        main_noisy = quantize(z.main, "noise", generator=generator)
        rate = rate + bits(gaussian_likelihood(main_noisy, mean, scale))
        main_hat = main_noisy if relax else quantize(z.main, "ste")
        return self.synthesis(main_hat, e), rate, z

    # -- inference path --------------------------------------------------
    @torch.no_grad()
    def hyper_distribution(self, e, shape):
        mean, scale = self.hyper_prior(e)
        c, h, w = shape
        return SymbolDistribution(mean[:, None, None].expand(c, h, w).float().numpy(),
                                  scale[:, None, None].expand(c, h, w).float().numpy())

    @torch.no_grad()
    def main_distribution(self, hyper_hat, e):
        mean, scale = self.entropy_parameters(hyper_hat, e)
        return SymbolDistribution(mean[0].float().numpy(), scale[0].float().numpy())

    @torch.no_grad()
    def encode(self, feature, lam):
        """One view ``(1, C, H, W)`` -> ``(symbols, distributions)``, hyper level first.

        Symbols are signed integers in ``[-bound, bound]``.
        """
        e = self.embed(lam)
        z = self.analysis(feature, e)
        hyper_hat = quantize(z.hyper, "round", self.bound)
        main_hat = quantize(z.main, "round", self.bound)
        dists = [self.hyper_distribution(e, hyper_hat.shape[1:]), self.main_distribution(hyper_hat, e)]
        return [hyper_hat, main_hat], dists

    def compress(self, feature, lam):
        """Range-coded ``[hyper_bytes, main_bytes]`` plus inference-mode bit estimates."""
        symbols, dists = self.encode(feature, lam)
        streams, est = [], []
        for sym, dist in zip(symbols, dists):
            tables = dist.tables(self.bound)
            idx = sym.reshape(-1).numpy().astype(np.int64) + self.bound
            streams.append(rc_encode(idx, tables))
            est.append(ideal_bits(idx, tables))
        return streams, est

    @torch.no_grad()
    def decode_levels(self, streams, lam, latent_shape, dtype=torch.float32):
        """Per-level streams -> ``(symbols, distributions)``, hyper level first."""
        e = self.embed(lam)
        h, w = latent_shape
        hshape = (self.c_h, -(-h // 4), -(-w // 4))
        hdist = self.hyper_distribution(e, hshape)
        hyper = self._decode_level(streams[0], hdist, hshape, dtype)
        mdist = self.main_distribution(hyper, e)
        main = self._decode_level(streams[1], mdist, (self.c_z, h, w), dtype)
        return [hyper, main], [hdist, mdist]

    @torch.no_grad()
    def decompress(self, streams, lam, latent_shape, dtype=torch.float32):
        """Rebuild ``F_hat`` from the per-level streams; ``latent_shape`` is (h, w) of the main latent."""
        levels, _ = self.decode_levels(streams, lam, latent_shape, dtype)
        return self.synthesis(levels[1], self.embed(lam)), levels

    def _decode_level(self, data, dist, shape, dtype):
        tables = dist.tables(self.bound)
        idx = rc_decode(data, tables, int(np.prod(shape)))
        return torch.from_numpy((idx - self.bound).reshape(1, *shape)).to(dtype)


def estimate_rate(symbols, distributions, bound=BOUND):
    """Ideal code length in bits of integer ``symbols`` under the quantized tables."""
    total = 0.0
    for sym, dist in zip(symbols, distributions):
        idx = np.asarray(sym).reshape(-1).astype(np.int64) + bound
        total += ideal_bits(idx, dist.tables(bound))
    return total
