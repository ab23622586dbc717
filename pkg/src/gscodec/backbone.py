"""Plane-sweep multi-view encoder, Gaussian-generation feature head, and the
residual depth-guided refiners used on both sides of the codec."""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .geometry import aligned_feature, depth_candidates, normalize_inverse_depth, warp_to_reference
from .tensors import cat_channels, resize, zero_module


def conv(cin, cout, k=3, stride=1):
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def lrelu():
    return nn.LeakyReLU(0.1)


@dataclass
class EncoderOutputs:
    features: torch.Tensor  # (N, C_mv, H/2, W/2)
    depth: torch.Tensor  # (N, H, W) metric
    probs: torch.Tensor  # (N, D, H, W), sums to one over D
    candidates: torch.Tensor  # (N, D)


def inverse_depth_channel(depth, cameras):
    """Depth ``(N, H, W)`` mapped into [0, 1] per view, shaped ``(N, 1, H, W)``."""
    near = depth.new_tensor([c.near for c in cameras])[:, None, None]
    far = depth.new_tensor([c.far for c in cameras])[:, None, None]
    return normalize_inverse_depth(depth, near, far)[:, None]


class MultiViewEncoder(nn.Module):
    def __init__(self, c_mv=32, d_cand=32):
        super().__init__()
        self.d_cand = d_cand
        self.features = nn.Sequential(conv(3, c_mv, 3, 2), lrelu(), conv(c_mv, c_mv), lrelu(), conv(c_mv, c_mv))
        self.cost = nn.Sequential(conv(d_cand, d_cand), lrelu(), conv(d_cand, d_cand))
        self.mono = nn.Sequential(conv(c_mv, c_mv), lrelu(), conv(c_mv, d_cand))
        self.log_temperature = nn.Parameter(torch.tensor(math.log(10.0)))

    def reset_cost(self):
        zero_module(self.cost[-1])

    def correlation(self, feats, cameras, candidates):
        """Cosine matching scores ``(N, D, h, w)`` averaged over valid source views."""
        n, _, h, w = feats.shape
        # normalize after warping: interpolation shortens vectors at fractional
        # offsets, which would otherwise favour whole-pixel disparities
        unit = F.normalize(feats, dim=1)
        half = [c.scaled(0.5) for c in cameras]
        scores = []
        for r in range(n):
            planes = candidates[r][:, None, None].expand(-1, h, w)
            acc = feats.new_zeros(self.d_cand, h, w)
            cnt = feats.new_zeros(self.d_cand, h, w)
            for s in range(n):
                if s == r:
                    continue
                warped, valid = warp_to_reference(feats[s], planes, half[r], half[s])
                acc = acc + (F.normalize(warped, dim=1) * unit[r][None]).sum(1)
                cnt = cnt + valid.to(acc.dtype)
            scores.append(acc / cnt.clamp(min=1.0))
        return torch.stack(scores)

    def forward(self, images, cameras):
        if images.shape[0] == 0:
            raise ValueError("need at least one context view")
        n, _, height, width = images.shape
        feats = self.features(images)
        candidates = torch.stack([depth_candidates(c.near, c.far, self.d_cand, images.dtype) for c in cameras])
        if n == 1:
            logits = self.mono(feats)
        else:
            corr = self.correlation(feats, cameras, candidates)
            logits = self.log_temperature.exp() * corr + self.cost(corr)
        probs = resize(torch.softmax(logits, dim=1), (height, width))
        depth = (probs * candidates[:, :, None, None]).sum(1)
        return EncoderOutputs(feats, depth, probs, candidates)


class FeatureHead(nn.Module):
    """Images, upsampled matching features and depth probabilities -> per-pixel feature."""

    def __init__(self, c_mv=32, d_cand=32, c_f=32):
        super().__init__()
        self.net = nn.Sequential(conv(3 + c_mv + d_cand, c_f), lrelu(), conv(c_f, c_f), lrelu(), conv(c_f, c_f))

    def forward(self, images, features, probs):
        size = images.shape[-2:]
        return self.net(cat_channels([images, resize(features, size), probs]))


class Refiner(nn.Module):
    """``F + R(F, A(F, D), 1/D)``: residual update from geometry-aligned neighbours."""

    def __init__(self, c_f=32, hidden=32):
        super().__init__()
        self.net = nn.Sequential(conv(2 * c_f + 1, hidden), lrelu(), conv(hidden, c_f))

    def reset_output(self):
        zero_module(self.net[-1])

    def forward(self, feature, depth, cameras):
        aligned, _ = aligned_feature(feature, depth, cameras)
        return feature + self.net(cat_channels([feature, aligned, inverse_depth_channel(depth, cameras)]))
