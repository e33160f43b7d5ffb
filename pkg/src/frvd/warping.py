"""Keypoint-driven dense warping of source feature maps.

Sparse keypoint displacements become K+1 candidate backward flows (candidate
0 is the identity), a small CNN predicts per-pixel combination masks plus an
occlusion map from heatmap evidence, and the combined grid drives bilinear
resampling of the source features:

    warped = occlusion * sample(F_s, sum_k mask_k * candidate_k)

Normalized coordinates put pixel centers at -1 and +1 for the first and last
pixel of each axis (grid[..., 0] is x/width, grid[..., 1] is y/height).
Samples falling outside the image use zero padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .errors import ShapeMismatchError
from .motion_repr import project_2d


@dataclass(frozen=True)
class FlowField:
    """Dense backward-sampling grid plus occlusion confidence in [0, 1]."""

    grid: Tensor       # (H, W, 2) normalized source coordinates
    occlusion: Tensor  # (H, W) in [0, 1]


def normalized_grid(h: int, w: int, dtype=torch.float32, device=None) -> Tensor:
    """(H, W, 2) identity grid over pixel centers; [..., 0]=x, [..., 1]=y."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype, device=device)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype, device=device)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy], dim=-1)


def gaussian_heatmap(kp2d: Tensor, h: int, w: int, sigma: float) -> Tensor:
    """exp(-|p - kp|^2 / (2 sigma^2)) over the normalized pixel-center grid."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    kp2d = torch.as_tensor(kp2d)
    grid = normalized_grid(h, w, dtype=kp2d.dtype if kp2d.is_floating_point() else torch.float32,
                           device=kp2d.device)
    d2 = ((grid - kp2d.reshape(2)) ** 2).sum(-1)
    return torch.exp(-d2 / (2.0 * sigma * sigma))


def heatmaps_for_keypoints(kp2d: Tensor, h: int, w: int, sigma: float) -> Tensor:
    """Batched heatmaps: kp2d (..., K, 2) -> (..., K, H, W)."""
    grid = normalized_grid(h, w, dtype=kp2d.dtype, device=kp2d.device)
    d2 = ((grid - kp2d[..., None, None, :]) ** 2).sum(-1)
    return torch.exp(-d2 / (2.0 * sigma * sigma))


def candidate_flows(x_s: Tensor, x_d: Tensor, h: int, w: int) -> Tensor:
    """(K+1, H, W, 2) candidates: identity, then identity + (P(x_s)_k - P(x_d)_k)."""
    if x_s.shape != x_d.shape:
        raise ShapeMismatchError(f"keypoint sets differ: {tuple(x_s.shape)} vs {tuple(x_d.shape)}")
    disp = project_2d(x_s) - project_2d(x_d)          # (K, 2)
    identity = normalized_grid(h, w, dtype=disp.dtype, device=disp.device)
    cands = identity.expand(disp.shape[0] + 1, h, w, 2).clone()
    cands[1:] += disp[:, None, None, :]
    return cands


class DenseMotionNet(nn.Module):
    """Small CNN: 2K heatmap channels -> K+1 mask logits + 1 occlusion logit.

    The final conv is zero-initialized, so an untrained net yields uniform
    masks and occlusion 0.5 everywhere.
    """

    def __init__(self, num_kp: int, hidden: int = 32):
        super().__init__()
        self.num_kp = num_kp
        self.net = nn.Sequential(
            nn.Conv2d(2 * num_kp, hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.SiLU(),
        )
        self.out = nn.Conv2d(hidden, num_kp + 2, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(self.net(x))


def predict_masks(heatmap_diffs: Tensor, net: DenseMotionNet) -> tuple[Tensor, Tensor]:
    """Per-pixel softmax masks over K+1 candidates and a logistic occlusion map."""
    if heatmap_diffs.ndim != 3 or heatmap_diffs.shape[0] != 2 * net.num_kp:
        raise ShapeMismatchError(
            f"expected ({2 * net.num_kp}, H, W) heatmap channels, got {tuple(heatmap_diffs.shape)}")
    logits = net(heatmap_diffs.unsqueeze(0)).squeeze(0)
    masks = torch.softmax(logits[: net.num_kp + 1], dim=0)
    occlusion = torch.sigmoid(logits[net.num_kp + 1])
    return masks, occlusion


def combine_flows(candidates: Tensor, masks: Tensor, occlusion: Tensor) -> FlowField:
    """Convex per-pixel combination of candidate grids."""
    if candidates.shape[:3] != masks.shape or candidates.shape[-1] != 2:
        raise ShapeMismatchError(
            f"candidates {tuple(candidates.shape)} vs masks {tuple(masks.shape)}")
    if occlusion.shape != masks.shape[1:]:
        raise ShapeMismatchError(
            f"occlusion {tuple(occlusion.shape)} vs grid {tuple(masks.shape[1:])}")
    grid = (masks[..., None] * candidates).sum(dim=0)
    return FlowField(grid=grid, occlusion=occlusion)


def bilinear_sample(feature: Tensor, grid: Tensor) -> Tensor:
    """Sample (C, H, W) features at normalized grid locations with zero padding."""
    if feature.ndim != 3 or grid.ndim != 3 or grid.shape[-1] != 2:
        raise ShapeMismatchError(
            f"feature {tuple(feature.shape)} with grid {tuple(grid.shape)}")
    return batched_bilinear_sample(feature.unsqueeze(0), grid.unsqueeze(0)).squeeze(0)


def batched_bilinear_sample(feature: Tensor, grid: Tensor) -> Tensor:
    """(B, C, H, W) sampled at (B, H', W', 2); out-of-range taps contribute zero."""
    b, c, h, w = feature.shape
    gx = (grid[..., 0] + 1.0) * (w - 1) / 2.0      # unnormalized column
    gy = (grid[..., 1] + 1.0) * (h - 1) / 2.0      # unnormalized row
    x0 = torch.floor(gx)
    y0 = torch.floor(gy)
    wx = gx - x0
    wy = gy - y0

    out = torch.zeros(b, c, *grid.shape[1:3], dtype=feature.dtype, device=feature.device)
    flat = feature.reshape(b, c, h * w)
    for dx, dy, wgt in ((0, 0, (1 - wx) * (1 - wy)), (1, 0, wx * (1 - wy)),
                        (0, 1, (1 - wx) * wy), (1, 1, wx * wy)):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi <= w - 1) & (yi >= 0) & (yi <= h - 1)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).long()
        tap = torch.gather(flat, 2, idx.reshape(b, 1, -1).expand(b, c, -1))
        tap = tap.reshape(b, c, *grid.shape[1:3])
        out = out + tap * (wgt * valid.to(feature.dtype)).unsqueeze(1)
    return out


def warp_features(x_s: Tensor, x_d: Tensor, feat: Tensor, net: DenseMotionNet,
                  sigma: float) -> Tensor:
    """Full warp f_w: keypoints + source features -> occlusion-weighted warped features."""
    h, w = feat.shape[-2:]
    flow = compute_flow(x_s, x_d, net, h, w, sigma)
    warped = bilinear_sample(feat, flow.grid)
    return warped * flow.occlusion


def compute_flow(x_s: Tensor, x_d: Tensor, net: DenseMotionNet, h: int, w: int,
                 sigma: float) -> FlowField:
    """Heatmaps -> masks -> combined dense flow for one keypoint pair."""
    heat_s = heatmaps_for_keypoints(project_2d(x_s), h, w, sigma)
    heat_d = heatmaps_for_keypoints(project_2d(x_d), h, w, sigma)
    evidence = torch.cat([heat_d - heat_s, heat_s], dim=0)
    masks, occlusion = predict_masks(evidence, net)
    cands = candidate_flows(x_s, x_d, h, w)
    return combine_flows(cands, masks, occlusion)


def warp_features_batch(x_s: Tensor, x_d: Tensor, feat: Tensor,
                        net: DenseMotionNet, sigma: float) -> Tensor:
    """Batched warp: keypoints (B, K, 3), features (B, C, H, W)."""
    b, _, h, w = feat.shape
    k = x_s.shape[1]
    heat_s = heatmaps_for_keypoints(project_2d(x_s), h, w, sigma)
    heat_d = heatmaps_for_keypoints(project_2d(x_d), h, w, sigma)
    logits = net(torch.cat([heat_d - heat_s, heat_s], dim=1))
    masks = torch.softmax(logits[:, : k + 1], dim=1)
    occlusion = torch.sigmoid(logits[:, k + 1])

    disp = project_2d(x_s) - project_2d(x_d)                # (B, K, 2)
    identity = normalized_grid(h, w, dtype=feat.dtype, device=feat.device)
    cands = identity.expand(b, k + 1, h, w, 2).clone()
    cands[:, 1:] += disp[:, :, None, None, :]
    grid = (masks[..., None] * cands).sum(dim=1)            # (B, H, W, 2)
    return batched_bilinear_sample(feat, grid) * occlusion[:, None]
