"""Warping Feature Mapper: turns warped source features into additive
conditioning for the video diffusion backbone.

A small encoder pyramids the warped features over `num_scales` resolutions.
Each scale has an Internal Feature Modulator (IFM), a 3x3 projection onto the
backbone's feature shape at that scale, and the deepest scale additionally
feeds a rectified-guidance head that predicts a correction r shaped like the
backbone's noise output.  With zero_init set (the default) every IFM output
projection and the rectified head's final layer start at zero, so a freshly
constructed mapper is exactly transparent: fusing its outputs into the
backbone changes nothing, and r = 0.

Injection is element-wise addition (`fuse`), applied by the backbone at its
registered sites.  The backbone has one site per encoder block plus one at
the mid-block; the mid site reuses the deepest scale's modulated features,
so a bundle always carries exactly num_scales injection tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
from torch import Tensor

from .errors import ShapeMismatchError


@dataclass(frozen=True)
class WfmConfig:
    in_channels: int = 32
    in_size: int = 16
    num_scales: int = 3
    enc_channels: tuple = (24, 32, 40)
    site_channels: tuple = (20, 28, 36)   # backbone channels per scale
    eps_shape: tuple = (3, 32, 32)        # backbone noise-output shape per frame
    zero_init: bool = True
    dropout_p: float = 0.1

    def __post_init__(self):
        if self.num_scales < 1:
            raise ValueError("need at least one scale")
        if len(self.enc_channels) != self.num_scales or len(self.site_channels) != self.num_scales:
            raise ValueError("channel tuples must have num_scales entries")
        if self.in_size % (2 ** (self.num_scales - 1)):
            raise ValueError(f"in_size {self.in_size} too small for {self.num_scales} halvings")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    def scale_shapes(self) -> tuple:
        """Injection shape (C, H, W) at each scale."""
        return tuple((self.site_channels[i], self.in_size >> i, self.in_size >> i)
                     for i in range(self.num_scales))

    @classmethod
    def for_backbone(cls, scale_shapes, eps_shape, *, in_channels=32, in_size=16,
                     enc_channels=None, zero_init=True, dropout_p=0.1) -> "WfmConfig":
        """Build a config whose injection shapes match a backbone registry."""
        cfg = cls(in_channels=in_channels, in_size=in_size, num_scales=len(scale_shapes),
                  enc_channels=tuple(enc_channels) if enc_channels else
                  tuple(c + 4 for c, _, _ in scale_shapes),
                  site_channels=tuple(c for c, _, _ in scale_shapes),
                  eps_shape=tuple(eps_shape), zero_init=zero_init, dropout_p=dropout_p)
        if cfg.scale_shapes() != tuple(tuple(s) for s in scale_shapes):
            raise ShapeMismatchError(
                f"backbone injection shapes {tuple(scale_shapes)} do not match the "
                f"mapper pyramid {cfg.scale_shapes()} (input size {in_size})")
        return cfg


@dataclass(frozen=True)
class ConditioningBundle:
    """Per-scale injection tensors stacked over frames, plus the rectified
    correction r.  The unconditional symbol is the all-zero bundle (or None
    at call sites that skip fusion entirely)."""

    injections: tuple    # one (m, C_i, H_i, W_i) tensor per scale
    r: Tensor            # (m, C, H, W), same shape as the backbone output

    @property
    def frames(self) -> int:
        return self.r.shape[0]


def fuse(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise addition; shapes must match exactly, never broadcast."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"fuse shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def _conv_block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                         nn.GroupNorm(4, cout), nn.SiLU())


class WarpFeatureMapper(nn.Module):
    def __init__(self, cfg: WfmConfig):
        super().__init__()
        self.cfg = cfg
        enc = [_conv_block(cfg.in_channels, cfg.enc_channels[0])]
        for i in range(1, cfg.num_scales):
            enc.append(_conv_block(cfg.enc_channels[i - 1], cfg.enc_channels[i], stride=2))
        self.encoder = nn.ModuleList(enc)
        self.ifms = nn.ModuleList(
            nn.Conv2d(cfg.enc_channels[i], cfg.site_channels[i], 3, padding=1)
            for i in range(cfg.num_scales))
        rect_mid = 12
        ups = []
        size = cfg.in_size >> (cfg.num_scales - 1)
        ups.append(_conv_block(cfg.enc_channels[-1], rect_mid))
        while size < cfg.eps_shape[1]:
            ups += [nn.Upsample(scale_factor=2, mode="nearest"), _conv_block(rect_mid, rect_mid)]
            size *= 2
        self.rect_body = nn.Sequential(*ups)
        self.rect_out = nn.Conv2d(rect_mid, cfg.eps_shape[0], 3, padding=1)
        if cfg.zero_init:
            for conv in self.ifms:
                nn.init.zeros_(conv.weight)
                nn.init.zeros_(conv.bias)
            nn.init.zeros_(self.rect_out.weight)
            nn.init.zeros_(self.rect_out.bias)

    # -- per-scale pieces ------------------------------------------------

    def wfm_encode(self, warped: Tensor) -> list:
        """Warped features -> list of num_scales tensors, halving resolution."""
        squeeze = warped.ndim == 3
        if squeeze:
            warped = warped.unsqueeze(0)
        want = (self.cfg.in_channels, self.cfg.in_size, self.cfg.in_size)
        if warped.shape[1:] != want:
            raise ShapeMismatchError(
                f"expected warped features {want}, got {tuple(warped.shape[1:])}")
        feats, h = [], warped
        for stage in self.encoder:
            h = stage(h)
            feats.append(h)
        return [f.squeeze(0) for f in feats] if squeeze else feats

    def ifm_modulate(self, feat: Tensor, scale_index: int) -> Tensor:
        if not 0 <= scale_index < self.cfg.num_scales:
            raise ValueError(f"scale_index {scale_index} out of range "
                             f"[0, {self.cfg.num_scales})")
        return self.ifms[scale_index](feat)

    def rectified_head(self, deepest: Tensor) -> Tensor:
        want = (self.cfg.enc_channels[-1],
                self.cfg.in_size >> (self.cfg.num_scales - 1),
                self.cfg.in_size >> (self.cfg.num_scales - 1))
        shape = deepest.shape[1:] if deepest.ndim == 4 else deepest.shape
        if tuple(shape) != want:
            raise ShapeMismatchError(f"expected deepest feature {want}, got {tuple(shape)}")
        squeeze = deepest.ndim == 3
        if squeeze:
            deepest = deepest.unsqueeze(0)
        r = self.rect_out(self.rect_body(deepest))
        return r.squeeze(0) if squeeze else r

    # -- bundles -----------------------------------------------------------

    def build_conditioning(self, warped_frames: Tensor, include_r: bool = True) -> ConditioningBundle:
        """Stack per-frame modulated features over time.

        warped_frames: (m, C, H_f, W_f) or a sequence of per-frame tensors.
        With include_r=False the rectified head is never invoked and r is a
        constant zero outside any autograd graph.
        """
        if not torch.is_tensor(warped_frames):
            shapes = {tuple(f.shape) for f in warped_frames}
            if len(shapes) != 1:
                raise ShapeMismatchError(f"inconsistent frame shapes: {sorted(shapes)}")
            warped_frames = torch.stack(list(warped_frames))
        if warped_frames.ndim != 4 or warped_frames.shape[0] < 1:
            raise ShapeMismatchError(
                f"expected (m, C, H, W) warped frames, got {tuple(warped_frames.shape)}")
        feats = self.wfm_encode(warped_frames)
        injections = tuple(self.ifm_modulate(feats[i], i) for i in range(self.cfg.num_scales))
        if include_r:
            r = self.rectified_head(feats[-1])
        else:
            m = warped_frames.shape[0]
            r = torch.zeros(m, *self.cfg.eps_shape, dtype=warped_frames.dtype,
                            device=warped_frames.device)
        return ConditioningBundle(injections=injections, r=r)

    def null_conditioning(self, m: int, dtype=torch.float32, device=None) -> ConditioningBundle:
        """The unconditional bundle: all-zero injections and r = 0."""
        injections = tuple(torch.zeros(m, *shape, dtype=dtype, device=device)
                           for shape in self.cfg.scale_shapes())
        r = torch.zeros(m, *self.cfg.eps_shape, dtype=dtype, device=device)
        return ConditioningBundle(injections=injections, r=r)
