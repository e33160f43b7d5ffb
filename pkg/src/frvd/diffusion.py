"""Noise schedule, toy image-to-video diffusion backbone, and DDIM sampling.

The backbone is a small UNet over pixel-space latents (a 2x average-pooled,
[-1,1]-scaled copy of the frame).  Conditioning on the clean source frame is
by channel concatenation, repeated along time.  Frames of a clip share one
timestep; temporal mixing happens only in a mid-block temporal attention that
can be disabled in config, in which case the network is frame-wise and
permuting input frames permutes outputs identically.

External conditioning enters through `fuse` at registered sites: the output
of every encoder block plus the mid-block, where the mid site reuses the
deepest scale's injection tensor.

Noising follows z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps, and the
training objective is the mean squared value of (eps - eps_hat - r), where r
is the rectified correction carried by the conditioning bundle (zero for the
unconditional branch).  Guidance combines branches as

    eps_guided = w * (eps_c - eps_u) + eps_c + r

with the conditional branch as the base.  Sampling is deterministic DDIM:
zhat_0 = (z_t - sqrt(1-abar_t) eps) / sqrt(abar_t), then re-noised to t_prev
with abar_0 defined as 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import InvalidStateError, ShapeMismatchError
from .wfm import ConditioningBundle, fuse

# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    betas: Tensor       # (T,) float64
    alpha_bar: Tensor   # (T,) float64, running product of (1 - beta)

    @property
    def T(self) -> int:
        return self.betas.shape[0]

    def abar(self, t) -> Tensor:
        """abar_t for integer t in [0, T], with abar_0 = 1."""
        t = torch.as_tensor(t, dtype=torch.long)
        flat = t.reshape(-1)
        if ((flat < 0) | (flat > self.T)).any():
            raise ValueError(f"t must lie in [0, {self.T}], got {t}")
        out = torch.ones(flat.shape, dtype=torch.float64)
        nz = flat > 0
        out[nz] = self.alpha_bar[flat[nz] - 1]
        return out.reshape(t.shape)


def build_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if T < 1:
        raise ValueError(f"T must be positive, got {T}")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got "
                         f"({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return NoiseSchedule(betas=betas, alpha_bar=torch.cumprod(1.0 - betas, dim=0))


def add_noise(z_0: Tensor, eps: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    """z_t = sqrt(abar_t) z_0 + sqrt(1 - abar_t) eps; t may be per-clip (B,)."""
    if z_0.shape != eps.shape:
        raise ShapeMismatchError(f"z_0 {tuple(z_0.shape)} vs eps {tuple(eps.shape)}")
    t = torch.as_tensor(t, dtype=torch.long)
    if ((t < 1) | (t > schedule.T)).any():
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")
    abar = schedule.abar(t).to(z_0.dtype)
    abar = abar.reshape(abar.shape + (1,) * (z_0.ndim - abar.ndim))
    return abar.sqrt() * z_0 + (1.0 - abar).sqrt() * eps


# ---------------------------------------------------------------------------
# backbone


def sinusoidal_embedding(t: Tensor, dim: int) -> Tensor:
    """Standard transformer-style timestep features, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    ang = t.float()[:, None] * freqs[None, :].to(t.device)
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 3
    latent_size: int = 32
    channels: tuple = (16, 20, 28, 36)   # stem plus one entry per encoder block
    temb_dim: int = 64
    temporal_attention: bool = True
    T: int = 1000                        # noise schedule the model is trained for
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ValueError("need a stem width and at least one block width")
        if self.latent_size % (2 ** self.levels):
            raise ValueError(f"latent_size {self.latent_size} not divisible by "
                             f"2^{self.levels}")
        for c in self.channels:
            if c % 4:
                raise ValueError(f"channel widths must be multiples of 4, got {c}")

    @property
    def levels(self) -> int:
        return len(self.channels) - 1

    def scale_shapes(self) -> tuple:
        """(C, H, W) of each encoder block output, shallow to deep."""
        return tuple((self.channels[i + 1], self.latent_size >> (i + 1),
                      self.latent_size >> (i + 1)) for i in range(self.levels))

    def injection_sites(self) -> tuple:
        """(site name, scale index) pairs; the mid site reuses the deepest scale."""
        return tuple([(f"enc{i}", i) for i in range(self.levels)]
                     + [("mid", self.levels - 1)])

    def eps_shape(self) -> tuple:
        return (self.latent_channels, self.latent_size, self.latent_size)

    @classmethod
    def from_config(cls, cfg) -> "BackboneConfig":
        size = cfg["data.image_size"] // cfg["diffusion.latent_downscale"]
        return cls(latent_size=size, channels=tuple(cfg["backbone.channels"]),
                   temb_dim=cfg["backbone.temb_dim"],
                   temporal_attention=cfg["backbone.temporal_attention"],
                   T=cfg["diffusion.T"], beta_start=cfg["diffusion.beta_start"],
                   beta_end=cfg["diffusion.beta_end"])


class _EncBlock(nn.Module):
    def __init__(self, cin, cout, temb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
        self.norm1 = nn.GroupNorm(4, cout)
        self.emb = nn.Linear(temb_dim, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(4, cout)

    def forward(self, x, temb):
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.emb(temb)[:, :, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class _DecBlock(nn.Module):
    def __init__(self, cin, skip, cout, temb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(cin + skip, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(4, cout)
        self.emb = nn.Linear(temb_dim, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(4, cout)

    def forward(self, x, skip, temb):
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        h = F.silu(self.norm1(self.conv1(torch.cat([x, skip], dim=1))))
        h = h + self.emb(temb)[:, :, None, None]
        return F.silu(self.norm2(self.conv2(h)))


class _SpatialAttention(nn.Module):
    """Single-head self-attention over the H*W positions of each frame."""

    def __init__(self, c):
        super().__init__()
        self.norm = nn.GroupNorm(4, c)
        self.qkv = nn.Conv2d(c, 3 * c, 1)
        self.proj = nn.Conv2d(c, c, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(b, c, h, w)
        return x + self.proj(out)


class _TemporalAttention(nn.Module):
    """Single-head self-attention over frames, independently per position."""

    def __init__(self, c):
        super().__init__()
        self.norm = nn.GroupNorm(4, c)
        self.qkv = nn.Linear(c, 3 * c)
        self.proj = nn.Linear(c, c)

    def forward(self, x, clip_len):
        bm, c, h, w = x.shape
        b = bm // clip_len
        tokens = self.norm(x).reshape(b, clip_len, c, h * w)
        tokens = tokens.permute(0, 3, 1, 2).reshape(b * h * w, clip_len, c)
        q, k, v = self.qkv(tokens).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        out = self.proj(attn @ v)
        out = out.reshape(b, h * w, clip_len, c).permute(0, 2, 3, 1).reshape(bm, c, h, w)
        return x + out


class Backbone(nn.Module):
    """Noise predictor eps_theta(z_t, source, t, bundle)."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        self.temb = nn.Sequential(nn.Linear(cfg.temb_dim, cfg.temb_dim), nn.SiLU(),
                                  nn.Linear(cfg.temb_dim, cfg.temb_dim))
        self.stem = nn.Conv2d(2 * cfg.latent_channels, ch[0], 3, padding=1)
        self.enc = nn.ModuleList(_EncBlock(ch[i], ch[i + 1], cfg.temb_dim)
                                 for i in range(cfg.levels))
        self.mid_spatial = _SpatialAttention(ch[-1])
        self.mid_temporal = _TemporalAttention(ch[-1]) if cfg.temporal_attention else None
        self.mid_conv = nn.Sequential(nn.Conv2d(ch[-1], ch[-1], 3, padding=1),
                                      nn.GroupNorm(4, ch[-1]), nn.SiLU())
        self.dec = nn.ModuleList(_DecBlock(ch[i + 1], ch[i], ch[i], cfg.temb_dim)
                                 for i in reversed(range(cfg.levels)))
        self.out_norm = nn.GroupNorm(4, ch[0])
        self.out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)
        # Gated linear passthroughs of z_t, split into a within-2x2-block
        # detail band and a block-mean band.  The optimal linear read-out of
        # z_t for eps prediction is s/(abar sigma^2 + s^2) per band, where
        # sigma is the residual z_0 scale of that band and s = sqrt(1-abar);
        # at large t this degenerates to echoing z_t (eps ~ z_t), at small t
        # it applies band-dependent shrinkage a conv stack learns poorly.
        # The bases are exposed with learnable band scales and zero-init
        # per-band gates, so a fresh backbone still predicts exactly zero.
        sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        self.register_buffer(
            "abar", torch.cat([torch.ones(1), sched.alpha_bar.float()]))
        self.band_scale = nn.Parameter(torch.tensor([0.07, 0.25]).expm1().log())
        self.band_gate = nn.Linear(cfg.temb_dim, 3)
        nn.init.zeros_(self.band_gate.weight)
        nn.init.zeros_(self.band_gate.bias)
        # Content taps: encode an optional per-frame clean-content latent into
        # the injection-site feature spaces.  Pretraining feeds these a noisy
        # view of the target frames on part of the batch, which teaches the
        # decoder to fuse site-level content with z_t; later conditioning
        # stages add their own features at the same sites and inherit that
        # pathway.  Everything is bias-free so an all-zero content row (and
        # content=None) contributes exactly nothing.  Heads read the pre-SiLU
        # trunk features, keeping a fully linear lane from the content input
        # to the shallowest site.
        self.site_trunk = nn.ModuleList(
            nn.Conv2d(ch[i] if i else cfg.latent_channels, ch[i + 1], 3,
                      stride=2, padding=1, bias=False)
            for i in range(cfg.levels))
        self.site_heads = nn.ModuleList(
            nn.Conv2d(ch[i + 1], ch[i + 1], 1, bias=False)
            for i in range(cfg.levels))
        # Direct, t-gated read-out of the shallowest site signal (content-tap
        # features plus the scale-0 injection), interpreted as an estimate of
        # the pooled clean latent.  Besides an additive lane, the estimate
        # feeds an inversion unit (z_lb - sqrt(abar) zhat_lb) / s, which turns
        # a good block-mean estimate into the exact block-mean of eps without
        # threading the whole decoder.  The first latent_channels lanes of the
        # shallowest tap are initialized as an identity copy of the content
        # and site_out starts by reading exactly those lanes, so with the
        # zero-initialized gates the only thing left to learn for the analytic
        # part is the scalar trust profiles over t.
        self.site_out = nn.Conv2d(ch[1], cfg.latent_channels, 1, bias=False)
        self.site_gate = nn.Linear(cfg.temb_dim, cfg.latent_channels)
        nn.init.zeros_(self.site_gate.weight)
        nn.init.zeros_(self.site_gate.bias)
        cl = cfg.latent_channels
        with torch.no_grad():
            self.site_trunk[0].weight[:cl].zero_()
            for c in range(cl):
                self.site_trunk[0].weight[c, c, 1, 1] = 1.0
            eye = torch.eye(ch[1])[:, :, None, None]
            self.site_heads[0].weight.copy_(eye)
            self.site_out.weight.zero_()
            for c in range(cl):
                self.site_out.weight[c, c, 0, 0] = 1.0

    def forward(self, z_t: Tensor, source_cond: Tensor, t,
                bundle: ConditioningBundle | None = None,
                content: Tensor | None = None) -> Tensor:
        """z_t: (m, C, H, W) or (B, m, C, H, W); source_cond: matching clean
        source latent (C, H, W) or (B, C, H, W); t: int or (B,) tensor.

        content, when given, is a per-frame latent shaped like z_t that is
        encoded by the content taps and added at the injection sites; rows of
        zeros (and content=None) leave the features untouched."""
        squeeze = z_t.ndim == 4
        if squeeze:
            z_t = z_t.unsqueeze(0)
            source_cond = source_cond.unsqueeze(0)
            if content is not None:
                content = content.unsqueeze(0)
        b, m = z_t.shape[:2]
        want = (self.cfg.latent_channels, self.cfg.latent_size, self.cfg.latent_size)
        if z_t.shape[2:] != want or source_cond.shape != (b, *want):
            raise ShapeMismatchError(
                f"latent {tuple(z_t.shape)} / source {tuple(source_cond.shape)} "
                f"do not match config {want}")
        if content is not None and content.shape != z_t.shape:
            raise ShapeMismatchError(
                f"content {tuple(content.shape)} does not match latent "
                f"{tuple(z_t.shape)}")

        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.shape[0] == 1:
            t = t.expand(b)
        temb = self.temb(sinusoidal_embedding(t, self.cfg.temb_dim))
        temb = temb[:, None, :].expand(b, m, -1).reshape(b * m, -1)

        sites = None
        if content is not None:
            sites, c = [], content.reshape(b * m, *want)
            for trunk, head in zip(self.site_trunk, self.site_heads):
                pre = trunk(c)
                sites.append(head(pre))
                c = F.silu(pre)

        x = torch.cat([z_t, source_cond[:, None].expand_as(z_t)], dim=2)
        h = self.stem(x.reshape(b * m, 2 * want[0], *want[1:]))

        skips = [h]
        for i, block in enumerate(self.enc):
            h = block(h, temb)
            if sites is not None:
                h = h + sites[i]
            h = self._inject(h, bundle, scale=i, b=b, m=m)
            if i < self.cfg.levels - 1:
                skips.append(h)

        h = self.mid_spatial(h)
        if self.mid_temporal is not None:
            h = self.mid_temporal(h, m)
        h = self.mid_conv(h)
        if sites is not None:
            h = h + sites[-1]
        h = self._inject(h, bundle, scale=self.cfg.levels - 1, b=b, m=m)

        for block in self.dec:
            h = block(h, skips.pop(), temb)
        eps = self.out(F.silu(self.out_norm(h)))

        abar_t = self.abar[t][:, None].expand(b, m).reshape(b * m, 1, 1, 1)
        s = (1.0 - abar_t).sqrt()
        sig2 = F.softplus(self.band_scale) ** 2
        z = z_t.reshape(b * m, *want)
        zlb = F.interpolate(F.avg_pool2d(z, 2), scale_factor=2, mode="nearest")
        zhb = z - zlb
        g = self.band_gate(temb)
        eps = eps + g[:, 0, None, None, None] * (
            s / (abar_t * sig2[0] + s * s) * zhb)
        eps = eps + g[:, 1, None, None, None] * (
            s / (abar_t * sig2[1] + s * s) * zlb)

        signal0 = sites[0] if sites is not None else None
        if bundle is not None:
            inj0 = bundle.injections[0]
            if inj0.ndim == 4:
                inj0 = inj0.unsqueeze(0).expand(b, *inj0.shape)
            inj0 = inj0.reshape(b * m, *inj0.shape[2:])
            signal0 = inj0 if signal0 is None else signal0 + inj0
        if signal0 is not None:
            proj = F.interpolate(self.site_out(signal0), size=want[1:],
                                 mode="nearest")
            eps = eps + self.site_gate(temb)[:, :, None, None] * proj
            inv = (zlb - abar_t.sqrt() * proj) / s.clamp_min(0.05)
            eps = eps + g[:, 2, None, None, None] * inv

        eps = eps.reshape(b, m, *want)
        return eps.squeeze(0) if squeeze else eps

    def _inject(self, h: Tensor, bundle: ConditioningBundle | None,
                scale: int, b: int, m: int) -> Tensor:
        if bundle is None:
            return h
        inj = bundle.injections[scale]
        if inj.ndim == 4:                      # (m, C, H, W) shared across batch
            inj = inj.unsqueeze(0).expand(b, *inj.shape)
        return fuse(h, inj.reshape(b * m, *inj.shape[2:]))


# ---------------------------------------------------------------------------
# objective and guidance


def training_loss(model: Backbone, z_0: Tensor, source_cond: Tensor,
                  bundle: ConditioningBundle | None, schedule: NoiseSchedule,
                  seed: int | None = None, generator: torch.Generator | None = None,
                  content: Tensor | None = None) -> Tensor:
    """Mean squared value of (eps - eps_hat - r).

    Draw order from the seed is fixed: first t uniform over [1, T] (one per
    clip), then eps over the full latent shape.  Pass a generator instead of
    a seed to advance an existing stream.  content is forwarded to the model
    when given (pretraining feeds the content taps through it).
    """
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else seed)
    b = z_0.shape[0] if z_0.ndim == 5 else 1
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(z_0.shape, generator=generator, dtype=z_0.dtype)
    z_t = add_noise(z_0, eps, t if z_0.ndim == 5 else int(t), schedule)
    if content is None:
        eps_hat = model(z_t, source_cond, t, bundle)
    else:
        eps_hat = model(z_t, source_cond, t, bundle, content=content)
    r = 0.0 if bundle is None else bundle.r
    return (eps - eps_hat - r).square().mean()


def cfg_epsilon(eps_c, eps_u, r, w: float):
    """eps_guided = w (eps_c - eps_u) + eps_c + r, conditional branch as base."""
    if w < 0:
        raise ValueError(f"guidance strength must be >= 0, got {w}")
    eps_c, eps_u, r = (torch.as_tensor(v) for v in (eps_c, eps_u, r))
    if eps_c.shape != eps_u.shape or (r.ndim and r.shape != eps_c.shape):
        raise ShapeMismatchError(
            f"branch shapes differ: {tuple(eps_c.shape)} vs {tuple(eps_u.shape)} "
            f"vs r {tuple(r.shape)}")
    return w * (eps_c - eps_u) + eps_c + r


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class DdimPlan:
    timesteps: tuple   # strictly decreasing ints, first <= T, last >= 1

    def __post_init__(self):
        ts = self.timesteps
        if not ts or ts[-1] < 1:
            raise ValueError("plan needs at least one timestep >= 1")
        if any(nxt >= cur for cur, nxt in zip(ts[:-1], ts[1:])):
            raise ValueError(f"timesteps must strictly decrease, got {ts}")


def make_plan(T: int, steps: int) -> DdimPlan:
    """Uniformly spaced plan from T down to 1."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}], got {steps}")
    if steps == 1:
        return DdimPlan(timesteps=(T,))
    ts = [int(round(T - i * (T - 1) / (steps - 1))) for i in range(steps)]
    return DdimPlan(timesteps=tuple(ts))


def ddim_step(z_t: Tensor, eps_hat: Tensor, t: int, t_prev: int,
              schedule: NoiseSchedule) -> Tensor:
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    abar_t = schedule.abar(t).to(z_t.dtype)
    abar_p = schedule.abar(t_prev).to(z_t.dtype)
    z0_hat = (z_t - (1.0 - abar_t).sqrt() * eps_hat) / abar_t.sqrt()
    return abar_p.sqrt() * z0_hat + (1.0 - abar_p).sqrt() * eps_hat


def sample_clip(model: Backbone, source_latent: Tensor,
                bundle: ConditioningBundle | None, plan: DdimPlan, w: float,
                schedule: NoiseSchedule, seed: int | None = None,
                z_init: Tensor | None = None, frames: int | None = None) -> Tensor:
    """DDIM-sample one clip; returns latents in [-1, 1], shape (m, C, H, W).

    With a bundle, each step runs both branches and applies cfg_epsilon.
    Without one (the phi case) the sampler is plain unconditional DDIM.
    z_init overrides the seeded z_T draw (used by windowed inference).
    """
    if model is None:
        raise InvalidStateError("no backbone weights loaded")
    m = bundle.frames if bundle is not None else frames
    if m is None:
        raise ValueError("frame count required when sampling without a bundle")
    shape = (m, model.cfg.latent_channels, model.cfg.latent_size,
             model.cfg.latent_size)
    if z_init is not None:
        if tuple(z_init.shape) != shape:
            raise ShapeMismatchError(f"z_init {tuple(z_init.shape)} vs {shape}")
        z = z_init.clone()
    else:
        gen = torch.Generator().manual_seed(0 if seed is None else seed)
        z = torch.randn(shape, generator=gen)
    steps = list(plan.timesteps) + [0]
    with torch.no_grad():
        for t, t_prev in zip(steps[:-1], steps[1:]):
            eps_u = model(z, source_latent, t, None)
            if bundle is not None:
                eps_c = model(z, source_latent, t, bundle)
                eps = cfg_epsilon(eps_c, eps_u, bundle.r, w)
            else:
                eps = eps_u
            z = ddim_step(z, eps, t, t_prev, schedule)
    return z.clamp(-1.0, 1.0)


# ---------------------------------------------------------------------------
# pixel codec


@dataclass(frozen=True)
class PixelCodec:
    """Maps [0,1] frames to [-1,1] latents; downscale 1 is pure rescaling."""

    downscale: int = 2

    def encode(self, frames: Tensor) -> Tensor:
        """(..., 3, H, W) in [0,1] -> (..., 3, H/d, W/d) in [-1,1]."""
        lead = frames.shape[:-3]
        x = frames.reshape(-1, *frames.shape[-3:])
        if self.downscale > 1:
            x = F.avg_pool2d(x, self.downscale)
        return (x * 2.0 - 1.0).reshape(*lead, *x.shape[-3:])

    def decode(self, z: Tensor) -> Tensor:
        lead = z.shape[:-3]
        x = z.reshape(-1, *z.shape[-3:]).clamp(-1.0, 1.0)
        if self.downscale > 1:
            x = F.interpolate(x, scale_factor=self.downscale, mode="bilinear",
                              align_corners=False)
        return ((x + 1.0) / 2.0).clamp(0.0, 1.0).reshape(*lead, *x.shape[-3:])
