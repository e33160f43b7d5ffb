"""Networks that split an image into appearance, pose, canonical keypoints,
and expression offsets.

Output heads start analytically neutral: the pose and expression heads are
zero-initialized (R=I, t=0, delta=0), and the canonical keypoint head has zero
weights with a fixed bias lattice, so an untrained extractor reports the same
keypoint constellation for every image and x equals x_c exactly.  The bias
lattice (rather than an all-zero head) keeps the K keypoints distinct from the
first training step; collapsed keypoints would receive identical gradients
through the warp and never separate.

Stage-1 pretraining drives these networks with three terms: L1 reconstruction
of a driving frame from warped source features through a throwaway decoder,
2D keypoint equivariance under random similarity transforms, and pose
regression against the exact labels the renderer provides.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import DataError, ShapeMismatchError
from .motion_repr import EulerPose, MotionParams, compose_keypoints, project_2d, rotation_from_angles
from .synthdata import ClipDataset
from .warping import DenseMotionNet, batched_bilinear_sample, normalized_grid, warp_features_batch

GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))

# sign flips of (yaw, pitch, roll, tx, ty, pad) under horizontal mirroring
_MIRROR_SIGN = torch.tensor([-1.0, 1.0, -1.0, -1.0, 1.0, 1.0])

# extra pose-only updates per outer training step
_POSE_REFINES = 3


@dataclass(frozen=True)
class ExtractorConfig:
    image_size: int = 64
    num_kp: int = 10
    feat_channels: int = 32
    feat_size: int = 16
    sigma_heatmap: float = 0.1

    def __post_init__(self):
        if self.num_kp < 1:
            raise ValueError(f"need at least one keypoint, got {self.num_kp}")
        ratio = self.image_size / self.feat_size
        if self.image_size % self.feat_size or ratio != 2 ** int(math.log2(ratio)):
            raise ValueError(
                f"feat_size {self.feat_size} must divide image_size {self.image_size} "
                f"by a power of two")

    @classmethod
    def from_config(cls, cfg) -> "ExtractorConfig":
        return cls(image_size=cfg["data.image_size"], num_kp=cfg["extractor.K"],
                   feat_channels=cfg["extractor.feat_channels"],
                   feat_size=cfg["extractor.feat_size"],
                   sigma_heatmap=cfg["extractor.sigma_heatmap"])


@dataclass(frozen=True)
class MotionDescriptor:
    params: MotionParams
    x_c: Tensor
    x: Tensor  # composed keypoints, R @ x_c + t + delta


def keypoint_lattice(num_kp: int) -> Tensor:
    """Fixed spiral of K distinct points inside (-0.6, 0.6)^3."""
    idx = torch.arange(num_kp, dtype=torch.float64)
    ang = idx * GOLDEN_ANGLE
    rad = 0.15 + 0.4 * (idx + 0.5) / num_kp
    return torch.stack([rad * torch.cos(ang), rad * torch.sin(ang),
                        0.3 * torch.sin(1.7 * idx + 0.5)], dim=-1)


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                         nn.GroupNorm(4, cout), nn.SiLU())


class AppearanceEncoder(nn.Module):
    """Image -> C x H_f x W_f feature volume."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        n_down = int(math.log2(cfg.image_size // cfg.feat_size))
        widths = [16] + [min(64, 16 * 2 ** (i + 1)) for i in range(n_down)]
        layers = [_block(3, widths[0])]
        for i in range(n_down):
            layers.append(_block(widths[i], widths[i + 1], stride=2))
        self.body = nn.Sequential(*layers)
        self.proj = nn.Conv2d(widths[-1], cfg.feat_channels, 1)

    def forward(self, x: Tensor) -> Tensor:
        return self.proj(self.body(x))


def _with_coords(x: Tensor) -> Tensor:
    """Append two fixed coordinate channels.  The quantities these towers
    regress (keypoint positions, translation, the sign of yaw) live in *where*
    things are, which translation-equivariant conv features encode poorly."""
    b, _, hgt, wid = x.shape
    ys = torch.linspace(-1.0, 1.0, hgt, dtype=x.dtype, device=x.device)
    xs = torch.linspace(-1.0, 1.0, wid, dtype=x.dtype, device=x.device)
    coords = torch.stack(torch.meshgrid(ys, xs, indexing="ij"))
    return torch.cat([x, coords.expand(b, 2, hgt, wid)], dim=1)


class HeadEncoder(nn.Module):
    """Shared shape for the keypoint / expression towers: three stride-2
    stages, global average pool, one hidden linear, zero-init head."""

    def __init__(self, out_dim: int, hidden: int = 48):
        super().__init__()
        self.body = nn.Sequential(_block(5, 16, stride=2), _block(16, 24, stride=2),
                                  _block(24, 32, stride=2))
        self.neck = nn.Sequential(nn.Linear(32, hidden), nn.SiLU())
        self.head = nn.Linear(hidden, out_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: Tensor) -> Tensor:
        h = self.body(_with_coords(x)).mean(dim=(2, 3))
        return self.head(self.neck(h))


class PoseTower(nn.Module):
    """Pose regressor with a spatial soft-argmax readout.

    Pooled conv features alone plateau far above the accuracy the pose labels
    support: angles are carried by sub-pixel offsets of the face features
    against the head outline.  Landmark channels with softmax-expected
    positions expose that geometry to the linear head directly.  Final layer
    zero-init keeps the untrained pose at exactly zero."""

    def __init__(self, out_dim: int, widths=(24, 48, 64), n_land: int = 16,
                 hidden: int = 96):
        super().__init__()
        self.s1 = _block(5, widths[0], stride=2)
        self.s2 = _block(widths[0], widths[1], stride=2)
        self.s3 = _block(widths[1], widths[2], stride=2)
        self.heat = nn.Conv2d(widths[1], n_land, 1)
        self.neck = nn.Sequential(nn.Linear(2 * n_land + widths[2], hidden), nn.SiLU(),
                                  nn.Linear(hidden, hidden), nn.SiLU())
        self.head = nn.Linear(hidden, out_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x: Tensor) -> Tensor:
        f2 = self.s2(self.s1(_with_coords(x)))
        f3 = self.s3(f2)
        b = x.shape[0]
        hh, ww = f2.shape[-2:]
        att = torch.softmax(self.heat(f2).reshape(b, -1, hh * ww), dim=-1)
        ys = torch.linspace(-1.0, 1.0, hh, dtype=x.dtype, device=x.device)
        xs = torch.linspace(-1.0, 1.0, ww, dtype=x.dtype, device=x.device)
        grid = torch.stack(torch.meshgrid(ys, xs, indexing="ij")).reshape(2, -1)
        pos = torch.einsum("bjp,cp->bjc", att, grid).reshape(b, -1)
        h = torch.cat([pos, f3.mean(dim=(2, 3))], dim=1)
        return self.head(self.neck(h))


class MotionExtractor(nn.Module):
    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        self.cfg = cfg
        self.appearance = AppearanceEncoder(cfg)
        self.pose_net = PoseTower(6)
        self.kp_net = HeadEncoder(3 * cfg.num_kp)
        self.expr_net = HeadEncoder(3 * cfg.num_kp)
        with torch.no_grad():
            self.kp_net.head.bias.copy_(
                torch.atanh(keypoint_lattice(cfg.num_kp)).reshape(-1).to(torch.float32))

    # -- input plumbing ------------------------------------------------

    def _prep(self, image) -> Tensor:
        dtype = self.pose_net.head.weight.dtype
        t = image if torch.is_tensor(image) else torch.as_tensor(np.asarray(image))
        t = t.to(dtype)
        if t.ndim == 3 and t.shape[-1] == 3 and t.shape[0] != 3:
            t = t.permute(2, 0, 1)
        s = self.cfg.image_size
        if t.shape != (3, s, s):
            raise ShapeMismatchError(f"expected a 3x{s}x{s} image, got {tuple(t.shape)}")
        return t.unsqueeze(0)

    # -- batched forward passes (training) -----------------------------

    def appearance_batch(self, images: Tensor) -> Tensor:
        return self.appearance(images)

    def pose_batch(self, images: Tensor) -> tuple[Tensor, Tensor]:
        out = self.pose_net(images)
        return out[:, :3], out[:, 3:]

    def pose_batch_mirrored(self, images: Tensor) -> tuple[Tensor, Tensor]:
        """Average the estimate with its mirror-corrected counterpart.

        Mirroring negates yaw, roll and tx; averaging the two estimates
        cancels the antisymmetric part of the regression error.  This is the
        pose used for inference; `pose_batch` stays the raw training head."""
        out = self.pose_net(images)
        out_m = self.pose_net(images.flip(-1)) * _MIRROR_SIGN.to(out.dtype)
        out = 0.5 * (out + out_m)
        return out[:, :3], out[:, 3:]

    def kp_batch(self, images: Tensor) -> Tensor:
        return torch.tanh(self.kp_net(images)).reshape(-1, self.cfg.num_kp, 3)

    def expr_batch(self, images: Tensor) -> Tensor:
        return self.expr_net(images).reshape(-1, self.cfg.num_kp, 3)

    def motion_batch(self, images: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        """(x, x_c, R, t, delta), batched over the leading dim."""
        angles, t = self.pose_batch_mirrored(images)
        r = rotation_from_angles(angles[:, 0], angles[:, 1], angles[:, 2])
        x_c = self.kp_batch(images)
        delta = self.expr_batch(images)
        x = torch.einsum("bij,bkj->bki", r, x_c) + t[:, None, :] + delta
        return x, x_c, r, t, delta

    # -- single-image ops ----------------------------------------------

    def extract_appearance(self, image) -> Tensor:
        return self.appearance(self._prep(image)).squeeze(0)

    def estimate_pose(self, image) -> EulerPose:
        angles, t = self.pose_batch_mirrored(self._prep(image))
        angles = angles.detach()
        return EulerPose(yaw=float(angles[0, 0]), pitch=float(angles[0, 1]),
                         roll=float(angles[0, 2]), t=t[0].detach())

    def estimate_canonical_keypoints(self, image) -> Tensor:
        return self.kp_batch(self._prep(image)).squeeze(0)

    def estimate_expression(self, image) -> Tensor:
        return self.expr_batch(self._prep(image)).squeeze(0)

    def extract_motion(self, image) -> MotionDescriptor:
        batch = self._prep(image)
        angles, t = self.pose_batch_mirrored(batch)
        r = rotation_from_angles(angles[0, 0], angles[0, 1], angles[0, 2])
        x_c = self.kp_batch(batch).squeeze(0)
        delta = self.expr_batch(batch).squeeze(0)
        params = MotionParams(R=r.detach(), t=t[0].detach(), delta=delta.detach())
        return MotionDescriptor(params=params, x_c=x_c.detach(),
                                x=compose_keypoints(x_c.detach(), params))


class Stage1Decoder(nn.Module):
    """Warped features -> RGB; used only to supervise stage-1 pretraining."""

    def __init__(self, cfg: ExtractorConfig):
        super().__init__()
        n_up = int(math.log2(cfg.image_size // cfg.feat_size))
        widths = [cfg.feat_channels] + [max(12, cfg.feat_channels - 8 * (i + 1))
                                        for i in range(n_up)]
        stages = []
        for i in range(n_up):
            stages += [nn.Upsample(scale_factor=2, mode="nearest"),
                       _block(widths[i], widths[i + 1])]
        self.body = nn.Sequential(*stages)
        self.out = nn.Conv2d(widths[-1], 3, 3, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return torch.sigmoid(self.out(self.body(x)))


def _similarity_grids(b: int, size: int, gen: torch.Generator,
                      device=None) -> tuple[Tensor, Tensor, Tensor]:
    """Random per-sample similarity transforms as backward-sampling grids.

    Returns (grids, A, shift) with grid_b(p) = A_b p + shift_b, so a point q in
    the original image lands at A^-1 (q - shift) in the transformed one.
    """
    theta = (torch.rand(b, generator=gen) * 2 - 1) * 0.35
    scale = 0.85 + torch.rand(b, generator=gen) * 0.35
    shift = (torch.rand(b, 2, generator=gen) * 2 - 1) * 0.15
    c, s = torch.cos(theta) * scale, torch.sin(theta) * scale
    a = torch.stack([torch.stack([c, -s], -1), torch.stack([s, c], -1)], -2)
    p = normalized_grid(size, size, device=device)
    grids = torch.einsum("bij,hwj->bhwi", a, p) + shift[:, None, None, :]
    return grids, a, shift


def _pose_augment(images: Tensor, labels: Tensor, gen: torch.Generator):
    """Similarity-warped, color-jittered, randomly mirrored copies with
    exactly transformed labels.

    Backgrounds and palettes are unique per clip, so an unaugmented regressor
    memorizes them instead of reading geometry; under these transforms the
    labels move in ways only the face geometry explains.  Label algebra for
    grid(p) = A p + shift: roll loses the warp rotation angle, translation
    maps through A^-1 (t - shift), mirroring negates yaw / roll / tx."""
    n = images.shape[0]
    grids, a, shift = _similarity_grids(n, images.shape[-1], gen)
    out = batched_bilinear_sample(images, grids)
    theta = torch.atan2(a[:, 1, 0], a[:, 0, 0])
    lab = labels.clone()
    lab[:, 2] = labels[:, 2] - theta
    lab[:, 3:5] = torch.einsum("bij,bj->bi", torch.inverse(a),
                               labels[:, 3:5] - shift)
    cscale = 0.6 + 0.8 * torch.rand(n, 3, 1, 1, generator=gen)
    coffs = 0.3 * (torch.rand(n, 3, 1, 1, generator=gen) - 0.5)
    out = (out * cscale + coffs).clamp(0.0, 1.0)
    flip = torch.rand(n, generator=gen) < 0.5
    out = torch.where(flip[:, None, None, None], out.flip(-1), out)
    sign = torch.ones(n, 6)
    sign[flip] = _MIRROR_SIGN
    return out, lab * sign


def _window_ema(values, decay: float = 0.98) -> float:
    acc = values[0]
    for v in values[1:]:
        acc = decay * acc + (1.0 - decay) * v
    return float(acc)


def pretrain_motion_extractor(dataset, cfg: ExtractorConfig, seed: int, *,
                              steps: int = 2000, batch_size: int = 4,
                              lr: float = 1e-4, lambda_pose: float = 1.0,
                              log_every: int = 1, clip_limit: int | None = None):
    """Stage-1 training; returns (weights dict, log rows).

    Log rows are (step, loss_recon, loss_equiv, loss_pose).  Weights carry
    `extractor.` / `dense_motion.` / `decoder.` sub-prefixes and serialize
    through the checkpoint module.  clip_limit restricts sampling to the
    first clips so a holdout tail stays unseen.
    """
    data = dataset if isinstance(dataset, ClipDataset) else ClipDataset(dataset)
    if len(data) == 0:
        raise DataError("empty dataset")

    torch.manual_seed(seed)
    model = MotionExtractor(cfg)
    dm_net = DenseMotionNet(cfg.num_kp)
    decoder = Stage1Decoder(cfg)
    pose_params = list(model.pose_net.parameters())
    pose_ids = {id(p) for p in pose_params}
    rest = [p for p in (list(model.parameters()) + list(dm_net.parameters())
                        + list(decoder.parameters())) if id(p) not in pose_ids]
    # The pose tower regresses absolute angles from a zero-init head; at the
    # shared rate it barely leaves zero in a desk-scale budget, so it gets its
    # own faster group.
    opt = torch.optim.Adam([{"params": rest}, {"params": pose_params, "lr": 10 * lr}],
                           lr=lr)
    gen = torch.Generator().manual_seed(seed + 1)

    n_clips = min(clip_limit, len(data)) if clip_limit else len(data)
    m = data.frames_per_clip
    log = []
    for step in range(steps):
        ci = torch.randint(n_clips, (batch_size,), generator=gen)
        fi = torch.randint(m, (2, batch_size), generator=gen)
        src = torch.stack([torch.from_numpy(data.frame(int(c), int(f)))
                           for c, f in zip(ci, fi[0])]).permute(0, 3, 1, 2)
        drv = torch.stack([torch.from_numpy(data.frame(int(c), int(f)))
                           for c, f in zip(ci, fi[1])]).permute(0, 3, 1, 2)
        # a third, independently drawn frame batch pads out the pose branch
        ci3 = torch.randint(n_clips, (batch_size,), generator=gen)
        fi3 = torch.randint(m, (batch_size,), generator=gen)
        extra = torch.stack([torch.from_numpy(data.frame(int(c), int(f)))
                             for c, f in zip(ci3, fi3)]).permute(0, 3, 1, 2)
        labels = torch.stack(
            [torch.from_numpy(np.concatenate([data.pose_labels(int(c))[int(f)], [0.0]])
                              .astype(np.float32))
             for c, f in zip(torch.cat([ci, ci, ci3]),
                             torch.cat([fi[0], fi[1], fi3]))])

        # Pose enters the keypoint composition detached: the warping and
        # equivariance terms would otherwise push the shared pose outputs
        # toward identity (delta can absorb all motion) and stall the
        # regression.  Pose is supervised by its own term alone.
        def composed(images):
            with torch.no_grad():
                angles, tvec = model.pose_batch_mirrored(images)
            r = rotation_from_angles(angles[:, 0], angles[:, 1], angles[:, 2])
            return (torch.einsum("bij,bkj->bki", r, model.kp_batch(images))
                    + tvec[:, None, :] + model.expr_batch(images))

        both = torch.cat([src, drv])
        x = composed(both)
        x_s, x_d = x[:batch_size], x[batch_size:]

        feats = model.appearance_batch(src)
        warped = warp_features_batch(x_s, x_d, feats, dm_net, cfg.sigma_heatmap)
        loss_recon = (decoder(warped) - drv).abs().mean()

        grids, a, shift = _similarity_grids(batch_size, cfg.image_size, gen)
        twisted = batched_bilinear_sample(drv, grids)
        x_t = composed(twisted)
        target = torch.einsum("bij,bkj->bki", torch.inverse(a),
                              project_2d(x_d) - shift[:, None, :])
        loss_equiv = (project_2d(x_t) - target).abs().mean()

        # Pose regression on augmented copies (see _pose_augment).  The first
        # evaluation joins the main objective; a few extra refinement updates
        # with fresh augmentations follow, which only touch the pose tower.
        # One outer step therefore advances pose by `1 + _POSE_REFINES` small
        # steps, which the desk-scale step budget needs to reach label noise.
        pose_base = torch.cat([both, extra])
        aug_in, aug_lab = _pose_augment(pose_base, labels, gen)
        angles, tvec = model.pose_batch(aug_in)
        loss_pose = F.mse_loss(torch.cat([angles, tvec], dim=1), aug_lab)

        loss = loss_recon + loss_equiv + lambda_pose * loss_pose
        opt.zero_grad()
        loss.backward()
        opt.step()
        if lambda_pose != 0.0:
            for _ in range(_POSE_REFINES):
                aug_in, aug_lab = _pose_augment(pose_base, labels, gen)
                angles, tvec = model.pose_batch(aug_in)
                refine = lambda_pose * F.mse_loss(
                    torch.cat([angles, tvec], dim=1), aug_lab)
                opt.zero_grad()
                refine.backward()
                opt.step()
        if step % log_every == 0 or step == steps - 1:
            log.append((step, loss_recon.item(), loss_equiv.item(), loss_pose.item()))

    weights = {}
    for prefix, module in (("extractor", model), ("dense_motion", dm_net),
                           ("decoder", decoder)):
        for name, tensor in module.state_dict().items():
            weights[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    return weights, log


def build_from_weights(weights: dict, cfg: ExtractorConfig,
                       with_decoder: bool = False):
    """Rebuild (MotionExtractor, DenseMotionNet[, Stage1Decoder]) from arrays."""
    def _load(module: nn.Module, prefix: str):
        state = {k[len(prefix) + 1:]: torch.as_tensor(v) for k, v in weights.items()
                 if k.startswith(prefix + ".")}
        module.load_state_dict(state)
        return module

    model = _load(MotionExtractor(cfg), "extractor").eval()
    dm_net = _load(DenseMotionNet(cfg.num_kp), "dense_motion").eval()
    if with_decoder:
        return model, dm_net, _load(Stage1Decoder(cfg), "decoder").eval()
    return model, dm_net
