"""Training stages, windowed sampling, and reenactment orchestration.

Three stages share one synthetic dataset.  Stage "motion" pretrains the
motion extractor and dense-motion CNN; stage "i2v" pretrains the diffusion
backbone (source-frame concatenation, plus teacher-forced content taps so the
decoder learns to consume per-frame content at the injection sites); stage
"wfm" freezes both and trains the Warping Feature Mapper, verifying by hash
that frozen weights never move.

The last `data.holdout_frac` of clips never appear in any training batch and
serve as the held-out evaluation split.

Long clips are sampled in overlapping windows.  Initial noise is drawn once
per absolute frame index from the run seed, so the slices that two windows
share start from identical z_T, and overlapping outputs are cross-faded with
weights that sum to 1 exactly at every frame.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import add_prefix, load_checkpoint, save_checkpoint, split_prefix
from .config import Config
from .diffusion import (Backbone, BackboneConfig, PixelCodec, build_schedule,
                        make_plan, sample_clip, training_loss)
from .errors import CheckpointError, DataError, InvalidStateError, ShapeMismatchError
from .motion_extractor import (ExtractorConfig, MotionExtractor, build_from_weights,
                               pretrain_motion_extractor)
from .motion_repr import align_motion, compose_keypoints
from .synthdata import ClipDataset, save_frame_png
from .warping import DenseMotionNet, warp_features_batch
from .wfm import ConditioningBundle, WarpFeatureMapper, WfmConfig

STAGES = ("motion", "i2v", "wfm")

# Content-tap teacher forcing during backbone pretraining: fraction of clips
# per batch that see their own (degraded) target latents, and the degradation
# level, chosen near the fidelity of a decent warped source.
_TEACHER_P = 0.9
_TEACHER_SIGMA = 0.08


@dataclass(frozen=True)
class TrainConfig:
    stage: str
    clip_len: int = 4
    batch_size: int = 4
    steps: int = 2000
    lr: float = 1e-4
    lambda_pose: float = 1.0
    rectified_guidance: bool = True
    dropout_p: float = 0.1
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        for name in ("clip_len", "batch_size", "steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must lie in [0, 1), got {self.dropout_p}")

    @classmethod
    def from_config(cls, cfg: Config, stage: str) -> "TrainConfig":
        return cls(stage=stage, clip_len=cfg["train.clip_len"],
                   batch_size=cfg["train.batch_size"], steps=cfg["train.steps"],
                   lr=cfg["train.lr"], lambda_pose=cfg["train.lambda_pose"],
                   rectified_guidance=cfg["train.rectified_guidance"],
                   dropout_p=cfg["wfm.dropout_p"], seed=cfg["train.seed"],
                   log_every=cfg["train.log_every"])


def train_clip_count(n_clips: int, holdout_frac: float) -> int:
    """Number of leading clips available for training; the rest are held out."""
    return max(1, n_clips - math.ceil(n_clips * holdout_frac))


def window_ema(values, decay: float = 0.98) -> float:
    """EMA over just the given values; used for first/last-window comparisons."""
    acc = float(values[0])
    for v in values[1:]:
        acc = decay * acc + (1.0 - decay) * float(v)
    return acc


def condition_dropout_mask(batch: int, p: float, gen=None) -> torch.Tensor:
    """Per-clip keep mask for conditioning dropout; False with probability p."""
    return torch.rand(batch, generator=gen) >= p


def _write_log(path: Path, header, rows) -> None:
    lines = [",".join(header)]
    lines += [",".join(repr(v) if isinstance(v, float) else str(v) for v in row)
              for row in rows]
    path.write_text("\n".join(lines) + "\n")


def param_hash(*modules: torch.nn.Module) -> str:
    """sha256 over sorted (name, raw bytes) of every parameter and buffer."""
    h = hashlib.sha256()
    entries = []
    for i, module in enumerate(modules):
        for name, tensor in module.state_dict().items():
            entries.append((f"{i}.{name}", tensor))
    for name, tensor in sorted(entries):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _load_module(module: torch.nn.Module, arrays: dict, what: str) -> torch.nn.Module:
    try:
        module.load_state_dict({k: torch.as_tensor(v) for k, v in arrays.items()})
    except RuntimeError as exc:
        raise CheckpointError(f"{what} weights do not fit the configured model: "
                              f"{exc}") from exc
    return module.eval()


def _as_weights(source, expect_prefix: str | None = None) -> dict:
    """Accept a checkpoint path or an in-memory dict of arrays."""
    if isinstance(source, dict):
        arrays = source
    else:
        path = Path(source)
        if not path.is_file():
            raise InvalidStateError(f"checkpoint not found: {path}")
        arrays = load_checkpoint(path)
    if expect_prefix and arrays:
        stripped = split_prefix(arrays, expect_prefix + ".")
        if stripped:
            return stripped
    return arrays


# ---------------------------------------------------------------------------
# training stages


def train_motion(dataset, cfg: Config, out_dir=None):
    """Stage 1; returns (weights, log rows).  Writes motion.ckpt and
    train_motion_log.csv when out_dir is given."""
    data = dataset if isinstance(dataset, ClipDataset) else ClipDataset(dataset)
    tc = TrainConfig.from_config(cfg, "motion")
    limit = train_clip_count(len(data), cfg["data.holdout_frac"])
    weights, log = pretrain_motion_extractor(
        data, ExtractorConfig.from_config(cfg), tc.seed, steps=tc.steps,
        batch_size=tc.batch_size, lr=tc.lr, lambda_pose=tc.lambda_pose,
        log_every=tc.log_every, clip_limit=limit)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(add_prefix(weights, "motion."), out / "motion.ckpt")
        _write_log(out / "train_motion_log.csv",
                   ("step", "loss_recon", "loss_equiv", "loss_pose"), log)
    return weights, log


def _state_arrays(module: torch.nn.Module) -> dict:
    return {name: tensor.detach().cpu().numpy()
            for name, tensor in module.state_dict().items()}


def _sample_batch(data: ClipDataset, limit: int, m: int, batch: int,
                  gen: torch.Generator):
    """Pick clips, consecutive driving windows, and a source frame per clip.

    Draw order per step is fixed: clip indices, window starts, source indices.
    Returns (driving (B, m, H, W, 3) float tensor, source (B, H, W, 3)).
    """
    total = data.frames_per_clip
    if m > total:
        raise DataError(f"clip_len {m} exceeds dataset clip length {total}")
    ci = torch.randint(limit, (batch,), generator=gen)
    starts = torch.randint(total - m + 1, (batch,), generator=gen)
    src_idx = torch.randint(total, (batch,), generator=gen)
    drv, src = [], []
    for c, s, k in zip(ci.tolist(), starts.tolist(), src_idx.tolist()):
        frames = data.clip_frames(c)
        drv.append(torch.from_numpy(frames[s:s + m].copy()))
        src.append(torch.from_numpy(frames[k]))
    return torch.stack(drv), torch.stack(src)


def pretrain_i2v(dataset, cfg: Config, out_dir=None):
    """Stage 2: unconditional eps-prediction with source-frame concatenation.

    Returns (weights, log rows of (step, loss)); writes backbone.ckpt and
    train_i2v_log.csv when out_dir is given.
    """
    data = dataset if isinstance(dataset, ClipDataset) else ClipDataset(dataset)
    tc = TrainConfig.from_config(cfg, "i2v")
    limit = train_clip_count(len(data), cfg["data.holdout_frac"])
    bcfg = BackboneConfig.from_config(cfg)
    codec = PixelCodec(cfg["diffusion.latent_downscale"])
    schedule = build_schedule(cfg["diffusion.T"], cfg["diffusion.beta_start"],
                              cfg["diffusion.beta_end"])

    torch.manual_seed(tc.seed)
    model = Backbone(bcfg)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    gen = torch.Generator().manual_seed(tc.seed + 1)

    log = []
    for step in range(tc.steps):
        drv, src = _sample_batch(data, limit, tc.clip_len, tc.batch_size, gen)
        z_0 = codec.encode(drv.permute(0, 1, 4, 2, 3))
        src_lat = codec.encode(src.permute(0, 3, 1, 2))
        # Teacher-forced content: half the clips see their own target latents,
        # degraded to roughly what a warped source can deliver, through the
        # backbone's content taps.  Conditioning features are bounded at half
        # the latent resolution, so the teacher view is pooled to that grid
        # first; noise is added there as well.  The other half of the batch
        # carries zero rows (taps silent), which is also the inference-time
        # default, so the model learns both to run without site content and
        # to weight it properly when a conditioning stage later provides some.
        forced = torch.rand(tc.batch_size, generator=gen) < _TEACHER_P
        flat = z_0.reshape(-1, *z_0.shape[2:])
        pooled = torch.nn.functional.avg_pool2d(flat, 2)
        pooled = pooled + _TEACHER_SIGMA * torch.randn(pooled.shape, generator=gen)
        rough = torch.nn.functional.interpolate(pooled, scale_factor=2,
                                                mode="nearest").reshape(z_0.shape)
        content = rough * forced[:, None, None, None, None].to(z_0.dtype)
        loss = training_loss(model, z_0, src_lat, None, schedule, generator=gen,
                             content=content)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % tc.log_every == 0 or step == tc.steps - 1:
            log.append((step, loss.item()))

    weights = _state_arrays(model)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(add_prefix(weights, "backbone."), out / "backbone.ckpt")
        _write_log(out / "train_i2v_log.csv", ("step", "loss"), log)
    return weights, log


def train_wfm(dataset, cfg: Config, extractor_ckpt, backbone_ckpt, out_dir=None):
    """Stage 3: train the mapper against a frozen extractor and backbone.

    Returns (weights, log rows of (step, loss), info dict with the freeze
    hashes); writes wfm.ckpt and train_wfm_log.csv when out_dir is given.
    """
    data = dataset if isinstance(dataset, ClipDataset) else ClipDataset(dataset)
    tc = TrainConfig.from_config(cfg, "wfm")
    limit = train_clip_count(len(data), cfg["data.holdout_frac"])
    ecfg = ExtractorConfig.from_config(cfg)
    bcfg = BackboneConfig.from_config(cfg)
    codec = PixelCodec(cfg["diffusion.latent_downscale"])
    schedule = build_schedule(cfg["diffusion.T"], cfg["diffusion.beta_start"],
                              cfg["diffusion.beta_end"])

    extractor, dm_net = build_from_weights(_as_weights(extractor_ckpt, "motion"), ecfg)
    backbone = _load_module(Backbone(bcfg), _as_weights(backbone_ckpt, "backbone"),
                            "backbone")
    for module in (extractor, dm_net, backbone):
        module.requires_grad_(False)
    hash_before = param_hash(extractor, dm_net, backbone)

    torch.manual_seed(tc.seed)
    wcfg = WfmConfig.for_backbone(
        bcfg.scale_shapes(), bcfg.eps_shape(), in_channels=ecfg.feat_channels,
        in_size=ecfg.feat_size, zero_init=cfg["wfm.zero_init"],
        dropout_p=tc.dropout_p)
    if wcfg.num_scales != cfg["wfm.num_scales"]:
        raise ShapeMismatchError(
            f"backbone provides {wcfg.num_scales} scales, config asks for "
            f"{cfg['wfm.num_scales']}")
    wfm = WarpFeatureMapper(wcfg)
    opt = torch.optim.Adam(wfm.parameters(), lr=tc.lr)
    gen = torch.Generator().manual_seed(tc.seed + 1)

    b, m = tc.batch_size, tc.clip_len
    log = []
    for step in range(tc.steps):
        drv, src = _sample_batch(data, limit, m, b, gen)
        keep = condition_dropout_mask(b, tc.dropout_p, gen).float()

        drv_img = drv.permute(0, 1, 4, 2, 3)
        src_img = src.permute(0, 3, 1, 2)
        with torch.no_grad():
            flat = torch.cat([src_img, drv_img.reshape(b * m, *drv_img.shape[2:])])
            x_all = extractor.motion_batch(flat)[0]
            x_s, x_d = x_all[:b], x_all[b:]
            feats = extractor.appearance_batch(src_img)
            x_s_rep = x_s[:, None].expand(b, m, *x_s.shape[1:]).reshape(b * m, -1, 3)
            feats_rep = feats[:, None].expand(b, m, *feats.shape[1:])
            feats_rep = feats_rep.reshape(b * m, *feats.shape[1:])
            warped = warp_features_batch(x_s_rep, x_d, feats_rep, dm_net,
                                         ecfg.sigma_heatmap)

        bundle = wfm.build_conditioning(warped, include_r=tc.rectified_guidance)
        injections = tuple(
            inj.reshape(b, m, *inj.shape[1:]) * keep[:, None, None, None, None]
            for inj in bundle.injections)
        r = bundle.r.reshape(b, m, *bundle.r.shape[1:]) * keep[:, None, None, None, None]
        bundle = ConditioningBundle(injections=injections, r=r)

        z_0 = codec.encode(drv_img)
        src_lat = codec.encode(src_img)
        loss = training_loss(backbone, z_0, src_lat, bundle, schedule, generator=gen)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % tc.log_every == 0 or step == tc.steps - 1:
            log.append((step, loss.item()))

    hash_after = param_hash(extractor, dm_net, backbone)
    if hash_after != hash_before:
        raise InvalidStateError("frozen weights changed during WFM training")
    info = {"frozen_hash_before": hash_before, "frozen_hash_after": hash_after}

    weights = _state_arrays(wfm)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(add_prefix(weights, "wfm."), out / "wfm.ckpt")
        _write_log(out / "train_wfm_log.csv", ("step", "loss"), log)
    return weights, log, info


# ---------------------------------------------------------------------------
# windows


@dataclass(frozen=True)
class WindowPlan:
    length: int
    overlap: int
    m_total: int
    starts: tuple
    # per frame: ((window index, weight), ...) over its contributing windows
    weights: tuple

    @property
    def effective_length(self) -> int:
        return min(self.length, self.m_total)


def plan_windows(m_total: int, length: int = 14, overlap: int = 6) -> WindowPlan:
    """Stride length-overlap, final window end-aligned; short videos get one
    truncated window.  At frames covered by several windows, the last two
    covering windows cross-fade linearly; earlier ones get weight 0."""
    if m_total < 1:
        raise ValueError(f"m_total must be >= 1, got {m_total}")
    if not 0 <= overlap < length:
        raise ValueError(f"need 0 <= overlap < length, got ({overlap}, {length})")
    if m_total <= length:
        starts = (0,)
        weights = tuple(((0, 1.0),) for _ in range(m_total))
        return WindowPlan(length=min(length, m_total), overlap=overlap,
                          m_total=m_total, starts=starts, weights=weights)

    stride = length - overlap
    starts = list(range(0, m_total - length + 1, stride))
    if starts[-1] != m_total - length:
        starts.append(m_total - length)

    weights = []
    for f in range(m_total):
        covering = [i for i, s in enumerate(starts) if s <= f < s + length]
        if len(covering) == 1:
            weights.append(((covering[0], 1.0),))
            continue
        a, bwin = covering[-2], covering[-1]
        ov_start = starts[bwin]
        ov_len = starts[a] + length - ov_start
        wb = (f - ov_start + 1) / (ov_len + 1)
        weights.append(((a, 1.0 - wb), (bwin, wb)))
    return WindowPlan(length=length, overlap=overlap, m_total=m_total,
                      starts=tuple(starts), weights=tuple(weights))


def blend_windows(window_outputs, plan: WindowPlan) -> torch.Tensor:
    """Per-frame weighted combination of window outputs.

    Two-window frames use the lerp form a + w_b (b - a), so identical
    overlapping content passes through bit-exactly.
    """
    if len(window_outputs) != len(plan.starts):
        raise ShapeMismatchError(f"{len(window_outputs)} outputs for "
                                 f"{len(plan.starts)} planned windows")
    want = plan.effective_length
    for i, out in enumerate(window_outputs):
        if out.shape[0] != want:
            raise ShapeMismatchError(
                f"window {i} has {out.shape[0]} frames, plan says {want}")
    frames = []
    for f in range(plan.m_total):
        entries = plan.weights[f]
        if len(entries) == 1:
            idx, _ = entries[0]
            frames.append(window_outputs[idx][f - plan.starts[idx]])
        else:
            (ia, _), (ib, wb) = entries
            fa = window_outputs[ia][f - plan.starts[ia]]
            fb = window_outputs[ib][f - plan.starts[ib]]
            frames.append(fa + wb * (fb - fa))
    return torch.stack(frames)


# ---------------------------------------------------------------------------
# inference


@dataclass
class PipelineModels:
    extractor: MotionExtractor
    dm_net: DenseMotionNet
    backbone: Backbone
    wfm: WarpFeatureMapper | None
    codec: PixelCodec
    ids: dict = field(default_factory=dict)   # checkpoint identifiers (hashes)


def load_models(cfg: Config, ckpt_dir, require_wfm: bool = True) -> PipelineModels:
    """Load motion.ckpt, backbone.ckpt, and (optionally) wfm.ckpt from a
    directory written by the training subcommands."""
    ckpt_dir = Path(ckpt_dir)
    ecfg = ExtractorConfig.from_config(cfg)
    bcfg = BackboneConfig.from_config(cfg)
    extractor, dm_net = build_from_weights(
        _as_weights(ckpt_dir / "motion.ckpt", "motion"), ecfg)
    extractor.eval()
    dm_net.eval()
    backbone = _load_module(Backbone(bcfg),
                            _as_weights(ckpt_dir / "backbone.ckpt", "backbone"),
                            "backbone")
    wfm = None
    wfm_path = ckpt_dir / "wfm.ckpt"
    if require_wfm or wfm_path.is_file():
        wcfg = WfmConfig.for_backbone(
            bcfg.scale_shapes(), bcfg.eps_shape(), in_channels=ecfg.feat_channels,
            in_size=ecfg.feat_size, zero_init=cfg["wfm.zero_init"],
            dropout_p=cfg["wfm.dropout_p"])
        wfm = _load_module(WarpFeatureMapper(wcfg), _as_weights(wfm_path, "wfm"), "wfm")
    ids = {"motion": param_hash(extractor, dm_net),
           "backbone": param_hash(backbone),
           "wfm": param_hash(wfm) if wfm is not None else None}
    return PipelineModels(extractor=extractor, dm_net=dm_net, backbone=backbone,
                          wfm=wfm, codec=PixelCodec(cfg["diffusion.latent_downscale"]),
                          ids=ids)


@dataclass
class RunManifest:
    mode: str
    seed: int
    w: float
    steps: int
    window_length: int
    window_overlap: int
    config: dict
    checkpoints: dict
    frame_paths: list = field(default_factory=list)
    metrics: dict | None = None

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _frames_to_tensor(frames) -> torch.Tensor:
    if torch.is_tensor(frames):
        t = frames.float()
    else:
        t = torch.as_tensor(np.asarray(frames), dtype=torch.float32)
    if t.ndim != 4 or t.shape[-1] != 3:
        raise ShapeMismatchError(f"expected (m, H, W, 3) frames, got {tuple(t.shape)}")
    return t


def _reenact(models: PipelineModels, cfg: Config, source_np, target_kps,
             mode: str, *, w: float | None = None, steps: int | None = None,
             seed: int = 0, use_wfm: bool = True, use_r: bool = True,
             length: int | None = None, overlap: int | None = None):
    """Shared sampling core: warp source features toward per-frame keypoints,
    build per-window conditioning, DDIM-sample, cross-fade, decode."""
    w = cfg["diffusion.w"] if w is None else w
    steps = cfg["diffusion.steps"] if steps is None else steps
    length = cfg["window.length"] if length is None else length
    overlap = cfg["window.overlap"] if overlap is None else overlap
    schedule = build_schedule(cfg["diffusion.T"], cfg["diffusion.beta_start"],
                              cfg["diffusion.beta_end"])
    plan_ts = make_plan(cfg["diffusion.T"], steps)

    extractor, dm_net, wfm = models.extractor, models.dm_net, models.wfm
    if use_wfm and wfm is None:
        raise InvalidStateError("reenactment with WFM requires a wfm checkpoint")
    ecfg = extractor.cfg

    src_img = torch.from_numpy(np.ascontiguousarray(source_np, dtype=np.float32))
    src_chw = src_img.permute(2, 0, 1)
    with torch.no_grad():
        x_s = extractor.extract_motion(src_img).x
        feats = extractor.extract_appearance(src_img)
        m_total = len(target_kps)
        if use_wfm:
            x_d = torch.stack(list(target_kps))
            x_s_rep = x_s[None].expand(m_total, *x_s.shape)
            feats_rep = feats[None].expand(m_total, *feats.shape)
            warped = warp_features_batch(x_s_rep, x_d, feats_rep, dm_net,
                                         ecfg.sigma_heatmap)

        src_lat = models.codec.encode(src_chw)
        wplan = plan_windows(m_total, length, overlap)
        eff_len = min(length, m_total)
        gen = torch.Generator().manual_seed(seed)
        noise = torch.randn(m_total, *models.backbone.cfg.eps_shape(), generator=gen)

        outputs = []
        for start in wplan.starts:
            z_init = noise[start:start + eff_len]
            if use_wfm:
                bundle = wfm.build_conditioning(warped[start:start + eff_len])
                if not use_r:
                    bundle = ConditioningBundle(injections=bundle.injections,
                                                r=torch.zeros_like(bundle.r))
            else:
                bundle = None
            outputs.append(sample_clip(models.backbone, src_lat, bundle, plan_ts,
                                       w, schedule, z_init=z_init,
                                       frames=eff_len))
        latents = blend_windows(outputs, wplan)
        frames = models.codec.decode(latents).permute(0, 2, 3, 1).numpy()

    manifest = RunManifest(mode=mode, seed=seed, w=w, steps=steps,
                           window_length=length, window_overlap=overlap,
                           config=cfg.snapshot(), checkpoints=dict(models.ids))
    return frames, manifest


def self_reenact(video, models: PipelineModels, cfg: Config, **kw):
    """Drive a video's own first frame; returns (frames, manifest)."""
    frames = _frames_to_tensor(video)
    with torch.no_grad():
        kps = [models.extractor.extract_motion(f).x for f in frames]
    return _reenact(models, cfg, frames[0].numpy(), kps, "self", **kw)


def cross_reenact(source_image, driving_video, models: PipelineModels,
                  cfg: Config, **kw):
    """Animate a source identity with another video's motion via alignment."""
    source_np = np.asarray(source_image, dtype=np.float32)
    frames = _frames_to_tensor(driving_video)
    with torch.no_grad():
        src_desc = models.extractor.extract_motion(torch.from_numpy(source_np))
        drv_params = [models.extractor.extract_motion(f).params for f in frames]
        aligned = align_motion(src_desc.params, drv_params)
        kps = [compose_keypoints(src_desc.x_c, p) for p in aligned]
    return _reenact(models, cfg, source_np, kps, "cross", **kw)


def save_video_frames(frames: np.ndarray, out_dir) -> list:
    """Write frame_%05d.png files; returns the path list."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = out / f"frame_{i:05d}.png"
        save_frame_png(np.clip(frame, 0.0, 1.0), p)
        paths.append(str(p))
    return paths
