"""Desk-scale face reenactment with keypoint warping and video diffusion."""

from .config import Config, load_config
from .diffusion import (Backbone, BackboneConfig, DdimPlan, NoiseSchedule,
                        PixelCodec, add_noise, build_schedule, cfg_epsilon,
                        ddim_step, make_plan, sample_clip, training_loss)
from .errors import (CheckpointError, DataError, InvalidStateError,
                     ShapeMismatchError)
from .evalkit import MetricRow, metric_l1, metric_psnr, metric_ssim, write_report
from .motion_extractor import (ExtractorConfig, MotionDescriptor, MotionExtractor,
                               pretrain_motion_extractor)
from .motion_repr import (MotionParams, align_motion, compose_keypoints,
                          project_2d, rotation_from_angles)
from .pipeline import (PipelineModels, RunManifest, TrainConfig, WindowPlan,
                       blend_windows, cross_reenact, load_models, plan_windows,
                       pretrain_i2v, save_video_frames, self_reenact,
                       train_clip_count, train_motion, train_wfm, window_ema)
from .synthdata import ClipDataset, make_dataset, render_frame
from .warping import (DenseMotionNet, FlowField, bilinear_sample, combine_flows,
                      compute_flow, gaussian_heatmap, warp_features)
from .wfm import ConditioningBundle, WarpFeatureMapper, WfmConfig, fuse

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "CheckpointError", "ClipDataset", "Config",
    "ConditioningBundle", "DataError", "DdimPlan", "DenseMotionNet",
    "ExtractorConfig", "FlowField", "InvalidStateError",
    "MetricRow", "MotionDescriptor", "MotionExtractor", "MotionParams",
    "NoiseSchedule", "PipelineModels", "PixelCodec", "RunManifest",
    "ShapeMismatchError", "TrainConfig", "WarpFeatureMapper", "WfmConfig",
    "WindowPlan", "add_noise", "align_motion", "bilinear_sample",
    "blend_windows", "build_schedule", "cfg_epsilon", "combine_flows",
    "compose_keypoints", "compute_flow", "cross_reenact", "ddim_step", "fuse",
    "gaussian_heatmap", "load_config", "load_models", "make_dataset",
    "make_plan", "plan_windows", "pretrain_i2v", "pretrain_motion_extractor",
    "project_2d", "render_frame", "rotation_from_angles", "sample_clip",
    "save_video_frames", "self_reenact", "train_clip_count", "train_motion",
    "train_wfm", "training_loss", "warp_features", "window_ema",
    "metric_l1", "metric_psnr", "metric_ssim", "write_report",
    "__version__",
]
