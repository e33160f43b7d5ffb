"""Facial motion geometry: rotations, keypoint composition, motion alignment.

All functions are pure and operate on torch tensors (dtype follows the
input), so the same code path serves float64 verification and float32
training.  Keypoints live in normalized coordinates, roughly [-1, 1] per
axis.  Posed keypoints are

    x = R @ x_c + t + delta

and cross-identity alignment re-bases driving motion relative to its first
frame onto the source:

    R_i' = R_d_i @ R_d_1^T @ R_s
    t_i' = t_s + (t_d_i - t_d_1)
    d_i' = d_s + (d_d_i - d_d_1)

The Euler convention is intrinsic z-y-x: R = Rz(roll) @ Ry(yaw) @ Rx(pitch),
right-handed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import Tensor

from .errors import ShapeMismatchError


def _as_tensor(value, dtype=torch.float64) -> Tensor:
    """Tensors keep their float dtype; plain numbers/lists become float64."""
    if isinstance(value, Tensor):
        return value if value.is_floating_point() else value.to(dtype)
    return torch.tensor(value, dtype=dtype)


@dataclass(frozen=True)
class EulerPose:
    """Head pose: yaw/pitch/roll in radians plus a 3-vector translation."""

    yaw: Tensor
    pitch: Tensor
    roll: Tensor
    t: Tensor

    def __post_init__(self):
        object.__setattr__(self, "yaw", _as_tensor(self.yaw))
        object.__setattr__(self, "pitch", _as_tensor(self.pitch))
        object.__setattr__(self, "roll", _as_tensor(self.roll))
        object.__setattr__(self, "t", _as_tensor(self.t).reshape(3))
        for name in ("yaw", "pitch", "roll", "t"):
            v = getattr(self, name)
            if not torch.isfinite(v).all():
                raise ValueError(f"EulerPose.{name} is not finite")


@dataclass(frozen=True)
class MotionParams:
    """(R, t, delta) triple applied to canonical keypoints."""

    R: Tensor       # (3, 3)
    t: Tensor       # (3,)
    delta: Tensor   # (K, 3)

    def __post_init__(self):
        if tuple(self.R.shape) != (3, 3):
            raise ShapeMismatchError(f"R must be 3x3, got {tuple(self.R.shape)}")
        if tuple(self.t.shape) != (3,):
            raise ShapeMismatchError(f"t must be a 3-vector, got {tuple(self.t.shape)}")
        if self.delta.ndim != 2 or self.delta.shape[1] != 3:
            raise ShapeMismatchError(f"delta must be Kx3, got {tuple(self.delta.shape)}")


def rotation_x(angle: Tensor) -> Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    zero, one = torch.zeros_like(c), torch.ones_like(c)
    return torch.stack(
        [torch.stack([one, zero, zero], -1),
         torch.stack([zero, c, -s], -1),
         torch.stack([zero, s, c], -1)], -2)


def rotation_y(angle: Tensor) -> Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    zero, one = torch.zeros_like(c), torch.ones_like(c)
    return torch.stack(
        [torch.stack([c, zero, s], -1),
         torch.stack([zero, one, zero], -1),
         torch.stack([-s, zero, c], -1)], -2)


def rotation_z(angle: Tensor) -> Tensor:
    c, s = torch.cos(angle), torch.sin(angle)
    zero, one = torch.zeros_like(c), torch.ones_like(c)
    return torch.stack(
        [torch.stack([c, -s, zero], -1),
         torch.stack([s, c, zero], -1),
         torch.stack([zero, zero, one], -1)], -2)


def rotation_from_angles(yaw: Tensor, pitch: Tensor, roll: Tensor) -> Tensor:
    """Batched Rz(roll) @ Ry(yaw) @ Rx(pitch); supports leading batch dims."""
    return rotation_z(roll) @ rotation_y(yaw) @ rotation_x(pitch)


def euler_to_rotation(pose: EulerPose) -> Tensor:
    """3x3 rotation for a pose; orthonormal with det +1 by construction."""
    for name in ("yaw", "pitch", "roll"):
        if not torch.isfinite(getattr(pose, name)).all():
            raise ValueError(f"non-finite {name}")
    return rotation_from_angles(pose.yaw, pose.pitch, pose.roll)


def compose_keypoints(x_c: Tensor, m: MotionParams) -> Tensor:
    """Posed keypoints: row k = R @ x_c[k] + t + delta[k]."""
    if x_c.ndim != 2 or x_c.shape[1] != 3:
        raise ShapeMismatchError(f"x_c must be Kx3, got {tuple(x_c.shape)}")
    if m.delta.shape[0] != x_c.shape[0]:
        raise ShapeMismatchError(
            f"keypoint count mismatch: x_c has {x_c.shape[0]}, delta has {m.delta.shape[0]}")
    return x_c @ m.R.mT + m.t + m.delta


def align_motion(source: MotionParams, driving: Sequence[MotionParams]) -> list[MotionParams]:
    """Re-base driving motion (frame 1 as reference) onto the source pose.

    Element 0 of the result is the source params object itself - no
    arithmetic is applied to the reference frame.
    """
    if len(driving) == 0:
        raise ValueError("driving sequence is empty")
    ref = driving[0]
    aligned = [source]
    for drv in driving[1:]:
        aligned.append(MotionParams(
            R=drv.R @ ref.R.mT @ source.R,
            t=source.t + (drv.t - ref.t),
            delta=source.delta + (drv.delta - ref.delta),
        ))
    return aligned


def project_2d(x: Tensor) -> Tensor:
    """Orthographic projection: keep (x, y), drop z."""
    if x.ndim < 1 or x.shape[-1] != 3:
        raise ShapeMismatchError(f"expected trailing dim 3, got {tuple(x.shape)}")
    return x[..., :2]
