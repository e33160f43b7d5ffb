"""Procedural avatar clips with exact ground-truth pose labels.

Each frame is rendered analytically (antialiased ellipse coverage composited
over a textured background), so rendering is a pure function of the
parameters and every label is exact by construction.  Pose is encoded
monotonically: yaw squashes the head horizontally and shifts the features
sideways, pitch does the same vertically, roll rotates in-plane about the
head center.  Backgrounds are symmetrized under 180-degree rotation so
in-plane rotation of the head about the image center commutes with rotating
the rendered frame.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

YAW_MAX = 1.2
PITCH_MAX = 1.2
ROLL_MAX = math.pi
TRANSLATION_MAX = 0.35

PARAM_COLUMNS = ("frame", "yaw", "pitch", "roll", "tx", "ty", "mouth_open", "eye_open")


@dataclass(frozen=True)
class AvatarParams:
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    mouth_open: float = 0.5
    eye_open: float = 1.0
    identity_seed: int = 0

    def validate(self) -> None:
        checks = [
            ("yaw", abs(self.yaw) <= YAW_MAX),
            ("pitch", abs(self.pitch) <= PITCH_MAX),
            ("roll", abs(self.roll) <= ROLL_MAX),
            ("tx", abs(self.tx) <= TRANSLATION_MAX),
            ("ty", abs(self.ty) <= TRANSLATION_MAX),
            ("mouth_open", 0.0 <= self.mouth_open <= 1.0),
            ("eye_open", 0.0 <= self.eye_open <= 1.0),
        ]
        bad = [name for name, ok in checks if not (ok and math.isfinite(getattr(self, name, 0.0)))]
        if bad:
            raise ValueError(f"avatar params out of range: {', '.join(bad)}")


@dataclass(frozen=True)
class ClipSpec:
    params: list  # per-frame AvatarParams, same identity_seed throughout
    background_seed: int = 0

    def __post_init__(self):
        if len(self.params) < 1:
            raise ValueError("clip needs at least one frame")
        seeds = {p.identity_seed for p in self.params}
        if len(seeds) != 1:
            raise ValueError("identity_seed must be constant across a clip")


@dataclass(frozen=True)
class _Identity:
    skin: np.ndarray
    hair: np.ndarray
    iris: np.ndarray
    lip: np.ndarray
    head_r: float
    aspect: float
    eye_dx: float
    eye_y: float
    eye_r: float
    iris_frac: float
    mouth_y: float
    mouth_w: float
    hair_v: float
    nose_r: float


def _identity_attrs(identity_seed: int) -> _Identity:
    rng = np.random.default_rng(identity_seed)
    skin = rng.uniform([0.55, 0.4, 0.3], [0.95, 0.8, 0.7])
    hair = rng.uniform([0.05, 0.02, 0.0], [0.6, 0.45, 0.35])
    iris = rng.uniform([0.05, 0.15, 0.25], [0.35, 0.55, 0.8])
    lip = rng.uniform([0.5, 0.1, 0.1], [0.8, 0.35, 0.35])
    return _Identity(
        skin=skin, hair=hair, iris=iris, lip=lip,
        head_r=float(rng.uniform(0.5, 0.6)),
        aspect=float(rng.uniform(0.76, 0.92)),
        eye_dx=float(rng.uniform(0.34, 0.44)),
        eye_y=float(rng.uniform(-0.32, -0.2)),
        eye_r=float(rng.uniform(0.1, 0.14)),
        iris_frac=float(rng.uniform(0.45, 0.62)),
        mouth_y=float(rng.uniform(0.4, 0.52)),
        mouth_w=float(rng.uniform(0.24, 0.34)),
        hair_v=float(rng.uniform(-0.75, -0.55)),
        nose_r=float(rng.uniform(0.05, 0.08)),
    )


def _background(background_seed: int, size: int) -> np.ndarray:
    rng = np.random.default_rng(background_seed)
    base = rng.uniform(0.3, 0.7, size=3)
    cells = rng.uniform(-1.0, 1.0, size=(5, 5, 3))
    # smooth bilinear upsample of the 5x5 noise grid onto pixel centers
    pos = np.linspace(0.0, 4.0, size)
    i0 = np.clip(np.floor(pos).astype(int), 0, 3)
    frac = pos - i0
    rows = cells[i0] * (1 - frac)[:, None, None] + cells[i0 + 1] * frac[:, None, None]
    tex = (rows[:, i0] * (1 - frac)[None, :, None]
           + rows[:, i0 + 1] * frac[None, :, None])
    bg = np.clip(base + 0.18 * tex, 0.0, 1.0)
    return 0.5 * (bg + bg[::-1, ::-1])  # 180-degree rotational symmetry


def _coverage(dist: np.ndarray, aa: float) -> np.ndarray:
    """Antialiased inside-coverage of a signed distance field."""
    return np.clip(0.5 - dist / aa, 0.0, 1.0)


def _ellipse_dist(lx, ly, cx, cy, ax, ay):
    """Approximate signed distance to an ellipse (negative inside)."""
    q = np.sqrt(((lx - cx) / ax) ** 2 + ((ly - cy) / ay) ** 2)
    return (q - 1.0) * min(ax, ay)


def _over(img: np.ndarray, cov: np.ndarray, color: np.ndarray) -> np.ndarray:
    return img * (1.0 - cov[..., None]) + color * cov[..., None]


def _face_layout(p: AvatarParams, ident: _Identity):
    """Head-frame geometry shared by the renderer and the mouth-region helper."""
    rx = ident.head_r * ident.aspect * (0.62 + 0.38 * math.cos(p.yaw))
    ry = ident.head_r * (0.62 + 0.38 * math.cos(p.pitch))
    off_u = 0.55 * math.sin(p.yaw)
    off_v = 0.55 * math.sin(p.pitch)
    return rx, ry, off_u, off_v


def render_frame(p: AvatarParams, size: int = 64, background_seed: int | None = None) -> np.ndarray:
    """Render one avatar frame as a float32 (size, size, 3) image in [0, 1]."""
    p.validate()
    if background_seed is None:
        background_seed = p.identity_seed
    ident = _identity_attrs(p.identity_seed)
    img = _background(background_seed, size)

    ax = np.linspace(-1.0, 1.0, size)
    X, Y = np.meshgrid(ax, ax)          # X: columns, Y: rows (down-positive)
    cr, sr = math.cos(p.roll), math.sin(p.roll)
    dx, dy = X - p.tx, Y - p.ty
    lx = cr * dx + sr * dy              # head-local frame (inverse roll)
    ly = -sr * dx + cr * dy

    aa = 3.0 / size
    rx, ry, off_u, off_v = _face_layout(p, ident)

    head_dist = _ellipse_dist(lx, ly, 0.0, 0.0, rx, ry)
    head_cov = _coverage(head_dist, aa)
    img = _over(img, head_cov, ident.skin)

    # hair cap: upper part of the head ellipse
    hair_cov = head_cov * _coverage(ly / ry - ident.hair_v, aa / ry)
    img = _over(img, hair_cov, ident.hair)

    eye_h = ident.eye_r * (0.18 + 0.82 * p.eye_open)
    for side in (-1.0, 1.0):
        ex = (side * ident.eye_dx + off_u) * rx
        ey = (ident.eye_y + off_v) * ry
        eye_cov = head_cov * _coverage(_ellipse_dist(lx, ly, ex, ey, ident.eye_r * rx, eye_h * ry), aa)
        img = _over(img, eye_cov, np.array([0.97, 0.97, 0.97]))
        iris_cov = eye_cov * _coverage(
            _ellipse_dist(lx, ly, ex, ey, ident.iris_frac * ident.eye_r * rx,
                          ident.iris_frac * eye_h * ry), aa)
        img = _over(img, iris_cov, ident.iris)

    nose_cov = head_cov * _coverage(
        _ellipse_dist(lx, ly, 0.9 * off_u * rx, (0.1 + 0.9 * off_v) * ry,
                      ident.nose_r * rx, ident.nose_r * ry), aa)
    img = _over(img, nose_cov, ident.skin * 0.82)

    mx = 0.7 * off_u * rx
    my = (ident.mouth_y + 0.7 * off_v) * ry
    lip_cov = head_cov * _coverage(
        _ellipse_dist(lx, ly, mx, my, ident.mouth_w * rx, 0.045 * ry), aa)
    img = _over(img, lip_cov, ident.lip)
    open_h = 0.16 * p.mouth_open
    if open_h > 0.0:
        open_cov = head_cov * _coverage(
            _ellipse_dist(lx, ly, mx, my, 0.8 * ident.mouth_w * rx, open_h * ry), aa)
        img = _over(img, open_cov, np.array([0.12, 0.05, 0.05]))

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def mouth_region(p: AvatarParams, size: int) -> tuple[int, int, int, int]:
    """Conservative pixel AABB (r0, r1, c0, c1) containing the mouth at any opening."""
    ident = _identity_attrs(p.identity_seed)
    rx, ry, off_u, off_v = _face_layout(p, ident)
    mx = 0.7 * off_u * rx
    my = (ident.mouth_y + 0.7 * off_v) * ry
    half_w = ident.mouth_w * rx
    half_h = max(0.045, 0.16) * ry
    cr, sr = math.cos(p.roll), math.sin(p.roll)
    # rotate the box corners back to image coordinates
    ext_x = abs(cr) * half_w + abs(sr) * half_h
    ext_y = abs(sr) * half_w + abs(cr) * half_h
    cx = p.tx + cr * mx - sr * my
    cy = p.ty + sr * mx + cr * my
    margin = 5.0 / size
    to_px = lambda v: (v + 1.0) * (size - 1) / 2.0
    c0 = int(np.floor(to_px(cx - ext_x - margin)))
    c1 = int(np.ceil(to_px(cx + ext_x + margin)))
    r0 = int(np.floor(to_px(cy - ext_y - margin)))
    r1 = int(np.ceil(to_px(cy + ext_y + margin)))
    return max(r0, 0), min(r1, size - 1), max(c0, 0), min(c1, size - 1)


def generate_clip(spec: ClipSpec, size: int = 64) -> tuple[np.ndarray, list]:
    """Render a clip; returns (frames (m, H, W, 3) float32, params list)."""
    frames = np.stack([render_frame(p, size, spec.background_seed) for p in spec.params])
    return frames, list(spec.params)


def _drift(rng: np.random.Generator, lo: float, hi: float) -> float:
    """Per-frame velocity with a floor, so every clip actually moves."""
    return float(rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi))


def random_trajectory(rng: np.random.Generator, m: int, identity_seed: int) -> list:
    """Smooth per-clip trajectory: constant drift plus small jitter, clipped to range."""
    yaw0 = rng.uniform(-0.42, 0.42)
    pitch0 = rng.uniform(-0.5, 0.5)
    roll0 = rng.uniform(-0.28, 0.28)
    tx0, ty0 = rng.uniform(-0.18, 0.18, size=2)
    mouth0 = rng.uniform(0.15, 0.85)
    eye0 = rng.uniform(0.4, 1.0)
    v_yaw = _drift(rng, 0.05, 0.11)
    v_pitch = _drift(rng, 0.03, 0.07)
    v_roll = _drift(rng, 0.02, 0.045)
    v_tx = _drift(rng, 0.008, 0.022)
    v_ty = _drift(rng, 0.008, 0.022)
    v_mouth = _drift(rng, 0.06, 0.13)
    v_eye = _drift(rng, 0.02, 0.06)
    jitter = rng.normal(0.0, 1.0, size=(m, 7))
    params = []
    for i in range(m):
        j = jitter[i]
        params.append(AvatarParams(
            yaw=float(np.clip(yaw0 + i * v_yaw + 0.008 * j[0], -YAW_MAX, YAW_MAX)),
            pitch=float(np.clip(pitch0 + i * v_pitch + 0.008 * j[1], -PITCH_MAX, PITCH_MAX)),
            roll=float(np.clip(roll0 + i * v_roll + 0.005 * j[2], -0.6, 0.6)),
            tx=float(np.clip(tx0 + i * v_tx + 0.003 * j[3], -TRANSLATION_MAX, TRANSLATION_MAX)),
            ty=float(np.clip(ty0 + i * v_ty + 0.003 * j[4], -TRANSLATION_MAX, TRANSLATION_MAX)),
            mouth_open=float(np.clip(mouth0 + i * v_mouth + 0.02 * j[5], 0.0, 1.0)),
            eye_open=float(np.clip(eye0 + i * v_eye + 0.015 * j[6], 0.0, 1.0)),
            identity_seed=identity_seed,
        ))
    return params


def save_frame_png(frame: np.ndarray, path) -> None:
    Image.fromarray(np.round(frame * 255.0).astype(np.uint8)).save(path)


def load_frame_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def make_dataset(n_clips: int, frames_per_clip: int, seed: int, out_dir,
                 size: int = 64) -> Path:
    """Write out_dir/clip_%04d/frame_%05d.png trees plus params.csv and index.csv."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        rng = np.random.default_rng(seed)
        index_rows = []
        for ci in range(n_clips):
            identity_seed = int(rng.integers(0, 2**31 - 1))
            background_seed = int(rng.integers(0, 2**31 - 1))
            params = random_trajectory(rng, frames_per_clip, identity_seed)
            clip_dir = out / f"clip_{ci:04d}"
            clip_dir.mkdir(exist_ok=True)
            for fi, p in enumerate(params):
                save_frame_png(render_frame(p, size, background_seed),
                               clip_dir / f"frame_{fi:05d}.png")
            with open(clip_dir / "params.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(PARAM_COLUMNS)
                for fi, p in enumerate(params):
                    writer.writerow([fi] + [repr(v) for v in
                                            (p.yaw, p.pitch, p.roll, p.tx, p.ty,
                                             p.mouth_open, p.eye_open)])
            index_rows.append((clip_dir.name, identity_seed, background_seed, frames_per_clip))
        with open(out / "index.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["clip", "identity_seed", "background_seed", "frames"])
            writer.writerows(index_rows)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    return out


class ClipDataset:
    """Reads a make_dataset directory; frames cached per clip on first access."""

    def __init__(self, root):
        self.root = Path(root)
        index = self.root / "index.csv"
        if not index.is_file():
            raise DataError(f"no index.csv under {self.root}")
        self.entries = []
        with open(index, newline="") as fh:
            for row in csv.DictReader(fh):
                try:
                    self.entries.append((row["clip"], int(row["identity_seed"]),
                                         int(row["background_seed"]), int(row["frames"])))
                except (KeyError, TypeError, ValueError) as exc:
                    raise DataError(f"malformed index row in {index}: {row}") from exc
        if not self.entries:
            raise DataError(f"empty dataset at {self.root}")
        self._frames: dict[int, np.ndarray] = {}
        self._labels: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def frames_per_clip(self) -> int:
        return self.entries[0][3]

    def clip_frames(self, clip_idx: int) -> np.ndarray:
        """(m, H, W, 3) float32 in [0, 1]."""
        if clip_idx not in self._frames:
            name, _, _, m = self.entries[clip_idx]
            clip_dir = self.root / name
            try:
                stack = [load_frame_png(clip_dir / f"frame_{fi:05d}.png") for fi in range(m)]
            except (OSError, FileNotFoundError) as exc:
                raise DataError(f"cannot read frames of {clip_dir}: {exc}") from exc
            self._frames[clip_idx] = np.stack(stack)
        return self._frames[clip_idx]

    def frame(self, clip_idx: int, frame_idx: int) -> np.ndarray:
        return self.clip_frames(clip_idx)[frame_idx]

    def pose_labels(self, clip_idx: int) -> np.ndarray:
        """(m, 5) float32 rows of (yaw, pitch, roll, tx, ty)."""
        if clip_idx not in self._labels:
            name = self.entries[clip_idx][0]
            path = self.root / name / "params.csv"
            rows = []
            try:
                with open(path, newline="") as fh:
                    for row in csv.DictReader(fh):
                        rows.append([float(row[c]) for c in ("yaw", "pitch", "roll", "tx", "ty")])
            except (OSError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"cannot read labels from {path}: {exc}") from exc
            self._labels[clip_idx] = np.asarray(rows, dtype=np.float32)
        return self._labels[clip_idx]
