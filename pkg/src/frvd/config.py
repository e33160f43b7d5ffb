"""Flat dotted-key configuration with typed defaults.

Config files are ``key = value`` lines, ``#`` starts a comment.  Unknown keys
are rejected.  Command-line ``--set key=value`` overrides file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

# key -> (type, default).  bool values parse from true/false/1/0.
DEFAULTS: dict[str, tuple[type, object]] = {
    # synthetic data
    "data.image_size": (int, 64),
    "data.clips": (int, 200),
    "data.frames": (int, 8),
    "data.holdout_frac": (float, 0.1),
    # motion extractor
    "extractor.K": (int, 10),
    "extractor.feat_channels": (int, 32),
    "extractor.feat_size": (int, 16),
    "extractor.sigma_heatmap": (float, 0.1),
    # diffusion backbone
    "backbone.channels": (tuple, (16, 24, 32, 40)),
    "backbone.temb_dim": (int, 64),
    "backbone.temporal_attention": (bool, True),
    # warping feature mapper
    "wfm.num_scales": (int, 3),
    "wfm.zero_init": (bool, True),
    "wfm.dropout_p": (float, 0.1),
    # diffusion / sampling
    "diffusion.T": (int, 1000),
    "diffusion.beta_start": (float, 1e-4),
    "diffusion.beta_end": (float, 0.02),
    "diffusion.steps": (int, 30),
    "diffusion.w": (float, 2.0),
    "diffusion.latent_downscale": (int, 2),
    # training
    "train.clip_len": (int, 4),
    "train.batch_size": (int, 8),
    "train.steps": (int, 2000),
    "train.lr": (float, 1e-4),
    "train.lambda_pose": (float, 1.0),
    "train.rectified_guidance": (bool, True),
    "train.seed": (int, 0),
    "train.log_every": (int, 1),
    # windowed inference
    "window.length": (int, 14),
    "window.overlap": (int, 6),
}


@dataclass
class Config:
    values: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: default for k, (_, default) in DEFAULTS.items()}
        merged.update(self.values)
        self.values = merged

    def __getitem__(self, key: str):
        if key not in DEFAULTS:
            raise KeyError(f"unknown config key: {key}")
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        self.values[key] = _parse_value(key, raw)

    def snapshot(self) -> dict[str, object]:
        return dict(self.values)


def _parse_value(key: str, raw: str):
    if key not in DEFAULTS:
        raise ValueError(f"unknown config key: {key}")
    typ, _ = DEFAULTS[key]
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is tuple:
            return tuple(int(part) for part in raw.split(","))
        return typ(raw)
    except ValueError as exc:
        raise ValueError(f"config key {key}: cannot parse {raw!r} as {typ.__name__}") from exc


def load_config(path=None, overrides: list[str] | None = None) -> Config:
    """Build a Config from an optional file plus ``key=value`` override strings."""
    values: dict[str, object] = {}
    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if stripped.count("=") != 1:
                raise ValueError(f"{path}:{lineno}: malformed line {line.strip()!r}")
            key, raw = (part.strip() for part in stripped.split("="))
            if not key or not raw:
                raise ValueError(f"{path}:{lineno}: malformed line {line.strip()!r}")
            values[key] = _parse_value(key, raw)
    cfg = Config(values)
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        cfg.set(key.strip(), raw)
    return cfg
