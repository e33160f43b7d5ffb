"""Shared fixtures.

Two tiers: tiny fixtures (10-clip dataset, a few training steps) back the
unit tests, and one session-scoped `full_artifacts` fixture trains the whole
pipeline at default settings for the end-to-end acceptance checks.  The
heavy fixture only builds when a test actually requests it.
"""

import time
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from frvd.config import Config
from frvd.synthdata import ClipDataset, make_dataset
from frvd import pipeline

ACCEPTANCE_LINES = []


def record(name: str, ok: bool, detail: str) -> bool:
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print("\n" + line)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tinydata")
    make_dataset(10, 6, seed=1, out_dir=out)
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_data_dir):
    return ClipDataset(tiny_data_dir)


@pytest.fixture()
def tiny_cfg():
    cfg = Config()
    for key, val in (("train.steps", "4"), ("train.batch_size", "2"),
                     ("train.clip_len", "3"), ("data.clips", "10"),
                     ("data.frames", "6")):
        cfg.set(key, val)
    return cfg


@pytest.fixture(scope="session")
def full_data_dir(tmp_path_factory):
    cfg = Config()
    out = tmp_path_factory.mktemp("fulldata")
    make_dataset(cfg["data.clips"], cfg["data.frames"], seed=0, out_dir=out,
                 size=cfg["data.image_size"])
    return out


@pytest.fixture(scope="session")
def full_artifacts(tmp_path_factory, full_data_dir):
    """Train all stages at default settings, then score held-out clips.

    Returns a dict with stage logs, wall-clock times, checkpoint dirs, and
    per-clip PSNR / L1 for the conditioning and guidance comparisons."""
    from frvd.evalkit import metric_l1, metric_psnr
    from frvd.motion_extractor import ExtractorConfig, build_from_weights

    cfg = Config()
    data = ClipDataset(full_data_dir)
    run = tmp_path_factory.mktemp("run")
    run_nr = tmp_path_factory.mktemp("run_norect")
    out = {"cfg": cfg, "data_dir": full_data_dir, "run": run, "run_norect": run_nr,
           "times": {}, "logs": {}}

    t0 = time.time()
    weights, log = pipeline.train_motion(data, cfg, out_dir=run)
    out["times"]["motion"] = time.time() - t0
    out["logs"]["motion"] = log

    extractor, _ = build_from_weights(weights, ExtractorConfig.from_config(cfg))
    extractor.eval()
    n_train = pipeline.train_clip_count(len(data), cfg["data.holdout_frac"])
    errs = []
    with torch.no_grad():
        for ci in range(n_train, len(data)):
            frames, labels = data.clip_frames(ci), data.pose_labels(ci)
            for fi in range(data.frames_per_clip):
                est = extractor.estimate_pose(torch.from_numpy(frames[fi]))
                errs.append(abs(float(est.yaw) - labels[fi][0]))
    out["holdout_yaw_err"] = float(np.mean(errs))

    t0 = time.time()
    _, log = pipeline.pretrain_i2v(data, cfg, out_dir=run)
    out["times"]["i2v"] = time.time() - t0
    out["logs"]["i2v"] = log

    t0 = time.time()
    _, log, _ = pipeline.train_wfm(data, cfg, run / "motion.ckpt",
                                   run / "backbone.ckpt", out_dir=run)
    out["times"]["wfm"] = time.time() - t0
    out["logs"]["wfm"] = log

    cfg_nr = Config()
    cfg_nr.set("train.rectified_guidance", "false")
    t0 = time.time()
    _, log, _ = pipeline.train_wfm(data, cfg_nr, run / "motion.ckpt",
                                   run / "backbone.ckpt", out_dir=run_nr)
    out["times"]["wfm_norect"] = time.time() - t0
    out["logs"]["wfm_norect"] = log
    for name in ("motion.ckpt", "backbone.ckpt"):
        (run_nr / name).write_bytes((run / name).read_bytes())

    models = pipeline.load_models(cfg, run)
    models_nr = pipeline.load_models(cfg_nr, run_nr)
    psnr_wfm, psnr_bare, l1_rect, l1_norect = [], [], [], []
    for ci in range(n_train, len(data)):
        video = data.clip_frames(ci)
        gen_w, _ = pipeline.self_reenact(video, models, cfg, seed=ci)
        gen_b, _ = pipeline.self_reenact(video, models, cfg, seed=ci,
                                         use_wfm=False)
        gen_nr, _ = pipeline.self_reenact(video, models_nr, cfg_nr, seed=ci,
                                          use_r=False)
        psnr_wfm.append(metric_psnr(video, gen_w))
        psnr_bare.append(metric_psnr(video, gen_b))
        l1_rect.append(metric_l1(video, gen_w))
        l1_norect.append(metric_l1(video, gen_nr))
    out["psnr_wfm"] = float(np.mean(psnr_wfm))
    out["psnr_bare"] = float(np.mean(psnr_bare))
    out["l1_rect"] = float(np.mean(l1_rect))
    out["l1_norect"] = float(np.mean(l1_norect))
    out["n_holdout"] = len(psnr_wfm)
    out["models"] = models
    return out
