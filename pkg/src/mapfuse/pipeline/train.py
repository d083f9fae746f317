from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from mapfuse.geometry import pose_correction
from mapfuse.netcore import Checkpoint, LocalizationNet, NetworkConfig, build_model, pose_loss, save_checkpoint
from mapfuse.pipeline.dataset import Dataset, load_dataset
from mapfuse.pipeline.evaluate import batch_tensors, check_compatible, evaluate

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    """Optimizer and sampling settings (declared defaults, tuned for CPU runs)."""

    steps: int = 2000
    batch_size: int = 4
    lr: float = 1e-3
    final_lr_ratio: float = 0.05
    rot_weight: float = 1.0
    smooth_l1_beta: float = 0.1
    eval_interval: int = 0
    max_val_frames: int | None = None
    seed: int = 0
    resample_noise: bool = True
    voxel: float | None = None
    train_split: str = "train"
    val_split: str = "val"


@dataclass
class TrainResult:
    model: LocalizationNet
    log: list[dict]
    best_step: int
    best_val_cm: float | None


def _lr_factor(step: int, tc: TrainConfig) -> float:
    if tc.steps <= 1:
        return 1.0
    cos = 0.5 * (1 + math.cos(math.pi * step / (tc.steps - 1)))
    return tc.final_lr_ratio + (1 - tc.final_lr_ratio) * cos


def _batches(train_ids: list[int], tc: TrainConfig):
    rng = np.random.default_rng([tc.seed, 17])
    order: list[int] = []
    while True:
        if len(order) < tc.batch_size:
            order += [train_ids[i] for i in rng.permutation(len(train_ids))]
        yield order[: tc.batch_size]
        order = order[tc.batch_size :]


def train(
    dataset: Dataset | str | Path,
    config: NetworkConfig,
    tc: TrainConfig | None = None,
    out_checkpoint=None,
    log_path=None,
) -> TrainResult:
    """Fit the network to predict rough-to-true corrections on ``tc.train_split``.

    Each sample perturbs the ground truth (fresh draws per step when
    ``resample_noise``, else the fixed per-frame draw), renders depth at the
    rough pose and regresses the correction. With a validation split and
    ``eval_interval > 0`` the best-validation weights are checkpointed,
    otherwise the final weights.
    """
    tc = tc or TrainConfig()
    ds = dataset if isinstance(dataset, Dataset) else load_dataset(dataset, voxel=tc.voxel)
    model = build_model(config, tc.seed)
    check_compatible(model, ds)
    train_ids = ds.frame_ids(tc.train_split)
    if not train_ids:
        raise ValueError(f"split {tc.train_split!r} is empty")
    val_ids = []
    if tc.eval_interval > 0 and tc.val_split in ds.manifest.splits:
        val_ids = ds.frame_ids(tc.val_split)[: tc.max_val_frames]
    n_total = max(ds.poses) + 1

    torch.manual_seed(tc.seed)
    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: _lr_factor(s, tc))
    rows: list[dict] = []
    best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    best_step, best_val = 0, None
    batches = _batches(train_ids, tc)

    for step in range(tc.steps):
        ids = next(batches)
        samples = []
        for k, fid in enumerate(ids):
            draw = fid if not tc.resample_noise else n_total * (1 + step * tc.batch_size + k) + fid
            samples.append(ds.sample(fid, ds.rough_pose(fid, draw)))
        color, depth = batch_tensors(samples, config.far_clip)
        corrections = [pose_correction(s.rough, s.gt) for s in samples]
        t_star = torch.tensor(np.array([c.t for c in corrections]), dtype=color.dtype)
        q_star = torch.tensor(np.array([c.q for c in corrections]), dtype=color.dtype)
        model.train()
        out = model(color, depth)
        loss = pose_loss(out.t, out.q_raw, t_star, q_star, tc.rot_weight, tc.smooth_l1_beta)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(step, value)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        row = {"step": step + 1, "loss": value, "lr": opt.param_groups[0]["lr"], "val_mean_cm": ""}
        last = step + 1 == tc.steps
        if val_ids and ((step + 1) % tc.eval_interval == 0 or last):
            val = evaluate(ds, model, tc.val_split, frame_ids=val_ids).mean_cm
            row["val_mean_cm"] = val
            if best_val is None or val < best_val:
                best_val, best_step = val, step + 1
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            log.info("step %d loss %.5f val_mean_cm %.3f", step + 1, value, val)
        rows.append(row)

    if not val_ids:
        best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        best_step = tc.steps
    final_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    if out_checkpoint is not None:
        best_model = LocalizationNet(config)
        best_model.load_state_dict(best_state)
        save_checkpoint(out_checkpoint, Checkpoint.from_model(best_model, best_step, tc.seed, train=_tc_dict(tc)))
    if log_path is not None:
        write_log(log_path, rows)
    model.load_state_dict(final_state)
    return TrainResult(model, rows, best_step, best_val)


def _tc_dict(tc: TrainConfig) -> dict:
    return {k: v for k, v in asdict(tc).items()}


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "val_mean_cm"])
        for r in rows:
            val = r["val_mean_cm"]
            w.writerow([r["step"], f"{r['loss']:.8g}", f"{r['lr']:.8g}", "" if val == "" else f"{val:.6f}"])
