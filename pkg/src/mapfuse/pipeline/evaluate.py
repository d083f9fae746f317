from __future__ import annotations

import csv
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from mapfuse.geometry import Pose, pose_compose, pose_correction, translation_error_cm
from mapfuse.netcore import LocalizationNet, load_checkpoint, prepare_inputs
from mapfuse.pipeline.dataset import Dataset, Sample, load_dataset


class EvaluationRefused(ValueError):
    pass


@dataclass
class Metrics:
    mean_cm: float
    median_cm: float
    count: int
    errors: list[float] = field(default_factory=list)
    frame_ids: list[int] = field(default_factory=list)

    @classmethod
    def from_errors(cls, errors, frame_ids=None) -> Metrics:
        errors = [float(e) for e in errors]
        if not errors:
            raise ValueError("no per-frame errors to summarize")
        ids = list(frame_ids) if frame_ids is not None else list(range(len(errors)))
        return cls(float(np.mean(errors)), float(statistics.median(errors)), len(errors), errors, ids)

    def to_line(self) -> str:
        return f"mean_cm={self.mean_cm:.4f} median_cm={self.median_cm:.4f} n={self.count}"

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_id", "error_cm"])
            for i, e in zip(self.frame_ids, self.errors):
                w.writerow([i, f"{e:.6f}"])


def identity_predictor(samples: list[Sample]) -> list[Pose]:
    """Predicts a zero correction: the rough pose is returned unchanged."""
    return [s.rough for s in samples]


def oracle_predictor(samples: list[Sample]) -> list[Pose]:
    """Predicts the exact correction from the ground truth."""
    return [pose_compose(s.rough, pose_correction(s.rough, s.gt)) for s in samples]


def batch_tensors(samples: list[Sample], far_clip: float, dtype=torch.float32):
    pairs = [prepare_inputs(s.color, s.depth, far_clip, dtype) for s in samples]
    return torch.cat([p[0] for p in pairs]), torch.cat([p[1] for p in pairs])


class ModelPredictor:
    def __init__(self, model: LocalizationNet):
        self.model = model

    def __call__(self, samples: list[Sample]) -> list[Pose]:
        color, depth = batch_tensors(samples, self.model.config.far_clip)
        self.model.eval()
        with torch.no_grad():
            out = self.model(color, depth, [s.rough for s in samples])
        return out.absolute


def check_compatible(model: LocalizationNet, dataset: Dataset) -> None:
    cfg = model.config
    if (cfg.height, cfg.width) != dataset.resolution:
        raise EvaluationRefused(
            f"network expects {cfg.height}x{cfg.width} inputs but the dataset yields {dataset.resolution[0]}x{dataset.resolution[1]}"
        )
    if cfg.far_clip != dataset.manifest.far_clip:
        raise EvaluationRefused(f"depth normalization {cfg.far_clip} m differs from dataset far clip {dataset.manifest.far_clip} m")


def evaluate(dataset: Dataset, predictor, split: str = "eval", batch_size: int = 8, frame_ids=None) -> Metrics:
    """Per-frame translation error of ``predictor`` on fixed rough poses of ``split``."""
    if isinstance(predictor, LocalizationNet):
        check_compatible(predictor, dataset)
        predictor = ModelPredictor(predictor)
    ids = dataset.frame_ids(split) if frame_ids is None else list(frame_ids)
    errors = []
    for start in range(0, len(ids), batch_size):
        chunk = [dataset.sample(i) for i in ids[start : start + batch_size]]
        for s, est in zip(chunk, predictor(chunk)):
            errors.append(translation_error_cm(est, s.gt))
    return Metrics.from_errors(errors, ids)


def evaluate_checkpoint(manifest, checkpoint, split: str = "eval", voxel: float | None = None) -> Metrics:
    ds = load_dataset(manifest, voxel=voxel)
    model = load_checkpoint(checkpoint).to_model()
    return evaluate(ds, model, split)


def save_metrics(metrics: Metrics, out_dir, stem: str = "metrics") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.txt").write_text(metrics.to_line() + "\n")
    metrics.write_csv(out / f"{stem}_per_frame.csv")
    return out / f"{stem}.txt"
