"""Static-vs-dynamic robustness comparison and ViT-input ablation."""

from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from mapfuse.netcore import NetworkConfig
from mapfuse.pipeline.dataset import Dataset, load_dataset
from mapfuse.pipeline.evaluate import Metrics, evaluate
from mapfuse.pipeline.train import TrainConfig, train

log = logging.getLogger(__name__)

ENVIRONMENTS = ("static", "dynamic")
COMPARED_MODES = ("fusion", "local_only")


@dataclass
class BenchmarkSettings:
    """Size of each generated static/dynamic benchmark pair."""

    n_frames: int = 100
    n_dynamic: int = 12
    n_static: int = 50
    extent: float = 60.0
    height: int = 640
    width: int = 832
    density: float = 10.0
    splits: dict[str, range] | None = None


@dataclass
class ComparisonReport:
    seeds: list[int]
    cells: dict[int, dict[str, dict[str, Metrics]]] = field(default_factory=dict)

    def mean_cm(self, seed: int, mode: str, env: str) -> float:
        return self.cells[seed][mode][env].mean_cm

    def relative_increase(self, seed: int, mode: str) -> float:
        s, d = self.mean_cm(seed, mode, "static"), self.mean_cm(seed, mode, "dynamic")
        return (d - s) / s

    def median_relative_increase(self, mode: str) -> float:
        return float(statistics.median(self.relative_increase(s, mode) for s in self.seeds))

    def median_mean_cm(self, mode: str, env: str) -> float:
        return float(statistics.median(self.mean_cm(s, mode, env) for s in self.seeds))

    @property
    def fusion_more_robust(self) -> bool:
        return self.median_relative_increase("fusion") <= self.median_relative_increase("local_only")

    def per_seed_rows(self) -> list[dict]:
        rows = []
        for s in self.seeds:
            for mode in COMPARED_MODES:
                rows.append(
                    {
                        "seed": s,
                        "mode": mode,
                        "static_mean_cm": self.mean_cm(s, mode, "static"),
                        "dynamic_mean_cm": self.mean_cm(s, mode, "dynamic"),
                        "static_median_cm": self.cells[s][mode]["static"].median_cm,
                        "dynamic_median_cm": self.cells[s][mode]["dynamic"].median_cm,
                        "relative_increase": self.relative_increase(s, mode),
                    }
                )
        return rows

    def summary(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "median_relative_increase": {m: self.median_relative_increase(m) for m in COMPARED_MODES},
            "median_mean_cm": {m: {e: self.median_mean_cm(m, e) for e in ENVIRONMENTS} for m in COMPARED_MODES},
            "fusion_le_local_only": self.fusion_more_robust,
        }

    def lines(self) -> list[str]:
        out = []
        for r in self.per_seed_rows():
            out.append(
                f"seed={r['seed']} mode={r['mode']} static_mean_cm={r['static_mean_cm']:.3f} "
                f"dynamic_mean_cm={r['dynamic_mean_cm']:.3f} rel_increase={100 * r['relative_increase']:+.2f}%"
            )
        s = self.summary()
        out.append(
            "aggregate median_rel_increase fusion={:+.2f}% local_only={:+.2f}% fusion_le_local_only={}".format(
                100 * s["median_relative_increase"]["fusion"],
                100 * s["median_relative_increase"]["local_only"],
                s["fusion_le_local_only"],
            )
        )
        return out

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = self.per_seed_rows()
        with open(out / "compare_dyn.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            for r in rows:
                w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
        (out / "compare_dyn_summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def benchmark_pair(seed: int, root, bench: BenchmarkSettings) -> tuple[Path, Path]:
    """Generate (or reuse) the static and dynamic benchmarks of one seed."""
    from mapfuse.synthworld import build_benchmark

    root = Path(root)
    paths = []
    for env, n_dyn in (("static", 0), ("dynamic", bench.n_dynamic)):
        path = root / f"seed{seed:03d}_{env}"
        if not (path / "manifest.cfg").exists():
            build_benchmark(
                seed,
                bench.n_frames,
                n_dyn,
                path,
                n_static=bench.n_static,
                extent=bench.extent,
                height=bench.height,
                width=bench.width,
                density=bench.density,
                splits=bench.splits,
            )
        paths.append(path)
    return paths[0], paths[1]


def compare_static_dynamic(
    seeds,
    config: NetworkConfig,
    tc: TrainConfig,
    out_dir,
    bench: BenchmarkSettings | None = None,
    split: str = "eval",
) -> ComparisonReport:
    """Train fusion and local-only models on every static/dynamic pair and compare.

    Each (seed, environment, mode) gets its own model trained with ``tc`` (its
    seed replaced by the benchmark seed) and is scored on ``split``.
    """
    bench = bench or BenchmarkSettings(height=config.height, width=config.width)
    out = Path(out_dir)
    report = ComparisonReport([int(s) for s in seeds])
    for seed in report.seeds:
        static_path, dynamic_path = benchmark_pair(seed, out / "data", bench)
        report.cells[seed] = {}
        for mode in COMPARED_MODES:
            report.cells[seed][mode] = {}
            for env, path in (("static", static_path), ("dynamic", dynamic_path)):
                ds = load_dataset(path, voxel=tc.voxel, cache_depth=not tc.resample_noise)
                result = train(ds, config.replace(ablation_mode=mode), replace(tc, seed=seed))
                metrics = evaluate(ds, result.model, split)
                report.cells[seed][mode][env] = metrics
                log.info("seed %d %s %s: %s", seed, mode, env, metrics.to_line())
    report.write(out)
    return report


def ablate(
    dataset: Dataset | str | Path,
    modes,
    config: NetworkConfig,
    tc: TrainConfig,
    out_dir=None,
    split: str = "eval",
) -> list[dict]:
    """Train one model per ViT-input mode on the same data; one metrics row per mode."""
    ds = dataset if isinstance(dataset, Dataset) else load_dataset(dataset, voxel=tc.voxel)
    rows = []
    for mode in modes:
        result = train(ds, config.replace(ablation_mode=mode), tc)
        m = evaluate(ds, result.model, split)
        rows.append({"mode": mode, "mean_cm": m.mean_cm, "median_cm": m.median_cm, "n": m.count})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["mode", "mean_cm", "median_cm", "n"])
            for r in rows:
                w.writerow([r["mode"], f"{r['mean_cm']:.4f}", f"{r['median_cm']:.4f}", r["n"]])
    return rows


def bench_to_dict(bench: BenchmarkSettings) -> dict:
    d = asdict(bench)
    if bench.splits is not None:
        d["splits"] = {k: [r.start, r.stop] for k, r in bench.splits.items()}
    return d
