"""On-disk benchmark layout and frame loading.

::

    root/
      manifest.cfg      key=value lines
      map.pcm           point-cloud map blob
      poses.csv         frame_id,tx,ty,tz,qw,qx,qy,qz (header row)
      images/%06d.png   8-bit RGB
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from mapfuse.geometry import (
    POSE_CSV_HEADER,
    Intrinsics,
    PerturbationSpec,
    Pose,
    format_pose_row,
    parse_pose_row,
    perturb_pose,
)
from mapfuse.pipeline.preprocess import RECIPES, apply_recipe, recipe_intrinsics
from mapfuse.projection import FAR_CLIP, NEAR_CLIP, PointCloudMap, load_map, render_depth, voxel_downsample

SPLIT_NAMES = ("train", "val", "eval")
_KNOWN_KEYS = {
    "map", "poses", "images", "recipe", "fx", "fy", "cx", "cy", "width", "height",
    "splits", "noise_trans_m", "noise_rot_deg", "seed", "near_clip", "far_clip",
}


class DatasetError(ValueError):
    pass


@dataclass
class DatasetManifest:
    root: Path
    map_path: Path
    poses_path: Path
    image_dir: Path
    intrinsics: Intrinsics
    recipe: str = "none"
    splits: dict[str, range] = field(default_factory=dict)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)
    near_clip: float = NEAR_CLIP
    far_clip: float = FAR_CLIP
    extra: dict[str, str] = field(default_factory=dict)

    def image_path(self, frame_id: int) -> Path:
        return self.image_dir / f"{frame_id:06d}.png"


def format_splits(splits: dict[str, range]) -> str:
    return ",".join(f"{name}:{r.start}-{r.stop - 1}" for name, r in splits.items() if len(r))


def parse_splits(text: str) -> dict[str, range]:
    splits = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        m = re.fullmatch(r"(\w+):(\d+)-(\d+)", item)
        if not m:
            raise DatasetError(f"malformed split entry {item!r}; expected name:start-end")
        name, a, b = m.group(1), int(m.group(2)), int(m.group(3))
        if b < a:
            raise DatasetError(f"split {name!r} ends before it starts: {item!r}")
        if name in splits:
            raise DatasetError(f"split {name!r} listed twice")
        splits[name] = range(a, b + 1)
    return splits


def check_splits(splits: dict[str, range]) -> None:
    seen: dict[int, str] = {}
    for name, r in splits.items():
        for i in r:
            if i in seen:
                raise DatasetError(f"frame {i} appears in both split {seen[i]!r} and {name!r}")
            seen[i] = name


def write_manifest(path, m: DatasetManifest) -> None:
    root = Path(path).parent
    rel = lambda p: Path(p).relative_to(root).as_posix() if Path(p).is_absolute() else Path(p).as_posix()  # noqa: E731
    k = m.intrinsics
    lines = [
        f"map={rel(m.map_path)}",
        f"poses={rel(m.poses_path)}",
        f"images={rel(m.image_dir)}",
        f"recipe={m.recipe}",
        f"fx={k.fx:.9g}",
        f"fy={k.fy:.9g}",
        f"cx={k.cx:.9g}",
        f"cy={k.cy:.9g}",
        f"width={k.width}",
        f"height={k.height}",
        f"splits={format_splits(m.splits)}",
        f"noise_trans_m={m.perturbation.max_trans:.9g}",
        f"noise_rot_deg={m.perturbation.max_rot_deg:.9g}",
        f"seed={m.perturbation.seed}",
        f"near_clip={m.near_clip:.9g}",
        f"far_clip={m.far_clip:.9g}",
    ]
    lines += [f"{key}={val}" for key, val in sorted(m.extra.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.cfg"
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    root = path.parent
    kv: dict[str, str] = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DatasetError(f"{path}:{n}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        kv[key.strip()] = val.strip()
    missing = [key for key in ("map", "poses", "images", "fx", "fy", "cx", "cy", "width", "height") if key not in kv]
    if missing:
        raise DatasetError(f"{path}: missing keys {missing}")
    try:
        k = Intrinsics(
            float(kv["fx"]), float(kv["fy"]), float(kv["cx"]), float(kv["cy"]), int(kv["width"]), int(kv["height"])
        )
        spec = PerturbationSpec(
            float(kv.get("noise_trans_m", 0.60)), float(kv.get("noise_rot_deg", 0.0)), int(kv.get("seed", 0))
        )
        near, far = float(kv.get("near_clip", NEAR_CLIP)), float(kv.get("far_clip", FAR_CLIP))
    except ValueError as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    recipe = kv.get("recipe", "none")
    if recipe not in RECIPES:
        raise DatasetError(f"{path}: unknown recipe {recipe!r}")
    splits = parse_splits(kv.get("splits", ""))
    check_splits(splits)
    return DatasetManifest(
        root=root,
        map_path=root / kv["map"],
        poses_path=root / kv["poses"],
        image_dir=root / kv["images"],
        intrinsics=k,
        recipe=recipe,
        splits=splits,
        perturbation=spec,
        near_clip=near,
        far_clip=far,
        extra={key: val for key, val in kv.items() if key not in _KNOWN_KEYS},
    )


def write_poses(path, poses) -> None:
    """Pose CSV; ``poses`` is a sequence (ids 0..n-1) or a ``{frame_id: Pose}`` mapping."""
    items = poses.items() if isinstance(poses, dict) else enumerate(poses)
    lines = [POSE_CSV_HEADER] + [format_pose_row(i, p) for i, p in items]
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> dict[int, Pose]:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"pose file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != POSE_CSV_HEADER:
        raise DatasetError(f"{path}: missing header row {POSE_CSV_HEADER!r}")
    poses = {}
    for n, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        try:
            fid, pose = parse_pose_row(line)
        except ValueError as exc:
            raise DatasetError(f"{path}:{n}: malformed pose row: {exc}") from exc
        if fid in poses:
            raise DatasetError(f"{path}:{n}: duplicate frame id {fid}")
        poses[fid] = pose
    return poses


@dataclass
class Frame:
    index: int
    color: np.ndarray
    gt: Pose
    rough: Pose
    intrinsics: Intrinsics


@dataclass
class Sample:
    """Network-ready inputs for one frame: preprocessed color, depth at the rough pose."""

    index: int
    color: np.ndarray
    depth: np.ndarray
    gt: Pose
    rough: Pose
    intrinsics: Intrinsics


class Dataset:
    """Validated benchmark with lazy image loading and on-the-fly depth rendering."""

    def __init__(self, manifest: DatasetManifest, voxel: float | None = None, cache_depth: bool = False):
        self.manifest = manifest
        self.voxel = voxel
        self.cache_depth = cache_depth
        self._colors: dict[int, np.ndarray] = {}
        self._depths: dict[tuple[int, bytes], np.ndarray] = {}
        m = manifest
        if not m.map_path.exists():
            raise DatasetError(f"map file not found: {m.map_path}")
        if not m.image_dir.is_dir():
            raise DatasetError(f"image directory not found: {m.image_dir}")
        self.poses = read_poses(m.poses_path)
        n_images = len(list(m.image_dir.glob("*.png")))
        if n_images != len(self.poses):
            raise DatasetError(f"{m.poses_path} has {len(self.poses)} pose rows but {m.image_dir} holds {n_images} images")
        for fid in self.poses:
            if not m.image_path(fid).exists():
                raise DatasetError(f"pose row {fid} has no image {m.image_path(fid)}")
        check_splits(m.splits)
        for name, r in m.splits.items():
            for i in r:
                if i not in self.poses:
                    raise DatasetError(f"split {name!r} references frame {i} which has no pose row")
        self.intrinsics = recipe_intrinsics(m.recipe, m.intrinsics)

    @cached_property
    def map(self) -> PointCloudMap:
        cloud = load_map(self.manifest.map_path)
        if self.voxel:
            cloud = voxel_downsample(cloud, self.voxel)
        return cloud

    @property
    def resolution(self) -> tuple[int, int]:
        return self.intrinsics.height, self.intrinsics.width

    def frame_ids(self, split: str | None = None) -> list[int]:
        if split is None:
            return sorted(self.poses)
        if split not in self.manifest.splits:
            raise DatasetError(f"split {split!r} not defined; have {sorted(self.manifest.splits)}")
        return list(self.manifest.splits[split])

    def rough_pose(self, frame_id: int, draw_index: int | None = None) -> Pose:
        draw = frame_id if draw_index is None else draw_index
        return perturb_pose(self.poses[frame_id], self.manifest.perturbation, draw)

    def raw_color(self, frame_id: int) -> np.ndarray:
        img = self._colors.get(frame_id)
        if img is None:
            path = self.manifest.image_path(frame_id)
            try:
                img = np.asarray(Image.open(path).convert("RGB"))
            except OSError as exc:
                raise DatasetError(f"cannot read image {path}: {exc}") from exc
            self._colors[frame_id] = img
        return img

    def color(self, frame_id: int) -> np.ndarray:
        return apply_recipe(self.manifest.recipe, self.raw_color(frame_id), self.manifest.intrinsics)[0]

    def depth(self, pose: Pose, frame_id: int | None = None) -> np.ndarray:
        key = (frame_id, pose.t.tobytes() + pose.q.tobytes())
        if self.cache_depth and key in self._depths:
            return self._depths[key]
        d = render_depth(self.map, pose, self.intrinsics, self.manifest.near_clip, self.manifest.far_clip)
        if self.cache_depth:
            self._depths[key] = d
        return d

    def frames(self, split: str | None = None):
        """Yield :class:`Frame` in index order with the fixed per-frame rough pose."""
        for i in self.frame_ids(split):
            yield Frame(i, self.raw_color(i), self.poses[i], self.rough_pose(i), self.manifest.intrinsics)

    def sample(self, frame_id: int, rough: Pose | None = None) -> Sample:
        rough = self.rough_pose(frame_id) if rough is None else rough
        return Sample(frame_id, self.color(frame_id), self.depth(rough, frame_id), self.poses[frame_id], rough, self.intrinsics)


def load_dataset(path, voxel: float | None = None, cache_depth: bool = False) -> Dataset:
    return Dataset(read_manifest(path), voxel=voxel, cache_depth=cache_depth)


def read_kitti_poses(path) -> list[Pose]:
    """KITTI odometry ground truth: one row-major 3x4 matrix (12 floats) per line."""
    poses = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 12:
            raise DatasetError(f"{path}:{n}: expected 12 values, got {len(vals)}")
        m = np.eye(4)
        m[:3, :] = np.asarray(vals, dtype=np.float64).reshape(3, 4)
        poses.append(Pose.from_matrix(m))
    return poses


def read_kitti_intrinsics(calib_path, width: int, height: int, camera: str = "P2") -> Intrinsics:
    """Pinhole intrinsics from a KITTI ``calib.txt`` projection-matrix line."""
    for line in Path(calib_path).read_text().splitlines():
        if line.startswith(camera + ":"):
            p = np.asarray(line.split(":", 1)[1].split(), dtype=np.float64).reshape(3, 4)
            return Intrinsics(p[0, 0], p[1, 1], p[0, 2], p[1, 2], width, height)
    raise DatasetError(f"{calib_path}: no {camera} line")
