"""Depth images from a point-cloud map seen through a pinhole camera.

One-pixel splatting with a z-buffer: each pixel keeps the smallest camera-frame
depth among the map points that land on it, ties broken by lowest point index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from mapfuse.geometry import Intrinsics, Pose, pose_apply

NEAR_CLIP = 0.5
FAR_CLIP = 100.0

_MAGIC = b"PCM1"


class InvalidDepthError(ValueError):
    pass


class MapFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloudMap:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 1:
            raise ValueError("a point-cloud map needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("map points must be finite")
        object.__setattr__(self, "points", pts)
        if self.colors is not None:
            cols = np.asarray(self.colors, dtype=np.uint8).reshape(-1, 3)
            if len(cols) != len(pts):
                raise ValueError(f"{len(cols)} colors for {len(pts)} points")
            object.__setattr__(self, "colors", cols)

    def __len__(self):
        return len(self.points)

    def transformed(self, pose: Pose) -> PointCloudMap:
        """Points expressed in the frame of ``pose`` (i.e. ``pose_apply``)."""
        return PointCloudMap(pose_apply(pose, self.points), self.colors)


def project_points(points, pose: Pose, k: Intrinsics, near_clip=NEAR_CLIP, far_clip=FAR_CLIP):
    """Vectorized projection; returns ``(u, v, z, visible)`` with integer pixels."""
    if not 0 < near_clip < far_clip:
        raise ValueError(f"need 0 < near_clip < far_clip, got {near_clip}, {far_clip}")
    pc = pose_apply(pose, points)
    x, y, z = pc[..., 0], pc[..., 1], pc[..., 2]
    in_range = (z >= near_clip) & (z <= far_clip)
    zs = np.where(in_range, z, 1.0)
    uf = k.fx * x / zs + k.cx
    vf = k.fy * y / zs + k.cy
    visible = in_range & (uf >= 0) & (uf < k.width) & (vf >= 0) & (vf < k.height)
    u = np.floor(np.where(visible, uf, 0)).astype(np.int64)
    v = np.floor(np.where(visible, vf, 0)).astype(np.int64)
    return u, v, z, visible


def project_point(x, pose: Pose, k: Intrinsics, near_clip=NEAR_CLIP, far_clip=FAR_CLIP):
    """Pixel ``(u, v, depth)`` of a single world point, or ``None`` when out of frustum."""
    u, v, z, vis = project_points(np.asarray(x, dtype=np.float64).reshape(1, 3), pose, k, near_clip, far_clip)
    if not vis[0]:
        return None
    return int(u[0]), int(v[0]), float(z[0])


def render_depth(
    cloud: PointCloudMap,
    pose: Pose,
    k: Intrinsics,
    near_clip=NEAR_CLIP,
    far_clip=FAR_CLIP,
    return_index: bool = False,
):
    """Render an ``h x w`` float32 depth image in meters (0 where empty).

    With ``return_index`` also returns the winning point index per pixel (-1 if empty).
    """
    u, v, z, vis = project_points(cloud.points, pose, k, near_clip, far_clip)
    idx = np.flatnonzero(vis)
    depth = np.zeros((k.height, k.width), dtype=np.float32)
    winner = np.full((k.height, k.width), -1, dtype=np.int64)
    if len(idx):
        pix = v[idx] * k.width + u[idx]
        zi = z[idx].astype(np.float32)
        # sort by pixel, then depth, then point index; first of each pixel run wins
        order = np.lexsort((idx, zi, pix))
        pix_sorted = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_sorted[1:] != pix_sorted[:-1]
        sel = order[first]
        depth.reshape(-1)[pix[sel]] = zi[sel]
        winner.reshape(-1)[pix[sel]] = idx[sel]
    if return_index:
        return depth, winner
    return depth


def backproject_pixel(u, v, depth, pose: Pose, k: Intrinsics) -> np.ndarray:
    """World point seen at the center of pixel ``(u, v)`` at camera depth ``depth``."""
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    xc = np.array([(u + 0.5 - k.cx) / k.fx * depth, (v + 0.5 - k.cy) / k.fy * depth, depth])
    return pose.rotation @ xc + pose.t


def voxel_downsample(cloud: PointCloudMap, voxel: float) -> PointCloudMap:
    """One centroid per occupied voxel of an origin-anchored grid, ordered by voxel key."""
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    n = len(counts)
    sums = np.zeros((n, 3))
    np.add.at(sums, inverse, cloud.points)
    centroids = sums / counts[:, None]
    colors = None
    if cloud.colors is not None:
        csum = np.zeros((n, 3))
        np.add.at(csum, inverse, cloud.colors.astype(np.float64))
        colors = np.round(csum / counts[:, None]).astype(np.uint8)
    return PointCloudMap(centroids, colors)


def depth_colormap(depth: np.ndarray, far_clip=FAR_CLIP, near_clip=NEAR_CLIP) -> np.ndarray:
    """Map depths to RGB with a jet-like ramp: near is red, far is blue."""
    s = np.clip((np.asarray(depth, np.float64) - near_clip) / (far_clip - near_clip), 0.0, 1.0)
    s = 1.0 - s
    r = np.clip(1.5 - np.abs(4 * s - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * s - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * s - 1), 0, 1)
    return np.round(np.stack([r, g, b], axis=-1) * 255).astype(np.uint8)


def render_overlay(
    color: np.ndarray,
    cloud: PointCloudMap | None,
    pose: Pose,
    k: Intrinsics,
    near_clip=NEAR_CLIP,
    far_clip=FAR_CLIP,
    color_range: float | None = None,
) -> np.ndarray:
    """Copy of ``color`` with every z-buffer-visible map point painted by its depth."""
    out = np.array(color, dtype=np.uint8, copy=True)
    if cloud is None or len(cloud.points) == 0:
        return out
    depth = render_depth(cloud, pose, k, near_clip, far_clip)
    mask = depth > 0
    top = far_clip if color_range is None else color_range
    out[mask] = depth_colormap(depth[mask], top, near_clip)
    return out


def save_map(path, cloud: PointCloudMap) -> None:
    """Write the ``PCM1`` blob: magic, u64 count, color flag, xyz float32, optional rgb u8."""
    path = Path(path)
    has_color = cloud.colors is not None
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<QB", len(cloud.points), 1 if has_color else 0))
        fh.write(cloud.points.astype("<f4").tobytes())
        if has_color:
            fh.write(cloud.colors.astype(np.uint8).tobytes())


def load_map(path) -> PointCloudMap:
    path = Path(path)
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise MapFormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 13:
        raise MapFormatError(f"{path}: truncated header")
    n, flag = struct.unpack_from("<QB", data, 4)
    off = 13
    need = off + 12 * n + (3 * n if flag else 0)
    if len(data) != need:
        raise MapFormatError(f"{path}: expected {need} bytes for {n} points, found {len(data)}")
    pts = np.frombuffer(data, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
    cols = None
    if flag:
        cols = np.frombuffer(data, dtype=np.uint8, count=3 * n, offset=off + 12 * n).reshape(n, 3)
    return PointCloudMap(pts.astype(np.float64), cols)


def save_depth_png(path, depth: np.ndarray) -> None:
    """16-bit PNG with millimeter quantization; 0 stays empty."""
    mm = np.round(np.asarray(depth, np.float64) * 1000.0)
    mm = np.clip(mm, 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth_png(path) -> np.ndarray:
    mm = np.asarray(Image.open(path), dtype=np.float64)
    return (mm / 1000.0).astype(np.float32)
