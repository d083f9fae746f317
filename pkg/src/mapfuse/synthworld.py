"""Procedural box worlds with paired static and dynamic variants.

World frame is z-up with the ground at z = 0. Static boxes go into the
point-cloud map; moving obstacles only ever appear in the color images, so
a dynamic benchmark differs from its static twin in the images alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from PIL import Image

from mapfuse.geometry import Intrinsics, PerturbationSpec, Pose, matrix_to_quat
from mapfuse.projection import PointCloudMap, save_map

SKY_RGB = (170, 200, 235)
GROUND_RGB = (105, 100, 95)
# brightness per face: -x, +x, -y, +y, -z, +z
FACE_SHADE = (0.70, 0.85, 0.60, 0.95, 0.50, 1.00)


class TrajectoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    rgb: tuple[int, int, int]

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - 0.5 * np.asarray(self.size)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + 0.5 * np.asarray(self.size)


@dataclass(frozen=True)
class Obstacle:
    size: tuple[float, float, float]
    rgb: tuple[int, int, int]
    track: tuple[tuple[float, float, float], ...]

    def box_at(self, frame_index: int) -> Box:
        if not 0 <= frame_index < len(self.track):
            raise IndexError(f"frame {frame_index} outside obstacle track of length {len(self.track)}")
        return Box(self.track[frame_index], self.size, self.rgb)


@dataclass(frozen=True)
class Scene:
    seed: int
    extent: float
    static_boxes: tuple[Box, ...]
    obstacles: tuple[Obstacle, ...] = ()
    ground_extent: float = 0.0
    n_frames: int = 0

    def boxes_at(self, frame_index: int) -> list[Box]:
        return list(self.static_boxes) + [o.box_at(frame_index) for o in self.obstacles]


@dataclass(frozen=True)
class Trajectory:
    frames: tuple[Pose, ...]
    spacing: float

    def __len__(self):
        return len(self.frames)


def _rgb(values) -> tuple[int, int, int]:
    return tuple(int(v) for v in values)


def _palette(rng: np.random.Generator, n: int = 8) -> np.ndarray:
    hues = (rng.permutation(n) + rng.uniform(0, 1)) / n
    sat = rng.uniform(0.45, 0.85, n)
    val = rng.uniform(0.55, 0.95, n)
    # hsv -> rgb
    i = np.floor(hues * 6).astype(int) % 6
    f = hues * 6 - np.floor(hues * 6)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    table = np.stack(
        [
            np.choose(i, [val, q, p, p, t, val]),
            np.choose(i, [t, val, val, q, p, p]),
            np.choose(i, [p, p, t, val, val, q]),
        ],
        axis=-1,
    )
    return np.round(table * 255).astype(int)


def camera_pose(position, heading: float) -> Pose:
    """Camera at ``position`` looking horizontally along world heading ``heading`` (rad)."""
    s, c = math.sin(heading), math.cos(heading)
    r = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])
    return Pose(position, matrix_to_quat(r))


def generate_scene(
    seed: int,
    n_static: int = 50,
    n_dynamic: int = 0,
    extent: float = 60.0,
    n_frames: int = 100,
    route: Trajectory | None = None,
) -> Scene:
    """Random box city inside ``[-extent/2, extent/2]^2``.

    Static geometry and palette come from an RNG stream that ignores
    ``n_dynamic``, so every dynamic scene has an exact static twin. With a
    ``route`` the obstacles are anchored in front of the camera along it, and
    kept clear of every camera position.
    """
    if n_static < 1:
        raise ValueError("n_static must be at least 1")
    if extent <= 0:
        raise ValueError("extent must be positive")
    static_rng = np.random.default_rng([seed, 0])
    palette = _palette(static_rng)
    half = extent / 2
    boxes = []
    for _ in range(n_static):
        sx, sy = static_rng.uniform(1.0, 6.0, 2)
        sz = min(static_rng.uniform(1.5, 8.0), extent)
        cx, cy = static_rng.uniform(-half + sx / 2, half - sx / 2), static_rng.uniform(-half + sy / 2, half - sy / 2)
        col = palette[static_rng.integers(len(palette))]
        boxes.append(Box((float(cx), float(cy), float(sz / 2)), (float(sx), float(sy), float(sz)), _rgb(col)))

    obstacles = []
    dyn_rng = np.random.default_rng([seed, 1])
    cams = None
    if route is not None:
        cams = np.array([p.t for p in route.frames])
        n_frames = len(route.frames)
    for _ in range(n_dynamic):
        for _attempt in range(100):
            obs = _sample_obstacle(dyn_rng, n_frames, half, route)
            if cams is None or _clear_of_cameras(obs, cams):
                break
        obstacles.append(obs)
    return Scene(int(seed), float(extent), tuple(boxes), tuple(obstacles), float(extent), int(n_frames))


def _sample_obstacle(rng, n_frames: int, half: float, route: Trajectory | None) -> Obstacle:
    if rng.uniform() < 0.6:
        size = (float(rng.uniform(0.5, 0.8)), float(rng.uniform(0.5, 0.8)), float(rng.uniform(1.5, 1.9)))
    else:
        size = (float(rng.uniform(3.8, 4.8)), float(rng.uniform(1.7, 2.0)), float(rng.uniform(1.4, 1.8)))
    rgb = _rgb(rng.integers(20, 236, 3))
    if route is not None:
        f0 = int(rng.integers(len(route.frames)))
        pose = route.frames[f0]
        fwd = pose.rotation[:, 2]
        right = pose.rotation[:, 0]
        anchor = pose.t + fwd * rng.uniform(4.0, 14.0) + right * rng.uniform(-3.0, 3.0)
    else:
        f0 = int(rng.integers(max(n_frames, 1)))
        anchor = rng.uniform(-half, half, 3)
    anchor = np.array([anchor[0], anchor[1], size[2] / 2])
    heading = rng.uniform(0, 2 * math.pi)
    speed = rng.uniform(0.05, 0.4)
    vel = speed * np.array([math.cos(heading), math.sin(heading), 0.0])
    acc = np.zeros(3)
    if rng.uniform() < 0.5:
        # parabolic track: constant sideways acceleration
        acc = rng.uniform(-0.004, 0.004) * np.array([-math.sin(heading), math.cos(heading), 0.0])
    f = np.arange(n_frames, dtype=np.float64)[:, None] - f0
    track = anchor + vel * f + 0.5 * acc * f * f
    return Obstacle(size, rgb, tuple(tuple(float(v) for v in row) for row in track))


def _clear_of_cameras(obs: Obstacle, cams: np.ndarray, margin: float = 1.0) -> bool:
    half = np.asarray(obs.size) / 2 + margin
    centers = np.asarray(obs.track)
    inside = np.all(np.abs(cams - centers) <= half, axis=1)
    return not bool(inside.any())


def _face_points(rng, lo, hi, density):
    pts = []
    size = hi - lo
    for axis in range(3):
        a, b = [i for i in range(3) if i != axis]
        area = size[a] * size[b]
        n = int(round(area * density))
        for side in (lo[axis], hi[axis]):
            p = np.empty((n, 3))
            p[:, axis] = side
            p[:, a] = rng.uniform(lo[a], hi[a], n)
            p[:, b] = rng.uniform(lo[b], hi[b], n)
            pts.append(p)
    return np.concatenate(pts)


def sample_map_cloud(scene: Scene, density: float = 10.0, ground_density: float | None = None) -> PointCloudMap:
    """Uniform surface samples of the static boxes (all six faces) and the ground.

    Obstacles are never sampled. ``ground_density`` defaults to ``density / 4``.
    """
    if not density > 0:
        raise ValueError("density must be positive")
    gd = density / 4 if ground_density is None else ground_density
    rng = np.random.default_rng([scene.seed, 3, int(round(density * 1000)), int(round(gd * 1000))])
    pts, cols = [], []
    for box in scene.static_boxes:
        p = _face_points(rng, box.lo, box.hi, density)
        pts.append(p)
        cols.append(np.tile(np.asarray(box.rgb, np.uint8), (len(p), 1)))
    if scene.ground_extent > 0 and gd > 0:
        g = scene.ground_extent
        n = int(round(g * g * gd))
        p = np.column_stack([rng.uniform(-g / 2, g / 2, n), rng.uniform(-g / 2, g / 2, n), np.zeros(n)])
        pts.append(p)
        cols.append(np.tile(np.asarray(GROUND_RGB, np.uint8), (n, 1)))
    if not pts or sum(len(p) for p in pts) == 0:
        raise ValueError("scene produced an empty map; raise the density")
    # round through float32 so the in-memory map equals the one read back from disk
    points = np.concatenate(pts).astype(np.float32).astype(np.float64)
    return PointCloudMap(points, np.concatenate(cols))


def _ray_box(origin, dirs, lo, hi):
    """Entry distance and entry face (0..5) per ray; ``inf`` when missed."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tnear = np.minimum(t1, t2)
    tfar = np.maximum(t1, t2)
    tnear = np.where(np.isnan(tnear), -np.inf, tnear)
    tfar = np.where(np.isnan(tfar), np.inf, tfar)
    t_in = tnear.max(axis=-1)
    t_out = tfar.min(axis=-1)
    axis = tnear.argmax(axis=-1)
    hit = (t_in <= t_out) & (t_in > 1e-9)
    # entering through the low face when the ray moves toward +axis
    d_axis = np.take_along_axis(dirs, axis[..., None], axis=-1)[..., 0]
    face = 2 * axis + (d_axis < 0)
    return np.where(hit, t_in, np.inf), face


def pixel_rays(pose: Pose, k: Intrinsics) -> np.ndarray:
    """World-frame ray directions through every pixel center, ``h x w x 3``."""
    u = (np.arange(k.width) + 0.5 - k.cx) / k.fx
    v = (np.arange(k.height) + 0.5 - k.cy) / k.fy
    uu, vv = np.meshgrid(u, v)
    dc = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    return dc @ pose.rotation.T


def render_color_view(scene: Scene, frame_index: int, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Flat-shaded ``h x w x 3`` uint8 view of static boxes, obstacles and ground."""
    if scene.obstacles and not 0 <= frame_index < scene.n_frames:
        raise IndexError(f"frame {frame_index} outside obstacle tracks of length {scene.n_frames}")
    dirs = pixel_rays(pose, k)
    origin = pose.t
    best = np.full(dirs.shape[:2], np.inf)
    img = np.empty(dirs.shape[:2] + (3,), dtype=np.float64)
    img[:] = SKY_RGB
    if scene.ground_extent > 0:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -origin[2] / dirs[..., 2]
        hit = (dirs[..., 2] < 0) & (tg > 1e-9)
        gx = origin[0] + tg * dirs[..., 0]
        gy = origin[1] + tg * dirs[..., 1]
        hit &= (np.abs(gx) <= scene.ground_extent / 2) & (np.abs(gy) <= scene.ground_extent / 2)
        best = np.where(hit, tg, best)
        img[hit] = GROUND_RGB
    for box in scene.boxes_at(frame_index):
        rect = _screen_rect(box, pose, k)
        if rect is None:
            continue
        v0, v1, u0, u1 = rect
        t, face = _ray_box(origin, dirs[v0:v1, u0:u1], box.lo, box.hi)
        sub_best = best[v0:v1, u0:u1]
        closer = t < sub_best
        if not closer.any():
            continue
        sub_best[closer] = t[closer]
        shade = np.asarray(FACE_SHADE)[face[closer]]
        img[v0:v1, u0:u1][closer] = np.asarray(box.rgb, np.float64) * shade[:, None]
    return np.round(img).astype(np.uint8)


def _screen_rect(box: Box, pose: Pose, k: Intrinsics):
    """Pixel rectangle ``(v0, v1, u0, u1)`` that can contain the box, or ``None`` if unseen.

    Boxes straddling the camera plane fall back to the full image.
    """
    lo, hi = box.lo, box.hi
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    pc = (corners - pose.t) @ pose.rotation
    z = pc[:, 2]
    if np.all(z <= 0):
        return None
    if np.any(z <= 1e-3):
        return 0, k.height, 0, k.width
    u = k.fx * pc[:, 0] / z + k.cx
    v = k.fy * pc[:, 1] / z + k.cy
    u0, u1 = int(np.floor(u.min())) - 1, int(np.ceil(u.max())) + 1
    v0, v1 = int(np.floor(v.min())) - 1, int(np.ceil(v.max())) + 1
    u0, v0 = max(u0, 0), max(v0, 0)
    u1, v1 = min(u1, k.width), min(v1, k.height)
    if u0 >= u1 or v0 >= v1:
        return None
    return v0, v1, u0, u1


class _FreeSpace:
    """Conservative occupancy raster of static boxes inflated by a margin."""

    res = 0.1

    def __init__(self, scene: Scene, margin: float):
        self.half = scene.extent / 2
        self.limit = self.half - margin
        n = int(math.ceil(scene.extent / self.res))
        self.occ = np.zeros((n, n), dtype=bool)
        for box in scene.static_boxes:
            i0, j0 = (np.floor((np.array(box.lo[:2]) - margin + self.half) / self.res)).astype(int)
            i1, j1 = (np.floor((np.array(box.hi[:2]) + margin + self.half) / self.res)).astype(int)
            self.occ[max(i0, 0) : max(i1 + 1, 0), max(j0, 0) : max(j1 + 1, 0)] = True

    def largest_region(self) -> np.ndarray:
        """Mask of the largest 4-connected free region (starts there never box themselves in)."""
        free = (~self.occ).astype(np.uint8)
        n, labels, stats, _ = cv2.connectedComponentsWithStats(free, connectivity=4)
        if n <= 1:
            return np.zeros_like(self.occ)
        best = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
        return labels == best

    def __call__(self, xy) -> bool:
        if abs(xy[0]) > self.limit or abs(xy[1]) > self.limit:
            return False
        return not self.occ[self.cell(xy)]

    def cell(self, xy) -> tuple[int, int]:
        n = self.occ.shape[0] - 1
        return min(int((xy[0] + self.half) / self.res), n), min(int((xy[1] + self.half) / self.res), n)


def _free(scene: Scene, xy, margin: float) -> bool:
    return _FreeSpace(scene, margin)(xy)


def sample_trajectory(
    scene: Scene,
    n_frames: int,
    seed: int,
    spacing: float = 0.5,
    height: float = 1.6,
    max_yaw_rate_deg: float = 5.0,
    clearance: float = 1.5,
    attempts: int = 200,
) -> Trajectory:
    """Forward-facing drive through free space with bounded yaw change per frame.

    Depth-first search over heading changes (smoothed random preference first)
    with a short straight-line look-ahead. Discretized (cell, heading) states
    are visited at most once, so backtracking out of dead ends stays cheap; a
    new random start is drawn when the search budget runs out.
    Raises :class:`TrajectoryError` when every attempt fails, which in practice
    means the scene is too crowded.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be at least 1")
    rng = np.random.default_rng([seed, 2])
    max_rate = math.radians(max_yaw_rate_deg)
    look = 3
    half = scene.extent / 2
    budget = 50 * n_frames
    heading_bin = max_rate / 2
    free = _FreeSpace(scene, clearance)

    def key(pos, heading):
        return (int(pos[0] // (spacing / 2)), int(pos[1] // (spacing / 2)), int((heading % (2 * math.pi)) // heading_bin))

    turns = [max_rate * (i / 3 - 1) for i in range(7)]

    def options(pos, heading, drift, seen):
        drift = 0.8 * drift + 0.2 * float(rng.uniform(-max_rate, max_rate))
        cand = sorted((min(max(drift + d, -max_rate), max_rate) for d in turns), key=lambda c: abs(c - drift))
        out = []
        for dpsi in cand:
            h = heading + dpsi
            dx, dy = spacing * math.cos(h), spacing * math.sin(h)
            nxt = (pos[0] + dx, pos[1] + dy)
            k = key(nxt, h)
            if k in seen:
                continue
            if all(free((pos[0] + dx * j, pos[1] + dy * j)) for j in range(1, look + 1)):
                seen.add(k)
                out.append((nxt, h, drift))
        return out[::-1]  # popped from the end: preferred first

    region = free.largest_region()
    for _ in range(attempts):
        pos = rng.uniform(-half, half, 2)
        if not free(pos) or not region[free.cell(pos)]:
            continue
        pos = (float(pos[0]), float(pos[1]))
        heading = rng.uniform(0, 2 * math.pi)
        path = [(pos, heading, 0.0)]
        stack = [None]  # untried alternatives for each path element
        seen = {key(pos, heading)}
        expanded = 0
        while 0 < len(path) < n_frames and expanded < budget:
            if stack[-1] is None:
                stack[-1] = options(*path[-1], seen)
                expanded += 1
            if stack[-1]:
                path.append(stack[-1].pop())
                stack.append(None)
            else:
                path.pop()
                stack.pop()
        if len(path) == n_frames:
            frames = tuple(camera_pose([p[0], p[1], height], h) for p, h, _d in path)
            return Trajectory(frames, float(spacing))
    raise TrajectoryError(
        f"could not route {n_frames} frames through the scene after {attempts} attempts; use a larger extent or fewer boxes"
    )


def default_intrinsics(height: int = 640, width: int = 832, hfov_deg: float = 80.0) -> Intrinsics:
    f = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
    return Intrinsics(f, f, width / 2, height / 2, width, height)


def default_splits(n_frames: int) -> dict[str, range]:
    """70 / 15 / 15 percent contiguous train / val / eval ranges."""
    n_train = max(1, int(round(0.70 * n_frames)))
    n_val = int(round(0.15 * n_frames))
    if n_train + n_val > n_frames:
        n_val = max(0, n_frames - n_train)
    return {
        "train": range(0, n_train),
        "val": range(n_train, n_train + n_val),
        "eval": range(n_train + n_val, n_frames),
    }


def build_benchmark(
    seed: int,
    n_frames: int,
    n_dynamic: int,
    out_dir,
    *,
    n_static: int = 50,
    extent: float = 60.0,
    height: int = 640,
    width: int = 832,
    density: float = 10.0,
    ground_density: float | None = None,
    splits: dict[str, range] | None = None,
    perturbation: PerturbationSpec | None = None,
    spacing: float = 0.5,
):
    """Write a benchmark directory in the dataset layout and return its manifest.

    The static twin (``n_dynamic = 0``) of the same seed has the same map,
    trajectory and poses; only the images differ. The manifest is written last.
    """
    from mapfuse.pipeline.dataset import DatasetManifest, write_manifest, write_poses

    out = Path(out_dir)
    static = generate_scene(seed, n_static, 0, extent, n_frames)
    traj = sample_trajectory(static, n_frames, seed, spacing=spacing)
    scene = generate_scene(seed, n_static, n_dynamic, extent, n_frames, route=traj) if n_dynamic else static
    cloud = sample_map_cloud(static, density, ground_density)
    k = default_intrinsics(height, width)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        save_map(out / "map.pcm", cloud)
        write_poses(out / "poses.csv", traj.frames)
        for i, pose in enumerate(traj.frames):
            img = render_color_view(scene, i, pose, k)
            Image.fromarray(img).save(out / "images" / f"{i:06d}.png", optimize=False)
    except OSError as exc:
        raise OSError(f"failed writing benchmark under {out}: {exc}") from exc
    manifest = DatasetManifest(
        root=out,
        map_path=out / "map.pcm",
        poses_path=out / "poses.csv",
        image_dir=out / "images",
        intrinsics=k,
        recipe="none",
        splits=splits if splits is not None else default_splits(n_frames),
        perturbation=perturbation if perturbation is not None else PerturbationSpec(0.60, 0.0, seed),
        extra={"n_dynamic": str(n_dynamic), "n_static": str(n_static), "extent": f"{extent:g}"},
    )
    write_manifest(out / "manifest.cfg", manifest)
    return manifest
