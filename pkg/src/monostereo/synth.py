"""Procedural textured scenes with exact depth, pose and optical flow.

Scenes are built from planes, rectangles and spheres expressed in the source
camera frame (the world frame).  Depth comes from analytic ray intersection,
images from supersampled rendering of a view-independent (Lambertian) shading
of 3D value noise, and flow from the exact forward projection of depth.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics, RelativePose, pixel_grid, rotation_matrix
from .errors import InvalidSpec
from .pyramid import FlowField
from .triangulation import DepthMap

MAX_TARGETS = 6
OCCLUSION_TOLERANCE = 0.01
_LIGHT = np.array([0.3, -0.5, -0.8]) / np.linalg.norm([0.3, -0.5, -0.8])


@dataclass
class SceneSpec:
    width: int = 320
    height: int = 256
    fx: float = 200.0
    fy: float = 200.0
    cx: Optional[float] = None
    cy: Optional[float] = None
    n_primitives: int = 6
    d_min: float = 3.0
    d_max: float = 10.0
    octaves: int = 4
    texture_frequency: float = 1.5
    textureless: bool = False
    baseline: float = 0.4
    rotation_deg: float = 1.0
    n_targets: int = 1
    trajectory: str = "arc"
    supersample: int = 2
    background: bool = True
    primitives: Optional[list] = None
    target_centers: Optional[list] = None

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise InvalidSpec(f"bad image size {self.width}x{self.height}")
        if not (self.d_min > 0):
            raise InvalidSpec(f"d_min must be positive, got {self.d_min}")
        if not (self.d_min < self.d_max):
            raise InvalidSpec(f"need d_min < d_max, got [{self.d_min}, {self.d_max}]")
        if self.primitives is None and self.n_primitives <= 0 and not self.background:
            raise InvalidSpec("scene has no primitives")
        if self.primitives is not None and len(self.primitives) == 0:
            raise InvalidSpec("scene has no primitives")
        if self.n_primitives < 0:
            raise InvalidSpec(f"n_primitives must be >= 0, got {self.n_primitives}")
        if not 1 <= self.n_targets <= MAX_TARGETS:
            raise InvalidSpec(f"n_targets must be in 1..{MAX_TARGETS}, got {self.n_targets}")
        if self.octaves < 1:
            raise InvalidSpec(f"octaves must be >= 1, got {self.octaves}")
        if self.supersample < 1:
            raise InvalidSpec(f"supersample must be >= 1, got {self.supersample}")
        if self.trajectory not in ("arc", "lateral", "forward"):
            raise InvalidSpec(f"unknown trajectory {self.trajectory!r}")
        if self.target_centers is not None and len(self.target_centers) != self.n_targets:
            raise InvalidSpec("target_centers must list one centre per target")
        if self.baseline <= 0 and self.target_centers is None:
            raise InvalidSpec(f"baseline must be positive, got {self.baseline}")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        cx = self.width / 2.0 if self.cx is None else self.cx
        cy = self.height / 2.0 if self.cy is None else self.cy
        return CameraIntrinsics(self.fx, self.fy, cx, cy, self.width, self.height)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise InvalidSpec(f"unknown scene key(s): {', '.join(unknown)}")
        for f in fields(cls):
            if f.name in d:
                _check_type(f.name, d[f.name], f.default)
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_type(key: str, value, default) -> None:
    if default is None:  # optional numbers or lists
        ok = value is None or isinstance(value, (int, float, list)) and not isinstance(value, bool)
    elif isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise InvalidSpec(f"scene key {key!r} has the wrong type ({type(value).__name__})")


# ---------------------------------------------------------------- primitives


def plane(point, normal, color=(0.8, 0.8, 0.8), u_axis=None, half_extent=None, tex=0) -> dict:
    """Plane through ``point``; with ``half_extent=(a, b)`` a rectangle."""
    n = np.asarray(normal, dtype=float)
    n = n / np.linalg.norm(n)
    if u_axis is None:
        helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        u_axis = np.cross(helper, n)
    u = np.asarray(u_axis, dtype=float)
    u = u - (u @ n) * n
    u = u / np.linalg.norm(u)
    return {
        "kind": "plane",
        "point": [float(v) for v in point],
        "normal": n.tolist(),
        "u_axis": u.tolist(),
        "half_extent": None if half_extent is None else [float(v) for v in half_extent],
        "color": [float(c) for c in color],
        "tex": int(tex),
    }


def sphere(center, radius, color=(0.8, 0.8, 0.8), tex=0) -> dict:
    return {
        "kind": "sphere",
        "center": [float(v) for v in center],
        "radius": float(radius),
        "color": [float(c) for c in color],
        "tex": int(tex),
    }


def _intersect(prim: dict, o: np.ndarray, d: np.ndarray):
    """Ray parameter and world normal of the first hit (inf where missed)."""
    if prim["kind"] == "plane":
        p0 = np.asarray(prim["point"])
        n = np.asarray(prim["normal"])
        nd = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = ((p0 - o) @ n) / nd
        hit = np.isfinite(lam) & (lam > 1e-9) & (np.abs(nd) > 1e-12)
        if prim["half_extent"] is not None:
            u = np.asarray(prim["u_axis"])
            v = np.cross(n, u)
            X = o + np.where(hit, lam, 0.0)[..., None] * d - p0
            a, b = prim["half_extent"]
            hit &= (np.abs(X @ u) <= a) & (np.abs(X @ v) <= b)
        lam = np.where(hit, lam, np.inf)
        normal = np.broadcast_to(n, d.shape)
        return lam, normal
    c = np.asarray(prim["center"])
    r = prim["radius"]
    oc = o - c
    a = np.sum(d * d, axis=-1)
    b = 2.0 * (d @ oc)
    cc = float(oc @ oc) - r * r
    disc = b * b - 4 * a * cc
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    lam1 = (-b - sq) / (2 * a)
    lam2 = (-b + sq) / (2 * a)
    lam = np.where(lam1 > 1e-9, lam1, lam2)
    hit &= lam > 1e-9
    lam = np.where(hit, lam, np.inf)
    X = o + np.where(hit, lam, 0.0)[..., None] * d
    normal = (X - c) / r
    return lam, normal


def _hash(ix, iy, iz, key):
    """Counter-based integer hash of lattice coordinates -> uniform [0, 1)."""
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            ^ iy.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            ^ iz.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
            ^ np.uint64(key & 0xFFFFFFFFFFFFFFFF)
        )
        h ^= h >> np.uint64(30)
        h *= np.uint64(0xBF58476D1CE4E5B9)
        h ^= h >> np.uint64(27)
        h *= np.uint64(0x94D049BB133111EB)
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(X: np.ndarray, key: int, octaves: int, frequency: float) -> np.ndarray:
    """Fractal 3D value noise in [0, 1] at world points (..., 3)."""
    total = np.zeros(X.shape[:-1])
    amp_sum = 0.0
    amp = 1.0
    for o in range(octaves):
        P = X * (frequency * 2.0**o)
        i0 = np.floor(P)
        f = P - i0
        f = f * f * f * (f * (f * 6 - 15) + 10)
        i0 = i0.astype(np.int64)
        k = key * 7919 + o * 104729
        acc = 0.0
        for dz in (0, 1):
            wz = f[..., 2] if dz else 1 - f[..., 2]
            for dy in (0, 1):
                wy = f[..., 1] if dy else 1 - f[..., 1]
                for dx in (0, 1):
                    wx = f[..., 0] if dx else 1 - f[..., 0]
                    acc = acc + wx * wy * wz * _hash(
                        i0[..., 0] + dx, i0[..., 1] + dy, i0[..., 2] + dz, k
                    )
        total += amp * acc
        amp_sum += amp
        amp *= 0.75
    return total / amp_sum


@dataclass
class Hit:
    depth: np.ndarray
    point: np.ndarray
    normal: np.ndarray
    prim: np.ndarray


def cast(primitives: list, K: CameraIntrinsics, pose: RelativePose, pts: np.ndarray) -> Hit:
    """Cast camera rays through pixels ``pts`` (..., 2) of a camera at ``pose``.

    ``pose`` maps world points into the camera frame.  The ray parameter is
    scaled so that it equals the camera-frame z depth.
    """
    R = pose.R
    centre = -R.T @ pose.t
    rays_cam = np.concatenate(
        [(pts[..., 0:1] - K.cx) / K.fx, (pts[..., 1:2] - K.cy) / K.fy, np.ones(pts.shape[:-1] + (1,))],
        axis=-1,
    )
    d = rays_cam @ R
    best = np.full(pts.shape[:-1], np.inf)
    normal = np.zeros(pts.shape[:-1] + (3,))
    idx = np.full(pts.shape[:-1], -1, dtype=np.int64)
    for i, prim in enumerate(primitives):
        lam, n = _intersect(prim, centre, d)
        closer = lam < best
        best = np.where(closer, lam, best)
        normal = np.where(closer[..., None], n, normal)
        idx = np.where(closer, i, idx)
    point = centre + np.where(np.isfinite(best), best, 0.0)[..., None] * d
    return Hit(best, point, normal, idx)


def render_depth(primitives, K: CameraIntrinsics, pose: RelativePose) -> np.ndarray:
    return cast(primitives, K, pose, pixel_grid(K.width, K.height)).depth


def render_image(primitives, K: CameraIntrinsics, pose: RelativePose, spec: SceneSpec, seed: int) -> np.ndarray:
    """Supersampled 8-bit RGB rendering."""
    s = spec.supersample
    offs = (np.arange(s) + 0.5) / s
    acc = np.zeros((K.height, K.width, 3))
    base = pixel_grid(K.width, K.height) - 0.5
    colors = np.array([p["color"] for p in primitives] + [[0.0, 0.0, 0.0]])
    for oy in offs:
        for ox in offs:
            pts = base + np.array([ox, oy])
            hit = cast(primitives, K, pose, pts)
            shade = np.abs(hit.normal @ _LIGHT)
            albedo = colors[hit.prim]
            if spec.textureless:
                tex = np.full(hit.depth.shape, 0.7)
            else:
                tex = np.zeros(hit.depth.shape)
                for i, prim in enumerate(primitives):
                    sel = hit.prim == i
                    if np.any(sel):
                        tex[sel] = value_noise(
                            hit.point[sel], seed * 1000 + prim["tex"], spec.octaves, spec.texture_frequency
                        )
            val = albedo * ((0.15 + 0.85 * tex) * (0.55 + 0.45 * shade))[..., None]
            val[hit.prim < 0] = 0.0
            acc += val
    acc /= s * s
    return np.clip(np.round(acc * 255.0), 0, 255).astype(np.uint8)


def look_at(centre, target, jitter_r=None) -> RelativePose:
    """World-to-camera pose of a camera at ``centre`` looking at ``target`` (y down)."""
    centre = np.asarray(centre, dtype=float)
    z = np.asarray(target, dtype=float) - centre
    z /= np.linalg.norm(z)
    x = np.cross([0.0, 1.0, 0.0], z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    if jitter_r is not None:
        R = rotation_matrix(jitter_r) @ R
    return RelativePose.from_rt(R, -R @ centre)


def _random_primitives(spec: SceneSpec, rng: np.random.Generator) -> list:
    K = spec.intrinsics
    prims = []
    span = spec.d_max - spec.d_min
    if spec.background:
        tilt = rng.uniform(-0.2, 0.2, size=2)
        normal = np.array([tilt[0], tilt[1], -1.0])
        prims.append(plane([0.0, 0.0, spec.d_min + 0.85 * span], normal,
                           color=rng.uniform(0.5, 1.0, 3), tex=0))
    half_w = K.width / (2 * K.fx)
    half_h = K.height / (2 * K.fy)
    for i in range(spec.n_primitives):
        z = rng.uniform(spec.d_min + 0.05 * span, spec.d_min + 0.6 * span)
        x = rng.uniform(-0.8, 0.8) * half_w * z
        y = rng.uniform(-0.8, 0.8) * half_h * z
        color = rng.uniform(0.4, 1.0, 3)
        size = z * rng.uniform(0.1, 0.25)
        if rng.uniform() < 0.5:
            prims.append(sphere([x, y, z + size], size, color=color, tex=i + 1))
        else:
            n = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6), -1.0])
            prims.append(plane([x, y, z], n, color=color, u_axis=[1.0, rng.uniform(-0.5, 0.5), 0.0],
                               half_extent=(size * rng.uniform(1.0, 2.0), size * rng.uniform(1.0, 2.0)),
                               tex=i + 1))
    return prims


def _trajectory(spec: SceneSpec, rng: np.random.Generator) -> list[RelativePose]:
    poses = []
    fix = np.array([0.0, 0.0, 0.5 * (spec.d_min + spec.d_max)])
    phase = rng.uniform(0, 2 * math.pi)
    for i in range(spec.n_targets):
        jitter = None
        if spec.target_centers is not None:
            c = np.asarray(spec.target_centers[i], dtype=float)
        elif spec.trajectory == "lateral":
            c = np.array([spec.baseline * (i + 1), 0.0, 0.0])
        elif spec.trajectory == "forward":
            c = np.array([0.0, 0.0, spec.baseline * (i + 1)])
        else:
            phi = phase + 2 * math.pi * i / spec.n_targets
            c = spec.baseline * np.array([math.cos(phi), 0.6 * math.sin(phi), rng.uniform(-0.2, 0.2)])
        if spec.trajectory == "arc" and spec.target_centers is None:
            if spec.rotation_deg > 0:
                jitter = rng.normal(size=3)
                jitter *= math.radians(spec.rotation_deg) * rng.uniform(0.3, 1.0) / np.linalg.norm(jitter)
            poses.append(look_at(c, fix, jitter))
        else:
            poses.append(RelativePose(np.zeros(3), -c))
    return poses


def ground_truth_flow(
    depth_s: DepthMap, pose_s_to_t: RelativePose, K_s: CameraIntrinsics, K_t: CameraIntrinsics,
    depth_t: np.ndarray,
) -> tuple[FlowField, np.ndarray]:
    """Exact flow of every source pixel and its occlusion mask (True = occluded).

    A pixel is occluded when its 3D point leaves the target image, lands
    behind the target camera, or lies more than 1% behind the target depth
    buffer at any pixel in the bilinear support of its projection.
    """
    d = depth_s.depth if isinstance(depth_s, DepthMap) else np.asarray(depth_s, dtype=float)
    depth_t = depth_t.depth if isinstance(depth_t, DepthMap) else np.asarray(depth_t, dtype=float)
    h, w = d.shape
    x = pixel_grid(w, h)
    M = K_t.matrix @ pose_s_to_t.R @ K_s.inverse
    a = M[:, 0] * x[..., 0, None] + M[:, 1] * x[..., 1, None] + M[:, 2]
    p = a * d[..., None] + K_t.matrix @ pose_s_to_t.t
    z_t = p[..., 2]
    safe = np.where(np.abs(z_t) > 1e-12, z_t, 1.0)
    tgt = p[..., 0:2] / safe[..., None]
    flow = tgt - x
    Ht, Wt = depth_t.shape
    ix = tgt[..., 0] - 0.5
    iy = tgt[..., 1] - 0.5
    inside = (z_t > 1e-12) & (tgt[..., 0] >= 0) & (tgt[..., 0] < Wt) & (tgt[..., 1] >= 0) & (tgt[..., 1] < Ht)
    x0 = np.floor(np.clip(ix, 0, Wt - 1)).astype(np.intp)
    y0 = np.floor(np.clip(iy, 0, Ht - 1)).astype(np.intp)
    fx = np.clip(ix, 0, Wt - 1) - x0
    fy = np.clip(iy, 0, Ht - 1) - y0
    x1 = np.minimum(x0 + 1, Wt - 1)
    y1 = np.minimum(y0 + 1, Ht - 1)
    # nearest surface among the bilinear support; corners whose weight is
    # round-off do not count
    zbuf = np.full(d.shape, np.inf)
    for yy, xx, wgt in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x1, fx * (1 - fy)),
                        (y1, x0, (1 - fx) * fy), (y1, x1, fx * fy)):
        zbuf = np.where(wgt > 1e-9, np.minimum(zbuf, depth_t[yy, xx]), zbuf)
    occluded = ~inside | (z_t > (1.0 + OCCLUSION_TOLERANCE) * zbuf)
    flow = np.where(np.isfinite(flow), flow, 0.0)
    return FlowField(flow, ~occluded, 0), occluded


@dataclass
class SceneSample:
    spec: SceneSpec
    seed: int
    primitives: list
    intrinsics: list  # per frame, frame 0 = source
    poses: list  # world (= source frame) -> frame
    images: list
    depths: list  # DepthMap per frame
    flows: list  # FlowField per target (source -> target i + 1)
    occlusions: list

    @property
    def n_targets(self) -> int:
        return len(self.poses) - 1

    def pose_to(self, target: int) -> RelativePose:
        """Source-to-target pose of target ``target`` (1-based frame index)."""
        return self.poses[target]

    def at_level(self, level: int) -> "LevelTruth":
        """Ground truth re-cast at the pixel centres of pyramid level ``level``."""
        Ks = [K.at_level(level) for K in self.intrinsics]
        depths = [render_depth(self.primitives, K, P) for K, P in zip(Ks, self.poses)]
        flows, occ = [], []
        for i in range(1, len(self.poses)):
            f, o = ground_truth_flow(depths[0], self.poses[i], Ks[0], Ks[i], depths[i])
            f.level = level
            flows.append(f)
            occ.append(o)
        return LevelTruth(level, Ks, depths, flows, occ)


@dataclass
class LevelTruth:
    level: int
    intrinsics: list
    depths: list  # raw arrays
    flows: list
    occlusions: list


def generate_scene(spec: SceneSpec, seed: int, render: bool = True) -> SceneSample:
    """Deterministic scene for ``seed``; ``render=False`` skips the images."""
    spec.validate()
    rng = np.random.default_rng(seed)
    if spec.primitives is not None:
        prims = [dict(p) for p in spec.primitives]
    else:
        prims = _random_primitives(spec, rng)
    target_poses = _trajectory(spec, rng)
    K = spec.intrinsics
    poses = [RelativePose.identity()] + target_poses
    intr = [K] * len(poses)
    depth_arrays = [render_depth(prims, K, P) for P in poses]
    if not np.all(np.isfinite(depth_arrays[0])):
        raise InvalidSpec("scene does not cover the whole source view")
    depths = [DepthMap(d, np.isfinite(d) & (d > 0)) for d in depth_arrays]
    flows, occ = [], []
    for i in range(1, len(poses)):
        f, o = ground_truth_flow(depth_arrays[0], poses[i], K, K, depth_arrays[i])
        flows.append(f)
        occ.append(o)
    images = [render_image(prims, K, P, spec, seed) if render else None for P in poses]
    return SceneSample(spec, seed, prims, intr, poses, images, depths, flows, occ)
