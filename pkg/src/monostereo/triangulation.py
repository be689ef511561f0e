"""Per-pixel triangulation from flow and pose, the 8-channel triangulation
layer, near-epipole confidence and hole filling of depth maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, RelativePose, pixel_grid, rotated_rays
from .errors import AllDegenerate, DegenerateRay, NegativeDepth
from .pyramid import FlowField

OK, DEGENERATE, NEGATIVE, INVALID_FLOW = 0, 1, 2, 3

FILL_ITERATIONS = 200
FILL_TOLERANCE = 1e-6
MIN_VALID_FRACTION = 0.01
DEFAULT_MAX_RESIDUAL = 2.0
EDGE_SIGMA = 0.02
# codes drop pixels below this (ρ < 9 σ), leaving them to the fill
MIN_CONFIDENCE = 0.9


@dataclass
class TriangulationLayer:
    """Per-pixel ``[w + x, K R K^-1 [x, 1], K t]``, shape (H, W, 8)."""

    data: np.ndarray
    mask: np.ndarray
    level: int = 0
    scale_known: bool = True

    @property
    def target(self) -> np.ndarray:
        return self.data[..., 0:2]

    @property
    def rays(self) -> np.ndarray:
        return self.data[..., 2:5]

    @property
    def translation(self) -> np.ndarray:
        return self.data[..., 5:8]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass
class DepthMap:
    depth: np.ndarray
    mask: np.ndarray
    confidence: Optional[np.ndarray] = None
    filled: Optional[np.ndarray] = None
    scale_known: bool = True
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape

    def log_depth(self) -> np.ndarray:
        out = np.zeros_like(self.depth)
        out[self.mask] = np.log(self.depth[self.mask])
        return out


def make_triangulation_layer(
    flow: FlowField, K: CameraIntrinsics, pose: RelativePose
) -> TriangulationLayer:
    h, w = flow.shape
    x = pixel_grid(w, h)
    data = np.empty((h, w, 8))
    data[..., 0:2] = flow.w + x
    data[..., 2:5] = rotated_rays(K, pose.R, x)
    data[..., 5:8] = K.matrix @ pose.t
    return TriangulationLayer(data, flow.mask.copy(), flow.level, pose.scale_known)


def _solve(p, a, b):
    """Least-squares depth of the two linear equations ``alpha * d = beta``."""
    alpha = a[..., 0:2] - p * a[..., 2:3]
    beta = p * b[..., 2:3] - b[..., 0:2]
    aa = np.sum(alpha * alpha, axis=-1)
    ab = np.sum(alpha * beta, axis=-1)
    scale = np.linalg.norm(a, axis=-1) * (1.0 + np.linalg.norm(p, axis=-1))
    degenerate = ~(np.sqrt(aa) > 1e-12 * scale)
    # a ray parallel to the baseline maps every depth to one target point
    along = np.linalg.norm(np.cross(a, b), axis=-1)
    degenerate |= ~(along > 1e-12 * np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        d = np.where(degenerate, 0.0, ab / np.where(degenerate, 1.0, aa))
    d = np.nan_to_num(d, nan=0.0, posinf=0.0, neginf=0.0)
    z_t = a[..., 2] * d + b[..., 2]
    status = np.full(d.shape, OK, dtype=np.int8)
    status[degenerate] = DEGENERATE
    status[(status == OK) & ~((d > 0) & (z_t > 0))] = NEGATIVE
    ok = status == OK
    zz = np.where(ok, z_t, 1.0)
    proj = (a[..., 0:2] * d[..., None] + b[..., 0:2]) / zz[..., None]
    with np.errstate(invalid="ignore", over="ignore"):
        res = np.linalg.norm(np.where(ok[..., None], proj - p, 0.0), axis=-1)
    res = np.nan_to_num(res, nan=0.0, posinf=np.finfo(float).max)
    d = np.where(ok, d, 0.0)
    return d, res, status


def triangulate_pixel(x, w, K: CameraIntrinsics, pose: RelativePose) -> tuple[float, float]:
    """Depth of source pixel ``x`` whose match is ``x + w``; returns (depth, residual px)."""
    x = np.asarray(x, dtype=float)
    p = x + np.asarray(w, dtype=float)
    a = rotated_rays(K, pose.R, x)
    b = K.matrix @ pose.t
    d, res, status = _solve(p, a, b)
    if status == DEGENERATE:
        raise DegenerateRay(f"depth of pixel {tuple(x)} is unobservable")
    if status == NEGATIVE:
        raise NegativeDepth(f"pixel {tuple(x)} triangulates behind a camera")
    return float(d), float(res)


def triangulate_layer(tri: TriangulationLayer):
    """Vectorised triangulation: (depth, residual, status) arrays."""
    d, res, status = _solve(tri.target, tri.rays, tri.translation)
    status = np.where(tri.mask | (status != OK), status, INVALID_FLOW).astype(np.int8)
    return np.where(status == OK, d, 0.0), res, status


def _sensitivity(a, b, inv_depth):
    """|d(target pixel) / d(inverse depth)| of ``dehomogenize(a + b s)``."""
    num = b[..., 0:2] * a[..., 2:3] - a[..., 0:2] * b[..., 2:3]
    den = a[..., 2] + b[..., 2] * inv_depth
    ok = den > 0
    den = np.where(ok, den, 1.0)
    with np.errstate(over="ignore", invalid="ignore"):
        rho = np.linalg.norm(num, axis=-1) / (den * den)
    return np.where(ok & np.isfinite(rho), rho, 0.0)


def _confidence(rho, flow_noise_px):
    if flow_noise_px <= 0:
        return np.where(rho > 0, 1.0, 0.0)
    return np.clip(rho / (rho + flow_noise_px), 0.0, 1.0)


def epipole_confidence(
    x, K: CameraIntrinsics, pose: RelativePose, flow_noise_px: float, depth: Optional[float] = None
) -> float:
    """How well a flow error of ``flow_noise_px`` pins down the depth at ``x``.

    ``rho / (rho + noise)`` with ``rho`` the pixel motion per unit of inverse
    depth, evaluated at ``depth`` (infinity when omitted).  Zero at the epipole.
    """
    x = np.asarray(x, dtype=float)
    a = rotated_rays(K, pose.R, x)
    b = K.matrix @ pose.t
    s = 0.0 if depth is None or not np.isfinite(depth) else 1.0 / depth
    return float(_confidence(_sensitivity(a, b, s), flow_noise_px))


def layer_code(tri: TriangulationLayer, flow_noise_px: float, max_residual=DEFAULT_MAX_RESIDUAL):
    """Per-pixel (inverse depth, confidence, residual) of a triangulation layer.

    Degenerate, negative, masked or high-residual pixels get confidence 0,
    as do pixels whose confidence falls below ``MIN_CONFIDENCE``.
    """
    d, res, status = triangulate_layer(tri)
    ok = status == OK
    if max_residual is not None:
        ok &= res <= max_residual
    with np.errstate(divide="ignore"):
        inv = np.where(ok, 1.0 / np.where(ok, d, 1.0), 0.0)
    conf = _confidence(_sensitivity(tri.rays, tri.translation, inv), flow_noise_px)
    conf = np.where(ok & (conf >= MIN_CONFIDENCE), conf, 0.0)
    inv = np.where(conf > 0, inv, 0.0)
    res = np.where(status == OK, res, 0.0)
    return inv, conf, res


def _edge_weights(image: np.ndarray, sigma: float = EDGE_SIGMA):
    """Affinities to the 4 neighbours (up, down, left, right) from colour steps.

    The step between two pixels is the largest absolute channel difference,
    so boundaries between equally bright but differently coloured surfaces
    still stop the diffusion.
    """
    img = np.asarray(image)
    img = img / 255.0 if np.issubdtype(img.dtype, np.integer) else img.astype(float)
    if img.ndim == 2:
        img = img[..., None]
    H, W = img.shape[:2]
    wts = np.zeros((4, H, W))
    wy = np.exp(-np.abs(np.diff(img, axis=0)).max(axis=-1) / sigma)
    wx = np.exp(-np.abs(np.diff(img, axis=1)).max(axis=-1) / sigma)
    wts[0, 1:, :] = wy
    wts[1, :-1, :] = wy
    wts[2, :, 1:] = wx
    wts[3, :, :-1] = wx
    return wts


def _shift(a, k):
    out = np.zeros_like(a)
    if k == 0:
        out[1:, :] = a[:-1, :]
    elif k == 1:
        out[:-1, :] = a[1:, :]
    elif k == 2:
        out[:, 1:] = a[:, :-1]
    else:
        out[:, :-1] = a[:, 1:]
    return out


def fill_log_depth(log_depth, known, confidence, image, iterations=FILL_ITERATIONS, tol=FILL_TOLERANCE):
    """Edge-aware Jacobi diffusion of log depth into the unknown pixels.

    Known pixels are fixed; each neighbour contributes with its image-edge
    affinity times its confidence (1 for pixels still being filled).
    Returns the filled map and the number of iterations run.
    """
    L = np.array(log_depth, dtype=float)
    unknown = ~known
    if not unknown.any():
        return L, 0
    _, (iy, ix) = ndimage.distance_transform_edt(unknown, return_indices=True)
    L[unknown] = L[iy[unknown], ix[unknown]]
    edge = _edge_weights(image)
    node = np.where(known, confidence, 1.0)
    wts = np.stack([edge[k] * _shift(node, k) for k in range(4)])
    total = wts.sum(axis=0)
    active = unknown & (total > 0)
    total = np.where(active, total, 1.0)
    n = 0
    for n in range(1, iterations + 1):
        acc = sum(wts[k] * _shift(L, k) for k in range(4))
        new = np.where(active, acc / total, L)
        delta = float(np.max(np.abs(new - L)))
        L = new
        if delta < tol:
            break
    return L, n


def depth_from_code(inv_depth, confidence, image, scale_known=True) -> DepthMap:
    """Invert confident inverse depths and diffuse the rest (shared with fusion)."""
    known = confidence > 0
    if known.sum() < MIN_VALID_FRACTION * known.size:
        raise AllDegenerate(f"only {int(known.sum())} of {known.size} pixels triangulated")
    depth = np.zeros(known.shape)
    depth[known] = 1.0 / inv_depth[known]
    logd = np.zeros(known.shape)
    logd[known] = np.log(depth[known])
    image = np.asarray(image)
    if image.shape[:2] != known.shape:
        raise ValueError(f"image {image.shape[:2]} does not match depth {known.shape}")
    filled_log, iters = fill_log_depth(logd, known, confidence, image)
    out = np.where(known, depth, np.exp(filled_log))
    return DepthMap(
        out,
        np.isfinite(out) & (out > 0),
        confidence=np.array(confidence, dtype=float),
        filled=~known,
        scale_known=scale_known,
        meta={"fill_iterations": iters, "fill_cap": FILL_ITERATIONS},
    )


def depth_from_pair(tri: TriangulationLayer, image, flow_noise_px: float = 0.5) -> DepthMap:
    inv, conf, _ = layer_code(tri, flow_noise_px)
    return depth_from_code(inv, conf, image, tri.scale_known)


def depth_from_flow(flow: FlowField, K: CameraIntrinsics, pose: RelativePose, image,
                    flow_noise_px: float = 0.5) -> DepthMap:
    return depth_from_pair(make_triangulation_layer(flow, K, pose), image, flow_noise_px)


def reproject(depth: np.ndarray, K: CameraIntrinsics, pose: RelativePose) -> np.ndarray:
    """Target pixel of every source pixel given its depth (forward model)."""
    h, w = depth.shape
    x = pixel_grid(w, h)
    a = rotated_rays(K, pose.R, x)
    p = a * depth[..., None] + K.matrix @ pose.t
    with np.errstate(divide="ignore", invalid="ignore"):
        return p[..., 0:2] / p[..., 2:3]
