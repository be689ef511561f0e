"""Image pyramids, patch descriptors, epipolar cost volumes and coarse-to-fine flow."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy import ndimage

from .camera import CameraIntrinsics, RelativePose, fundamental_matrix, pixel_grid
from .errors import ImageTooSmall, MonoStereoError

logger = logging.getLogger(__name__)

NUM_LEVELS = 6
PATCH = 5
# level -> (h_max, v_max), coarsest first
SEARCH_SCHEDULE = {5: (4, 4), 4: (4, 4), 3: (4, 4), 2: (4, 2), 1: (3, 1)}
# camera motion is only estimated from this level downward
FIRST_POSE_LEVEL = 3
# classical stand-ins for a decoder's spatial context
COST_WINDOW = 3
MEDIAN_WINDOW = 5
POLISH_STEPS = (0.5, 0.25, 0.125)
FB_TOLERANCE = 0.5

_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class ImagePyramid:
    levels: list[np.ndarray]
    intrinsics: list[CameraIntrinsics]

    def __len__(self):
        return len(self.levels)

    def shape(self, level: int) -> tuple[int, int]:
        return self.levels[level].shape[:2]


@dataclass
class FeatureMap:
    desc: np.ndarray  # (H, W, N), unit norm or zero
    level: int

    @property
    def dim(self) -> int:
        return self.desc.shape[-1]


@dataclass
class FlowField:
    """Dense flow ``w`` (H, W, 2) in pixels of its own pyramid level."""

    w: np.ndarray
    mask: np.ndarray
    level: int = 0
    score: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.w.shape[:2] != self.mask.shape or self.w.shape[-1] != 2:
            raise ValueError(f"flow {self.w.shape} and mask {self.mask.shape} disagree")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @classmethod
    def zeros(cls, shape, level: int = 0) -> "FlowField":
        h, w = shape
        return cls(np.zeros((h, w, 2)), np.ones((h, w), dtype=bool), level)

    def endpoints(self) -> np.ndarray:
        h, w = self.shape
        return pixel_grid(w, h) + self.w


@dataclass
class CostVolume:
    """Match scores of each source pixel against a (2h+1)(2v+1) candidate grid.

    ``offsets[c] = (h, v)`` in row-major (v, h) order; the target position of
    candidate ``c`` is ``x + center + h * basis_h + v * basis_v``.
    """

    scores: np.ndarray  # (H, W, C)
    valid: np.ndarray  # (H, W, C)
    offsets: np.ndarray  # (C, 2) int
    center: np.ndarray  # (H, W, 2)
    basis_h: np.ndarray  # (H, W, 2) unit, along the epipolar line
    basis_v: np.ndarray  # (H, W, 2) unit, across the epipolar line
    level: int
    h_max: int
    v_max: int
    textured: Optional[np.ndarray] = None

    @property
    def num_candidates(self) -> int:
        return self.offsets.shape[0]


def _box_down(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    ph, pw = h % 2, w % 2
    if ph or pw:
        pad = [(0, ph), (0, pw)] + [(0, 0)] * (img.ndim - 2)
        img = np.pad(img, pad, mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def as_float_image(image) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(float) / 255.0
    return image.astype(float)


def build_pyramid(image, K: CameraIntrinsics) -> ImagePyramid:
    img = as_float_image(image)
    h, w = img.shape[:2]
    if (w, h) != (K.width, K.height):
        raise ValueError(f"image {w}x{h} does not match intrinsics {K.width}x{K.height}")
    coarse = K.at_level(NUM_LEVELS - 1)
    if w < 32 or h < 32 or coarse.width < 4 or coarse.height < 4:
        raise ImageTooSmall(
            f"{w}x{h} image gives a {coarse.width}x{coarse.height} coarsest level (need >= 4 px)"
        )
    levels = [img]
    for _ in range(1, NUM_LEVELS):
        levels.append(_box_down(levels[-1]))
    return ImagePyramid(levels, [K.at_level(i) for i in range(NUM_LEVELS)])


def to_gray(img: np.ndarray) -> np.ndarray:
    img = as_float_image(img)
    if img.ndim == 2:
        return img
    return img @ _LUMA


def extract_features(pyramid: ImagePyramid, level: int) -> FeatureMap:
    """Zero-mean, unit-norm 5x5 grayscale patch descriptors (zero on flat patches)."""
    if not 1 <= level < NUM_LEVELS:
        raise ValueError(f"features are defined on levels 1..{NUM_LEVELS - 1}, got {level}")
    gray = to_gray(pyramid.levels[level])
    r = PATCH // 2
    padded = np.pad(gray, r, mode="edge")
    patches = np.lib.stride_tricks.sliding_window_view(padded, (PATCH, PATCH))
    desc = patches.reshape(gray.shape + (PATCH * PATCH,)).copy()
    desc -= desc.mean(axis=-1, keepdims=True)
    var = np.mean(desc * desc, axis=-1)
    norm = np.sqrt(np.sum(desc * desc, axis=-1))
    flat = var < 1e-8
    norm[flat] = 1.0
    desc /= norm[..., None]
    desc[flat] = 0.0
    return FeatureMap(desc, level)


def regularize_flow(flow: FlowField, F) -> FlowField:
    """Move every flow endpoint to the closest point on its epipolar line.

    Pixels whose epipolar line is degenerate keep their flow and are masked out.
    """
    F = np.asarray(F, dtype=float)
    h, w = flow.shape
    x = pixel_grid(w, h)
    e = F[:, 0] * x[..., 0, None] + F[:, 1] * x[..., 1, None] + F[:, 2]
    ex, ey, ez = e[..., 0], e[..., 1], e[..., 2]
    n2 = ex * ex + ey * ey
    bad = n2 < 1e-18
    n2 = np.where(bad, 1.0, n2)
    xp = x[..., 0] + flow.w[..., 0]
    yp = x[..., 1] + flow.w[..., 1]
    px = (xp * ey * ey - yp * ex * ey - ex * ez) / n2
    py = (yp * ex * ex - xp * ex * ey - ey * ez) / n2
    wr = np.stack([px - x[..., 0], py - x[..., 1]], axis=-1)
    wr[bad] = flow.w[bad]
    return FlowField(wr, flow.mask & ~bad, flow.level, flow.score)


def candidate_offsets(h_max: int, v_max: int) -> np.ndarray:
    """Integer (h, v) steps in row-major (v, h) order."""
    hs = np.arange(-h_max, h_max + 1)
    vs = np.arange(-v_max, v_max + 1)
    vv, hh = np.meshgrid(vs, hs, indexing="ij")
    return np.stack([hh.ravel(), vv.ravel()], axis=-1)


def candidate_positions(x, w_r, line, h_max: int, v_max: int) -> np.ndarray:
    """Target-pixel candidates for one source pixel, shape ((2h+1)(2v+1), 2).

    Steps are one pixel long along (h) and across (v) the epipolar line.
    """
    base = np.asarray(x, dtype=float) + np.asarray(w_r, dtype=float)
    bh = line.direction
    bv = line.normal
    offs = candidate_offsets(h_max, v_max)
    return base + offs[:, :1] * bh + offs[:, 1:] * bv


@dataclass
class Candidates:
    center: np.ndarray  # (H, W, 2) flow at the grid centre
    basis_h: np.ndarray
    basis_v: np.ndarray
    offsets: np.ndarray
    h_max: int
    v_max: int
    usable: np.ndarray  # (H, W) pixels with a well-defined basis

    def positions(self) -> np.ndarray:
        h, w = self.center.shape[:2]
        base = pixel_grid(w, h) + self.center
        oh = self.offsets[:, 0].astype(float)
        ov = self.offsets[:, 1].astype(float)
        return (
            base[:, :, None, :]
            + oh[None, None, :, None] * self.basis_h[:, :, None, :]
            + ov[None, None, :, None] * self.basis_v[:, :, None, :]
        )


def grid_candidates(flow: FlowField, h_max: int, v_max: int) -> Candidates:
    """Axis-aligned search grid around ``flow`` (no epipolar prior)."""
    h, w = flow.shape
    bh = np.zeros((h, w, 2))
    bh[..., 0] = 1.0
    bv = np.zeros((h, w, 2))
    bv[..., 1] = 1.0
    return Candidates(
        flow.w.copy(), bh, bv, candidate_offsets(h_max, v_max), h_max, v_max,
        np.ones((h, w), dtype=bool),
    )


def epipolar_candidates(flow: FlowField, F, h_max: int, v_max: int) -> Candidates:
    """Search grid aligned with the epipolar lines, centred on the regularized flow.

    Pixels with a degenerate line fall back to the axis-aligned basis around
    their unregularized flow.
    """
    wr = regularize_flow(flow, F)
    h, w = flow.shape
    x = pixel_grid(w, h)
    F = np.asarray(F, dtype=float)
    e = F[:, 0] * x[..., 0, None] + F[:, 1] * x[..., 1, None] + F[:, 2]
    n = np.sqrt(e[..., 0] ** 2 + e[..., 1] ** 2)
    bad = n * n < 1e-18
    n = np.where(bad, 1.0, n)
    bh = np.stack([e[..., 1] / n, -e[..., 0] / n], axis=-1)
    bv = np.stack([e[..., 0] / n, e[..., 1] / n], axis=-1)
    bh[bad] = (1.0, 0.0)
    bv[bad] = (0.0, 1.0)
    return Candidates(wr.w, bh, bv, candidate_offsets(h_max, v_max), h_max, v_max, ~bad)


def _bilinear_gather(desc: np.ndarray, pos: np.ndarray):
    """Bilinearly sample (H, W, N) descriptors at continuous pixel positions (..., 2).

    Returns samples (..., N) and a validity mask; positions whose bilinear
    support leaves the image are invalid (and sampled with clamping).
    """
    H, W = desc.shape[:2]
    ix = pos[..., 0] - 0.5
    iy = pos[..., 1] - 0.5
    valid = (ix >= 0) & (ix <= W - 1) & (iy >= 0) & (iy <= H - 1)
    ix = np.clip(np.nan_to_num(ix), 0, W - 1)
    iy = np.clip(np.nan_to_num(iy), 0, H - 1)
    x0 = np.minimum(np.floor(ix).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(iy).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = (ix - x0)[..., None]
    ay = (iy - y0)[..., None]
    out = (
        (1 - ay) * ((1 - ax) * desc[y0, x0] + ax * desc[y0, x1])
        + ay * ((1 - ax) * desc[y1, x0] + ax * desc[y1, x1])
    )
    return out, valid


def sample_bilinear(img: np.ndarray, pos: np.ndarray):
    """Bilinear lookup of an (H, W) or (H, W, C) raster at continuous positions."""
    squeeze = img.ndim == 2
    arr = img[..., None] if squeeze else img
    out, valid = _bilinear_gather(arr.astype(float), pos)
    return (out[..., 0] if squeeze else out), valid


def build_cost_volume(f_s: FeatureMap, f_t: FeatureMap, candidates: Candidates) -> CostVolume:
    """Correlation ``(1/N) f_s . f_t`` of each source pixel with its candidates.

    Descriptors are stored at unit norm; the ``1/N`` factor applies to features
    scaled to norm ``sqrt(N)``, so the score reduces to the unit-vector dot
    product and lies in [-1, 1].  Out-of-image candidates score -1.
    """
    if f_s.level != f_t.level or f_s.desc.shape != f_t.desc.shape:
        raise ValueError("source and target features must come from the same level")
    pos = candidates.positions()
    C = pos.shape[2]
    H, W = f_s.desc.shape[:2]
    scores = np.empty((H, W, C))
    valid = np.empty((H, W, C), dtype=bool)
    for c in range(C):
        sampled, ok = _bilinear_gather(f_t.desc, pos[:, :, c])
        norm = np.sqrt(np.einsum("hwn,hwn->hw", sampled, sampled))
        s = np.einsum("hwn,hwn->hw", f_s.desc, sampled) / np.where(norm > 1e-12, norm, 1.0)
        scores[:, :, c] = np.where(ok, s, -1.0)
        valid[:, :, c] = ok
    np.clip(scores, -1.0, 1.0, out=scores)
    textured = np.any(f_s.desc != 0.0, axis=-1)
    return CostVolume(
        scores, valid, candidates.offsets, candidates.center, candidates.basis_h,
        candidates.basis_v, f_s.level, candidates.h_max, candidates.v_max, textured,
    )


def _priority(offsets: np.ndarray) -> np.ndarray:
    # smallest |h|, then smallest |v|, negative before positive
    h, v = offsets[:, 0], offsets[:, 1]
    return np.lexsort((v, h, np.abs(v), np.abs(h)))


def _parabola(cm, c0, cp):
    den = cm - 2.0 * c0 + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        d = np.where(den < 0, 0.5 * (cm - cp) / den, 0.0)
    return np.clip(d, -0.5, 0.5)


def aggregate_costs(cost: CostVolume, window: int) -> CostVolume:
    """Box-average each candidate's score over a ``window`` x ``window`` neighbourhood."""
    if window <= 1:
        return cost
    scores = ndimage.uniform_filter(cost.scores, size=(window, window, 1), mode="nearest")
    return replace(cost, scores=scores)


def median_smooth(flow: FlowField, window: int) -> FlowField:
    """Per-component median filter of the flow vectors (outlier suppression)."""
    if window <= 1:
        return flow
    w = np.stack([ndimage.median_filter(flow.w[..., i], size=window, mode="nearest") for i in range(2)], -1)
    return replace(flow, w=w)


def estimate_flow_level(cost: CostVolume, w_init: FlowField, window: int = 1) -> FlowField:
    """Winner-take-all over the candidates plus 1D parabolic subpixel refinement.

    With ``window > 1`` the scores are first box-aggregated spatially.
    """
    cost = aggregate_costs(cost, window)
    H, W, C = cost.scores.shape
    order = _priority(cost.offsets)
    best = order[np.argmax(cost.scores[:, :, order], axis=-1)]
    rows, cols = np.indices((H, W))
    s0 = cost.scores[rows, cols, best]
    win_valid = cost.valid[rows, cols, best]
    nh = 2 * cost.h_max + 1
    hi = cost.offsets[best, 0]
    vi = cost.offsets[best, 1]

    def neighbour(dh, dv):
        h2, v2 = hi + dh, vi + dv
        inside = (np.abs(h2) <= cost.h_max) & (np.abs(v2) <= cost.v_max)
        idx = (np.clip(v2, -cost.v_max, cost.v_max) + cost.v_max) * nh + (
            np.clip(h2, -cost.h_max, cost.h_max) + cost.h_max
        )
        ok = inside & cost.valid[rows, cols, idx]
        return cost.scores[rows, cols, idx], ok

    hm, okm = neighbour(-1, 0)
    hp, okp = neighbour(1, 0)
    vm, okvm = neighbour(0, -1)
    vp, okvp = neighbour(0, 1)
    # a perfect correlation cannot be improved by interpolation
    refine = win_valid & (s0 < 1.0 - 1e-12)
    dh = np.where(refine & okm & okp, _parabola(hm, s0, hp), 0.0)
    dv = np.where(refine & okvm & okvp, _parabola(vm, s0, vp), 0.0)
    step_h = (hi + dh)[..., None]
    step_v = (vi + dv)[..., None]
    w = cost.center + step_h * cost.basis_h + step_v * cost.basis_v
    any_valid = cost.valid.any(axis=-1)
    keep = ~(any_valid & win_valid)
    w[keep] = w_init.w[keep]
    mask = any_valid & win_valid
    if cost.textured is not None:
        mask &= cost.textured
    return FlowField(w, mask, cost.level, np.where(mask, s0, -1.0))


def polish_flow(
    f_s: FeatureMap,
    f_t: FeatureMap,
    flow: FlowField,
    cands: Candidates,
    steps: tuple[float, ...] = POLISH_STEPS,
    window: int = 1,
) -> FlowField:
    """Refit the subpixel offset on successively finer step sizes.

    A parabola through three samples one step apart is biased toward whole
    steps; re-sampling the scores at ``+-step`` around the current estimate
    and refitting shrinks that bias.  Moves are clipped to half a step.
    """
    w = flow.w.copy()
    offsets = candidate_offsets(1, 1)
    for step in steps:
        c = Candidates(w, cands.basis_h * step, cands.basis_v * step, offsets, 1, 1, cands.usable)
        cost = aggregate_costs(build_cost_volume(f_s, f_t, c), window)
        sc, ok = cost.scores, cost.valid
        # offsets are row-major (v, h): centre 4, h neighbours 3/5, v neighbours 1/7
        # as in estimate_flow_level, a perfect match is left where it is
        good = flow.mask & ok[..., 4] & (sc[..., 4] < 1.0 - 1e-12)
        okh = good & ok[..., 3] & ok[..., 5]
        okv = good & ok[..., 1] & ok[..., 7]
        dh = np.where(okh, _parabola(sc[..., 3], sc[..., 4], sc[..., 5]), 0.0)
        dv = np.where(okv, _parabola(sc[..., 1], sc[..., 4], sc[..., 7]), 0.0)
        w = w + step * (dh[..., None] * cands.basis_h + dv[..., None] * cands.basis_v)
    return replace(flow, w=w)


def consistency_mask(forward: FlowField, backward: FlowField, tol_px: float = FB_TOLERANCE) -> np.ndarray:
    """Pixels whose forward flow is undone by the backward flow within ``tol_px``.

    The backward field is sampled bilinearly at each forward endpoint; pixels
    whose endpoint leaves the target image fail the check.
    """
    if forward.shape != backward.shape:
        raise ValueError("forward and backward flows must have the same shape")
    h, w = forward.shape
    back, ok = _bilinear_gather(backward.w, pixel_grid(w, h) + forward.w)
    err = np.linalg.norm(forward.w + back, axis=-1)
    return ok & (err <= tol_px) & forward.mask


def upsample_flow(flow: FlowField, shape: Optional[tuple[int, int]] = None) -> FlowField:
    """Bilinear 2x upsampling with flow vectors doubled (half-pixel aligned grids)."""
    H, W = flow.shape
    if shape is None:
        shape = (2 * H, 2 * W)
    h2, w2 = shape
    # fine pixel centre (j + 0.5) sits at coarse coordinate (j + 0.5) / 2
    pos = pixel_grid(w2, h2) / 2.0
    ix = np.clip(pos[..., 0] - 0.5, 0, W - 1)
    iy = np.clip(pos[..., 1] - 0.5, 0, H - 1)
    stacked = np.concatenate([flow.w, flow.mask[..., None].astype(float)], axis=-1)
    x0 = np.minimum(np.floor(ix).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(iy).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    ax = (ix - x0)[..., None]
    ay = (iy - y0)[..., None]
    out = (1 - ay) * ((1 - ax) * stacked[y0, x0] + ax * stacked[y0, x1]) + ay * (
        (1 - ax) * stacked[y1, x0] + ax * stacked[y1, x1]
    )
    return FlowField(2.0 * out[..., :2], out[..., 2] > 0.5, max(flow.level - 1, 0))


PoseCallback = Callable[[FlowField, CameraIntrinsics, Optional[RelativePose]], RelativePose]


@dataclass
class CoarseToFineResult:
    flow: FlowField  # level-1 flow
    poses: dict[int, Optional[RelativePose]]  # keyed by level (3, 2, 1)
    flows: dict[int, FlowField] = field(default_factory=dict)
    candidate_counts: dict[int, int] = field(default_factory=dict)
    epipolar_levels: list[int] = field(default_factory=list)
    fallback: bool = False
    failures: list[str] = field(default_factory=list)

    @property
    def pose(self) -> Optional[RelativePose]:
        return self.poses.get(1)


def coarse_to_fine_flow(
    src: ImagePyramid,
    tgt: ImagePyramid,
    pose_callback: Optional[PoseCallback] = None,
    epipolar: bool = True,
    schedule: Optional[dict[int, tuple[int, int]]] = None,
    cost_window: int = COST_WINDOW,
    median_window: int = MEDIAN_WINDOW,
    polish_steps: tuple[float, ...] = POLISH_STEPS,
    polish_window: int = 1,
) -> CoarseToFineResult:
    """Estimate level-1 flow from level 5 down, estimating pose from level 3 on.

    After each level at or below level 3 ``pose_callback(flow, K, init)`` is
    called.  When ``epipolar`` is set and a pose is available, the next level
    regularizes its initial flow onto the epipolar lines and searches an
    epipolar-aligned grid.  Any pose failure (or zero translation) switches the
    remaining levels to the plain axis-aligned search.  Scores are
    aggregated over ``cost_window`` and intermediate flows are median filtered
    over ``median_window`` to keep coarse mismatches from propagating.
    """
    if src.shape(0) != tgt.shape(0):
        raise ValueError("source and target images must have the same size")
    schedule = dict(SEARCH_SCHEDULE if schedule is None else schedule)
    result = CoarseToFineResult(flow=None, poses={})  # type: ignore[arg-type]
    flow = FlowField.zeros(src.shape(NUM_LEVELS - 1), NUM_LEVELS - 1)
    pose: Optional[RelativePose] = None
    for level in range(NUM_LEVELS - 1, 0, -1):
        K = src.intrinsics[level]
        if level < NUM_LEVELS - 1:
            flow = upsample_flow(flow, src.shape(level))
        h_max, v_max = schedule[level]
        cands = None
        if epipolar and pose is not None and not result.fallback:
            try:
                F = fundamental_matrix(K, tgt.intrinsics[level], pose)
                cands = epipolar_candidates(flow, F, h_max, v_max)
                result.epipolar_levels.append(level)
            except MonoStereoError as exc:
                result.fallback = True
                result.failures.append(f"level {level}: {exc}")
        if cands is None:
            cands = grid_candidates(flow, h_max, v_max)
        f_s = extract_features(src, level)
        f_t = extract_features(tgt, level)
        cost = build_cost_volume(f_s, f_t, cands)
        result.candidate_counts[level] = cost.num_candidates
        w_init = FlowField(cands.center, flow.mask, level)
        flow = estimate_flow_level(cost, w_init, cost_window)
        if polish_steps:
            flow = polish_flow(f_s, f_t, flow, cands, polish_steps, polish_window)
        if level > 1:
            flow = median_smooth(flow, median_window)
        result.flows[level] = flow
        if level <= FIRST_POSE_LEVEL and pose_callback is not None:
            try:
                pose = pose_callback(flow, K, pose)
            except MonoStereoError as exc:
                logger.debug("pose estimation failed at level %d: %s", level, exc)
                result.failures.append(f"level {level}: {exc}")
                result.fallback = True
                pose = None
            result.poses[level] = pose
    result.flow = flow
    return result


def candidate_count(h_max: int, v_max: int) -> int:
    return (2 * h_max + 1) * (2 * v_max + 1)
