"""Training losses and evaluation metrics for flow, pose and depth.

Every sum runs over jointly valid pixels only, and ``N`` is the valid count.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .camera import RelativePose, rotation_angle
from .errors import EmptyOverlap, ShapeMismatch, ZeroTranslation
from .pyramid import FlowField


def _arrays(d, gt, mask=None):
    dd = np.asarray(getattr(d, "depth", d), dtype=float)
    gg = np.asarray(getattr(gt, "depth", gt), dtype=float)
    if dd.shape != gg.shape:
        raise ShapeMismatch(f"depth shapes differ: {dd.shape} vs {gg.shape}")
    valid = np.isfinite(dd) & np.isfinite(gg) & (dd > 0) & (gg > 0)
    for m in (getattr(d, "mask", None), getattr(gt, "mask", None), mask):
        if m is not None:
            valid &= np.asarray(m, dtype=bool)
    if not valid.any():
        raise EmptyOverlap("no jointly valid depth pixels")
    return dd, gg, valid


def flow_loss(flows: Sequence[FlowField], gts: Sequence[FlowField]) -> float:
    """Sum over levels and valid pixels of the flow end-point error."""
    if len(flows) != len(gts):
        raise ShapeMismatch(f"{len(flows)} flow levels vs {len(gts)} ground-truth levels")
    total = 0.0
    for w, g in zip(flows, gts):
        if w.w.shape != g.w.shape:
            raise ShapeMismatch(f"flow shapes differ: {w.w.shape} vs {g.w.shape}")
        m = w.mask & g.mask
        total += float(np.sum(np.linalg.norm(w.w - g.w, axis=-1)[m]))
    return total


def motion_loss(poses: Sequence[RelativePose], gt: RelativePose) -> float:
    """Sum over levels of ``|r_l - r_gt| + |t_l - t_gt|``."""
    total = 0.0
    for p in poses:
        total += float(np.linalg.norm(p.r - gt.r)) + float(np.linalg.norm(p.t - gt.t))
    return total


def scale_alpha(d, gt, mask=None) -> float:
    """Mean log ratio ``log(gt) - log(d)``; ``d * exp(alpha)`` is optimally scaled."""
    dd, gg, valid = _arrays(d, gt, mask)
    return float(np.mean(np.log(gg[valid]) - np.log(dd[valid])))


def depth_error_map(d, gt, mask=None) -> np.ndarray:
    """Scale-invariant per-pixel log error (0 outside the valid overlap)."""
    dd, gg, valid = _arrays(d, gt, mask)
    alpha = float(np.mean(np.log(gg[valid]) - np.log(dd[valid])))
    out = np.zeros(dd.shape)
    out[valid] = np.log(dd[valid]) + alpha - np.log(gg[valid])
    return out


def berhu(x):
    """Reverse Huber: ``|x|`` inside the unit interval, ``x**2`` outside."""
    a = np.abs(x)
    out = np.where(a <= 1.0, a, a * a)
    return float(out) if np.ndim(out) == 0 else out


def depth_loss(depths, gts, masks=None) -> tuple[float, float]:
    """(berHu depth loss, gradient loss) summed over levels.

    Gradients are forward differences; a difference counts only when both of
    its pixels are valid, so the last row and column contribute nothing.
    """
    if len(depths) != len(gts):
        raise ShapeMismatch(f"{len(depths)} depth levels vs {len(gts)} ground-truth levels")
    masks = [None] * len(depths) if masks is None else masks
    Ld = Lg = 0.0
    for d, g, m in zip(depths, gts, masks):
        _, _, valid = _arrays(d, g, m)
        de = depth_error_map(d, g, m)
        Ld += float(np.sum(berhu(de[valid])))
        gx = np.abs(np.diff(de, axis=1))[valid[:, 1:] & valid[:, :-1]]
        gy = np.abs(np.diff(de, axis=0))[valid[1:, :] & valid[:-1, :]]
        Lg += float(gx.sum() + gy.sum())
    return Ld, Lg


def depth_metrics(d, gt, mask=None) -> tuple[float, float, float]:
    """(L1-inv, sc-inv, L1-rel) of ``d`` as given (apply optimal scaling first)."""
    dd, gg, valid = _arrays(d, gt, mask)
    dv, gv = dd[valid], gg[valid]
    l1_inv = float(np.mean(np.abs(1.0 / dv - 1.0 / gv)))
    z = np.log(dv) - np.log(gv)
    n = z.size
    var = float(np.sum(z * z) / n - (np.sum(z) / n) ** 2)
    sc_inv = math.sqrt(max(var, 0.0))
    l1_rel = float(np.mean(np.abs(dv - gv) / gv))
    return l1_inv, sc_inv, l1_rel


def optimally_scaled(d, gt, mask=None) -> np.ndarray:
    dd = np.asarray(getattr(d, "depth", d), dtype=float)
    return dd * math.exp(scale_alpha(d, gt, mask))


def evaluate_depth(d, gt, mask=None) -> tuple[float, float, float]:
    """Depth metrics after optimal log-mean scaling of the estimate."""
    dd, gg, valid = _arrays(d, gt, mask)
    scaled = dd * math.exp(scale_alpha(dd, gg, valid))
    return depth_metrics(scaled, gg, valid)


def pose_errors(pose: RelativePose, gt: RelativePose) -> tuple[float, float]:
    """(rotation error, translation direction error) in degrees."""
    n1 = float(np.linalg.norm(pose.t))
    n2 = float(np.linalg.norm(gt.t))
    if n1 < 1e-12 or n2 < 1e-12:
        raise ZeroTranslation("translation error undefined for a zero translation")
    rot = math.degrees(rotation_angle(pose.R @ gt.R.T))
    # atan2 stays accurate for nearly parallel directions, unlike acos
    ang = math.atan2(float(np.linalg.norm(np.cross(pose.t, gt.t))), float(pose.t @ gt.t))
    return rot, math.degrees(ang)


def flow_epe(flow: FlowField, gt: FlowField, mask: Optional[np.ndarray] = None) -> float:
    """Mean end-point error over ``mask`` (defaults to both validity masks)."""
    if flow.w.shape != gt.w.shape:
        raise ShapeMismatch(f"flow shapes differ: {flow.w.shape} vs {gt.w.shape}")
    m = flow.mask & gt.mask if mask is None else np.asarray(mask, dtype=bool)
    if not m.any():
        raise EmptyOverlap("no valid flow pixels")
    return float(np.mean(np.linalg.norm(flow.w - gt.w, axis=-1)[m]))
