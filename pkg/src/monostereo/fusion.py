"""Fusion of per-pair depth codes from several target views into one
source-frame depth map."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import NoOverlap, ShapeMismatch
from .triangulation import DepthMap, TriangulationLayer, depth_from_code, layer_code

CONFIDENCE_GATE = 0.5
MIN_OVERLAP = 100
WEIGHTED = "weighted"
EXACT_MEAN = "mean"


@dataclass
class DepthCode:
    """Per-pixel inverse depth, confidence and triangulation residual of one pair."""

    inv_depth: np.ndarray
    confidence: np.ndarray
    residual: np.ndarray
    scale: float = 1.0  # factor applied to inv_depth by align_scales
    scale_known: bool = True

    def __post_init__(self):
        if not (self.inv_depth.shape == self.confidence.shape == self.residual.shape):
            raise ShapeMismatch("depth code channels differ in shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.inv_depth.shape

    def stacked(self) -> np.ndarray:
        """(H, W, 3) view as [inverse depth, confidence, residual]."""
        return np.stack([self.inv_depth, self.confidence, self.residual], axis=-1)


def encode_pair(tri: TriangulationLayer, flow_noise_px: float = 0.5) -> DepthCode:
    inv, conf, res = layer_code(tri, flow_noise_px)
    return DepthCode(inv, conf, res, 1.0, tri.scale_known)


def weighted_median(values: np.ndarray, weights: np.ndarray) -> float:
    """Smallest value whose cumulative weight reaches half the total."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    cw = np.cumsum(weights[order])
    k = int(np.searchsorted(cw, 0.5 * cw[-1]))
    return float(v[min(k, v.size - 1)])


def align_scales(codes: Sequence[DepthCode], gate: float = CONFIDENCE_GATE,
                 min_overlap: int = MIN_OVERLAP) -> list[DepthCode]:
    """Bring every code to the inverse-depth scale of ``codes[0]``.

    The factor is the median of ``inv_ref / inv_i`` over pixels confident in
    both codes, each ratio weighted by the product of the two confidences.
    """
    if not codes:
        raise ValueError("align_scales needs at least one code")
    ref = codes[0]
    out = [ref]
    for i, code in enumerate(codes[1:], start=1):
        if code.shape != ref.shape:
            raise ShapeMismatch(f"code {i} has shape {code.shape}, reference {ref.shape}")
        both = (ref.confidence > gate) & (code.confidence > gate) & (code.inv_depth > 0) & (ref.inv_depth > 0)
        n = int(both.sum())
        if n < min_overlap:
            raise NoOverlap(f"code {i} shares {n} confident pixels with the reference (need {min_overlap})")
        ratio = ref.inv_depth[both] / code.inv_depth[both]
        k = weighted_median(ratio, ref.confidence[both] * code.confidence[both])
        out.append(replace(code, inv_depth=code.inv_depth * k, scale=code.scale * k))
    return out


def _sorted_sum(stack: np.ndarray) -> np.ndarray:
    # summing per-pixel sorted values makes the result independent of code order
    return np.sort(stack, axis=0).sum(axis=0)


def fuse_codes(codes: Sequence[DepthCode], mode: str = WEIGHTED) -> DepthCode:
    """Pool aligned codes per pixel.

    ``weighted``: confidence-weighted mean of inverse depth.  ``mean``: the
    plain average of every channel.  Fused confidence is the mean confidence
    in both modes.  A single code is returned as is.
    """
    if not codes:
        raise ValueError("fuse_codes needs at least one code")
    if mode not in (WEIGHTED, EXACT_MEAN):
        raise ValueError(f"unknown fusion mode {mode!r}")
    if len(codes) == 1:
        return codes[0]
    shape = codes[0].shape
    if any(c.shape != shape for c in codes):
        raise ShapeMismatch("all codes must have the same resolution")
    n = len(codes)
    inv = np.stack([c.inv_depth for c in codes])
    conf = np.stack([c.confidence for c in codes])
    res = np.stack([c.residual for c in codes])
    conf_mean = _sorted_sum(conf) / n
    if mode == EXACT_MEAN:
        fused_inv = _sorted_sum(inv) / n
        fused_res = _sorted_sum(res) / n
    else:
        wsum = _sorted_sum(conf)
        ok = wsum > 0
        safe = np.where(ok, wsum, 1.0)
        fused_inv = np.where(ok, _sorted_sum(conf * inv) / safe, 0.0)
        fused_res = np.where(ok, _sorted_sum(conf * res) / safe, 0.0)
    fused_conf = np.where(fused_inv > 0, conf_mean, 0.0)
    return DepthCode(fused_inv, fused_conf, fused_res, 1.0, all(c.scale_known for c in codes))


def fused_depth(code: DepthCode, image) -> DepthMap:
    return depth_from_code(code.inv_depth, code.confidence, image, code.scale_known)


def fuse_pairs(layers: Sequence[TriangulationLayer], image, flow_noise_px: float = 0.5,
               mode: str = WEIGHTED) -> DepthMap:
    """encode -> align -> fuse -> depth for a list of triangulation layers."""
    codes = [encode_pair(t, flow_noise_px) for t in layers]
    return fused_depth(fuse_codes(align_scales(codes), mode), image)
