"""Two-view and multi-view depth estimation built from the library stages.

Everything runs at pyramid level 1 (half resolution): flow, pose and depth.
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Optional, Sequence


from .camera import CameraIntrinsics, RelativePose
from .errors import MonoStereoError, StageFailure
from .fusion import EXACT_MEAN, WEIGHTED, DepthCode, align_scales, encode_pair, fuse_codes, fused_depth
from .motion import DEFAULT_MAX_PAIRS, estimate_pose_from_flow
from .pyramid import (
    FB_TOLERANCE,
    CoarseToFineResult,
    FlowField,
    ImagePyramid,
    build_pyramid,
    coarse_to_fine_flow,
    consistency_mask,
)
from .triangulation import DepthMap, TriangulationLayer, make_triangulation_layer

logger = logging.getLogger(__name__)

OUTPUT_LEVEL = 1


@dataclass
class PipelineOptions:
    epipolar: bool = True
    flow_noise_px: float = 0.5
    fb_tolerance: Optional[float] = FB_TOLERANCE  # None disables the check
    fusion_mode: str = WEIGHTED
    max_pairs: int = DEFAULT_MAX_PAIRS

    def __post_init__(self):
        if self.fusion_mode not in (WEIGHTED, EXACT_MEAN):
            raise ValueError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.flow_noise_px < 0:
            raise ValueError("flow_noise_px must be non-negative")


@dataclass
class PairResult:
    flow: FlowField  # level-1 flow, mask includes the consistency check
    pose: RelativePose
    intrinsics: CameraIntrinsics  # level-1 intrinsics
    c2f: CoarseToFineResult
    layer: TriangulationLayer
    code: DepthCode
    backward: Optional[FlowField] = None


@dataclass
class DepthResult:
    depth: DepthMap
    code: DepthCode
    pairs: list[PairResult] = field(default_factory=list)


@contextmanager
def stage(name: str):
    """Label library errors raised inside the block with a stage name."""
    try:
        yield
    except StageFailure:
        raise
    except MonoStereoError as exc:
        raise StageFailure(name, exc) from exc


def pose_callback(max_pairs: int, fixed: Optional[RelativePose]):
    if fixed is not None:
        return lambda flow, K, init: fixed

    def callback(flow, K, init):
        with stage("pose"):
            return estimate_pose_from_flow(flow, K, init, max_pairs)

    return callback


def _final_pose(flow: FlowField, K: CameraIntrinsics, init: Optional[RelativePose],
                max_pairs: int) -> RelativePose:
    try:
        return estimate_pose_from_flow(flow, K, init, max_pairs)
    except MonoStereoError:
        if init is None:
            raise
        logger.debug("final pose re-estimate failed; keeping the coarse-to-fine pose")
        return init


def estimate_pair(
    src: ImagePyramid,
    tgt: ImagePyramid,
    options: Optional[PipelineOptions] = None,
    gt_pose: Optional[RelativePose] = None,
) -> PairResult:
    """Flow, pose and depth code of one (source, target) pair.

    With ``gt_pose`` the pose estimator is bypassed and the given pose drives
    the epipolar search and the triangulation.
    """
    opt = options or PipelineOptions()
    with stage("flow"):
        c2f = coarse_to_fine_flow(src, tgt, pose_callback(opt.max_pairs, gt_pose), epipolar=opt.epipolar)
        flow = c2f.flow
        backward = None
        if opt.fb_tolerance is not None:
            inv = gt_pose.inverse() if gt_pose is not None else None
            back = coarse_to_fine_flow(tgt, src, pose_callback(opt.max_pairs, inv), epipolar=opt.epipolar)
            backward = back.flow
            flow = FlowField(flow.w, consistency_mask(flow, backward, opt.fb_tolerance), flow.level, flow.score)
    K = src.intrinsics[OUTPUT_LEVEL]
    if gt_pose is not None:
        pose = gt_pose
    else:
        with stage("pose"):
            pose = _final_pose(flow, K, c2f.pose, opt.max_pairs)
    with stage("triangulation"):
        layer = make_triangulation_layer(flow, K, pose)
        code = encode_pair(layer, opt.flow_noise_px)
    return PairResult(flow, pose, K, c2f, layer, code, backward)


def estimate_depth(
    source,
    targets: Sequence,
    K: CameraIntrinsics,
    options: Optional[PipelineOptions] = None,
    gt_poses: Optional[Sequence[RelativePose]] = None,
) -> DepthResult:
    """Level-1 depth of ``source`` from one or more target images."""
    if not targets:
        raise ValueError("at least one target image is required")
    if gt_poses is not None and len(gt_poses) != len(targets):
        raise ValueError(f"{len(gt_poses)} poses for {len(targets)} targets")
    opt = options or PipelineOptions()
    with stage("pyramid"):
        src = build_pyramid(source, K)
        tgts = [build_pyramid(t, K) for t in targets]
    pairs = []
    for i, tgt in enumerate(tgts):
        pairs.append(estimate_pair(src, tgt, opt, None if gt_poses is None else gt_poses[i]))
    codes = [p.code for p in pairs]
    with stage("fusion"):
        fused = fuse_codes(align_scales(codes), opt.fusion_mode)
        depth = fused_depth(fused, src.levels[OUTPUT_LEVEL])
    return DepthResult(depth, fused, pairs)
