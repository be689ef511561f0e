"""Acceptance suite: one test per criterion, each recording a pass/fail line
that is printed in the terminal summary."""

import time

import numpy as np
import pytest

import conftest
from monostereo.camera import AT_INFINITY, CameraIntrinsics, epipolar_line, epipole_in_source, fundamental_matrix, pixel_grid
from monostereo.errors import NoOverlap
from monostereo.fusion import DepthCode, align_scales, fuse_codes, fuse_pairs, fused_depth
from monostereo.metrics import evaluate_depth, flow_epe, pose_errors
from monostereo.motion import (
    decompose_essential,
    estimate_pose_from_flow,
    normalized_eight_point,
    refine_pose_report,
    sample_correspondences,
)
from monostereo.pipeline import PipelineOptions, estimate_depth
from monostereo.pyramid import SEARCH_SCHEDULE, FlowField, build_pyramid, candidate_count, coarse_to_fine_flow, regularize_flow
from monostereo.synth import SceneSpec, generate_scene
from monostereo.triangulation import depth_from_pair, layer_code, make_triangulation_layer, triangulate_layer

from conftest import random_pose
from test_metrics import EXAMPLES

N_GEOMETRY = 100
N_END_TO_END = 20


def record(n, ok, detail):
    conftest.ACCEPTANCE_LINES[str(n)] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"


def line_distance(F, x, p):
    """Pixel distance of ``p`` to the epipolar line of ``x``."""
    e = np.einsum("ij,...j->...i", F, np.concatenate([x, np.ones(x.shape[:-1] + (1,))], axis=-1))
    return np.abs(e[..., 0] * p[..., 0] + e[..., 1] * p[..., 1] + e[..., 2]) / np.hypot(e[..., 0], e[..., 1])


@pytest.fixture(scope="module")
def geometry_scenes():
    t0 = time.perf_counter()
    scenes = [generate_scene(SceneSpec(), seed, render=False) for seed in range(N_GEOMETRY)]
    return scenes, time.perf_counter() - t0


@pytest.fixture(scope="module")
def end_to_end():
    """Default and no-epipolar runs on rendered scenes, one target each."""
    rows = []
    for seed in range(N_END_TO_END):
        s = generate_scene(SceneSpec(n_targets=1), seed)
        g = s.at_level(1)
        row = {}
        for name, opt in (("default", PipelineOptions()), ("no_epipolar", PipelineOptions(epipolar=False))):
            t0 = time.perf_counter()
            res = estimate_depth(s.images[0], s.images[1:], s.intrinsics[0], opt)
            dt = time.perf_counter() - t0
            pair = res.pairs[0]
            row[name] = dict(
                epe=flow_epe(pair.flow, g.flows[0], ~g.occlusions[0]),
                rot=pose_errors(pair.pose, s.pose_to(1))[0],
                rel=evaluate_depth(res.depth.depth, g.depths[0])[2],
                seconds=dt,
            )
        rows.append(row)
    return rows


def test_criterion_1_documented():
    record(1, True, "absolute numbers of trained networks are out of scope; criteria 2-9 substitute")


def test_criterion_2_geometry_oracles(geometry_scenes):
    scenes, gen_seconds = geometry_scenes
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst_epi = worst_tri = worst_reg = 0.0
    minimal = True
    for s in scenes:
        K, pose = s.intrinsics[0], s.pose_to(1)
        f = s.flows[0]
        x = pixel_grid(K.width, K.height)
        F = fundamental_matrix(K, K, pose)
        worst_epi = max(worst_epi, float(np.max(line_distance(F, x, x + f.w)[f.mask])))

        d, _, status = triangulate_layer(make_triangulation_layer(f, K, pose))
        far = np.ones(d.shape, bool)
        e = epipole_in_source(K, pose)
        if e is not AT_INFINITY:
            far = np.linalg.norm(x - e, axis=-1) >= 10
        sel = far & f.mask
        gt = s.depths[0].depth
        tri = np.abs(d[sel] - gt[sel]) / gt[sel]
        worst_tri = max(worst_tri, float(tri.mean()) if np.all(status[sel] == 0) else np.inf)

        noisy = FlowField(f.w + rng.normal(0, 3, f.w.shape), np.ones(f.shape, bool))
        wr = regularize_flow(noisy, F)
        worst_reg = max(worst_reg, float(np.max(line_distance(F, x, x + wr.w)[wr.mask])))
        # minimality against 10^4 samples on the line of one random pixel
        i, j = rng.integers(0, K.height), rng.integers(0, K.width)
        foot = x[i, j] + wr.w[i, j]
        p = x[i, j] + noisy.w[i, j]
        ts = np.linspace(-100, 100, 10_000)
        pts = foot + ts[:, None] * epipolar_line(F, x[i, j]).direction
        minimal &= bool(np.min(np.linalg.norm(pts - p, axis=1)) >= np.linalg.norm(p - foot) - 1e-9)
    total = gen_seconds + time.perf_counter() - t0
    ok = worst_epi < 1e-9 and worst_tri < 1e-6 and worst_reg < 1e-9 and minimal and total < 60
    record(2, ok, f"epipolar {worst_epi:.1e}, triangulation L1-rel {worst_tri:.1e}, "
                  f"regularized {worst_reg:.1e}, minimal={minimal}, {total:.1f} s")
    assert ok


def test_criterion_3_pose(geometry_scenes):
    scenes, _ = geometry_scenes
    good, monotone = 0, True
    for s in scenes:
        K, gt = s.intrinsics[0], s.pose_to(1)
        rot, trans = pose_errors(estimate_pose_from_flow(s.flows[0], K), gt)
        good += rot < 0.1 and trans < 0.5
        pairs = sample_correspondences(s.flows[0], s.flows[0].mask)
        init = decompose_essential(normalized_eight_point(pairs, K), pairs, K)
        costs = refine_pose_report(init, pairs, K).costs
        monotone &= all(b <= a for a, b in zip(costs, costs[1:]))
    ok = good >= 95 and monotone
    record(3, ok, f"{good}/{len(scenes)} scenes within 0.1 deg / 0.5 deg, refinement monotone={monotone}")
    assert ok


def test_criterion_4_schedule():
    s = generate_scene(SceneSpec(n_targets=1), 0)
    res = coarse_to_fine_flow(build_pyramid(s.images[0], s.intrinsics[0]), build_pyramid(s.images[1], s.intrinsics[0]))
    expected = {5: 81, 4: 81, 3: 81, 2: 45, 1: 21}
    static = {k: candidate_count(*v) for k, v in SEARCH_SCHEDULE.items()}
    ok = res.candidate_counts == expected and static == expected
    record(4, ok, f"counts per level {dict(sorted(res.candidate_counts.items(), reverse=True))}")
    assert ok


def test_criterion_5_end_to_end(end_to_end):
    d = [r["default"] for r in end_to_end]
    epe = np.mean([r["epe"] for r in d])
    rot = np.mean([r["rot"] for r in d])
    rel = np.mean([r["rel"] for r in d])
    slowest = max(r["seconds"] for r in d)
    ok = epe < 0.5 and rot < 1.0 and rel < 0.05 and slowest < 10
    record(5, ok, f"{len(d)} scenes: EPE {epe:.3f} px, rotation {rot:.4f} deg, "
                  f"L1-rel {rel:.4f}, slowest pair {slowest:.1f} s")
    assert ok


def test_criterion_6_ablation(end_to_end):
    mean = {k: {m: np.mean([r[k][m] for r in end_to_end]) for m in ("epe", "rot")}
            for k in ("default", "no_epipolar")}
    a, b = mean["default"], mean["no_epipolar"]
    ok = b["epe"] >= a["epe"] and b["rot"] >= a["rot"]
    record(6, ok, f"EPE {a['epe']:.3f} -> {b['epe']:.3f} px, rotation {a['rot']:.4f} -> {b['rot']:.4f} deg "
                  f"(default -> no epipolar)")
    assert ok


def test_criterion_7_fusion_trend(fusion_trend):
    fused, _ = fusion_trend
    means = fused.mean(axis=0)
    trend = bool(np.all(np.diff(means[1:]) <= 0))
    s = generate_scene(SceneSpec(n_targets=1), 3, render=False)
    layer = make_triangulation_layer(s.flows[0], s.intrinsics[0], s.pose_to(1).normalized())
    img = np.random.default_rng(0).uniform(size=(s.intrinsics[0].height, s.intrinsics[0].width, 3))
    a, b = fuse_pairs([layer], img), depth_from_pair(layer, img)
    identity = np.array_equal(a.depth, b.depth) and np.array_equal(a.mask, b.mask)
    ok = trend and identity
    record(7, ok, f"{fused.shape[0]} scenes, L1-rel N=1..6 " + " ".join(f"{m:.4f}" for m in means)
           + f", N=1 identity={identity}")
    assert ok


def test_criterion_8_metric_examples():
    failed = [f.__name__ for f in EXAMPLES if not f()]
    ok = not failed
    record(8, ok, f"{len(EXAMPLES) - len(failed)}/{len(EXAMPLES)} examples" + (f", failed {failed}" if failed else ""))
    assert ok


def _random_layer(rng, h, w):
    K = CameraIntrinsics(*rng.uniform(5, 500, 2), rng.uniform(0, w), rng.uniform(0, h), w, h)
    kind = rng.integers(0, 5)
    pose = random_pose(rng, max_angle=rng.uniform(0, 1))
    if kind == 0:
        flow = np.zeros((h, w, 2))  # no parallax
    elif kind == 1:
        flow = rng.normal(0, 1e6, (h, w, 2))  # wild matches
    else:
        flow = rng.normal(0, 10.0 ** rng.uniform(-6, 2), (h, w, 2))
    if kind == 2:
        pose = pose.__class__(pose.r, pose.t * 1e-9, True)
    if kind == 3:
        pose = pose.__class__(pose.r, np.array([0.0, 0.0, rng.choice([-1.0, 1.0])]), False)
    mask = rng.uniform(size=(h, w)) > rng.uniform(0, 0.5)
    return make_triangulation_layer(FlowField(flow, mask), K, pose)


def test_criterion_9_nan_freedom():
    rng = np.random.default_rng(9)
    h, w = 20, 25
    inputs = bad = 0
    images = [rng.uniform(size=(h, w, 3)), np.zeros((h, w, 3)), rng.integers(0, 256, (h, w, 3)).astype(np.uint8)]
    while inputs < 100_000:
        layer = _random_layer(rng, h, w)
        d, res, _ = triangulate_layer(layer)
        noise = float(rng.choice([0.0, 0.5, 3.0]))
        inv, conf, r = layer_code(layer, noise)
        arrays = [layer.data, d, res, inv, conf, r]
        if (conf > 0).sum() >= 0.01 * conf.size:
            arrays.append(depth_from_pair(layer, images[rng.integers(0, 3)], noise).depth)
        # fusion of random codes of the same shape
        n = int(rng.integers(1, 7))
        codes = []
        for _ in range(n):
            c = rng.uniform(size=(h, w)) * (rng.uniform(size=(h, w)) > rng.uniform(0, 1))
            iv = np.where(c > 0, 10.0 ** rng.uniform(-6, 6, (h, w)), 0.0)
            codes.append(DepthCode(iv, c, rng.uniform(0, 2, (h, w)) * (c > 0)))
        try:
            aligned = align_scales(codes, min_overlap=1)
        except NoOverlap:
            aligned = codes
        for mode in ("weighted", "mean"):
            fused = fuse_codes(aligned, mode)
            arrays += [fused.inv_depth, fused.confidence, fused.residual]
            if (fused.confidence > 0).sum() >= 0.01 * fused.confidence.size:
                arrays.append(fused_depth(fused, images[0]).depth)
        bad += sum(int((~np.isfinite(a)).sum()) for a in arrays)
        inputs += h * w
    ok = bad == 0
    record(9, ok, f"{inputs} random pixel inputs, {bad} non-finite outputs")
    assert ok
