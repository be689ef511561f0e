import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from monostereo.camera import CameraIntrinsics, RelativePose, essential_matrix, project, rotation_matrix
from monostereo.errors import CheiralityAmbiguous, DegenerateConfiguration, TooFewCorrespondences
from monostereo.metrics import pose_errors
from monostereo.motion import (
    Correspondences,
    decompose_essential,
    estimate_pose_from_flow,
    estimate_pose_from_pairs,
    lmeds_inliers,
    normalized_eight_point,
    refine_pose,
    refine_pose_report,
    sampson_cost,
    sample_correspondences,
)
from monostereo.pyramid import FlowField

from conftest import random_pose

K = CameraIntrinsics(200.0, 200.0, 160.0, 128.0, 320, 256)


def synthetic_pairs(pose, n=50, seed=0, depth=(3.0, 10.0), noise=0.0):
    rng = np.random.default_rng(seed)
    xs = rng.uniform([10, 10], [310, 246], size=(n, 2))
    d = rng.uniform(*depth, size=n)
    X = np.column_stack([(xs[:, 0] - K.cx) / K.fx * d, (xs[:, 1] - K.cy) / K.fy * d, d])
    xt, _ = project(K, pose.transform(X))
    return Correspondences(xs, xt + rng.normal(0, noise, xt.shape) if noise else xt)


def e_distance(E, gt):
    a = E / np.linalg.norm(E)
    b = gt / np.linalg.norm(gt)
    return min(np.linalg.norm(a - b), np.linalg.norm(a + b))


class TestSampling:
    def test_exact_count_on_uniform_grid(self):
        flow = FlowField.zeros((256, 320))
        pairs = sample_correspondences(flow, max_n=512)
        assert len(pairs) == 512
        # stratified: every band of rows and columns is used
        assert len(np.unique(np.floor(pairs.src[:, 1] / 32))) == 8
        assert len(np.unique(np.floor(pairs.src[:, 0] / 40))) == 8

    def test_fully_masked(self):
        flow = FlowField(np.zeros((32, 32, 2)), np.zeros((32, 32), bool))
        with pytest.raises(TooFewCorrespondences):
            sample_correspondences(flow)

    def test_identical_pixels_still_sampled(self):
        flow = FlowField.zeros((64, 64))
        pairs = sample_correspondences(flow, max_n=100)
        assert len(pairs) == 100 and np.array_equal(pairs.src, pairs.tgt)

    def test_targets_follow_flow_and_deterministic(self):
        rng = np.random.default_rng(1)
        flow = FlowField(rng.normal(size=(40, 50, 2)), rng.uniform(size=(40, 50)) > 0.3)
        a = sample_correspondences(flow, max_n=200)
        b = sample_correspondences(flow, max_n=200)
        assert np.array_equal(a.src, b.src)
        r = (a.src[:, 1] - 0.5).astype(int)
        c = (a.src[:, 0] - 0.5).astype(int)
        assert flow.mask[r, c].all()
        assert np.allclose(a.tgt, a.src + flow.w[r, c])


class TestEightPoint:
    def test_recovers_ground_truth(self):
        rng = np.random.default_rng(2)
        for seed in range(10):
            pose = random_pose(rng)
            E = normalized_eight_point(synthetic_pairs(pose, 50, seed), K)
            assert e_distance(E, essential_matrix(pose)) < 1e-7
            s = np.linalg.svd(E, compute_uv=False)
            assert np.allclose(s, [1.0, 1.0, 0.0], atol=1e-12)

    def test_epipolar_residual(self):
        pose = random_pose(np.random.default_rng(3))
        pairs = synthetic_pairs(pose, 50, 3)
        E = normalized_eight_point(pairs, K)
        a = np.column_stack([pairs.src, np.ones(50)]) @ K.inverse.T
        b = np.column_stack([pairs.tgt, np.ones(50)]) @ K.inverse.T
        assert np.max(np.abs(np.einsum("ni,ij,nj->n", b, E, a))) < 1e-9

    def test_seven_pairs(self):
        pairs = synthetic_pairs(random_pose(np.random.default_rng(4)), 7)
        with pytest.raises(TooFewCorrespondences):
            normalized_eight_point(pairs, K)

    def test_zero_motion(self):
        xs = np.random.default_rng(5).uniform(0, 300, (30, 2))
        with pytest.raises(DegenerateConfiguration):
            normalized_eight_point(Correspondences(xs, xs.copy()), K)


class TestDecompose:
    def test_lateral(self):
        gt = RelativePose(np.zeros(3), np.array([-1.0, 0.0, 0.0]))
        pairs = synthetic_pairs(gt, 60, 6)
        pose = decompose_essential(normalized_eight_point(pairs, K), pairs, K)
        rot, trans = pose_errors(pose, gt)
        assert rot < 1e-4 and trans < 1e-4
        assert not pose.scale_known and abs(np.linalg.norm(pose.t) - 1) < 1e-12

    def test_forward(self):
        gt = RelativePose(np.zeros(3), np.array([0.0, 0.0, -0.5]))
        pairs = synthetic_pairs(gt, 60, 7)
        pose = decompose_essential(normalized_eight_point(pairs, K), pairs, K)
        assert np.allclose(pose.t, [0.0, 0.0, -1.0], atol=1e-6)

    def test_zero_parallax(self):
        # pure rotation: every ray pair is parallel, depth is unobservable
        R = rotation_matrix([0.0, 0.05, 0.0])
        xs = np.random.default_rng(8).uniform(20, 240, (40, 2))
        h = np.column_stack([xs, np.ones(40)]) @ (K.matrix @ R @ K.inverse).T
        pairs = Correspondences(xs, h[:, :2] / h[:, 2:])
        E = essential_matrix(RelativePose([0.0, 0.05, 0.0], [1.0, 0.0, 0.0]))
        with pytest.raises(CheiralityAmbiguous):
            decompose_essential(E, pairs, K)


class TestRefine:
    def test_stationary_at_truth(self):
        gt = random_pose(np.random.default_rng(9)).normalized()
        pairs = synthetic_pairs(gt, 80, 9)
        out = refine_pose(gt, pairs, K)
        assert np.allclose(out.r, gt.r, atol=1e-10) and np.allclose(out.t, gt.t, atol=1e-10)

    def test_recovers_from_half_degree(self):
        gt = random_pose(np.random.default_rng(10)).normalized()
        pairs = synthetic_pairs(gt, 200, 10)
        R0 = rotation_matrix(np.array([0.0, 0.0, math.radians(0.5)])) @ gt.R
        start = RelativePose.from_rt(R0, gt.t, scale_known=False)
        rot, _ = pose_errors(refine_pose(start, pairs, K), gt)
        assert rot < 1e-4

    @given(st.integers(0, 10_000))
    def test_monotone_and_not_worse_than_linear(self, seed):
        rng = np.random.default_rng(seed)
        gt = random_pose(rng)
        pairs = synthetic_pairs(gt, 100, seed, noise=0.5)
        init = decompose_essential(normalized_eight_point(pairs, K), pairs, K)
        rep = refine_pose_report(init, pairs, K)
        assert all(b <= a for a, b in zip(rep.costs, rep.costs[1:]))
        assert rep.final_cost <= sampson_cost(init, pairs, K)
        assert rep.iterations <= 20


class TestEstimate:
    def test_ground_truth_flow(self, gt_scenes):
        for s in gt_scenes:
            pose = estimate_pose_from_flow(s.flows[0], s.intrinsics[0])
            rot, trans = pose_errors(pose, s.pose_to(1))
            assert rot < 0.1 and trans < 0.5

    def test_zero_flow(self):
        with pytest.raises(DegenerateConfiguration):
            estimate_pose_from_flow(FlowField.zeros((64, 80)), CameraIntrinsics(50.0, 50.0, 40.0, 32.0, 80, 64))

    def test_scale_ambiguity(self):
        gt = random_pose(np.random.default_rng(11))
        a = synthetic_pairs(gt, 100, 11)
        big = RelativePose(gt.r, 3.0 * gt.t)
        b = synthetic_pairs(big, 100, 11, depth=(9.0, 30.0))
        # same seed: depths and translation both scaled by 3, flow unchanged
        assert np.allclose(a.tgt, b.tgt, atol=1e-9)
        pa, pb = estimate_pose_from_pairs(a, K), estimate_pose_from_pairs(b, K)
        rot, trans = pose_errors(pa, pb)
        assert rot < 1e-6 and trans < 1e-6

    def test_gross_outliers_are_rejected(self):
        rng = np.random.default_rng(12)
        gt = random_pose(rng)
        pairs = synthetic_pairs(gt, 400, 12, noise=0.2)
        bad = rng.choice(400, 60, replace=False)
        pairs.tgt[bad] += rng.uniform(-15, 15, (60, 2))
        keep = lmeds_inliers(pairs)
        assert keep[bad].mean() < 0.2 and keep[np.setdiff1d(np.arange(400), bad)].mean() > 0.9
        rot, trans = pose_errors(estimate_pose_from_pairs(pairs, K), gt)
        assert rot < 0.1 and trans < 1.0

    def test_clean_input_matches_plain_solve(self):
        gt = random_pose(np.random.default_rng(13))
        pairs = synthetic_pairs(gt, 200, 13)
        robust = estimate_pose_from_pairs(pairs, K)
        plain = estimate_pose_from_pairs(pairs, K, trim_rounds=0, robust=False)
        assert pose_errors(robust, plain)[0] < 1e-8
