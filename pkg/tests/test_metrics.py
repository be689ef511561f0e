import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from monostereo.camera import RelativePose, rotation_matrix
from monostereo.errors import EmptyOverlap, ShapeMismatch, ZeroTranslation
from monostereo.metrics import (
    berhu,
    depth_error_map,
    depth_loss,
    depth_metrics,
    evaluate_depth,
    flow_epe,
    flow_loss,
    motion_loss,
    pose_errors,
    scale_alpha,
)
from monostereo.pyramid import FlowField

from conftest import random_pose


# brute-force oracles: explicit loops over pixels, no vectorisation

def loop_flow_loss(ws, gs):
    total = 0.0
    for w, g in zip(ws, gs):
        H, W = w.shape
        for i in range(H):
            for j in range(W):
                if w.mask[i, j] and g.mask[i, j]:
                    dx = w.w[i, j, 0] - g.w[i, j, 0]
                    dy = w.w[i, j, 1] - g.w[i, j, 1]
                    total += math.sqrt(dx * dx + dy * dy)
    return total


def loop_error_map(d, g):
    H, W = d.shape
    logs = [math.log(g[i, j]) - math.log(d[i, j]) for i in range(H) for j in range(W)]
    alpha = sum(logs) / len(logs)
    return [[math.log(d[i, j]) + alpha - math.log(g[i, j]) for j in range(W)] for i in range(H)]


def loop_depth_loss(d, g):
    e = loop_error_map(d, g)
    H, W = d.shape
    Ld = Lg = 0.0
    for i in range(H):
        for j in range(W):
            a = abs(e[i][j])
            Ld += a if a <= 1 else a * a
            if j + 1 < W:
                Lg += abs(e[i][j + 1] - e[i][j])
            if i + 1 < H:
                Lg += abs(e[i + 1][j] - e[i][j])
    return Ld, Lg


def loop_metrics(d, g):
    dv, gv = d.ravel().tolist(), g.ravel().tolist()
    n = len(dv)
    l1_inv = sum(abs(1 / a - 1 / b) for a, b in zip(dv, gv)) / n
    z = [math.log(a) - math.log(b) for a, b in zip(dv, gv)]
    m = sum(z) / n
    sc = math.sqrt(max(sum(x * x for x in z) / n - m * m, 0.0))
    rel = sum(abs(a - b) / b for a, b in zip(dv, gv)) / n
    return l1_inv, sc, rel


def random_flows(rng, shapes):
    return [FlowField(rng.normal(0, 3, s + (2,)), rng.uniform(size=s) > 0.2) for s in shapes]


# worked examples, shared with the acceptance suite

def ex_flow_zero():
    f = random_flows(np.random.default_rng(0), [(8, 10)])
    return flow_loss(f, f) == 0.0


def ex_flow_three_four():
    w = FlowField.zeros((4, 4))
    g = FlowField.zeros((4, 4))
    g.w[1, 2] = (3.0, 4.0)
    return flow_loss([w], [g]) == 5.0


def ex_flow_oracle():
    rng = np.random.default_rng(1)
    shapes = [(16, 20), (8, 10), (4, 5)]
    a, b = random_flows(rng, shapes), random_flows(rng, shapes)
    return abs(flow_loss(a, b) - loop_flow_loss(a, b)) < 1e-9


def ex_motion_zero():
    gt = RelativePose([0.1, 0.0, -0.2], [0.0, 0.6, 0.8], scale_known=False)
    return motion_loss([gt, gt, gt], gt) == 0.0


def ex_motion_antipodal():
    gt = RelativePose(np.zeros(3), [0.0, 0.6, 0.8], scale_known=False)
    flip = RelativePose(np.zeros(3), -gt.t, scale_known=False)
    return abs(motion_loss([gt, flip, gt], gt) - 2.0) < 1e-15


def ex_motion_oracle():
    rng = np.random.default_rng(2)
    gt = random_pose(rng, scale_known=False)
    ps = [random_pose(rng, scale_known=False) for _ in range(3)]
    ref = sum(math.sqrt(sum((a - b) ** 2 for a, b in zip(p.r, gt.r)))
              + math.sqrt(sum((a - b) ** 2 for a, b in zip(p.t, gt.t))) for p in ps)
    return abs(motion_loss(ps, gt) - ref) < 1e-12


def ex_alpha_factor_two():
    g = np.random.default_rng(3).uniform(1, 10, (6, 6))
    return abs(scale_alpha(2.0 * g, g) + math.log(2.0)) < 1e-12 and scale_alpha(g, g) == 0.0


def ex_alpha_oracle():
    rng = np.random.default_rng(4)
    d, g = rng.uniform(0.5, 20, (7, 9)), rng.uniform(0.5, 20, (7, 9))
    ref = sum(math.log(b) - math.log(a) for a, b in zip(d.ravel(), g.ravel())) / d.size
    return abs(scale_alpha(d, g) - ref) < 1e-12


def ex_error_map_scale():
    g = np.random.default_rng(5).uniform(1, 10, (6, 6))
    return np.max(np.abs(depth_error_map(3.7 * g, g))) < 1e-12


def ex_error_map_one_pixel():
    n = 10_000
    g = np.ones((100, 100))
    d = g.copy()
    d[50, 50] = 2.0
    e = depth_error_map(d, g)
    # alpha = -log 2 / N exactly, so the odd pixel carries log 2 (1 - 1/N)
    return abs(e[50, 50] - math.log(2.0) * (1 - 1 / n)) < 1e-12 and abs(e[50, 50] - math.log(2.0)) < 1e-4


def ex_error_map_zero_mean():
    rng = np.random.default_rng(6)
    return abs(depth_error_map(rng.uniform(1, 9, (10, 10)), rng.uniform(1, 9, (10, 10))).mean()) < 1e-12


def ex_berhu_values():
    return berhu(0.5) == 0.5 and berhu(2.0) == 4.0 and berhu(-1.0) == 1.0


def ex_berhu_continuity():
    eps = 1e-12
    return all(abs(berhu(s * (1 + eps)) - berhu(s * (1 - eps))) < 1e-11 for s in (1.0, -1.0))


def ex_depth_loss_zero():
    g = np.random.default_rng(7).uniform(1, 9, (8, 8))
    return depth_loss([g], [g]) == (0.0, 0.0)


def ex_depth_loss_scale():
    g = np.random.default_rng(8).uniform(1, 9, (8, 8))
    Ld, Lg = depth_loss([2.5 * g], [g])
    return Ld < 1e-12 and Lg < 1e-12


def ex_depth_loss_oracle():
    rng = np.random.default_rng(9)
    ds = [rng.uniform(0.5, 20, (9, 11)), rng.uniform(0.5, 20, (5, 6))]
    gs = [rng.uniform(0.5, 20, (9, 11)), rng.uniform(0.5, 20, (5, 6))]
    Ld, Lg = depth_loss(ds, gs)
    refs = [loop_depth_loss(d, g) for d, g in zip(ds, gs)]
    return abs(Ld - sum(r[0] for r in refs)) < 1e-9 and abs(Lg - sum(r[1] for r in refs)) < 1e-9


def ex_metrics_zero():
    g = np.random.default_rng(10).uniform(1, 9, (8, 8))
    return depth_metrics(g, g) == (0.0, 0.0, 0.0)


def ex_metrics_scale():
    g = np.random.default_rng(11).uniform(1, 9, (8, 8))
    return all(depth_metrics(k * g, g)[1] < 1e-7 for k in (0.1, 3.0, 1e3))


def ex_metrics_two_pixels():
    l1_inv, sc, rel = depth_metrics(np.array([1.0, 2.0]), np.array([1.0, 1.0]))
    return abs(l1_inv - 0.25) < 1e-15 and abs(rel - 0.5) < 1e-15 and abs(sc - math.log(2) / 2) < 1e-15


def ex_metrics_oracle():
    rng = np.random.default_rng(12)
    d, g = rng.uniform(0.5, 20, (9, 11)), rng.uniform(0.5, 20, (9, 11))
    return np.allclose(depth_metrics(d, g), loop_metrics(d, g), rtol=0, atol=1e-12)


def ex_pose_identical():
    p = random_pose(np.random.default_rng(13))
    return pose_errors(p, p) == (0.0, 0.0)


def ex_pose_ninety():
    a = RelativePose(np.zeros(3), [1.0, 0.0, 0.0])
    b = RelativePose(np.zeros(3), [0.0, 1.0, 0.0])
    return abs(pose_errors(a, b)[1] - 90.0) < 1e-12


def ex_pose_five_degrees():
    a = RelativePose([0.0, 0.0, math.radians(5.0)], [1.0, 0.0, 0.0])
    b = RelativePose(np.zeros(3), [1.0, 0.0, 0.0])
    return abs(pose_errors(a, b)[0] - 5.0) < 1e-9


def ex_sc_inv_invariance():
    rng = np.random.default_rng(14)
    d, g = rng.uniform(0.5, 20, (16, 16)), rng.uniform(0.5, 20, (16, 16))
    base = depth_metrics(d, g)[1]
    return all(abs(depth_metrics(k * d, g)[1] - base) < 1e-10 for k in (1e-3, 0.5, 7.0, 1e4))


EXAMPLES = [
    ex_flow_zero, ex_flow_three_four, ex_flow_oracle,
    ex_motion_zero, ex_motion_antipodal, ex_motion_oracle,
    ex_alpha_factor_two, ex_alpha_oracle,
    ex_error_map_scale, ex_error_map_one_pixel, ex_error_map_zero_mean,
    ex_berhu_values, ex_berhu_continuity,
    ex_depth_loss_zero, ex_depth_loss_scale, ex_depth_loss_oracle,
    ex_metrics_zero, ex_metrics_scale, ex_metrics_two_pixels, ex_metrics_oracle,
    ex_pose_identical, ex_pose_ninety, ex_pose_five_degrees,
    ex_sc_inv_invariance,
]


@pytest.mark.parametrize("example", EXAMPLES, ids=lambda f: f.__name__[3:])
def test_example(example):
    assert example()


class TestErrors:
    def test_flow_level_count(self):
        with pytest.raises(ShapeMismatch):
            flow_loss([FlowField.zeros((4, 4))], [])

    def test_flow_shape(self):
        with pytest.raises(ShapeMismatch):
            flow_loss([FlowField.zeros((4, 4))], [FlowField.zeros((4, 5))])

    def test_empty_overlap(self):
        with pytest.raises(EmptyOverlap):
            scale_alpha(np.ones((3, 3)), np.ones((3, 3)), np.zeros((3, 3), bool))
        with pytest.raises(EmptyOverlap):
            depth_metrics(np.zeros((3, 3)), np.ones((3, 3)))

    def test_zero_translation(self):
        with pytest.raises(ZeroTranslation):
            pose_errors(RelativePose.identity(), RelativePose(np.zeros(3), [1.0, 0.0, 0.0]))

    def test_depth_loss_shape(self):
        with pytest.raises(ShapeMismatch):
            depth_loss([np.ones((3, 3))], [np.ones((3, 4))])


class TestMasks:
    def test_invalid_pixels_are_ignored(self):
        rng = np.random.default_rng(15)
        d, g = rng.uniform(1, 9, (10, 10)), rng.uniform(1, 9, (10, 10))
        m = rng.uniform(size=(10, 10)) > 0.4
        poisoned = np.where(m, d, np.nan)
        assert depth_metrics(poisoned, g, m) == depth_metrics(d[m], g[m])

    def test_evaluate_applies_optimal_scale(self):
        rng = np.random.default_rng(16)
        g = rng.uniform(1, 9, (10, 10))
        d = 4.0 * g * np.exp(rng.normal(0, 0.01, g.shape))
        alpha = scale_alpha(d, g)
        assert np.allclose(evaluate_depth(d, g), depth_metrics(d * math.exp(alpha), g), rtol=0, atol=1e-15)
        assert evaluate_depth(4.0 * g, g)[2] < 1e-12

    def test_flow_epe(self):
        g = FlowField.zeros((2, 2))
        w = FlowField(np.array([[[3.0, 4.0], [0, 0]], [[0, 0], [0, 0]]]), np.ones((2, 2), bool))
        assert flow_epe(w, g) == 1.25


class TestProperties:
    @given(st.floats(-1e6, 1e6, allow_nan=False))
    def test_berhu_even_and_above_abs(self, x):
        assert berhu(x) == berhu(-x)
        assert berhu(x) >= abs(x)
        assert (berhu(x) == abs(x)) == (abs(x) <= 1 or abs(x) == 0)

    @given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
    def test_sc_inv_scale_invariant(self, seed, k):
        rng = np.random.default_rng(seed)
        d, g = rng.uniform(0.5, 20, (8, 8)), rng.uniform(0.5, 20, (8, 8))
        assert abs(depth_metrics(k * d, g)[1] - depth_metrics(d, g)[1]) < 1e-10

    @given(st.integers(0, 10_000))
    def test_losses_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        d, g = rng.uniform(0.5, 20, (6, 7)), rng.uniform(0.5, 20, (6, 7))
        Ld, Lg = depth_loss([d], [g])
        assert Ld >= 0 and Lg >= 0
        a, b = random_flows(rng, [(6, 7)]), random_flows(rng, [(6, 7)])
        assert flow_loss(a, b) >= 0
        assert motion_loss([random_pose(rng)], random_pose(rng)) >= 0

    @given(st.integers(0, 10_000))
    def test_pose_errors_symmetric(self, seed):
        rng = np.random.default_rng(seed)
        a, b = random_pose(rng, 3.0), random_pose(rng, 3.0)
        ra, ta = pose_errors(a, b)
        rb, tb = pose_errors(b, a)
        assert abs(ra - rb) < 1e-9 and abs(ta - tb) < 1e-12

    def test_rotation_error_is_relative_angle(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            a = random_pose(rng, 1.0)
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            ang = rng.uniform(0.01, 1.0)
            R = rotation_matrix(axis * ang) @ a.R
            b = RelativePose.from_rt(R, a.t)
            assert abs(pose_errors(b, a)[0] - math.degrees(ang)) < 1e-8
