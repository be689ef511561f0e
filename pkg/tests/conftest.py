import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from monostereo.camera import CameraIntrinsics, RelativePose
from monostereo.fusion import align_scales, encode_pair, fuse_codes, fused_depth
from monostereo.metrics import evaluate_depth
from monostereo.pyramid import FlowField, build_pyramid
from monostereo.synth import SceneSpec, generate_scene, render_image
from monostereo.triangulation import make_triangulation_layer

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture
def K100():
    # fx = fy = 100 with the principal point of a 320x256 image
    return CameraIntrinsics(100.0, 100.0, 160.0, 128.0, 320, 256)


@pytest.fixture
def lateral_pose():
    return RelativePose(np.zeros(3), np.array([1.0, 0.0, 0.0]))


@pytest.fixture(scope="session")
def small_scene():
    spec = SceneSpec(width=128, height=128, fx=80.0, fy=80.0, n_targets=2, supersample=1)
    return generate_scene(spec, 11)


@pytest.fixture(scope="session")
def gt_scenes():
    """Full-size ground-truth-only scenes (no rendering) for geometry oracles."""
    return [generate_scene(SceneSpec(), seed, render=False) for seed in range(5)]


def random_pose(rng, max_angle=0.2, scale_known=True):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    r = axis * rng.uniform(0.0, max_angle)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    if scale_known:
        t *= rng.uniform(0.2, 2.0)
    return RelativePose(r, t, scale_known)


def noisy_codes(seed, n_views=6, sigma=0.5):
    """Level-1 codes of one scene from ground-truth flow plus Gaussian noise.

    Poses are the true ones with unit translation, so every code has its
    own scale.  Returns (codes, level-1 source image, level-1 truth).
    """
    spec = SceneSpec(n_targets=n_views)
    s = generate_scene(spec, seed, render=False)
    img = render_image(s.primitives, s.intrinsics[0], s.poses[0], spec, seed)
    image = build_pyramid(img, s.intrinsics[0]).levels[1]
    g = s.at_level(1)
    K = g.intrinsics[0]
    rng = np.random.default_rng(1000 + seed)
    codes = []
    for i in range(n_views):
        f = g.flows[i]
        w = f.w + rng.normal(0.0, sigma, f.w.shape)
        layer = make_triangulation_layer(FlowField(w, f.mask, 1), K, s.poses[i + 1].normalized())
        codes.append(encode_pair(layer, sigma))
    return codes, image, g


@pytest.fixture(scope="session")
def fusion_trend():
    """Per scene: fused L1-rel for N = 1..6 views and each single pair's L1-rel."""
    fused, single = [], []
    for seed in range(20):
        codes, image, g = noisy_codes(seed)
        gt = g.depths[0]
        fused.append([evaluate_depth(fused_depth(fuse_codes(align_scales(codes[:n])), image).depth, gt)[2]
                      for n in range(1, 7)])
        single.append([evaluate_depth(fused_depth(c, image).depth, gt)[2] for c in codes])
    return np.array(fused), np.array(single)
