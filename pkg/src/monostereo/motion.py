"""Relative pose from dense flow: stratified sampling, normalized 8-point,
cheirality-resolved decomposition and Gauss-Newton Sampson refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .camera import CameraIntrinsics, RelativePose, rotation_matrix, skew
from .errors import CheiralityAmbiguous, DegenerateConfiguration, TooFewCorrespondences
from .pyramid import FlowField

DEFAULT_MAX_PAIRS = 8192
MIN_STRATA = 16
TRIM_ROUNDS = 3
TRIM_SIGMAS = 3.0
TRIM_FLOOR_PX = 0.25
LMEDS_TRIALS = 256
LMEDS_SEED = 0
LMEDS_SCORING_PAIRS = 1024
_W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Correspondences:
    src: np.ndarray  # (n, 2) source pixels
    tgt: np.ndarray  # (n, 2) target pixels

    def __len__(self):
        return self.src.shape[0]

    @classmethod
    def from_arrays(cls, src, tgt) -> "Correspondences":
        src = np.asarray(src, dtype=float).reshape(-1, 2)
        tgt = np.asarray(tgt, dtype=float).reshape(-1, 2)
        if src.shape != tgt.shape:
            raise ValueError(f"mismatched correspondence arrays {src.shape} vs {tgt.shape}")
        return cls(src, tgt)


def sample_correspondences(flow: FlowField, mask=None, max_n: int = DEFAULT_MAX_PAIRS) -> Correspondences:
    """Deterministic stratified sample of at most ``max_n`` valid flow vectors.

    The image is cut into a near-square grid of at least ``max_n`` cells; each
    cell contributes its best-scoring valid pixel (ties: nearest the cell
    centre).  Surplus picks are thinned evenly in raster order.
    """
    valid = flow.mask if mask is None else (np.asarray(mask, dtype=bool) & flow.mask)
    n_valid = int(valid.sum())
    if n_valid < 8:
        raise TooFewCorrespondences(f"only {n_valid} valid flow vectors")
    H, W = flow.shape
    n = max(int(max_n), MIN_STRATA)
    gx = max(1, min(W, math.ceil(math.sqrt(n * W / H))))
    gy = max(1, min(H, math.ceil(n / gx)))
    rows, cols = np.indices((H, W))
    cell_y = rows * gy // H
    cell_x = cols * gx // W
    cy = (cell_y + 0.5) * H / gy
    cx = (cell_x + 0.5) * W / gx
    dist = (rows + 0.5 - cy) ** 2 + (cols + 0.5 - cx) ** 2
    score = flow.score if flow.score is not None else np.zeros((H, W))
    cell = (cell_y * gx + cell_x)[valid]
    # lexsort: last key is primary -> cell, then -score, then distance
    order = np.lexsort((dist[valid], -score[valid], cell))
    first = np.ones(order.size, dtype=bool)
    first[1:] = cell[order][1:] != cell[order][:-1]
    picked = np.flatnonzero(valid.ravel())[order[first]]
    picked.sort()
    if picked.size > max_n:
        picked = picked[np.linspace(0, picked.size - 1, max_n).round().astype(int)]
    r, c = np.unravel_index(picked, (H, W))
    src = np.stack([c + 0.5, r + 0.5], axis=-1).astype(float)
    return Correspondences(src, src + flow.w[r, c])


def _hartley(pts):
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    s = math.sqrt(2.0) / d if d > 0 else 1.0
    T = np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])
    return T


def _homog(p):
    return np.concatenate([p, np.ones((p.shape[0], 1))], axis=1)


def eight_point_fundamental(pairs: Correspondences) -> np.ndarray:
    """Hartley-normalized linear estimate of F (rank 2, unit Frobenius norm)."""
    if len(pairs) < 8:
        raise TooFewCorrespondences(f"8-point needs at least 8 pairs, got {len(pairs)}")
    Ts, Tt = _hartley(pairs.src), _hartley(pairs.tgt)
    xs = _homog(pairs.src) @ Ts.T
    xt = _homog(pairs.tgt) @ Tt.T
    A = (xt[:, :, None] * xs[:, None, :]).reshape(-1, 9)
    if A.shape[0] < 9:
        A = np.vstack([A, np.zeros((9 - A.shape[0], 9))])
    _, s, Vt = np.linalg.svd(A, full_matrices=False)
    if s[0] == 0 or s[-2] / s[0] < 1e-9:
        raise DegenerateConfiguration(
            f"design matrix rank deficient (sigma_8 / sigma_1 = {s[-2] / max(s[0], 1e-300):.3g})"
        )
    Fn = Vt[-1].reshape(3, 3)
    U, S, Vt2 = np.linalg.svd(Fn)
    Fn = U @ np.diag([S[0], S[1], 0.0]) @ Vt2
    F = Tt.T @ Fn @ Ts
    return F / np.linalg.norm(F)


def normalized_eight_point(pairs: Correspondences, K: CameraIntrinsics) -> np.ndarray:
    """Essential matrix with singular values (1, 1, 0)."""
    F = eight_point_fundamental(pairs)
    E = K.matrix.T @ F @ K.matrix
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def _fundamental_sampson(F, xs, xt):
    """Sampson distances of homogeneous pairs under one F or a stack of them."""
    Fx = xs @ np.swapaxes(F, -1, -2)
    Ftx = xt @ F
    r = np.sum(xt * Fx, axis=-1)
    den = Fx[..., 0] ** 2 + Fx[..., 1] ** 2 + Ftx[..., 0] ** 2 + Ftx[..., 1] ** 2
    return r / np.sqrt(np.maximum(den, 1e-300))


def lmeds_inliers(
    pairs: Correspondences, trials: int = LMEDS_TRIALS, seed: int = LMEDS_SEED,
    sigmas: float = TRIM_SIGMAS, floor_px: float = TRIM_FLOOR_PX,
) -> np.ndarray:
    """Least-median-of-squares inlier mask over seeded minimal 8-pair subsets.

    Each subset gives a linear F; the one with the smallest median Sampson
    distance wins and pairs within ``sigmas`` robust deviations of it are kept.
    The subsets come from a fixed-seed generator, so the result is deterministic.
    """
    n = len(pairs)
    if n < 8:
        raise TooFewCorrespondences(f"8-point needs at least 8 pairs, got {n}")
    Ts, Tt = _hartley(pairs.src), _hartley(pairs.tgt)
    xs = _homog(pairs.src) @ Ts.T
    xt = _homog(pairs.tgt) @ Tt.T
    rng = np.random.default_rng(seed)
    idx = np.stack([rng.choice(n, 8, replace=False) for _ in range(trials)])
    A = xt[idx][:, :, :, None] * xs[idx][:, :, None, :]
    A = np.concatenate([A.reshape(trials, 8, 9), np.zeros((trials, 1, 9))], axis=1)
    _, _, Vt = np.linalg.svd(A)
    F = Vt[:, -1].reshape(trials, 3, 3)
    U, S, Vt2 = np.linalg.svd(F)
    S[:, 2] = 0.0
    F = np.einsum("tij,tj,tjk->tik", U, S, Vt2)
    F = np.einsum("ji,tjk,kl->til", Tt, F, Ts)
    hs, ht = _homog(pairs.src), _homog(pairs.tgt)
    # hypotheses are ranked on an evenly spaced subset; the winner sees all pairs
    sub = np.linspace(0, n - 1, min(n, LMEDS_SCORING_PAIRS)).round().astype(int)
    med = np.median(np.abs(_fundamental_sampson(F, hs[sub], ht[sub])), axis=1)
    best = int(np.argmin(np.where(np.isfinite(med), med, np.inf)))
    e = np.abs(_fundamental_sampson(F[best], hs, ht))
    thr = max(sigmas * 1.4826 * float(np.median(e)), floor_px)
    return e <= thr


def _normalized_rays(pairs: Correspondences, K: CameraIntrinsics):
    Ki = K.inverse
    return _homog(pairs.src) @ Ki.T, _homog(pairs.tgt) @ Ki.T


def cheirality_count(R, t, pairs: Correspondences, K: CameraIntrinsics) -> int:
    """Number of pairs triangulating in front of both cameras."""
    a, q = _normalized_rays(pairs, K)
    Ra = a @ np.asarray(R).T
    c1 = np.cross(q, Ra)
    c2 = np.cross(q, np.broadcast_to(t, q.shape))
    n1 = np.einsum("ij,ij->i", c1, c1)
    parallax = np.sqrt(n1) / (np.linalg.norm(q, axis=1) * np.linalg.norm(Ra, axis=1))
    ok = parallax > 1e-9
    d = -np.einsum("ij,ij->i", c1, c2) / np.where(ok, n1, 1.0)
    zt = d * Ra[:, 2] + t[2]
    return int(np.sum(ok & (d > 0) & (zt > 0)))


def essential_candidates(E):
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def decompose_essential(E, pairs: Correspondences, K: CameraIntrinsics) -> RelativePose:
    cands = essential_candidates(E)
    counts = [cheirality_count(R, t, pairs, K) for R, t in cands]
    best = int(np.argmax(counts))
    if counts[best] == 0 or sorted(counts)[-2] == counts[best]:
        raise CheiralityAmbiguous(f"cheirality votes {counts} have no strict winner")
    R, t = cands[best]
    return RelativePose.from_rt(R, t, scale_known=False)


def sampson_residuals(R, t, pairs: Correspondences, K: CameraIntrinsics) -> np.ndarray:
    """Signed Sampson distances (pixels) of each pair to the epipolar geometry."""
    F = K.inverse.T @ skew(t) @ R @ K.inverse
    return _fundamental_sampson(F, _homog(pairs.src), _homog(pairs.tgt))


def sampson_cost(pose: RelativePose, pairs: Correspondences, K: CameraIntrinsics) -> float:
    e = sampson_residuals(pose.R, pose.t, pairs, K)
    return float(np.sum(e * e))


def _tangent_basis(t):
    t = t / np.linalg.norm(t)
    a = np.eye(3)[int(np.argmin(np.abs(t)))]
    b1 = np.cross(t, a)
    b1 /= np.linalg.norm(b1)
    b2 = np.cross(t, b1)
    return np.stack([b1, b2], axis=1)


def _retract(R, t, B, delta):
    R2 = rotation_matrix(delta[:3]) @ R
    t2 = t + B @ delta[3:]
    return R2, t2 / np.linalg.norm(t2)


@dataclass
class RefineReport:
    pose: RelativePose
    initial_cost: float
    final_cost: float
    iterations: int
    costs: list[float] = field(default_factory=list)
    converged: bool = False


def refine_pose_report(
    pose: RelativePose,
    pairs: Correspondences,
    K: CameraIntrinsics,
    max_iter: int = 20,
    rel_tol: float = 1e-10,
) -> RefineReport:
    """Gauss-Newton on the summed squared Sampson distance.

    Rotation gets a left-multiplied 3-dof update, translation a 2-dof update
    in the tangent plane of the unit sphere.  A step that raises the cost is
    halved until it does not; the best pose seen is returned.
    """
    norm_t = float(np.linalg.norm(pose.t))
    R = pose.R
    t = pose.t / norm_t

    def residuals(R_, t_):
        return sampson_residuals(R_, t_, pairs, K)

    e = residuals(R, t)
    cost = float(e @ e)
    costs = [cost]
    it = 0
    converged = False
    eps = 1e-7
    for it in range(1, max_iter + 1):
        B = _tangent_basis(t)
        J = np.empty((e.size, 5))
        for k in range(5):
            d = np.zeros(5)
            d[k] = eps
            Rp, tp = _retract(R, t, B, d)
            Rm, tm = _retract(R, t, B, -d)
            J[:, k] = (residuals(Rp, tp) - residuals(Rm, tm)) / (2 * eps)
        step, *_ = np.linalg.lstsq(J, -e, rcond=None)
        accepted = False
        for _ in range(30):
            R2, t2 = _retract(R, t, B, step)
            e2 = residuals(R2, t2)
            c2 = float(e2 @ e2)
            if c2 <= cost:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            converged = True
            break
        decrease = cost - c2
        R, t, e = R2, t2, e2
        prev, cost = cost, c2
        costs.append(cost)
        if decrease <= rel_tol * max(prev, 1e-300):
            converged = True
            break
    out = RelativePose.from_rt(R, t * norm_t if pose.scale_known else t, pose.scale_known)
    if not pose.scale_known:
        out = RelativePose(out.r, out.t / np.linalg.norm(out.t), False)
    return RefineReport(out, costs[0], cost, it, costs, converged)


def refine_pose(pose: RelativePose, pairs: Correspondences, K: CameraIntrinsics, max_iter: int = 20) -> RelativePose:
    return refine_pose_report(pose, pairs, K, max_iter).pose


def _solve_pairs(pairs: Correspondences, K: CameraIntrinsics, init: Optional[RelativePose]) -> RelativePose:
    E = normalized_eight_point(pairs, K)
    pose = decompose_essential(E, pairs, K)
    if init is not None and float(np.linalg.norm(init.t)) > 1e-12:
        prior = init.normalized()
        if sampson_cost(prior, pairs, K) < sampson_cost(pose, pairs, K):
            pose = prior
    return refine_pose(pose, pairs, K)


def inlier_mask(pose: RelativePose, pairs: Correspondences, K: CameraIntrinsics,
                sigmas: float = TRIM_SIGMAS, floor_px: float = TRIM_FLOOR_PX) -> np.ndarray:
    """Pairs whose Sampson distance is within ``sigmas`` robust deviations (MAD)."""
    e = np.abs(sampson_residuals(pose.R, pose.t, pairs, K))
    thr = max(sigmas * 1.4826 * float(np.median(e)), floor_px)
    return e <= thr


def estimate_pose_from_pairs(
    pairs: Correspondences,
    K: CameraIntrinsics,
    init: Optional[RelativePose] = None,
    trim_rounds: int = TRIM_ROUNDS,
    robust: bool = True,
) -> RelativePose:
    """8-point, decomposition and refinement, then ``trim_rounds`` passes that
    drop gross outliers and re-solve on the survivors.

    With ``robust`` the first solve only sees the least-median-of-squares
    inliers.  Everything is deterministic; on clean input no pair exceeds the
    floor and the result equals the plain estimate.
    """
    if robust and len(pairs) > 8:
        keep = lmeds_inliers(pairs)
        if 8 <= keep.sum() < len(pairs):
            pairs_in = Correspondences(pairs.src[keep], pairs.tgt[keep])
            try:
                pose = _solve_pairs(pairs_in, K, init)
            except (DegenerateConfiguration, CheiralityAmbiguous):
                pose = _solve_pairs(pairs, K, init)
        else:
            pose = _solve_pairs(pairs, K, init)
    else:
        pose = _solve_pairs(pairs, K, init)
    for _ in range(trim_rounds):
        keep = inlier_mask(pose, pairs, K)
        if keep.all() or keep.sum() < 8:
            break
        try:
            pose = _solve_pairs(Correspondences(pairs.src[keep], pairs.tgt[keep]), K, pose)
        except (DegenerateConfiguration, CheiralityAmbiguous, TooFewCorrespondences):
            break
    return pose


def estimate_pose_from_flow(
    flow: FlowField,
    K: CameraIntrinsics,
    init: Optional[RelativePose] = None,
    max_n: int = DEFAULT_MAX_PAIRS,
) -> RelativePose:
    """Sample -> 8-point -> decompose -> refine.  Usable as a pose callback."""
    pairs = sample_correspondences(flow, flow.mask, max_n)
    return estimate_pose_from_pairs(pairs, K, init)
