"""Command line: ``monostereo [--root DIR] [--threads N] <command> ...``

Commands
    generate CONFIG OUT        render synthetic samples described by a JSON config
    estimate MANIFEST OUT      flow, pose and fused depth for one source frame
    eval ESTIMATE_DIR MANIFEST metrics of an estimate against the sample truth
    flow MANIFEST OUT.flo      coarse-to-fine flow of one (source, target) pair
    pose FLOW CAMERA OUT.json  relative pose from a flow file

Exit codes
    0  success
    2  invalid configuration or scene spec (the message names the key)
    3  unreadable or unwritable file, malformed file contents
    4  estimation failure (the message names the stage)
    5  a required input file is missing
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_ESTIMATION = 4
EXIT_MISSING = 5

GENERATE_KEYS = ("seed", "n_scenes")
ESTIMATE_REPORT = "estimate.json"
EVAL_REPORT = "eval.json"
DATASET_INDEX = "dataset.json"

logger = logging.getLogger("monostereo")


class ConfigError(ValueError):
    pass


class MissingInput(FileNotFoundError):
    pass


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingInput(f"missing file: {path}")
    return path


def _limit_threads(n: Optional[int]) -> None:
    # must run before numpy / scipy load their thread pools
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def _dump(path: Path, obj) -> None:
    from .fileio import _write_json

    _write_json(path, obj)


# ---------------------------------------------------------------- generate


def load_config(path: Path) -> tuple[dict, int, int]:
    """Flat JSON config -> (scene spec dict, top-level seed, scene count)."""
    from .errors import InvalidSpec
    from .synth import SceneSpec

    _require(path)
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    seed = cfg.pop("seed", 0)
    n = cfg.pop("n_scenes", 1)
    for key, v in (("seed", seed), ("n_scenes", n)):
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"config key {key!r} must be a non-negative integer")
    for key, v in cfg.items():
        if isinstance(v, dict):
            raise ConfigError(f"config key {key!r}: nested objects are not allowed")
    try:
        SceneSpec.from_dict(cfg).validate()
    except InvalidSpec as exc:
        raise ConfigError(str(exc)) from exc
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    return cfg, seed, n


def sample_seeds(top_seed: int, n: int) -> list[int]:
    """Per-sample seeds derived from the single top-level seed."""
    import numpy as np

    return [int(s) for s in np.random.SeedSequence(top_seed).generate_state(n, dtype=np.uint32)]


def cmd_generate(args) -> int:
    from .fileio import export_sample
    from .synth import SceneSpec, generate_scene

    cfg, top, n = load_config(args.config)
    out = args.out
    samples = []
    for i, seed in enumerate(sample_seeds(top, n)):
        name = f"scene_{i:04d}"
        sample = generate_scene(SceneSpec.from_dict(dict(cfg)), seed)
        export_sample(sample, out / name, top_seed=top)
        samples.append({"name": name, "seed": seed, "manifest": f"{name}/manifest.json"})
        print(f"{name} seed={seed}")
    _dump(out / DATASET_INDEX, {"top_seed": top, "config": cfg, "samples": samples})
    return EXIT_OK


# ---------------------------------------------------------------- estimate


def _load_sample(manifest: Path):
    from .fileio import import_sample

    return import_sample(_require(manifest))


def _pose_dict(pose) -> dict:
    return {
        "rotation_vector": [float(v) for v in pose.r],
        "translation": [float(v) for v in pose.t],
        "scale_known": bool(pose.scale_known),
    }


def _pose_from_dict(d: dict):
    import numpy as np

    from .camera import RelativePose

    return RelativePose(np.array(d["rotation_vector"], float), np.array(d["translation"], float),
                        bool(d["scale_known"]))


def _targets(sample, source: int, k: Optional[int]) -> list[int]:
    n = len(sample.poses)
    if not 0 <= source < n:
        raise ConfigError(f"source frame {source} out of range 0..{n - 1}")
    others = [i for i in range(n) if i != source]
    if k is not None:
        if k < 1:
            raise ConfigError("--pairs must be at least 1")
        others = others[:k]
    return others


def cmd_estimate(args) -> int:
    from .camera import relative_pose
    from .fileio import write_flow, write_pfm, write_pgm, write_ply
    from .fusion import EXACT_MEAN, WEIGHTED
    from .pipeline import OUTPUT_LEVEL, PipelineOptions, estimate_depth

    sample = _load_sample(args.manifest)
    if any(im is None for im in sample.images):
        raise MissingInput(f"{args.manifest}: sample has no images")
    targets = _targets(sample, args.source, args.pairs)
    opts = PipelineOptions(epipolar=not args.no_epipolar, fusion_mode=EXACT_MEAN if args.exact_mean else WEIGHTED)
    gt = None
    if args.gt_pose:
        gt = [relative_pose(sample.poses[args.source], sample.poses[t]) for t in targets]
    t0 = time.perf_counter()
    result = estimate_depth(sample.images[args.source], [sample.images[t] for t in targets],
                            sample.intrinsics[args.source], opts, gt)
    elapsed = time.perf_counter() - t0

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    s = args.source
    files = {"depth": "depth.pfm", "depth_mask": "depth_mask.pgm", "filled": "filled.pgm",
             "confidence": "confidence.pfm", "points": "points.ply", "pairs": []}
    write_pfm(out / files["depth"], result.depth.depth)
    write_pgm(out / files["depth_mask"], result.depth.mask)
    write_pgm(out / files["filled"], result.depth.filled)
    write_pfm(out / files["confidence"], result.code.confidence)
    for t, pair in zip(targets, result.pairs):
        flow_name = f"flow_{s:02d}_{t:02d}.flo"
        pose_name = f"pose_{s:02d}_{t:02d}.json"
        write_flow(out / flow_name, pair.flow)
        _dump(out / pose_name, _pose_dict(pair.pose))
        files["pairs"].append({"target": t, "flow": flow_name, "pose": pose_name})
    from .pyramid import as_float_image, build_pyramid

    img1 = build_pyramid(as_float_image(sample.images[s]), sample.intrinsics[s]).levels[OUTPUT_LEVEL]
    n_pts = write_ply(out / files["points"], result.depth.depth, result.pairs[0].intrinsics, img1, result.depth.mask)

    report = {
        "manifest": os.path.relpath(args.manifest.resolve(), out.resolve()),
        "seed": sample.seed,
        "top_seed": _top_seed(args.manifest),
        "source": s,
        "targets": targets,
        "level": OUTPUT_LEVEL,
        "options": {"epipolar": opts.epipolar, "gt_pose": bool(args.gt_pose), "fusion_mode": opts.fusion_mode,
                    "pairs": len(targets)},
        "points": n_pts,
        "runtime_s": round(elapsed, 3),
        "files": files,
    }
    _dump(out / ESTIMATE_REPORT, report)
    if sample.primitives:
        metrics = evaluate_estimate(out, args.manifest)
        report["metrics"] = metrics
        _dump(out / ESTIMATE_REPORT, report)
        agg = metrics["aggregate"]
        print(" ".join(f"{k}={v:.4g}" for k, v in agg.items()))
    print(f"wrote {out}")
    return EXIT_OK


def _top_seed(manifest: Path):
    from .fileio import read_manifest

    return read_manifest(manifest).get("top_seed")


# ---------------------------------------------------------------- eval


FRAME_KEYS = ("flow_epe", "rotation_error_deg", "translation_error_deg")
DEPTH_KEYS = ("l1_inv", "sc_inv", "l1_rel")


def _as_stored(a):
    import numpy as np

    # truth is compared at the precision the estimate files carry
    return np.asarray(a, dtype=np.float32).astype(float)


def evaluate_estimate(est_dir: Path, manifest: Path) -> dict:
    """Per-frame flow and pose errors plus source depth metrics, with means."""
    import numpy as np

    from .camera import relative_pose
    from .fileio import read_flow, read_mask, read_pfm
    from .metrics import evaluate_depth, flow_epe, pose_errors
    from .pyramid import FlowField
    from .synth import ground_truth_flow

    report_path = _require(est_dir / ESTIMATE_REPORT)
    est = json.loads(report_path.read_text(encoding="utf-8"))
    files = est["files"]
    depth_path = _require(est_dir / files["depth"])
    for p in files["pairs"]:
        _require(est_dir / p["flow"])
        _require(est_dir / p["pose"])
    sample = _load_sample(manifest)
    if not sample.primitives:
        raise ConfigError(f"{manifest}: sample has no scene description to evaluate against")
    level = int(est["level"])
    truth = sample.at_level(level)
    s = int(est["source"])
    Ks = truth.intrinsics

    records = []
    for p in files["pairs"]:
        t = int(p["target"])
        gt_pose = relative_pose(sample.poses[s], sample.poses[t])
        gflow, occ = ground_truth_flow(truth.depths[s], gt_pose, Ks[s], Ks[t], truth.depths[t])
        gflow = FlowField(_as_stored(gflow.w), gflow.mask, level)
        flow = read_flow(est_dir / p["flow"], level)
        pose = _pose_from_dict(json.loads((est_dir / p["pose"]).read_text(encoding="utf-8")))
        rot, trans = pose_errors(pose, gt_pose)
        records.append({
            "frame": t,
            "flow_epe": flow_epe(flow, gflow, ~occ),
            "rotation_error_deg": rot,
            "translation_error_deg": trans,
        })
    depth = read_pfm(depth_path).astype(float)
    mask_path = est_dir / files.get("depth_mask", "")
    mask = read_mask(mask_path) if files.get("depth_mask") and mask_path.exists() else None
    gdepth = _as_stored(truth.depths[s])
    l1_inv, sc_inv, l1_rel = evaluate_depth(depth, gdepth, mask)
    depth_row = {"l1_inv": l1_inv, "sc_inv": sc_inv, "l1_rel": l1_rel}
    aggregate = {k: float(np.mean([r[k] for r in records])) for k in FRAME_KEYS}
    aggregate.update(depth_row)
    return {"source": s, "level": level, "frames": records, "depth": depth_row, "aggregate": aggregate}


def cmd_eval(args) -> int:
    report = evaluate_estimate(args.estimate, args.manifest)
    out = args.out if args.out is not None else args.estimate / EVAL_REPORT
    _dump(out, report)
    for r in report["frames"]:
        print(f"frame {r['frame']}: " + " ".join(f"{k}={r[k]:.4g}" for k in FRAME_KEYS))
    print("depth: " + " ".join(f"{k}={v:.4g}" for k, v in report["depth"].items()))
    return EXIT_OK


# ---------------------------------------------------------------- single stages


def cmd_flow(args) -> int:
    from .camera import relative_pose
    from .fileio import write_flow
    from .motion import DEFAULT_MAX_PAIRS
    from .pipeline import pose_callback, stage
    from .pyramid import build_pyramid, coarse_to_fine_flow

    sample = _load_sample(args.manifest)
    n = len(sample.poses)
    for name, i in (("source", args.source), ("target", args.target)):
        if not 0 <= i < n or sample.images[i] is None:
            raise ConfigError(f"{name} frame {i} is not available")
    gt = relative_pose(sample.poses[args.source], sample.poses[args.target]) if args.gt_pose else None
    with stage("pyramid"):
        src = build_pyramid(sample.images[args.source], sample.intrinsics[args.source])
        tgt = build_pyramid(sample.images[args.target], sample.intrinsics[args.target])
    with stage("flow"):
        res = coarse_to_fine_flow(src, tgt, pose_callback(DEFAULT_MAX_PAIRS, gt), epipolar=not args.no_epipolar)
    mask_path = write_flow(args.out, res.flow)
    print(f"wrote {args.out} and {mask_path} (level {res.flow.level})")
    return EXIT_OK


def cmd_pose(args) -> int:
    import math

    from .fileio import read_camera, read_flow
    from .motion import estimate_pose_from_flow
    from .pipeline import stage

    K, _ = read_camera(_require(args.camera))
    flow = read_flow(_require(args.flow))
    w = flow.w.shape[1]
    level = round(math.log2(K.width / w)) if w > 0 else -1
    if level < 0 or K.at_level(level).width != w:
        raise ConfigError(f"flow width {w} matches no pyramid level of a {K.width} px camera")
    flow.level = level
    with stage("pose"):
        pose = estimate_pose_from_flow(flow, K.at_level(level))
    _dump(args.out, _pose_dict(pose))
    print(f"wrote {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monostereo", description="Monocular multi-view depth from a moving camera.")
    p.add_argument("--root", type=Path, default=Path("."), help="base directory for relative paths")
    p.add_argument("--threads", type=int, default=None, help="cap on numerical library threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render synthetic samples")
    g.add_argument("config", type=Path)
    g.add_argument("out", type=Path)
    g.set_defaults(func=cmd_generate, paths=("config", "out"))

    e = sub.add_parser("estimate", help="two-view / multi-view depth estimation")
    e.add_argument("manifest", type=Path)
    e.add_argument("out", type=Path)
    e.add_argument("--source", type=int, default=0)
    e.add_argument("--pairs", type=int, default=None, metavar="K", help="use the first K targets")
    e.add_argument("--no-epipolar", action="store_true", help="plain search without pose guidance")
    e.add_argument("--gt-pose", action="store_true", help="use ground-truth poses instead of estimating")
    e.add_argument("--exact-mean", action="store_true", help="unweighted mean fusion")
    e.set_defaults(func=cmd_estimate, paths=("manifest", "out"))

    v = sub.add_parser("eval", help="evaluate an estimate directory")
    v.add_argument("estimate", type=Path)
    v.add_argument("manifest", type=Path)
    v.add_argument("--out", type=Path, default=None)
    v.set_defaults(func=cmd_eval, paths=("estimate", "manifest", "out"))

    f = sub.add_parser("flow", help="flow of one pair")
    f.add_argument("manifest", type=Path)
    f.add_argument("out", type=Path)
    f.add_argument("--source", type=int, default=0)
    f.add_argument("--target", type=int, default=1)
    f.add_argument("--no-epipolar", action="store_true")
    f.add_argument("--gt-pose", action="store_true")
    f.set_defaults(func=cmd_flow, paths=("manifest", "out"))

    q = sub.add_parser("pose", help="pose from a flow file")
    q.add_argument("flow", type=Path)
    q.add_argument("camera", type=Path)
    q.add_argument("out", type=Path)
    q.set_defaults(func=cmd_pose, paths=("flow", "camera", "out"))
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    _limit_threads(args.threads)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    for name in args.paths:
        value = getattr(args, name)
        if value is not None and not value.is_absolute():
            setattr(args, name, args.root / value)

    from .errors import InvalidSpec, MonoStereoError, StageFailure
    from .fileio import FormatError

    try:
        return args.func(args)
    except (ConfigError, InvalidSpec) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except StageFailure as exc:
        print(f"error: estimation failed in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_ESTIMATION
    except MonoStereoError as exc:
        print(f"error: estimation failed in stage {args.command}: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (FormatError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
