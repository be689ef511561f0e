"""Readers and writers: camera JSON, FLO2 flow, PFM depth, PGM masks, PNG
images, ASCII PLY point clouds and dataset manifests.

Binary rasters are float32 on disk; reading returns the stored values
exactly, so write -> read -> write is byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional, Union

import numpy as np
from PIL import Image

from .camera import CameraIntrinsics, RelativePose, pixel_grid
from .pyramid import FlowField

PathLike = Union[str, os.PathLike]

FLOW_MAGIC = b"FLO2"
MANIFEST_NAME = "manifest.json"
MANIFEST_FORMAT = "monostereo-sample"
MANIFEST_VERSION = 1


class FormatError(ValueError):
    """A file exists but does not follow the expected layout."""


def _path_error(path, exc: OSError) -> OSError:
    err = OSError(exc.errno, f"{path}: {exc.strerror or exc}")
    err.filename = str(path)
    return err


# ---------------------------------------------------------------- cameras


def camera_to_dict(K: CameraIntrinsics, pose: Optional[RelativePose] = None) -> dict:
    pose = RelativePose.identity() if pose is None else pose
    return {
        "fx": float(K.fx),
        "fy": float(K.fy),
        "cx": float(K.cx),
        "cy": float(K.cy),
        "width": int(K.width),
        "height": int(K.height),
        "rotation_vector": [float(v) for v in pose.r],
        "translation": [float(v) for v in pose.t],
        "scale_known": bool(pose.scale_known),
    }


CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "rotation_vector", "translation", "scale_known")


def camera_from_dict(d: dict) -> tuple[CameraIntrinsics, RelativePose]:
    missing = [k for k in CAMERA_KEYS if k not in d]
    if missing:
        raise FormatError(f"camera is missing key(s): {', '.join(missing)}")
    unknown = sorted(set(d) - set(CAMERA_KEYS))
    if unknown:
        raise FormatError(f"unknown camera key(s): {', '.join(unknown)}")
    K = CameraIntrinsics(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                         int(d["width"]), int(d["height"]))
    pose = RelativePose(np.array(d["rotation_vector"], dtype=float), np.array(d["translation"], dtype=float),
                        bool(d["scale_known"]))
    return K, pose


def _write_json(path: PathLike, obj) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise _path_error(path, exc) from exc


def read_json(path: PathLike):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def write_camera(path: PathLike, K: CameraIntrinsics, pose: Optional[RelativePose] = None) -> None:
    # json writes floats with repr(), which round-trips doubles exactly
    _write_json(path, camera_to_dict(K, pose))


def read_camera(path: PathLike) -> tuple[CameraIntrinsics, RelativePose]:
    try:
        return camera_from_dict(read_json(path))
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------- rasters


def write_flo2(path: PathLike, w: np.ndarray) -> None:
    """2-channel float32 flow with a 12-byte header: b"FLO2", width, height."""
    w = np.asarray(w)
    if w.ndim != 3 or w.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {w.shape}")
    h, wd = w.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(FLOW_MAGIC + struct.pack("<II", wd, h))
            fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
    except OSError as exc:
        raise _path_error(path, exc) from exc


def read_flo2(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != FLOW_MAGIC:
        raise FormatError(f"{path}: not a FLO2 file")
    wd, h = struct.unpack("<II", data[4:12])
    if len(data) != 12 + 8 * wd * h:
        raise FormatError(f"{path}: expected {8 * wd * h} payload bytes, found {len(data) - 12}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, wd, 2).astype(np.float32)


def write_pgm(path: PathLike, mask: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM; boolean masks are stored as 0 / 255."""
    a = np.asarray(mask)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    if a.ndim != 2 or a.dtype != np.uint8:
        raise ValueError("PGM rasters must be 2D uint8 or bool")
    h, w = a.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(a).tobytes())
    except OSError as exc:
        raise _path_error(path, exc) from exc


def _read_header_tokens(data: bytes, count: int):
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise FormatError("truncated header")
        tokens.append(data[i:j].decode("ascii"))
        i = j
    return tokens, i + 1  # one whitespace byte ends the header


def read_pgm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        (magic, w, h, maxval), off = _read_header_tokens(data, 4)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if magic != "P5" or int(maxval) != 255:
        raise FormatError(f"{path}: only 8-bit binary PGM is supported")
    w, h = int(w), int(h)
    if len(data) - off != w * h:
        raise FormatError(f"{path}: expected {w * h} payload bytes")
    return np.frombuffer(data, dtype=np.uint8, offset=off).reshape(h, w).copy()


def read_mask(path: PathLike) -> np.ndarray:
    return read_pgm(path) > 127


def write_pfm(path: PathLike, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM (scale -1.0), rows stored bottom-up."""
    d = np.asarray(depth)
    if d.ndim != 2:
        raise ValueError("PFM writer expects a 2D array")
    h, w = d.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
            fh.write(np.ascontiguousarray(d[::-1], dtype="<f4").tobytes())
    except OSError as exc:
        raise _path_error(path, exc) from exc


def read_pfm(path: PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        (magic, w, h, scale), off = _read_header_tokens(data, 4)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if magic not in ("Pf", "PF"):
        raise FormatError(f"{path}: not a PFM file")
    ch = 1 if magic == "Pf" else 3
    w, h, scale = int(w), int(h), float(scale)
    dtype = "<f4" if scale < 0 else ">f4"
    if len(data) - off != 4 * w * h * ch:
        raise FormatError(f"{path}: expected {4 * w * h * ch} payload bytes")
    a = np.frombuffer(data, dtype=dtype, offset=off).reshape((h, w) if ch == 1 else (h, w, 3))
    return a[::-1].astype(np.float32)


def write_png(path: PathLike, image: np.ndarray) -> None:
    a = np.asarray(image)
    if a.dtype != np.uint8:
        a = np.clip(np.round(np.asarray(a, dtype=float) * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(a).save(path, format="PNG")
    except OSError as exc:
        raise _path_error(path, exc) from exc


def read_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB")).copy()


def write_flow(path: PathLike, flow: FlowField) -> Path:
    """FLO2 vectors plus a sibling ``*_mask.pgm`` validity raster; returns the mask path."""
    path = Path(path)
    write_flo2(path, flow.w)
    mask_path = path.with_name(path.stem + "_mask.pgm")
    write_pgm(mask_path, flow.mask)
    return mask_path


def read_flow(path: PathLike, level: int = 0) -> FlowField:
    path = Path(path)
    w = read_flo2(path).astype(float)
    mask_path = path.with_name(path.stem + "_mask.pgm")
    mask = read_mask(mask_path) if mask_path.exists() else np.ones(w.shape[:2], bool)
    return FlowField(w, mask, level)


def write_ply(path: PathLike, depth: np.ndarray, K: CameraIntrinsics, image: np.ndarray,
              mask: Optional[np.ndarray] = None) -> int:
    """ASCII point cloud of the back-projected depth with per-vertex colour."""
    d = np.asarray(depth, dtype=float)
    h, w = d.shape
    keep = np.isfinite(d) & (d > 0)
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool)
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    x = pixel_grid(w, h)
    X = np.stack([(x[..., 0] - K.cx) / K.fx * d, (x[..., 1] - K.cy) / K.fy * d, d], axis=-1)
    pts = X[keep]
    cols = img[keep]
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {pts.shape[0]}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [f"{p[0]:.6g} {p[1]:.6g} {p[2]:.6g} {c[0]} {c[1]} {c[2]}" for p, c in zip(pts, cols)]
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise _path_error(path, exc) from exc
    return int(pts.shape[0])


def read_ply(path: PathLike) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "r", encoding="ascii") as fh:
        text = fh.read().splitlines()
    if not text or text[0] != "ply":
        raise FormatError(f"{path}: not a PLY file")
    n = None
    end = None
    for i, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[2])
        if line == "end_header":
            end = i
            break
    if n is None or end is None:
        raise FormatError(f"{path}: malformed PLY header")
    rows = [r.split() for r in text[end + 1:end + 1 + n]]
    if len(rows) != n:
        raise FormatError(f"{path}: expected {n} vertices, found {len(rows)}")
    a = np.array(rows, dtype=float).reshape(n, 6)
    return a[:, :3], a[:, 3:].astype(np.uint8)


# ---------------------------------------------------------------- samples


def frame_files(i: int) -> dict:
    return {
        "image": f"frame_{i:02d}.png",
        "camera": f"frame_{i:02d}_camera.json",
        "depth": f"frame_{i:02d}_depth.pfm",
        "depth_mask": f"frame_{i:02d}_depth_mask.pgm",
    }


def pair_files(src: int, tgt: int) -> dict:
    return {"flow": f"flow_{src:02d}_{tgt:02d}.flo", "mask": f"flow_{src:02d}_{tgt:02d}_mask.pgm"}


def export_sample(sample, directory: PathLike, top_seed: Optional[int] = None) -> Path:
    """Write every frame and pair of a SceneSample plus ``manifest.json``."""
    out = Path(directory)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise _path_error(out, exc) from exc
    frames = []
    for i, (K, pose) in enumerate(zip(sample.intrinsics, sample.poses)):
        names = frame_files(i)
        if sample.images[i] is not None:
            write_png(out / names["image"], sample.images[i])
        else:
            names["image"] = None
        write_camera(out / names["camera"], K, pose)
        write_pfm(out / names["depth"], sample.depths[i].depth)
        write_pgm(out / names["depth_mask"], sample.depths[i].mask)
        frames.append({"id": i, **names})
    pairs = []
    for i, flow in enumerate(sample.flows, start=1):
        names = pair_files(0, i)
        write_flo2(out / names["flow"], flow.w)
        write_pgm(out / names["mask"], flow.mask)
        pairs.append({"source": 0, "target": i, **names})
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "seed": int(sample.seed),
        "top_seed": None if top_seed is None else int(top_seed),
        "spec": sample.spec.to_dict(),
        "primitives": sample.primitives,
        "source": 0,
        "frames": frames,
        "pairs": pairs,
    }
    path = out / MANIFEST_NAME
    _write_json(path, manifest)
    return path


def read_manifest(path: PathLike) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    m = read_json(path)
    if not isinstance(m, dict) or m.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a sample manifest")
    for key in ("frames", "pairs", "seed", "spec"):
        if key not in m:
            raise FormatError(f"{path}: manifest lacks {key!r}")
    return m


def import_sample(path: PathLike):
    """Inverse of :func:`export_sample` (float payloads come back as stored)."""
    from .synth import SceneSample, SceneSpec
    from .triangulation import DepthMap

    path = Path(path)
    root = path if path.is_dir() else path.parent
    m = read_manifest(path)
    intr, poses, images, depths = [], [], [], []
    for f in sorted(m["frames"], key=lambda f: f["id"]):
        K, pose = read_camera(root / f["camera"])
        intr.append(K)
        poses.append(pose)
        images.append(read_png(root / f["image"]) if f.get("image") else None)
        d = read_pfm(root / f["depth"]).astype(float)
        depths.append(DepthMap(d, read_mask(root / f["depth_mask"])))
    flows, occ = [], []
    for p in sorted(m["pairs"], key=lambda p: p["target"]):
        w = read_flo2(root / p["flow"]).astype(float)
        mask = read_mask(root / p["mask"])
        flows.append(FlowField(w, mask, 0))
        occ.append(~mask)
    spec = SceneSpec.from_dict(m["spec"])
    return SceneSample(spec, int(m["seed"]), m.get("primitives") or [], intr, poses, images, depths, flows, occ)


def float32_view(sample):
    """Copy of ``sample`` with float rasters rounded to their on-disk precision."""
    from dataclasses import replace

    from .triangulation import DepthMap

    depths = [DepthMap(d.depth.astype(np.float32).astype(float), d.mask.copy()) for d in sample.depths]
    flows = [FlowField(f.w.astype(np.float32).astype(float), f.mask.copy(), f.level) for f in sample.flows]
    return replace(sample, depths=depths, flows=flows)
