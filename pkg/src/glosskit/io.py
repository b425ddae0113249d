"""Scene files, NeRF-Synthetic style manifests, PNG/PFM images and CSV exports."""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .lighting import ENV_COLS, ENV_ROWS, EnvironmentMap
from .optimize import LossReport, View
from .rasterize import Camera
from .surfel import DTYPE, Scene, Surfel

SCENE_FORMAT = "glosskit-scene"
SCENE_VERSION = 1

SURFEL_FIELDS = ("position", "tangent_u", "tangent_v", "scale_u", "scale_v", "opacity", "roughness",
                 "specular_reflectance", "diffuse_sh", "indirect_sh")
CAMERA_FIELDS = ("fx", "fy", "cx", "cy", "width", "height", "rotation", "translation")
SCENE_KEYS = ("format", "version", "cameras", "surfels", "environment", "masks")

# OpenGL camera axes (x right, y up, looking down -z) to ours (x right, y down, +z forward)
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


class SceneFileError(ValueError):
    """Malformed scene file; the message names the format version it was checked against."""

    def __init__(self, message: str):
        super().__init__(f"{SCENE_FORMAT} v{SCENE_VERSION}: {message}")


class ManifestError(ValueError):
    pass


@dataclass
class SceneFile:
    scene: Scene
    env: EnvironmentMap
    cameras: list[Camera] = field(default_factory=list)
    masks: list[str | None] = field(default_factory=list)


# ----------------------------------------------------------------------------- scene files


def _surfel_record(s: Surfel) -> dict:
    return {
        "position": s.position.tolist(),
        "tangent_u": s.tangent_u.tolist(),
        "tangent_v": s.tangent_v.tolist(),
        "scale_u": s.scale_u,
        "scale_v": s.scale_v,
        "opacity": s.opacity,
        "roughness": s.roughness,
        "specular_reflectance": s.specular_reflectance.tolist(),
        "diffuse_sh": s.diffuse_sh.tolist(),
        "indirect_sh": s.indirect_sh.tolist(),
    }


def camera_record(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height,
        "rotation": cam.rotation.tolist(), "translation": cam.translation.tolist(),
    }


def _check_keys(record: dict, allowed, where: str, required=None) -> None:
    for key in record:
        if key not in allowed:
            raise SceneFileError(f"unknown field '{key}' in {where}")
    for key in required if required is not None else allowed:
        if key not in record:
            raise SceneFileError(f"missing field '{key}' in {where}")


def write_scene(path, scene: Scene, env: EnvironmentMap, cameras=(), masks=None, env_path=None) -> None:
    """Write a versioned JSON scene. ``env_path`` stores the map as a PFM beside the file instead of inline."""
    path = Path(path)
    if env_path is not None:
        env_path = Path(env_path)
        write_env_pfm(env_path if env_path.is_absolute() else path.parent / env_path, env)
        environment = {"path": str(env_path)}
    else:
        environment = {"radiance": env.numpy().tolist()}
    doc = {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "cameras": [camera_record(c) for c in cameras],
        "surfels": [_surfel_record(s) for s in scene.surfels()],
        "environment": environment,
    }
    if masks is not None:
        doc["masks"] = [None if m is None else str(m) for m in masks]
    path.write_text(json.dumps(doc, indent=1))


def parse_camera(rec: dict, where: str = "camera") -> Camera:
    _check_keys(rec, CAMERA_FIELDS, where)
    try:
        return Camera(**{k: rec[k] for k in CAMERA_FIELDS})
    except ValueError as e:
        raise SceneFileError(f"{where}: {e}") from None


def read_scene(path) -> SceneFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise SceneFileError(f"{path}: not valid JSON ({e})") from None
    if not isinstance(doc, dict) or doc.get("format") != SCENE_FORMAT:
        raise SceneFileError(f"{path}: not a scene file")
    if doc.get("version") != SCENE_VERSION:
        raise SceneFileError(f"unsupported version {doc.get('version')!r}")
    _check_keys(doc, SCENE_KEYS, "scene", required=("format", "version", "surfels", "environment"))

    surfels = []
    for i, rec in enumerate(doc["surfels"]):
        _check_keys(rec, SURFEL_FIELDS, f"surfel {i}")
        try:
            surfels.append(Surfel(**rec))
        except ValueError as e:
            raise SceneFileError(f"surfel {i}: {e}") from None
    cameras = [parse_camera(c, f"camera {i}") for i, c in enumerate(doc.get("cameras", []))]

    env_rec = doc["environment"]
    if not isinstance(env_rec, dict) or len(env_rec) != 1 or not ({"radiance", "path"} & set(env_rec)):
        raise SceneFileError("environment must hold exactly one of 'radiance' or 'path'")
    try:
        if "path" in env_rec:
            p = Path(env_rec["path"])
            env = read_env(p if p.is_absolute() else path.parent / p)
        else:
            env = EnvironmentMap(np.asarray(env_rec["radiance"], dtype=np.float64))
    except ValueError as e:
        raise SceneFileError(f"environment: {e}") from None

    masks = doc.get("masks") or []
    if masks and len(masks) != len(cameras):
        raise SceneFileError("masks must list one entry per camera")
    return SceneFile(Scene.from_surfels(surfels), env, cameras, masks)


# ----------------------------------------------------------------------------- images


def write_pfm(path, data) -> None:
    """Little-endian PFM; (H, W) is grayscale 'Pf', (H, W, 3) is color 'PF'. Row 0 is the top row."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        header = "Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        header = "PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3) data, got {data.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{header}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(data[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(\S+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a PFM file")
    channels = 3 if m.group(1) == b"PF" else 1
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    body = raw[m.end():]
    if len(body) < 4 * count:
        raise ValueError(f"{path}: truncated PFM data")
    data = np.frombuffer(body[: 4 * count], dtype=dtype).astype(np.float64)
    data = data.reshape(h, w, channels) if channels == 3 else data.reshape(h, w)
    return data[::-1].copy()


def write_env_pfm(path, env: EnvironmentMap) -> None:
    """Environment as a 32x16 color PFM (width = azimuth, height = polar angle)."""
    write_pfm(path, env.numpy())


def read_env(path) -> EnvironmentMap:
    """Environment map from a PFM or a JSON file holding a 16x32x3 ``radiance`` array."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        doc = json.loads(path.read_text())
        data = np.asarray(doc["radiance"] if isinstance(doc, dict) else doc, dtype=np.float64)
    else:
        data = read_pfm(path)
    if data.ndim != 3 or data.shape != (ENV_ROWS, ENV_COLS, 3):
        shape = "x".join(str(s) for s in data.shape[:2][::-1])
        raise ValueError(f"environment map must be {ENV_COLS}x{ENV_ROWS} (width x height) RGB, got {shape}")
    return EnvironmentMap(data)


def to_uint8(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, rgb, alpha=None) -> None:
    """8-bit PNG of an (H, W, 3) float image clamped to [0, 1]; optional (H, W) alpha."""
    rgb = to_uint8(rgb)
    if alpha is None:
        Image.fromarray(rgb, "RGB").save(path)
    else:
        a = to_uint8(alpha)[..., None]
        Image.fromarray(np.concatenate([rgb, a], -1), "RGBA").save(path)


def read_image(path, size: tuple[int, int] | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Float RGB in [0, 1] and the alpha channel as a mask (None without alpha).

    ``size`` = (width, height) resamples with a box filter.
    """
    with Image.open(path) as im:
        im.load()
        has_alpha = im.mode in ("RGBA", "LA") or (im.mode == "P" and "transparency" in im.info)
        im = im.convert("RGBA" if has_alpha else "RGB")
        if size is not None and im.size != tuple(size):
            im = im.resize(tuple(size), Image.Resampling.BOX)
        data = np.asarray(im, dtype=np.float64) / 255.0
    if has_alpha:
        return data[..., :3], data[..., 3]
    return data, None


def read_mask(path, size=None) -> np.ndarray:
    rgb, alpha = read_image(path, size)
    return alpha if alpha is not None else rgb.mean(-1)


# ----------------------------------------------------------------------------- datasets


def _resolve(base: Path, name: str) -> Path:
    p = Path(name)
    p = p if p.is_absolute() else base / p
    if not p.exists() and not p.suffix:
        p = p.with_suffix(".png")
    return p


def load_manifest(path, width: int | None = None) -> list[View]:
    """Views from a NeRF-Synthetic ``transforms.json``.

    Frames need ``file_path`` and an OpenGL-convention camera-to-world
    ``transform_matrix``; intrinsics come from ``camera_angle_x``. A frame's
    optional ``mask_path`` overrides the image alpha channel. ``width``
    resamples every view to that width.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    doc = json.loads(path.read_text())
    if "camera_angle_x" not in doc or "frames" not in doc:
        raise ManifestError(f"{path}: needs 'camera_angle_x' and 'frames'")
    frames = doc["frames"]
    if not frames:
        raise ManifestError(f"{path}: no frames")
    base = path.parent
    for fr in frames:
        for key in ("file_path", "mask_path"):
            if key in fr and not _resolve(base, fr[key]).exists():
                raise ManifestError(f"missing file: {_resolve(base, fr[key])}")

    views = []
    for i, fr in enumerate(frames):
        img_path = _resolve(base, fr["file_path"])
        with Image.open(img_path) as im:
            w0, h0 = im.size
        w = width or w0
        h = max(1, int(round(h0 * w / w0)))
        rgb, alpha = read_image(img_path, (w, h))
        if "mask_path" in fr:
            alpha = read_mask(_resolve(base, fr["mask_path"]), (w, h))
        c2w = np.asarray(fr["transform_matrix"], dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ManifestError(f"frame {i}: transform_matrix must be 4x4")
        R = c2w[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-4 or abs(np.linalg.det(R) - 1) > 1e-4 or \
                np.abs(c2w[3] - [0, 0, 0, 1]).max() > 1e-4:
            raise ManifestError(f"frame {i}: transform_matrix is not rigid")
        c2w = c2w @ GL_TO_CV
        rot = c2w[:3, :3].T
        # snap to the nearest rotation so small numeric drift passes the camera check
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
        focal = 0.5 * w / math.tan(0.5 * float(doc["camera_angle_x"]))
        cam = Camera(focal, focal, w / 2, h / 2, w, h, rot, -rot @ c2w[:3, 3])
        mask = None if alpha is None else torch.as_tensor(alpha, dtype=DTYPE)
        if alpha is not None:
            # pixels outside the mask are black in the renderer's convention
            rgb = rgb * alpha[..., None]
        views.append(View(torch.as_tensor(rgb, dtype=DTYPE), cam, mask))
    return views


def write_manifest(directory, views: list[View]) -> Path:
    """Write views as RGBA PNGs plus a ``transforms.json``; all views share one horizontal field of view."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cam0 = views[0].camera
    frames = []
    for i, v in enumerate(views):
        name = f"r_{i}"
        rgb = v.image.detach().numpy()
        alpha = None if v.mask is None else v.mask.detach().numpy()
        if alpha is not None:
            # PNG alpha is straight; the loader premultiplies again
            rgb = np.where(alpha[..., None] > 0, rgb / np.maximum(alpha[..., None], 1e-12), 0.0)
        write_png(directory / f"{name}.png", rgb, alpha)
        c2w = v.camera.camera_to_world() @ GL_TO_CV
        frames.append({"file_path": f"./{name}", "transform_matrix": c2w.tolist()})
    doc = {"camera_angle_x": 2 * math.atan(0.5 * cam0.width / cam0.fx), "frames": frames}
    out = directory / "transforms.json"
    out.write_text(json.dumps(doc, indent=1))
    return out


# ----------------------------------------------------------------------------- tables


def write_loss_csv(path, history: list[LossReport]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(LossReport.CSV_FIELDS)
        for rep in history:
            w.writerow([rep.iteration] + [repr(float(x)) for x in rep.row()[1:]])


def read_loss_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return {k: np.array([float(r[k]) for r in rows]) for k in LossReport.CSV_FIELDS}


def write_visibility_pfm(path, table) -> None:
    """Visibility table as a grayscale PFM, one row per surfel and one column per direction."""
    write_pfm(path, np.asarray(table, dtype=np.float64))


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
