"""Forward renderer for surfel scenes.

Rendering runs in two passes. The planning pass (no autograd) intersects
every pixel ray with every surfel, applies the 3-sigma and 1/255 cutoffs,
sorts hits by depth and truncates once transmittance is exhausted. The
evaluation pass recomputes the selected hits differentiably, shades them
and alpha-composites. Keeping the discrete choices in a :class:`HitPlan`
lets gradient checks hold the hit set fixed while parameters move.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .brdf import DEFAULT_NS, dot, fibonacci_dirs, sample_frame, specular_radiance
from .lighting import EnvironmentMap, incident_radiance
from .sh import eval_sh
from .surfel import DTYPE, Scene, Surfel
from .threads import pmap

ALPHA_CUTOFF = 1.0 / 255.0
T_STOP = 1e-4
KERNEL_CUTOFF_SQ = 9.0
PARALLEL_EPS = 1e-9
DEFAULT_CHUNK = 2048


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))  # world -> camera
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        R = self.rotation
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with det +1")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), fov_x: float = math.radians(40), width: int = 64,
                height: int = 64) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        f = np.asarray(target, dtype=np.float64) - eye
        f /= np.linalg.norm(f)
        x = np.cross(f, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(f, np.array([1.0, 0.0, 0.0]) if abs(f[0]) < 0.9 else np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(f, x)
        R = np.stack([x, y, f])
        focal = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(focal, focal, width / 2, height / 2, width, height, R, -R @ eye)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[2].copy()

    def camera_to_world(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation.T
        M[:3, 3] = self.center
        return M

    def project(self, point) -> np.ndarray:
        pc = self.rotation @ np.asarray(point, dtype=np.float64) + self.translation
        return np.array([self.fx * pc[0] / pc[2] + self.cx, self.fy * pc[1] / pc[2] + self.cy])

    def pixel_grid(self) -> np.ndarray:
        """Continuous coordinates of all pixel centers, row-major (H*W, 2)."""
        j, i = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        return np.stack([j.ravel(), i.ravel()], axis=-1)

    def ray_dirs(self) -> torch.Tensor:
        px = self.pixel_grid()
        d = np.stack([(px[:, 0] - self.cx) / self.fx, (px[:, 1] - self.cy) / self.fy, np.ones(len(px))], -1)
        d = d @ self.rotation  # camera -> world is R^T, applied to row vectors
        return torch.as_tensor(d / np.linalg.norm(d, axis=1, keepdims=True), dtype=DTYPE)


def pixel_ray(camera: Camera, px) -> tuple[np.ndarray, np.ndarray]:
    x, y = (float(c) for c in px)
    if not (0.0 <= x <= camera.width and 0.0 <= y <= camera.height):
        raise ValueError(f"pixel ({x}, {y}) outside {camera.width}x{camera.height} image")
    d_cam = np.array([(x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy, 1.0])
    d = camera.rotation.T @ d_cam
    return camera.center, d / np.linalg.norm(d)


def ray_plane_uv(ray, surfel: Surfel):
    """Local (u, v) and ray parameter t of the hit with the surfel plane, or None."""
    origin, direction = (np.asarray(x, dtype=np.float64) for x in ray)
    n = np.cross(surfel.tangent_u, surfel.tangent_v)
    n /= np.linalg.norm(n)
    denom = direction @ n
    if abs(denom) < PARALLEL_EPS:
        return None
    t = ((surfel.position - origin) @ n) / denom
    if t <= 0:
        return None
    rel = origin + t * direction - surfel.position
    return {"u": rel @ surfel.tangent_u / surfel.scale_u, "v": rel @ surfel.tangent_v / surfel.scale_v, "t": t}


def splat_alpha(surfel: Surfel, u: float, v: float) -> float:
    return surfel.opacity * math.exp(-0.5 * (u * u + v * v))


def plan_mask(alpha: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Drop sub-1/255 hits, then everything after transmittance falls below 1e-4."""
    with torch.no_grad():
        keep = valid & (alpha >= ALPHA_CUTOFF)
        a = torch.where(keep, alpha, torch.zeros_like(alpha))
        T = _exclusive_transmittance(a)
        return keep & (T >= T_STOP)


def _exclusive_transmittance(alpha: torch.Tensor) -> torch.Tensor:
    ones = torch.ones_like(alpha[..., :1])
    return torch.cat([ones, torch.cumprod(1.0 - alpha[..., :-1], dim=-1)], dim=-1)


def composite(alpha, mask, color, depth, normal):
    """Front-to-back blending along the last hit axis; returns the weights too."""
    a = torch.where(mask, alpha, torch.zeros_like(alpha))
    w = _exclusive_transmittance(a) * a
    return {
        "color": (w.unsqueeze(-1) * color).sum(-2),
        "depth": (w * depth).sum(-1),
        "normal": (w.unsqueeze(-1) * normal).sum(-2),
        # equal to w.sum(-1), but exactly monotone in the hit list
        "opacity": 1.0 - torch.prod(1.0 - a, -1),
        "weights": w,
    }


def composite_pixel(hits: list[dict]) -> dict:
    """Composite one pixel's hits, each a dict with t, alpha, color, normal."""
    if not hits:
        return {"color": np.zeros(3), "depth": 0.0, "normal": np.zeros(3), "opacity": 0.0}
    t = np.array([h["t"] for h in hits], dtype=np.float64)
    if np.any(np.diff(t) < 0):
        raise ValueError("hits must be sorted by ascending t")
    alpha = torch.tensor([[h["alpha"] for h in hits]], dtype=DTYPE)
    if bool(((alpha < 0) | (alpha > 1)).any()):
        raise ValueError("alpha must lie in [0, 1]")
    mask = plan_mask(alpha, torch.ones_like(alpha, dtype=torch.bool))
    out = composite(
        alpha,
        mask,
        torch.tensor(np.array([[h["color"] for h in hits]], dtype=float), dtype=DTYPE),
        torch.tensor(np.asarray([t], dtype=float), dtype=DTYPE),
        torch.tensor(np.array([[h.get("normal", (0.0, 0.0, 0.0)) for h in hits]], dtype=float), dtype=DTYPE),
    )
    return {
        "color": out["color"][0].numpy(),
        "depth": float(out["depth"][0]),
        "normal": out["normal"][0].numpy(),
        "opacity": float(out["opacity"][0]),
    }


@dataclass
class RenderBuffers:
    color: torch.Tensor  # (H, W, 3)
    depth: torch.Tensor  # (H, W) blended camera z
    normal: torch.Tensor  # (H, W, 3) world frame, camera-facing
    opacity: torch.Tensor  # (H, W)
    splat_weights: torch.Tensor | None = None  # (H*W, K)
    splat_normals: torch.Tensor | None = None  # (H*W, K, 3)
    plan: "HitPlan | None" = None

    def numpy(self) -> dict:
        return {k: getattr(self, k).detach().cpu().numpy() for k in ("color", "depth", "normal", "opacity")}


@dataclass
class HitPlan:
    """Per-chunk sorted surfel ids and the mask of hits that contribute."""

    chunk_size: int
    index: list
    mask: list


def _plane_terms(origin, dirs, p, n, tu, tv, scales):
    """t, u, v for rays (..., 3) against surfel planes broadcast to the same leading shape."""
    denom = dot(dirs, n)
    safe = torch.where(denom.abs() >= PARALLEL_EPS, denom, torch.ones_like(denom))
    t = dot(p - origin, n) / safe
    rel_o = origin - p
    u = (dot(rel_o, tu) + t * dot(dirs, tu)) / scales[..., 0]
    v = (dot(rel_o, tv) + t * dot(dirs, tv)) / scales[..., 1]
    return t, u, v, denom


def plan_hits(scene: Scene, camera: Camera, chunk_size: int = DEFAULT_CHUNK) -> HitPlan:
    dirs_all = camera.ray_dirs()
    origin = torch.as_tensor(camera.center, dtype=DTYPE)
    with torch.no_grad():
        normals = scene.normals()

    def plan_chunk(start):
        dirs = dirs_all[start:start + chunk_size]
        C = dirs.shape[0]
        if len(scene) == 0:
            return torch.zeros((C, 0), dtype=torch.long), torch.zeros((C, 0), dtype=torch.bool)
        with torch.no_grad():
            t, u, v, denom = _plane_terms(
                origin, dirs[:, None, :], scene.positions[None], normals[None], scene.tangent_u[None],
                scene.tangent_v[None], scene.scales[None],
            )
            r2 = u * u + v * v
            alpha = scene.opacity[None] * torch.exp(-0.5 * r2)
            valid = (denom.abs() >= PARALLEL_EPS) & (t > 0) & (r2 <= KERNEL_CUTOFF_SQ) & (alpha >= ALPHA_CUTOFF)
            key = torch.where(valid, t, torch.full_like(t, math.inf))
            key, order = torch.sort(key, dim=1, stable=True)
            K = int(valid.sum(1).max()) if C else 0
            order = order[:, :K]
            valid_sorted = torch.isfinite(key[:, :K])
            a_sorted = torch.gather(alpha, 1, order)
            return order, plan_mask(a_sorted, valid_sorted)

    chunks = pmap(plan_chunk, range(0, dirs_all.shape[0], chunk_size))
    return HitPlan(chunk_size, [c[0] for c in chunks], [c[1] for c in chunks])


def _surfel_lighting(scene: Scene, env: EnvironmentMap, visibility, ns: int):
    """Per-surfel sample frames and incident light (both independent of the view)."""
    a, b, n = sample_frame(scene.normals())
    dirs = fibonacci_dirs(ns, n)  # (N, ns, 3)
    if visibility is None:
        vis = torch.ones(dirs.shape[:2], dtype=DTYPE)
    else:
        vis = torch.as_tensor(visibility, dtype=DTYPE)
        if tuple(vis.shape) != tuple(dirs.shape[:2]):
            raise ValueError(f"visibility table shape {tuple(vis.shape)} does not match {tuple(dirs.shape[:2])}")
    light = incident_radiance(scene.indirect_sh.unsqueeze(1), dirs, env, vis)
    return (a, b, n), light


def shade_hits(scene: Scene, ids, wo, frames, light, ns: int, iso_sg: bool, diffuse_only: bool):
    """Diffuse SH plus quadrature specular for hits (surfel ``ids``, view ``wo``)."""
    c_d = eval_sh(scene.diffuse_sh[ids], wo).clamp_min(0.0)
    if diffuse_only:
        return c_d
    a, b, n = (f[ids] for f in frames)
    wo_local = torch.stack([dot(wo, a), dot(wo, b), dot(wo, n)], dim=-1)
    return c_d + specular_radiance(wo_local, scene.roughness[ids], scene.specular[ids], light[ids], ns, iso_sg)


def render(scene: Scene, camera: Camera, env: EnvironmentMap | None = None, visibility=None, *,
           ns: int = DEFAULT_NS, iso_sg: bool = False, diffuse_only: bool = False, plan: HitPlan | None = None,
           chunk_size: int = DEFAULT_CHUNK) -> RenderBuffers:
    """Render color, depth, normal and opacity buffers.

    ``visibility`` is the (N, ns) table from the ray tracer; None means
    every direction is unoccluded. Passing a ``plan`` reuses its hit set.
    """
    H, W = camera.height, camera.width
    if env is None:
        env = EnvironmentMap.zeros()
    if plan is None:
        plan = plan_hits(scene, camera, chunk_size)
    dirs_all = camera.ray_dirs()
    origin = torch.as_tensor(camera.center, dtype=DTYPE)
    R = torch.as_tensor(camera.rotation, dtype=DTYPE)
    dz_all = dirs_all @ R[2]

    frames, light = None, None
    if len(scene):
        normals = scene.normals()
        if not diffuse_only:
            frames, light = _surfel_lighting(scene, env, visibility, ns)

    def eval_chunk(c):
        start = c * plan.chunk_size
        dirs = dirs_all[start:start + plan.chunk_size]
        idx, mask = plan.index[c], plan.mask[c]
        C, K = idx.shape
        if K == 0:
            z = torch.zeros(C, dtype=DTYPE)
            return {"color": torch.zeros(C, 3, dtype=DTYPE), "depth": z, "normal": torch.zeros(C, 3, dtype=DTYPE),
                    "opacity": z, "weights": torch.zeros(C, 0, dtype=DTYPE),
                    "normals": torch.zeros(C, 0, 3, dtype=DTYPE)}
        d = dirs[:, None, :].expand(C, K, 3)
        n = normals[idx]
        t, u, v, _ = _plane_terms(origin, d, scene.positions[idx], n, scene.tangent_u[idx], scene.tangent_v[idx],
                                  scene.scales[idx])
        alpha = scene.opacity[idx] * torch.exp(-0.5 * (u * u + v * v))
        facing = torch.where((dot(n, d) > 0).unsqueeze(-1), -n, n)
        depth = t * dz_all[start:start + plan.chunk_size, None]

        color = torch.zeros(C, K, 3, dtype=DTYPE)
        if bool(mask.any()):
            sel = mask.nonzero(as_tuple=True)
            wo = -d[sel]
            shaded = shade_hits(scene, idx[sel], wo, frames, light, ns, iso_sg, diffuse_only)
            color = color.index_put(sel, shaded)
        out = composite(alpha, mask, color, depth, facing)
        out["normals"] = facing
        return out

    outs = pmap(eval_chunk, range(len(plan.index)))

    K_max = max(o["weights"].shape[1] for o in outs) if outs else 0

    def pad(x, K):
        if x.shape[1] == K:
            return x
        shape = list(x.shape)
        shape[1] = K - x.shape[1]
        return torch.cat([x, torch.zeros(shape, dtype=x.dtype)], dim=1)

    cat = lambda key: torch.cat([o[key] for o in outs], dim=0)  # noqa: E731
    return RenderBuffers(
        color=cat("color").reshape(H, W, 3),
        depth=cat("depth").reshape(H, W),
        normal=cat("normal").reshape(H, W, 3),
        opacity=cat("opacity").reshape(H, W),
        splat_weights=torch.cat([pad(o["weights"], K_max) for o in outs], dim=0),
        splat_normals=torch.cat([pad(o["normals"], K_max) for o in outs], dim=0),
        plan=plan,
    )


def backproject(depth: torch.Tensor, camera: Camera) -> torch.Tensor:
    """Camera-space points (H, W, 3) for a camera-z depth map."""
    px = torch.as_tensor(camera.pixel_grid(), dtype=DTYPE).reshape(camera.height, camera.width, 2)
    x = (px[..., 0] - camera.cx) / camera.fx
    y = (px[..., 1] - camera.cy) / camera.fy
    return torch.stack([x * depth, y * depth, depth], dim=-1)


def _axis_difference(p, ok, axis):
    """Central differences where both neighbors are usable, one-sided otherwise."""
    n = p.shape[axis]
    idx = torch.arange(n)
    nxt = torch.clamp(idx + 1, max=n - 1)
    prv = torch.clamp(idx - 1, min=0)
    p_next, p_prev = p.index_select(axis, nxt), p.index_select(axis, prv)
    ok_next = ok.index_select(axis, nxt) & (idx < n - 1).reshape([-1 if a == axis else 1 for a in range(2)])
    ok_prev = ok.index_select(axis, prv) & (idx > 0).reshape([-1 if a == axis else 1 for a in range(2)])
    central = p_next - p_prev
    forward = p_next - p
    backward = p - p_prev
    diff = torch.where(
        (ok_next & ok_prev).unsqueeze(-1), central, torch.where(ok_next.unsqueeze(-1), forward, backward)
    )
    return diff, ok_next | ok_prev


def depth_to_normal(depth, camera: Camera, opacity=None, world: bool = False, mask=None):
    """Normals from depth finite differences, oriented toward the camera.

    Returns ``(normals (H, W, 3), valid (H, W))``; normals are in camera
    space unless ``world``. Pixels with opacity below 0.5 (or outside an
    explicit boolean ``mask``) are invalid and are not used as difference
    neighbors.
    """
    depth = torch.as_tensor(depth, dtype=DTYPE)
    if tuple(depth.shape) != (camera.height, camera.width):
        raise ValueError("depth map does not match the camera size")
    if mask is not None:
        ok = torch.as_tensor(mask, dtype=torch.bool)
    elif opacity is not None:
        ok = torch.as_tensor(opacity).detach() >= 0.5
    else:
        ok = torch.ones_like(depth, dtype=torch.bool)
    p = backproject(depth, camera)
    dx, okx = _axis_difference(p, ok, 1)
    dy, oky = _axis_difference(p, ok, 0)
    c = torch.cross(dx, dy, dim=-1)
    norm = c.norm(dim=-1, keepdim=True)
    valid = ok & okx & oky & (norm[..., 0] > 0)
    nrm = c / norm.clamp_min(1e-300)
    nrm = torch.where((dot(nrm, p) > 0).unsqueeze(-1), -nrm, nrm)
    nrm = torch.where(valid.unsqueeze(-1), nrm, torch.zeros_like(nrm))
    if world:
        nrm = nrm @ torch.as_tensor(camera.rotation, dtype=DTYPE)
    return nrm, valid
