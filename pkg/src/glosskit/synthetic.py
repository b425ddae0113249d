"""Self-generated scenes, lighting and datasets for tests, demos and desk-scale fits."""

from __future__ import annotations

import math

import numpy as np
import torch

from .brdf import fibonacci_sphere
from .lighting import ENV_COLS, ENV_ROWS, EnvironmentMap
from .optimize import View
from .rasterize import Camera, render
from .raytrace import DEFAULT_ALPHA_MIN, precompute_visibility
from .sh import Y00
from .surfel import DTYPE, N_DIFFUSE, N_INDIRECT, Scene, Surfel, frame_from_normal


def _diffuse_dc(rgb) -> np.ndarray:
    sh = np.zeros((N_DIFFUSE, 3))
    sh[0] = np.asarray(rgb, dtype=np.float64) / Y00
    return sh


def _indirect_dc(rgb) -> np.ndarray:
    sh = np.zeros((N_INDIRECT, 3))
    sh[0] = np.asarray(rgb, dtype=np.float64) / Y00
    return sh


def glossy_sphere(count: int = 200, radius: float = 1.0, scale: float = 0.14, opacity: float = 0.95,
                  roughness: float = 0.1, f0=0.5, albedo=(0.30, 0.18, 0.10), indirect=0.02) -> Scene:
    """Surfels tangent to a sphere at Fibonacci points, all with one glossy material."""
    points = fibonacci_sphere(count).numpy()
    surfels = []
    for k, n in enumerate(points):
        tu, tv = frame_from_normal(n, angle=0.7 * k)
        surfels.append(Surfel(
            position=radius * n, tangent_u=tu, tangent_v=tv, scale_u=scale, scale_v=scale,
            opacity=opacity, roughness=roughness, specular_reflectance=np.full(3, f0) if np.isscalar(f0) else f0,
            diffuse_sh=_diffuse_dc(albedo), indirect_sh=_indirect_dc(np.full(3, indirect)),
        ))
    return Scene.from_surfels(surfels)


def one_surfel(roughness: float = 0.3, f0: float = 0.5, opacity: float = 0.9) -> Scene:
    """A single fronto-parallel surfel at the origin facing +z."""
    s = Surfel(position=np.zeros(3), tangent_u=[1.0, 0.0, 0.0], tangent_v=[0.0, 1.0, 0.0], scale_u=0.6, scale_v=0.4,
               opacity=opacity, roughness=roughness, specular_reflectance=np.full(3, f0),
               diffuse_sh=_diffuse_dc((0.5, 0.3, 0.2)), indirect_sh=_indirect_dc((0.05, 0.05, 0.05)))
    return Scene.from_surfels([s])


def random_scene(count: int, seed: int = 0, extent: float = 1.0, scale=(0.05, 0.2), opacity=(0.3, 1.0),
                 sh_noise: float = 0.1) -> Scene:
    """Randomly posed and shaded surfels inside a cube of half-width ``extent``."""
    rng = np.random.default_rng(seed)
    surfels = []
    for _ in range(count):
        n = rng.normal(size=3)
        tu, tv = frame_from_normal(n, angle=rng.uniform(0, 2 * math.pi))
        diffuse = _diffuse_dc(rng.uniform(0.1, 0.8, 3))
        diffuse[1:] = sh_noise * rng.normal(size=(N_DIFFUSE - 1, 3))
        indirect = _indirect_dc(rng.uniform(0.0, 0.1, 3))
        indirect[1:] = 0.2 * sh_noise * rng.normal(size=(N_INDIRECT - 1, 3))
        surfels.append(Surfel(
            position=rng.uniform(-extent, extent, 3), tangent_u=tu, tangent_v=tv,
            scale_u=rng.uniform(*scale), scale_v=rng.uniform(*scale), opacity=rng.uniform(*opacity),
            roughness=rng.uniform(0.1, 0.9), specular_reflectance=rng.uniform(0.02, 0.9, 3),
            diffuse_sh=diffuse, indirect_sh=indirect,
        ))
    return Scene.from_surfels(surfels)


def studio_env(sky: float = 0.6, ground: float = 0.1, sun: float = 4.0, sun_dir=(0.5, 0.3, 0.8),
               sun_width: float = 0.35, sky_tint=(1.0, 1.0, 1.0), sun_tint=(1.0, 1.0, 1.0)) -> EnvironmentMap:
    """Sky/ground gradient with one bright lobe. The default tints give a gray (neutral) map."""
    theta = (np.arange(ENV_ROWS) + 0.5) * math.pi / ENV_ROWS
    phi = (np.arange(ENV_COLS) + 0.5) * 2 * math.pi / ENV_COLS
    T, P = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], -1)
    up = 0.5 * (dirs[..., 2] + 1.0)
    base = ground + (sky - ground) * up
    s = np.asarray(sun_dir, dtype=np.float64)
    s /= np.linalg.norm(s)
    lobe = sun * np.exp((dirs @ s - 1.0) / (sun_width**2))
    value = base[..., None] * np.asarray(sky_tint) + lobe[..., None] * np.asarray(sun_tint)
    return EnvironmentMap(value)


def tinted_env() -> EnvironmentMap:
    """Studio map with colored sky and sun, so no texel is exactly gray."""
    return studio_env(sky_tint=(0.8, 0.9, 1.1), sun_tint=(1.1, 1.0, 0.85))


def orbit_cameras(count: int, distance: float = 4.0, elevations=(20.0, -15.0), width: int = 32, height: int = 32,
                  fov_deg: float = 40.0, target=(0.0, 0.0, 0.0)) -> list[Camera]:
    """Cameras spread in azimuth around ``target``, alternating between the given elevations."""
    cams = []
    for k in range(count):
        az = 2 * math.pi * k / count
        el = math.radians(elevations[k % len(elevations)])
        eye = distance * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
        cams.append(Camera.look_at(eye + np.asarray(target), target, fov_x=math.radians(fov_deg), width=width,
                                   height=height))
    return cams


def make_dataset(scene: Scene, env: EnvironmentMap, cameras: list[Camera], ns: int = 64,
                 alpha_min: float = DEFAULT_ALPHA_MIN, iso_sg: bool = False, visibility=None) -> list[View]:
    """Render ground-truth views (color plus opacity mask) of ``scene``."""
    if visibility is None:
        visibility = precompute_visibility(scene, alpha_min, ns)
    views = []
    with torch.no_grad():
        for cam in cameras:
            b = render(scene, cam, env, visibility, ns=ns, iso_sg=iso_sg)
            views.append(View(b.color.clone(), cam, b.opacity.clone()))
    return views


def perturb_appearance(scene: Scene, env: EnvironmentMap, seed: int = 0, roughness_shift: float = 0.15,
                       f0_noise: float = 0.15, sh_noise: float = 0.15,
                       env_noise: float = 0.3) -> tuple[Scene, EnvironmentMap]:
    """Noisy copies of the material and lighting parameters; geometry is untouched."""
    rng = np.random.default_rng(seed)
    g = lambda *shape: torch.as_tensor(rng.normal(size=shape), dtype=DTYPE)  # noqa: E731
    N = len(scene)
    r = scene.roughness + roughness_shift * (1.0 + 0.3 * g(N))
    f0 = scene.specular + f0_noise * g(N, 3)
    diffuse = scene.diffuse_sh.clone()
    diffuse[:, 0] = diffuse[:, 0] * (1.0 + sh_noise * g(N, 3))
    diffuse[:, 1:4] = diffuse[:, 1:4] + 0.1 * sh_noise * g(N, 3, 3)
    indirect = scene.indirect_sh.clone()
    indirect[:, 0] = indirect[:, 0] + 0.1 * sh_noise * g(N, 3).abs()
    out = scene.replace(roughness=r.clamp(0.02, 1.0), specular=f0.clamp(0.0, 1.0), diffuse_sh=diffuse,
                        indirect_sh=indirect)
    radiance = env.radiance * torch.exp(env_noise * g(ENV_ROWS, ENV_COLS, 1))
    return out.detach(), EnvironmentMap(radiance.detach())


def gradcheck_scene(count: int = 50, seed: int = 3) -> Scene:
    """Grid of specular surfels in front of :func:`gradcheck_camera`, tilted up to about 17 degrees."""
    rng = np.random.default_rng(seed)
    surfels = []
    side = int(math.ceil(math.sqrt(count)))
    for k in range(count):
        i, j = divmod(k, side)
        pos = np.array([(j - (side - 1) / 2) * 0.35, (i - (side - 1) / 2) * 0.35, rng.uniform(-0.1, 0.1)])
        n = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), -1.0])
        tu, tv = frame_from_normal(n, angle=rng.uniform(0, 2 * math.pi))
        diffuse = _diffuse_dc(rng.uniform(0.2, 0.7, 3))
        diffuse[1:4] = 0.05 * rng.normal(size=(3, 3))
        surfels.append(Surfel(
            position=pos, tangent_u=tu, tangent_v=tv, scale_u=rng.uniform(0.08, 0.14),
            scale_v=rng.uniform(0.08, 0.14), opacity=rng.uniform(0.5, 0.9), roughness=rng.uniform(0.2, 0.6),
            specular_reflectance=rng.uniform(0.1, 0.6, 3), diffuse_sh=diffuse,
            indirect_sh=_indirect_dc(rng.uniform(0.01, 0.05, 3)),
        ))
    return Scene.from_surfels(surfels)


def bench_rays(scene: Scene, count: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Rays from a sphere around the scene aimed at random points inside its bounding box."""
    rng = np.random.default_rng(seed)
    pos = scene.positions.detach().numpy()
    lo, hi = (pos.min(0), pos.max(0)) if len(pos) else (-np.ones(3), np.ones(3))
    center = 0.5 * (lo + hi)
    radius = 0.5 * np.linalg.norm(hi - lo) + 1.0
    start = rng.normal(size=(count, 3))
    start = center + radius * start / np.linalg.norm(start, axis=1, keepdims=True)
    target = rng.uniform(lo, hi, size=(count, 3))
    d = target - start
    return start, d / np.linalg.norm(d, axis=1, keepdims=True)


def grazing_scene(side: int = 8, spacing: float = 0.5, scale: float = 0.1) -> Scene:
    """Axis-aligned surfels on a grid in the z = 0 plane, all facing +z."""
    surfels = []
    for i in range(side):
        for j in range(side):
            surfels.append(Surfel(
                position=[(i - (side - 1) / 2) * spacing, (j - (side - 1) / 2) * spacing, 0.0],
                tangent_u=[1.0, 0.0, 0.0], tangent_v=[0.0, 1.0, 0.0], scale_u=scale, scale_v=scale,
                opacity=1.0, diffuse_sh=_diffuse_dc((0.5, 0.5, 0.5)),
            ))
    return Scene.from_surfels(surfels)


def grazing_rays(scene: Scene, count: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Rays travelling inside the surfel plane with random headings and offsets."""
    rng = np.random.default_rng(seed)
    pos = scene.positions.detach().numpy()
    half = np.abs(pos[:, :2]).max() + 1.0
    phi = rng.uniform(0, 2 * math.pi, count)
    d = np.stack([np.cos(phi), np.sin(phi), np.zeros(count)], -1)
    across = np.stack([-np.sin(phi), np.cos(phi), np.zeros(count)], -1)
    offset = rng.uniform(-half, half, count)
    origins = -2 * half * d + offset[:, None] * across
    return origins, d


def init_sphere(count: int = 200, radius: float = 1.0, center=(0.0, 0.0, 0.0), scale: float | None = None) -> Scene:
    """Default initialization: opacity 0.5, roughness 0.5, F0 0.04 and gray DC diffuse on a sphere."""
    if scale is None:
        scale = radius * math.sqrt(4.0 / count)
    points = fibonacci_sphere(count).numpy()
    surfels = []
    for k, n in enumerate(points):
        tu, tv = frame_from_normal(n, angle=0.7 * k)
        surfels.append(Surfel(
            position=np.asarray(center, dtype=np.float64) + radius * n, tangent_u=tu, tangent_v=tv,
            scale_u=scale, scale_v=scale, opacity=0.5, roughness=0.5, specular_reflectance=np.full(3, 0.04),
            diffuse_sh=_diffuse_dc((0.5, 0.5, 0.5)),
        ))
    return Scene.from_surfels(surfels)


def gradcheck_camera(size: int = 64) -> Camera:
    return Camera.look_at((0.3, 0.2, -3.0), (0.0, 0.0, 0.0), up=(0.0, -1.0, 0.0), fov_x=math.radians(50),
                          width=size, height=size)


def one_surfel_camera(size: int = 32) -> Camera:
    """Oblique view of :func:`one_surfel` placing the mirror direction of the studio sun near the center."""
    return Camera.look_at((-1.0, -0.6, 1.6), (0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0), fov_x=math.radians(60),
                          width=size, height=size)
