"""Glossy 2D Gaussian surfel rendering and inverse rendering on the CPU."""

from .brdf import eval_asg, eval_sg, ndf_iso, shade, specular_brdf, warp_asg
from .lighting import EnvironmentMap, env_sample, incident_radiance, light_reg
from .optimize import TrainConfig, grad_check, train
from .rasterize import Camera, RenderBuffers, render
from .raytrace import build_bvh, precompute_visibility, proxy_hull, transmittance
from .surfel import Scene, Surfel

__version__ = "0.1.0"

__all__ = [
    "Camera", "EnvironmentMap", "RenderBuffers", "Scene", "Surfel", "TrainConfig", "build_bvh", "env_sample",
    "eval_asg", "eval_sg", "grad_check", "incident_radiance", "light_reg", "ndf_iso", "precompute_visibility",
    "proxy_hull", "render", "shade", "specular_brdf", "train", "transmittance", "warp_asg",
]
