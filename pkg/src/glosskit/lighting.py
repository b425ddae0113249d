"""Distant environment lighting, per-surfel indirect light and the neutral-light prior."""

from __future__ import annotations

import math

import numpy as np
import torch

from .sh import eval_sh
from .surfel import DTYPE

ENV_ROWS = 16
ENV_COLS = 32


class EnvironmentMap:
    """16x32 lat-long grid of RGB radiance.

    Row 0 sits next to the +z pole; columns run with azimuth atan2(y, x)
    starting at 0. Texel (i, j) is centered at polar angle (i + 0.5) * pi / 16
    and azimuth (j + 0.5) * 2 * pi / 32.
    """

    def __init__(self, radiance):
        radiance = torch.as_tensor(radiance, dtype=DTYPE)
        if tuple(radiance.shape) != (ENV_ROWS, ENV_COLS, 3):
            raise ValueError(f"environment map must be {ENV_ROWS}x{ENV_COLS}x3, got {tuple(radiance.shape)}")
        if bool((radiance.detach() < 0).any()):
            raise ValueError("environment radiance must be nonnegative")
        self.radiance = radiance

    @classmethod
    def constant(cls, value) -> "EnvironmentMap":
        value = torch.as_tensor(value, dtype=DTYPE).expand(3)
        return cls(value.expand(ENV_ROWS, ENV_COLS, 3).clone())

    @classmethod
    def zeros(cls) -> "EnvironmentMap":
        return cls.constant(0.0)

    def texel_direction(self, row: int, col: int) -> np.ndarray:
        theta = (row + 0.5) * math.pi / ENV_ROWS
        phi = (col + 0.5) * 2 * math.pi / ENV_COLS
        return np.array([math.sin(theta) * math.cos(phi), math.sin(theta) * math.sin(phi), math.cos(theta)])

    def numpy(self) -> np.ndarray:
        return self.radiance.detach().cpu().numpy()

    def scaled(self, factor: float) -> "EnvironmentMap":
        return EnvironmentMap(self.radiance * factor)


def env_sample(env: EnvironmentMap, dirs) -> torch.Tensor:
    """Bilinear lookup with azimuthal wrap; (..., 3) directions to (..., 3) RGB."""
    dirs = torch.as_tensor(dirs, dtype=DTYPE)
    grid = env.radiance
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    rho2 = x * x + y * y
    at_pole = rho2 <= 0.0
    # keep atan2/acos away from their singular points so masked lanes stay finite
    xs = torch.where(at_pole, torch.ones_like(x), x)
    ys = torch.where(at_pole, torch.zeros_like(y), y)
    theta = torch.acos(z.clamp(-1.0 + 1e-15, 1.0 - 1e-15))
    phi = torch.atan2(ys, xs) % (2 * math.pi)

    r = (theta * (ENV_ROWS / math.pi) - 0.5).clamp(0.0, ENV_ROWS - 1.0)
    c = phi * (ENV_COLS / (2 * math.pi)) - 0.5
    r0 = r.detach().floor().clamp(max=ENV_ROWS - 2)
    c0 = c.detach().floor()
    fr = (r - r0).unsqueeze(-1)
    fc = (c - c0).unsqueeze(-1)
    r0 = r0.long()
    r1 = r0 + 1
    c0l = c0.long() % ENV_COLS
    c1l = (c0l + 1) % ENV_COLS
    v00, v01 = grid[r0, c0l], grid[r0, c1l]
    v10, v11 = grid[r1, c0l], grid[r1, c1l]
    value = (1 - fr) * ((1 - fc) * v00 + fc * v01) + fr * ((1 - fc) * v10 + fc * v11)

    if bool(at_pole.any()):
        north = grid[0].mean(0)
        south = grid[-1].mean(0)
        pole_value = torch.where((z > 0).unsqueeze(-1), north, south)
        value = torch.where(at_pole.unsqueeze(-1), pole_value, value)
    return value


def incident_radiance(indirect_sh, dirs, env: EnvironmentMap, vis) -> torch.Tensor:
    """Direct light attenuated by visibility plus clamped SH indirect light.

    ``indirect_sh`` is (..., 9, 3); ``dirs`` (..., 3); ``vis`` broadcasts
    against the direction batch.
    """
    dirs = torch.as_tensor(dirs, dtype=DTYPE)
    vis = torch.as_tensor(vis, dtype=DTYPE)
    direct = vis.unsqueeze(-1) * env_sample(env, dirs)
    indirect = eval_sh(indirect_sh, dirs).clamp_min(0.0)
    return direct + indirect


def light_reg(env: EnvironmentMap) -> torch.Tensor:
    """Mean over texels of the summed absolute deviation of each channel from gray."""
    L = env.radiance
    # mean written relative to the first channel so a gray texel gives exactly zero
    base = L[..., :1]
    mean = base + (L - base).sum(-1, keepdim=True) / 3.0
    return (L - mean).abs().sum(-1).mean()
