"""Flat Gaussian surfels: the single primitive, its tangent frame and kernel.

A :class:`Surfel` is one primitive with plain numpy fields, convenient for
tests and file I/O. A :class:`Scene` holds N surfels as stacked float64
tensors and is what the renderer and optimizer consume.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np
import torch

DTYPE = torch.float64

DIFFUSE_SH_DEGREE = 3
INDIRECT_SH_DEGREE = 2
N_DIFFUSE = (DIFFUSE_SH_DEGREE + 1) ** 2
N_INDIRECT = (INDIRECT_SH_DEGREE + 1) ** 2

_ORTHO_TOL = 1e-6


@dataclass
class Surfel:
    position: np.ndarray
    tangent_u: np.ndarray
    tangent_v: np.ndarray
    scale_u: float
    scale_v: float
    opacity: float = 0.5
    roughness: float = 0.5
    specular_reflectance: np.ndarray = field(default_factory=lambda: np.full(3, 0.04))
    diffuse_sh: np.ndarray = field(default_factory=lambda: np.zeros((N_DIFFUSE, 3)))
    indirect_sh: np.ndarray = field(default_factory=lambda: np.zeros((N_INDIRECT, 3)))

    def __post_init__(self):
        for name in ("position", "tangent_u", "tangent_v", "specular_reflectance"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(3))
        self.diffuse_sh = np.asarray(self.diffuse_sh, dtype=np.float64).reshape(N_DIFFUSE, 3)
        self.indirect_sh = np.asarray(self.indirect_sh, dtype=np.float64).reshape(N_INDIRECT, 3)
        self.scale_u = float(self.scale_u)
        self.scale_v = float(self.scale_v)
        self.opacity = float(self.opacity)
        self.roughness = float(self.roughness)
        self.validate()

    def validate(self):
        tu, tv = self.tangent_u, self.tangent_v
        if abs(np.linalg.norm(tu) - 1) > _ORTHO_TOL or abs(np.linalg.norm(tv) - 1) > _ORTHO_TOL:
            raise ValueError("surfel tangents must be unit length")
        if abs(float(tu @ tv)) > _ORTHO_TOL:
            raise ValueError("surfel tangents must be orthogonal")
        if not (self.scale_u > 0 and self.scale_v > 0):
            raise ValueError("surfel scales must be positive")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"opacity {self.opacity} outside [0, 1]")
        if not 0.0 < self.roughness <= 1.0:
            raise ValueError(f"roughness {self.roughness} outside (0, 1]")
        if np.any(self.specular_reflectance < 0) or np.any(self.specular_reflectance > 1):
            raise ValueError("specular reflectance channels must lie in [0, 1]")


def local_to_world(surfel: Surfel) -> np.ndarray:
    """Homogeneous 4x4 map taking (u, v, 1, 1) to the world point P(u, v)."""
    H = np.zeros((4, 4))
    H[:3, 0] = surfel.scale_u * surfel.tangent_u
    H[:3, 1] = surfel.scale_v * surfel.tangent_v
    H[:3, 3] = surfel.position
    H[3, 3] = 1.0
    return H


def world_to_local(surfel: Surfel, point) -> np.ndarray:
    """Inverse plane parameterization; exact for orthonormal tangents."""
    d = np.asarray(point, dtype=np.float64) - surfel.position
    return np.array([d @ surfel.tangent_u / surfel.scale_u, d @ surfel.tangent_v / surfel.scale_v])


def normal_of(surfel: Surfel) -> np.ndarray:
    n = np.cross(surfel.tangent_u, surfel.tangent_v)
    return n / np.linalg.norm(n)


def eval_kernel(u, v):
    """Standard 2D Gaussian exp(-(u^2 + v^2) / 2). Works on floats, arrays and tensors."""
    if isinstance(u, torch.Tensor) or isinstance(v, torch.Tensor):
        return torch.exp(-0.5 * (u * u + v * v))
    return np.exp(-0.5 * (np.square(u) + np.square(v)))


def orthonormalize(tu: torch.Tensor, tv: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Gram-Schmidt of tv against tu, both renormalized. Differentiable."""
    tu = tu / tu.norm(dim=-1, keepdim=True)
    tv = tv - (tv * tu).sum(-1, keepdim=True) * tu
    tv = tv / tv.norm(dim=-1, keepdim=True)
    return tu, tv


def frame_from_normal(n: np.ndarray, angle: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal tangents (tu, tv) with tu x tv = n, optionally twisted about n."""
    n = np.asarray(n, dtype=np.float64)
    n = n / np.linalg.norm(n)
    axis = np.zeros(3)
    axis[np.argmin(np.abs(n))] = 1.0
    a = axis - (axis @ n) * n
    a /= np.linalg.norm(a)
    b = np.cross(n, a)
    tu = math.cos(angle) * a + math.sin(angle) * b
    tv = np.cross(n, tu)
    return tu, tv


@dataclass
class Scene:
    """N surfels as stacked tensors (constrained values, not optimizer logits)."""

    positions: torch.Tensor  # (N, 3)
    tangent_u: torch.Tensor  # (N, 3)
    tangent_v: torch.Tensor  # (N, 3)
    scales: torch.Tensor  # (N, 2)
    opacity: torch.Tensor  # (N,)
    roughness: torch.Tensor  # (N,)
    specular: torch.Tensor  # (N, 3)
    diffuse_sh: torch.Tensor  # (N, 16, 3)
    indirect_sh: torch.Tensor  # (N, 9, 3)

    def __len__(self):
        return self.positions.shape[0]

    @classmethod
    def empty(cls) -> "Scene":
        z = lambda *s: torch.zeros((0, *s), dtype=DTYPE)  # noqa: E731
        return cls(z(3), z(3), z(3), z(2), z(), z(), z(3), z(N_DIFFUSE, 3), z(N_INDIRECT, 3))

    @classmethod
    def from_surfels(cls, surfels: list[Surfel]) -> "Scene":
        if not surfels:
            return cls.empty()
        t = lambda xs: torch.tensor(np.stack(xs), dtype=DTYPE)  # noqa: E731
        return cls(
            positions=t([s.position for s in surfels]),
            tangent_u=t([s.tangent_u for s in surfels]),
            tangent_v=t([s.tangent_v for s in surfels]),
            scales=t([[s.scale_u, s.scale_v] for s in surfels]),
            opacity=t([s.opacity for s in surfels]),
            roughness=t([s.roughness for s in surfels]),
            specular=t([s.specular_reflectance for s in surfels]),
            diffuse_sh=t([s.diffuse_sh for s in surfels]),
            indirect_sh=t([s.indirect_sh for s in surfels]),
        )

    def surfel(self, i: int) -> Surfel:
        g = lambda x: x[i].detach().cpu().numpy()  # noqa: E731
        return Surfel(
            position=g(self.positions),
            tangent_u=g(self.tangent_u),
            tangent_v=g(self.tangent_v),
            scale_u=float(self.scales[i, 0]),
            scale_v=float(self.scales[i, 1]),
            opacity=float(self.opacity[i]),
            roughness=float(self.roughness[i]),
            specular_reflectance=g(self.specular),
            diffuse_sh=g(self.diffuse_sh),
            indirect_sh=g(self.indirect_sh),
        )

    def surfels(self) -> list[Surfel]:
        return [self.surfel(i) for i in range(len(self))]

    def normals(self) -> torch.Tensor:
        n = torch.cross(self.tangent_u, self.tangent_v, dim=-1)
        return n / n.norm(dim=-1, keepdim=True)

    def detach(self) -> "Scene":
        return Scene(**{f.name: getattr(self, f.name).detach().clone() for f in fields(self)})

    def subset(self, idx) -> "Scene":
        return Scene(**{f.name: getattr(self, f.name)[idx] for f in fields(self)})

    def replace(self, **changes) -> "Scene":
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return Scene(**values)
