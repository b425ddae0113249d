"""Appearance math: SG/ASG lobes, the warped microfacet NDF, the specular
BRDF, Fibonacci hemisphere quadrature and per-hit shading.

Everything operates on float64 torch tensors with broadcasting over leading
dimensions so the same code serves single evaluations, tests and the
batched renderer (where autograd supplies the gradients).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .lighting import EnvironmentMap, incident_radiance
from .sh import eval_sh
from .surfel import DTYPE, Surfel

# Specular cosines are clamped here to keep 1 / (4 cos cos) finite.
COS_EPS = 1e-4
GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))
DEFAULT_NS = 64


def _t(x) -> torch.Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def dot(a, b) -> torch.Tensor:
    return (a * b).sum(-1)


def normalize(v, eps: float = 1e-12) -> torch.Tensor:
    return v / v.norm(dim=-1, keepdim=True).clamp_min(eps)


def reflect(wo, n) -> torch.Tensor:
    return 2.0 * dot(wo, n).unsqueeze(-1) * n - wo


def orthogonal_axis(n: torch.Tensor) -> torch.Tensor:
    """Unit vector orthogonal to ``n`` built from its smallest-magnitude world axis."""
    n = _t(n)
    axis = torch.nn.functional.one_hot(n.detach().abs().argmin(-1), 3).to(DTYPE)
    a = axis - dot(axis, n).unsqueeze(-1) * n
    return normalize(a)


@dataclass
class SgParams:
    lobe_axis: torch.Tensor
    sharpness: torch.Tensor
    amplitude: torch.Tensor


@dataclass
class AsgParams:
    frame_x: torch.Tensor
    frame_y: torch.Tensor
    frame_z: torch.Tensor
    sharp_x: torch.Tensor
    sharp_y: torch.Tensor
    amplitude: torch.Tensor


def eval_sg(direction, params: SgParams) -> torch.Tensor:
    """mu * exp(lambda * (dir . axis - 1)).

    A scalar amplitude scales the lobe; a non-scalar amplitude is read as
    per-channel and adds a trailing channel axis to the result.
    """
    e = torch.exp(_t(params.sharpness) * (dot(_t(direction), _t(params.lobe_axis)) - 1.0))
    amplitude = _t(params.amplitude)
    if amplitude.ndim == 0:
        return e * amplitude
    return e.unsqueeze(-1) * amplitude


def eval_asg(direction, params: AsgParams) -> torch.Tensor:
    nu = _t(direction)
    smooth = dot(nu, _t(params.frame_z)).clamp_min(0.0)
    px = dot(nu, _t(params.frame_x))
    py = dot(nu, _t(params.frame_y))
    return _t(params.amplitude) * smooth * torch.exp(-_t(params.sharp_x) * px * px - _t(params.sharp_y) * py * py)


def ndf_iso(half, normal, roughness) -> torch.Tensor:
    """Isotropic SG approximation of the microfacet NDF."""
    r = _t(roughness)
    if bool((r.detach() <= 0).any()):
        raise ValueError("roughness must be positive")
    r2 = r * r
    return eval_sg(half, SgParams(_t(normal), 2.0 / r2, 1.0)) / (math.pi * r2)


def _warp_frame(normal, wo, roughness) -> AsgParams:
    n = _t(normal)
    wo = _t(wo)
    r2 = _t(roughness) ** 2
    z = reflect(wo, n)
    x = torch.cross(n.expand_as(z), z, dim=-1)
    xn = x.norm(dim=-1, keepdim=True)
    degenerate = xn < 1e-9
    fallback = orthogonal_axis(n.expand_as(z))
    x = torch.where(degenerate, fallback, x / xn.clamp_min(1e-300))
    y = torch.cross(z, x, dim=-1)
    sharp = 2.0 / (8.0 * r2)
    return AsgParams(x, y, z, sharp, sharp, 1.0 / (math.pi * r2))


def warp_asg(normal, wo, roughness) -> AsgParams:
    """Warp the SG NDF into an ASG over incident directions.

    ``sharp_x`` is returned without the per-sample 1 / (wi . n)^2 stretch;
    :func:`eval_warped_ndf` applies it for each incident direction.
    """
    if bool((dot(_t(wo), _t(normal)) <= 0).any()):
        raise ValueError("view direction is back-facing")
    return _warp_frame(normal, wo, roughness)


def eval_warped_ndf(wi, asg: AsgParams, normal) -> torch.Tensor:
    cos_i = dot(_t(wi), _t(normal)).clamp_min(COS_EPS)
    stretched = AsgParams(asg.frame_x, asg.frame_y, asg.frame_z, asg.sharp_x / (cos_i * cos_i), asg.sharp_y, asg.amplitude)
    return eval_asg(wi, stretched)


def fresnel_schlick(f0, cos_oh) -> torch.Tensor:
    return f0 + (1.0 - f0) * (1.0 - cos_oh.clamp(0.0, 1.0)).unsqueeze(-1) ** 5


def smith_ggx_correlated(cos_i, cos_o, roughness) -> torch.Tensor:
    """Height-correlated Smith masking-shadowing G with alpha = roughness^2."""
    a2 = _t(roughness) ** 4
    lam_i = cos_o * torch.sqrt(cos_i * cos_i * (1.0 - a2) + a2)
    lam_o = cos_i * torch.sqrt(cos_o * cos_o * (1.0 - a2) + a2)
    return 2.0 * cos_i * cos_o / (lam_i + lam_o)


def specular_brdf(wo, wi, normal, roughness, f0, iso_sg: bool = False) -> torch.Tensor:
    """D F G / (4 (n.wi)(n.wo)), RGB. Zero when either cosine is non-positive."""
    wo, wi, n, f0 = _t(wo), _t(wi), _t(normal), _t(f0)
    r = _t(roughness)
    raw_o = dot(n, wo)
    raw_i = dot(n, wi)
    cos_o = raw_o.clamp_min(COS_EPS)
    cos_i = raw_i.clamp_min(COS_EPS)
    h = normalize(wi + wo)
    if iso_sg:
        D = ndf_iso(h, n, r)
    else:
        D = eval_warped_ndf(wi, _warp_frame(n, wo, r), n)
    F = fresnel_schlick(f0, dot(wo, h))
    G = smith_ggx_correlated(cos_i, cos_o, r)
    f = (D * G / (4.0 * cos_i * cos_o)).unsqueeze(-1) * F
    front = ((raw_o > 0) & (raw_i > 0)).unsqueeze(-1)
    return torch.where(front, f, torch.zeros_like(f))


def _fibonacci_local(count: int) -> np.ndarray:
    k = np.arange(count, dtype=np.float64)
    z = 1.0 - (k + 0.5) / count
    rho = np.sqrt(1.0 - z * z)
    phi = k * GOLDEN_ANGLE
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


def fibonacci_sphere(count: int) -> torch.Tensor:
    """Near-uniform full-sphere directions; each carries weight 4 pi / count."""
    if count < 1:
        raise ValueError("count must be positive")
    k = np.arange(count, dtype=np.float64)
    z = 1.0 - (2.0 * k + 1.0) / count
    rho = np.sqrt(1.0 - z * z)
    phi = k * GOLDEN_ANGLE
    return _t(np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1))


def fibonacci_dirs(count: int, normal) -> torch.Tensor:
    """``count`` hemisphere directions around ``normal`` (..., 3) -> (..., count, 3).

    The spiral is laid out with uniform spacing in cos(theta) about +z and
    rotated onto ``normal``; the uniform weight 2 pi / count integrates
    constants exactly.
    """
    if count < 1:
        raise ValueError("count must be positive")
    a, b, n = sample_frame(normal)
    local = fibonacci_local(count)
    return (
        local[:, 0:1] * a.unsqueeze(-2)
        + local[:, 1:2] * b.unsqueeze(-2)
        + local[:, 2:3] * n.unsqueeze(-2)
    )


def hemisphere_weight(count: int) -> float:
    return 2.0 * math.pi / count


def fibonacci_local(count: int) -> torch.Tensor:
    """Sample directions in the (a, b, n) frame used by :func:`fibonacci_dirs`."""
    return _t(_fibonacci_local(count))


def sample_frame(normal) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    n = normalize(_t(normal))
    a = orthogonal_axis(n)
    return a, torch.cross(n, a, dim=-1), n


def specular_radiance(wo_local, roughness, f0, light, count: int, iso_sg: bool = False) -> torch.Tensor:
    """Quadrature of f_s * L_i * cos over the Fibonacci samples, in the sample frame.

    ``wo_local`` (M, 3) is the view direction expressed in each surfel's
    (a, b, n) frame, so all cosines against the ``count`` fixed local sample
    directions reduce to one small matmul. ``light`` is (M, count, 3).
    Numerically this matches :func:`specular_brdf` evaluated on the world
    directions of :func:`fibonacci_dirs`.
    """
    local = fibonacci_local(count)  # (S, 3)
    cos_i_raw = local[:, 2]
    cos_i = cos_i_raw.clamp_min(COS_EPS)
    cos_o_raw = wo_local[:, 2]
    cos_o = cos_o_raw.clamp_min(COS_EPS).unsqueeze(-1)
    r = _t(roughness).unsqueeze(-1)
    r2 = r * r

    wi_dot_wo = wo_local @ local.T  # (M, S)
    half_len = torch.sqrt((2.0 + 2.0 * wi_dot_wo).clamp_min(1e-24))
    cos_oh = (1.0 + wi_dot_wo) / half_len
    if iso_sg:
        cos_nh = (cos_i_raw + cos_o_raw.unsqueeze(-1)) / half_len
        D = torch.exp((2.0 / r2) * (cos_nh - 1.0)) / (math.pi * r2)
    else:
        ez = torch.tensor([0.0, 0.0, 1.0], dtype=DTYPE)
        z = 2.0 * cos_o_raw.unsqueeze(-1) * ez - wo_local
        x = torch.stack([-z[:, 1], z[:, 0], torch.zeros_like(z[:, 0])], dim=-1)
        xn = x.norm(dim=-1, keepdim=True)
        x = torch.where(xn < 1e-9, torch.tensor([1.0, 0.0, 0.0], dtype=DTYPE), x / xn.clamp_min(1e-300))
        y = torch.cross(z, x, dim=-1)
        px, py, pz = x @ local.T, y @ local.T, z @ local.T
        sharp = 2.0 / (8.0 * r2)
        D = pz.clamp_min(0.0) * torch.exp(-(sharp / (cos_i * cos_i)) * px * px - sharp * py * py) / (math.pi * r2)
    G = smith_ggx_correlated(cos_i, cos_o, r)
    A = D * G / (4.0 * cos_i * cos_o) * (cos_i_raw.clamp_min(0.0) * hemisphere_weight(count))
    A = torch.where((cos_o_raw > 0).unsqueeze(-1), A, torch.zeros_like(A))
    s5 = (1.0 - cos_oh.clamp(0.0, 1.0)) ** 5
    base = torch.einsum("ms,msc->mc", A, light)
    grazing = torch.einsum("ms,msc->mc", A * s5, light)
    f0 = _t(f0)
    return f0 * base + (1.0 - f0) * grazing


def shade(surfel: Surfel, wo, env: EnvironmentMap, visibility_row=None, ns: int = DEFAULT_NS, iso_sg: bool = False):
    """Outgoing RGB radiance of one surfel toward ``wo`` (diffuse SH + quadrature specular)."""
    wo = normalize(_t(wo))
    a, b, n = sample_frame(torch.cross(_t(surfel.tangent_u), _t(surfel.tangent_v), dim=-1))
    c_d = eval_sh(_t(surfel.diffuse_sh), wo).clamp_min(0.0)
    if float(dot(wo, n)) <= 0.0:
        return c_d
    dirs = fibonacci_dirs(ns, n)
    vis = torch.ones(ns, dtype=DTYPE) if visibility_row is None else _t(visibility_row)
    light = incident_radiance(_t(surfel.indirect_sh), dirs, env, vis)
    wo_local = torch.stack([dot(wo, a), dot(wo, b), dot(wo, n)])
    c_s = specular_radiance(
        wo_local[None], _t([surfel.roughness]), _t(surfel.specular_reflectance)[None], light[None], ns, iso_sg
    )[0]
    return c_d + c_s
