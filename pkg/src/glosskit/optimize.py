"""Losses, the three-stage fitting schedule and finite-difference gradient checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .lighting import EnvironmentMap, light_reg
from .rasterize import Camera, RenderBuffers, depth_to_normal, plan_hits, render
from .raytrace import DEFAULT_ALPHA_MIN, precompute_visibility
from .surfel import DTYPE, Scene, orthonormalize

log = logging.getLogger(__name__)

ROUGHNESS_MIN = 1e-3
GEOMETRY_GROUPS = ("position", "tangents", "scale", "opacity")
MATERIAL_GROUPS = ("roughness", "specular", "diffuse_sh", "indirect_sh")
ALL_GROUPS = GEOMETRY_GROUPS + MATERIAL_GROUPS + ("environment",)

DEFAULT_LR = {
    "position": 1.6e-4,
    "tangents": 1e-3,
    "scale": 5e-3,
    "opacity": 5e-2,
    "roughness": 2.5e-3,
    "specular": 2.5e-3,
    "diffuse_sh": 2.5e-3,
    "indirect_sh": 2.5e-3,
    "environment": 1e-2,
}


@dataclass
class TrainConfig:
    stage1_iters: int = 7000
    stage2_iters: int = 18000
    stage3_iters: int = 15000
    iters_scale: float = 1.0
    lr: dict = field(default_factory=lambda: dict(DEFAULT_LR))
    lambda_dssim: float = 0.2
    lambda_normal: float = 0.05
    lambda_light: float = 0.01
    lambda_alpha: float = 0.1
    ns: int = 64
    alpha_min: float = DEFAULT_ALPHA_MIN
    seed: int = 0
    iso_sg: bool = False
    normal_loss: bool = True
    phased: bool = True
    visibility_interval: int = 1000
    checkpoint_every: int = 0

    def __post_init__(self):
        lr = dict(DEFAULT_LR)
        unknown = set(self.lr) - set(lr)
        if unknown:
            raise ValueError(f"unknown learning-rate group: {sorted(unknown)[0]}")
        lr.update(self.lr)
        self.lr = lr
        for name in ("stage1_iters", "stage2_iters", "stage3_iters"):
            if int(getattr(self, name)) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("lambda_dssim", "lambda_normal", "lambda_light", "lambda_alpha", "iters_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.ns < 1:
            raise ValueError("ns must be >= 1")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise KeyError(key)
        return cls(**data)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def stage_lengths(self) -> tuple[int, int, int]:
        return tuple(
            int(round(n * self.iters_scale)) for n in (self.stage1_iters, self.stage2_iters, self.stage3_iters)
        )


@dataclass
class LossReport:
    total: float
    photometric: float
    normal: float
    light: float
    alpha: float
    iteration: int = 0
    stage: int = 0

    CSV_FIELDS = ("iteration", "total", "photometric", "normal", "light", "alpha")

    def row(self) -> list:
        return [self.iteration, self.total, self.photometric, self.normal, self.light, self.alpha]


@dataclass
class View:
    image: torch.Tensor  # (H, W, 3)
    camera: Camera
    mask: torch.Tensor | None = None  # (H, W)


# ----------------------------------------------------------------------------- losses


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    x = torch.arange(size, dtype=DTYPE) - size // 2
    g = torch.exp(-(x * x) / (2 * sigma * sigma))
    g = g / g.sum()
    return g[:, None] * g[None, :]


def ssim(img1: torch.Tensor, img2: torch.Tensor, window_size: int = 11) -> torch.Tensor:
    """Mean SSIM of (H, W, C) images; Gaussian window, zero padding, C1 = 0.01^2, C2 = 0.03^2."""
    C = img1.shape[-1]
    x = img1.permute(2, 0, 1).unsqueeze(0)
    y = img2.permute(2, 0, 1).unsqueeze(0)
    w = _gaussian_window(window_size).expand(C, 1, window_size, window_size).contiguous()
    pad = window_size // 2
    mu_x = F.conv2d(x, w, padding=pad, groups=C)
    mu_y = F.conv2d(y, w, padding=pad, groups=C)
    sxx = F.conv2d(x * x, w, padding=pad, groups=C) - mu_x * mu_x
    syy = F.conv2d(y * y, w, padding=pad, groups=C) - mu_y * mu_y
    sxy = F.conv2d(x * y, w, padding=pad, groups=C) - mu_x * mu_y
    c1, c2 = 0.01**2, 0.03**2
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (sxx + syy + c2)
    return (num / den).mean()


def photometric_loss(rendered: torch.Tensor, target: torch.Tensor, lambda_dssim: float = 0.2) -> torch.Tensor:
    if rendered.shape != target.shape:
        raise ValueError(f"image shapes differ: {tuple(rendered.shape)} vs {tuple(target.shape)}")
    l1 = (rendered - target).abs().mean()
    if lambda_dssim == 0:
        return l1
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * (1.0 - ssim(rendered, target))


def alpha_loss(opacity: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = torch.as_tensor(mask, dtype=DTYPE)
    if opacity.shape != mask.shape:
        raise ValueError(f"opacity {tuple(opacity.shape)} and mask {tuple(mask.shape)} differ in size")
    return (mask - opacity).abs().mean()


def normal_mask(buffers: RenderBuffers) -> torch.Tensor:
    return buffers.opacity.detach() >= 0.5


def normal_loss(buffers: RenderBuffers, camera: Camera, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Blend-weighted disagreement between splat normals and depth-derived normals.

    Depth is normalized by accumulated opacity before differencing so that
    partially covered pixels still back-project onto the surface.
    """
    if mask is None:
        mask = normal_mask(buffers)
    depth = buffers.depth / buffers.opacity.clamp_min(1e-6)
    N, valid = depth_to_normal(depth, camera, world=True, mask=mask)
    if buffers.splat_weights is None or buffers.splat_weights.shape[1] == 0 or not bool(valid.any()):
        return buffers.color.sum() * 0.0
    w = buffers.splat_weights
    agree = (buffers.splat_normals * N.reshape(-1, 1, 3)).sum(-1)
    per_pixel = (w * (1.0 - agree)).sum(-1)
    v = valid.reshape(-1)
    return per_pixel[v].mean()


def total_loss(terms: dict, weights: dict, iteration: int = 0, stage: int = 0):
    """Weighted sum ``photometric + sum_k weight_k * term_k``; returns (tensor, LossReport)."""
    total = terms["photometric"]
    for key in ("normal", "light", "alpha"):
        wk = weights.get(key, 0.0)
        if wk:
            total = total + wk * terms[key]
    val = lambda k: float(terms[k].detach()) if k in terms else 0.0  # noqa: E731
    report = LossReport(float(total.detach()), val("photometric"), val("normal"), val("light"), val("alpha"),
                        iteration, stage)
    return total, report


def stage_weights(config: TrainConfig, stage: int) -> dict:
    lam_n = config.lambda_normal if config.normal_loss else 0.0
    if not config.phased:
        return {"normal": lam_n, "light": config.lambda_light, "alpha": config.lambda_alpha}
    if stage == 1:
        return {"normal": 0.0, "light": 0.0, "alpha": config.lambda_alpha}
    if stage == 2:
        return {"normal": lam_n, "light": 0.0, "alpha": config.lambda_alpha}
    return {"normal": 0.0, "light": config.lambda_light, "alpha": 0.0}


def stage_groups(config: TrainConfig, stage: int) -> tuple[str, ...]:
    if not config.phased:
        return ALL_GROUPS
    if stage == 1:
        return GEOMETRY_GROUPS + ("diffuse_sh",)
    if stage == 2:
        return GEOMETRY_GROUPS + MATERIAL_GROUPS
    return MATERIAL_GROUPS + ("environment",)


def loss_terms(buffers: RenderBuffers, view: View, env: EnvironmentMap, config: TrainConfig,
               normal_valid: torch.Tensor | None = None) -> dict:
    terms = {
        "photometric": photometric_loss(buffers.color, view.image, config.lambda_dssim),
        "normal": normal_loss(buffers, view.camera, normal_valid),
        "light": light_reg(env),
    }
    terms["alpha"] = alpha_loss(buffers.opacity, view.mask) if view.mask is not None else buffers.opacity.sum() * 0.0
    return terms


# ----------------------------------------------------------------------------- parameters


def _logit(x, lo=1e-6):
    x = x.clamp(lo, 1 - lo)
    return torch.log(x) - torch.log1p(-x)


def _inv_softplus(x):
    x = x.clamp_min(1e-6)
    return x + torch.log(-torch.expm1(-x))


class SceneParams:
    """Unconstrained optimizer leaves for one scene and its environment map."""

    def __init__(self, scene: Scene, env: EnvironmentMap):
        s = scene.detach()
        r = ((s.roughness - ROUGHNESS_MIN) / (1 - ROUGHNESS_MIN)).clamp(1e-6, 1 - 1e-6)
        self.tensors = {
            "position": [s.positions.clone()],
            "tangents": [s.tangent_u.clone(), s.tangent_v.clone()],
            "scale": [torch.log(s.scales)],
            "opacity": [_logit(s.opacity)],
            "roughness": [_logit(r)],
            "specular": [_logit(s.specular)],
            "diffuse_sh": [s.diffuse_sh.clone()],
            "indirect_sh": [s.indirect_sh.clone()],
            "environment": [_inv_softplus(env.radiance.detach().clone())],
        }

    def group(self, name: str) -> list[torch.Tensor]:
        return self.tensors[name]

    def set_trainable(self, groups) -> None:
        for name, ts in self.tensors.items():
            for t in ts:
                t.requires_grad_(name in groups)
                t.grad = None

    def materialize(self) -> tuple[Scene, EnvironmentMap]:
        T = self.tensors
        tu, tv = orthonormalize(*T["tangents"])
        scene = Scene(
            positions=T["position"][0],
            tangent_u=tu,
            tangent_v=tv,
            scales=torch.exp(T["scale"][0]),
            opacity=torch.sigmoid(T["opacity"][0]),
            roughness=ROUGHNESS_MIN + (1 - ROUGHNESS_MIN) * torch.sigmoid(T["roughness"][0]),
            specular=torch.sigmoid(T["specular"][0]),
            diffuse_sh=T["diffuse_sh"][0],
            indirect_sh=T["indirect_sh"][0],
        )
        env = EnvironmentMap.__new__(EnvironmentMap)
        env.radiance = F.softplus(T["environment"][0])
        return scene, env

    def snapshot(self) -> tuple[Scene, EnvironmentMap]:
        with torch.no_grad():
            scene, env = self.materialize()
        return scene.detach(), EnvironmentMap(env.radiance.detach().clone())

    @torch.no_grad()
    def reorthonormalize(self) -> None:
        tu, tv = self.tensors["tangents"]
        nu, nv = orthonormalize(tu, tv)
        tu.copy_(nu)
        tv.copy_(nv)


# ----------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    scene: Scene
    env: EnvironmentMap
    history: list[LossReport]
    visibility: np.ndarray | None


def _schedule(config: TrainConfig) -> list[tuple[int, int]]:
    n1, n2, n3 = config.stage_lengths()
    if not config.phased:
        return [(0, n1 + n2 + n3)]
    return [(1, n1), (2, n2), (3, n3)]


def train(scene: Scene, env: EnvironmentMap, dataset: list[View], config: TrainConfig,
          callback: Callable[[int, SceneParams, LossReport], None] | None = None) -> TrainResult:
    """Fit surfel geometry, materials and lighting to posed images in three stages.

    Stage 1 fits geometry and diffuse SH under photometric and mask losses,
    stage 2 adds the normal-consistency term and the remaining materials,
    stage 3 freezes geometry and refines materials plus the environment map
    against the precomputed visibility table.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    shape = tuple(dataset[0].image.shape)
    if any(tuple(v.image.shape) != shape for v in dataset):
        raise ValueError("all views must share one image size")

    torch.use_deterministic_algorithms(True)
    rng = np.random.default_rng(config.seed)
    params = SceneParams(scene, env)
    optimizers = {
        g: torch.optim.Adam(params.group(g), lr=config.lr[g], eps=1e-15) for g in ALL_GROUPS
    }
    history: list[LossReport] = []
    visibility = None
    iteration = 0

    for stage, n_iters in _schedule(config):
        if n_iters == 0:
            continue
        groups = stage_groups(config, stage)
        weights = stage_weights(config, stage)
        params.set_trainable(groups)
        moves_geometry = any(g in GEOMETRY_GROUPS for g in groups)
        visibility = _visibility(params, config)
        log.info("stage %d: %d iterations, groups=%s", stage, n_iters, ",".join(groups))
        for k in range(n_iters):
            if moves_geometry and k > 0 and config.visibility_interval and k % config.visibility_interval == 0:
                visibility = _visibility(params, config)
            view = dataset[int(rng.integers(len(dataset)))]
            cur_scene, cur_env = params.materialize()
            buffers = render(cur_scene, view.camera, cur_env, visibility, ns=config.ns, iso_sg=config.iso_sg)
            total, report = total_loss(loss_terms(buffers, view, cur_env, config), weights, iteration, stage)
            for g in groups:
                optimizers[g].zero_grad(set_to_none=True)
            total.backward()
            for g in groups:
                optimizers[g].step()
            if "tangents" in groups:
                params.reorthonormalize()
            history.append(report)
            if callback is not None:
                callback(iteration, params, report)
            iteration += 1

    params.set_trainable(())
    final_scene, final_env = params.snapshot()
    return TrainResult(final_scene, final_env, history, visibility)


def _visibility(params: SceneParams, config: TrainConfig) -> np.ndarray:
    scene, _ = params.snapshot()
    return precompute_visibility(scene, config.alpha_min, config.ns)


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    mse = float(((a - b) ** 2).mean())
    return math.inf if mse == 0 else -10.0 * math.log10(mse)


# ----------------------------------------------------------------------------- gradient check


@dataclass
class GroupCheck:
    name: str
    max_rel_error: float
    checked: int
    skipped: int
    frozen: bool = False

    def passed(self, tol: float) -> bool:
        return self.frozen or (self.checked > 0 and self.max_rel_error <= tol)


@dataclass
class GradCheckReport:
    groups: list[GroupCheck]
    tolerance: float
    frozen_grad_max: float = 0.0

    @property
    def passed(self) -> bool:
        return all(g.passed(self.tolerance) for g in self.groups) and self.frozen_grad_max == 0.0

    def lines(self) -> list[str]:
        out = []
        for g in self.groups:
            if g.frozen:
                out.append(f"{g.name:<12} frozen   analytic gradient = 0")
            else:
                status = "PASS" if g.passed(self.tolerance) else "FAIL"
                out.append(f"{g.name:<12} {status}  max_rel_err={g.max_rel_error:.3e}  "
                           f"checked={g.checked} skipped={g.skipped}")
        return out


def grad_check(scene: Scene, env: EnvironmentMap, camera: Camera, target: torch.Tensor, mask=None,
               config: TrainConfig | None = None, *, step: float = 1e-4, tolerance: float = 1e-3,
               coords_per_group: int = 12, frozen: tuple[str, ...] = (), groups: tuple[str, ...] = ALL_GROUPS,
               visibility=None, seed: int = 0, loss_fn=None) -> GradCheckReport:
    """Compare autograd gradients of the total loss with central differences.

    The hit plan, the normal-loss pixel mask and the visibility table are
    fixed from the unperturbed scene so every evaluation sees the same
    smooth branch. The error of a group is max |analytic - numeric| /
    max |numeric| over its sampled coordinates (half the largest analytic
    entries, half random). The loss is only piecewise smooth (per-pixel L1,
    clamps, texel boundaries), so when the one-sided differences disagree by
    more than the error budget the step is cut by 10 until two successive
    central differences agree within a tenth of the budget. A coordinate is
    skipped only if that never happens down to ``step / 1000``, meaning a
    kink sits closer than that.
    """
    config = config or TrainConfig()
    params = SceneParams(scene, env)
    params.set_trainable(tuple(g for g in groups if g not in frozen))
    view = View(target, camera, mask)
    weights = {"normal": config.lambda_normal, "light": config.lambda_light,
               "alpha": config.lambda_alpha if mask is not None else 0.0}

    with torch.no_grad():
        s0, e0 = params.materialize()
        plan = plan_hits(s0, camera)
        valid = normal_mask(render(s0, camera, e0, visibility, ns=config.ns, iso_sg=config.iso_sg, plan=plan))

    def loss() -> torch.Tensor:
        s, e = params.materialize()
        b = render(s, camera, e, visibility, ns=config.ns, iso_sg=config.iso_sg, plan=plan)
        terms = loss_terms(b, view, e, config, valid)
        if loss_fn is not None:
            return loss_fn(terms, weights)
        return total_loss(terms, weights)[0]

    total = loss()
    if total.requires_grad:
        total.backward()
    f0 = float(total.detach())

    rng = np.random.default_rng(seed)
    checks = []
    frozen_grad_max = 0.0
    for name in groups:
        tensors = params.group(name)
        if name in frozen:
            grads = [t.grad for t in tensors if t.grad is not None]
            frozen_grad_max = max([frozen_grad_max] + [float(g.abs().max()) for g in grads])
            checks.append(GroupCheck(name, 0.0, 0, 0, frozen=True))
            continue
        analytic = torch.cat([
            (t.grad if t.grad is not None else torch.zeros_like(t)).reshape(-1) for t in tensors
        ])
        offsets = np.cumsum([0] + [t.numel() for t in tensors])
        order = torch.argsort(analytic.abs(), descending=True, stable=True).tolist()
        top = order[: coords_per_group // 2]
        rest = order[len(top):]
        n_extra = min(len(rest), coords_per_group - len(top))
        chosen = top + [int(i) for i in rng.choice(rest, size=n_extra, replace=False)] if n_extra else top

        def central(t, j, h):
            with torch.no_grad():
                orig = float(t[j])
                t[j] = orig + h
                fp = float(loss())
                t[j] = orig - h
                fm = float(loss())
                t[j] = orig
            return fp, fm

        samples = []
        for c in chosen:
            ti = int(np.searchsorted(offsets, c, side="right") - 1)
            t = tensors[ti].view(-1)
            j = c - offsets[ti]
            fp, fm = central(t, j, step)
            samples.append((float(analytic[c]), (fp - fm) / (2 * step), (fp - f0) / step, (f0 - fm) / step, t, j))

        scale = max((abs(s[1]) for s in samples), default=0.0)
        budget = tolerance * scale
        kept = []
        for a, fd, fwd, bwd, t, j in samples:
            if budget > 0 and abs(fwd - bwd) > budget:
                # curvature or a kink inside the step; shrink until the estimate settles
                h, settled = step, False
                for _ in range(3):
                    h /= 10
                    fp, fm = central(t, j, h)
                    fd_next = (fp - fm) / (2 * h)
                    settled = abs(fd_next - fd) <= 0.1 * budget
                    fd = fd_next
                    if settled:
                        break
                if not settled:
                    continue
            kept.append((a, fd))
        skipped = len(samples) - len(kept)
        worst = max((abs(a - fd) for a, fd in kept), default=0.0)
        if scale > 0:
            rel = worst / scale
        else:
            rel = 0.0 if worst == 0.0 else math.inf
        checks.append(GroupCheck(name, rel, len(kept), skipped))
    return GradCheckReport(checks, tolerance, frozen_grad_max)
