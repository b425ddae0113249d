"""Command-line interface: render, train, relight, bench, gradcheck and synth."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import io, report, synthetic
from .lighting import EnvironmentMap
from .optimize import TrainConfig, grad_check, psnr, train
from .rasterize import Camera, render
from .raytrace import DEFAULT_ALPHA_MIN, bench_proxy, precompute_visibility
from .threads import set_threads

log = logging.getLogger("glosskit")

GRADCHECK_MAX_SURFELS = 50
GRADCHECK_MAX_PIXELS = 64


class CliError(Exception):
    pass


# ----------------------------------------------------------------------------- helpers


def _load_scene(path) -> io.SceneFile:
    path = Path(path)
    if not path.exists():
        raise CliError(f"scene file not found: {path}")
    try:
        return io.read_scene(path)
    except (ValueError, OSError) as e:
        raise CliError(str(e)) from None


def _camera(sf: io.SceneFile, args) -> Camera:
    if args.eye is not None:
        if not sf.cameras:
            raise CliError("--eye needs at least one camera in the scene file for intrinsics")
        base = sf.cameras[0]
        cam = Camera.look_at(args.eye, args.target, width=base.width, height=base.height)
        return Camera(base.fx, base.fy, base.cx, base.cy, base.width, base.height, cam.rotation, cam.translation)
    if not 0 <= args.camera < len(sf.cameras):
        raise CliError(f"camera id {args.camera} out of range (scene has {len(sf.cameras)} cameras)")
    return sf.cameras[args.camera]


def _visibility(scene, args, enabled: bool = True):
    if not enabled or len(scene) == 0:
        return None
    return precompute_visibility(scene, args.alpha_min, args.ns)


def _render(scene, env, camera, args, visibility, diffuse_only=False):
    with torch.no_grad():
        return render(scene, camera, env, visibility, ns=args.ns, iso_sg=args.iso_sg, diffuse_only=diffuse_only)


def _write_buffers(buffers, args) -> None:
    b = buffers.numpy()
    io.write_png(args.out, b["color"])
    for key in ("hdr", "depth", "normal", "opacity"):
        target = getattr(args, key, None)
        if target:
            io.write_pfm(target, b["color" if key == "hdr" else key])


def _train_config(args) -> TrainConfig:
    data = {}
    if args.config:
        p = Path(args.config)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise CliError(f"{p}: not valid JSON ({e})") from None
        if not isinstance(data, dict):
            raise CliError(f"{p}: config must be a JSON object")
    overrides = {
        "iters_scale": args.iters_scale, "seed": args.seed, "ns": args.ns, "alpha_min": args.alpha_min,
        "checkpoint_every": getattr(args, "checkpoint_every", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    if args.iso_sg:
        data["iso_sg"] = True
    if args.no_normal_loss:
        data["normal_loss"] = False
    if args.no_phases:
        data["phased"] = False
    try:
        return TrainConfig.from_dict(data)
    except KeyError as e:
        raise CliError(f"unknown config key: {e.args[0]}") from None
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid config: {e}") from None


def _shared_defaults(args) -> None:
    # flags left unset fall back to library defaults; train applies them on top of the config file
    args.ns = 64 if args.ns is None else args.ns
    args.alpha_min = DEFAULT_ALPHA_MIN if args.alpha_min is None else args.alpha_min
    if args.ns < 1:
        raise CliError("--ns must be >= 1")
    if not 0 < args.alpha_min < 1:
        raise CliError("--alpha-min must lie in (0, 1)")


# ----------------------------------------------------------------------------- commands


def cmd_render(args) -> int:
    sf = _load_scene(args.scene)
    cam = _camera(sf, args)
    vis = _visibility(sf.scene, args, not args.no_visibility and not args.diffuse_only)
    _write_buffers(_render(sf.scene, sf.env, cam, args, vis, args.diffuse_only), args)
    return 0


def cmd_relight(args) -> int:
    sf = _load_scene(args.scene)
    path = Path(args.envmap)
    if not path.exists():
        raise CliError(f"environment map not found: {path}")
    try:
        env = io.read_env(path)
    except ValueError as e:
        raise CliError(str(e)) from None
    cam = _camera(sf, args)
    vis = _visibility(sf.scene, args, not args.no_visibility)
    _write_buffers(_render(sf.scene, env, cam, args, vis), args)
    return 0


def cmd_train(args) -> int:
    config = _train_config(args)
    args.ns, args.alpha_min = config.ns, config.alpha_min
    try:
        views = io.load_manifest(args.manifest, args.width)
    except (ValueError, OSError) as e:
        raise CliError(str(e)) from None
    if args.init:
        init = _load_scene(args.init)
        scene, env = init.scene, init.env
    else:
        scene = synthetic.init_sphere(args.init_count, args.init_radius)
        env = EnvironmentMap.constant(0.5)

    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    cameras = [v.camera for v in views]

    def checkpoint(iteration, params, rep):
        if config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
            ckpt_dir.mkdir(exist_ok=True)
            s, e = params.snapshot()
            io.write_scene(ckpt_dir / f"scene_{iteration + 1:06d}.json", s, e, cameras)
        if iteration % 100 == 0:
            log.info("iter %d stage %d loss %.6f", iteration, rep.stage, rep.total)

    print("stage lengths " + "/".join(str(n) for n in config.stage_lengths()))
    result = train(scene, env, views, config, checkpoint)
    io.write_scene(out / "scene.json", result.scene, result.env, cameras)
    io.write_loss_csv(out / "loss.csv", result.history)
    report.loss_figure(out / "loss.png", result.history)
    if result.visibility is not None:
        io.write_visibility_pfm(out / "visibility.pfm", result.visibility)

    rows = []
    panel = {}
    for i, v in enumerate(views):
        b = _render(result.scene, result.env, v.camera, args, result.visibility)
        rows.append((i, psnr(b.color, v.image)))
        if i == 0:
            panel = {"target": v.image.numpy(), "fit": b.color.numpy()}
    io.write_csv(out / "views.csv", ("view", "psnr"), rows)
    report.image_panel(out / "views.png", panel)
    print(f"mean train-view PSNR {np.mean([r[1] for r in rows]):.2f} dB over {len(rows)} views")
    return 0


def cmd_bench(args) -> int:
    sf = _load_scene(args.scene)
    if args.rays < 1:
        raise CliError("--rays must be >= 1")
    if args.grazing:
        origins, dirs = synthetic.grazing_rays(sf.scene, args.rays, args.seed)
    else:
        origins, dirs = synthetic.bench_rays(sf.scene, args.rays, args.seed)
    result = bench_proxy(sf.scene, origins, dirs, args.alpha_min)
    keys = ("candidate_hits_proxy", "candidate_hits_aabb", "ratio", "traversal_seconds", "query_seconds_proxy",
            "query_seconds_aabb")
    io.write_csv(args.out, ("surfels", "rays", "seed") + keys,
                 [(len(sf.scene), args.rays, args.seed) + tuple(result[k] for k in keys)])
    report.bench_figure(Path(args.out).with_suffix(".png"), result)
    print(f"candidates: hull {result['candidate_hits_proxy']}  aabb {result['candidate_hits_aabb']}  "
          f"ratio {result['ratio']:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    sf = _load_scene(args.scene)
    cam = _camera(sf, args)
    if len(sf.scene) > GRADCHECK_MAX_SURFELS:
        raise CliError(f"gradcheck is limited to {GRADCHECK_MAX_SURFELS} surfels (scene has {len(sf.scene)})")
    if cam.width > GRADCHECK_MAX_PIXELS or cam.height > GRADCHECK_MAX_PIXELS:
        raise CliError(f"gradcheck is limited to {GRADCHECK_MAX_PIXELS}x{GRADCHECK_MAX_PIXELS} images "
                       f"(camera is {cam.width}x{cam.height})")
    vis = _visibility(sf.scene, args)
    if args.target_image:
        rgb, alpha = io.read_image(args.target_image, (cam.width, cam.height))
        target = torch.as_tensor(rgb)
        mask = None if alpha is None else torch.as_tensor(alpha)
    else:
        tscene, tenv = synthetic.perturb_appearance(sf.scene, sf.env, seed=args.seed + 1)
        b = _render(tscene, tenv, cam, args, vis)
        # a binary mask keeps the alpha term off its |0| kink, where the
        # perturbed copy's opacity would match the render exactly
        target, mask = b.color, (b.opacity > 0.5).to(b.opacity.dtype)
    config = TrainConfig(ns=args.ns, alpha_min=args.alpha_min, iso_sg=args.iso_sg, seed=args.seed)
    rep = grad_check(sf.scene, sf.env, cam, target, mask, config, visibility=vis, seed=args.seed,
                     tolerance=args.tolerance)
    for line in rep.lines():
        print(line)
    print("gradcheck", "PASS" if rep.passed else "FAIL")
    return 0 if rep.passed else 1


SYNTH_SCENES = {
    "sphere": lambda: (synthetic.glossy_sphere(), synthetic.studio_env(), None),
    "one-surfel": lambda: (synthetic.one_surfel(), synthetic.studio_env(), [synthetic.one_surfel_camera()]),
    "gradcheck": lambda: (synthetic.gradcheck_scene(), synthetic.tinted_env(), [synthetic.gradcheck_camera()]),
    "grazing": lambda: (synthetic.grazing_scene(), synthetic.studio_env(), None),
    "random": lambda: (synthetic.random_scene(500), synthetic.studio_env(), None),
}


def cmd_synth(args) -> int:
    scene, env, cams = SYNTH_SCENES[args.kind]()
    if cams is None:
        cams = synthetic.orbit_cameras(args.views, width=args.width, height=args.width)
    io.write_scene(args.out, scene, env, cams)
    if args.dataset:
        views = synthetic.make_dataset(scene, env, cams, args.ns, args.alpha_min, args.iso_sg)
        io.write_manifest(args.dataset, views)
    return 0


# ----------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--iters-scale", type=float, default=None, help="multiply every stage length")
    shared.add_argument("--alpha-min", type=float, default=None, help="visibility opacity threshold")
    shared.add_argument("--ns", type=int, default=None, help="incident light samples per surfel")
    shared.add_argument("--iso-sg", action="store_true", help="isotropic SG NDF instead of the warped ASG")
    shared.add_argument("--no-normal-loss", action="store_true", help="drop the depth-normal consistency term")
    shared.add_argument("--no-phases", action="store_true", help="train every group with every loss term")

    def view_args(p):
        p.add_argument("--camera", type=int, default=0, help="camera index in the scene file")
        p.add_argument("--eye", type=float, nargs=3, default=None, help="camera position (overrides --camera)")
        p.add_argument("--target", type=float, nargs=3, default=(0.0, 0.0, 0.0), help="look-at point for --eye")

    def output_args(p):
        p.add_argument("--out", required=True, help="color PNG")
        p.add_argument("--hdr", help="unclamped color PFM")
        p.add_argument("--depth", help="depth PFM")
        p.add_argument("--normal", help="normal PFM")
        p.add_argument("--opacity", help="opacity PFM")
        p.add_argument("--no-visibility", action="store_true", help="treat every light direction as unoccluded")

    parser = argparse.ArgumentParser(prog="glosskit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", parents=[shared], help="render a scene file")
    p.add_argument("scene")
    view_args(p)
    output_args(p)
    p.add_argument("--diffuse-only", action="store_true", help="skip the specular term")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("relight", parents=[shared], help="render with a replacement environment map")
    p.add_argument("scene")
    p.add_argument("envmap", help="16x32 map as PFM (32 wide, 16 high) or JSON")
    view_args(p)
    output_args(p)
    p.set_defaults(func=cmd_relight)

    p = sub.add_parser("train", parents=[shared], help="fit a scene to a NeRF-Synthetic style manifest")
    p.add_argument("manifest")
    p.add_argument("--config", help="JSON file of training options")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--init", help="initial scene file (default: a sphere of surfels)")
    p.add_argument("--init-count", type=int, default=200)
    p.add_argument("--init-radius", type=float, default=1.0)
    p.add_argument("--width", type=int, default=None, help="resample views to this width")
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("bench", parents=[shared], help="hull versus box candidate counts")
    p.add_argument("scene")
    p.add_argument("--rays", type=int, default=1000)
    p.add_argument("--grazing", action="store_true", help="rays inside the z = 0 plane")
    p.add_argument("--out", required=True, help="CSV path; a bar chart is written beside it")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", parents=[shared], help="autograd versus finite differences")
    p.add_argument("scene")
    view_args(p)
    p.add_argument("--target-image", help="target PNG (default: render of a perturbed copy)")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", parents=[shared], help="write a built-in scene and optionally its dataset")
    p.add_argument("kind", choices=sorted(SYNTH_SCENES))
    p.add_argument("out", help="scene file")
    p.add_argument("--views", type=int, default=6)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--dataset", help="directory for rendered views and transforms.json")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("GLOSSKIT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise CliError("--threads must be >= 1")
        set_threads(args.threads)
        if args.command != "train":
            _shared_defaults(args)
            args.seed = 0 if args.seed is None else args.seed
        return args.func(args)
    except CliError as e:
        print(f"glosskit: error: {e}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
