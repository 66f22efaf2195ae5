"""Command-line front door for every pipeline stage.

Exit codes: 0 success, 1 usage error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from sketchfield.errors import NonFiniteGradient, NonFiniteLoss, SketchfieldError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _write_json(path, payload):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2))
    tmp.replace(path)


def _bbox_arg(vals):
    from sketchfield.field import AABox

    v = [float(x) for x in vals]
    return AABox(np.array(v[:3]), np.array(v[3:]))


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="torch CPU worker cap")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sketchfield", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="make a synthetic base field")
    sp.add_argument("--kind", choices=["sphere", "box", "plate", "composite"], default="sphere")
    sp.add_argument("--res", type=int, default=64)
    sp.add_argument("--bbox", nargs=6, type=float, default=[-1, -1, -1, 1, 1, 1])
    sp.add_argument("--density", type=float, default=45.0)
    sp.add_argument("--radius-frac", type=float, default=0.35)
    sp.add_argument("-o", "--out", required=True)
    _add_common(sp)

    rp = sub.add_parser("reconstruct", help="fit a field from posed images")
    rp.add_argument("--images", required=True, help="directory of NNN.png + NNN.camera.json")
    rp.add_argument("--res", type=int, default=64)
    rp.add_argument("--bbox", nargs=6, type=float, default=[-1, -1, -1, 1, 1, 1])
    rp.add_argument("--iters", type=int, default=2000)
    rp.add_argument("--lr", type=float, default=0.02)
    rp.add_argument("-o", "--out", required=True)
    _add_common(rp)

    vp = sub.add_parser("render", help="render views to PNG")
    vp.add_argument("field")
    vp.add_argument("-o", "--out", default="renders")
    vp.add_argument("--orbit", type=int, default=0, help="render N orbit views")
    vp.add_argument("--camera", help="camera JSON file for a single view")
    vp.add_argument("--size", type=int, default=128)
    vp.add_argument("--elevation", type=float, default=20.0)
    vp.add_argument("--radius", type=float, default=3.0)
    vp.add_argument("--fov", type=float, default=45.0)
    vp.add_argument("--f32", action="store_true", help="also dump float32 planes")
    _add_common(vp)

    kp = sub.add_parser("sketchpack", help="build a sketch package")
    kp.add_argument("-o", "--out", required=True)
    kp.add_argument("--strokes", help="stroke JSON: {views:[{camera, strokes}]}")
    kp.add_argument("--masks", nargs="*", default=[], help="mask PNG per view")
    kp.add_argument("--cameras", nargs="*", default=[], help="camera JSON per mask")
    kp.add_argument("--field", help="base SKFD for canvases and the edit region")
    kp.add_argument("--bbox", nargs=6, type=float, default=[-1, -1, -1, 1, 1, 1])
    kp.add_argument("--beta", type=float, default=0.05)
    kp.add_argument("--distance-power", type=int, choices=[1, 2], default=2)
    _add_common(kp)

    ep = sub.add_parser("edit", help="run a sketch-guided edit")
    ep.add_argument("field")
    ep.add_argument("--sketch", required=True, help="sketch package directory")
    ep.add_argument("-o", "--out", required=True)
    ep.add_argument("--provider", choices=["analytic", "echo", "external"], default="analytic")
    ep.add_argument("--target", default="cube", help="analytic target: 'cube' or an SKFD path")
    ep.add_argument("--target-color", nargs=3, type=float, default=[0.7, 0.25, 0.2])
    ep.add_argument("--provider-k", type=float, default=0.05)
    ep.add_argument("--host", default="127.0.0.1")
    ep.add_argument("--port", type=int, default=7351)
    ep.add_argument("--prompt", default="")
    ep.add_argument("--config", help="EditConfig JSON file; flags override")
    ep.add_argument("--iters", type=int)
    ep.add_argument("--warmup", type=int)
    ep.add_argument("--lr", type=float)
    ep.add_argument("--beta", type=float)
    ep.add_argument("--lambda-pres", type=float)
    ep.add_argument("--lambda-sil", type=float)
    ep.add_argument("--lambda-sp", type=float)
    ep.add_argument("--lambda-c", type=float)
    ep.add_argument("--train-size", type=int)
    ep.add_argument("--loss-csv")
    ep.add_argument("--checkpoint-every", type=int)
    ep.add_argument("--checkpoint-dir")
    _add_common(ep)

    cp = sub.add_parser("carve", help="empty the sketched visual hull")
    cp.add_argument("field")
    cp.add_argument("--sketch", required=True)
    cp.add_argument("-o", "--out", required=True)
    _add_common(cp)

    xp = sub.add_parser("eval", help="PSNR / IoS / SSIM report")
    xp.add_argument("--base", required=True)
    xp.add_argument("--edited", required=True)
    xp.add_argument("--sketch", required=True)
    xp.add_argument("--json", dest="json_out")
    _add_common(xp)

    wp = sub.add_parser("serve", help="run the studio HTTP service")
    wp.add_argument("--host", default="127.0.0.1")
    wp.add_argument("--port", type=int, default=8600)
    wp.add_argument("--state-dir")
    _add_common(wp)

    return p


def _load_sketches(path, field):
    from sketchfield.sketch import load_package

    return load_package(path, field_bbox=field.bbox if field is not None else None)


def _cmd_synth(args) -> int:
    from sketchfield import field as F

    f = F.synth_scene(
        args.kind,
        args.res,
        _bbox_arg(args.bbox),
        density=args.density,
        radius_frac=args.radius_frac,
    )
    F.save(f, args.out)
    print(f"wrote {args.out} ({args.kind}, {args.res}^3)")
    return 0


def _cmd_reconstruct(args) -> int:
    from PIL import Image

    from sketchfield import editor as E
    from sketchfield import field as F
    from sketchfield.render import Camera

    imgdir = Path(args.images)
    pngs = sorted(imgdir.glob("*.png"))
    images, cameras = [], []
    for png in pngs:
        cam_json = png.with_suffix("").with_suffix(".camera.json")
        if not cam_json.exists():
            cam_json = png.parent / (png.stem + ".camera.json")
        if not cam_json.exists():
            continue
        images.append(np.array(Image.open(png).convert("RGB")).astype(np.float32) / 255.0)
        cameras.append(Camera.from_json(json.loads(cam_json.read_text())))
    if not images:
        raise FileNotFoundError(f"no image/camera pairs under {imgdir}")
    f = E.reconstruct(
        images, cameras, resolution=args.res, bbox=_bbox_arg(args.bbox),
        iterations=args.iters, lr=args.lr, seed=args.seed,
    )
    F.save(f, args.out)
    print(f"wrote {args.out} from {len(images)} views")
    return 0


def _cmd_render(args) -> int:
    from sketchfield import field as F
    from sketchfield import render as R

    f = F.load(args.field)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    cams = []
    if args.camera:
        cams.append(R.Camera.from_json(json.loads(Path(args.camera).read_text())))
    n = max(args.orbit, 1 if not args.camera else 0)
    for i in range(n):
        az = 360.0 * i / max(1, args.orbit or 1)
        cams.append(
            R.orbit_camera(
                az, args.elevation, args.radius,
                target=f.bbox.center, width=args.size, height=args.size,
                fov_y_deg=args.fov,
            )
        )
    for i, cam in enumerate(cams):
        out = R.render_view(f, cam)
        R.write_png(outdir / f"rgb_{i:03d}.png", out.rgb)
        R.write_png(outdir / f"alpha_{i:03d}.png", out.alpha)
        _write_json(outdir / f"camera_{i:03d}.json", cam.to_json())
        if args.f32:
            R.write_f32(
                outdir / f"planes_{i:03d}.bin",
                {"rgb": out.rgb, "alpha": out.alpha, "depth": out.depth},
            )
    print(f"wrote {len(cams)} views to {outdir}")
    return 0


def _cmd_sketchpack(args) -> int:
    from PIL import Image

    from sketchfield import field as F
    from sketchfield import render as R
    from sketchfield.render import Camera
    from sketchfield.sketch import SketchSet, SketchView, fill_scribble, save_package

    base = F.load(args.field) if args.field else None
    views = []
    if args.strokes:
        spec_doc = json.loads(Path(args.strokes).read_text())
        for v in spec_doc["views"]:
            cam = Camera.from_json(v["camera"])
            strokes = v["strokes"]
            if strokes and isinstance(strokes[0][0], (int, float)):
                strokes = [strokes]
            res = fill_scribble(strokes, cam.height, cam.width)
            canvas = R.render_view(base, cam).rgb if base is not None else None
            views.append(SketchView.from_mask(cam, res.mask, canvas))
    else:
        if len(args.masks) != len(args.cameras) or not args.masks:
            raise SystemExit(1)
        for mpath, cpath in zip(args.masks, args.cameras):
            cam = Camera.from_json(json.loads(Path(cpath).read_text()))
            mask = np.array(Image.open(mpath).convert("L")) > 127
            canvas = R.render_view(base, cam).rgb if base is not None else None
            views.append(SketchView.from_mask(cam, mask, canvas))
    bbox = base.bbox if base is not None else _bbox_arg(args.bbox)
    res = base.resolution[0] if base is not None else 64
    ss = SketchSet.build(views, bbox, res, beta=args.beta, distance_power=args.distance_power)
    save_package(ss, args.out)
    print(f"wrote sketch package {args.out} ({len(views)} views)")
    return 0


def _make_provider(args, base, sketches):
    from sketchfield import field as F
    from sketchfield import guidance as G

    if args.provider == "echo":
        return G.EchoProvider()
    if args.provider == "external":
        return G.ExternalProvider(args.host, args.port)
    if args.target == "cube":
        target = F.stamp_box(
            base, sketches.edit_bbox, albedo=tuple(args.target_color), margin=0.95
        )
    else:
        target = F.load(args.target)
    return G.AnalyticTargetProvider(target_field=target, k=args.provider_k)


def _cmd_edit(args) -> int:
    from sketchfield import editor as E
    from sketchfield import field as F
    from sketchfield import guidance as G

    base = F.load(args.field)
    sketches = _load_sketches(args.sketch, base)
    cfg_json = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = E.EditConfig.from_json(cfg_json)
    overrides = {
        "iterations": args.iters,
        "warmup_iters": args.warmup,
        "lr": args.lr,
        "beta": args.beta,
        "lambda_pres": args.lambda_pres,
        "lambda_sil": args.lambda_sil,
        "lambda_sp": args.lambda_sp,
        "lambda_c": args.lambda_c,
        "train_size": args.train_size,
    }
    d = cfg.to_json()
    d.update({k: v for k, v in overrides.items() if v is not None})
    d["seed"] = args.seed
    cfg = E.EditConfig.from_json(d)
    if args.beta is not None:
        sketches.beta = args.beta
    cfg.beta = sketches.beta if args.beta is None else args.beta
    gcfg = G.GuidanceConfig(prompt=args.prompt)
    provider = _make_provider(args, base, sketches)

    ckpt_dir = Path(args.checkpoint_dir) if args.checkpoint_dir else None
    if ckpt_dir:
        ckpt_dir.mkdir(parents=True, exist_ok=True)

    def progress(job, row):
        it = row["iteration"]
        if it % 200 == 0 or it == cfg.iterations:
            print(
                f"iter {it:5d}  sds {row['l_sds']:.5f}  pres {row['l_pres']:.5f}  "
                f"sil {row['l_sil']:.5f}  sp {row['l_sp']:.5f}  lr {row['lr']:.5f}"
            )
        if ckpt_dir and args.checkpoint_every and it % args.checkpoint_every == 0:
            F.save(job.result(), ckpt_dir / f"iter_{it:06d}.skfd")

    result = E.edit(
        base, sketches, cfg, gcfg, provider,
        loss_csv=args.loss_csv, progress=progress,
    )
    F.save(result, args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_carve(args) -> int:
    from sketchfield import field as F

    base = F.load(args.field)
    sketches = _load_sketches(args.sketch, base)
    F.save(F.carve(base, sketches), args.out)
    print(f"wrote {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from sketchfield import field as F
    from sketchfield import metrics as M

    base = F.load(args.base)
    edited = F.load(args.edited)
    sketches = _load_sketches(args.sketch, base)
    report = M.evaluate(base, edited, sketches)
    print(report.table())
    if args.json_out:
        _write_json(args.json_out, report.to_json())
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from sketchfield.studio_api import create_app

    app = create_app(state_dir=args.state_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "reconstruct": _cmd_reconstruct,
    "render": _cmd_render,
    "sketchpack": _cmd_sketchpack,
    "edit": _cmd_edit,
    "carve": _cmd_carve,
    "eval": _cmd_eval,
    "serve": _cmd_serve,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    import torch

    torch.set_num_threads(max(1, getattr(args, "threads", 1)))
    np.random.seed(getattr(args, "seed", 0) % (2**32))
    try:
        return _COMMANDS[args.command](args)
    except (NonFiniteLoss, NonFiniteGradient) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    except (OSError, SketchfieldError, json.JSONDecodeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main() -> None:
    raise SystemExit(run())


if __name__ == "__main__":
    main()
