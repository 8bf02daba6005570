"""Command line interface.

Subcommands:
  render       render a mesh (soft, or --hard for the z-buffer reference)
  fit-pose     recover a random rigid pose from a rendered target
  fit-nonrigid fit vertex displacements to a rendered target
  gradcheck    compare analytic gradients against finite differences
  sweep        batch of pose-recovery trials with a summary CSV

Settings follow flag > config file > default precedence; --config
points at a flat JSON file whose keys match SceneConfig fields.
"""

import argparse
import multiprocessing
import os
import sys

import numpy as np

from .camera import Pose
from .fitting import Schedule, fit_nonrigid, render_rgba, run_pose_trial
from .io import SceneConfig, load_obj, save_obj, write_png
from .mesh import Mesh, make_ico_sphere, make_unit_cube
from .oracles import finite_difference_check, hard_raster_oracle, random_scene
from .render import render


def _triple(text):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return tuple(parts)


def _quad(text):
    parts = [float(x) for x in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError(f"expected four comma-separated numbers, got {text!r}")
    return tuple(parts)


def _cutoff(text):
    if text.lower() in ("none", "off"):
        return "none"
    return float(text)


def _float_list(text):
    return [float(x) for x in text.split(",") if x]


def _add_scene_args(p):
    g = p.add_argument_group("scene settings (override --config and defaults)")
    g.add_argument("--config", help="flat JSON config file")
    g.add_argument("--width", type=int)
    g.add_argument("--height", type=int)
    g.add_argument("--sigma", type=float, help="coverage sharpness (smaller = harder edges)")
    g.add_argument("--gamma", type=float, help="depth softmax temperature")
    g.add_argument("--epsilon", type=float, help="background exponent in the depth softmax")
    g.add_argument("--background", type=_triple, metavar="R,G,B")
    g.add_argument("--metric", choices=["euclidean", "barycentric"])
    g.add_argument("--shading", choices=["flat", "lit"])
    g.add_argument("--light-dir", type=_triple, metavar="X,Y,Z")
    g.add_argument("--ambient", type=float)
    g.add_argument("--diffuse", type=float)
    g.add_argument("--cutoff", type=_cutoff,
                   help="fragment probability cutoff, or 'none' for exhaustive")
    g.add_argument("--eye", type=_triple, metavar="X,Y,Z")
    g.add_argument("--target", type=_triple, metavar="X,Y,Z")
    g.add_argument("--up", type=_triple, metavar="X,Y,Z")
    g.add_argument("--fov", type=float, dest="fov_deg", help="vertical field of view, degrees")
    g.add_argument("--aspect", type=float)
    g.add_argument("--z-near", type=float, dest="z_near")
    g.add_argument("--z-far", type=float, dest="z_far")


def _add_mesh_args(p, default_fixture="cube"):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--obj", help="mesh to load (OBJ, optional vertex colors)")
    g.add_argument("--fixture", default=default_fixture,
                   choices=["cube", "icosphere0", "icosphere1", "icosphere2"])


def _build_scene(args):
    overrides = {}
    for name in SceneConfig.field_names():
        if hasattr(args, name):
            overrides[name] = getattr(args, name)
    cutoff = overrides.get("cutoff")
    if cutoff == "none":
        overrides["cutoff"] = None
    elif cutoff is None and "cutoff" in overrides:
        del overrides["cutoff"]  # not mentioned: fall back to file / default
    if args.config:
        return SceneConfig.from_file(args.config, overrides)
    return SceneConfig().updated(overrides)


def _load_mesh(args):
    if getattr(args, "obj", None):
        return load_obj(args.obj)
    name = getattr(args, "fixture", "cube")
    if name == "cube":
        return make_unit_cube()
    return make_ico_sphere(int(name[-1]))


def _write_rows_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            cells = []
            for key in header:
                v = row[key]
                cells.append(str(v) if isinstance(v, (int, np.integer)) else f"{v:.12g}")
            fh.write(",".join(cells) + "\n")


def _frame_writer(directory, every):
    if directory is None:
        return None
    os.makedirs(directory, exist_ok=True)

    def callback(iteration, out):
        if iteration % every == 0:
            write_png(os.path.join(directory, f"frame_{iteration:05d}.png"),
                      out.image, out.alpha)
    return callback


# ---------------------------------------------------------------------------
# subcommands


def cmd_render(args):
    scene = _build_scene(args)
    mesh = _load_mesh(args)
    pose = Pose(args.quat, args.translate)
    camera = scene.camera()
    if args.sweep_sigma or args.sweep_gamma:
        if args.hard:
            print("--hard ignores sigma and gamma; drop it or the sweep flags",
                  file=sys.stderr)
            return 2
        sigmas = args.sweep_sigma or [scene.sigma]
        gammas = args.sweep_gamma or [scene.gamma]
        stem, ext = os.path.splitext(args.out)
        for s in sigmas:
            for g in gammas:
                cfg = scene.updated({"sigma": s, "gamma": g})
                out = render(mesh, camera, cfg.render_config(keep_tape=False), pose)
                name = f"{stem}_sigma{s:g}_gamma{g:g}{ext}"
                write_png(name, out.image, out.alpha)
                print(f"wrote {name} ({cfg.width}x{cfg.height}, soft)")
        return 0
    config = scene.render_config(keep_tape=False)
    if args.hard:
        out = hard_raster_oracle(mesh, camera, config, pose)
    else:
        out = render(mesh, camera, config, pose)
    write_png(args.out, out.image, out.alpha)
    print(f"wrote {args.out} ({config.width}x{config.height}, "
          f"{'hard' if args.hard else 'soft'})")
    return 0


def cmd_fit_pose(args):
    scene = _build_scene(args)
    mesh = _load_mesh(args)
    camera = scene.camera()
    config = scene.render_config()
    init_max = np.deg2rad(args.init_angle) if args.init_angle is not None else None
    row, report = run_pose_trial(
        mesh, camera, config, args.seed, trial=0,
        scheduled=not args.no_schedule, init_max_angle=init_max,
        iters=args.iters, lr=args.lr, lr_decay=args.lr_decay,
        frame_callback=_frame_writer(args.frames, args.frame_every))
    report.to_csv(args.csv)
    print(f"wrote {args.csv} ({len(report.rows)} iterations)")
    print(f"init angle  {row['init_angle']:.6f} rad ({np.rad2deg(row['init_angle']):.2f} deg)")
    print(f"final angle {row['final_angle']:.6f} rad ({np.rad2deg(row['final_angle']):.2f} deg)")
    if report.aborted:
        print(f"aborted: {report.message}")
        return 1
    return 0


def cmd_fit_nonrigid(args):
    scene = _build_scene(args)
    config = scene.render_config()
    source = make_ico_sphere(2, radius=0.75)
    target_mesh = _load_mesh(args)
    camera = scene.camera()
    tgt = render(target_mesh, camera, scene.render_config(keep_tape=False), Pose())

    schedule = (None if args.no_schedule
                else Schedule.geometric(args.iters, config.sigma, config.gamma))
    report = fit_nonrigid(source, camera, render_rgba(tgt), config=config,
                          iters=args.iters, lr=args.lr, mu=args.mu,
                          schedule=schedule,
                          frame_callback=_frame_writer(args.frames, args.frame_every))
    report.to_csv(args.csv)
    fitted = Mesh(source.vertices + report.final_displacements, source.faces,
                  source.colors)
    save_obj(args.out_obj, fitted)
    print(f"wrote {args.csv} ({len(report.rows)} iterations)")
    print(f"wrote {args.out_obj}")
    print(f"final loss {report.final_loss:.6g}")
    if report.aborted:
        print(f"aborted: {report.message}")
        return 1
    return 0


def cmd_gradcheck(args):
    scene = _build_scene(args)
    # finite differences need a renderer that is smooth on the step
    # scale; unless told otherwise, run much blurrier than the render
    # defaults
    if args.sigma is None and args.config is None:
        scene = scene.updated({"sigma": 1e-2})
    if args.gamma is None and args.config is None:
        scene = scene.updated({"gamma": 1e-2})
    if args.width is None and args.config is None:
        scene = scene.updated({"width": 32, "height": 32})

    # the scene-level --metric / --shading narrow the check to one
    # variant; left unset, both are exercised in alternation
    metrics = ["euclidean", "barycentric"] if args.metric is None else [args.metric]
    shadings = ["flat", "lit"] if args.shading is None else [args.shading]

    worst = 0.0
    failed = 0
    for s in range(args.scenes):
        rng = np.random.default_rng([args.seed, s])
        mesh, pose, camera = random_scene(rng)
        metric = metrics[s % len(metrics)]
        shading = shadings[(s // len(metrics)) % len(shadings)]
        cfg = scene.updated({"metric": metric, "shading": shading}).render_config()
        h_img = rng.uniform(-1.0, 1.0, size=(cfg.height, cfg.width, 3))
        h_alpha = rng.uniform(-1.0, 1.0, size=(cfg.height, cfg.width))
        coords = {}
        for block, size in (("displacements", mesh.vertices.size),
                            ("colors", mesh.colors.size),
                            ("quaternion", 4), ("translation", 3)):
            take = min(args.max_coords, size)
            coords[block] = np.sort(rng.choice(size, size=take, replace=False))
        res = finite_difference_check(mesh, camera, cfg, pose, h_img, h_alpha,
                                      h=args.h, coords=coords)
        checked = sum(int(res[b]["checked"].sum()) for b in
                      ("displacements", "colors", "quaternion", "translation"))
        probed = sum(len(coords[b]) for b in coords)
        worst = max(worst, res["max_err"])
        ok = res["max_err"] <= args.tol
        failed += 0 if ok else 1
        print(f"scene {s:03d} metric={metric:11s} shading={shading:4s} "
              f"max_err={res['max_err']:.3e} checked={checked}/{probed} "
              f"{'ok' if ok else 'FAIL'}")
    print(f"{args.scenes} scenes, worst error {worst:.3e}, tolerance {args.tol:.1e}: "
          f"{'PASS' if failed == 0 else f'FAIL ({failed} scenes)'}")
    return 0 if failed == 0 else 1


def _sweep_worker(params):
    scene = SceneConfig(**params["scene"])
    args_ns = argparse.Namespace(obj=params["obj"], fixture=params["fixture"])
    mesh = _load_mesh(args_ns)
    row, _ = run_pose_trial(
        mesh, scene.camera(), scene.render_config(), params["seed"],
        params["trial"], scheduled=params["scheduled"],
        init_max_angle=params["init_max_angle"],
        iters=params["iters"], lr=params["lr"], lr_decay=params["lr_decay"],
        attempts=params["attempts"])
    return row


def cmd_sweep(args):
    from dataclasses import asdict

    scene = _build_scene(args)
    init_max = np.deg2rad(args.init_angle) if args.init_angle is not None else None
    params = [{
        "scene": asdict(scene),
        "obj": args.obj,
        "fixture": args.fixture,
        "seed": args.seed,
        "trial": t,
        "scheduled": args.schedule == "on",
        "init_max_angle": init_max,
        "iters": args.iters,
        "lr": args.lr,
        "lr_decay": args.lr_decay,
        "attempts": args.attempts,
    } for t in range(args.trials)]

    if args.jobs > 1:
        with multiprocessing.Pool(args.jobs) as pool:
            rows = pool.map(_sweep_worker, params)
    else:
        rows = [_sweep_worker(p) for p in params]

    _write_rows_csv(args.csv, ("trial", "init_angle", "final_angle", "aborted"), rows)
    finals = np.array([r["final_angle"] for r in rows])
    print(f"wrote {args.csv} ({len(rows)} trials)")
    print(f"mean angle error {finals.mean():.6f} rad ({np.rad2deg(finals.mean()):.2f} deg), "
          f"median {np.median(finals):.6f} rad ({np.rad2deg(np.median(finals)):.2f} deg)")
    print(f"converged <2 deg: {np.mean(finals < np.deg2rad(2.0)) * 100:.1f}%")
    return 0


# ---------------------------------------------------------------------------


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="softraster",
        description="differentiable soft rasterizer and inverse-rendering tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a mesh to PNG")
    _add_mesh_args(p)
    _add_scene_args(p)
    p.add_argument("--quat", type=_quad, default=(1.0, 0.0, 0.0, 0.0),
                   metavar="W,X,Y,Z", help="pose rotation quaternion")
    p.add_argument("--translate", type=_triple, default=(0.0, 0.0, 0.0),
                   metavar="X,Y,Z", help="pose translation")
    p.add_argument("--hard", action="store_true",
                   help="use the z-buffer reference rasterizer")
    p.add_argument("--sweep-sigma", type=_float_list, default=[], metavar="S1,S2,...",
                   help="render one image per sigma (crossed with --sweep-gamma)")
    p.add_argument("--sweep-gamma", type=_float_list, default=[], metavar="G1,G2,...",
                   help="render one image per gamma (crossed with --sweep-sigma)")
    p.add_argument("--out", default="render.png")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("fit-pose", help="recover a random rigid pose")
    _add_mesh_args(p)
    _add_scene_args(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--lr-decay", type=float, default=0.1,
                   help="learning rate decays to lr * lr_decay over the run")
    p.add_argument("--no-schedule", action="store_true",
                   help="keep sigma and gamma constant instead of annealing")
    p.add_argument("--init-angle", type=float, default=None, metavar="DEG",
                   help="bound the initial error (default: uniform random pose)")
    p.add_argument("--csv", default="fit_pose.csv")
    p.add_argument("--frames", default=None, help="directory for progress frames")
    p.add_argument("--frame-every", type=int, default=10)
    p.set_defaults(func=cmd_fit_pose)

    p = sub.add_parser("fit-nonrigid", help="fit vertex displacements to a target")
    _add_mesh_args(p)
    _add_scene_args(p)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--mu", type=float, default=1e-3)
    p.add_argument("--no-schedule", action="store_true")
    p.add_argument("--csv", default="fit_nonrigid.csv")
    p.add_argument("--frames", default=None)
    p.add_argument("--frame-every", type=int, default=10)
    p.add_argument("--out-obj", default="fitted.obj")
    p.set_defaults(func=cmd_fit_nonrigid)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_scene_args(p)
    p.add_argument("--scenes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-6, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--max-coords", type=int, default=24,
                   help="coordinates probed per parameter block")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="batch pose-recovery trials")
    _add_mesh_args(p)
    _add_scene_args(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--schedule", choices=["on", "off"], default="on")
    p.add_argument("--init-angle", type=float, default=None, metavar="DEG")
    p.add_argument("--iters", type=int, default=900)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--lr-decay", type=float, default=0.1,
                   help="learning rate decays to lr * lr_decay over the run")
    p.add_argument("--attempts", type=int, default=3,
                   help="restarts per trial when the fit stalls above the loss gate")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--csv", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
