"""Command-line pipeline: synth -> fit -> render / mesh / render-rt -> export.

Every command validates its inputs before writing anything, exits 0 on
success, and prints a single-line `error: ...` to stderr otherwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch


class CliError(RuntimeError):
    pass


# -- config files -----------------------------------------------------------------

def parse_config_file(path) -> dict:
    """`key = value` lines; '#' comments; values parsed as JSON scalars."""
    if not os.path.exists(path):
        raise CliError(f"config file not found: {path}")
    out = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            try:
                out[key] = json.loads(val)
            except json.JSONDecodeError:
                out[key] = val
    return out


def build_train_config(file_cfg: dict, overrides: dict):
    from .training import TrainConfig
    cfg = dict(file_cfg)
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    valid = set(TrainConfig.__dataclass_fields__)
    unknown = set(cfg) - valid
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for k in ("upsample_iters", "background"):
        if k in cfg and isinstance(cfg[k], list):
            cfg[k] = tuple(cfg[k])
    try:
        return TrainConfig(**cfg)
    except (TypeError, ValueError) as e:
        raise CliError(f"invalid config: {e}")


def _parse_iter_list(spec_str):
    if spec_str is None:
        return None
    spec_str = spec_str.strip()
    if not spec_str:
        return ()
    try:
        return tuple(int(x) for x in spec_str.split(","))
    except ValueError:
        raise CliError(f"bad --upsample-iters: {spec_str}")


def _require(path, what):
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}")
    return path


def _load_container(path):
    from . import assets
    _require(path, "checkpoint")
    try:
        return assets.load(path)
    except assets.AssetError as e:
        raise CliError(f"{path}: {e}")


def _camera_arg(spec_str, container):
    """--camera is either a JSON camera file or 'orbit:AZDEG[,ELDEG[,SIZE]]'."""
    from .dataset import _camera_from_json
    from .synthetic import look_at_camera
    if spec_str.startswith("orbit:"):
        parts = spec_str[len("orbit:"):].split(",")
        try:
            az = float(parts[0])
            el = float(parts[1]) if len(parts) > 1 else 0.0
            size = int(parts[2]) if len(parts) > 2 else 512
        except (ValueError, IndexError):
            raise CliError(f"bad --camera spec: {spec_str}")
        bbox = container.field.bbox
        center = ((bbox.min + bbox.max) * 0.5).numpy()
        r = 1.8 * bbox.diagonal
        import math
        eye = center + r * np.array([
            math.cos(math.radians(el)) * math.cos(math.radians(az)),
            math.cos(math.radians(el)) * math.sin(math.radians(az)),
            math.sin(math.radians(el))])
        return look_at_camera(eye, center, size)
    _require(spec_str, "camera file")
    with open(spec_str) as f:
        return _camera_from_json(json.load(f))


def _pose_arg(args, container):
    if args.frame is not None:
        if not (0 <= args.frame < len(container.animation)):
            raise CliError(f"--frame {args.frame} outside animation "
                           f"of {len(container.animation)} frames")
        return container.animation[args.frame]
    if args.pose is not None:
        from .dataset import _pose_from_json
        _require(args.pose, "pose file")
        with open(args.pose) as f:
            return _pose_from_json(json.load(f))
    from .skinning import Pose
    return Pose.identity(container.skeleton.bone_count)


def _template_of(container):
    from .dataset import rigged_mesh_to_template
    if container.template is None:
        raise CliError("checkpoint has no template section")
    return rigged_mesh_to_template(container.template)


def _mesh_of(container):
    from .dataset import rigged_mesh_to_template
    if container.mesh is None:
        raise CliError("no mesh section: run `volrig mesh` first")
    return rigged_mesh_to_template(container.mesh)


# -- commands ----------------------------------------------------------------------

def cmd_synth(args):
    from .dataset import Frame, write_dataset
    from .synthetic import make_scene, render_ground_truth
    scene = make_scene(bones=args.bones, frames=args.frames,
                       image_size=args.size, seed=args.seed)
    frames = []
    for f in range(scene.frame_count):
        img, mask, _ = render_ground_truth(scene, f, n_samples=args.gt_samples)
        frames.append(Frame(img, mask, scene.cameras[f], scene.frame_poses[f]))
    write_dataset(args.out, frames, scene.skeleton, scene.template)
    print(f"wrote {scene.frame_count} frames to {args.out}")


def cmd_fit(args):
    from . import assets
    from .dataset import load_dataset, template_to_rigged_mesh
    from .training import Trainer, write_log
    ds = load_dataset(_require(args.data, "dataset"))
    cfg = build_train_config(
        parse_config_file(args.config) if args.config else {},
        {"epochs": args.epochs, "iters_per_epoch": args.iters_per_epoch,
         "seed": args.seed, "n_samples": args.n_samples,
         "start_voxels": args.start_voxels, "end_voxels": args.end_voxels,
         "upsample_iters": _parse_iter_list(args.upsample_iters)})
    trainer = Trainer(ds, cfg)

    def progress(report):
        if report.iteration % args.log_every == 0:
            print(f"iter {report.iteration}: rgb {report.l_rgb:.5f} "
                  f"sparse {report.l_sparse:.5f} total {report.total:.5f}")

    trainer.fit(progress=progress)
    refined = trainer.pose_refine.refined_poses([f.pose for f in ds.frames])
    container = assets.AssetContainer(
        field=trainer.field.detach_clone(),
        skeleton=ds.skeleton,
        animation=refined,
        tau=trainer.tau,
        template=template_to_rigged_mesh(ds.template),
        meta={"iterations": trainer.iteration, "seed": cfg.seed,
              "n_local": 16, "half_width": trainer.tau / 2.0,
              "background": list(cfg.background)},
        opt_state=trainer.optimizer_state_blob() if args.save_opt_state else None)
    assets.export(container, args.out)
    if args.log:
        write_log(args.log, trainer.log)
    print(f"wrote checkpoint {args.out} after {trainer.iteration} iterations")


def cmd_render(args):
    from .raymarch import RenderConfig, render_deformed, write_png, write_depth
    container = _load_container(args.checkpoint)
    template = _template_of(container)
    camera = _camera_arg(args.camera, container)
    pose = _pose_arg(args, container)
    cfg = RenderConfig(n_samples=args.n_samples, tau=container.tau,
                       background=tuple(container.meta.get("background", (0, 0, 0))))
    out = render_deformed(container.field, template, container.skeleton,
                          pose, camera, cfg)
    write_png(args.out, out.color)
    if args.depth_out:
        write_depth(args.depth_out, out.depth)
    print(f"wrote {args.out}")


def cmd_mesh(args):
    from . import assets
    from .meshing import extract_rigged_mesh
    container = _load_container(args.checkpoint)
    template = _template_of(container)
    mesh = extract_rigged_mesh(container.field, template, n_views=args.views,
                               resolution=args.resolution,
                               target_faces=args.faces)
    container.mesh = assets.RiggedMesh(mesh.vertices, mesh.faces,
                                       mesh.bone_indices, mesh.bone_weights)
    out = args.out or args.checkpoint
    assets.export(container, out)
    if args.obj:
        assets.write_obj(args.obj, mesh.vertices, mesh.faces)
    print(f"wrote {out} with a {mesh.face_count}-face mesh section")


def cmd_render_rt(args):
    from .rasterrender import LocalMarchConfig, render_realtime
    from .raymarch import write_png
    container = _load_container(args.checkpoint)
    mesh = _mesh_of(container)
    camera = _camera_arg(args.camera, container)
    pose = _pose_arg(args, container)
    cfg = LocalMarchConfig(
        n_local=args.n_local,
        half_width=container.meta.get("half_width"),
        background=tuple(container.meta.get("background", (0, 0, 0))))
    out = render_realtime(container.field, mesh, container.skeleton,
                          pose, camera, cfg)
    write_png(args.out, out.color)
    print(f"wrote {args.out}")


def cmd_export(args):
    from . import assets
    container = _load_container(args.checkpoint)
    if container.mesh is None:
        raise CliError("no mesh section: run `volrig mesh` before export")
    container.opt_state = None   # viewer asset carries no training state
    assets.export(container, args.out)
    print(f"wrote viewer asset {args.out}")


def cmd_bench(args):
    from .rasterrender import LocalMarchConfig, bench
    from .raymarch import RenderConfig
    container = _load_container(args.asset)
    mesh = _mesh_of(container)
    camera = _camera_arg(f"orbit:30,10,{args.resolution}", container)
    poses = container.animation or None
    if not poses:
        from .skinning import Pose
        poses = [Pose.identity(container.skeleton.bone_count)]
    cfg = LocalMarchConfig(n_local=args.n_local,
                           half_width=container.meta.get("half_width"))
    report = bench(container.field, mesh, container.skeleton, poses, camera,
                   cfg, RenderConfig(tau=container.tau), frames=args.frames)
    print(report.text())
    if args.json_out:
        with open(args.json_out, "w") as f:
            json.dump(report.record(), f, indent=1)


def cmd_info(args):
    from . import assets
    container = _load_container(args.asset)
    f = container.field
    print(f"field: {f.dims.w} x {f.dims.h} x {f.dims.d} voxels (W x H x D), "
          f"R_sigma={f.r_sigma} R_c={f.r_c} gain={f.gain:.6g}")
    print(f"param_count: {f.param_count()}")
    print(f"bbox: min {f.bbox.min.tolist()} max {f.bbox.max.tolist()}")
    print(f"tau: {container.tau:.6g}")
    print(f"skeleton: {container.skeleton.bone_count} bones")
    print(f"animation: {len(container.animation)} frames")
    for name, attr in (("mesh", container.mesh), ("template", container.template)):
        if attr is not None:
            print(f"{name}: {attr.vertices.shape[0]} vertices, "
                  f"{attr.faces.shape[0]} faces")
    if container.meta:
        print(f"meta: {json.dumps(container.meta, sort_keys=True)}")


# -- argument parsing ----------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="volrig",
        description="Articulated volumetric capture: fit, render, extract, bench.")
    p.add_argument("--threads", type=int,
                   default=int(os.environ.get("VOLRIG_THREADS", "0")),
                   help="worker thread cap (0 = library default)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic capsule dataset")
    s.add_argument("--bones", type=int, default=2)
    s.add_argument("--frames", type=int, default=16)
    s.add_argument("--size", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gt-samples", type=int, default=512)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("fit", help="fit the factorized field to a dataset")
    s.add_argument("--data", required=True)
    s.add_argument("--config", help="key = value config file")
    s.add_argument("--epochs", type=int)
    s.add_argument("--iters-per-epoch", type=int, dest="iters_per_epoch")
    s.add_argument("--seed", type=int)
    s.add_argument("--n-samples", type=int, dest="n_samples")
    s.add_argument("--start-voxels", type=float, dest="start_voxels")
    s.add_argument("--end-voxels", type=float, dest="end_voxels")
    s.add_argument("--upsample-iters", dest="upsample_iters",
                   help="comma-separated iteration numbers ('' disables)")
    s.add_argument("--log", help="write a JSONL training log here")
    s.add_argument("--log-every", type=int, default=100)
    s.add_argument("--save-opt-state", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_fit)

    s = sub.add_parser("render", help="full-raymarch render from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frame", type=int)
    s.add_argument("--pose", help="JSON pose file (axis-angle + root)")
    s.add_argument("--camera", default="orbit:30,10,512")
    s.add_argument("--n-samples", type=int, default=128, dest="n_samples")
    s.add_argument("--depth-out")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("mesh", help="extract a rigged mesh into the checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--views", type=int, default=36)
    s.add_argument("--faces", type=int, default=15000)
    s.add_argument("--resolution", type=int, default=128)
    s.add_argument("--obj", help="also write an OBJ here")
    s.add_argument("--out", help="defaults to overwriting the checkpoint")
    s.set_defaults(fn=cmd_mesh)

    s = sub.add_parser("render-rt", help="rasterization-guided local render")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frame", type=int)
    s.add_argument("--pose")
    s.add_argument("--camera", default="orbit:30,10,512")
    s.add_argument("--n-local", type=int, default=16, dest="n_local")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_render_rt)

    s = sub.add_parser("export", help="strip training state; write viewer asset")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_export)

    s = sub.add_parser("bench", help="full vs local renderer timing")
    s.add_argument("--asset", required=True)
    s.add_argument("--resolution", type=int, default=512)
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--n-local", type=int, default=16, dest="n_local")
    s.add_argument("--json-out")
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("info", help="summarize an asset or checkpoint")
    s.add_argument("--asset", required=True)
    s.set_defaults(fn=cmd_info)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.threads > 0:
        torch.set_num_threads(args.threads)
    try:
        args.fn(args)
        return 0
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
