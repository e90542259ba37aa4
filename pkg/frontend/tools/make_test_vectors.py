"""Generate the cross-component test fixtures consumed by the viewer tests.

Everything here is produced by the reference (Python) implementation so the
TypeScript side can be checked against it without re-deriving anything:

  testdata/golden.dvha      small but fully-populated asset container
  testdata/checksums.json   FNV-1a checksum of every factor tensor's f32 bytes
  testdata/fk_vectors.json  skeletons + poses with expected bone affines
  testdata/golden_rt.png    reference real-time render of the golden asset
  testdata/golden_rt.json   camera / render parameters used for that PNG

Run from the repository root:  python3 frontend/tools/make_test_vectors.py
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

ROOT = Path(__file__).resolve().parents[2]
sys.path.insert(0, str(ROOT / "src"))

from volrig import assets  # noqa: E402
from volrig.field import BoundingBox, FactorizedField, GridDims  # noqa: E402
from volrig.rasterrender import LocalMarchConfig, render_realtime  # noqa: E402
from volrig.raymarch import write_png  # noqa: E402
from volrig.skinning import (Pose, Skeleton, SkinnedTemplate,  # noqa: E402
                             bone_affines)
from volrig.synthetic import (capsule_mesh, look_at_camera,  # noqa: E402
                              sphere_phantom_field)

OUT = ROOT / "frontend" / "testdata"


def fnv1a(data: bytes) -> str:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return f"{h:08x}"


def tensor_checksum(t: torch.Tensor) -> str:
    return fnv1a(np.ascontiguousarray(t.detach().numpy(), dtype="<f4").tobytes())


def build_golden() -> assets.AssetContainer:
    """Sphere-phantom field + a rigged sphere mesh at the iso surface: small,
    deterministic, and renderable by both the primary real-time path and the
    viewer."""
    phantom = sphere_phantom_field()
    field = phantom.field.detach_clone()
    r = phantom.iso_radius
    verts, faces = capsule_mesh(np.array([-1e-3, 0.0, 0.0]),
                                np.array([1e-3, 0.0, 0.0]), r,
                                n_seg=24, n_rings=4, n_cap=10)
    n = verts.shape[0]
    mesh = assets.RiggedMesh(
        verts.astype(np.float32), faces.astype(np.uint32),
        np.zeros((n, 4), dtype=np.uint16),
        np.concatenate([np.ones((n, 1), np.float32),
                        np.zeros((n, 3), np.float32)], axis=1))
    skel = Skeleton(np.array([-1], dtype=np.int64),
                    torch.zeros(1, 3, dtype=torch.float64))
    # tiny rotation sweep so scrubbing has visible effect
    anim = [Pose.from_axis_angle(
        torch.tensor([[0.0, 0.0, 0.25 * k]], dtype=torch.float64),
        torch.tensor([0.05 * k, 0.0, 0.0], dtype=torch.float64))
        for k in range(4)]
    return assets.AssetContainer(
        field=field, skeleton=skel, animation=anim, tau=0.3,
        mesh=mesh, template=mesh,
        meta={"n_local": 16, "half_width": 0.15,
              "background": [0.0, 0.0, 0.0], "seed": 0})


def write_checksums(container: assets.AssetContainer) -> None:
    groups = {"density": container.field.density}
    for name, g in zip(("red", "green", "blue"), container.field.color):
        groups[name] = g
    out = {}
    for gname, g in groups.items():
        out[gname] = {
            {"plane_yx": "planeYX", "plane_yz": "planeYZ", "plane_xz": "planeXZ",
             "line_z": "lineZ", "line_x": "lineX", "line_y": "lineY"}[n]:
            tensor_checksum(t)
            for n, t in g.named_tensors()
        }
    meta = {
        "dims": {"d": container.field.dims.d, "h": container.field.dims.h,
                 "w": container.field.dims.w},
        "r_sigma": container.field.r_sigma,
        "r_c": container.field.r_c,
        "gain": container.field.gain,
        "tau": container.tau,
        "param_count": container.field.param_count(),
    }
    (OUT / "checksums.json").write_text(
        json.dumps({"meta": meta, "groups": out}, indent=1, sort_keys=True))


def fk_cases() -> list:
    """Pose/skeleton pairs with reference bone affines (3x4, row-major)."""
    cases = []

    def record(name, skel, pose):
        aff = bone_affines(skel, pose)
        m = aff.matrix34().numpy()
        cases.append({
            "name": name,
            "parents": [int(p) for p in skel.parents],
            "offsets": skel.offsets.numpy().reshape(-1).tolist(),
            "rest_axis_angle":
                skel.rest_pose.axis_angle().numpy().reshape(-1).tolist(),
            "rest_root": skel.rest_pose.root_translation.numpy().tolist(),
            "pose_axis_angle": pose.axis_angle().numpy().reshape(-1).tolist(),
            "pose_root": pose.root_translation.numpy().tolist(),
            "expected_affines": m.reshape(-1).tolist(),
        })

    chain2 = Skeleton(np.array([-1, 0], dtype=np.int64),
                      torch.tensor([[0.0, 0, 0], [1.0, 0, 0]],
                                   dtype=torch.float64))
    record("identity_2bone", chain2, Pose.identity(2))
    record("elbow_90deg", chain2, Pose.from_axis_angle(
        torch.tensor([[0.0, 0, 0], [0.0, 0, math.pi / 2]], dtype=torch.float64),
        torch.zeros(3, dtype=torch.float64)))
    record("root_twist_translate", chain2, Pose.from_axis_angle(
        torch.tensor([[0.3, -0.2, 0.7], [0.1, 0.4, -0.5]], dtype=torch.float64),
        torch.tensor([0.25, -1.5, 2.0], dtype=torch.float64)))

    tree4 = Skeleton(np.array([-1, 0, 1, 1], dtype=np.int64),
                     torch.tensor([[0.1, 0.2, 0.3], [0.5, 0, 0],
                                   [0.4, 0.1, 0], [0, -0.3, 0.2]],
                                  dtype=torch.float64))
    gen = torch.Generator().manual_seed(7)
    for k in range(3):
        aa = 0.8 * (torch.rand(4, 3, generator=gen, dtype=torch.float64) - 0.5)
        root = torch.rand(3, generator=gen, dtype=torch.float64) - 0.5
        record(f"random_tree_{k}", tree4, Pose.from_axis_angle(aa, root))

    rest = Pose.from_axis_angle(
        torch.tensor([[0.0, 0.2, 0.0], [0.3, 0.0, 0.0]], dtype=torch.float64),
        torch.tensor([0.0, 0.1, 0.0], dtype=torch.float64))
    bent = Skeleton(np.array([-1, 0], dtype=np.int64),
                    torch.tensor([[0.0, 0, 0], [1.0, 0, 0]],
                                 dtype=torch.float64), rest)
    record("nontrivial_rest_pose", bent, Pose.from_axis_angle(
        torch.tensor([[0.0, 0.2, 0.0], [0.9, 0.0, 0.0]], dtype=torch.float64),
        torch.tensor([0.0, 0.1, 0.3], dtype=torch.float64)))
    return cases


def render_golden_rt(container: assets.AssetContainer) -> None:
    """Reference render of animation frame 0 with the CLI's default orbit
    camera (az 30, el 10), the conformance target for the viewer."""
    size = 256
    bbox = container.field.bbox
    center = ((bbox.min + bbox.max) * 0.5).numpy()
    radius = 1.8 * bbox.diagonal
    az, el = math.radians(30.0), math.radians(10.0)
    eye = center + radius * np.array([
        math.cos(el) * math.cos(az),
        math.cos(el) * math.sin(az),
        math.sin(el)])
    camera = look_at_camera(eye, center, size)
    template = SkinnedTemplate(
        torch.from_numpy(container.mesh.vertices.astype(np.float64)),
        container.mesh.faces.astype(np.int64),
        container.mesh.bone_indices.astype(np.int64),
        torch.from_numpy(container.mesh.bone_weights.astype(np.float64)))
    cfg = LocalMarchConfig(n_local=int(container.meta["n_local"]),
                           half_width=float(container.meta["half_width"]),
                           background=tuple(container.meta["background"]))
    out = render_realtime(container.field, template, container.skeleton,
                          container.animation[0], camera, cfg)
    write_png(OUT / "golden_rt.png", out.color)
    (OUT / "golden_rt.json").write_text(json.dumps({
        "image_size": size,
        "azimuth_deg": 30.0,
        "elevation_deg": 10.0,
        "distance_scale": 1.8,
        "frame": 0,
        "n_local": int(container.meta["n_local"]),
        "half_width": float(container.meta["half_width"]),
        "background": container.meta["background"],
        "max_pixel_diff": 2,
    }, indent=1))


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    container = build_golden()
    assets.export(container, OUT / "golden.dvha")
    write_checksums(container)
    (OUT / "fk_vectors.json").write_text(json.dumps(fk_cases(), indent=1))
    render_golden_rt(container)
    print(f"wrote {sorted(p.name for p in OUT.iterdir())}")


if __name__ == "__main__":
    main()
