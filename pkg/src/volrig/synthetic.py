"""Procedural articulated test scenes with an exact volumetric oracle.

Scenes are capsule-limb chains: a bone skeleton, a skinned capsule template
mesh, and an analytic density/color field rigidly attached to each bone.
The analytic field can be evaluated exactly at any posed point, so renders
of it serve as ground truth for fitting and for renderer unit tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

from .field import BoundingBox, FactorizedField, GridDims
from .raymarch import Camera, RenderConfig, composite, generate_rays, ray_box, sample_ray
from .skinning import (Pose, Skeleton, SkinnedTemplate, axis_angle_to_quat,
                       bone_affines, quat_mul)


def _smoothstep(t: torch.Tensor) -> torch.Tensor:
    t = t.clamp(0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass
class CapsulePrimitive:
    """Analytic density capsule rigidly attached to one bone (canonical frame)."""

    bone: int
    a: torch.Tensor        # canonical segment start
    b: torch.Tensor        # canonical segment end
    r_in: float            # full-density core radius
    r_out: float           # density reaches zero at this radius
    color: torch.Tensor    # [3]
    sigma_max: float

    def density_profile(self, d: torch.Tensor) -> torch.Tensor:
        return self.sigma_max * _smoothstep((self.r_out - d) / (self.r_out - self.r_in))

    def distance(self, pts: torch.Tensor) -> torch.Tensor:
        ab = (self.b - self.a).to(pts.dtype)
        denom = float(ab.dot(ab))
        rel = pts - self.a.to(pts.dtype)
        if denom < 1e-18:
            return torch.linalg.norm(rel, dim=-1)
        t = (rel @ ab / denom).clamp(0.0, 1.0)
        return torch.linalg.norm(rel - t.unsqueeze(-1) * ab, dim=-1)


class AnalyticField:
    """Union of posed capsules; evaluable exactly at any world point."""

    def __init__(self, skeleton: Skeleton, primitives: List[CapsulePrimitive]):
        self.skeleton = skeleton
        self.primitives = primitives

    def sample_posed(self, pts: torch.Tensor, pose: Pose):
        """(density [P], color [P, 3]) of the posed field at world points."""
        aff = bone_affines(self.skeleton, pose)
        inv_lin = aff.linear.transpose(-1, -2)  # rigid: R^T
        inv_tr = -torch.einsum("bij,bj->bi", inv_lin, aff.translation)
        sigmas = []
        for prim in self.primitives:
            local = pts @ inv_lin[prim.bone].T.to(pts.dtype) + inv_tr[prim.bone].to(pts.dtype)
            sigmas.append(prim.density_profile(prim.distance(local)))
        stack = torch.stack(sigmas, dim=0)            # [K, P]
        sigma = stack.max(dim=0).values
        wsum = stack.sum(dim=0).clamp_min(1e-12)
        colors = torch.stack([p.color.to(pts.dtype) for p in self.primitives])
        color = (stack.unsqueeze(-1) * colors[:, None, :]).sum(dim=0) / wsum.unsqueeze(-1)
        return sigma, color

    def sample_canonical(self, pts: torch.Tensor):
        pose = Pose.identity(self.skeleton.bone_count)
        return self.sample_posed(pts, pose)


@dataclass
class SyntheticScene:
    skeleton: Skeleton
    template: SkinnedTemplate
    analytic: AnalyticField
    frame_poses: List[Pose]
    cameras: List[Camera]
    image_size: int
    seed: int
    canonical_bbox: BoundingBox

    @property
    def frame_count(self) -> int:
        return len(self.frame_poses)

    def posed_bbox(self, pose: Pose) -> BoundingBox:
        aff = bone_affines(self.skeleton, pose)
        pts = []
        for prim in self.analytic.primitives:
            for p in (prim.a, prim.b):
                q = aff.linear[prim.bone] @ p + aff.translation[prim.bone]
                pts.append(q)
        pts = torch.stack(pts)
        pad = max(p.r_out for p in self.analytic.primitives) + 0.05
        return BoundingBox(pts.min(dim=0).values - pad, pts.max(dim=0).values + pad)


# -- mesh helpers ---------------------------------------------------------------

def capsule_mesh(a, b, radius, n_seg=10, n_rings=4, n_cap=3):
    """Triangle mesh of a capsule around segment (a, b): a tube of n_rings
    cross-sections plus hemispherical caps. Returns (verts [N,3], faces [M,3])."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    axis = b - a
    length = np.linalg.norm(axis)
    z = axis / length if length > 1e-12 else np.array([1.0, 0.0, 0.0])
    # orthonormal frame
    up = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(z, up)
    u /= np.linalg.norm(u)
    v = np.cross(z, u)

    rings = []
    # bottom cap rings (excluding pole), tube rings, top cap rings
    for i in range(n_cap, 0, -1):
        phi = 0.5 * math.pi * i / (n_cap + 1)
        rings.append((a - z * radius * math.sin(phi), radius * math.cos(phi)))
    for i in range(n_rings):
        t = i / (n_rings - 1) if n_rings > 1 else 0.5
        rings.append((a + axis * t, radius))
    for i in range(1, n_cap + 1):
        phi = 0.5 * math.pi * i / (n_cap + 1)
        rings.append((b + z * radius * math.sin(phi), radius * math.cos(phi)))

    verts = [a - z * radius]
    for center, r in rings:
        for k in range(n_seg):
            ang = 2.0 * math.pi * k / n_seg
            verts.append(center + r * (math.cos(ang) * u + math.sin(ang) * v))
    verts.append(b + z * radius)
    verts = np.asarray(verts)

    faces = []
    bottom = 0
    top = len(verts) - 1
    first = 1
    for k in range(n_seg):
        faces.append([bottom, first + k, first + (k + 1) % n_seg])
    n_ring_total = len(rings)
    for i in range(n_ring_total - 1):
        r0 = first + i * n_seg
        r1 = first + (i + 1) * n_seg
        for k in range(n_seg):
            k1 = (k + 1) % n_seg
            faces.append([r0 + k, r1 + k, r1 + k1])
            faces.append([r0 + k, r1 + k1, r0 + k1])
    last = first + (n_ring_total - 1) * n_seg
    for k in range(n_seg):
        faces.append([top, last + (k + 1) % n_seg, last + k])
    return verts, np.asarray(faces, dtype=np.int64)


def skin_weights_from_segments(verts: np.ndarray, segments, blend=0.08, k=4):
    """Soft weights from distance to each bone segment (Gaussian falloff),
    truncated to the top-k bones and renormalized."""
    n = verts.shape[0]
    b = len(segments)
    d = np.zeros((n, b))
    for j, (a, bb) in enumerate(segments):
        a = np.asarray(a, dtype=np.float64)
        bb = np.asarray(bb, dtype=np.float64)
        ab = bb - a
        denom = float(ab @ ab)
        rel = verts - a
        if denom < 1e-18:
            d[:, j] = np.linalg.norm(rel, axis=1)
        else:
            t = np.clip(rel @ ab / denom, 0.0, 1.0)
            d[:, j] = np.linalg.norm(rel - t[:, None] * ab, axis=1)
    w = np.exp(-((d / blend) ** 2))
    w = np.maximum(w, 1e-12)
    k = min(k, b)
    order = np.argsort(-w, axis=1)[:, :k]
    topw = np.take_along_axis(w, order, axis=1)
    topw /= topw.sum(axis=1, keepdims=True)
    if k < 4:
        pad_i = np.zeros((n, 4 - k), dtype=np.int64)
        pad_w = np.zeros((n, 4 - k))
        order = np.concatenate([order, pad_i], axis=1)
        topw = np.concatenate([topw, pad_w], axis=1)
    return order, topw


# -- scene construction ----------------------------------------------------------

BONE_COLORS = np.array([
    [0.85, 0.25, 0.20],
    [0.20, 0.55, 0.85],
    [0.25, 0.75, 0.30],
    [0.90, 0.75, 0.15],
    [0.65, 0.30, 0.80],
    [0.20, 0.75, 0.70],
    [0.90, 0.45, 0.60],
    [0.55, 0.55, 0.55],
])


def make_scene(bones: int = 2, frames: int = 16, image_size: int = 200,
               seed: int = 0, max_bend_deg: float = 90.0) -> SyntheticScene:
    """Deterministic capsule-chain scene.

    Bones form a chain along +X; every non-root bone sweeps its bend angle
    monotonically from 0 to max_bend_deg (with a per-bone phase drawn from
    the seed) over the frames. Cameras orbit the subject.
    """
    if not (1 <= bones <= 8):
        raise ValueError("bones must be in 1..8")
    rng = np.random.default_rng(seed)
    length = 0.5
    radius = 0.11
    shell = 0.05

    parents = np.array([-1] + list(range(bones - 1)), dtype=np.int64)
    offsets = np.zeros((bones, 3))
    offsets[1:, 0] = length
    skeleton = Skeleton(parents, torch.as_tensor(offsets))

    # canonical capsule per bone, along +X from its joint
    prims = []
    segments = []
    for b in range(bones):
        a = np.array([b * length, 0.0, 0.0])
        c = np.array([(b + 1) * length, 0.0, 0.0])
        segments.append((a, c))
        prims.append(CapsulePrimitive(
            bone=b,
            a=torch.as_tensor(a), b=torch.as_tensor(c),
            r_in=radius - shell, r_out=radius + shell,
            color=torch.as_tensor(BONE_COLORS[b % len(BONE_COLORS)]),
            sigma_max=30.0 / radius,
        ))
    analytic = AnalyticField(skeleton, prims)

    # skinned template: one capsule mesh per bone, blended weights near joints
    all_v = []
    all_f = []
    base = 0
    for (a, c) in segments:
        v, f = capsule_mesh(a, c, radius + 0.5 * shell, n_seg=12, n_rings=5)
        all_v.append(v)
        all_f.append(f + base)
        base += v.shape[0]
    verts = np.concatenate(all_v)
    faces = np.concatenate(all_f)
    widx, wval = skin_weights_from_segments(verts, segments, blend=0.35 * length)
    template = SkinnedTemplate(torch.as_tensor(verts), faces, widx, torch.as_tensor(wval))

    # frame poses: monotone bend sweep about Z per non-root bone
    frame_poses = []
    phases = rng.uniform(0.7, 1.0, size=bones)
    for fidx in range(frames):
        t = fidx / max(frames - 1, 1)
        aa = np.zeros((bones, 3))
        for b in range(1, bones):
            sign = 1.0 if b % 2 == 1 else -1.0
            aa[b, 2] = sign * math.radians(max_bend_deg) * t * phases[b]
        frame_poses.append(Pose.from_axis_angle(torch.as_tensor(aa), torch.zeros(3)))

    # canonical bbox: template bounds plus the inverse-warp shell
    pad = template.default_tau() + shell
    vmin = verts.min(axis=0) - pad
    vmax = verts.max(axis=0) + pad
    canonical_bbox = BoundingBox(torch.as_tensor(vmin), torch.as_tensor(vmax))

    # orbit cameras around the mid-sweep subject
    center = np.array([0.5 * bones * length, -0.15 * bones * length, 0.0])
    orbit_r = 2.2 * max(1.0, 0.75 * bones * length)
    cameras = []
    for fidx in range(frames):
        az = 2.0 * math.pi * fidx / max(frames, 1)
        el = math.radians(12.0 * math.sin(2.0 * az))
        cameras.append(look_at_camera(
            eye=center + orbit_r * np.array([math.cos(el) * math.cos(az),
                                             math.cos(el) * math.sin(az),
                                             math.sin(el)]),
            target=center, image_size=image_size))
    return SyntheticScene(skeleton, template, analytic, frame_poses, cameras,
                          image_size, seed, canonical_bbox)


def look_at_camera(eye, target, image_size: int, up=(0.0, 0.0, 1.0),
                   focal: Optional[float] = None) -> Camera:
    """World-to-camera pinhole looking from eye to target (+Z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    if np.linalg.norm(right) < 1e-9:
        upv = np.array([0.0, 1.0, 0.0])
        right = np.cross(fwd, upv)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    r = np.stack([right, down, fwd])  # rows: camera x, y, z in world
    t = -r @ eye
    f = focal if focal is not None else 1.1 * image_size
    return Camera(fx=f, fy=f, cx=(image_size - 1) / 2.0, cy=(image_size - 1) / 2.0,
                  rotation=torch.as_tensor(r), translation=torch.as_tensor(t),
                  width=image_size, height=image_size)


def render_ground_truth(scene: SyntheticScene, frame: int,
                        camera: Optional[Camera] = None, n_samples: int = 512,
                        pose: Optional[Pose] = None, chunk: int = 16384):
    """Exact emission-absorption render of the analytic posed field.

    Returns (image [H, W, 3], mask [H, W] bool, depth [H, W]); mask is the
    analytic opacity thresholded at 0.5.
    """
    if pose is None:
        pose = scene.frame_poses[frame]
    if camera is None:
        camera = scene.cameras[frame]
    box = scene.posed_bbox(pose)
    pixels = camera.all_pixels()
    origins, dirs = generate_rays(camera, pixels)
    colors = []
    opacities = []
    depths = []
    with torch.no_grad():
        for i in range(0, origins.shape[0], chunk):
            o = origins[i:i + chunk]
            d = dirs[i:i + chunk]
            tn, tf, hit = ray_box(o, d, box)
            c = torch.zeros(o.shape[0], 3, dtype=torch.float64)
            op = torch.zeros(o.shape[0], dtype=torch.float64)
            dp = torch.zeros(o.shape[0], dtype=torch.float64)
            if bool(hit.any()):
                hi = hit.nonzero(as_tuple=True)[0]
                ts, step = sample_ray(tn[hi], tf[hi], n_samples)
                pts = o[hi].unsqueeze(1) + d[hi].unsqueeze(1) * ts.unsqueeze(-1)
                flat = pts.reshape(-1, 3)
                sig, col = scene.analytic.sample_posed(flat, pose)
                cc, oo, dd, _ = composite(sig.reshape(ts.shape),
                                          col.reshape(*ts.shape, 3), step, ts)
                c[hi] = cc
                op[hi] = oo
                dp[hi] = dd
            colors.append(c)
            opacities.append(op)
            depths.append(dp)
    h, w = camera.height, camera.width
    image = torch.cat(colors).reshape(h, w, 3).numpy()
    opacity = torch.cat(opacities).reshape(h, w).numpy()
    depth = torch.cat(depths).reshape(h, w).numpy()
    mask = opacity > 0.5
    return image, mask, depth


# -- sphere phantom ---------------------------------------------------------------

@dataclass
class SpherePhantom:
    field: FactorizedField
    iso_radius: float     # analytic radius of the sigma*step = 0.5 surface
    center: np.ndarray


def sphere_phantom_field(dims: GridDims = GridDims(64, 64, 64),
                         gain: float = 50.0, amp: float = 20.0,
                         floor: float = 4.0, width: float = 0.35) -> SpherePhantom:
    """A solid-ball field that is exactly representable by the factorization.

    The pre-activation channel is a separable Gaussian minus a constant:
    raw(p) = amp * exp(-|p|^2 / (2 width^2)) - floor, built from one
    (plane_yx, line_z) pair plus a constant (plane_yz, line_x) pair. The
    sigma * (1/gain) = 0.5 iso-surface is an analytic sphere.
    """
    bbox = BoundingBox(torch.tensor([-1.0, -1.0, -1.0]), torch.tensor([1.0, 1.0, 1.0]))
    f = FactorizedField(dims, bbox, r_sigma=2, r_c=1, gain=gain, dtype=torch.float64)
    xs = torch.linspace(-1.0, 1.0, dims.w, dtype=torch.float64)
    ys = torch.linspace(-1.0, 1.0, dims.h, dtype=torch.float64)
    zs = torch.linspace(-1.0, 1.0, dims.d, dtype=torch.float64)
    g2 = lambda a, b: torch.exp(-(a[:, None] ** 2 + b[None, :] ** 2) / (2 * width ** 2))
    with torch.no_grad():
        f.density.plane_yx[0] = amp * g2(ys, xs)
        f.density.line_z[0] = torch.exp(-zs ** 2 / (2 * width ** 2))
        f.density.plane_yz[1] = -floor
        f.density.line_x[1] = 1.0
        # flat mid-gray color
        for g in f.color:
            g.plane_yx.zero_()
    # sigma/gain = 0.5  =>  raw = log(exp(0.5 * gain) - 1) / gain
    raw_iso = math.log(math.expm1(0.5 * gain)) / gain
    r = width * math.sqrt(2.0 * math.log(amp / (floor + raw_iso)))
    return SpherePhantom(f, r, np.zeros(3))
