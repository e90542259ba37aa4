"""Emission-absorption volume rendering over the canonical or deformed field.

This is the reference renderer: it samples full ray/box intersections,
optionally pulls samples back to canonical space through the skinning
machinery, and composites with the standard transmittance recursion
T_0 = 1, T_{i+1} = T_i * exp(-step * sigma_i).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import torch

from .field import BoundingBox, FactorizedField
from .skinning import (Pose, PosedMesh, Skeleton, SkinnedTemplate,
                       NearestVertexIndex, bone_affines, build_index,
                       forward_kinematics, inverse_warp, pose_mesh)


class RenderError(ValueError):
    pass


@dataclass
class Camera:
    """Pinhole camera. Extrinsics are world-to-camera with +Z forward;
    pixel (cx, cy) looks down the optical axis."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: torch.Tensor    # [3, 3] world-to-camera
    translation: torch.Tensor  # [3]
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise RenderError("focal lengths must be positive")
        if not torch.is_tensor(self.rotation):
            self.rotation = torch.as_tensor(self.rotation, dtype=torch.float64)
        if not torch.is_tensor(self.translation):
            self.translation = torch.as_tensor(self.translation, dtype=torch.float64)
        r = self.rotation.detach()
        if not bool(torch.allclose(r @ r.transpose(0, 1),
                                   torch.eye(3, dtype=r.dtype), atol=1e-5)):
            raise RenderError("camera rotation must be orthonormal")

    @property
    def center(self) -> torch.Tensor:
        return -self.rotation.transpose(0, 1) @ self.translation

    def project(self, pts: torch.Tensor):
        """World points [P, 3] -> (pixels [P, 2], camera-space depth [P])."""
        cam = pts @ self.rotation.T.to(pts.dtype) + self.translation.to(pts.dtype)
        z = cam[:, 2]
        u = self.fx * cam[:, 0] / z + self.cx
        v = self.fy * cam[:, 1] / z + self.cy
        return torch.stack([u, v], dim=-1), z

    def all_pixels(self) -> torch.Tensor:
        ys, xs = torch.meshgrid(torch.arange(self.height, dtype=torch.float64),
                                torch.arange(self.width, dtype=torch.float64),
                                indexing="ij")
        return torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1)


def generate_rays(camera: Camera, pixels: torch.Tensor):
    """Rays through pixel centers. pixels [P, 2] (u, v) -> origins, unit dirs."""
    pix = pixels.to(torch.float64)
    d_cam = torch.stack([
        (pix[:, 0] - camera.cx) / camera.fx,
        (pix[:, 1] - camera.cy) / camera.fy,
        torch.ones(pix.shape[0], dtype=torch.float64),
    ], dim=-1)
    d_world = d_cam @ camera.rotation.to(torch.float64)  # R^T applied per row
    d_world = d_world / torch.linalg.norm(d_world, dim=-1, keepdim=True)
    origins = camera.center.to(torch.float64).expand_as(d_world)
    return origins, d_world


def ray_box(origins: torch.Tensor, dirs: torch.Tensor, bbox: BoundingBox):
    """Slab intersection. Returns (t_near [P], t_far [P], hit [P] bool);
    t_near is clamped to >= 0."""
    lo = bbox.min.to(origins.dtype)
    hi = bbox.max.to(origins.dtype)
    safe = torch.where(dirs.abs() < 1e-12, torch.full_like(dirs, 1e-12), dirs)
    inv = 1.0 / safe
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    tmin = torch.minimum(t0, t1).max(dim=-1).values
    tmax = torch.maximum(t0, t1).min(dim=-1).values
    # rays parallel to a slab and outside it: force a miss
    par = dirs.abs() < 1e-12
    outside = (origins < lo) | (origins > hi)
    miss_par = (par & outside).any(dim=-1)
    tmin = tmin.clamp_min(0.0)
    hit = (tmax > tmin) & (tmax > 0) & ~miss_par
    return tmin, tmax, hit


def sample_ray(t_near: torch.Tensor, t_far: torch.Tensor, n: int,
               jitter: bool = False, generator: Optional[torch.Generator] = None):
    """Stratified samples: t_i = t_near + (i + delta_i) * step.

    delta_i = 0.5 deterministic, or Uniform[0, 1) per stratum when jittered.
    Returns (ts [P, N], step [P])."""
    if n < 1:
        raise RenderError("need at least one sample")
    step = (t_far - t_near) / n
    base = torch.arange(n, dtype=t_near.dtype)
    if jitter:
        delta = torch.rand(t_near.shape[0], n, generator=generator, dtype=t_near.dtype)
    else:
        delta = torch.full((t_near.shape[0], n), 0.5, dtype=t_near.dtype)
    ts = t_near.unsqueeze(1) + (base.unsqueeze(0) + delta) * step.unsqueeze(1)
    return ts, step


def composite(sigmas: torch.Tensor, colors: torch.Tensor, step: torch.Tensor,
              ts: Optional[torch.Tensor] = None, positions: Optional[torch.Tensor] = None):
    """Emission-absorption along each ray.

    sigmas [P, N] >= 0, colors [P, N, 3], step [P] or scalar.
    Returns (color [P, 3], opacity [P], depth [P], expected position or None).
    """
    if not torch.isfinite(sigmas).all():
        raise RenderError("NaN or infinite densities passed to composite")
    if torch.is_tensor(step) and step.dim() == 1:
        step = step.unsqueeze(1)
    tau = sigmas * step
    # exclusive prefix sum gives T_i; weights w_i = T_i - T_{i+1}
    acc = torch.cumsum(tau, dim=1)
    t_excl = torch.cat([torch.zeros_like(acc[:, :1]), acc[:, :-1]], dim=1)
    trans = torch.exp(-t_excl)
    weights = trans * (1.0 - torch.exp(-tau))
    color = (weights.unsqueeze(-1) * colors).sum(dim=1)
    opacity = 1.0 - torch.exp(-acc[:, -1])
    depth = (weights * ts).sum(dim=1) if ts is not None else torch.zeros_like(opacity)
    expected = (weights.unsqueeze(-1) * positions).sum(dim=1) if positions is not None else None
    return color, opacity, depth, expected


@dataclass
class RenderConfig:
    n_samples: int = 128
    jitter: bool = False
    background: tuple = (0.0, 0.0, 0.0)
    tau: Optional[float] = None     # inverse-warp validity threshold
    chunk: int = 65536

    def bg_tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.as_tensor(self.background, dtype=dtype)


@dataclass
class RenderOutput:
    """Full-frame renderer output (H x W images as numpy arrays)."""

    color: np.ndarray    # [H, W, 3] in [0, 1]
    depth: np.ndarray    # [H, W] world units
    opacity: np.ndarray  # [H, W] in [0, 1]


def render_rays_canonical(field: FactorizedField, origins, dirs, config: RenderConfig,
                          generator=None, want_positions=False):
    """Composite the undeformed field along the given rays (keeps autograd
    graph; used by both the public renderer and the trainer)."""
    p = origins.shape[0]
    dtype = origins.dtype
    tn, tf, hit = ray_box(origins, dirs, field.bbox)
    color = torch.zeros(p, 3, dtype=dtype)
    opacity = torch.zeros(p, dtype=dtype)
    depth = torch.zeros(p, dtype=dtype)
    expected = torch.zeros(p, 3, dtype=dtype) if want_positions else None
    if bool(hit.any()):
        hi = hit.nonzero(as_tuple=True)[0]
        ts, step = sample_ray(tn[hi], tf[hi], config.n_samples, config.jitter, generator)
        pts = origins[hi].unsqueeze(1) + dirs[hi].unsqueeze(1) * ts.unsqueeze(-1)
        flat = pts.reshape(-1, 3).to(field.dtype)
        sig = field.sample_density(flat).reshape(ts.shape).to(dtype)
        col = field.sample_color(flat).reshape(*ts.shape, 3).to(dtype)
        c, o, d, e = composite(sig, col, step, ts, pts if want_positions else None)
        color = color.index_put((hi,), c)
        opacity = opacity.index_put((hi,), o)
        depth = depth.index_put((hi,), d)
        if want_positions:
            expected = expected.index_put((hi,), e)
    bg = config.bg_tensor(dtype)
    color = color + (1.0 - opacity).unsqueeze(-1) * bg
    return color, opacity, depth, expected


def render_rays_deformed(field: FactorizedField, posed: PosedMesh,
                         index: NearestVertexIndex, tau: float,
                         origins, dirs, box: BoundingBox, config: RenderConfig,
                         generator=None, joints=None, joint_margin=None):
    """Composite the deformed field: each posed sample is inverse-warped to
    canonical space through its nearest posed vertex; samples outside the
    tau shell contribute zero density.

    `joints`/`joint_margin` optionally prefilter samples by distance to the
    posed bone segments (conservative, exactness-preserving speedup).
    """
    p = origins.shape[0]
    dtype = origins.dtype
    tn, tf, hit = ray_box(origins, dirs, box)
    color = torch.zeros(p, 3, dtype=dtype)
    opacity = torch.zeros(p, dtype=dtype)
    depth = torch.zeros(p, dtype=dtype)
    if bool(hit.any()):
        hi = hit.nonzero(as_tuple=True)[0]
        ts, step = sample_ray(tn[hi], tf[hi], config.n_samples, config.jitter, generator)
        pts = origins[hi].unsqueeze(1) + dirs[hi].unsqueeze(1) * ts.unsqueeze(-1)
        flat = pts.reshape(-1, 3)
        cand = torch.ones(flat.shape[0], dtype=torch.bool)
        if joints is not None and joint_margin is not None:
            cand = _near_segments(flat.detach(), joints, joint_margin)
        sig = torch.zeros(flat.shape[0], dtype=dtype)
        col = torch.full((flat.shape[0], 3), 0.5, dtype=dtype)
        if bool(cand.any()):
            ci = cand.nonzero(as_tuple=True)[0]
            canon, valid, _ = inverse_warp(flat[ci], posed, index, tau)
            if bool(valid.any()):
                vi = ci[valid.nonzero(as_tuple=True)[0]]
                canon_v = canon[valid].to(field.dtype)
                sig = sig.index_put((vi,), field.sample_density(canon_v).to(dtype))
                col = col.index_put((vi,), field.sample_color(canon_v).to(dtype))
        sig = sig.reshape(ts.shape)
        col = col.reshape(*ts.shape, 3)
        c, o, d, _ = composite(sig, col, step, ts)
        color = color.index_put((hi,), c)
        opacity = opacity.index_put((hi,), o)
        depth = depth.index_put((hi,), d)
    bg = config.bg_tensor(dtype)
    color = color + (1.0 - opacity).unsqueeze(-1) * bg
    return color, opacity, depth


def _near_segments(pts: torch.Tensor, segments, margin: float) -> torch.Tensor:
    """True for points within `margin` of any posed bone segment [(a, b), ...]."""
    keep = torch.zeros(pts.shape[0], dtype=torch.bool)
    for a, b in segments:
        a = a.to(pts.dtype)
        ab = (b - a).to(pts.dtype)
        denom = float(ab.dot(ab))
        if denom < 1e-18:
            d2 = ((pts - a) ** 2).sum(dim=1)
        else:
            t = ((pts - a) @ ab / denom).clamp(0.0, 1.0)
            d2 = ((pts - (a + t.unsqueeze(1) * ab)) ** 2).sum(dim=1)
        keep |= d2 <= margin * margin
    return keep


def posed_segments(skeleton: Skeleton, fk) -> list:
    """Posed (joint, child-joint) segments, one per non-root bone plus a
    degenerate root segment; used for conservative sample prefiltering."""
    joints = fk.translation.detach()
    segs = []
    for b in range(skeleton.bone_count):
        children = [c for c in range(skeleton.bone_count) if skeleton.parents[c] == b]
        if children:
            for c in children:
                segs.append((joints[b], joints[c]))
        else:
            # leaf bone: extend by its own offset length along parent direction
            segs.append((joints[b], joints[b]))
    return segs


class DeformedRenderer:
    """Bundles the per-pose machinery (FK, posed mesh, NN index) so several
    renders of the same pose reuse it."""

    def __init__(self, field: FactorizedField, template: SkinnedTemplate,
                 skeleton: Skeleton, pose: Pose, tau: Optional[float] = None,
                 prefilter: bool = True):
        self.field = field
        self.template = template
        self.skeleton = skeleton
        self.pose = pose
        self.tau = template.default_tau() if tau is None else float(tau)
        self.affines = bone_affines(skeleton, pose)
        self.posed = pose_mesh(template, self.affines)
        self.index = build_index(self.posed.vertices)
        v = self.posed.vertices.detach()
        pad = self.tau
        self.box = BoundingBox(v.min(dim=0).values - pad, v.max(dim=0).values + pad)
        if prefilter:
            fk = forward_kinematics(skeleton, pose)
            self.segments = posed_segments(skeleton, fk)
            dmin = None
            for a, b in self.segments:
                ab = b - a
                denom = float(ab.dot(ab))
                if denom < 1e-18:
                    d = torch.linalg.norm(v - a, dim=1)
                else:
                    t = ((v - a) @ ab / denom).clamp(0, 1)
                    d = torch.linalg.norm(v - (a + t.unsqueeze(1) * ab), dim=1)
                dmin = d if dmin is None else torch.minimum(dmin, d)
            self.margin = float(dmin.max()) + self.tau + 1e-6
        else:
            self.segments = None
            self.margin = None

    def render_rays(self, origins, dirs, config: RenderConfig, generator=None):
        tau = self.tau if config.tau is None else config.tau
        return render_rays_deformed(self.field, self.posed, self.index, tau,
                                    origins, dirs, self.box, config,
                                    generator=generator, joints=self.segments,
                                    joint_margin=self.margin)


def render_deformed(field: FactorizedField, template: SkinnedTemplate,
                    skeleton: Skeleton, pose: Pose, camera: Camera,
                    config: RenderConfig, pixels: Optional[torch.Tensor] = None) -> RenderOutput:
    """Full-frame (or pixel-subset) deformed render; evaluation mode, no grad."""
    renderer = DeformedRenderer(field, template, skeleton, pose, tau=config.tau)
    return _render_frame(renderer.render_rays, camera, config, pixels)


def render_canonical(field: FactorizedField, camera: Camera, config: RenderConfig,
                     pixels: Optional[torch.Tensor] = None) -> RenderOutput:
    """Full-frame undeformed render over the field's own bounding box."""
    def fn(origins, dirs, cfg, generator=None):
        c, o, d, _ = render_rays_canonical(field, origins, dirs, cfg, generator)
        return c, o, d
    return _render_frame(fn, camera, config, pixels)


def _render_frame(ray_fn, camera: Camera, config: RenderConfig,
                  pixels: Optional[torch.Tensor]) -> RenderOutput:
    if pixels is None:
        pixels = camera.all_pixels()
        shape = (camera.height, camera.width)
    else:
        shape = (pixels.shape[0],)
    origins, dirs = generate_rays(camera, pixels)
    cs, os_, ds = [], [], []
    with torch.no_grad():
        for i in range(0, origins.shape[0], config.chunk):
            c, o, d = ray_fn(origins[i:i + config.chunk], dirs[i:i + config.chunk], config)
            cs.append(c)
            os_.append(o)
            ds.append(d)
    color = torch.cat(cs).reshape(*shape, 3).numpy()
    opacity = torch.cat(os_).reshape(shape).numpy()
    depth = torch.cat(ds).reshape(shape).numpy()
    return RenderOutput(color.astype(np.float64), depth.astype(np.float64),
                        opacity.astype(np.float64))


# -- image / depth file formats -------------------------------------------------

DEPTH_MAGIC = b"DPTH"


def write_png(path, image: np.ndarray):
    """8-bit PNG from a float image in [0, 1] ([H, W] or [H, W, 3])."""
    from PIL import Image
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    arr = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_png(path) -> np.ndarray:
    from PIL import Image
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def write_depth(path, depth: np.ndarray):
    """Little-endian f32 row-major with a "DPTH" + width/height header."""
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(depth.tobytes())


def read_depth(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != DEPTH_MAGIC:
        raise RenderError(f"{path}: not a depth file")
    w, h = struct.unpack_from("<II", data, 4)
    body = np.frombuffer(data, dtype="<f4", count=w * h, offset=12)
    return body.reshape(h, w).astype(np.float64)
