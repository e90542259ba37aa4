"""Real-time rendering path: software rasterization + local raymarching.

The posed extracted mesh is rasterized with perspective-correct barycentrics;
each covered pixel gets one inverse skinning affine interpolated from the
triangle's vertices (the single-affine-per-fragment approximation), and a
short emission-absorption march around the rasterized depth replaces the full
ray/box march.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch

from .field import FactorizedField
from .raymarch import (Camera, RenderConfig, RenderOutput, composite,
                       generate_rays, render_deformed)
from .skinning import (Pose, Skeleton, SkinnedTemplate, bone_affines,
                       pose_mesh)


class RasterError(ValueError):
    pass


@dataclass
class LocalMarchConfig:
    n_local: int = 16
    half_width: Optional[float] = None   # world units; None -> tau / 2
    background: tuple = (0.0, 0.0, 0.0)
    cull_backfaces: bool = True

    def __post_init__(self):
        if self.n_local < 1:
            raise RasterError("n_local must be >= 1")
        if self.half_width is not None and self.half_width <= 0:
            raise RasterError("half_width must be positive")


@dataclass
class Framebuffer:
    """Depth-tested fragment buffer: one front-most fragment per pixel."""

    face_id: np.ndarray       # [H, W] int64, -1 = empty
    barycentrics: np.ndarray  # [H, W, 3] perspective-correct, rows sum to 1
    depth: np.ndarray         # [H, W] camera-space z, +inf where empty

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0


def rasterize(vertices: torch.Tensor, faces: np.ndarray, camera: Camera,
              cull_backfaces: bool = True) -> Framebuffer:
    """Rasterize triangles to pixel centers.

    Fill rule: a pixel center is covered when strictly inside, or on a top or
    left edge (so edge-adjacent triangles never double-shade or gap). Depth
    test keeps the nearest fragment; ties break toward the lower face id.
    Triangles with any vertex at or behind the camera plane are dropped.
    """
    h, w = camera.height, camera.width
    fb = Framebuffer(np.full((h, w), -1, dtype=np.int64),
                     np.zeros((h, w, 3)),
                     np.full((h, w), np.inf))
    if faces.size == 0:
        return fb
    v = vertices.detach().to(torch.float64)
    pix, z = camera.project(v)
    pix = pix.numpy()
    z = z.numpy()
    faces = np.asarray(faces, dtype=np.int64)

    front = (z[faces] > 1e-9).all(axis=1)
    if cull_backfaces:
        vn = v.numpy()
        p0, p1, p2 = vn[faces[:, 0]], vn[faces[:, 1]], vn[faces[:, 2]]
        n = np.cross(p1 - p0, p2 - p0)
        to_cam = camera.center.numpy() - p0
        front &= (n * to_cam).sum(axis=1) > 0.0
    fids = np.nonzero(front)[0]
    if fids.size == 0:
        return fb

    tri = pix[faces[fids]]                      # [F, 3, 2]
    tz = z[faces[fids]]                         # [F, 3]

    # screen-space signed area; orient all triangles counterclockwise
    e = tri[:, 1] - tri[:, 0]
    g = tri[:, 2] - tri[:, 0]
    area2 = e[:, 0] * g[:, 1] - e[:, 1] * g[:, 0]
    flipped = area2 < 0
    tri[flipped] = tri[flipped][:, [0, 2, 1]]
    tz[flipped] = tz[flipped][:, [0, 2, 1]]
    area2 = np.abs(area2)
    keep = area2 > 1e-14
    fids, tri, tz, area2, flipped = (fids[keep], tri[keep], tz[keep],
                                     area2[keep], flipped[keep])
    if fids.size == 0:
        return fb

    # candidate (triangle, pixel) pairs from integer pixel bounding boxes
    x0 = np.maximum(np.ceil(tri[:, :, 0].min(axis=1) - 1e-12).astype(np.int64), 0)
    x1 = np.minimum(np.floor(tri[:, :, 0].max(axis=1) + 1e-12).astype(np.int64), w - 1)
    y0 = np.maximum(np.ceil(tri[:, :, 1].min(axis=1) - 1e-12).astype(np.int64), 0)
    y1 = np.minimum(np.floor(tri[:, :, 1].max(axis=1) + 1e-12).astype(np.int64), h - 1)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = bw * bh
    nz = counts > 0
    fsel = np.nonzero(nz)[0]
    if fsel.size == 0:
        return fb
    counts = counts[fsel]
    total = int(counts.sum())
    tri_of_pair = np.repeat(fsel, counts)
    offs = np.concatenate([[0], np.cumsum(counts)[:-1]])
    local = np.arange(total) - np.repeat(offs, counts)
    px = x0[tri_of_pair] + local % bw[tri_of_pair]
    py = y0[tri_of_pair] + local // bw[tri_of_pair]

    a = tri[tri_of_pair]     # [P, 3, 2]
    pc = np.stack([px, py], axis=-1).astype(np.float64)

    def edge_fn(p, q, r):
        return (q[:, 0] - p[:, 0]) * (r[:, 1] - p[:, 1]) \
            - (q[:, 1] - p[:, 1]) * (r[:, 0] - p[:, 0])

    # w_i is the edge function of the edge opposite vertex i (CCW order)
    w0 = edge_fn(a[:, 1], a[:, 2], pc)
    w1 = edge_fn(a[:, 2], a[:, 0], pc)
    w2 = edge_fn(a[:, 0], a[:, 1], pc)

    def top_left(p, q):
        # screen-space top-left rule with +y pointing down: a "top" edge is
        # horizontal with the triangle below it, a "left" edge goes upward
        dy = q[:, 1] - p[:, 1]
        dx = q[:, 0] - p[:, 0]
        return (dy < 0) | ((dy == 0) & (dx > 0))

    tl0 = top_left(a[:, 1], a[:, 2])
    tl1 = top_left(a[:, 2], a[:, 0])
    tl2 = top_left(a[:, 0], a[:, 1])
    inside = (((w0 > 0) | ((w0 == 0) & tl0))
              & ((w1 > 0) | ((w1 == 0) & tl1))
              & ((w2 > 0) | ((w2 == 0) & tl2)))
    if not inside.any():
        return fb

    sel = np.nonzero(inside)[0]
    tri_of_pair = tri_of_pair[sel]
    px, py = px[sel], py[sel]
    lam = np.stack([w0[sel], w1[sel], w2[sel]], axis=-1) / area2[tri_of_pair][:, None]
    zv = tz[tri_of_pair]                        # [P, 3]
    inv_z = lam / zv
    denom = inv_z.sum(axis=1)
    alpha = inv_z / denom[:, None]              # perspective-correct
    depth = 1.0 / denom

    # depth-resolve per pixel; ties to the lower face id for determinism
    pixel = py * w + px
    order = np.lexsort((fids[tri_of_pair], depth, pixel))
    pixel_sorted = pixel[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pixel_sorted[1:] != pixel_sorted[:-1]
    win = order[first]

    fb.face_id.ravel()[pixel[win]] = fids[tri_of_pair[win]]
    fb.depth.ravel()[pixel[win]] = depth[win]
    fb.barycentrics.reshape(-1, 3)[pixel[win]] = alpha[win]
    return fb


def interpolate_inverse(barycentrics: np.ndarray, face_verts: np.ndarray,
                        inverse_affines: torch.Tensor) -> torch.Tensor:
    """Per-fragment inverse affine: elementwise barycentric mix of the three
    vertex inverses (GPU vertex-attribute semantics; no re-orthonormalization).

    barycentrics [F, 3], face_verts [F, 3] vertex ids -> [F, 3, 4].
    """
    inv = inverse_affines[torch.from_numpy(face_verts)]      # [F, 3, 3, 4]
    alpha = torch.from_numpy(barycentrics).to(inv.dtype)
    return torch.einsum("fk,fkij->fij", alpha, inv)


def local_march(field: FactorizedField, origins: torch.Tensor,
                dirs: torch.Tensor, t_hit: torch.Tensor,
                inv_affine: torch.Tensor, n_local: int, half_width: float):
    """March a short segment [t_hit - s, t_hit + s] per fragment, mapping all
    samples through the fragment's single inverse affine.

    Returns (color [F, 3], residual transmittance [F]).
    """
    f = origins.shape[0]
    dtype = origins.dtype
    step_sz = 2.0 * half_width / n_local
    offs = (torch.arange(n_local, dtype=dtype) + 0.5) * step_sz - half_width
    ts = t_hit.unsqueeze(1) + offs.unsqueeze(0)               # [F, N]
    ts = ts.clamp_min(0.0)
    pts = origins.unsqueeze(1) + dirs.unsqueeze(1) * ts.unsqueeze(-1)
    inv = inv_affine.to(dtype)
    canon = torch.einsum("fij,fnj->fni", inv[:, :, :3], pts) + inv[:, :, 3].unsqueeze(1)
    flat = canon.reshape(-1, 3).to(field.dtype)
    sig = field.sample_density(flat).reshape(f, n_local).to(dtype)
    col = field.sample_color(flat).reshape(f, n_local, 3).to(dtype)
    color, opacity, _, _ = composite(sig, col, torch.full((f,), step_sz, dtype=dtype), ts)
    return color, 1.0 - opacity


def render_realtime(field: FactorizedField, mesh: SkinnedTemplate,
                    skeleton: Skeleton, pose: Pose, camera: Camera,
                    config: Optional[LocalMarchConfig] = None) -> RenderOutput:
    """Rasterization-guided deformed render.

    pose_mesh -> rasterize -> per-fragment interpolated inverse affine ->
    local march -> residual transmittance over the background.
    """
    config = config or LocalMarchConfig()
    s = config.half_width if config.half_width is not None else 0.5 * mesh.default_tau()
    aff = bone_affines(skeleton, pose)
    posed = pose_mesh(mesh, aff)
    fb = rasterize(posed.vertices, mesh.faces, camera, config.cull_backfaces)

    h, w = camera.height, camera.width
    bg = np.asarray(config.background, dtype=np.float64)
    color = np.tile(bg, (h, w, 1))
    depth = np.zeros((h, w))
    opacity = np.zeros((h, w))
    ys, xs = np.nonzero(fb.covered)
    if len(ys) == 0:
        return RenderOutput(color, depth, opacity)

    face_ids = fb.face_id[ys, xs]
    bary = fb.barycentrics[ys, xs]
    face_verts = mesh.faces[face_ids]
    with torch.no_grad():
        inv = interpolate_inverse(bary, face_verts, posed.inverse_affines)
        pixels = torch.from_numpy(np.stack([xs, ys], axis=-1).astype(np.float64))
        origins, dirs = generate_rays(camera, pixels)
        # hit point from the interpolated posed vertices; t is its ray distance
        pv = posed.vertices[torch.from_numpy(face_verts)]         # [F, 3, 3]
        hit = torch.einsum("fk,fki->fi", torch.from_numpy(bary).to(pv.dtype), pv)
        t_hit = ((hit - origins) * dirs).sum(dim=1)
        c, resid = local_march(field, origins, dirs, t_hit, inv,
                               config.n_local, s)
        c = c + resid.unsqueeze(-1) * torch.from_numpy(bg).to(c.dtype)
    color[ys, xs] = c.numpy()
    opacity[ys, xs] = 1.0 - resid.numpy()
    depth[ys, xs] = t_hit.numpy()
    return RenderOutput(color, depth, opacity)


# -- benchmark --------------------------------------------------------------------


@dataclass
class BenchReport:
    resolution: int
    n_local: int
    ms_full: float
    ms_local: float
    speedup: float
    psnr_vs_full: float
    frames: int

    def record(self) -> dict:
        return {"resolution": self.resolution, "n_local": self.n_local,
                "ms_full": self.ms_full, "ms_local": self.ms_local,
                "speedup": self.speedup, "psnr_vs_full": self.psnr_vs_full,
                "frames": self.frames}

    def text(self) -> str:
        return (f"resolution {self.resolution}x{self.resolution}  "
                f"n_local {self.n_local}  frames {self.frames}\n"
                f"full raymarch:  {self.ms_full:10.1f} ms/frame (median)\n"
                f"local renderer: {self.ms_local:10.1f} ms/frame (median)\n"
                f"speedup {self.speedup:.1f}x   PSNR vs full {self.psnr_vs_full:.2f} dB")


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


def bench(field: FactorizedField, mesh: SkinnedTemplate, skeleton: Skeleton,
          poses: List[Pose], camera: Camera,
          config: Optional[LocalMarchConfig] = None,
          full_config: Optional[RenderConfig] = None,
          frames: int = 30, warmup: int = 1) -> BenchReport:
    """Median per-frame wall time of the full raymarcher vs the local
    renderer over `frames` frames (cycling the pose list), plus the PSNR of
    the local result against the full render on the first pose."""
    config = config or LocalMarchConfig()
    full_config = full_config or RenderConfig(background=config.background)
    if not poses:
        raise RasterError("bench needs at least one pose")

    for k in range(warmup):
        render_realtime(field, mesh, skeleton, poses[0], camera, config)
    t_local = []
    local_first = None
    for k in range(frames):
        pose = poses[k % len(poses)]
        t0 = time.perf_counter()
        out = render_realtime(field, mesh, skeleton, pose, camera, config)
        t_local.append(time.perf_counter() - t0)
        if k == 0:
            local_first = out

    for k in range(warmup):
        render_deformed(field, mesh, skeleton, poses[0], camera, full_config)
    t_full = []
    full_first = None
    for k in range(frames):
        pose = poses[k % len(poses)]
        t0 = time.perf_counter()
        out = render_deformed(field, mesh, skeleton, pose, camera, full_config)
        t_full.append(time.perf_counter() - t0)
        if k == 0:
            full_first = out

    ms_full = 1000.0 * float(np.median(t_full))
    ms_local = 1000.0 * float(np.median(t_local))
    return BenchReport(camera.width, config.n_local, ms_full, ms_local,
                       ms_full / ms_local,
                       psnr(local_first.color, full_first.color), frames)
