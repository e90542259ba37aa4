"""Canonical mesh extraction from a fitted field.

Pipeline: turntable renders of the canonical field -> depth unprojection into
a mask-consistent point cloud -> mask-carved marching cubes on the density
(the carving suppresses density noise in regions no camera supervised) ->
quadric edge-collapse simplification -> nearest-vertex skinning transfer.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import torch
from scipy.spatial import cKDTree
from skimage.measure import marching_cubes

from .field import BoundingBox, FactorizedField
from .raymarch import Camera, RenderConfig, RenderOutput, render_canonical
from .skinning import SkinnedTemplate
from .synthetic import look_at_camera


class MeshError(RuntimeError):
    pass


# -- turntable rig ---------------------------------------------------------------


@dataclass
class TurntableRig:
    cameras: List[Camera]
    center: np.ndarray
    radius: float
    image_size: int


def make_turntable(bbox: BoundingBox, n_views: int = 36,
                   elevations_deg=(20.0, -20.0), image_size: int = 256,
                   radius: Optional[float] = None) -> TurntableRig:
    """Evenly spaced azimuth ring(s) of inward-looking cameras around the box
    center; `n_views` total, split across the elevation rings."""
    if n_views < 1:
        raise MeshError("need at least one view")
    center = ((bbox.min + bbox.max) * 0.5).numpy()
    if radius is None:
        radius = 1.6 * bbox.diagonal
    cams = []
    rings = len(elevations_deg)
    per_ring = [n_views // rings + (1 if r < n_views % rings else 0)
                for r in range(rings)]
    for r, el_deg in enumerate(elevations_deg):
        el = math.radians(el_deg)
        for k in range(per_ring[r]):
            az = 2.0 * math.pi * (k + 0.5 * r) / max(per_ring[r], 1)
            eye = center + radius * np.array([
                math.cos(el) * math.cos(az),
                math.cos(el) * math.sin(az),
                math.sin(el)])
            cams.append(look_at_camera(eye, center, image_size))
    return TurntableRig(cams, center, radius, image_size)


def render_turntable(field: FactorizedField, rig: TurntableRig,
                     config: Optional[RenderConfig] = None,
                     mask_threshold: float = 0.5) -> List[RenderOutput]:
    """Canonical renders per view; each output's mask is opacity > threshold
    (exposed via `view_mask`)."""
    config = config or RenderConfig()
    return [render_canonical(field, cam, config) for cam in rig.cameras]


def view_mask(out: RenderOutput, threshold: float = 0.5) -> np.ndarray:
    return out.opacity > threshold


# -- point-cloud fusion -----------------------------------------------------------


@dataclass
class FusedPointCloud:
    points: np.ndarray    # [K, 3]
    source_view: np.ndarray  # [K] int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.source_view = np.asarray(self.source_view, dtype=np.int64)


def _in_all_masks(points: np.ndarray, rig: TurntableRig,
                  masks: List[np.ndarray]) -> np.ndarray:
    """True where a point lies inside the foreground mask of every view whose
    frustum contains it."""
    keep = np.ones(points.shape[0], dtype=bool)
    pts_t = torch.from_numpy(points)
    for cam, mask in zip(rig.cameras, masks):
        pix, z = cam.project(pts_t)
        u = np.rint(pix[:, 0].numpy()).astype(np.int64)
        v = np.rint(pix[:, 1].numpy()).astype(np.int64)
        in_frustum = (z.numpy() > 1e-9) & (u >= 0) & (u < cam.width) \
            & (v >= 0) & (v < cam.height)
        fg = np.zeros(points.shape[0], dtype=bool)
        idx = np.nonzero(in_frustum)[0]
        fg[idx] = mask[v[idx], u[idx]]
        keep &= fg | ~in_frustum
    return keep


def unproject_and_fuse(views: List[RenderOutput], rig: TurntableRig,
                       mask_threshold: float = 0.5) -> FusedPointCloud:
    """Lift each view's foreground pixels through its depth map, then keep
    only points inside the foreground mask of all views that see them."""
    from .raymarch import generate_rays
    all_pts = []
    all_src = []
    masks = [view_mask(v, mask_threshold) for v in views]
    for vi, (cam, out, mask) in enumerate(zip(rig.cameras, views, masks)):
        ys, xs = np.nonzero(mask)
        if len(ys) == 0:
            continue
        pixels = torch.from_numpy(np.stack([xs, ys], axis=-1).astype(np.float64))
        origins, dirs = generate_rays(cam, pixels)
        depth = torch.from_numpy(out.depth[ys, xs])
        pts = (origins + dirs * depth.unsqueeze(-1)).numpy()
        all_pts.append(pts)
        all_src.append(np.full(len(ys), vi, dtype=np.int64))
    if not all_pts:
        return FusedPointCloud(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))
    pts = np.concatenate(all_pts)
    src = np.concatenate(all_src)
    keep = _in_all_masks(pts, rig, masks)
    return FusedPointCloud(pts[keep], src[keep])


# -- surface reconstruction --------------------------------------------------------


@dataclass
class ExtractedMesh:
    vertices: np.ndarray             # [N, 3] float64
    faces: np.ndarray                # [M, 3] int64
    bone_indices: Optional[np.ndarray] = None  # [N, 4]
    bone_weights: Optional[np.ndarray] = None  # [N, 4]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)

    @property
    def face_count(self) -> int:
        return self.faces.shape[0]


def reconstruct_surface(field: FactorizedField, views: List[RenderOutput],
                        rig: TurntableRig, resolution: int = 192,
                        cloud: Optional[FusedPointCloud] = None,
                        iso: float = 0.5, chunk: int = 262144) -> ExtractedMesh:
    """Mask-carved marching cubes on the density.

    A voxel is occupied iff sigma(center) * step >= iso (step = 1/gain, so the
    surface sits where one render step reaches half opacity) AND the center
    lies in every view's foreground mask. The cloud, when given, tightens the
    sampled box.
    """
    if resolution < 2:
        raise MeshError("resolution must be >= 2")
    box = field.bbox
    if cloud is not None and cloud.points.shape[0] > 0:
        pad = 2.0 * box.diagonal / resolution
        lo = np.maximum(cloud.points.min(axis=0) - pad, box.min.numpy())
        hi = np.minimum(cloud.points.max(axis=0) + pad, box.max.numpy())
        box = BoundingBox(torch.from_numpy(lo), torch.from_numpy(hi))

    xs = np.linspace(float(box.min[0]), float(box.max[0]), resolution)
    ys = np.linspace(float(box.min[1]), float(box.max[1]), resolution)
    zs = np.linspace(float(box.min[2]), float(box.max[2]), resolution)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    centers = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=-1)

    sigma = np.empty(centers.shape[0], dtype=np.float64)
    with torch.no_grad():
        for i in range(0, centers.shape[0], chunk):
            pts = torch.from_numpy(centers[i:i + chunk]).to(field.dtype)
            sigma[i:i + chunk] = field.sample_density(pts).to(torch.float64).numpy()
    volume = (sigma / field.gain).reshape(resolution, resolution, resolution)

    masks = [view_mask(v) for v in views]
    if masks:
        dense = volume.ravel() >= iso
        carve_ok = np.zeros(centers.shape[0], dtype=bool)
        idx = np.nonzero(dense)[0]
        if idx.size:
            carve_ok[idx] = _in_all_masks(centers[idx], rig, masks)
        volume = np.where(carve_ok.reshape(volume.shape), volume, 0.0)

    if volume.max() < iso:
        raise MeshError("no surface found")
    spacing = ((xs[1] - xs[0]), (ys[1] - ys[0]), (zs[1] - zs[0]))
    verts, faces, _, _ = marching_cubes(volume, level=iso, spacing=spacing)
    verts = verts + box.min.numpy()
    return ExtractedMesh(verts.astype(np.float64), faces.astype(np.int64))


def voxel_diagonal(bbox: BoundingBox, resolution: int) -> float:
    ext = bbox.extent.numpy()
    return float(np.linalg.norm(ext / (resolution - 1)))


# -- quadric edge-collapse simplification ------------------------------------------


def remove_degenerate_faces(mesh: ExtractedMesh, area_eps: float = 0.0) -> ExtractedMesh:
    """Drop faces with repeated indices or (near-)zero area."""
    f = mesh.faces
    distinct = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 0] != f[:, 2])
    v = mesh.vertices
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    area2 = np.linalg.norm(n, axis=1)
    return ExtractedMesh(mesh.vertices, f[distinct & (area2 > area_eps)],
                         mesh.bone_indices, mesh.bone_weights)


def _face_quadric(p0, p1, p2):
    n = np.cross(p1 - p0, p2 - p0)
    norm = np.linalg.norm(n)
    if norm < 1e-30:
        return np.zeros((4, 4))
    n = n / norm
    d = -n @ p0
    plane = np.array([n[0], n[1], n[2], d])
    return np.outer(plane, plane)


def simplify(mesh: ExtractedMesh, target_faces: int = 15000) -> ExtractedMesh:
    """Iterative quadric-error edge collapse until <= target_faces.

    Collapses that would flip any surviving incident face normal are rejected.
    Deterministic: the candidate heap is ordered by (cost, edge id).
    """
    mesh = remove_degenerate_faces(mesh)
    if mesh.face_count <= target_faces:
        return mesh

    verts = mesh.vertices.copy()
    faces = [tuple(f) for f in mesh.faces]
    alive_face = [True] * len(faces)
    n_alive = len(faces)
    vert_faces = [set() for _ in range(len(verts))]
    for fi, f in enumerate(faces):
        for vv in f:
            vert_faces[vv].add(fi)
    quadrics = np.zeros((len(verts), 4, 4))
    for f in faces:
        k = _face_quadric(verts[f[0]], verts[f[1]], verts[f[2]])
        for vv in f:
            quadrics[vv] += k

    version = np.zeros(len(verts), dtype=np.int64)
    parent = np.arange(len(verts))

    def root(v):
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    def optimal_point(q, a, b):
        m = q[:3, :3]
        rhs = -q[:3, 3]
        try:
            if abs(np.linalg.det(m)) > 1e-12:
                return np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError:
            pass
        # fall back to the cheapest of the endpoints and midpoint
        best, best_c = None, None
        for cand in (verts[a], verts[b], 0.5 * (verts[a] + verts[b])):
            h = np.append(cand, 1.0)
            c = h @ q @ h
            if best_c is None or c < best_c:
                best, best_c = cand, c
        return best

    def edge_cost(a, b):
        q = quadrics[a] + quadrics[b]
        p = optimal_point(q, a, b)
        h = np.append(p, 1.0)
        return float(h @ q @ h), p

    heap = []
    seq = 0

    def push_edge(a, b):
        nonlocal seq
        a, b = (a, b) if a < b else (b, a)
        cost, p = edge_cost(a, b)
        heapq.heappush(heap, (cost, seq, a, b, version[a], version[b], p))
        seq += 1

    edges = set()
    for f in faces:
        for a, b in ((f[0], f[1]), (f[1], f[2]), (f[0], f[2])):
            e = (a, b) if a < b else (b, a)
            if e not in edges:
                edges.add(e)
                push_edge(*e)

    while n_alive > target_faces and heap:
        cost, _, a, b, va, vb, p = heapq.heappop(heap)
        a, b = root(a), root(b)
        if a == b or version[a] != va or version[b] != vb:
            continue
        shared = vert_faces[a] & vert_faces[b]
        ring = (vert_faces[a] | vert_faces[b]) - shared
        # normal-flip rejection on the surviving ring
        flip = False
        for fi in ring:
            if not alive_face[fi]:
                continue
            f = faces[fi]
            old = [verts[root(v)] for v in f]
            new = [p if root(v) in (a, b) else verts[root(v)] for v in f]
            before = np.cross(old[1] - old[0], old[2] - old[0])
            after = np.cross(new[1] - new[0], new[2] - new[0])
            if before @ after < 0 and np.linalg.norm(before) > 1e-30:
                flip = True
                break
        if flip:
            continue

        # collapse b into a at position p
        verts[a] = p
        quadrics[a] = quadrics[a] + quadrics[b]
        parent[b] = a
        for fi in shared:
            if alive_face[fi]:
                alive_face[fi] = False
                n_alive -= 1
        vert_faces[a] = {fi for fi in ring if alive_face[fi]}
        vert_faces[b] = set()
        version[a] += 1
        version[b] += 1
        # re-key edges around the merged vertex
        neighbors = set()
        for fi in vert_faces[a]:
            f = faces[fi]
            for v in f:
                r = root(v)
                if r != a:
                    neighbors.add(r)
        for nb in sorted(neighbors):
            push_edge(a, nb)

    # compact the result
    out_faces = []
    for fi, f in enumerate(faces):
        if not alive_face[fi]:
            continue
        r = (root(f[0]), root(f[1]), root(f[2]))
        if r[0] == r[1] or r[1] == r[2] or r[0] == r[2]:
            continue
        out_faces.append(r)
    used = sorted({v for f in out_faces for v in f})
    remap = {v: i for i, v in enumerate(used)}
    new_faces = np.array([[remap[v] for v in f] for f in out_faces], dtype=np.int64)
    new_verts = verts[used]
    return remove_degenerate_faces(ExtractedMesh(new_verts, new_faces))


# -- skinning transfer --------------------------------------------------------------


def transfer_rig(mesh: ExtractedMesh, template: SkinnedTemplate) -> ExtractedMesh:
    """Copy each vertex's skinning row from its nearest template vertex."""
    tv = template.vertices.detach().numpy()
    tree = cKDTree(tv)
    _, idx = tree.query(mesh.vertices, k=1)
    idx = np.atleast_1d(idx)
    return ExtractedMesh(
        mesh.vertices, mesh.faces,
        template.bone_indices[idx].copy(),
        template.bone_weights.detach().numpy()[idx].copy())


def mesh_to_template(mesh: ExtractedMesh) -> SkinnedTemplate:
    if mesh.bone_indices is None or mesh.bone_weights is None:
        raise MeshError("mesh has no skinning weights; run transfer_rig first")
    return SkinnedTemplate(torch.from_numpy(mesh.vertices), mesh.faces,
                           mesh.bone_indices,
                           torch.from_numpy(np.asarray(mesh.bone_weights,
                                                       dtype=np.float64)))


def extract_rigged_mesh(field: FactorizedField, template: SkinnedTemplate,
                        n_views: int = 36, resolution: int = 128,
                        target_faces: int = 15000,
                        image_size: int = 256,
                        render_config: Optional[RenderConfig] = None) -> ExtractedMesh:
    """Full pipeline: turntable -> fuse -> carved marching cubes -> simplify
    -> rig transfer."""
    rig = make_turntable(field.bbox, n_views=n_views, image_size=image_size)
    views = render_turntable(field, rig, render_config)
    cloud = unproject_and_fuse(views, rig)
    mesh = reconstruct_surface(field, views, rig, resolution, cloud)
    mesh = simplify(mesh, target_faces)
    return transfer_rig(mesh, template)
