"""Skeleton forward kinematics, linear blend skinning, and inverse warping.

A pose assigns one unit quaternion per bone plus a root translation. Forward
kinematics composes per-bone rigid maps down the tree; blend skinning mixes
the resulting bone affines with per-vertex weights. Posed-space points are
pulled back to canonical space with the inverse affine of the nearest posed
vertex, valid only within a distance threshold tau of the surface.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional

import numpy as np
import torch
from scipy.spatial import cKDTree


class SkinningError(ValueError):
    pass


# -- rotations ---------------------------------------------------------------

def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    return q / torch.linalg.norm(q, dim=-1, keepdim=True)


def quat_mul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product, (w, x, y, z) layout."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], dim=-1)


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    w, x, y, z = q.unbind(-1)
    two = 2.0
    row0 = torch.stack([1 - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y)], dim=-1)
    row1 = torch.stack([two * (x * y + w * z), 1 - two * (x * x + z * z), two * (y * z - w * x)], dim=-1)
    row2 = torch.stack([two * (x * z - w * y), two * (y * z + w * x), 1 - two * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def axis_angle_to_quat(aa: torch.Tensor) -> torch.Tensor:
    """Exponential map, safe at zero angle (Taylor for sin(t/2)/t)."""
    angle = torch.linalg.norm(aa, dim=-1, keepdim=True)
    half = 0.5 * angle
    small = angle < 1e-8
    k = torch.where(small, 0.5 - angle * angle / 48.0, torch.sin(half) / angle.clamp_min(1e-30))
    return torch.cat([torch.cos(half), aa * k], dim=-1)


def quat_to_axis_angle(q: torch.Tensor) -> torch.Tensor:
    q = quat_normalize(q)
    w = q[..., :1].clamp(-1.0, 1.0)
    v = q[..., 1:]
    s = torch.linalg.norm(v, dim=-1, keepdim=True)
    angle = 2.0 * torch.atan2(s, w)
    k = torch.where(s < 1e-12, torch.full_like(s, 2.0), angle / s.clamp_min(1e-30))
    return v * k


def identity_quat(n: int, dtype=torch.float64) -> torch.Tensor:
    q = torch.zeros(n, 4, dtype=dtype)
    q[:, 0] = 1.0
    return q


# -- pose and skeleton ---------------------------------------------------------

@dataclass
class Pose:
    """Per-bone joint rotations (unit quaternions) plus a root translation."""

    rotations: torch.Tensor       # [B, 4]
    root_translation: torch.Tensor  # [3]

    def __post_init__(self):
        self.rotations = torch.as_tensor(self.rotations, dtype=torch.float64) \
            if not torch.is_tensor(self.rotations) else self.rotations
        self.root_translation = torch.as_tensor(self.root_translation, dtype=self.rotations.dtype) \
            if not torch.is_tensor(self.root_translation) else self.root_translation
        norms = torch.linalg.norm(self.rotations.detach(), dim=-1)
        if not bool(((norms - 1.0).abs() < 1e-6).all()):
            raise SkinningError("pose rotations must be unit quaternions")

    @property
    def bone_count(self) -> int:
        return self.rotations.shape[0]

    @staticmethod
    def identity(bone_count: int, dtype=torch.float64) -> "Pose":
        return Pose(identity_quat(bone_count, dtype), torch.zeros(3, dtype=dtype))

    @staticmethod
    def from_axis_angle(aa: torch.Tensor, root_translation: torch.Tensor) -> "Pose":
        aa = torch.as_tensor(aa, dtype=torch.float64)
        return Pose(axis_angle_to_quat(aa), torch.as_tensor(root_translation, dtype=torch.float64))

    def axis_angle(self) -> torch.Tensor:
        return quat_to_axis_angle(self.rotations)


@dataclass
class Skeleton:
    """Bone tree. parent[0] == -1 (root); parent[b] < b for all b."""

    parents: np.ndarray           # [B] int
    offsets: torch.Tensor         # [B, 3] joint translation relative to parent
    rest_pose: Optional[Pose] = None

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        if not torch.is_tensor(self.offsets):
            self.offsets = torch.as_tensor(self.offsets, dtype=torch.float64)
        b = len(self.parents)
        if self.parents[0] != -1:
            raise SkinningError("bone 0 must be the root (parent -1)")
        for i in range(1, b):
            if not (0 <= self.parents[i] < i):
                raise SkinningError("parents must be topologically ordered (parent[b] < b)")
        if self.offsets.shape != (b, 3):
            raise SkinningError("offsets must be [B, 3]")
        if self.rest_pose is None:
            self.rest_pose = Pose.identity(b, dtype=self.offsets.dtype)
        if self.rest_pose.bone_count != b:
            raise SkinningError("rest pose bone count mismatch")

    @property
    def bone_count(self) -> int:
        return len(self.parents)


@dataclass
class BoneAffines:
    """Per-bone world affine maps (rotation + translation rows of 3x4)."""

    linear: torch.Tensor   # [B, 3, 3]
    translation: torch.Tensor  # [B, 3]

    def matrix34(self) -> torch.Tensor:
        return torch.cat([self.linear, self.translation.unsqueeze(-1)], dim=-1)

    def apply(self, pts: torch.Tensor) -> torch.Tensor:
        """pts [..., 3] under each bone -> [..., B, 3] is not provided; this
        applies bone b to pts[..., b, :]."""
        return torch.einsum("bij,...bj->...bi", self.linear, pts) + self.translation


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> BoneAffines:
    """World transforms G_b: G_1 = g_1, G_b = G_par(b) o g_b.

    g_b rotates by the pose quaternion and translates by the rest offset;
    the root additionally translates by the pose's root translation.
    """
    if pose.bone_count != skeleton.bone_count:
        raise SkinningError("pose/skeleton bone count mismatch")
    rots = quat_to_matrix(quat_normalize(pose.rotations))
    offs = skeleton.offsets.to(rots.dtype)
    lin = []
    trans = []
    for b in range(skeleton.bone_count):
        t_local = offs[b]
        if b == 0:
            t_local = t_local + pose.root_translation.to(rots.dtype)
            lin.append(rots[0])
            trans.append(t_local)
        else:
            p = skeleton.parents[b]
            lin.append(lin[p] @ rots[b])
            trans.append(lin[p] @ t_local + trans[p])
    return BoneAffines(torch.stack(lin), torch.stack(trans))


def bone_affines(skeleton: Skeleton, pose: Pose) -> BoneAffines:
    """A_b = G_b(theta) o G_b(theta_0)^{-1}: maps canonical points rigidly
    attached to bone b to their posed locations."""
    g = forward_kinematics(skeleton, pose)
    g0 = forward_kinematics(skeleton, skeleton.rest_pose)
    # inverse of rigid (R, t) is (R^T, -R^T t)
    r0t = g0.linear.transpose(-1, -2).to(g.linear.dtype)
    lin = g.linear @ r0t
    trans = g.translation - torch.einsum("bij,bj->bi", lin, g0.translation.to(g.linear.dtype))
    return BoneAffines(lin, trans)


def blend(weights: torch.Tensor, affines: BoneAffines) -> torch.Tensor:
    """Convex combination of bone affines; weights [B] -> 3x4 matrix."""
    m = affines.matrix34().to(weights.dtype)
    return torch.einsum("b,bij->ij", weights, m)


# -- skinned template ----------------------------------------------------------

@dataclass
class SkinnedTemplate:
    """Canonical mesh with sparse (top-K) skinning weights, K = 4."""

    vertices: torch.Tensor   # [N, 3]
    faces: np.ndarray        # [M, 3] int
    bone_indices: np.ndarray  # [N, K] int
    bone_weights: torch.Tensor  # [N, K], rows >= 0 and sum to 1

    def __post_init__(self):
        if not torch.is_tensor(self.vertices):
            self.vertices = torch.as_tensor(self.vertices, dtype=torch.float64)
        if not torch.is_tensor(self.bone_weights):
            self.bone_weights = torch.as_tensor(self.bone_weights, dtype=self.vertices.dtype)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.bone_indices = np.asarray(self.bone_indices, dtype=np.int64)
        n = self.vertices.shape[0]
        if n == 0:
            raise SkinningError("template must have at least one vertex")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise SkinningError("face indices out of range")
        w = self.bone_weights.detach()
        if bool((w < -1e-9).any()):
            raise SkinningError("skinning weights must be non-negative")
        if not bool(((w.sum(dim=1) - 1.0).abs() < 1e-5).all()):
            raise SkinningError("skinning weight rows must sum to 1")

    @property
    def bone_count_upper(self) -> int:
        return int(self.bone_indices.max()) + 1

    def bounding_diagonal(self) -> float:
        v = self.vertices.detach()
        return float(torch.linalg.norm(v.max(dim=0).values - v.min(dim=0).values))

    def default_tau(self) -> float:
        # Keeps the valid inverse-warp shell proportional to subject scale.
        return 0.1 * self.bounding_diagonal()


@dataclass
class PosedMesh:
    """pose_mesh output: posed vertices with per-vertex forward and inverse
    affines (3x4 each), plus a flag for near-singular blended affines."""

    vertices: torch.Tensor        # [N, 3]
    forward_affines: torch.Tensor  # [N, 3, 4]
    inverse_affines: torch.Tensor  # [N, 3, 4]
    singular: torch.Tensor        # [N] bool


def pose_mesh(template: SkinnedTemplate, affines: BoneAffines) -> PosedMesh:
    """Apply blend skinning to every template vertex.

    Vertices whose blended affine is near-singular (|det| < 1e-9) fall back
    to the rigid inverse of their highest-weight bone.
    """
    m = affines.matrix34()
    dtype = m.dtype
    idx = torch.from_numpy(template.bone_indices)
    w = template.bone_weights.to(dtype)
    per_bone = m[idx]                                # [N, K, 3, 4]
    fwd = torch.einsum("nk,nkij->nij", w, per_bone)  # [N, 3, 4]
    verts = template.vertices.to(dtype)
    posed = torch.einsum("nij,nj->ni", fwd[:, :, :3], verts) + fwd[:, :, 3]

    lin = fwd[:, :, :3]
    det = torch.linalg.det(lin)
    singular = det.abs() < 1e-9

    # Rigid fallback for singular blends: top-weight bone is always invertible.
    top_bone = idx[torch.arange(idx.shape[0]), w.argmax(dim=1)]
    safe_lin = torch.where(singular[:, None, None], affines.linear[top_bone].to(dtype), lin)
    inv_lin = torch.linalg.inv(safe_lin)
    trans = torch.where(singular[:, None], affines.translation[top_bone].to(dtype), fwd[:, :, 3])
    inv_trans = -torch.einsum("nij,nj->ni", inv_lin, trans)
    inv = torch.cat([inv_lin, inv_trans.unsqueeze(-1)], dim=-1)
    return PosedMesh(posed, fwd, inv, singular)


# -- nearest-vertex index -------------------------------------------------------

class NearestVertexIndex:
    """Exact nearest-neighbor queries over posed vertices.

    Backed by a k-d tree; ties are broken toward the lowest vertex index so
    results are deterministic across platforms. Immutable after construction.
    """

    _TIE_K = 4

    def __init__(self, points: np.ndarray):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] == 0:
            raise SkinningError("index requires a non-empty [N, 3] point set")
        self._points = points
        self._tree = cKDTree(points)

    @property
    def size(self) -> int:
        return self._points.shape[0]

    def query(self, pts: np.ndarray):
        """pts [P, 3] -> (indices [P], distances [P]), exact nearest."""
        pts = np.asarray(pts, dtype=np.float64)
        k = min(self._TIE_K, self.size)
        d, i = self._tree.query(pts, k=k, workers=-1)
        if k == 1:
            return np.atleast_1d(i), np.atleast_1d(d)
        d = np.atleast_2d(d)
        i = np.atleast_2d(i)
        # lowest index among exact-distance ties
        tied = d == d[:, :1]
        masked = np.where(tied, i, np.iinfo(np.int64).max)
        return masked.min(axis=1), d[:, 0]


def build_index(posed_vertices) -> NearestVertexIndex:
    if torch.is_tensor(posed_vertices):
        posed_vertices = posed_vertices.detach().cpu().numpy()
    return NearestVertexIndex(posed_vertices)


def inverse_warp(pts: torch.Tensor, posed: PosedMesh, index: NearestVertexIndex,
                 tau: float):
    """Map posed-space points back to canonical space via the inverse affine
    of the nearest posed vertex.

    Returns (canonical points [P, 3], valid [P] bool, nearest index [P]).
    Points farther than tau from every vertex are invalid (density 0 there).
    """
    idx_np, dist_np = index.query(pts.detach().cpu().numpy())
    idx = torch.from_numpy(np.ascontiguousarray(idx_np))
    valid = torch.from_numpy(dist_np <= tau)
    inv = posed.inverse_affines[idx].to(pts.dtype)
    canon = torch.einsum("pij,pj->pi", inv[:, :, :3], pts) + inv[:, :, 3]
    return canon, valid, idx
