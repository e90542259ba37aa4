"""Factorized volumetric field: density and color as plane/line tensor products.

The canonical radiance field is a voxel grid of resolution D x H x W that is
never materialized. Each scalar channel is the sum of three matrix-vector
products over axis-aligned planes and lines; density goes through a gained
softplus, each RGB channel through a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

# Hard cap on the virtual voxel count; guards against absurd grid requests.
MAX_VOXELS = 1 << 28


class FieldError(ValueError):
    pass


@dataclass(frozen=True)
class GridDims:
    """Voxel counts along canonical Z (d), Y (h), X (w)."""

    d: int
    h: int
    w: int

    def __post_init__(self):
        for n in (self.d, self.h, self.w):
            if not isinstance(n, int) or n < 2:
                raise FieldError(f"grid dims must be integers >= 2, got {self}")
        if self.d * self.h * self.w > MAX_VOXELS:
            raise FieldError(f"grid {self} exceeds {MAX_VOXELS} voxels")

    @property
    def voxels(self) -> int:
        return self.d * self.h * self.w


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in canonical world units."""

    min: torch.Tensor  # (3,)
    max: torch.Tensor  # (3,)

    def __post_init__(self):
        lo = torch.as_tensor(self.min, dtype=torch.float64)
        hi = torch.as_tensor(self.max, dtype=torch.float64)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)
        if lo.shape != (3,) or hi.shape != (3,):
            raise FieldError("bbox min/max must be 3-vectors")
        if not bool((lo < hi).all()):
            raise FieldError("bbox requires min < max componentwise")

    @property
    def extent(self) -> torch.Tensor:
        return self.max - self.min

    @property
    def diagonal(self) -> float:
        return float(torch.linalg.norm(self.extent))

    def contains(self, pts: torch.Tensor) -> torch.Tensor:
        lo = self.min.to(pts.dtype)
        hi = self.max.to(pts.dtype)
        return ((pts >= lo) & (pts <= hi)).all(dim=-1)


class FactorGroup:
    """One rank-R plane/line factor set for a single scalar channel.

    Planes are stored channel-major, row-major within channel; this exact
    layout is the serialization contract.
      plane_yx: [R, H, W]   paired with line_z: [R, D]
      plane_yz: [R, H, D]   paired with line_x: [R, W]
      plane_xz: [R, W, D]   paired with line_y: [R, H]
    """

    TENSOR_NAMES = ("plane_yx", "plane_yz", "plane_xz", "line_z", "line_x", "line_y")

    def __init__(self, rank, dims, *, init_scale=0.0, generator=None,
                 dtype=torch.float32, requires_grad=False):
        if rank < 0:
            raise FieldError("rank must be non-negative")
        self.rank = int(rank)
        self.dims = dims
        d, h, w = dims.d, dims.h, dims.w
        shapes = {
            "plane_yx": (rank, h, w),
            "plane_yz": (rank, h, d),
            "plane_xz": (rank, w, d),
            "line_z": (rank, d),
            "line_x": (rank, w),
            "line_y": (rank, h),
        }
        for name, shape in shapes.items():
            if init_scale == 0.0:
                t = torch.zeros(shape, dtype=dtype)
            else:
                t = init_scale * torch.randn(shape, generator=generator, dtype=dtype)
            t.requires_grad_(requires_grad)
            setattr(self, name, t)

    def tensors(self):
        return [getattr(self, n) for n in self.TENSOR_NAMES]

    def named_tensors(self):
        return [(n, getattr(self, n)) for n in self.TENSOR_NAMES]

    def validate(self):
        for name, t in self.named_tensors():
            if not torch.isfinite(t).all():
                raise FieldError(f"non-finite entries in {name}")

    def clone(self, requires_grad=False):
        out = FactorGroup(self.rank, self.dims, dtype=self.plane_yx.dtype)
        for name in self.TENSOR_NAMES:
            t = getattr(self, name).detach().clone()
            t.requires_grad_(requires_grad)
            setattr(out, name, t)
        return out


class FactorizedField:
    """Canonical density + RGB field over a bounding box.

    `density` is one rank-R_sigma group; `color` holds three independent
    rank-R_c groups, one per RGB channel. `gain` is the fixed softplus gain
    (approximately 1/step of the renderer that samples this field).
    """

    def __init__(self, dims, bbox, r_sigma, r_c, gain, *, init_scale=0.0,
                 generator=None, dtype=torch.float32, requires_grad=False):
        if gain <= 0:
            raise FieldError("softplus gain must be positive")
        self.dims = dims
        self.bbox = bbox
        self.gain = float(gain)
        self.density = FactorGroup(r_sigma, dims, init_scale=init_scale,
                                   generator=generator, dtype=dtype,
                                   requires_grad=requires_grad)
        self.color = [
            FactorGroup(r_c, dims, init_scale=init_scale, generator=generator,
                        dtype=dtype, requires_grad=requires_grad)
            for _ in range(3)
        ]

    @property
    def r_sigma(self) -> int:
        return self.density.rank

    @property
    def r_c(self) -> int:
        return self.color[0].rank

    @property
    def dtype(self):
        return self.density.plane_yx.dtype

    def groups(self):
        return [self.density] + self.color

    def parameters(self):
        for g in self.groups():
            yield from g.tensors()

    def requires_grad_(self, flag=True):
        for p in self.parameters():
            p.requires_grad_(flag)
        return self

    # -- coordinates -------------------------------------------------------

    def world_to_grid(self, pts: torch.Tensor) -> torch.Tensor:
        """Map world points (x, y, z) inside the bbox to continuous grid
        coordinates in [0, W-1] x [0, H-1] x [0, D-1]."""
        lo = self.bbox.min.to(pts.dtype)
        extent = self.bbox.extent.to(pts.dtype)
        sizes = torch.tensor(
            [self.dims.w - 1, self.dims.h - 1, self.dims.d - 1], dtype=pts.dtype
        )
        return (pts - lo) / extent * sizes

    def _normalized(self, pts: torch.Tensor) -> torch.Tensor:
        # grid_sample convention: [-1, 1] with align_corners=True; clamp keeps
        # points numerically on a bbox face in range.
        lo = self.bbox.min.to(pts.dtype)
        extent = self.bbox.extent.to(pts.dtype)
        return ((pts - lo) / extent * 2.0 - 1.0).clamp(-1.0, 1.0)

    # -- sampling ----------------------------------------------------------

    def sample_raw(self, group: FactorGroup, pts: torch.Tensor) -> torch.Tensor:
        """Pre-activation per-channel values at world points.

        pts: [P, 3]; returns [P, R]. Outside-bbox points yield 0.
        """
        if group.rank == 0:
            return torch.zeros(pts.shape[0], 0, dtype=pts.dtype)
        n = self._normalized(pts)  # [P, 3] in (x, y, z)
        x, y, z = n[:, 0], n[:, 1], n[:, 2]
        vals = (
            _plane(group.plane_yx, x, y) * _line(group.line_z, z)
            + _plane(group.plane_yz, z, y) * _line(group.line_x, x)
            + _plane(group.plane_xz, z, x) * _line(group.line_y, y)
        )
        inside = self.bbox.contains(pts)
        return vals * inside.unsqueeze(1).to(vals.dtype)

    def sample_raw_sum(self, group: FactorGroup, pts: torch.Tensor) -> torch.Tensor:
        return self.sample_raw(group, pts).sum(dim=1)

    def sample_density(self, pts: torch.Tensor) -> torch.Tensor:
        """Non-negative density at world points [P, 3] -> [P]; 0 outside bbox."""
        raw = self.sample_raw_sum(self.density, pts)
        sigma = softplus_gained(raw, self.gain)
        inside = self.bbox.contains(pts)
        return torch.where(inside, sigma, torch.zeros((), dtype=sigma.dtype))

    def sample_color(self, pts: torch.Tensor) -> torch.Tensor:
        """RGB in [0, 1] at world points [P, 3] -> [P, 3]."""
        r = self.r_c
        if r == 0:
            return torch.sigmoid(torch.zeros(pts.shape[0], 3, dtype=pts.dtype))
        # concatenate the three channel groups along rank so each plane/line
        # pair is one interpolation call instead of three
        n = self._normalized(pts)
        x, y, z = n[:, 0], n[:, 1], n[:, 2]
        cat = lambda name: torch.cat([getattr(g, name) for g in self.color])
        vals = (
            _plane(cat("plane_yx"), x, y) * _line(cat("line_z"), z)
            + _plane(cat("plane_yz"), z, y) * _line(cat("line_x"), x)
            + _plane(cat("plane_xz"), z, x) * _line(cat("line_y"), y)
        )
        inside = self.bbox.contains(pts)
        vals = vals * inside.unsqueeze(1).to(vals.dtype)
        return torch.sigmoid(vals.reshape(-1, 3, r).sum(dim=-1))

    def sample(self, pts: torch.Tensor):
        return self.sample_density(pts), self.sample_color(pts)

    # -- gradients ---------------------------------------------------------

    def backprop_sample(self, pts, d_density, d_rgb, grads: "FieldGradients"):
        """Accumulate d(loss)/d(factor entries) for upstream gradients
        d_density [P] and d_rgb [P, 3] at world points pts [P, 3]."""
        params = [p for p in self.parameters() if p.numel() > 0]
        if not params:
            return
        need_restore = [p for p in params if not p.requires_grad]
        for p in need_restore:
            p.requires_grad_(True)
        try:
            sigma = self.sample_density(pts)
            rgb = self.sample_color(pts)
            out = (sigma * d_density).sum() + (rgb * d_rgb).sum()
            gs = torch.autograd.grad(out, params, allow_unused=True)
        finally:
            for p in need_restore:
                p.requires_grad_(False)
        it = iter(gs)
        for p, g_store in zip(self.parameters(), grads.tensors()):
            if p.numel() == 0:
                continue
            g = next(it)
            if g is not None:
                g_store.add_(g)

    # -- resolution --------------------------------------------------------

    def upsample(self, new_dims: GridDims) -> "FactorizedField":
        """Resample all factors onto a finer grid (bilinear on planes, linear
        on lines). Shrinking any axis is rejected."""
        if new_dims.d < self.dims.d or new_dims.h < self.dims.h or new_dims.w < self.dims.w:
            raise FieldError(f"upsample cannot shrink dims {self.dims} -> {new_dims}")
        out = FactorizedField(new_dims, self.bbox, self.r_sigma, self.r_c,
                              self.gain, dtype=self.dtype)
        axis_sizes = {
            "plane_yx": (new_dims.h, new_dims.w),
            "plane_yz": (new_dims.h, new_dims.d),
            "plane_xz": (new_dims.w, new_dims.d),
            "line_z": new_dims.d,
            "line_x": new_dims.w,
            "line_y": new_dims.h,
        }
        for src, dst in zip(self.groups(), out.groups()):
            for name in FactorGroup.TENSOR_NAMES:
                t = getattr(src, name).detach()
                if name.startswith("plane"):
                    r = F.interpolate(t.unsqueeze(0), size=axis_sizes[name],
                                      mode="bilinear", align_corners=True)[0]
                else:
                    r = F.interpolate(t.unsqueeze(1), size=axis_sizes[name],
                                      mode="linear", align_corners=True)[:, 0]
                setattr(dst, name, r.contiguous())
        return out

    def param_count(self) -> int:
        d, h, w = self.dims.d, self.dims.h, self.dims.w
        per_rank = h * w + h * d + w * d + h + w + d
        return self.r_sigma * per_rank + 3 * self.r_c * per_rank

    def detach_clone(self) -> "FactorizedField":
        out = FactorizedField(self.dims, self.bbox, self.r_sigma, self.r_c,
                              self.gain, dtype=self.dtype)
        for src, dst in zip(self.groups(), out.groups()):
            for name in FactorGroup.TENSOR_NAMES:
                setattr(dst, name, getattr(src, name).detach().clone())
        return out


class FieldGradients:
    """Mirror of a field's factor tensors accumulating loss gradients.

    Not safe for concurrent accumulation; use one per worker and reduce by
    summation before the optimizer step.
    """

    def __init__(self, field: FactorizedField):
        self._tensors = [torch.zeros_like(p) for p in field.parameters()]

    def tensors(self):
        return self._tensors

    def zero_(self):
        for t in self._tensors:
            t.zero_()

    def add_(self, other: "FieldGradients"):
        for a, b in zip(self._tensors, other._tensors):
            a.add_(b)


def softplus_gained(raw: torch.Tensor, gain: float) -> torch.Tensor:
    """log(1 + exp(gain * raw)), numerically stable in both tails."""
    return F.softplus(raw * gain)


def gain_for_step(step: float) -> float:
    """Softplus gain tied to the renderer's ray step (G ~ 1/step)."""
    if step <= 0:
        raise FieldError("step must be positive")
    return 1.0 / step


def dims_for_voxels(bbox: BoundingBox, voxels: float) -> GridDims:
    """Grid dims with roughly `voxels` total cells, aspect matched to bbox."""
    ext = bbox.extent
    ex, ey, ez = (float(v) for v in ext)
    scale = (voxels / (ex * ey * ez)) ** (1.0 / 3.0)
    w = max(2, round(scale * ex))
    h = max(2, round(scale * ey))
    d = max(2, round(scale * ez))
    return GridDims(d=d, h=h, w=w)


def _plane(plane: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Bilinear-sample [R, rows, cols] at normalized (u=col, v=row) -> [P, R]."""
    grid = torch.stack([u, v], dim=-1).view(1, 1, -1, 2)
    out = F.grid_sample(plane.unsqueeze(0), grid, mode="bilinear",
                        padding_mode="border", align_corners=True)
    return out[0, :, 0, :].transpose(0, 1)


def _line(line: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """Linear-sample [R, L] at normalized u -> [P, R]."""
    grid = torch.stack([u, torch.zeros_like(u)], dim=-1).view(1, 1, -1, 2)
    out = F.grid_sample(line.unsqueeze(0).unsqueeze(2), grid, mode="bilinear",
                        padding_mode="border", align_corners=True)
    return out[0, :, 0, :].transpose(0, 1)
