"""Patch-based fitting of the factorized field to a posed multi-frame dataset.

Losses: photometric MSE on foreground-centered patches, a sparsity penalty on
the positive part of the density factor products, and a pluggable perceptual
hook (disabled by default). Loss weights follow fixed piecewise schedules of
the global iteration. Training is coarse-to-fine: the grid resolution is
raised at configured iterations by resampling the factors.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
import torch

from .dataset import Dataset
from .field import (BoundingBox, FactorGroup, FactorizedField,
                    dims_for_voxels, gain_for_step)
from .raymarch import DeformedRenderer, RenderConfig, generate_rays
from .skinning import Pose, axis_angle_to_quat, quat_mul

SCHEDULE_MAX_ITER = 30000


class TrainError(RuntimeError):
    pass


def schedules(i: int):
    """Loss-weight schedules (alpha, beta, gamma) at global iteration i.

    alpha ramps 1 -> 0.2 and beta 0 -> 0.8 linearly over the first 10000
    iterations; gamma is 0, then 8e-5 on [2000, 4000), then 5e-5.
    """
    if not (0 <= i <= SCHEDULE_MAX_ITER):
        raise ValueError(f"iteration {i} outside [0, {SCHEDULE_MAX_ITER}]")
    alpha = 1.0 - 0.8 * i / 10000.0 if i < 10000 else 0.2
    beta = 0.8 * i / 10000.0 if i < 10000 else 0.8
    if i < 2000:
        gamma = 0.0
    elif i < 4000:
        gamma = 8e-5
    else:
        gamma = 5e-5
    return alpha, beta, gamma


@dataclass
class TrainConfig:
    r_sigma: int = 8
    r_c: int = 8
    epochs: int = 30
    iters_per_epoch: int = 1000
    patch_size: int = 32
    patches_per_batch: int = 6
    start_voxels: float = 1e6
    end_voxels: float = 4.096e6
    upsample_iters: tuple = (2000, 4000, 6000, 8000)
    lr_factors: float = 0.02
    lr_pose: float = 5e-4
    tau: Optional[float] = None
    seed: int = 0
    n_samples: int = 128
    background: tuple = (0.0, 0.0, 0.0)
    sparse_subsample: int = 4096
    init_scale: float = 0.05

    def __post_init__(self):
        for name in ("r_sigma", "r_c", "epochs", "iters_per_epoch", "patch_size",
                     "patches_per_batch", "start_voxels", "end_voxels",
                     "lr_factors", "n_samples", "sparse_subsample"):
            if getattr(self, name) <= 0 and name not in ("epochs",):
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0 or self.lr_pose < 0:
            raise ValueError("epochs and lr_pose must be non-negative")
        ups = tuple(self.upsample_iters)
        if any(b <= a for a, b in zip(ups, ups[1:])):
            raise ValueError("upsample iterations must be strictly increasing")
        total = self.epochs * self.iters_per_epoch
        if total and any(u >= total for u in ups):
            raise ValueError("upsample iterations must precede the last iteration")

    @property
    def total_iters(self) -> int:
        return self.epochs * self.iters_per_epoch

    def voxel_schedule(self):
        """Geometric voxel-count interpolation across the upsample points."""
        n = len(self.upsample_iters)
        if n == 0:
            return []
        counts = [self.start_voxels * (self.end_voxels / self.start_voxels) ** ((k + 1) / n)
                  for k in range(n)]
        return list(zip(self.upsample_iters, counts))


@dataclass
class LossReport:
    iteration: int
    l_rgb: float
    l_sparse: float
    l_perceptual: float
    alpha: float
    beta: float
    gamma: float
    total: float
    wall_time: float = 0.0

    def record(self) -> dict:
        return {"iteration": self.iteration, "alpha": self.alpha, "beta": self.beta,
                "gamma": self.gamma, "l_rgb": self.l_rgb, "l_sparse": self.l_sparse,
                "l_perceptual": self.l_perceptual, "total": self.total,
                "wall_time": self.wall_time}


class PoseRefinement:
    """Per-frame learnable pose deltas composed on top of the dataset poses:
    theta = theta_ref o theta_data. Deltas start at identity."""

    def __init__(self, frame_count: int, bone_count: int):
        self.delta_axis_angle = torch.zeros(frame_count, bone_count, 3,
                                            dtype=torch.float64, requires_grad=True)
        self.delta_root = torch.zeros(frame_count, 3, dtype=torch.float64,
                                      requires_grad=True)

    def parameters(self):
        return [self.delta_axis_angle, self.delta_root]

    def pose_for(self, frame: int, data_pose: Pose) -> Pose:
        dq = axis_angle_to_quat(self.delta_axis_angle[frame])
        q = quat_mul(dq, data_pose.rotations.to(torch.float64))
        root = data_pose.root_translation.to(torch.float64) + self.delta_root[frame]
        return Pose(q, root)

    def refined_poses(self, data_poses: List[Pose]) -> List[Pose]:
        with torch.no_grad():
            return [Pose(self.pose_for(i, p).rotations.detach().clone(),
                         self.pose_for(i, p).root_translation.detach().clone())
                    for i, p in enumerate(data_poses)]


def sample_batch(dataset: Dataset, rng: np.random.Generator,
                 patch_size: int = 32, count: int = 6):
    """Patch windows, each centered on a uniformly drawn foreground pixel of a
    uniformly drawn frame; windows near the border shift to fit the image."""
    h, w = dataset.frames[0].image.shape[:2]
    if patch_size > h or patch_size > w:
        raise TrainError("patch size exceeds image size")
    out = []
    for _ in range(count):
        fi = int(rng.integers(dataset.frame_count))
        ys, xs = dataset.frames[fi]._fg_cache if hasattr(dataset.frames[fi], "_fg_cache") \
            else np.nonzero(dataset.frames[fi].mask)
        dataset.frames[fi]._fg_cache = (ys, xs)
        k = int(rng.integers(len(ys)))
        cy, cx = int(ys[k]), int(xs[k])
        y0 = min(max(cy - patch_size // 2, 0), h - patch_size)
        x0 = min(max(cx - patch_size // 2, 0), w - patch_size)
        out.append((fi, y0, x0))
    return out


def loss_rgb(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of the squared RGB-vector error."""
    if pred.shape != target.shape:
        raise TrainError("prediction/target pixel count mismatch")
    return ((pred - target) ** 2).sum(dim=-1).mean()


_SPARSE_PAIRS = (("plane_yx", "line_z"), ("plane_yz", "line_x"), ("plane_xz", "line_y"))


def loss_sparse(group: FactorGroup, generator: Optional[torch.Generator] = None,
                subsample: Optional[int] = 4096) -> torch.Tensor:
    """Positive part of the factor products of the density group, averaged
    over all (r, x, y, z) entries of each plane/line pair.

    With `subsample`, entries are drawn uniformly per pair, an unbiased
    estimator of the full average. `subsample=None` evaluates exactly.
    """
    total = None
    for plane_name, line_name in _SPARSE_PAIRS:
        plane = getattr(group, plane_name)
        line = getattr(group, line_name)
        r, rows, cols = plane.shape
        l = line.shape[1]
        if r == 0:
            term = plane.sum() * 0.0
        elif subsample is None:
            term = torch.relu(plane.reshape(r, rows * cols, 1)
                              * line.reshape(r, 1, l)).mean()
        else:
            ri = torch.randint(r, (subsample,), generator=generator)
            pi = torch.randint(rows * cols, (subsample,), generator=generator)
            li = torch.randint(l, (subsample,), generator=generator)
            term = torch.relu(plane.reshape(r, -1)[ri, pi] * line[ri, li]).mean()
        total = term if total is None else total + term
    return total


class Trainer:
    """Owns the field, pose refinement, optimizer, and RNG streams."""

    def __init__(self, dataset: Dataset, config: TrainConfig,
                 perceptual_hook: Optional[Callable] = None):
        self.dataset = dataset
        self.config = config
        self.perceptual_hook = perceptual_hook
        self.rng = np.random.default_rng(config.seed)
        self.torch_gen = torch.Generator().manual_seed(config.seed)

        template = dataset.template
        self.tau = config.tau if config.tau is not None else template.default_tau()
        v = template.vertices.detach()
        pad = self.tau
        self.bbox = BoundingBox(v.min(dim=0).values - pad, v.max(dim=0).values + pad)
        step = self.bbox.diagonal / config.n_samples
        self.gain = gain_for_step(step)

        dims = dims_for_voxels(self.bbox, config.start_voxels)
        self.field = FactorizedField(dims, self.bbox, config.r_sigma, config.r_c,
                                     self.gain, init_scale=config.init_scale,
                                     generator=self.torch_gen, dtype=torch.float32,
                                     requires_grad=True)
        self.pose_refine = PoseRefinement(dataset.frame_count,
                                          dataset.skeleton.bone_count)
        self.optimizer = self._make_optimizer()
        self.render_cfg = RenderConfig(n_samples=config.n_samples, jitter=True,
                                       background=config.background, tau=self.tau)
        self.iteration = 0
        self.log: List[dict] = []

    def _make_optimizer(self):
        groups = [{"params": list(self.field.parameters()), "lr": self.config.lr_factors}]
        if self.config.lr_pose > 0:
            groups.append({"params": self.pose_refine.parameters(),
                           "lr": self.config.lr_pose})
        return torch.optim.Adam(groups, betas=(0.9, 0.99), eps=1e-8)

    # -- one optimization step ------------------------------------------------

    def train_step(self, batch=None, iteration: Optional[int] = None) -> LossReport:
        t0 = time.perf_counter()
        cfg = self.config
        i = self.iteration + 1 if iteration is None else iteration
        alpha, beta, gamma = schedules(min(i, SCHEDULE_MAX_ITER))
        if batch is None:
            batch = sample_batch(self.dataset, self.rng, cfg.patch_size,
                                 cfg.patches_per_batch)

        by_frame = {}
        for pi, (fi, y0, x0) in enumerate(batch):
            by_frame.setdefault(fi, []).append((pi, y0, x0))

        ps = cfg.patch_size
        preds = [None] * len(batch)
        targets = [None] * len(batch)
        bg = torch.as_tensor(cfg.background, dtype=torch.float64)
        for fi, items in by_frame.items():
            frame = self.dataset.frames[fi]
            pose = self.pose_refine.pose_for(fi, frame.pose)
            renderer = DeformedRenderer(self.field, self.dataset.template,
                                        self.dataset.skeleton, pose, tau=self.tau)
            pix_blocks = []
            for _, y0, x0 in items:
                ys, xs = torch.meshgrid(torch.arange(y0, y0 + ps, dtype=torch.float64),
                                        torch.arange(x0, x0 + ps, dtype=torch.float64),
                                        indexing="ij")
                pix_blocks.append(torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1))
            pixels = torch.cat(pix_blocks)
            origins, dirs = generate_rays(frame.camera, pixels)
            # float32 ray path: matches the field precision, halves step cost
            color, _, _ = renderer.render_rays(origins.to(torch.float32),
                                               dirs.to(torch.float32),
                                               self.render_cfg,
                                               generator=self.torch_gen)
            img = torch.from_numpy(frame.image)
            msk = torch.from_numpy(frame.mask.astype(np.float64))
            for j, (pi, y0, x0) in enumerate(items):
                preds[pi] = color[j * ps * ps:(j + 1) * ps * ps].reshape(ps, ps, 3)
                gt = img[y0:y0 + ps, x0:x0 + ps]
                m = msk[y0:y0 + ps, x0:x0 + ps].unsqueeze(-1)
                targets[pi] = gt * m + bg * (1.0 - m)

        pred_px = torch.cat([p.reshape(-1, 3) for p in preds])
        tgt_px = torch.cat([t.reshape(-1, 3) for t in targets])
        l_rgb = loss_rgb(pred_px, tgt_px)
        if self.perceptual_hook is not None:
            l_perc = self.perceptual_hook(torch.stack(preds), torch.stack(targets))
        else:
            l_perc = torch.zeros((), dtype=torch.float64)
        l_sparse = loss_sparse(self.field.density, self.torch_gen,
                               cfg.sparse_subsample).to(torch.float64)
        total = alpha * l_rgb + beta * l_perc + gamma * l_sparse
        if not torch.isfinite(total):
            raise TrainError(
                f"non-finite loss at iteration {i}: rgb={float(l_rgb)} "
                f"perc={float(l_perc)} sparse={float(l_sparse)}")

        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.iteration = i
        report = LossReport(i, float(l_rgb.detach()), float(l_sparse.detach()),
                            float(l_perc.detach()), alpha, beta, gamma,
                            float(total.detach()), time.perf_counter() - t0)
        self.log.append(report.record())
        return report

    # -- coarse-to-fine loop ----------------------------------------------------

    def upsample_field(self, voxels: float):
        dims = dims_for_voxels(self.bbox, voxels)
        self.field = self.field.upsample(dims).requires_grad_(True)
        self.optimizer = self._make_optimizer()

    def fit(self, progress: Optional[Callable] = None,
            epoch_callback: Optional[Callable] = None):
        """Run the full schedule; returns (field, pose_refinement, log)."""
        ups = dict((it, v) for it, v in self.config.voxel_schedule())
        total = self.config.total_iters
        for i in range(self.iteration + 1, total + 1):
            if i in ups:
                self.upsample_field(ups[i])
            report = self.train_step(iteration=i)
            if progress is not None:
                progress(report)
            if epoch_callback is not None and i % self.config.iters_per_epoch == 0:
                epoch_callback(self, i // self.config.iters_per_epoch)
        return self.field, self.pose_refine, self.log

    def optimizer_state_blob(self) -> bytes:
        """Adam moments as a pickle-free npz blob (checkpoint side-channel)."""
        arrays = {}
        for gi, group in enumerate(self.optimizer.param_groups):
            for pi, p in enumerate(group["params"]):
                st = self.optimizer.state.get(p)
                if not st:
                    continue
                key = f"g{gi}p{pi}"
                arrays[key + "_m"] = st["exp_avg"].numpy()
                arrays[key + "_v"] = st["exp_avg_sq"].numpy()
                arrays[key + "_t"] = np.asarray(
                    st["step"].item() if torch.is_tensor(st["step"]) else st["step"])
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        return buf.getvalue()


def write_log(path, log: List[dict]):
    """Training log as newline-delimited JSON records."""
    import json
    with open(path, "w") as f:
        for rec in log:
            f.write(json.dumps(rec) + "\n")
