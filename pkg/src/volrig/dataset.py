"""On-disk dataset layout and the in-memory training dataset.

A dataset directory contains:
  cameras.json    per-frame pinhole intrinsics/extrinsics (world-to-camera,
                  +Z forward)
  skeleton.json   bone tree, rest offsets, rest pose (axis-angle)
  template.mesh   rigged template (binary mesh format)
  poses.json      per-frame pose parameters (axis-angle + root translation)
  images/%06d.png, masks/%06d.png
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import List

import numpy as np
import torch

from . import assets
from .raymarch import Camera, read_png, write_png
from .skinning import Pose, Skeleton, SkinnedTemplate


class DatasetError(ValueError):
    pass


@dataclass
class Frame:
    image: np.ndarray   # [H, W, 3] float in [0, 1]
    mask: np.ndarray    # [H, W] bool
    camera: Camera
    pose: Pose


@dataclass
class Dataset:
    frames: List[Frame]
    skeleton: Skeleton
    template: SkinnedTemplate

    def __post_init__(self):
        if not self.frames:
            raise DatasetError("dataset needs at least one frame")
        shape = self.frames[0].image.shape
        for i, f in enumerate(self.frames):
            if f.image.shape != shape:
                raise DatasetError(f"frame {i}: image size mismatch")
            if not f.mask.any():
                raise DatasetError(f"frame {i}: mask has no foreground pixels")

    @property
    def frame_count(self) -> int:
        return len(self.frames)


def _camera_to_json(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "width": cam.width, "height": cam.height,
        "rotation": cam.rotation.tolist(),
        "translation": cam.translation.tolist(),
    }


def _camera_from_json(d: dict) -> Camera:
    return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                  rotation=torch.tensor(d["rotation"], dtype=torch.float64),
                  translation=torch.tensor(d["translation"], dtype=torch.float64),
                  width=int(d["width"]), height=int(d["height"]))


def _pose_to_json(pose: Pose) -> dict:
    return {"axis_angle": pose.axis_angle().tolist(),
            "root_translation": pose.root_translation.tolist()}


def _pose_from_json(d: dict) -> Pose:
    return Pose.from_axis_angle(torch.tensor(d["axis_angle"], dtype=torch.float64),
                                torch.tensor(d["root_translation"], dtype=torch.float64))


def template_to_rigged_mesh(template: SkinnedTemplate) -> assets.RiggedMesh:
    return assets.RiggedMesh(
        template.vertices.detach().numpy(), template.faces,
        template.bone_indices, template.bone_weights.detach().numpy())


def rigged_mesh_to_template(mesh: assets.RiggedMesh) -> SkinnedTemplate:
    return SkinnedTemplate(
        torch.as_tensor(np.asarray(mesh.vertices, dtype=np.float64)),
        mesh.faces.astype(np.int64),
        mesh.bone_indices.astype(np.int64),
        torch.as_tensor(np.asarray(mesh.bone_weights, dtype=np.float64)))


def write_dataset(root, frames: List[Frame], skeleton: Skeleton,
                  template: SkinnedTemplate):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "masks"), exist_ok=True)
    with open(os.path.join(root, "cameras.json"), "w") as f:
        json.dump([_camera_to_json(fr.camera) for fr in frames], f, indent=1)
    with open(os.path.join(root, "poses.json"), "w") as f:
        json.dump([_pose_to_json(fr.pose) for fr in frames], f, indent=1)
    with open(os.path.join(root, "skeleton.json"), "w") as f:
        json.dump({
            "parents": skeleton.parents.tolist(),
            "offsets": skeleton.offsets.tolist(),
            "rest_pose": _pose_to_json(skeleton.rest_pose),
        }, f, indent=1)
    assets.write_mesh(os.path.join(root, "template.mesh"),
                      template_to_rigged_mesh(template))
    for i, fr in enumerate(frames):
        write_png(os.path.join(root, "images", f"{i:06d}.png"), fr.image)
        write_png(os.path.join(root, "masks", f"{i:06d}.png"),
                  fr.mask.astype(np.float64))


def load_dataset(root) -> Dataset:
    def _path(name):
        p = os.path.join(root, name)
        if not os.path.exists(p):
            raise DatasetError(f"missing dataset file: {p}")
        return p

    with open(_path("cameras.json")) as f:
        cameras = [_camera_from_json(d) for d in json.load(f)]
    with open(_path("poses.json")) as f:
        poses = [_pose_from_json(d) for d in json.load(f)]
    with open(_path("skeleton.json")) as f:
        sk = json.load(f)
    skeleton = Skeleton(np.asarray(sk["parents"], dtype=np.int64),
                        torch.tensor(sk["offsets"], dtype=torch.float64),
                        _pose_from_json(sk["rest_pose"]))
    template = rigged_mesh_to_template(assets.read_mesh(_path("template.mesh")))
    if len(cameras) != len(poses):
        raise DatasetError("cameras.json and poses.json disagree on frame count")
    frames = []
    for i in range(len(cameras)):
        img = read_png(_path(os.path.join("images", f"{i:06d}.png")))
        msk = read_png(_path(os.path.join("masks", f"{i:06d}.png"))) > 0.5
        frames.append(Frame(img, msk, cameras[i], poses[i]))
    return Dataset(frames, skeleton, template)
