import math

import numpy as np
import pytest
import torch

torch.set_num_threads(1)
torch.manual_seed(0)


def psnr(a, b, peak=1.0):
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak * peak / mse)


@pytest.fixture
def tiny_field():
    """2x2x2 field with hand-settable factors, gain 1."""
    from volrig.field import BoundingBox, FactorizedField, GridDims
    bbox = BoundingBox(torch.tensor([0.0, 0.0, 0.0]), torch.tensor([1.0, 1.0, 1.0]))
    return FactorizedField(GridDims(2, 2, 2), bbox, r_sigma=1, r_c=1, gain=1.0,
                           dtype=torch.float64)


@pytest.fixture
def two_bone():
    """2-bone chain along +X, unit offsets, identity rest pose."""
    from volrig.skinning import Skeleton
    parents = np.array([-1, 0], dtype=np.int64)
    offsets = torch.tensor([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]], dtype=torch.float64)
    return Skeleton(parents, offsets)


@pytest.fixture(scope="session")
def sphere_phantom():
    from volrig.field import GridDims
    from volrig.synthetic import sphere_phantom_field
    return sphere_phantom_field(GridDims(64, 64, 64))


@pytest.fixture(scope="session")
def small_scene():
    from volrig.synthetic import make_scene
    return make_scene(bones=2, frames=4, image_size=64, seed=0)


@pytest.fixture(scope="session")
def small_dataset(small_scene):
    from volrig.dataset import Dataset, Frame
    from volrig.synthetic import render_ground_truth
    frames = []
    for f in range(small_scene.frame_count):
        img, mask, _ = render_ground_truth(small_scene, f, n_samples=96)
        frames.append(Frame(img, mask, small_scene.cameras[f],
                            small_scene.frame_poses[f]))
    return Dataset(frames, small_scene.skeleton, small_scene.template)
