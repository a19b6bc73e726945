"""Seeded synthetic classification task with matching salience bundles.

Each image is a grid of patches. A few "hot" patches carry a texture drawn
from the sample's class family, with a random sign so that no linear pixel
statistic separates the classes. Every other patch is flat grey, or carries
a class-independent distractor texture when ``n_distractors > 0``. The
paired bundle's first map lights up exactly the hot patches, so the
discriminative pixels always sit in the tokens that salience marks as major.

A texture detector shared across tokens needs to learn each family once.
A model that only sees the image through one MLP over all patches has to
learn it once per position, which is what separates the two paths.

With ``n_maps > 1`` the bundle also holds distractor maps over random
patches. With probability ``cam_error`` a distractor takes the top
confidence and the true class drops to second place, which models an
auxiliary classifier that confuses its top two labels. Averaging over
``K > 1`` maps then still ranks the hot patches among the majors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .salience import SalienceBundle


@dataclass(frozen=True)
class SyntheticTask:
    n_classes: int = 2
    grid: tuple = (4, 4)
    patch: tuple = (4, 4, 1)  # ph, pw, C
    n_hot: int = 2
    noise: float = 0.0
    seed: int = 0
    n_maps: int = 1
    cam_error: float = 0.0
    textures_per_class: int = 12
    n_distractors: int = 0
    amplitude: float = 0.4

    def __post_init__(self):
        rows, cols = self.grid
        if self.n_classes < 1 or self.n_maps < 1:
            raise ContractError("n_classes and n_maps must be >= 1")
        if not 0 <= self.n_hot <= rows * cols:
            raise ContractError(f"n_hot={self.n_hot} does not fit a {rows}x{cols} grid")
        if self.textures_per_class < 1 or self.n_distractors < 0:
            raise ContractError("textures_per_class must be >= 1 and n_distractors >= 0")
        if not 0.0 <= self.cam_error <= 1.0:
            raise ContractError(f"cam_error must lie in [0, 1], got {self.cam_error}")

    @property
    def image_shape(self) -> tuple:
        (rows, cols), (ph, pw, c) = self.grid, self.patch
        return (rows * ph, cols * pw, c)


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray
    bundle: SalienceBundle
    label: int
    hot: np.ndarray

    def __iter__(self):
        # unpacks as (image, bundle, label)
        return iter((self.image, self.bundle, self.label))


def _textures(rng, n, size):
    return rng.choice([-1.0, 1.0], size=(n, size))


def _paint(mask_patches, grid, patch_hw):
    rows, cols = grid
    mask = np.zeros(rows * cols)
    mask[list(mask_patches)] = 1.0
    return np.kron(mask.reshape(rows, cols), np.ones(patch_hw))


def gen_dataset(task: SyntheticTask, n: int) -> list:
    """``n`` samples with labels balanced to within one per class."""
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    rng = np.random.default_rng(task.seed)
    (rows, cols), (ph, pw, C) = task.grid, task.patch
    n_patches, size = rows * cols, ph * pw * C
    m = task.textures_per_class
    class_tex = _textures(rng, task.n_classes * m, size).reshape(task.n_classes, m, size)
    distract_tex = _textures(rng, task.n_distractors, size)
    labels = rng.permutation(np.arange(n) % task.n_classes)
    id_pool = max(task.n_classes, task.n_maps)
    samples = []
    for label in labels:
        hot = np.sort(rng.choice(n_patches, task.n_hot, replace=False))
        signs = rng.choice([-1.0, 1.0], size=n_patches)
        if task.n_distractors:
            tex = distract_tex[rng.integers(task.n_distractors, size=n_patches)]
        else:
            tex = np.zeros((n_patches, size))
        tex[hot] = class_tex[label, rng.integers(m, size=task.n_hot)]
        patches = 0.5 + task.amplitude * signs[:, None] * tex
        if task.noise:
            patches = patches + task.noise * rng.standard_normal(patches.shape)
        patches = np.clip(patches, 0.0, 1.0)
        image = patches.reshape(rows, cols, ph, pw, C).transpose(0, 2, 1, 3, 4).reshape(task.image_shape)

        maps = [_paint(hot, task.grid, (ph, pw))]
        for _ in range(task.n_maps - 1):
            maps.append(_paint(rng.choice(n_patches, max(task.n_hot, 1), replace=False), task.grid, (ph, pw)))
        maps = np.stack(maps)
        if task.noise:
            maps = maps + task.noise * rng.random(maps.shape)
        # the top map outweighs all others together, so hot patches rank first
        conf = np.concatenate([[1.0], rng.uniform(0.05, 1.0, task.n_maps - 1) / task.n_maps])
        if task.n_maps > 1 and rng.random() < task.cam_error:
            # a distractor wins, but the true class stays the runner-up
            j = 1 + rng.integers(task.n_maps - 1)
            conf[j], conf[0] = 1.0, rng.uniform(0.5, 0.9)
        others = rng.permutation([c for c in range(id_pool) if c != label])[: task.n_maps - 1]
        ids = np.concatenate([[label], others]).astype(np.int64)
        bundle = SalienceBundle(maps.astype(np.float32), conf, ids)
        samples.append(Sample(image.astype(np.float64), bundle, int(label), hot))
    return samples


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])
