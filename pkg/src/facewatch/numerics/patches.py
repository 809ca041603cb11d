"""Image to patch-grid conversion and its exact inverse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import NumericsError


@dataclass(frozen=True)
class PatchSet:
    """Flattened non-overlapping square patches of an RGB image.

    Row-major patch order; within a patch, values are flattened row, then
    column, then channel. grid_h and grid_w count patch blocks per axis, so
    n = grid_h * grid_w and the original image is (grid_h*p) x (grid_w*p) x 3.
    """

    patches: np.ndarray  # n x (p*p*3), float64
    p: int
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.p <= 0:
            raise NumericsError(f"patch size must be positive, got {self.p}")
        if self.grid_h <= 0 or self.grid_w <= 0:
            raise NumericsError(f"empty patch grid {self.grid_h}x{self.grid_w}")
        expected = (self.grid_h * self.grid_w, self.p * self.p * 3)
        if self.patches.shape != expected:
            raise NumericsError(
                f"patch matrix shape {self.patches.shape}, expected {expected}"
            )
        if not np.all(np.isfinite(self.patches)):
            raise NumericsError("patch values must be finite")

    @property
    def n(self) -> int:
        return self.grid_h * self.grid_w


def patchify(image: np.ndarray, p: int) -> PatchSet:
    """Split an HxWx3 image into p x p patches.

    Height and width must be divisible by p.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise NumericsError(f"expected an HxWx3 image, got shape {image.shape}")
    height, width = image.shape[0], image.shape[1]
    if p <= 0 or height % p != 0 or width % p != 0:
        raise NumericsError(
            f"image {height}x{width} not divisible into {p}x{p} patches"
        )
    grid_h, grid_w = height // p, width // p
    rows = []
    for gy in range(grid_h):
        for gx in range(grid_w):
            block = image[gy * p:(gy + 1) * p, gx * p:(gx + 1) * p, :]
            rows.append(block.reshape(-1))  # C order: row, column, channel
    return PatchSet(patches=np.array(rows), p=p, grid_h=grid_h, grid_w=grid_w)


def unpatchify(patch_set: PatchSet) -> np.ndarray:
    """Reassemble the original image bit-exactly."""
    p = patch_set.p
    image = np.empty((patch_set.grid_h * p, patch_set.grid_w * p, 3), dtype=np.float64)
    for index in range(patch_set.n):
        gy, gx = divmod(index, patch_set.grid_w)
        block = patch_set.patches[index].reshape(p, p, 3)
        image[gy * p:(gy + 1) * p, gx * p:(gx + 1) * p, :] = block
    return image
