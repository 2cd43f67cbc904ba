"""Jigsaw puzzle construction on a square grid with a fixed center cell.

Cells are indexed row-major from 0.  A permutation ``sigma`` maps a
position in the shuffled image to the original cell whose pixels now sit
there, so ``sigma[p]`` is also the classification target for position ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class PuzzleError(ValueError):
    """Raised for invalid grids, images or patch sets."""


@dataclass(frozen=True)
class GridSpec:
    side: int

    def __post_init__(self) -> None:
        if self.side < 1 or self.side % 2 == 0:
            raise PuzzleError(f"grid side must be an odd positive integer, got {self.side}")

    @property
    def num_cells(self) -> int:
        return self.side * self.side

    @property
    def center_index(self) -> int:
        return (self.num_cells - 1) // 2


@dataclass(frozen=True)
class Permutation:
    sigma: tuple[int, ...]

    def __post_init__(self) -> None:
        n = len(self.sigma)
        if sorted(self.sigma) != list(range(n)):
            raise PuzzleError(f"not a bijection on 0..{n - 1}: {self.sigma}")
        center = (n - 1) // 2
        if n % 2 == 1 and self.sigma[center] != center:
            raise PuzzleError(f"center cell {center} must stay fixed, got {self.sigma[center]}")

    @classmethod
    def identity(cls, grid: GridSpec) -> "Permutation":
        return cls(tuple(range(grid.num_cells)))

    def __len__(self) -> int:
        return len(self.sigma)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.sigma, dtype=np.int64)


@dataclass
class PuzzleSample:
    image: np.ndarray  # C x H x W, shuffled
    labels: np.ndarray  # labels[p] = sigma[p]
    permutation: Permutation
    cell_size: tuple[int, int]


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise PuzzleError(f"expected a C x H x W image, got shape {image.shape}")
    return image


def crop_to_grid(image: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Center-crop so both sides are multiples of the grid side."""
    image = _check_image(image)
    _, h, w = image.shape
    g = grid.side
    if h < g or w < g:
        raise PuzzleError(f"image {h}x{w} is smaller than the {g}x{g} grid")
    ch, cw = g * (h // g), g * (w // g)
    top, left = (h - ch) // 2, (w - cw) // 2
    return image[:, top : top + ch, left : left + cw]


def divide(image: np.ndarray, grid: GridSpec) -> list[np.ndarray]:
    """Split an image into ``grid.num_cells`` equal patches in row-major order."""
    image = crop_to_grid(image, grid)
    _, h, w = image.shape
    g = grid.side
    ph, pw = h // g, w // g
    return [
        image[:, r * ph : (r + 1) * ph, c * pw : (c + 1) * pw]
        for r in range(g)
        for c in range(g)
    ]


def sample_permutation(rng: np.random.Generator, grid: GridSpec) -> Permutation:
    """Draw uniformly among the permutations that leave the center cell in place."""
    center = grid.center_index
    others = np.array([i for i in range(grid.num_cells) if i != center])
    shuffled = rng.permutation(others)
    sigma = np.insert(shuffled, center, center)
    return Permutation(tuple(int(s) for s in sigma))


def assemble(patches: list[np.ndarray], permutation: Permutation, grid: GridSpec) -> PuzzleSample:
    """Place patch ``sigma[p]`` at position ``p`` and return the shuffled image."""
    if len(patches) != grid.num_cells or len(permutation) != grid.num_cells:
        raise PuzzleError(
            f"expected {grid.num_cells} patches and permutation entries, "
            f"got {len(patches)} and {len(permutation)}"
        )
    shapes = {np.shape(p) for p in patches}
    if len(shapes) != 1:
        raise PuzzleError(f"patches differ in shape: {sorted(shapes)}")
    c, ph, pw = _check_image(patches[0]).shape
    g = grid.side
    out = np.empty((c, g * ph, g * pw), dtype=np.asarray(patches[0]).dtype)
    for p, src in enumerate(permutation.sigma):
        r, col = divmod(p, g)
        out[:, r * ph : (r + 1) * ph, col * pw : (col + 1) * pw] = _check_image(patches[src])
    return PuzzleSample(
        image=out,
        labels=permutation.as_array(),
        permutation=permutation,
        cell_size=(ph, pw),
    )


def invert(permutation: Permutation) -> Permutation:
    inv = [0] * len(permutation)
    for p, s in enumerate(permutation.sigma):
        inv[s] = p
    return Permutation(tuple(inv))


def make_puzzle(image: np.ndarray, grid: GridSpec, rng: np.random.Generator) -> PuzzleSample:
    return assemble(divide(image, grid), sample_permutation(rng, grid), grid)


def dump_puzzle(sample: PuzzleSample, stem: str | Path) -> tuple[Path, Path]:
    """Write ``<stem>.png`` plus a ``<stem>.txt`` sidecar with ``p:label`` lines.

    Float images are min-max scaled to 8 bits for viewing.
    """
    from PIL import Image

    stem = Path(stem)
    img = np.asarray(sample.image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    arr = (img * 255).round().astype(np.uint8).transpose(1, 2, 0)
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    png = stem.with_suffix(".png")
    txt = stem.with_suffix(".txt")
    Image.fromarray(arr).save(png)
    txt.write_text("".join(f"{p}:{int(l)}\n" for p, l in enumerate(sample.labels)))
    return png, txt
