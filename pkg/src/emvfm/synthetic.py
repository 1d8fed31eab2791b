"""Synthetic EM-like blob segmentation data for smoke tests and CI.

Blobs are unions of grid cells grown by a random walk, so with ``cell``
equal to the backbone patch size the masks are constant within patches.
Two styles give two visually distinct "domains".
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .datasets import DatasetId, DatasetSpec, Layout, Sample

STYLES = {
    # background level, foreground level, noise std
    "a": (0.70, 0.25, 0.06),
    "b": (0.35, 0.80, 0.10),
}


def blob_mask(rng: np.random.Generator, grid=(8, 8), n_blobs=(1, 3), blob_cells=(3, 9)) -> np.ndarray:
    gh, gw = grid
    cells = np.zeros(grid, dtype=np.uint8)
    for _ in range(rng.integers(n_blobs[0], n_blobs[1] + 1)):
        y, x = int(rng.integers(0, gh)), int(rng.integers(0, gw))
        for _ in range(rng.integers(blob_cells[0], blob_cells[1] + 1)):
            cells[y, x] = 1
            dy, dx = [(0, 1), (0, -1), (1, 0), (-1, 0)][rng.integers(0, 4)]
            y = min(max(y + dy, 0), gh - 1)
            x = min(max(x + dx, 0), gw - 1)
    return cells


def make_blob_sample(rng: np.random.Generator, size=(112, 112), cell: int = 14, style: str = "a"):
    """Return ``(image, mask)``: float32 ``(H, W)`` in [0, 1] and uint8 ``(H, W)``."""
    h, w = size
    if h % cell or w % cell:
        raise ValueError(f"size {size} must be a multiple of cell={cell}")
    bg, fg, noise = STYLES[style]
    cells = blob_mask(rng, (h // cell, w // cell))
    mask = np.kron(cells, np.ones((cell, cell), dtype=np.uint8))
    image = np.where(mask == 1, fg, bg) + rng.normal(0.0, noise, size=(h, w))
    return np.clip(image, 0.0, 1.0).astype(np.float32), mask


def make_blob_samples(n: int, seed: int = 0, size=(112, 112), cell: int = 14, style: str = "a",
                      dataset_id=DatasetId.OTHER):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        image, mask = make_blob_sample(rng, size, cell, style)
        out.append(Sample(np.repeat(image[None], 3, axis=0), mask, dataset_id, i, name=f"slice_{i:03d}.png"))
    return out


def write_synthetic_dataset(root, n_train: int = 24, n_test: int = 8, seed: int = 0, size=(112, 112),
                            cell: int = 14, style: str = "a") -> DatasetSpec:
    """Write 8-bit PNG slices (masks as 0/255) in the Lucchi split-dir layout."""
    from PIL import Image

    root = Path(root)
    rng = np.random.default_rng(seed)
    for split, n in (("train", n_train), ("test", n_test)):
        img_dir = root / split / "img"
        mask_dir = root / split / "mask"
        img_dir.mkdir(parents=True, exist_ok=True)
        mask_dir.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            image, mask = make_blob_sample(rng, size, cell, style)
            Image.fromarray(np.round(image * 255).astype(np.uint8)).save(img_dir / f"slice_{i:03d}.png")
            Image.fromarray(mask * 255).save(mask_dir / f"slice_{i:03d}.png")
    return DatasetSpec(root, Layout.LUCCHI_SPLIT_DIRS, n_train, n_test, DatasetId.OTHER)
