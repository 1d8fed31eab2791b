"""EM image-stack ingestion, deterministic splits, and patch-grid preprocessing."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import kernels
from .errors import ConfigError, IntegrityError, LayoutError, SplitError

log = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

IMAGE_SUFFIXES = {".png", ".tif", ".tiff"}


class DatasetId(str, enum.Enum):
    LUCCHI = "LUCCHI"
    VNC = "VNC"
    OTHER = "OTHER"


class Layout(str, enum.Enum):
    LUCCHI_SPLIT_DIRS = "LUCCHI_SPLIT_DIRS"
    VNC_STACKS = "VNC_STACKS"


@dataclass
class Sample:
    """One EM slice.

    ``image`` is float32 ``(3, H, W)`` (grayscale replicated), in [0, 1]
    until :func:`normalize` is applied. ``mask`` is a uint8 ``(H, W)``
    raster or ``None`` for unlabelled slices. ``native_size`` remembers
    the on-disk ``(H, W)`` so predictions can be scored at native
    resolution after resizing.
    """

    image: np.ndarray
    mask: Optional[np.ndarray]
    dataset_id: DatasetId
    slice_index: int
    name: str = ""
    native_size: tuple = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise IntegrityError(f"{self.name or self.slice_index}: image must be (3, H, W), got {self.image.shape}")
        if self.mask is not None and self.mask.shape != self.image.shape[1:]:
            raise IntegrityError(
                f"{self.name or self.slice_index}: image {self.image.shape[1:]} and mask {self.mask.shape} differ"
            )
        if self.slice_index < 0:
            raise ValueError("slice_index must be non-negative")
        if self.native_size is None:
            self.native_size = tuple(self.image.shape[1:])

    @property
    def size(self):
        return tuple(self.image.shape[1:])


@dataclass
class DatasetSpec:
    root_path: Path
    layout: Layout
    expected_train_count: Optional[int] = None
    expected_test_count: Optional[int] = None
    dataset_id: Optional[DatasetId] = None

    def __post_init__(self):
        self.root_path = Path(self.root_path)
        self.layout = Layout(self.layout)
        if self.dataset_id is None:
            self.dataset_id = DatasetId.LUCCHI if self.layout is Layout.LUCCHI_SPLIT_DIRS else DatasetId.VNC
        else:
            self.dataset_id = DatasetId(self.dataset_id)

    @classmethod
    def lucchi(cls, root):
        return cls(root, Layout.LUCCHI_SPLIT_DIRS, 165, 165, DatasetId.LUCCHI)

    @classmethod
    def vnc(cls, root):
        return cls(root, Layout.VNC_STACKS, 17, 3, DatasetId.VNC)


@dataclass(frozen=True)
class SplitConfig:
    validation_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.validation_fraction < 1.0:
            raise ConfigError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")


@dataclass(frozen=True)
class ResizePolicy:
    """Longest-edge resize followed by snapping each side to a patch multiple.

    ``target_longest_edge=None`` means "native longest edge, snapped down
    to a multiple of ``patch_size``".
    """

    patch_size: int
    target_longest_edge: Optional[int] = None
    image_interpolation: str = "BILINEAR"
    mask_interpolation: str = "NEAREST"

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")
        if self.target_longest_edge is not None and self.target_longest_edge < self.patch_size:
            raise ConfigError(
                f"target_longest_edge={self.target_longest_edge} is smaller than one patch ({self.patch_size})"
            )
        if self.image_interpolation != "BILINEAR" or self.mask_interpolation != "NEAREST":
            raise ConfigError("only BILINEAR images / NEAREST masks are supported")


# --------------------------------------------------------------------- loading


def _list_images(directory: Path):
    if not directory.is_dir():
        raise LayoutError(f"missing directory: {directory}")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise LayoutError(f"no PNG/TIFF slices in {directory}")
    return files


def read_raster(path: Path) -> np.ndarray:
    """Read a single-slice PNG or TIFF as a 2-D array in its native dtype."""
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        import tifffile

        arr = tifffile.imread(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.array(im)
    arr = np.asarray(arr)
    if arr.ndim == 3:
        # RGB(A) file holding a grayscale slice
        arr = arr[..., 0] if arr.shape[-1] in (3, 4) else arr[0]
    if arr.ndim != 2:
        raise IntegrityError(f"{path.name}: expected a 2-D slice, got shape {arr.shape}")
    return arr


def to_unit_float(raw: np.ndarray) -> np.ndarray:
    if np.issubdtype(raw.dtype, np.integer):
        return raw.astype(np.float32) / np.float32(np.iinfo(raw.dtype).max)
    if np.issubdtype(raw.dtype, np.bool_):
        return raw.astype(np.float32)
    out = raw.astype(np.float32)
    if out.size and (out.min() < 0.0 or out.max() > 1.0):
        raise IntegrityError("floating-point slices must already lie in [0, 1]")
    return out


def binarize_mask(raw: np.ndarray, threshold: Optional[int] = 128) -> np.ndarray:
    """``>= threshold`` becomes 1. ``threshold=None`` collapses any non-zero label."""
    if threshold is None:
        return (np.asarray(raw) > 0).astype(np.uint8)
    return kernels.binarize(raw, threshold)


def _pair_masks(images, masks):
    by_stem = {m.stem: m for m in masks}
    if all(p.stem in by_stem for p in images):
        return [(p, by_stem[p.stem]) for p in images]
    if len(images) == len(masks):
        return list(zip(images, masks))
    for p in images:
        if p.stem not in by_stem:
            raise LayoutError(f"no mask found for slice {p.name}")
    raise LayoutError("image/mask directories do not line up")  # pragma: no cover


def _load_pairs(pairs, dataset_id, threshold, offset=0):
    samples = []
    for i, (img_path, mask_path) in enumerate(pairs):
        raw = read_raster(img_path)
        gray = to_unit_float(raw)
        mask = None
        if mask_path is not None:
            raw_mask = read_raster(mask_path)
            if raw_mask.shape != raw.shape:
                raise IntegrityError(f"{img_path.name}: image {raw.shape} and mask {raw_mask.shape} differ")
            mask = binarize_mask(raw_mask, threshold)
        image = np.repeat(gray[None], 3, axis=0)
        samples.append(Sample(image, mask, dataset_id, offset + i, name=img_path.name))
    return samples


def _check_count(samples, expected, what):
    if expected is not None and len(samples) != expected:
        raise LayoutError(f"{what}: expected {expected} slices, found {len(samples)}")


def load_dataset(spec: DatasetSpec, split: str = "train", binarize_threshold: Optional[int] = 128):
    """Load one split of a dataset as an index-ordered list of :class:`Sample`.

    ``split`` is ``"train"`` or ``"test"`` for both layouts; VNC also has
    ``"unlabelled"`` (stack2, no masks). VNC train/test come from stack1:
    the last ``expected_test_count`` slices (default 3) form the test set.
    """
    root = spec.root_path
    if not root.is_dir():
        raise LayoutError(f"dataset root does not exist: {root}")

    if spec.layout is Layout.LUCCHI_SPLIT_DIRS:
        if split not in ("train", "test"):
            raise ConfigError(f"Lucchi layout has no split {split!r}")
        images = _list_images(root / split / "img")
        masks = _list_images(root / split / "mask")
        samples = _load_pairs(_pair_masks(images, masks), spec.dataset_id, binarize_threshold)
        expected = spec.expected_train_count if split == "train" else spec.expected_test_count
        _check_count(samples, expected, f"{root.name}/{split}")
        return samples

    if split == "unlabelled":
        images = _list_images(root / "stack2" / "img")
        return _load_pairs([(p, None) for p in images], spec.dataset_id, binarize_threshold)
    if split not in ("train", "test"):
        raise ConfigError(f"VNC layout has no split {split!r}")
    images = _list_images(root / "stack1" / "img")
    masks = _list_images(root / "stack1" / "mask")
    pairs = _pair_masks(images, masks)
    n_test = spec.expected_test_count if spec.expected_test_count is not None else 3
    if n_test >= len(pairs):
        raise LayoutError(f"{root.name}/stack1 has {len(pairs)} slices, cannot hold out {n_test} for test")
    if split == "train":
        samples = _load_pairs(pairs[: len(pairs) - n_test], spec.dataset_id, binarize_threshold)
        _check_count(samples, spec.expected_train_count, f"{root.name}/stack1 train")
    else:
        offset = len(pairs) - n_test
        samples = _load_pairs(pairs[offset:], spec.dataset_id, binarize_threshold, offset=offset)
    return samples


# ----------------------------------------------------------------------- split


def validation_count(n: int, fraction: float) -> int:
    """round(fraction * n) with ties to even, at least 1 and at most n - 1."""
    k = round(Fraction(repr(fraction)) * n)
    return int(min(max(k, 1), n - 1))


def make_split(samples: Sequence[Sample], cfg: SplitConfig = SplitConfig()):
    """Seeded random hold-out. Both returned lists keep the input order."""
    n = len(samples)
    if n < 2:
        raise SplitError(f"need at least 2 samples to split, got {n}")
    n_val = validation_count(n, cfg.validation_fraction)
    perm = np.random.default_rng(cfg.seed).permutation(n)
    val_idx = set(perm[:n_val].tolist())
    train = [s for i, s in enumerate(samples) if i not in val_idx]
    val = [s for i, s in enumerate(samples) if i in val_idx]
    return train, val


# ---------------------------------------------------------------------- resize


def snap_to_patch_grid(height: int, width: int, policy: ResizePolicy):
    """Output ``(H, W)`` of :func:`resize_to_patch_grid` for a given input size."""
    p = policy.patch_size
    longest = max(height, width)
    target = policy.target_longest_edge
    if target is None:
        target = max(longest // p, 1) * p
    out = []
    for side in (height, width):
        scaled = Fraction(side * target, longest)
        out.append(max(1, round(scaled / p)) * p)
    return tuple(out)


def resize_image(image: np.ndarray, size) -> np.ndarray:
    if tuple(image.shape[1:]) == tuple(size):
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image))[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0].numpy()


def resize_to_patch_grid(sample: Sample, policy: ResizePolicy) -> Sample:
    if sample.image.size == 0:
        raise ValueError("empty image")
    size = snap_to_patch_grid(*sample.size, policy)
    image = resize_image(sample.image, size)
    mask = None if sample.mask is None else kernels.resize_nearest(sample.mask, *size)
    return replace(sample, image=image, mask=mask, native_size=sample.native_size)


# --------------------------------------------------------------- normalization


def normalize(sample: Sample) -> Sample:
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)[:, None, None]
    std = np.asarray(IMAGENET_STD, dtype=np.float32)[:, None, None]
    return replace(sample, image=((sample.image - mean) / std).astype(np.float32))


# ------------------------------------------------------------ model inputs


@dataclass
class ModelInput:
    """A normalized, patch-compatible tensor plus how to map back to native.

    ``mode`` is ``"pad"`` (zero-pad bottom/right, crop logits to
    ``valid``) or ``"resize"`` (longest-edge resize, nearest-resample
    predictions back to ``native_size``).
    """

    image: torch.Tensor
    target: Optional[torch.Tensor]
    native_mask: Optional[np.ndarray]
    native_size: tuple
    valid: tuple
    mode: str
    dataset_index: int = 0
    name: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def shape(self):
        return tuple(self.image.shape[1:])


def pad_to_multiple(image: np.ndarray, patch_size: int) -> np.ndarray:
    h, w = image.shape[1:]
    ph = -h % patch_size
    pw = -w % patch_size
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)))


def to_model_input(sample: Sample, patch_size: int, policy: Optional[ResizePolicy] = None, dataset_index: int = 0):
    """Normalize and make a sample patch-compatible.

    With ``policy=None`` (single-dataset regime) the normalized image is
    zero-padded; otherwise it is resized with :func:`resize_to_patch_grid`.
    """
    native_mask = sample.mask
    if policy is None:
        normed = normalize(sample)
        image = pad_to_multiple(normed.image, patch_size)
        target = sample.mask
        mode = "pad"
        valid = sample.size
    else:
        if policy.patch_size != patch_size:
            raise ConfigError(f"resize policy patch size {policy.patch_size} != backbone patch size {patch_size}")
        resized = resize_to_patch_grid(sample, policy)
        image = normalize(resized).image
        target = resized.mask
        mode = "resize"
        valid = resized.size
    return ModelInput(
        image=torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)),
        target=None if target is None else torch.from_numpy(target.astype(np.int64)),
        native_mask=native_mask,
        native_size=sample.native_size,
        valid=tuple(valid),
        mode=mode,
        dataset_index=dataset_index,
        name=sample.name,
    )


def prediction_to_native(pred: np.ndarray, item: ModelInput) -> np.ndarray:
    """Map a model-resolution label raster back to the sample's native grid."""
    h, w = item.valid
    pred = pred[:h, :w]
    if item.mode == "resize" and pred.shape != tuple(item.native_size):
        pred = kernels.resize_nearest(pred.astype(np.uint8), *item.native_size)
    return pred
