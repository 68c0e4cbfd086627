"""Domain types, image/mask I/O and the shared resize convention.

Images are stored as float arrays ``[H, W, 3]`` and masks as ``[H, W]``, both
in ``[0, 1]``. Network code works on batched ``NCHW`` torch tensors; the
``images_to_tensor`` / ``masks_to_tensor`` helpers build those.

Bilinear resizing everywhere (data loading, decoder upsampling, metrics) uses
the half-pixel convention ``src = (dst + 0.5) * in / out - 0.5`` with
edge clamping, i.e. ``align_corners=False`` in torch terms.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")
GT_THRESHOLD = 0.5


class Task(str, enum.Enum):
    SOD = "sod"
    COD = "cod"
    BRIDGE = "bridge"


class MaskKind(str, enum.Enum):
    GROUND_TRUTH = "ground_truth"
    PREDICTION = "prediction"
    UNCERTAINTY = "uncertainty"
    WEIGHT = "weight"


class DataError(ValueError):
    """Raised for malformed inputs: missing files, shape or channel mismatches."""


@dataclass
class ImageTensor:
    data: np.ndarray
    source_path: str | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise DataError(f"image must be [H, W, 3], got {self.data.shape}")
        h, w = self.data.shape[:2]
        if h < 8 or w < 8:
            raise DataError(f"image must be at least 8x8, got {h}x{w}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise DataError("image values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]


@dataclass
class MaskTensor:
    data: np.ndarray
    kind: MaskKind = MaskKind.PREDICTION

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.kind = MaskKind(self.kind)
        if self.data.ndim != 2:
            raise DataError(f"mask must be [H, W], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DataError("mask contains non-finite values")
        lo, hi = (1.0, 6.0) if self.kind is MaskKind.WEIGHT else (0.0, 1.0)
        if self.data.min() < lo or self.data.max() > hi:
            raise DataError(f"{self.kind.value} mask values must lie in [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class FeaturePyramid:
    """Four feature groups ``[N, C_k, H_k, W_k]``, finest first."""

    groups: list

    def __post_init__(self):
        if len(self.groups) != 4:
            raise DataError(f"a pyramid has exactly 4 groups, got {len(self.groups)}")
        for a, b in zip(self.groups, self.groups[1:]):
            if a.shape[-2] != 2 * b.shape[-2] or a.shape[-1] != 2 * b.shape[-1]:
                raise DataError(
                    f"group sizes must halve: {tuple(a.shape[-2:])} -> {tuple(b.shape[-2:])}"
                )

    def __getitem__(self, k):
        return self.groups[k]

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return 4

    @property
    def channels(self) -> list[int]:
        return [g.shape[1] for g in self.groups]


@dataclass
class DatasetRecord:
    image: ImageTensor
    mask: MaskTensor | None
    task: Task
    id: str

    def __post_init__(self):
        self.task = Task(self.task)
        needs_mask = self.task in (Task.SOD, Task.COD)
        if needs_mask and self.mask is None:
            raise DataError(f"record {self.id}: {self.task.value} records need a mask")
        if not needs_mask and self.mask is not None:
            raise DataError(f"record {self.id}: bridge records carry no mask")
        if self.mask is not None and self.mask.shape != self.image.shape:
            raise DataError(
                f"record {self.id}: image {self.image.shape} and mask {self.mask.shape} differ"
            )


def read_image(path) -> ImageTensor:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
            raise DataError(f"{path}: unsupported image mode {im.mode}")
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return ImageTensor(arr / 255.0, source_path=str(path))


def read_mask(path, kind=MaskKind.GROUND_TRUTH) -> MaskTensor:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA"):
            arr = np.asarray(im, dtype=np.uint8)[..., :3]
            if not (np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 0], arr[..., 2])):
                raise DataError(f"{path}: mask must be single-channel, got shape {arr.shape}")
            arr = arr[..., 0]
        else:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    data = arr / 255.0
    kind = MaskKind(kind)
    if kind is MaskKind.GROUND_TRUTH:
        data = (data >= GT_THRESHOLD).astype(np.float64)
    return MaskTensor(data, kind)


def load_record(image_path, mask_path=None, task=None, record_id=None) -> DatasetRecord:
    """Load an image (and its mask, if given) from disk into a record.

    ``task`` defaults to ``sod`` when a mask is given and ``bridge`` otherwise.
    """
    if task is None:
        task = Task.SOD if mask_path is not None else Task.BRIDGE
    image = read_image(image_path)
    mask = None
    if mask_path is not None:
        mask = read_mask(mask_path)
        if mask.shape != image.shape:
            raise DataError(
                f"size mismatch: image {image_path} is {image.shape}, mask {mask_path} is {mask.shape}"
            )
    rid = record_id if record_id is not None else Path(image_path).stem
    return DatasetRecord(image=image, mask=mask, task=Task(task), id=rid)


def to_u8(values) -> np.ndarray:
    return np.clip(np.round(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_mask(mask, path):
    """Write a mask as 8-bit grayscale PNG, value ``round(255 * v)``."""
    data = mask.data if isinstance(mask, MaskTensor) else np.asarray(mask)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_u8(data), mode="L").save(path)


def save_image(image, path):
    data = image.data if isinstance(image, ImageTensor) else np.asarray(image)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_u8(data), mode="RGB").save(path)


def list_dataset(root, task):
    """Scan ``<root>/images`` (and ``<root>/masks`` for labelled tasks), matched by stem."""
    root = Path(root)
    task = Task(task)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise DataError(f"missing image directory: {image_dir}")
    images = {p.stem: p for p in sorted(image_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    if task is Task.BRIDGE:
        return [(stem, images[stem], None) for stem in sorted(images)]
    mask_dir = root / "masks"
    masks = {p.stem: p for p in sorted(mask_dir.glob("*.png"))} if mask_dir.is_dir() else {}
    missing = sorted(set(images) - set(masks))
    if missing:
        raise DataError(f"{root}: no mask for ids {missing[:10]}{' ...' if len(missing) > 10 else ''}")
    return [(stem, images[stem], masks[stem]) for stem in sorted(images)]


def load_dataset(root, task) -> list[DatasetRecord]:
    task = Task(task)
    return [load_record(img, msk, task, record_id=stem) for stem, img, msk in list_dataset(root, task)]


def resize_tensor(x: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of an NCHW tensor with the package-wide convention."""
    size = tuple(int(s) for s in size)
    if tuple(x.shape[-2:]) == size:
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def resize_bilinear(t, out_h: int, out_w: int):
    """Resize an ImageTensor or MaskTensor; masks stay continuous."""
    if out_h < 1 or out_w < 1:
        raise DataError(f"target size must be positive, got {out_h}x{out_w}")
    if isinstance(t, ImageTensor):
        x = torch.from_numpy(t.data).permute(2, 0, 1)[None]
        y = resize_tensor(x, (out_h, out_w))[0].permute(1, 2, 0).numpy()
        return ImageTensor(np.clip(y, 0.0, 1.0), source_path=t.source_path)
    if isinstance(t, MaskTensor):
        x = torch.from_numpy(t.data)[None, None]
        y = resize_tensor(x, (out_h, out_w))[0, 0].numpy()
        lo, hi = (1.0, 6.0) if t.kind is MaskKind.WEIGHT else (0.0, 1.0)
        return MaskTensor(np.clip(y, lo, hi), t.kind)
    raise TypeError(f"cannot resize {type(t).__name__}")


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    arrs = [im.data if isinstance(im, ImageTensor) else np.asarray(im) for im in images]
    return torch.from_numpy(np.stack(arrs)).permute(0, 3, 1, 2).to(dtype).contiguous()


def masks_to_tensor(masks, dtype=torch.float32) -> torch.Tensor:
    arrs = [m.data if isinstance(m, MaskTensor) else np.asarray(m) for m in masks]
    return torch.from_numpy(np.stack(arrs))[:, None].to(dtype).contiguous()


def set_deterministic(seed: int | None = None):
    """Seed torch/numpy and switch torch to deterministic kernels."""
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)
        np.random.seed(seed % (2**32))


def rng_for(seed: int, *stream) -> np.random.Generator:
    """Independent RNG stream keyed by ``(seed, *stream)``; order of draws elsewhere is irrelevant."""
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])
