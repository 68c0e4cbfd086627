"""Data interaction, foreground cropping, bridge-set selection, batching and toy data."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .core import (
    DataError,
    DatasetRecord,
    ImageTensor,
    MaskKind,
    MaskTensor,
    Task,
    images_to_tensor,
    masks_to_tensor,
    resize_bilinear,
    rng_for,
    save_image,
    save_mask,
)

log = logging.getLogger(__name__)

CROP_EXTEND = {"raw": 0, "ccrop": 0, "mcrop": 80, "lcrop": 150}
CROP_MODES = ("raw", "ccrop", "mcrop", "lcrop")
DEFAULT_SCALES = (0.75, 1.0, 1.25)
SOD_MIN_GAP = 0.3
COD_MAX_GAP = 0.05
TOY_RETRIES = 50
# texture std of the toy background; low enough that the faint COD step is learnable
TOY_TEXTURE_AMP = 0.02


@dataclass
class CropSpec:
    mode: str = "ccrop"
    max_extend_px: int | None = None

    def __post_init__(self):
        if self.mode not in CROP_EXTEND:
            raise ValueError(f"unknown crop mode {self.mode!r}")
        if self.max_extend_px is None:
            self.max_extend_px = CROP_EXTEND[self.mode]


@dataclass
class SelectionReport:
    ranked_ids: list = field(default_factory=list)
    M: int = 0

    @property
    def chosen(self):
        return self.ranked_ids[: min(self.M, len(self.ranked_ids))]

    @property
    def chosen_ids(self):
        return [rid for rid, _ in self.chosen]

    def write(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(f"{rid}\t{score!r}\n" for rid, score in self.ranked_ids))

    @classmethod
    def read(cls, path, M=None):
        ranked = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                rid, score = line.split("\t")
                ranked.append((rid, float(score)))
        return cls(ranked, len(ranked) if M is None else M)


def _arr(m):
    if isinstance(m, MaskTensor):
        return m.data
    if isinstance(m, torch.Tensor):
        return m.detach().cpu().double().numpy()
    return np.asarray(m, dtype=np.float64)


def wmae(pred, y) -> float:
    """Absolute error normalised by ground-truth foreground mass."""
    p, g = _arr(pred), _arr(y)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    fg = g.sum()
    if fg <= 0:
        raise ValueError("wMAE is undefined for an all-zero ground truth")
    return float(np.abs(g - p).sum() / fg)


def rank(scores) -> list:
    """Ascending by score, ties by id."""
    return sorted(((rid, float(s)) for rid, s in scores), key=lambda t: (t[1], t[0]))


def select_interaction(cod_records, sod_model, M=403) -> SelectionReport:
    """Rank COD training records by the wMAE of a SOD model's prediction.

    ``sod_model`` maps an ImageTensor to a probability map of the same size.
    """
    if not cod_records:
        raise DataError("select_interaction needs a non-empty COD dataset")
    if sod_model is None:
        raise DataError("select_interaction needs a trained SOD model")
    scores = []
    for rec in cod_records:
        scores.append((rec.id, wmae(sod_model(rec.image), rec.mask)))
    return SelectionReport(rank(scores), M)


def bridge_score(sod_pred, cod_pred, mask=None, eps=1e-6) -> float:
    if mask is not None:
        return 0.5 * (wmae(sod_pred, mask) + wmae(cod_pred, mask))
    ref = _arr(cod_pred)
    if ref.sum() <= eps:
        return float("inf")
    return wmae(sod_pred, ref)


def select_bridge(pool_records, sod_model, cod_model, K=200, use_masks=False) -> SelectionReport:
    """Rank pool images by SOD/COD prediction discrepancy (the COD map is the reference).

    With ``use_masks`` each record's own mask is the reference for both predictions.
    """
    if not pool_records:
        raise DataError("select_bridge needs a non-empty pool")
    scores = []
    for rec in pool_records:
        mask = rec.mask if use_masks else None
        if use_masks and mask is None:
            raise DataError(f"pool record {rec.id} has no mask")
        scores.append((rec.id, bridge_score(sod_model(rec.image), cod_model(rec.image), mask)))
    return SelectionReport(rank(scores), K)


def foreground_box(mask, threshold=0.5):
    """Tight inclusive box ``(top, left, bottom, right)`` around foreground pixels."""
    fg = _arr(mask) >= threshold
    if not fg.any():
        raise DataError("foreground crop needs at least one foreground pixel")
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def crop_box(mask, spec: CropSpec, rng):
    h, w = _arr(mask).shape
    if spec.mode == "raw":
        return 0, 0, h - 1, w - 1
    top, left, bottom, right = foreground_box(mask)
    if spec.max_extend_px > 0:
        ext = rng.integers(0, spec.max_extend_px, size=4, endpoint=True)
        top, left = max(0, top - int(ext[0])), max(0, left - int(ext[1]))
        bottom, right = min(h - 1, bottom + int(ext[2])), min(w - 1, right + int(ext[3]))
    return top, left, bottom, right


def foreground_crop(record: DatasetRecord, spec: CropSpec, rng, out_size=None) -> DatasetRecord:
    """Crop image and mask to the (possibly extended) foreground box, then resize.

    The cropped mask keeps the binary ground truth untouched; ``out_size=None``
    skips the resize.
    """
    if record.mask is None:
        raise DataError(f"record {record.id} has no mask to crop around")
    top, left, bottom, right = crop_box(record.mask, spec, rng)
    img = record.image.data[top : bottom + 1, left : right + 1]
    msk = record.mask.data[top : bottom + 1, left : right + 1]
    if min(img.shape[:2]) < 8:
        # ImageTensor needs 8x8; grow the box symmetrically inside the image
        h, w = record.mask.shape
        cy, cx = (top + bottom) / 2, (left + right) / 2
        hh, hw = max(bottom - top + 1, 8), max(right - left + 1, 8)
        top = int(np.clip(round(cy - (hh - 1) / 2), 0, h - hh))
        left = int(np.clip(round(cx - (hw - 1) / 2), 0, w - hw))
        img = record.image.data[top : top + hh, left : left + hw]
        msk = record.mask.data[top : top + hh, left : left + hw]
    out = DatasetRecord(ImageTensor(img, record.image.source_path), MaskTensor(msk, record.mask.kind), record.task, record.id)
    if out_size is not None:
        out = resize_record(out, out_size)
    return out


def resize_record(record: DatasetRecord, size) -> DatasetRecord:
    h, w = (size, size) if np.isscalar(size) else size
    image = resize_bilinear(record.image, h, w)
    mask = resize_bilinear(record.mask, h, w) if record.mask is not None else None
    return DatasetRecord(image, mask, record.task, record.id)


def snap32(size: float) -> int:
    """Nearest multiple of 32 (ties round down), at least 32."""
    q = size / 32.0
    lo = int(np.floor(q))
    n = lo if q - lo <= 0.5 else lo + 1
    return max(32, 32 * n)


@dataclass
class Batch:
    images: torch.Tensor
    masks: torch.Tensor | None
    ids: list
    size: int


def make_batch(records, size, dtype=torch.float32) -> Batch:
    recs = [resize_record(r, size) for r in records]
    masks = None
    if all(r.mask is not None for r in recs):
        masks = masks_to_tensor([r.mask for r in recs], dtype)
    return Batch(images_to_tensor([r.image for r in recs], dtype), masks, [r.id for r in recs], size)


def batch_multiscale(records, batch_size, base=352, scales=DEFAULT_SCALES, rng=None, crop_modes=None, dtype=torch.float32) -> Batch:
    """Draw one batch: a single scale for all members, optional random foreground crops."""
    rng = rng if rng is not None else np.random.default_rng()
    n = len(records)
    if n == 0:
        raise DataError("cannot batch an empty dataset")
    idx = rng.choice(n, size=batch_size, replace=n < batch_size)
    scale = float(scales[rng.integers(len(scales))])
    size = snap32(round(base * scale))
    chosen = []
    for i in idx:
        rec = records[int(i)]
        if crop_modes:
            mode = crop_modes[rng.integers(len(crop_modes))]
            if mode != "raw":
                rec = foreground_crop(rec, CropSpec(mode), rng)
        chosen.append(rec)
    return make_batch(chosen, size, dtype)


def _smooth_noise(rng, size, sigma, amp):
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size, 3)), sigma=(sigma, sigma, 0), mode="wrap")
    field_ /= field_.std() + 1e-12
    return amp * field_


def _random_shape(rng, size, min_frac=0.12, max_frac=0.35):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = rng.uniform(min_frac, max_frac) * size
    cy, cx = rng.uniform(r * 0.8, size - r * 0.8, size=2)
    kind = rng.integers(3)
    if kind == 0:
        ry, rx = r * rng.uniform(0.6, 1.0), r * rng.uniform(0.6, 1.0)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == 1:
        hy, hx = r * rng.uniform(0.5, 1.0), r * rng.uniform(0.5, 1.0)
        return (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
    # star-ish blob: radius modulated by angle
    ang = np.arctan2(yy - cy, xx - cx)
    k = rng.integers(3, 6)
    rad = r * (0.75 + 0.25 * np.cos(k * ang + rng.uniform(0, 2 * np.pi)))
    return np.hypot(yy - cy, xx - cx) <= rad


def luminance(img):
    return img @ np.array([0.299, 0.587, 0.114])


def toy_sample(rng, size, task):
    """One synthetic image/mask pair.

    SOD: a vivid flat-coloured shape on a muted textured background.
    COD: the same background texture inside the shape, lifted by a small
    luminance offset, so only the faint step at the boundary gives it away.
    """
    for _ in range(100):
        mask = _random_shape(rng, size)
        if mask.sum() >= 16 and (~mask).sum() >= 16:
            break
    base = rng.uniform(0.3, 0.6, size=3)
    texture = np.clip(base + _smooth_noise(rng, size, sigma=rng.uniform(1.0, 2.5), amp=TOY_TEXTURE_AMP), 0, 1)
    if task == "sod":
        lum_bg = luminance(texture[~mask]).mean()
        target = lum_bg + (0.45 if lum_bg < 0.5 else -0.45)
        colour = np.clip(rng.uniform(0, 1, size=3), 0, 1)
        colour = np.clip(colour + (target - luminance(colour)), 0, 1)
        img = texture.copy()
        img[mask] = colour
    else:
        offset = rng.choice([-1.0, 1.0]) * rng.uniform(0.03, 0.04)
        img = texture.copy()
        img[mask] = np.clip(texture[mask] + offset, 0, 1)
    return np.clip(img, 0, 1), mask.astype(np.float64)


def contrast_gap(img, mask):
    lum = luminance(img)
    m = mask >= 0.5
    return abs(lum[m].mean() - lum[~m].mean())


@dataclass
class ToyRoots:
    sod: Path
    cod: Path
    bridge: Path | None = None


def make_toy_dataset(n_sod, n_cod, size, seed, out_dir, n_bridge=0) -> ToyRoots:
    """Write the synthetic SOD/COD sets (and an optional unlabeled bridge pool).

    Layout per set: ``images/<id>.png`` and ``masks/<id>.png``.
    """
    if size % 32:
        raise ValueError(f"toy image size must be divisible by 32, got {size}")
    out_dir = Path(out_dir)
    roots = ToyRoots(out_dir / "sod", out_dir / "cod", out_dir / "bridge" if n_bridge else None)
    for task, n, root in (("sod", n_sod, roots.sod), ("cod", n_cod, roots.cod)):
        rng = rng_for(seed, 0 if task == "sod" else 1)
        for i in range(n):
            for _ in range(TOY_RETRIES):
                img, mask = toy_sample(rng, size, task)
                gap = contrast_gap(img, mask)
                if (gap > SOD_MIN_GAP) if task == "sod" else (gap < COD_MAX_GAP):
                    break
            else:
                raise AssertionError(f"toy {task} sample {i} has luminance gap {gap:.3f}")
            rid = f"{task}_{i:04d}"
            save_image(img, root / "images" / f"{rid}.png")
            save_mask(mask, root / "masks" / f"{rid}.png")
    if n_bridge:
        rng = rng_for(seed, 2)
        for i in range(n_bridge):
            img, _ = toy_sample(rng, size, "sod" if i % 2 == 0 else "cod")
            save_image(img, roots.bridge / "images" / f"bridge_{i:04d}.png")
    return roots


def augmentation_manifest_path(sod_root) -> Path:
    sod_root = Path(sod_root)
    return sod_root.parent / f"{sod_root.name}.interaction.txt"


def write_augmentation_manifest(sod_root, cod_root, ids) -> Path:
    path = augmentation_manifest_path(sod_root)
    lines = [f"# cod_root={Path(cod_root).resolve()}"] + list(ids)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_augmentation_manifest(sod_root):
    """Returns ``(cod_root, ids)`` or ``None`` if no manifest exists."""
    path = augmentation_manifest_path(sod_root)
    if not path.is_file():
        return None
    cod_root, ids = None, []
    for line in path.read_text().splitlines():
        if line.startswith("# cod_root="):
            cod_root = Path(line.split("=", 1)[1])
        elif line.strip() and not line.startswith("#"):
            ids.append(line.strip())
    return cod_root, ids


def augment_sod_records(sod_records, cod_records, ids):
    """Append the selected COD records, relabelled as SOD, to the SOD set."""
    by_id = {r.id: r for r in cod_records}
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise DataError(f"interaction ids not in COD set: {missing[:10]}")
    extra = [DatasetRecord(by_id[i].image, by_id[i].mask, Task.SOD, by_id[i].id) for i in ids]
    return list(sod_records) + extra


def corrupt_band(mask: MaskTensor, rows) -> MaskTensor:
    """Flip ground-truth labels inside a horizontal band of rows ``[r0, r1)``."""
    data = mask.data.copy()
    r0, r1 = rows
    data[r0:r1] = 1.0 - data[r0:r1]
    return MaskTensor(data, MaskKind.GROUND_TRUTH)
