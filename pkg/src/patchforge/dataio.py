"""Manifests, image loading, training-crop augmentation and a synthetic corpus."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

log = logging.getLogger(__name__)

IGNORE_INDEX = 255


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    image_path: Path
    mask_path: Path | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split: str = "train"
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def has_masks(self) -> bool:
        return bool(self.entries) and all(e.mask_path is not None for e in self.entries)

    def validate(self) -> None:
        for e in self.entries:
            for p in (e.image_path, e.mask_path):
                if p is not None and not p.is_file():
                    raise ManifestError(f"dangling path in manifest: {p}")
            if e.mask_path is not None:
                with Image.open(e.image_path) as im, Image.open(e.mask_path) as m:
                    if im.size != m.size:
                        raise ManifestError(
                            f"mask {e.mask_path} is {m.size}, image is {im.size}"
                        )


@dataclass(frozen=True)
class AugmentConfig:
    mirror_prob: float = 0.5
    scale_range: tuple[float, float] = (0.5, 2.0)
    crop_size: tuple[int, int] = (96, 96)

    def __post_init__(self) -> None:
        lo, hi = self.scale_range
        if not 0.0 <= self.mirror_prob <= 1.0:
            raise ValueError(f"mirror_prob must lie in [0, 1], got {self.mirror_prob}")
        if not 0.0 < lo <= hi:
            raise ValueError(f"scale_range needs 0 < low <= high, got {self.scale_range}")


@dataclass(frozen=True)
class SyntheticSpec:
    num_images: int = 64
    image_size: int = 128
    num_classes: int = 4
    texture_seed: int = 0
    val_fraction: float = 0.2

    def __post_init__(self) -> None:
        if self.num_images < 1:
            raise ValueError("num_images must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


def load_manifest(path: str | Path, split: str | None = None, validate: bool = True) -> DatasetManifest:
    """Read ``image_path[<TAB>mask_path]`` lines; relative paths resolve against the file."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    entries = []
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        cols = raw.split("\t")
        if len(cols) > 2 or not cols[0].strip():
            raise ManifestError(f"{path}:{lineno}: expected 1 or 2 tab-separated columns, got {len(cols)}")
        img = path.parent / cols[0].strip()
        mask = path.parent / cols[1].strip() if len(cols) == 2 and cols[1].strip() else None
        entries.append(ManifestEntry(img, mask))
    manifest = DatasetManifest(entries, split or path.stem, path.parent)
    if validate:
        manifest.validate()
    return manifest


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    path = Path(path)
    lines = []
    for e in entries:
        row = str(Path(e.image_path).relative_to(path.parent))
        if e.mask_path is not None:
            row += "\t" + str(Path(e.mask_path).relative_to(path.parent))
        lines.append(row)
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_image(path: str | Path) -> np.ndarray:
    """8-bit RGB PNG as a float32 C x H x W array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64).copy()


def channel_stats(images: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    total = np.zeros(3)
    sq = np.zeros(3)
    count = 0
    for img in images:
        flat = img.reshape(img.shape[0], -1).astype(np.float64)
        total += flat.sum(1)
        sq += (flat**2).sum(1)
        count += flat.shape[1]
    mean = total / count
    std = np.sqrt(np.maximum(sq / count - mean**2, 1e-12))
    return mean.astype(np.float32), std.astype(np.float32)


def load_stats(manifest: DatasetManifest) -> tuple[np.ndarray, np.ndarray] | None:
    stats = manifest.root / "stats.json"
    if not stats.is_file():
        return None
    d = json.loads(stats.read_text())
    return np.asarray(d["mean"], dtype=np.float32), np.asarray(d["std"], dtype=np.float32)


@dataclass
class LoadedDataset:
    """Standardized images (and masks) held in memory."""

    images: list[np.ndarray]
    masks: list[np.ndarray] | None
    mean: np.ndarray
    std: np.ndarray

    def __len__(self) -> int:
        return len(self.images)


def load_dataset(
    manifest: DatasetManifest,
    stats: tuple[np.ndarray, np.ndarray] | None = None,
    need_masks: bool = False,
) -> LoadedDataset:
    """Load every entry and standardize with corpus statistics.

    Statistics come from, in order: the ``stats`` argument, ``stats.json``
    next to the manifest, or the images themselves.
    """
    if not manifest.entries:
        raise ManifestError("manifest is empty")
    if need_masks and not manifest.has_masks:
        raise ManifestError("dataset has entries without masks")
    raw = [read_image(e.image_path) for e in manifest.entries]
    stats = stats or load_stats(manifest) or channel_stats(raw)
    mean, std = stats
    images = [((im - mean[:, None, None]) / std[:, None, None]).astype(np.float32) for im in raw]
    masks = None
    if manifest.has_masks:
        masks = [read_mask(e.mask_path) for e in manifest.entries]
    return LoadedDataset(images, masks, mean, std)


# --- augmentation -------------------------------------------------------


def _resize(arr: np.ndarray, size: tuple[int, int], nearest: bool) -> np.ndarray:
    if arr.shape[-2:] == tuple(size):
        return arr
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if nearest:
        t = F.interpolate(t[None, None].double(), size=size, mode="nearest")[0, 0]
        return t.round().long().numpy()
    t = F.interpolate(t[None], size=size, mode="bilinear", align_corners=False)[0]
    return t.numpy()


def _pad_to(arr: np.ndarray, h: int, w: int, fill: int | None) -> np.ndarray:
    ph, pw = max(0, h - arr.shape[-2]), max(0, w - arr.shape[-1])
    if not ph and not pw:
        return arr
    pads = [(0, 0)] * (arr.ndim - 2) + [(ph // 2, ph - ph // 2), (pw // 2, pw - pw // 2)]
    if fill is None:
        # reflect needs pad < size; fall back to symmetric for tiny images
        mode = "reflect" if ph < arr.shape[-2] and pw < arr.shape[-1] else "symmetric"
        return np.pad(arr, pads, mode=mode)
    return np.pad(arr, pads, mode="constant", constant_values=fill)


def sample_training_crop(
    image: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    mask: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Random scale, mirror and crop.  Masks get the same geometry (nearest)."""
    scale = float(rng.uniform(*cfg.scale_range))
    mirror = bool(rng.random() < cfg.mirror_prob)
    _, h, w = image.shape
    size = (max(1, round(h * scale)), max(1, round(w * scale)))
    out = _resize(image, size, nearest=False)
    m = _resize(mask, size, nearest=True) if mask is not None else None
    if mirror:
        out = out[:, :, ::-1]
        m = m[:, ::-1] if m is not None else None
    ch, cw = cfg.crop_size
    out = _pad_to(out, ch, cw, None)
    if m is not None:
        m = _pad_to(m, ch, cw, IGNORE_INDEX)
    top = int(rng.integers(0, out.shape[1] - ch + 1))
    left = int(rng.integers(0, out.shape[2] - cw + 1))
    out = np.ascontiguousarray(out[:, top : top + ch, left : left + cw], dtype=np.float32)
    if m is not None:
        m = np.ascontiguousarray(m[top : top + ch, left : left + cw])
    return out, m


def center_crop(arr: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = arr.shape[-2:]
    ch, cw = size
    fill = None if arr.ndim == 3 else IGNORE_INDEX
    arr = _pad_to(arr, ch, cw, fill)
    h, w = arr.shape[-2:]
    top, left = (h - ch) // 2, (w - cw) // 2
    return np.ascontiguousarray(arr[..., top : top + ch, left : left + cw])


# --- synthetic corpus ---------------------------------------------------


def _class_palette(num_classes: int, rng: np.random.Generator) -> list[dict]:
    palette = []
    for c in range(num_classes):
        angle = rng.uniform(0, np.pi)
        palette.append(
            {
                "color": rng.uniform(0.15, 0.85, size=3),
                "freq": rng.uniform(0.08, 0.45),
                "angle": angle,
                "amp": rng.uniform(0.05, 0.2),
                "noise": rng.uniform(0.02, 0.12),
                # vertical preference, like sky above road
                "height": (c + 0.5) / num_classes,
            }
        )
    return palette


def _smooth_noise(rng: np.random.Generator, size: int, coarse: int = 4) -> np.ndarray:
    grid = torch.from_numpy(rng.standard_normal((1, 1, coarse, coarse)))
    return F.interpolate(grid, size=(size, size), mode="bicubic", align_corners=True)[0, 0].numpy()


def synth_image(
    spec: SyntheticSpec, palette: list[dict], rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """One RGB uint8 image (H x W x 3) and its class-id mask (H x W).

    Layout: classes occupy wavy horizontal bands ordered by their preferred
    height, plus a few blobs.  Every class has its own color, oriented
    grating and noise level.  Lighting fades from top to bottom and a color
    cast shifts from red (left) to blue (right), so both the row and the
    column of a patch are inferable from content.
    """
    n = spec.image_size
    k = spec.num_classes
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64) / n
    n_regions = int(rng.integers(2, min(6, k) + 1))
    classes = np.sort(rng.choice(k, size=min(n_regions, k), replace=False))
    cuts = np.sort(rng.uniform(0.15, 0.85, size=len(classes) - 1))
    wobble = 0.06 * _smooth_noise(rng, n)
    level = yy + wobble
    mask = np.full((n, n), classes[-1], dtype=np.int64)
    for c, cut in zip(classes[::-1][1:], cuts[::-1]):
        mask[level < cut] = c
    for _ in range(int(rng.integers(0, 3))):
        c = int(rng.choice(classes))
        cy, cx = palette[c]["height"] + rng.normal(0, 0.1), rng.uniform(0.1, 0.9)
        ry, rx = rng.uniform(0.05, 0.15, size=2)
        mask[((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1] = c

    img = np.zeros((n, n, 3))
    for c in np.unique(mask):
        p = palette[c]
        sel = mask == c
        phase = rng.uniform(0, 2 * np.pi)
        u = np.cos(p["angle"]) * xx + np.sin(p["angle"]) * yy
        grating = p["amp"] * np.sin(2 * np.pi * p["freq"] * n * u + phase)
        noise = p["noise"] * rng.standard_normal((n, n))
        tex = p["color"][None, None, :] + (grating + noise)[:, :, None]
        img[sel] = tex[sel]
    light = 0.25 * (0.5 - yy) + 0.05 * _smooth_noise(rng, n, 3)
    tint = 0.3 * (0.5 - xx)
    img = img + light[:, :, None] + tint[:, :, None] * np.array([1.0, 0.0, -1.0])
    img = np.clip(img, 0, 1)
    return (img * 255).round().astype(np.uint8), mask


def generate_synthetic_corpus(spec: SyntheticSpec, out_dir: str | Path,
                              rng: np.random.Generator | None = None) -> dict[str, Path]:
    """Write PNG images/masks, ``train``/``val``/``all`` manifests and ``stats.json``.

    The class palette depends only on ``texture_seed``; the per-image layout
    stream comes from ``rng`` (defaulting to the same seed).
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    palette = _class_palette(spec.num_classes, np.random.default_rng([spec.texture_seed, 1]))
    rng = rng if rng is not None else np.random.default_rng([spec.texture_seed, 2])
    entries = []
    for i in range(spec.num_images):
        img, mask = synth_image(spec, palette, rng)
        ip = out / "images" / f"{i:05d}.png"
        mp = out / "masks" / f"{i:05d}.png"
        Image.fromarray(img).save(ip)
        Image.fromarray(mask.astype(np.uint8), mode="L").save(mp)
        entries.append(ManifestEntry(ip, mp))
    n_val = int(round(spec.num_images * spec.val_fraction))
    if spec.num_images > 1:
        n_val = min(max(n_val, 1), spec.num_images - 1)
    else:
        n_val = 0
    train, val = entries[: spec.num_images - n_val], entries[spec.num_images - n_val :]
    write_manifest(out / "train.tsv", train)
    write_manifest(out / "val.tsv", val)
    write_manifest(out / "all.tsv", entries)
    mean, std = channel_stats([read_image(e.image_path) for e in train])
    (out / "stats.json").write_text(json.dumps({"mean": mean.tolist(), "std": std.tolist()}))
    log.info("wrote %d train / %d val images to %s", len(train), len(val), out)
    return {
        "train": out / "train.tsv",
        "val": out / "val.tsv",
        "all": out / "all.tsv",
        "stats": out / "stats.json",
    }
