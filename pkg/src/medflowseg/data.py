"""Dataset handling: mask encoding, PNG ingestion, and a synthetic shape generator.

Label maps are carried as integer class indices.  For the flow they are
encoded as signed one-hot tensors valued in {-1, +1}: zero-centered so the
standard-normal prior and the target occupy comparable ranges, and with a
margin of 2 between the winning channel and the rest, so decoding by argmax
tolerates any perturbation of sup-norm below 1.

Dataset layout on disk::

    root/
      images/<id>.png    8-bit grayscale or RGB
      masks/<id>.png     8-bit single-channel class indices
      manifest.json      num_classes, resolution, seed (if synthetic), ...
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor

from .errors import DataError, DomainError

MANIFEST_NAME = "manifest.json"

# Distinct colors for indexed-color predictions and overlays; class 0 is black.
CLASS_COLORS = (
    (0, 0, 0),
    (230, 80, 80),
    (80, 200, 120),
    (90, 120, 230),
    (230, 200, 80),
    (200, 90, 210),
    (90, 210, 210),
    (240, 150, 60),
)


@dataclass(frozen=True)
class MaskEncoding:
    """Bijection between integer label maps and continuous K-channel targets."""

    num_classes: int
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self) -> None:
        if self.num_classes < 1:
            raise DomainError(f"num_classes must be >= 1, got {self.num_classes}")

    @property
    def channels(self) -> int:
        return self.num_classes


def encode_mask(labelmap: Tensor, enc: MaskEncoding) -> Tensor:
    """Map [H, W] or [B, H, W] integer labels to signed one-hot [*, K, H, W]."""
    labels = labelmap.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= enc.num_classes):
        raise DataError(
            f"labels must lie in [0, {enc.num_classes}), found range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )
    onehot = torch.nn.functional.one_hot(labels, enc.num_classes)
    onehot = onehot.movedim(-1, -3).to(torch.float32)
    return onehot * (enc.high - enc.low) + enc.low


def decode_mask(x: Tensor, enc: MaskEncoding) -> Tensor:
    """Per-pixel argmax over channels; ties resolve to the lowest index."""
    channel_dim = -3
    if x.shape[channel_dim] != enc.num_classes:
        raise DataError(
            f"expected {enc.num_classes} channels, got {x.shape[channel_dim]}"
        )
    return torch.argmax(x, dim=channel_dim)


@dataclass(frozen=True)
class Sample:
    """One loaded case: normalized image, label map, and its identifier."""

    image: Tensor
    labelmap: Tensor
    id: str


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the deterministic synthetic-shapes dataset."""

    count: int = 64
    resolution: int = 64
    num_classes: int = 3
    shapes: tuple[str, ...] = ("disk", "ring", "rectangle")
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if self.count < 1:
            raise DomainError(f"count must be >= 1, got {self.count}")
        if self.resolution < 8:
            raise DomainError(f"resolution must be >= 8, got {self.resolution}")
        if self.num_classes < 2:
            raise DomainError("synthetic datasets need at least one foreground class")
        unknown = set(self.shapes) - {"disk", "ring", "rectangle"}
        if unknown:
            raise DomainError(f"unknown shapes: {sorted(unknown)}")


def rasterize_disk(resolution: int, cx: float, cy: float, radius: float) -> np.ndarray:
    """Boolean mask of the disk (x-cx)^2 + (y-cy)^2 <= radius^2."""
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    return (xx - cx) ** 2 + (yy - cy) ** 2 <= radius**2


def rasterize_ring(
    resolution: int, cx: float, cy: float, r_outer: float, r_inner: float
) -> np.ndarray:
    yy, xx = np.mgrid[0:resolution, 0:resolution]
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    return (d2 <= r_outer**2) & (d2 > r_inner**2)


def rasterize_rectangle(resolution: int, x0: int, y0: int, x1: int, y1: int) -> np.ndarray:
    mask = np.zeros((resolution, resolution), dtype=bool)
    mask[y0 : y1 + 1, x0 : x1 + 1] = True
    return mask


def _random_shape_mask(rng: np.random.Generator, resolution: int, shape: str) -> np.ndarray:
    margin = resolution // 10
    if shape == "disk":
        r = rng.uniform(resolution / 7, resolution / 4.5)
        cx = rng.uniform(margin + r, resolution - margin - r)
        cy = rng.uniform(margin + r, resolution - margin - r)
        return rasterize_disk(resolution, cx, cy, r)
    if shape == "ring":
        r_out = rng.uniform(resolution / 6, resolution / 4)
        r_in = r_out * rng.uniform(0.3, 0.5)
        cx = rng.uniform(margin + r_out, resolution - margin - r_out)
        cy = rng.uniform(margin + r_out, resolution - margin - r_out)
        return rasterize_ring(resolution, cx, cy, r_out, r_in)
    # rectangle
    w = int(rng.integers(resolution // 5, resolution // 3))
    h = int(rng.integers(resolution // 5, resolution // 3))
    x0 = int(rng.integers(margin, resolution - margin - w))
    y0 = int(rng.integers(margin, resolution - margin - h))
    return rasterize_rectangle(resolution, x0, y0, x0 + w, y0 + h)


def _class_intensity(cls: int, num_classes: int) -> float:
    # Spread foreground intensities over (0.3, 0.95] so classes are separable
    # from the image alone; background stays at 0.1.
    if num_classes == 2:
        return 0.8
    return 0.3 + 0.65 * (cls - 1) / (num_classes - 2)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Render the dataset described by `spec` into `out_dir`; returns the manifest path.

    Every image contains one randomly placed, randomly sized shape per
    foreground class (later classes overwrite earlier ones where they
    overlap).  Image intensity encodes the class so the task is learnable;
    Gaussian pixel noise of standard deviation `spec.noise` is added before
    quantization.  Identical specs produce byte-identical datasets.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    res = spec.resolution

    for i in range(spec.count):
        label = np.zeros((res, res), dtype=np.uint8)
        image = np.full((res, res), 0.1, dtype=np.float64)
        for cls in range(1, spec.num_classes):
            shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
            mask = _random_shape_mask(rng, res, shape)
            label[mask] = cls
            image[mask] = _class_intensity(cls, spec.num_classes)
        if spec.noise > 0:
            image = image + rng.normal(0.0, spec.noise, size=image.shape)
        image = np.clip(image, 0.0, 1.0)
        stem = f"synth_{i:04d}"
        Image.fromarray((image * 255).round().astype(np.uint8), mode="L").save(
            out / "images" / f"{stem}.png"
        )
        Image.fromarray(label, mode="L").save(out / "masks" / f"{stem}.png")

    manifest = {
        "num_classes": spec.num_classes,
        "resolution": spec.resolution,
        "count": spec.count,
        "noise": spec.noise,
        "shapes": list(spec.shapes),
        "seed": spec.seed,
    }
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def save_label_png(path: str | Path, labels) -> None:
    """Write a label map as an indexed-color PNG with the fixed class palette."""
    arr = np.asarray(labels, dtype=np.uint8)
    img = Image.fromarray(arr, mode="P")
    palette = []
    for i in range(256):
        palette.extend(CLASS_COLORS[i % len(CLASS_COLORS)] if i < len(CLASS_COLORS) else (0, 0, 0))
    img.putpalette(palette)
    img.save(path)


def load_label_png(path: str | Path) -> np.ndarray:
    """Read a label map saved by `save_label_png` (or any single-channel PNG)."""
    img = Image.open(path)
    if img.mode not in ("P", "L"):
        img = img.convert("L")
    return np.asarray(img, dtype=np.int64)


def overlay_image(image, labels, alpha: float = 0.45) -> Image.Image:
    """Blend a grayscale/RGB image with the colored label map for inspection."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    img = np.clip(img, 0.0, 255.0)
    labels = np.asarray(labels)
    colors = np.array(CLASS_COLORS, dtype=np.float64)
    colored = colors[np.clip(labels, 0, len(CLASS_COLORS) - 1)]
    fg = (labels > 0)[..., None]
    blended = np.where(fg, (1 - alpha) * img + alpha * colored, img)
    return Image.fromarray(blended.round().astype(np.uint8), mode="RGB")


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"missing {MANIFEST_NAME} in {root}")
    return json.loads(path.read_text())


def load_dataset(
    root: str | Path,
    resolution: int | None = None,
    num_classes: int | None = None,
) -> list[Sample]:
    """Load image/mask pairs from `root` in deterministic lexicographic order.

    Images are bilinear-resized and normalized to [-1, 1]; masks are
    nearest-neighbor-resized so no new labels appear.  `resolution` and
    `num_classes` default to the manifest values.
    """
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    if not images_dir.is_dir() or not masks_dir.is_dir():
        raise DataError(f"{root} must contain images/ and masks/ directories")

    if resolution is None or num_classes is None:
        manifest = read_manifest(root)
        resolution = resolution or int(manifest["resolution"])
        num_classes = num_classes or int(manifest["num_classes"])

    image_stems = {p.stem for p in images_dir.glob("*.png")}
    mask_stems = {p.stem for p in masks_dir.glob("*.png")}
    if image_stems != mask_stems:
        missing_masks = sorted(image_stems - mask_stems)
        missing_images = sorted(mask_stems - image_stems)
        raise DataError(
            f"unmatched stems: images without masks {missing_masks}, "
            f"masks without images {missing_images}"
        )

    samples = []
    for stem in sorted(image_stems):
        img = Image.open(images_dir / f"{stem}.png")
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB" if "A" in img.mode or img.mode == "P" else "L")
        if img.size != (resolution, resolution):
            img = img.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(img, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr.transpose(2, 0, 1)
        image = torch.from_numpy(arr * 2.0 - 1.0)

        msk = Image.open(masks_dir / f"{stem}.png")
        if msk.mode not in ("P", "L"):
            msk = msk.convert("L")
        if msk.size != (resolution, resolution):
            msk = msk.resize((resolution, resolution), Image.NEAREST)
        label = torch.from_numpy(np.asarray(msk, dtype=np.int64))
        if label.numel() and int(label.max()) >= num_classes:
            raise DataError(
                f"mask {stem} contains label {int(label.max())} outside [0, {num_classes})"
            )
        samples.append(Sample(image=image, labelmap=label, id=stem))
    return samples
