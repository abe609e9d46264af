"""Synthetic layered-shape scenes, augmentation, and dataset IO.

Scenes are stand-ins for street-scene segmentation data: a class-0
background with 3-6 overlapping rectangles, ellipses and thick polylines
drawn back to front, each carrying a class in [1, num_classes).  The image
is the per-class base color plus a per-scene color jitter, lightly
box-blurred so boundaries are soft but class colors stay separable.

Augmentation follows the usual segmentation recipe: random horizontal
flip, random resize by a scale in [0.5, 2.0] (bilinear for the image,
nearest for labels), and a random crop, padding with ignore labels and
zero pixels when the crop exceeds the scaled canvas.

On disk a sample is a pair `<index>_img.ppm` / `<index>_lab.pgm` under
`<root>/<split>/`, with the index zero-padded to 5 digits.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np

from . import netpbm
from .rng import RandomStream
from .tensor import Tensor

IGNORE_INDEX = 255


@dataclass
class SceneSpec:
    num_classes: int = 5
    canvas: tuple[int, int] = (64, 64)
    min_shapes: int = 3
    max_shapes: int = 6
    color_jitter: float = 0.03

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.min_shapes < 0 or self.max_shapes < self.min_shapes:
            raise ValueError("bad shape-count range")


@dataclass
class Sample:
    image: Tensor  # (1, 3, h, w) in [0, 1]
    labels: np.ndarray  # (h, w) int32, IGNORE_INDEX allowed


def class_color(k: int) -> np.ndarray:
    """Fixed, well-separated base color per class (golden-angle hues)."""
    if k == 0:
        return np.array([0.18, 0.18, 0.20])
    hue = (k * 0.618034) % 1.0
    return np.array(colorsys.hsv_to_rgb(hue, 0.60, 0.85))


_BLUR_KERNEL = np.array(
    [[0.05, 0.10, 0.05], [0.10, 0.40, 0.10], [0.05, 0.10, 0.05]], dtype=np.float64
)


def _blur3(img: np.ndarray) -> np.ndarray:
    """Mild 3x3 smoothing with edge replication, per channel."""
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for di in range(3):
        for dj in range(3):
            out += _BLUR_KERNEL[di, dj] * padded[:, di : di + img.shape[1], dj : dj + img.shape[2]]
    return out


def _draw_shape(labels: np.ndarray, stream: RandomStream, cls: int) -> None:
    # Minimum extents are generous relative to the canvas: sliver-thin or
    # mostly-occluded regions would make a clean segmentation target
    # unreachable for any coarse-output model.
    h, w = labels.shape
    kind = stream.randint(0, 3)
    yy = np.arange(h)[:, None]
    xx = np.arange(w)[None, :]
    if kind == 0:  # rectangle
        rh = stream.randint(h // 3, h // 2 + 1)
        rw = stream.randint(w // 3, w // 2 + 1)
        top = stream.randint(-rh // 4, h - (3 * rh) // 4)
        left = stream.randint(-rw // 4, w - (3 * rw) // 4)
        mask = (yy >= top) & (yy < top + rh) & (xx >= left) & (xx < left + rw)
    elif kind == 1:  # ellipse
        ry = stream.randint(h // 4, h // 3 + 1)
        rx = stream.randint(w // 4, w // 3 + 1)
        cy = stream.randint(ry // 2, h - ry // 2)
        cx = stream.randint(rx // 2, w - rx // 2)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    else:  # thick polyline, 2 segments
        pts = [
            (stream.randint(0, h), stream.randint(0, w)),
            (stream.randint(0, h), stream.randint(0, w)),
            (stream.randint(0, h), stream.randint(0, w)),
        ]
        half = 3.0 + 1.5 * stream.uniform(1)[0]
        mask = np.zeros((h, w), dtype=bool)
        for (y0, x0), (y1, x1) in zip(pts[:-1], pts[1:]):
            vy, vx = y1 - y0, x1 - x0
            norm2 = max(vy * vy + vx * vx, 1e-9)
            t = np.clip(((yy - y0) * vy + (xx - x0) * vx) / norm2, 0.0, 1.0)
            dist2 = (yy - (y0 + t * vy)) ** 2 + (xx - (x0 + t * vx)) ** 2
            mask |= dist2 <= half * half
    labels[mask] = cls


def _draw_labels(spec: SceneSpec, stream: RandomStream) -> np.ndarray:
    h, w = spec.canvas
    labels = np.zeros((h, w), dtype=np.int32)
    count = stream.randint(spec.min_shapes, spec.max_shapes + 1)
    # Cycle through the foreground classes from a random start so every
    # class accumulates comparable mass across a dataset.
    cls_offset = stream.randint(0, spec.num_classes - 1)
    for i in range(count):
        cls = 1 + (cls_offset + i) % (spec.num_classes - 1)
        _draw_shape(labels, stream, cls)
    return labels


def generate_scene(spec: SceneSpec, seed: int) -> Sample:
    """Deterministic scene for (spec, seed); later shapes overdraw earlier ones.

    Layouts where occlusion leaves a foreground class as a sliver (under 64
    visible pixels) are redrawn from a derived stream, so every class that
    appears is a substantial region.
    """
    min_visible = 64
    labels = None
    for attempt in range(32):
        stream = RandomStream(seed, key=f"scene{attempt}" if attempt else "scene")
        labels = _draw_labels(spec, stream)
        visible = np.bincount(labels.reshape(-1), minlength=spec.num_classes)
        if all(v == 0 or v >= min_visible for v in visible[1:]):
            break

    jitter = stream.normal((spec.num_classes, 3), spec.color_jitter)
    palette = np.stack([class_color(k) for k in range(spec.num_classes)]) + jitter
    img = palette[labels].transpose(2, 0, 1)  # (3, h, w)
    img = _blur3(img)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(image=Tensor(img[np.newaxis]), labels=labels)


# ---------------------------------------------------------------------------
# Augmentation


def _nearest_indices(out_size: int, in_size: int) -> np.ndarray:
    if out_size == 1 or in_size == 1:
        return np.zeros(out_size, dtype=np.int64)
    src = np.arange(out_size, dtype=np.float64) * (in_size - 1) / (out_size - 1)
    return np.clip(np.floor(src + 0.5).astype(np.int64), 0, in_size - 1)


def _resize_labels(labels: np.ndarray, oh: int, ow: int) -> np.ndarray:
    ri = _nearest_indices(oh, labels.shape[0])
    ci = _nearest_indices(ow, labels.shape[1])
    return labels[ri][:, ci]


def _resize_image(img: np.ndarray, oh: int, ow: int) -> np.ndarray:
    from .ops import bilinear_resize
    from .tensor import no_grad

    with no_grad():
        return bilinear_resize(Tensor(img[np.newaxis]), oh, ow).data[0]


@dataclass
class AugmentDraw:
    """The random choices of one augmentation, reconstructable from the seed."""

    flip: bool
    scaled: tuple[int, int]
    pad_offset: tuple[int, int]  # placement of the scaled content when padding
    crop_offset: tuple[int, int]
    crop: tuple[int, int]


def draw_augment_params(
    seed: int,
    in_size: tuple[int, int],
    scale_range: tuple[float, float] = (0.5, 2.0),
    crop: tuple[int, int] | None = None,
    hflip_prob: float = 0.5,
) -> AugmentDraw:
    stream = RandomStream(seed, key="augment")
    h, w = in_size
    crop_h, crop_w = crop if crop is not None else (h, w)
    flip = bool(stream.uniform(1)[0] < hflip_prob)
    lo, hi = scale_range
    s = lo + (hi - lo) * stream.uniform(1)[0]
    sh = max(1, int(round(h * s)))
    sw = max(1, int(round(w * s)))
    pad_offset = (0, 0)
    ph, pw = sh, sw
    if sh < crop_h or sw < crop_w:
        ph, pw = max(sh, crop_h), max(sw, crop_w)
        pad_offset = (stream.randint(0, ph - sh + 1), stream.randint(0, pw - sw + 1))
    crop_offset = (stream.randint(0, ph - crop_h + 1), stream.randint(0, pw - crop_w + 1))
    return AugmentDraw(flip, (sh, sw), pad_offset, crop_offset, (crop_h, crop_w))


def apply_augment(sample: Sample, draw: AugmentDraw) -> Sample:
    """Flip + rescale + crop with the given draw; image and labels share geometry."""
    img = sample.image.data[0].copy()
    labels = sample.labels.copy()
    h, w = labels.shape
    if draw.flip:
        img = img[:, :, ::-1].copy()
        labels = labels[:, ::-1].copy()
    sh, sw = draw.scaled
    if (sh, sw) != (h, w):
        img = _resize_image(img, sh, sw)
        labels = _resize_labels(labels, sh, sw)
    crop_h, crop_w = draw.crop
    if sh < crop_h or sw < crop_w:
        ph, pw = max(sh, crop_h), max(sw, crop_w)
        pad_img = np.zeros((3, ph, pw), dtype=np.float32)
        pad_lab = np.full((ph, pw), IGNORE_INDEX, dtype=np.int32)
        top, left = draw.pad_offset
        pad_img[:, top : top + sh, left : left + sw] = img
        pad_lab[top : top + sh, left : left + sw] = labels
        img, labels = pad_img, pad_lab
    top, left = draw.crop_offset
    img = img[:, top : top + crop_h, left : left + crop_w]
    labels = labels[top : top + crop_h, left : left + crop_w]
    return Sample(
        image=Tensor(np.ascontiguousarray(img)[np.newaxis]),
        labels=np.ascontiguousarray(labels),
    )


def augment(
    sample: Sample,
    seed: int,
    scale_range: tuple[float, float] = (0.5, 2.0),
    crop: tuple[int, int] | None = None,
    hflip_prob: float = 0.5,
) -> Sample:
    """Random flip + scale + crop, deterministic under the seed."""
    draw = draw_augment_params(seed, sample.labels.shape, scale_range, crop, hflip_prob)
    return apply_augment(sample, draw)


# ---------------------------------------------------------------------------
# Dataset IO


def sample_prefix(root, split: str, index: int) -> str:
    return os.path.join(str(root), split, f"{index:05d}")


def save_sample(sample: Sample, prefix: str) -> None:
    """Writes <prefix>_img.ppm and <prefix>_lab.pgm."""
    os.makedirs(os.path.dirname(prefix) or ".", exist_ok=True)
    netpbm.write_ppm(prefix + "_img.ppm", sample.image.data[0])
    netpbm.write_pgm(prefix + "_lab.pgm", sample.labels.astype(np.uint8))


def load_sample(prefix: str) -> Sample:
    img = netpbm.read_ppm(prefix + "_img.ppm")
    labels = netpbm.read_pgm(prefix + "_lab.pgm").astype(np.int32)
    return Sample(image=Tensor(img[np.newaxis]), labels=labels)


def generate_dataset(root, spec: SceneSpec, train_count: int, val_count: int, seed: int) -> None:
    """Writes train/val splits; sample i of a split uses a derived seed."""
    for split, count, offset in (("train", train_count, 0), ("val", val_count, 1_000_000)):
        for i in range(count):
            sample = generate_scene(spec, seed + offset + i)
            save_sample(sample, sample_prefix(root, split, i))


def load_split(root, split: str) -> list[Sample]:
    split_dir = os.path.join(str(root), split)
    if not os.path.isdir(split_dir):
        raise FileNotFoundError(f"dataset split directory not found: {split_dir}")
    indices = sorted(
        int(name[:5]) for name in os.listdir(split_dir) if name.endswith("_img.ppm")
    )
    if not indices:
        raise FileNotFoundError(f"no samples under {split_dir}")
    return [load_sample(sample_prefix(root, split, i)) for i in indices]
