"""Synthetic segmentation scenes, augmentation, PPM/PGM file formats, mean IoU."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import BadConfig, BadCrop, BadLabels, EmptyMatrix, ShapeMismatch

IGNORE_LABEL = 255

# Fixed, well-separated palette; class 0 is the background. Classes beyond
# the table get evenly spaced hues.
_PALETTE = np.array(
    [
        (0.12, 0.12, 0.14),
        (0.85, 0.15, 0.15),
        (0.10, 0.75, 0.20),
        (0.15, 0.25, 0.90),
        (0.90, 0.85, 0.10),
        (0.80, 0.20, 0.80),
        (0.10, 0.80, 0.80),
        (0.95, 0.55, 0.10),
    ],
    dtype=np.float64,
)


def class_color(c: int) -> np.ndarray:
    if c < len(_PALETTE):
        return _PALETTE[c]
    angle = 2.0 * np.pi * ((c * 0.381966) % 1.0)
    return 0.5 + 0.45 * np.array([np.cos(angle), np.cos(angle - 2.1), np.cos(angle + 2.1)])


@dataclass
class SegSample:
    """One image (3, H, W) in [0, 1] plus an (H, W) label map."""

    image: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int32)
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ShapeMismatch(f"image must be (3, H, W), got {self.image.shape}")
        if self.labels.shape != self.image.shape[1:]:
            raise ShapeMismatch(
                f"labels {self.labels.shape} do not match image {self.image.shape}"
            )


def generate_toy_scene(
    seed: int, h: int, w: int, num_classes: int, n_shapes: int | None = None
) -> SegSample:
    """Deterministic scene: background plus 1..5 colored geometric shapes.

    Each shape carries one non-background class; its label region matches
    the drawn region exactly. Colors follow a fixed per-class palette with
    additive pixel noise.
    """
    if num_classes < 2:
        raise BadConfig(f"need at least 2 classes, got {num_classes}")
    if h < 32 or w < 32:
        raise BadConfig(f"scene must be at least 32x32, got {h}x{w}")
    rng = np.random.default_rng(seed)
    labels = np.zeros((h, w), dtype=np.int32)
    yy, xx = np.mgrid[0:h, 0:w]
    count = int(rng.integers(1, 6)) if n_shapes is None else int(n_shapes)
    scale = min(h, w)
    for _ in range(count):
        cls = int(rng.integers(1, num_classes))
        kind = int(rng.integers(0, 3))
        r = rng.uniform(0.14, 0.30) * scale
        cy = rng.uniform(0.5 * r, h - 0.5 * r)
        cx = rng.uniform(0.5 * r, w - 0.5 * r)
        if kind == 0:  # axis-aligned rectangle
            hy = r * rng.uniform(0.7, 1.3)
            hx = r * rng.uniform(0.7, 1.3)
            mask = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
        elif kind == 1:  # circle
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        else:  # fat triangle: three vertices on a circle of radius ~1.3r
            theta = rng.uniform(0, 2 * np.pi)
            angles = theta + np.array([0.0, 2.094, 4.189]) + rng.uniform(-0.3, 0.3, 3)
            vy = cy + 1.3 * r * np.sin(angles)
            vx = cx + 1.3 * r * np.cos(angles)
            mask = np.ones((h, w), dtype=bool)
            for a in range(3):
                b = (a + 1) % 3
                cross = (vx[b] - vx[a]) * (yy - vy[a]) - (vy[b] - vy[a]) * (xx - vx[a])
                orient = (vx[(a + 2) % 3] - vx[a]) * (vy[b] - vy[a])
                orient = (vx[b] - vx[a]) * (vy[(a + 2) % 3] - vy[a]) - orient
                mask &= (cross * np.sign(orient + 1e-12)) >= 0
        labels[mask] = cls
    image = np.empty((3, h, w), dtype=np.float64)
    for ch in range(3):
        base = np.zeros((h, w), dtype=np.float64)
        for c in range(num_classes):
            base[labels == c] = class_color(c)[ch]
        image[ch] = base
    image += rng.normal(0.0, 0.05, size=image.shape)
    return SegSample(np.clip(image, 0.0, 1.0), labels)


def augment(sample: SegSample, seed: int, mode: str, params=None) -> SegSample:
    """Apply one augmentation; image and labels transform identically.

    modes: "reflect" (horizontal mirror), "resize" (nearest, params=(H, W)),
    "random-crop" (params=(H, W), offset drawn from seed).
    """
    img, lab = sample.image, sample.labels
    if mode == "reflect":
        return SegSample(img[:, :, ::-1].copy(), lab[:, ::-1].copy())
    if mode == "resize":
        nh, nw = params
        h, w = lab.shape
        iy = (np.arange(nh) * h) // nh
        ix = (np.arange(nw) * w) // nw
        return SegSample(img[:, iy][:, :, ix], lab[iy][:, ix])
    if mode == "random-crop":
        ch, cw = params
        h, w = lab.shape
        if ch > h or cw > w:
            raise BadCrop(f"crop {ch}x{cw} exceeds sample {h}x{w}")
        rng = np.random.default_rng(seed)
        oy = int(rng.integers(0, h - ch + 1))
        ox = int(rng.integers(0, w - cw + 1))
        return SegSample(
            img[:, oy : oy + ch, ox : ox + cw].copy(),
            lab[oy : oy + ch, ox : ox + cw].copy(),
        )
    raise BadConfig(f"unknown augmentation mode {mode!r}")


# ---------------------------------------------------------------------------
# Confusion matrix and mean IoU
# ---------------------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """C x C integer counts; rows are ground truth, columns are prediction."""

    num_classes: int
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        else:
            self.counts = np.asarray(self.counts, dtype=np.int64)
            if self.counts.shape != (self.num_classes, self.num_classes):
                raise ShapeMismatch(f"counts must be {self.num_classes}^2")
            if (self.counts < 0).any():
                raise BadLabels("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate_confusion(pred, truth, cm: ConfusionMatrix) -> ConfusionMatrix:
    """Add pixel counts to cm, skipping truth pixels with the ignore label."""
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if pred.shape != truth.shape:
        raise ShapeMismatch(f"pred {pred.shape} != truth {truth.shape}")
    c = cm.num_classes
    keep = truth != IGNORE_LABEL
    pred = pred[keep]
    truth = truth[keep]
    if truth.size and (truth.min() < 0 or truth.max() >= c):
        raise BadLabels(f"truth labels must be in [0, {c}) or {IGNORE_LABEL}")
    if pred.size and (pred.min() < 0 or pred.max() >= c):
        raise BadLabels(f"predictions must be in [0, {c})")
    flat = truth.astype(np.int64) * c + pred.astype(np.int64)
    cm.counts += np.bincount(flat, minlength=c * c).reshape(c, c)
    return cm


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per class; NaN where the class is absent from truth and prediction."""
    diag = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(axis=1) + cm.counts.sum(axis=0) - np.diag(cm.counts)
    out = np.full(cm.num_classes, np.nan)
    present = denom > 0
    out[present] = diag[present] / denom[present]
    return out


def mean_iou(cm: ConfusionMatrix) -> float:
    """Mean IoU over classes with a nonzero union."""
    ious = per_class_iou(cm)
    valid = ~np.isnan(ious)
    if not valid.any():
        raise EmptyMatrix("no class has a nonzero union")
    return float(ious[valid].mean())


def confusion_to_tsv(cm: ConfusionMatrix) -> str:
    lines = ["\t".join(str(int(v)) for v in row) for row in cm.counts]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# PPM (P6) / PGM (P5) binary image formats, 8-bit
# ---------------------------------------------------------------------------


def image_to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(image) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def u8_to_image(u8: np.ndarray) -> np.ndarray:
    return u8.astype(np.float64) / 255.0


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as binary P6."""
    u8 = image_to_u8(image)
    _, h, w = u8.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.transpose(1, 2, 0).tobytes())


def read_ppm(path: str) -> np.ndarray:
    """Read binary P6 back into a (3, H, W) float image in [0, 1]."""
    with open(path, "rb") as f:
        magic, dims, maxval = f.readline(), f.readline(), f.readline()
        if magic.strip() != b"P6":
            raise BadConfig(f"{path}: not a binary PPM")
        w, h = (int(v) for v in dims.split())
        if int(maxval) != 255:
            raise BadConfig(f"{path}: only 8-bit PPM supported")
        raw = np.frombuffer(f.read(3 * h * w), dtype=np.uint8)
    return u8_to_image(raw.reshape(h, w, 3).transpose(2, 0, 1))


def write_pgm(path: str, labels: np.ndarray) -> None:
    """Write an (H, W) label map as binary P5."""
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > 255:
        raise BadLabels("labels must fit in one byte")
    h, w = lab.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(lab.astype(np.uint8).tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        magic, dims, maxval = f.readline(), f.readline(), f.readline()
        if magic.strip() != b"P5":
            raise BadConfig(f"{path}: not a binary PGM")
        w, h = (int(v) for v in dims.split())
        if int(maxval) != 255:
            raise BadConfig(f"{path}: only 8-bit PGM supported")
        raw = np.frombuffer(f.read(h * w), dtype=np.uint8)
    return raw.reshape(h, w).astype(np.int32)


# ---------------------------------------------------------------------------
# Dataset directory layout: images/NNNN.ppm, labels/NNNN.pgm, manifest.tsv
# ---------------------------------------------------------------------------


def save_dataset(root: str, samples: list[SegSample], splits: list[str]) -> None:
    if len(samples) != len(splits):
        raise BadConfig("one split tag per sample required")
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "labels"), exist_ok=True)
    lines = []
    for idx, (sample, split) in enumerate(zip(samples, splits)):
        sid = f"{idx:04d}"
        write_ppm(os.path.join(root, "images", sid + ".ppm"), sample.image)
        write_pgm(os.path.join(root, "labels", sid + ".pgm"), sample.labels)
        lines.append(f"{sid}\t{split}")
    with open(os.path.join(root, "manifest.tsv"), "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(root: str, split: str) -> list[SegSample]:
    manifest = os.path.join(root, "manifest.tsv")
    if not os.path.exists(manifest):
        raise FileNotFoundError(manifest)
    out = []
    with open(manifest) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            sid, tag = line.split("\t")
            if tag != split:
                continue
            image = read_ppm(os.path.join(root, "images", sid + ".ppm"))
            labels = read_pgm(os.path.join(root, "labels", sid + ".pgm"))
            out.append(SegSample(image, labels))
    return out
