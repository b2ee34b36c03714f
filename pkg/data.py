"""Datasets, augmentation and batching.

Sources: CIFAR-100 binary records, seeded synthetic tasks, and raw image
folders. Every random choice draws from a generator derived from
(seed, epoch, sample position), so batches replay identically whether or
not they are prefetched on worker threads.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Literal, Optional, Sequence, Union

import numpy as np

from config import AugmentationConfig, DatasetSpec
from errors import DatasetFormatError, ShapeError
from tokenization import Normalization, normalize

logger = logging.getLogger(__name__)

CIFAR_IMAGE_SIZE = 32
CIFAR_IMAGE_BYTES = 3 * CIFAR_IMAGE_SIZE * CIFAR_IMAGE_SIZE
CIFAR_RECORD_BYTES = 2 + CIFAR_IMAGE_BYTES
CIFAR100_CLASSES = 100
CIFAR_SPLIT_FILES = {"train": "train.bin", "val": "test.bin"}
RAW_INDEX = "index.tsv"

Split = Literal["train", "val"]


@dataclass
class Dataset:
    """In-memory labelled images.

    Attributes:
        images: (N, H, W, 3) uint8.
        labels: (N,) int64 class indices.
        num_classes: Size of the label space.
        normalization: Per-channel statistics used when batching.
        name: Human-readable origin.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    normalization: Normalization
    name: str = ""

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ShapeError(f"dataset images must be (N, H, W, 3), got {self.images.shape}")
        if self.images.dtype != np.uint8:
            raise ShapeError("dataset images must be uint8")
        if len(self.images) != len(self.labels):
            raise ShapeError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ShapeError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_size(self) -> int:
        return int(self.images.shape[1])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx])

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


def normalization_of(spec: DatasetSpec) -> Normalization:
    return Normalization(mean=tuple(spec.mean), std=tuple(spec.std))  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# CIFAR-100 binary
# ---------------------------------------------------------------------------


def _cifar_file(path: Union[str, Path], split: Split) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / CIFAR_SPLIT_FILES[split]
    return path


def load_cifar100(
    path: Union[str, Path],
    split: Split = "train",
    normalization: Optional[Normalization] = None,
) -> Dataset:
    """Parse CIFAR-100 binary records.

    Each 3074-byte record is [coarse label][fine label][1024 R][1024 G][1024 B],
    channel planes row-major. The fine label is the class.

    Args:
        path: A ``.bin`` file, or a directory holding ``train.bin``/``test.bin``.
        split: ``train`` or ``val`` (the test file).
        normalization: Defaults to the CIFAR-100 statistics.

    Raises:
        FileNotFoundError: If the file does not exist.
        DatasetFormatError: Truncated file or a fine label ≥ 100.
    """
    file = _cifar_file(path, split)
    if not file.exists():
        raise FileNotFoundError(f"CIFAR-100 file not found: {file}")
    raw = np.fromfile(file, dtype=np.uint8)
    whole = raw.size - raw.size % CIFAR_RECORD_BYTES
    if whole != raw.size:
        raise DatasetFormatError(
            str(file), whole, f"size {raw.size} is not a multiple of {CIFAR_RECORD_BYTES}-byte records"
        )
    records = raw.reshape(-1, CIFAR_RECORD_BYTES)
    labels = records[:, 1].astype(np.int64)
    bad = np.flatnonzero(labels >= CIFAR100_CLASSES)
    if bad.size:
        first = int(bad[0])
        raise DatasetFormatError(
            str(file), first * CIFAR_RECORD_BYTES + 1, f"fine label {labels[first]} ≥ {CIFAR100_CLASSES}"
        )
    images = records[:, 2:].reshape(-1, 3, CIFAR_IMAGE_SIZE, CIFAR_IMAGE_SIZE).transpose(0, 2, 3, 1)
    logger.info("loaded %d CIFAR-100 %s images from %s", len(labels), split, file)
    return Dataset(
        images=np.ascontiguousarray(images),
        labels=labels,
        num_classes=CIFAR100_CLASSES,
        normalization=normalization or Normalization((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
        name=f"cifar100-{split}",
    )


def write_cifar100(
    path: Union[str, Path],
    images: np.ndarray,
    labels: np.ndarray,
    coarse_labels: Optional[np.ndarray] = None,
) -> Path:
    """Write 32×32 uint8 images in the CIFAR-100 binary layout."""
    images = np.asarray(images, dtype=np.uint8)
    if images.shape[1:] != (CIFAR_IMAGE_SIZE, CIFAR_IMAGE_SIZE, 3):
        raise ShapeError(f"CIFAR records hold 32×32×3 images, got {images.shape[1:]}")
    n = images.shape[0]
    coarse = np.zeros(n, dtype=np.uint8) if coarse_labels is None else np.asarray(coarse_labels, dtype=np.uint8)
    records = np.empty((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = coarse
    records[:, 1] = np.asarray(labels, dtype=np.uint8)
    records[:, 2:] = images.transpose(0, 3, 1, 2).reshape(n, CIFAR_IMAGE_BYTES)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    records.tofile(path)
    return path


# ---------------------------------------------------------------------------
# Synthetic tasks
# ---------------------------------------------------------------------------

SYNTHETIC_CLASSES = {"quadrant": 4, "color": 3}
BLOB_SIZE = 2


def quadrant_of(row: int, col: int, size: int) -> int:
    """0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    half = size // 2
    return 2 * int(row >= half) + int(col >= half)


def quadrant_image(row: int, col: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Dim noise with a bright 2×2 blob whose top-left corner is (row, col)."""
    img = rng.integers(0, 48, size=(size, size, 3), dtype=np.uint8)
    img[row : row + BLOB_SIZE, col : col + BLOB_SIZE] = 255
    return img


def color_image(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Noise in every channel, with channel ``label`` lifted to dominate."""
    img = rng.integers(0, 96, size=(size, size, 3), dtype=np.uint8)
    img[..., label] = rng.integers(160, 256, size=(size, size), dtype=np.uint8)
    return img


def synthetic_dataset(
    kind: Literal["quadrant", "color"],
    n: int,
    seed: int = 0,
    image_size: int = 8,
    normalization: Optional[Normalization] = None,
) -> Dataset:
    """Seeded toy task with exactly computable labels.

    ``quadrant``: class is the quadrant holding a bright blob, so the label
    depends on where pixels are. ``color``: class is the dominant channel,
    independent of pixel positions. Classes are balanced to within one image.
    """
    if kind not in SYNTHETIC_CLASSES:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if kind == "quadrant" and (image_size % 2 or image_size < 2 * BLOB_SIZE):
        raise ShapeError(f"quadrant images need an even side ≥ {2 * BLOB_SIZE}, got {image_size}")
    rng = np.random.default_rng(seed)
    classes = SYNTHETIC_CLASSES[kind]
    labels = rng.permutation(np.arange(n) % classes).astype(np.int64)
    images = np.empty((n, image_size, image_size, 3), dtype=np.uint8)
    half = image_size // 2
    for i, label in enumerate(labels):
        if kind == "quadrant":
            qr, qc = divmod(int(label), 2)
            row = qr * half + int(rng.integers(0, half - BLOB_SIZE + 1))
            col = qc * half + int(rng.integers(0, half - BLOB_SIZE + 1))
            images[i] = quadrant_image(row, col, image_size, rng)
        else:
            images[i] = color_image(int(label), image_size, rng)
    return Dataset(
        images=images,
        labels=labels,
        num_classes=classes,
        normalization=normalization or Normalization((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
        name=f"synthetic-{kind}",
    )


# ---------------------------------------------------------------------------
# Raw image folders
# ---------------------------------------------------------------------------


def resize(images: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of (..., H, W, C) to size×size."""
    h, w = images.shape[-3], images.shape[-2]
    if (h, w) == (size, size):
        return images
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return images[..., rows[:, None], cols[None, :], :]


def load_raw_folder(
    path: Union[str, Path],
    image_size: Optional[int] = None,
    normalization: Optional[Normalization] = None,
    num_classes: Optional[int] = None,
) -> Dataset:
    """Load ``index.tsv`` (relative path, label) plus square raw RGB byte files.

    Args:
        path: Folder holding ``index.tsv``.
        image_size: Resize every image to this side.
        normalization: Per-channel statistics; defaults to mean 0.5, std 0.25.
        num_classes: Size of the label space shared by all splits; inferred
            from the largest label when omitted.

    Raises:
        FileNotFoundError: Missing index or image file.
        DatasetFormatError: Malformed index line, a label outside the label space,
            or an image file that is not a square H×W×3.
    """
    root = Path(path)
    index_file = root / RAW_INDEX
    if not index_file.exists():
        raise FileNotFoundError(f"raw-folder index not found: {index_file}")
    images, labels = [], []
    offset = 0
    for line in index_file.read_text().splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            parts = stripped.split("\t")
            if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
                raise DatasetFormatError(str(index_file), offset, f"expected '<path>\\t<label>', got {stripped!r}")
            data = np.fromfile(root / parts[0], dtype=np.uint8)
            side = int(round(np.sqrt(data.size / 3)))
            if side * side * 3 != data.size or side == 0:
                raise DatasetFormatError(str(root / parts[0]), 0, f"{data.size} bytes is not a square RGB image")
            img = data.reshape(side, side, 3)
            images.append(resize(img, image_size) if image_size else img)
            labels.append(int(parts[1]))
        offset += len(line.encode())
    if not images:
        raise DatasetFormatError(str(index_file), 0, "index lists no images")
    sizes = {img.shape for img in images}
    if len(sizes) != 1:
        raise DatasetFormatError(str(index_file), 0, f"images have mixed sizes {sorted(sizes)}; pass image_size")
    label_array = np.asarray(labels, dtype=np.int64)
    classes = num_classes if num_classes is not None else int(label_array.max()) + 1
    if label_array.min() < 0 or label_array.max() >= classes:
        raise DatasetFormatError(
            str(index_file), 0, f"labels span [{label_array.min()}, {label_array.max()}], expected [0, {classes})"
        )
    return Dataset(
        images=np.stack(images),
        labels=label_array,
        num_classes=classes,
        normalization=normalization or Normalization((0.5, 0.5, 0.5), (0.25, 0.25, 0.25)),
        name=f"raw-{root.name}",
    )


def load_dataset(spec: DatasetSpec, split: Split = "train", num_classes: Optional[int] = None) -> Dataset:
    """Materialize one split of a configured dataset.

    ``num_classes`` fixes the label space of raw folders so every split agrees;
    CIFAR-100 and the synthetic tasks carry their own.
    """
    norm = normalization_of(spec)
    if spec.source == "cifar100":
        dataset = load_cifar100(spec.path, split, norm)  # type: ignore[arg-type]
    elif spec.source == "raw-folder":
        dataset = load_raw_folder(
            Path(spec.path) / split, spec.image_size, norm, num_classes  # type: ignore[arg-type]
        )
    else:
        count = spec.count if split == "train" else spec.val_count
        seed = int(np.random.SeedSequence([spec.seed, 0 if split == "train" else 1]).generate_state(1)[0])
        dataset = synthetic_dataset(spec.kind, count, seed, spec.image_size, norm)
    if dataset.image_size != spec.image_size:
        dataset = replace(dataset, images=np.ascontiguousarray(resize(dataset.images, spec.image_size)))
    return dataset


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., :, ::-1, :]


def random_crop(img: np.ndarray, padding: int, rng: np.random.Generator) -> np.ndarray:
    """Zero-pad by ``padding`` on each side, then crop back to the input size."""
    if padding == 0:
        return img
    h, w = img.shape[:2]
    padded = np.pad(img, ((padding, padding), (padding, padding), (0, 0)))
    top = int(rng.integers(0, 2 * padding + 1))
    left = int(rng.integers(0, 2 * padding + 1))
    return padded[top : top + h, left : left + w]


def basic_augment(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Pad-and-crop plus horizontal flip; identity when disabled."""
    if not cfg.enabled:
        return img
    if cfg.random_crop:
        img = random_crop(img, cfg.crop_padding, rng)
    if cfg.hflip_prob > 0 and rng.random() < cfg.hflip_prob:
        img = hflip(img)
    return img


def _autocontrast(img: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    lo = img.min(axis=(0, 1), keepdims=True).astype(np.float32)
    hi = img.max(axis=(0, 1), keepdims=True).astype(np.float32)
    scaled = (img - lo) * 255.0 / np.maximum(hi - lo, 1.0)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def _brightness(img: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    factor = 1.0 + level * 0.9 * rng.choice([-1.0, 1.0])
    return np.clip(img.astype(np.float32) * factor, 0, 255).astype(np.uint8)


def _contrast(img: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    factor = 1.0 + level * 0.9 * rng.choice([-1.0, 1.0])
    mean = img.astype(np.float32).mean()
    return np.clip((img.astype(np.float32) - mean) * factor + mean, 0, 255).astype(np.uint8)


def _solarize(img: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    threshold = 256 - int(level * 256)
    return np.where(img >= threshold, 255 - img, img).astype(np.uint8)


def _posterize(img: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    bits = max(1, 8 - int(round(level * 4)))
    shift = 8 - bits
    return ((img >> shift) << shift).astype(np.uint8)


def _translate(axis: int) -> Callable[[np.ndarray, float, np.random.Generator], np.ndarray]:
    def op(img: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
        shift = int(round(level * 0.45 * img.shape[axis])) * int(rng.choice([-1, 1]))
        out = np.zeros_like(img)
        if shift == 0:
            return img
        src = [slice(None)] * 3
        dst = [slice(None)] * 3
        if shift > 0:
            src[axis], dst[axis] = slice(0, -shift), slice(shift, None)
        else:
            src[axis], dst[axis] = slice(-shift, None), slice(0, shift)
        out[tuple(dst)] = img[tuple(src)]
        return out

    return op


def _identity(img: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    return img


RANDAUG_OPS: dict[str, Callable[[np.ndarray, float, np.random.Generator], np.ndarray]] = {
    "identity": _identity,
    "autocontrast": _autocontrast,
    "brightness": _brightness,
    "contrast": _contrast,
    "solarize": _solarize,
    "posterize": _posterize,
    "translate_x": _translate(1),
    "translate_y": _translate(0),
}


def randaugment(img: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply ``randaug_ops`` random ops, each with probability ``randaug_prob``, at magnitude m/10."""
    if not (cfg.enabled and cfg.randaug):
        return img
    names = list(RANDAUG_OPS)
    level = cfg.randaug_magnitude / 10.0
    for _ in range(cfg.randaug_ops):
        name = names[int(rng.integers(len(names)))]
        if rng.random() < cfg.randaug_prob:
            img = RANDAUG_OPS[name](img, level, rng)
    return img


# ---------------------------------------------------------------------------
# Batches and label mixing
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    """Normalized images with soft labels.

    Attributes:
        images: (B, H, W, 3) float32.
        labels: (B, C) soft labels, rows summing to 1.
        seeds: Per-sample provenance seeds.
        targets: (B,) hard labels before mixing.
        lam: Mixing coefficient applied to the batch (1.0 when unmixed).
    """

    images: np.ndarray
    labels: np.ndarray
    seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    lam: float = 1.0

    def __len__(self) -> int:
        return int(self.images.shape[0])


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def mixup(batch: Batch, alpha: float, rng: np.random.Generator, lam: Optional[float] = None) -> Batch:
    """Blend each sample with its partner in the reversed batch, labels alike."""
    if lam is None:
        lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    images = (lam * batch.images + (1.0 - lam) * batch.images[::-1]).astype(batch.images.dtype)
    labels = (lam * batch.labels + (1.0 - lam) * batch.labels[::-1]).astype(batch.labels.dtype)
    return replace(batch, images=images, labels=labels, lam=lam)


def cutmix_box(height: int, width: int, lam: float, rng: np.random.Generator) -> tuple[int, int, int, int]:
    """Box (top, bottom, left, right) covering roughly (1 − lam) of the image, clipped to it."""
    ratio = np.sqrt(1.0 - lam)
    cut_h, cut_w = int(height * ratio), int(width * ratio)
    cy, cx = int(rng.integers(height)), int(rng.integers(width))
    top, bottom = np.clip(cy - cut_h // 2, 0, height), np.clip(cy + cut_h // 2, 0, height)
    left, right = np.clip(cx - cut_w // 2, 0, width), np.clip(cx + cut_w // 2, 0, width)
    return int(top), int(bottom), int(left), int(right)


def cutmix(batch: Batch, alpha: float, rng: np.random.Generator, lam: Optional[float] = None) -> Batch:
    """Paste a partner rectangle; labels mix by the exact pasted-area fraction."""
    if lam is None:
        lam = float(rng.beta(alpha, alpha)) if alpha > 0 else 1.0
    h, w = batch.images.shape[1:3]
    top, bottom, left, right = cutmix_box(h, w, lam, rng)
    images = batch.images.copy()
    images[:, top:bottom, left:right] = batch.images[::-1, top:bottom, left:right]
    lam = 1.0 - (bottom - top) * (right - left) / float(h * w)
    labels = (lam * batch.labels + (1.0 - lam) * batch.labels[::-1]).astype(batch.labels.dtype)
    return replace(batch, images=images, labels=labels, lam=lam)


def mix_batch(batch: Batch, cfg: AugmentationConfig, rng: np.random.Generator) -> Batch:
    """MixUp or CutMix, chosen per batch with ``mix_switch_prob`` when both are on."""
    if not cfg.enabled or len(batch) < 2:
        return batch
    use_mixup, use_cutmix = cfg.mixup_alpha > 0, cfg.cutmix_alpha > 0
    if use_mixup and use_cutmix:
        use_mixup = rng.random() >= cfg.mix_switch_prob
        use_cutmix = not use_mixup
    if use_cutmix:
        return cutmix(batch, cfg.cutmix_alpha, rng)
    if use_mixup:
        return mixup(batch, cfg.mixup_alpha, rng)
    return batch


def topk_accuracy(logits: np.ndarray, targets: np.ndarray, ks: Sequence[int] = (1, 5)) -> dict[int, float]:
    """Fraction of rows whose target is among the k highest logits (k clipped to C)."""
    logits = np.asarray(logits)
    order = np.argsort(-logits, axis=1, kind="stable")
    hits = order == np.asarray(targets)[:, None]
    return {k: float(hits[:, : min(k, logits.shape[1])].any(axis=1).mean()) for k in ks}


# ---------------------------------------------------------------------------
# Loader
# ---------------------------------------------------------------------------


def sample_seed(seed: int, epoch: int, position: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, position]).generate_state(1)[0])


class DataLoader:
    """Deterministic batch iterator with optional threaded prefetch.

    Sample order comes from ``(seed, epoch)``; every sample's augmentation
    generator from ``(seed, epoch, position)``; batch mixing from
    ``(seed, epoch, batch index)``. Prefetch threads therefore cannot change
    the batches produced.
    """

    def __init__(
        self,
        dataset: Dataset,
        batch_size: int,
        augmentation: Optional[AugmentationConfig] = None,
        shuffle: bool = True,
        seed: int = 0,
        prefetch: int = 0,
    ):
        self.dataset = dataset
        self.batch_size = batch_size
        self.augmentation = augmentation or AugmentationConfig.disabled()
        self.shuffle = shuffle
        self.seed = seed
        self.prefetch = prefetch

    def __len__(self) -> int:
        return -(-len(self.dataset) // self.batch_size)

    def order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(len(self.dataset))
        return np.random.default_rng([self.seed, epoch]).permutation(len(self.dataset))

    def _build(self, epoch: int, batch_index: int, positions: np.ndarray, indices: np.ndarray) -> Batch:
        seeds = np.array([sample_seed(self.seed, epoch, int(p)) for p in positions], dtype=np.int64)
        images = []
        for idx, s in zip(indices, seeds):
            rng = np.random.default_rng(int(s))
            img = basic_augment(self.dataset.images[idx], self.augmentation, rng)
            images.append(randaugment(img, self.augmentation, rng))
        targets = self.dataset.labels[indices]
        batch = Batch(
            images=normalize(np.stack(images), self.dataset.normalization),
            labels=one_hot(targets, self.dataset.num_classes),
            seeds=seeds,
            targets=targets,
        )
        mix_rng = np.random.default_rng([self.seed, epoch, batch_index, 1])
        return mix_batch(batch, self.augmentation, mix_rng)

    def epoch(self, epoch: int) -> Iterator[Batch]:
        order = self.order(epoch)
        chunks = [
            (b, np.arange(start, min(start + self.batch_size, len(order))))
            for b, start in enumerate(range(0, len(order), self.batch_size))
        ]
        if self.prefetch <= 0:
            for b, positions in chunks:
                yield self._build(epoch, b, positions, order[positions])
            return
        with ThreadPoolExecutor(max_workers=self.prefetch) as pool:
            yield from pool.map(lambda c: self._build(epoch, c[0], c[1], order[c[1]]), chunks)

    def __iter__(self) -> Iterator[Batch]:
        return self.epoch(0)
