"""CIFAR binary ingestion, augmentation, and synthetic desk-scale datasets.

CIFAR-10 batches are 3073-byte records (label byte + 1024 red + 1024 green +
1024 blue bytes, row-major); CIFAR-100 records carry a coarse and a fine
label byte (3074 bytes, fine label used). Parsing is purely position-based.
Normalization statistics come from the training split only and are cached
as plain text next to the data.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FormatError

CIFAR10_RECORD = 3073
CIFAR100_RECORD = 3074
_PIXELS = 3072

# expected layout under --data-dir (the standard binary-archive names)
CIFAR10_SUBDIR = "cifar-10-batches-bin"
CIFAR10_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR10_TEST = "test_batch.bin"
CIFAR100_SUBDIR = "cifar-100-binary"
CIFAR100_TRAIN = "train.bin"
CIFAR100_TEST = "test.bin"

STATS_FILENAME = "norm_stats.txt"


@dataclass
class LabeledImage:
    label: int
    pixels: np.ndarray  # 3x32x32 floats in [0, 1]


@dataclass
class AugmentSpec:
    pad: int = 4
    crop: int = 32
    hflip_prob: float = 0.5
    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    def __post_init__(self):
        if self.pad < 0:
            raise ConfigError(f"pad must be >= 0, got {self.pad}")
        if np.any(np.asarray(self.std) <= 0):
            raise ConfigError(f"std must be positive componentwise, got {self.std}")


@dataclass
class Dataset:
    train_images: np.ndarray  # N x 3 x 32 x 32 float32 in [0, 1]
    train_labels: np.ndarray  # N int64
    test_images: np.ndarray
    test_labels: np.ndarray
    classes: int
    mean: np.ndarray = None
    std: np.ndarray = None

    def __post_init__(self):
        if self.mean is None or self.std is None:
            self.mean, self.std = compute_norm_stats(self.train_images)


# ---------------------------------------------------------------------------
# CIFAR binary parsing


def load_cifar_record(record, coarse=False):
    """Decode one raw record; `coarse` selects the two-label CIFAR-100 layout
    (the fine label is the one returned)."""
    expected = CIFAR100_RECORD if coarse else CIFAR10_RECORD
    if len(record) != expected:
        raise FormatError(f"record must be exactly {expected} bytes, got {len(record)}")
    buf = np.frombuffer(record, dtype=np.uint8)
    label = int(buf[1] if coarse else buf[0])
    pixels = buf[expected - _PIXELS:].reshape(3, 32, 32).astype(np.float32) / 255.0
    return LabeledImage(label=label, pixels=pixels)


def _parse_batch(raw, record_len, label_offset, path):
    if len(raw) % record_len:
        offset = (len(raw) // record_len) * record_len
        raise FormatError(f"{path}: trailing partial record at byte offset {offset} "
                          f"(file length {len(raw)} is not a multiple of {record_len})")
    n = len(raw) // record_len
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(n, record_len)
    labels = buf[:, label_offset].astype(np.int64)
    images = buf[:, record_len - _PIXELS:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def load_cifar_batch_file(path, record_len=CIFAR10_RECORD):
    """Parse a whole binary batch file into (images, labels)."""
    label_offset = 1 if record_len == CIFAR100_RECORD else 0
    with open(path, "rb") as fh:
        raw = fh.read()
    return _parse_batch(raw, record_len, label_offset, path)


def _require(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"expected dataset file at {path}")
    return path


def load_cifar10(data_dir):
    base = os.path.join(data_dir, CIFAR10_SUBDIR)
    if not os.path.isdir(base):
        base = data_dir  # allow pointing straight at the batch directory
    train = [load_cifar_batch_file(_require(os.path.join(base, name))) for name in CIFAR10_TRAIN]
    test_images, test_labels = load_cifar_batch_file(_require(os.path.join(base, CIFAR10_TEST)))
    images = np.concatenate([t[0] for t in train])
    labels = np.concatenate([t[1] for t in train])
    mean, std = load_or_compute_stats(base, images)
    return Dataset(images, labels, test_images, test_labels, classes=10, mean=mean, std=std)


def load_cifar100(data_dir):
    base = os.path.join(data_dir, CIFAR100_SUBDIR)
    if not os.path.isdir(base):
        base = data_dir
    images, labels = load_cifar_batch_file(_require(os.path.join(base, CIFAR100_TRAIN)),
                                           record_len=CIFAR100_RECORD)
    test_images, test_labels = load_cifar_batch_file(_require(os.path.join(base, CIFAR100_TEST)),
                                                     record_len=CIFAR100_RECORD)
    mean, std = load_or_compute_stats(base, images)
    return Dataset(images, labels, test_images, test_labels, classes=100, mean=mean, std=std)


# ---------------------------------------------------------------------------
# normalization statistics


def compute_norm_stats(train_images):
    mean = train_images.mean(axis=(0, 2, 3)).astype(np.float32)
    std = train_images.std(axis=(0, 2, 3)).astype(np.float32)
    std[std == 0] = 1.0
    return mean, std


def write_stats(path, mean, std):
    with open(path, "w") as fh:
        fh.write("mean " + " ".join(repr(float(v)) for v in mean) + "\n")
        fh.write("std " + " ".join(repr(float(v)) for v in std) + "\n")


def read_stats(path):
    with open(path) as fh:
        lines = [line.split() for line in fh.read().splitlines() if line.strip()]
    if len(lines) != 2 or lines[0][0] != "mean" or lines[1][0] != "std":
        raise FormatError(f"{path}: expected 'mean r g b' and 'std r g b' lines")
    mean = np.array([float(v) for v in lines[0][1:]], dtype=np.float32)
    std = np.array([float(v) for v in lines[1][1:]], dtype=np.float32)
    if mean.shape != (3,) or std.shape != (3,):
        raise FormatError(f"{path}: expected three values per line")
    return mean, std


def load_or_compute_stats(data_dir, train_images):
    """Cached per-channel statistics, computed from the training split only."""
    path = os.path.join(data_dir, STATS_FILENAME)
    if os.path.exists(path):
        return read_stats(path)
    mean, std = compute_norm_stats(train_images)
    try:
        write_stats(path, mean, std)
    except OSError:
        pass  # read-only data directory; stats are still returned
    return mean, std


# ---------------------------------------------------------------------------
# augmentation


def normalize_images(images, mean, std):
    images = np.asarray(images, dtype=np.float32)
    shaped = (np.asarray(mean, dtype=np.float32)[:, None, None],
              np.asarray(std, dtype=np.float32)[:, None, None])
    if images.ndim == 3:
        return (images - shaped[0]) / shaped[1]
    return (images - shaped[0][None]) / shaped[1][None]


def augment(img, spec: AugmentSpec, rng):
    """Zero-pad, random-crop back to size, random horizontal flip, normalize."""
    c, h, w = img.shape
    if spec.pad > 0:
        padded = np.zeros((c, h + 2 * spec.pad, w + 2 * spec.pad), dtype=np.float32)
        padded[:, spec.pad:spec.pad + h, spec.pad:spec.pad + w] = img
        top = int(rng.integers(0, padded.shape[1] - spec.crop + 1))
        left = int(rng.integers(0, padded.shape[2] - spec.crop + 1))
        img = padded[:, top:top + spec.crop, left:left + spec.crop]
    if rng.random() < spec.hflip_prob:
        img = img[:, :, ::-1]
    return normalize_images(img, spec.mean, spec.std)


def augment_batch(images, spec: AugmentSpec, rng):
    return np.stack([augment(img, spec, rng) for img in images])


# ---------------------------------------------------------------------------
# synthetic data


def _blob_prototypes(classes, rng, image_size):
    """Smooth, horizontally symmetric class patterns: low-frequency so the
    random-crop augmentation keeps classes apart, flip-symmetric so the
    horizontal flip does too."""
    coarse = max(image_size // 8, 1)
    protos = []
    for _ in range(classes):
        low = rng.uniform(0.25, 0.75, size=(3, coarse, coarse)).astype(np.float32)
        proto = np.kron(low, np.ones((image_size // coarse, image_size // coarse),
                                     dtype=np.float32))
        protos.append(0.5 * (proto + proto[:, :, ::-1]))
    return protos


def _render_blobs(protos, n, rng):
    labels = np.arange(n, dtype=np.int64) % len(protos)
    noise = rng.normal(0.0, 0.02, size=(n,) + protos[0].shape).astype(np.float32)
    images = np.clip(np.stack([protos[k] for k in labels]) + noise, 0.0, 1.0)
    return images.astype(np.float32), labels


def synth_blobs(classes, n, seed, image_size=32):
    """Class-separable images: prototype pattern plus small pixel noise,
    labels round-robin. Returns (images [n,3,H,W] in [0,1], labels [n])."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    rng = np.random.default_rng(seed)
    return _render_blobs(_blob_prototypes(classes, rng, image_size), n, rng)


def synth_dataset(classes=2, n_train=500, n_test=100, seed=0, image_size=32):
    """A Dataset of separable blobs; both splits share the class prototypes
    and differ only in their noise draws."""
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}")
    protos = _blob_prototypes(classes, np.random.default_rng(seed), image_size)
    train_images, train_labels = _render_blobs(protos, n_train, np.random.default_rng([seed, 0]))
    test_images, test_labels = _render_blobs(protos, n_test, np.random.default_rng([seed, 1]))
    return Dataset(train_images, train_labels, test_images, test_labels, classes=classes)
