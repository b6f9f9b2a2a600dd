"""Dataset ingestion: IDX and CIFAR binary parsers, normalization, augmentation.

Images are kept channels-last. Raw datasets hold unsigned bytes; model-facing
batches hold floats in [-1, 1].
"""

import gzip
import logging
import os
import queue
import struct
import tarfile
import threading
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

GEOMETRY = {
    "mnist": (28, 28, 1),
    "fashion_mnist": (28, 28, 1),
    "cifar10": (32, 32, 3),
    "cifar100": (32, 32, 3),
}
N_CLASSES = {"mnist": 10, "fashion_mnist": 10, "cifar10": 10, "cifar100": 100}

_IDX_DTYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CIFAR_LABEL_BYTES = {"cifar10": 1, "cifar100": 2}
_CIFAR_PIXELS = 32 * 32 * 3


class DatasetFormatError(ValueError):
    """Raised when a dataset file does not match its declared binary layout."""


class TruncatedDataError(DatasetFormatError):
    pass


@dataclass
class RawDataset:
    images: np.ndarray
    labels: np.ndarray
    name: str
    split: str

    def __post_init__(self):
        if self.images.dtype != np.uint8 or self.images.ndim != 4:
            raise DatasetFormatError("images must be a rank-4 uint8 array (N, H, W, C)")
        if self.images.shape[0] != self.labels.shape[0]:
            raise DatasetFormatError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )
        if self.name in GEOMETRY and self.images.shape[1:] != GEOMETRY[self.name]:
            raise DatasetFormatError(
                f"{self.name} images must be {GEOMETRY[self.name]}, got {self.images.shape[1:]}"
            )
        n_classes = N_CLASSES.get(self.name)
        if n_classes is not None and self.labels.size:
            if self.labels.min() < 0 or self.labels.max() >= n_classes:
                raise DatasetFormatError(f"labels outside [0, {n_classes})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def n_classes(self):
        return N_CLASSES.get(self.name, int(self.labels.max()) + 1)


@dataclass
class ImageBatch:
    pixels: np.ndarray
    labels: np.ndarray | None = None
    source_indices: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.pixels.ndim != 4 or self.pixels.shape[0] < 1:
            raise ValueError("pixels must be a non-empty rank-4 array")
        if self.source_indices is None:
            self.source_indices = np.arange(self.pixels.shape[0])

    def __len__(self):
        return self.pixels.shape[0]


def parse_idx(data):
    """Decode an IDX byte string into a numpy array of the declared shape."""
    data = bytes(data)
    if len(data) < 4:
        raise TruncatedDataError("IDX data shorter than its 4-byte magic number")
    zero, type_code, ndim = data[0:2], data[2], data[3]
    if zero != b"\x00\x00" or type_code not in _IDX_DTYPES:
        raise DatasetFormatError(f"unknown IDX magic number 0x{data[:4].hex()}")
    if ndim not in (1, 3):
        raise DatasetFormatError(f"IDX rank {ndim} unsupported (expected 1 or 3)")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedDataError("IDX header truncated")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = _IDX_DTYPES[type_code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) - header != expected:
        raise TruncatedDataError(
            f"IDX payload is {len(data) - header} bytes, header declares {expected}"
        )
    arr = np.frombuffer(data, dtype=dtype, offset=header).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_idx(arr):
    """Encode a rank-1 or rank-3 array in IDX format (inverse of :func:`parse_idx`)."""
    arr = np.asarray(arr)
    codes = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    native = arr.dtype.newbyteorder("=")
    if native not in codes:
        raise DatasetFormatError(f"dtype {arr.dtype} has no IDX type code")
    if arr.ndim not in (1, 3):
        raise DatasetFormatError(f"IDX rank {arr.ndim} unsupported")
    code = codes[native]
    head = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return head + arr.astype(_IDX_DTYPES[code], copy=False).tobytes()


def read_maybe_gzip(path):
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_cifar_batch(data, variant="cifar10", split="train"):
    """Decode a CIFAR binary batch; planar RGB records become channels-last images.

    For CIFAR-100 the fine label is kept and the coarse label discarded.
    """
    if variant not in _CIFAR_LABEL_BYTES:
        raise ValueError(f"variant must be 'cifar10' or 'cifar100', got {variant!r}")
    label_bytes = _CIFAR_LABEL_BYTES[variant]
    record = label_bytes + _CIFAR_PIXELS
    data = bytes(data)
    if len(data) == 0 or len(data) % record:
        raise DatasetFormatError(
            f"{variant} batch length {len(data)} is not a positive multiple of {record}"
        )
    rows = np.frombuffer(data, dtype=np.uint8).reshape(-1, record)
    labels = rows[:, label_bytes - 1].astype(np.int64)
    n_classes = N_CLASSES[variant]
    if labels.max() >= n_classes:
        raise DatasetFormatError(f"{variant} label {labels.max()} out of range")
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return RawDataset(np.ascontiguousarray(images), labels, variant, split)


def normalize(raw, dtype=np.float32):
    """Map bytes in [0, 255] to [-1, 1] via ``raw / 127.5 - 1``."""
    return (np.asarray(raw, dtype=np.float64) / 127.5 - 1.0).astype(dtype)


def denormalize(x):
    """Inverse of :func:`normalize`, rounded back to bytes."""
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(
        np.uint8
    )


def augment(pixels, rng, flip_prob=0.5, crop_pad=4):
    """Random horizontal flip and pad-and-crop, independently per image.

    ``pixels`` is a channels-last float batch. Padding uses the value -1
    (black), i.e. zero-padding in byte space.
    """
    if not 0.0 <= flip_prob <= 1.0:
        raise ValueError("flip_prob must lie in [0, 1]")
    if crop_pad < 0:
        raise ValueError("crop_pad must be non-negative")
    out = np.array(pixels, copy=True)
    n, h, w, _ = out.shape
    flips = rng.random(n) < flip_prob
    out[flips] = out[flips, :, ::-1]
    if crop_pad == 0:
        return out
    pad = ((0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad), (0, 0))
    padded = np.pad(out, pad, constant_values=-1.0)
    oy = rng.integers(0, 2 * crop_pad + 1, size=n)
    ox = rng.integers(0, 2 * crop_pad + 1, size=n)
    windows = sliding_window_view(padded, (h, w), axis=(1, 2))
    crops = windows[np.arange(n), oy, ox]  # (n, C, h, w)
    return np.ascontiguousarray(np.moveaxis(crops, 1, -1))


def to_geometry(pixels, size, channels):
    """Nearest-neighbor resize to ``size`` x ``size`` and adapt the channel count.

    Grayscale is replicated to three channels; RGB is averaged down to one.
    """
    pixels = np.asarray(pixels)
    n, h, w, c = pixels.shape
    if (h, w) != (size, size):
        rows = np.arange(size) * h // size
        cols = np.arange(size) * w // size
        pixels = pixels[:, rows][:, :, cols]
    if c != channels:
        if c == 1:
            pixels = np.repeat(pixels, channels, axis=-1)
        elif channels == 1:
            pixels = pixels.mean(axis=-1, keepdims=True, dtype=np.float64).astype(pixels.dtype)
        else:
            raise ValueError(f"cannot convert {c} channels to {channels}")
    return np.ascontiguousarray(pixels)


def iterate_batches(n, batch_size, rng=None, drop_last=False):
    """Yield index arrays covering ``range(n)``; shuffled when ``rng`` is given."""
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start : start + batch_size]


def prefetch(iterable, depth=2):
    """Run ``iterable`` in a single producer thread; items keep their order."""
    q = queue.Queue(maxsize=depth)
    sentinel = object()

    def produce():
        try:
            for item in iterable:
                q.put(item)
        except BaseException as exc:  # surfaced in the consumer
            q.put(exc)
        q.put(sentinel)

    threading.Thread(target=produce, daemon=True).start()
    while True:
        item = q.get()
        if item is sentinel:
            return
        if isinstance(item, BaseException):
            raise item
        yield item


# --- on-disk datasets -------------------------------------------------------

_IDX_NAMES = {
    "train": ("train-images", "train-labels"),
    "test": ("t10k-images", "t10k-labels"),
}
_URLS = {
    "mnist": "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "fashion_mnist": "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
    "cifar10": "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
    "cifar100": "https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz",
}


def data_home(root=None):
    if root is not None:
        return Path(root)
    env = os.environ.get("LOGIT_INVERT_DATA")
    if env:
        return Path(env)
    return Path.home() / ".cache" / "logit_invert"


def _find_idx(directory, stem, kind):
    for sep in ("-", "."):
        for suffix in ("", ".gz"):
            path = directory / f"{stem}{sep}{kind}-ubyte{suffix}"
            if path.exists():
                return path
    raise FileNotFoundError(f"no IDX file for {stem} under {directory}")


def _find_cifar(directory, names):
    for sub in ("", "cifar-10-batches-bin", "cifar-100-binary"):
        paths = [directory / sub / name for name in names]
        if all(p.exists() for p in paths):
            return paths
    raise FileNotFoundError(f"CIFAR batches {names} not found under {directory}")


def load_dataset(name, split="train", root=None):
    """Load a dataset split from the cache directory as a :class:`RawDataset`."""
    if name not in GEOMETRY:
        raise ValueError(f"unknown dataset {name!r}; choose from {sorted(GEOMETRY)}")
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    directory = data_home(root) / name
    if name in ("mnist", "fashion_mnist"):
        img_stem, lbl_stem = _IDX_NAMES[split]
        images = parse_idx(read_maybe_gzip(_find_idx(directory, img_stem, "idx3")))
        labels = parse_idx(read_maybe_gzip(_find_idx(directory, lbl_stem, "idx1")))
        return RawDataset(images[..., None], labels.astype(np.int64), name, split)
    if name == "cifar10":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)] if split == "train" else ["test_batch.bin"]
    else:
        names = [f"{split}.bin"]
    parts = [parse_cifar_batch(p.read_bytes(), name, split) for p in _find_cifar(directory, names)]
    return RawDataset(
        np.concatenate([p.images for p in parts]),
        np.concatenate([p.labels for p in parts]),
        name,
        split,
    )


def fetch(name, root=None, timeout=60):
    """Download a dataset into the cache directory if it is not already there."""
    directory = data_home(root) / name
    try:
        load_dataset(name, "test", root)
        return directory
    except FileNotFoundError:
        pass
    directory.mkdir(parents=True, exist_ok=True)
    if name in ("mnist", "fashion_mnist"):
        for stems in _IDX_NAMES.values():
            for stem, kind in zip(stems, ("idx3", "idx1")):
                fname = f"{stem}-{kind}-ubyte.gz"
                _download(_URLS[name] + fname, directory / fname, timeout)
    else:
        archive = directory / Path(_URLS[name]).name
        _download(_URLS[name], archive, timeout)
        with tarfile.open(archive) as tar:
            tar.extractall(directory, filter="data")
    return directory


def _download(url, dest, timeout):
    if dest.exists():
        return
    logger.info("downloading %s", url)
    tmp = dest.with_suffix(dest.suffix + ".part")
    with urllib.request.urlopen(url, timeout=timeout) as resp, open(tmp, "wb") as fh:
        while chunk := resp.read(1 << 20):
            fh.write(chunk)
    tmp.replace(dest)


def natural_patches(n, size=32, channels=1, seed=0):
    """Seeded square crops from the photographs bundled with scikit-learn.

    Stands in for an out-of-distribution dataset when none is cached. Crops
    are 4x the target side and nearest-neighbor resized; pixels in [-1, 1].
    """
    from sklearn.datasets import load_sample_images

    photos = load_sample_images().images
    rng = np.random.default_rng(seed)
    side = 4 * size
    crops = []
    for _ in range(n):
        img = photos[rng.integers(len(photos))]
        y = rng.integers(0, img.shape[0] - side + 1)
        x = rng.integers(0, img.shape[1] - side + 1)
        crops.append(img[y : y + side, x : x + side])
    return to_geometry(normalize(np.stack(crops)), size, channels)
