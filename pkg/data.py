"""Image and mask I/O (binary PPM/PGM), preprocessing, dataset manifests and
seeded batch iteration."""

import logging
import os
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from errors import DimensionError, FormatError, SampleError, UsageError

logger = logging.getLogger(__name__)

IMAGENET_MEANS = (0.485, 0.456, 0.406)
TRAIN_SIZE = 224
MAXVAL = 255
_WHITESPACE = b" \t\r\n"


@dataclass
class ImageBuffer:
    """8-bit samples, row-major, shape (height, width, channels)."""

    width: int
    height: int
    channels: int
    samples: np.ndarray

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise DimensionError(f"channels must be 1 or 3, got {self.channels}", axis="channels")
        self.samples = np.ascontiguousarray(self.samples, dtype=np.uint8).reshape(
            self.height, self.width, self.channels
        )

    @classmethod
    def from_array(cls, array):
        array = np.asarray(array, dtype=np.uint8)
        if array.ndim == 2:
            array = array[:, :, None]
        return cls(array.shape[1], array.shape[0], array.shape[2], array)


@dataclass
class Sample:
    image: np.ndarray
    mask: np.ndarray
    name: str = ""


def _read_token(data, offset, path=None):
    """Next header token, skipping whitespace and '#' comments."""
    while offset < len(data):
        byte = data[offset:offset + 1]
        if byte in _WHITESPACE:
            offset += 1
        elif byte == b"#":
            while offset < len(data) and data[offset:offset + 1] not in (b"\n", b"\r"):
                offset += 1
        else:
            break
    start = offset
    while offset < len(data) and data[offset:offset + 1] not in _WHITESPACE + b"#":
        offset += 1
    if start == offset:
        raise FormatError("truncated header", offset=start, path=path)
    return data[start:offset], start, offset


def decode_image(data, path=None):
    magic, _, offset = _read_token(data, 0, path)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported magic {magic!r}", offset=0, path=path)
    fields = []
    for what in ("width", "height", "maxval"):
        token, start, offset = _read_token(data, offset, path)
        if not token.isdigit():
            raise FormatError(f"invalid {what} {token!r}", offset=start, path=path)
        fields.append((int(token), start))
    (width, w_at), (height, h_at), (maxval, m_at) = fields
    if width < 1:
        raise FormatError("width must be positive", offset=w_at, path=path)
    if height < 1:
        raise FormatError("height must be positive", offset=h_at, path=path)
    if maxval != MAXVAL:
        raise FormatError(f"maxval must be {MAXVAL}, got {maxval}", offset=m_at, path=path)
    if offset >= len(data) or data[offset:offset + 1] not in (b" ", b"\t", b"\r", b"\n"):
        raise FormatError("missing whitespace after maxval", offset=offset, path=path)
    offset += 1
    channels = 3 if magic == b"P6" else 1
    expected = width * height * channels
    if len(data) - offset < expected:
        raise FormatError(
            f"truncated pixel data: need {expected} bytes, have {len(data) - offset}", offset=offset, path=path
        )
    samples = np.frombuffer(data, dtype=np.uint8, count=expected, offset=offset)
    return ImageBuffer(width, height, channels, samples.copy())


def read_image(path):
    """Decode a binary PPM (P6) or PGM (P5) file with maxval 255."""
    with open(path, "rb") as f:
        data = f.read()
    return decode_image(data, path)


def encode_image(buffer):
    magic = b"P6" if buffer.channels == 3 else b"P5"
    header = b"%s\n%d %d\n%d\n" % (magic, buffer.width, buffer.height, MAXVAL)
    return header + buffer.samples.tobytes()


def write_image(buffer, path):
    with open(path, "wb") as f:
        f.write(encode_image(buffer))


def quantize(values):
    """[0, 1] floats -> bytes via round-half-up of v * 255, clamped."""
    scaled = np.floor(np.asarray(values, dtype=np.float64) * MAXVAL + 0.5)
    return np.clip(scaled, 0, MAXVAL).astype(np.uint8)


def saliency_to_image(saliency):
    """(1, 1, H, W), (1, H, W) or (H, W) saliency map -> grayscale ImageBuffer."""
    plane = np.asarray(saliency)
    while plane.ndim > 2:
        plane = plane[0]
    return ImageBuffer.from_array(quantize(plane))


def to_rgb(image):
    if image.channels == 3:
        return image
    return ImageBuffer.from_array(np.repeat(image.samples, 3, axis=2))


def normalize(image, means=IMAGENET_MEANS):
    """ImageBuffer -> (1, 3, H, W) float32: scale to [0, 1], subtract channel means."""
    rgb = to_rgb(image)
    scaled = rgb.samples.astype(np.float64) / MAXVAL - np.asarray(means, dtype=np.float64)
    return np.ascontiguousarray(scaled.transpose(2, 0, 1)[None], dtype=np.float32)


def denormalize(tensor, means=IMAGENET_MEANS):
    """Inverse of ``normalize`` back to [0, 1] floats, (H, W, 3)."""
    return tensor[0].astype(np.float64).transpose(1, 2, 0) + np.asarray(means, dtype=np.float64)


def mask_to_tensor(image, binarize=False):
    """Mask ImageBuffer -> (1, 1, H, W) float32 in [0, 1]."""
    plane = image.samples.astype(np.float64).mean(axis=2) / MAXVAL
    if binarize:
        plane = (plane > 0.5).astype(np.float64)
    return np.ascontiguousarray(plane[None, None], dtype=np.float32)


def _source_coords(out_size, in_size):
    # half-pixel centers, clamped to the valid range
    src = (np.arange(out_size, dtype=np.float64) + 0.5) * in_size / out_size - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def resize(image, target_h, target_w, kind="bilinear"):
    if target_h < 1 or target_w < 1:
        raise DimensionError("resize targets must be >= 1", axis="height" if target_h < 1 else "width")
    if (target_h, target_w) == (image.height, image.width):
        return ImageBuffer(image.width, image.height, image.channels, image.samples.copy())
    src = image.samples
    if kind == "nearest":
        rows = np.minimum(((np.arange(target_h) + 0.5) * image.height / target_h).astype(np.int64), image.height - 1)
        cols = np.minimum(((np.arange(target_w) + 0.5) * image.width / target_w).astype(np.int64), image.width - 1)
        return ImageBuffer.from_array(src[rows][:, cols])
    if kind != "bilinear":
        raise ValueError(f"unknown resize kind {kind!r}")
    y0, y1, wy = _source_coords(target_h, image.height)
    x0, x1, wx = _source_coords(target_w, image.width)
    data = src.astype(np.float64)
    top = data[y0][:, x0] * (1 - wx)[None, :, None] + data[y0][:, x1] * wx[None, :, None]
    bottom = data[y1][:, x0] * (1 - wx)[None, :, None] + data[y1][:, x1] * wx[None, :, None]
    out = top * (1 - wy)[:, None, None] + bottom * wy[:, None, None]
    return ImageBuffer.from_array(np.clip(np.floor(out + 0.5), 0, MAXVAL))


def resize_map(saliency, target_h, target_w):
    """Bilinear resize of a float (1, 1, H, W) map, same sampling as ``resize``."""
    plane = saliency[0, 0].astype(np.float64)
    y0, y1, wy = _source_coords(target_h, plane.shape[0])
    x0, x1, wx = _source_coords(target_w, plane.shape[1])
    top = plane[y0][:, x0] * (1 - wx) + plane[y0][:, x1] * wx
    bottom = plane[y1][:, x0] * (1 - wx) + plane[y1][:, x1] * wx
    out = top * (1 - wy)[:, None] + bottom * wy[:, None]
    return out[None, None].astype(saliency.dtype)


@dataclass
class DatasetManifest:
    root: str
    entries: list = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def paths(self, index):
        image, mask = self.entries[index]
        return os.path.join(self.root, image), os.path.join(self.root, mask)

    def name(self, index):
        return os.path.splitext(os.path.basename(self.entries[index][0]))[0]


def parse_manifest(text, root):
    entries = []
    for number, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise FormatError(f"manifest line {number}: expected 'image<TAB>mask'")
        entries.append((parts[0].strip(), parts[1].strip()))
    return DatasetManifest(root, entries)


def load_manifest(path, check_files=True):
    """Parse a manifest; relative paths resolve against the manifest's directory."""
    with open(path, encoding="utf-8") as f:
        manifest = parse_manifest(f.read(), os.path.dirname(os.path.abspath(path)))
    if check_files:
        missing = [p for i in range(len(manifest)) for p in manifest.paths(i) if not os.path.isfile(p)]
        if missing:
            raise UsageError(f"manifest {path} references {len(missing)} missing files, first: {missing[0]}")
    logger.info("Loaded manifest %s with %d entries", path, len(manifest))
    return manifest


def load_sample(manifest, index, target_size=None, binarize=False, means=IMAGENET_MEANS):
    image_path, mask_path = manifest.paths(index)
    try:
        image = read_image(image_path)
    except (OSError, FormatError) as e:
        raise SampleError(image_path, e) from e
    try:
        mask = read_image(mask_path)
    except (OSError, FormatError) as e:
        raise SampleError(mask_path, e) from e
    if target_size is not None:
        image = resize(image, target_size, target_size, "bilinear")
        mask = resize(mask, target_size, target_size, "nearest")
    elif (mask.height, mask.width) != (image.height, image.width):
        mask = resize(mask, image.height, image.width, "nearest")
    return Sample(normalize(image, means), mask_to_tensor(mask, binarize), manifest.name(index))


class ManifestDataset:
    """Samples decoded on demand from a manifest, resized to a common size."""

    def __init__(self, manifest, target_size=TRAIN_SIZE, binarize=False, means=IMAGENET_MEANS):
        if len(manifest) == 0:
            raise UsageError("dataset is empty")
        self.manifest = manifest
        self.target_size = target_size
        self.binarize = binarize
        self.means = means

    def __len__(self):
        return len(self.manifest)

    def load(self, index):
        return load_sample(self.manifest, index, self.target_size, self.binarize, self.means)


class ArrayDataset:
    """In-memory samples: images (N, 3, H, W), masks (N, 1, H, W)."""

    def __init__(self, images, masks):
        images = np.asarray(images, dtype=np.float32)
        masks = np.asarray(masks, dtype=np.float32)
        if images.shape[0] != masks.shape[0]:
            raise DimensionError("image and mask counts differ", axis="batch")
        self.images = images
        self.masks = masks

    def __len__(self):
        return self.images.shape[0]

    def load(self, index):
        return Sample(self.images[index:index + 1], self.masks[index:index + 1], str(index))


def shuffled_order(count, seed, epoch=0):
    """Fisher-Yates permutation of range(count), seeded by (seed, epoch)."""
    rng = np.random.default_rng([seed, epoch])
    order = list(range(count))
    for i in range(count - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def batch_indices(count, batch_size, seed, epoch=0, shuffle=True):
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    order = shuffled_order(count, seed, epoch) if shuffle else list(range(count))
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]


def load_batch(dataset, indices, skip_errors=True):
    """Stack samples into ``(images, masks)``; undecodable samples are skipped."""
    images, masks = [], []
    for index in indices:
        try:
            sample = dataset.load(index)
        except SampleError as e:
            if not skip_errors:
                raise
            logger.warning("Skipping sample: %s", e)
            continue
        images.append(sample.image)
        masks.append(sample.mask)
    if not images:
        return None
    try:
        return np.concatenate(images, axis=0), np.concatenate(masks, axis=0)
    except ValueError as e:
        raise DimensionError(f"samples in a batch have different sizes: {e}", axis="height") from e


def batches(dataset, batch_size, seed, epoch=0, shuffle=True):
    """Iterate ``(images, masks)`` batches in seeded shuffle order.

    Accepts a dataset (``len`` + ``load``) or a ``DatasetManifest``. The last
    batch may be smaller than ``batch_size``.
    """
    if isinstance(dataset, DatasetManifest):
        dataset = ManifestDataset(dataset)
    for indices in batch_indices(len(dataset), batch_size, seed, epoch, shuffle):
        batch = load_batch(dataset, indices)
        if batch is not None:
            yield batch


_DONE = object()
PREFETCH_POLL = 0.05


def prefetch(iterable, depth=2):
    """Produce items on a background thread through a bounded queue; order is kept."""
    items = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def offer(item):
        # False once the consumer has gone away
        while not stop.is_set():
            try:
                items.put(item, timeout=PREFETCH_POLL)
                return True
            except queue.Full:
                continue
        return False

    def producer():
        try:
            for item in iterable:
                if not offer(item):
                    return
        except BaseException as e:  # re-raised on the consumer side
            offer(e)
            return
        offer(_DONE)

    worker = threading.Thread(target=producer, name="prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = items.get()
            if item is _DONE:
                break
            if isinstance(item, BaseException):
                raise item
            yield item
    finally:
        stop.set()
        worker.join()
