"""
Data
Synthetic clustered images, the SOPD binary format and multi-crop views
"""
import hashlib
import logging
import math
import struct
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from app.exceptions import BadMagic, ConfigInvalid, IoError, TruncatedFile, VersionUnsupported
from app.numerics import get_dtype
from app.rng import make_rng

logger = logging.getLogger(__name__)

MAGIC = b'SOPD'
FORMAT_VERSION = 1
_HEADER = struct.Struct('<4sIIIIII')

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

GLOBAL_SCALE = (0.6, 1.0)
LOCAL_SCALE = (0.15, 0.5)
CROP_RATIO = (3 / 4, 4 / 3)
BRIGHTNESS = 0.2
LAYOUT_GRID = 4
LAYOUT_DOTS = 4


@dataclass
class ImageDataset:
    """
    Labelled 8-bit images

    pixels: n x h x w x c uint8, row-major per image
    labels: n integers in [0, num_classes)
    """
    pixels: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be n x h x w x c, got shape {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise ValueError("one label per image is required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.n

    @property
    def n(self):
        return self.pixels.shape[0]

    @property
    def height(self):
        return self.pixels.shape[1]

    @property
    def width(self):
        return self.pixels.shape[2]

    @property
    def channels(self):
        return self.pixels.shape[3]

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return ImageDataset(self.pixels[indices], self.labels[indices], self.num_classes)


# ----------------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------------

def _class_template(rng, size, channels):
    """Textured background plus 2-4 colored rectangles"""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(40.0, 215.0, size=channels)
    freq = rng.uniform(0.5, 3.0, size=2)
    phase = rng.uniform(0.0, 2 * math.pi)
    amplitude = rng.uniform(10.0, 30.0)
    texture = amplitude * np.sin(2 * math.pi * (freq[0] * xx + freq[1] * yy) / size + phase)
    template = base[None, None, :] + texture[:, :, None]

    for _ in range(int(rng.integers(2, 5))):
        h = int(rng.integers(max(2, size // 8), max(3, size // 2) + 1))
        w = int(rng.integers(max(2, size // 8), max(3, size // 2) + 1))
        top = int(rng.integers(0, size - h + 1))
        left = int(rng.integers(0, size - w + 1))
        template[top:top + h, left:left + w, :] = rng.uniform(0.0, 255.0, size=channels)
    return template


def _dot_palette(rng, channels):
    """Shared background color and LAYOUT_DOTS dot colors that stand out from it"""
    background = rng.uniform(60.0, 190.0, size=channels)
    colors = []
    while len(colors) < LAYOUT_DOTS:
        color = rng.uniform(0.0, 255.0, size=channels)
        if np.abs(color - background).max() > 60.0 and all(np.abs(color - c).max() > 40.0 for c in colors):
            colors.append(color)
    return background, np.stack(colors)


def _layout_key(cells):
    """Canonical form of a dot layout up to cyclic cell shifts and horizontal flips"""
    grid = np.full((LAYOUT_GRID, LAYOUT_GRID), -1)
    for dot, index in enumerate(cells):
        grid.reshape(-1)[index] = dot
    variants = []
    for candidate in (grid, grid[:, ::-1]):
        for dy in range(LAYOUT_GRID):
            for dx in range(LAYOUT_GRID):
                variants.append(tuple(np.roll(candidate, (dy, dx), axis=(0, 1)).reshape(-1)))
    return min(variants)


def _class_layouts(rng, num_classes):
    layouts, seen = [], set()
    while len(layouts) < num_classes:
        cells = rng.choice(LAYOUT_GRID * LAYOUT_GRID, size=LAYOUT_DOTS, replace=False)
        key = _layout_key(cells)
        if key not in seen:
            seen.add(key)
            layouts.append(cells)
    return layouts


def _render_layout(cells, background, colors, size):
    cell = size // LAYOUT_GRID
    lo = cell // 4
    hi = lo + max(1, cell // 2)
    image = np.empty((size, size, len(background)))
    image[:] = background
    for color, index in zip(colors, cells):
        row, col = divmod(int(index), LAYOUT_GRID)
        image[row * cell + lo:row * cell + hi, col * cell + lo:col * cell + hi] = color
    return image


def _hard_templates(rng, num_classes, per_class, size, channels):
    """
    Per-sample templates for the dot-layout variant

    The image is a LAYOUT_GRID x LAYOUT_GRID grid of cells; every class puts
    the same LAYOUT_DOTS colored dots into its own cells, and every sample is
    its class layout cyclically shifted by a random offset. All images share
    one pixel multiset, and since dots sit in the middle half of their cells
    no window of up to size / 8 pixels ever sees two of them. Only the
    relative placement of the dots tells the classes apart.
    """
    if size % LAYOUT_GRID or size < 2 * LAYOUT_GRID:
        raise ConfigInvalid('size', f"hard datasets need a multiple of {LAYOUT_GRID} of at least {2 * LAYOUT_GRID}")
    background, colors = _dot_palette(rng, channels)
    for cells in _class_layouts(rng, num_classes):
        layout = _render_layout(cells, background, colors, size)
        shifts = rng.integers(0, size, size=(per_class, 2))
        yield np.stack([np.roll(layout, (int(dy), int(dx)), axis=(0, 1)) for dy, dx in shifts])


def generate_synthetic(num_classes, per_class, size=32, noise_std=8.0, seed=0, channels=3, hard=False):
    """
    Generate a clustered image dataset

    Each class owns one fixed random template; samples are the template plus
    Gaussian pixel noise, rounded and clipped to [0, 255]. Images are stored
    class-major.

    With hard=True the classes differ only in where a shared set of dots is
    placed and each sample is randomly translated (see _hard_templates). Such
    data defeats raw-pixel and untrained-encoder classifiers, so it is the
    variant on which training has something to show.

    Args:
        num_classes (int): at least 2
        per_class (int): samples per class
        size (int): image side
        noise_std (float): pixel noise; 0 makes every sample equal its template
        seed (int): generator seed
        hard (bool): dot-layout classes with per-sample translation

    Returns:
        ImageDataset
    """
    if num_classes < 2:
        raise ConfigInvalid('num_classes', f"must be at least 2, got {num_classes}")
    if per_class < 1 or size < 4:
        raise ConfigInvalid('per_class' if per_class < 1 else 'size', "must be positive (size >= 4)")

    if hard:
        rng = make_rng(seed, 'synthetic', 'hard')
        per_sample = _hard_templates(rng, num_classes, per_class, size, channels)
    else:
        rng = make_rng(seed, 'synthetic')
        templates = [_class_template(rng, size, channels) for _ in range(num_classes)]
        per_sample = (t[None] for t in templates)

    pixels = np.empty((num_classes * per_class, size, size, channels), dtype=np.uint8)
    labels = np.repeat(np.arange(num_classes), per_class)
    for c, template in enumerate(per_sample):
        shape = (per_class,) + template.shape[1:]
        noise = rng.normal(0.0, noise_std, size=shape) if noise_std > 0 else 0.0
        samples = np.clip(np.rint(template + noise), 0, 255)
        pixels[c * per_class:(c + 1) * per_class] = samples.astype(np.uint8)

    logger.info("generated %d synthetic images (%d classes, %dx%d%s)", len(labels), num_classes, size, size,
                ', hard' if hard else '')
    return ImageDataset(pixels, labels, num_classes)


# ----------------------------------------------------------------------------
# SOPD binary format
# ----------------------------------------------------------------------------

def dataset_to_bytes(dataset):
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, dataset.n, dataset.height, dataset.width,
                          dataset.channels, dataset.num_classes)
    return header + dataset.pixels.tobytes() + dataset.labels.astype('<u4').tobytes()


def dataset_from_bytes(buf):
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic("not an SOPD dataset file")
    if len(buf) < _HEADER.size:
        raise TruncatedFile("header is incomplete")
    _, version, n, h, w, c, num_classes = _HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise VersionUnsupported(f"SOPD version {version} (supported: {FORMAT_VERSION})")

    pixel_bytes = n * h * w * c
    expected = _HEADER.size + pixel_bytes + 4 * n
    if len(buf) < expected:
        raise TruncatedFile(f"expected {expected} bytes, file has {len(buf)}")

    pixels = np.frombuffer(buf, dtype=np.uint8, count=pixel_bytes, offset=_HEADER.size)
    labels = np.frombuffer(buf, dtype='<u4', count=n, offset=_HEADER.size + pixel_bytes)
    if n and labels.max() >= num_classes:
        raise IoError(f"label {int(labels.max())} outside [0, {num_classes})")
    return ImageDataset(pixels.reshape(n, h, w, c).copy(), labels.astype(np.int64), num_classes)


def save_dataset(dataset, path):
    try:
        with open(path, 'wb') as f:
            f.write(dataset_to_bytes(dataset))
    except OSError as e:
        raise IoError(f"cannot write dataset to {path}: {e}") from e
    logger.debug("wrote %d images to %s", dataset.n, path)


def load_dataset(path):
    try:
        with open(path, 'rb') as f:
            buf = f.read()
    except OSError as e:
        raise IoError(f"cannot read dataset {path}: {e}") from e
    return dataset_from_bytes(buf)


def dataset_digest(dataset):
    """sha256 of the serialized dataset"""
    return hashlib.sha256(dataset_to_bytes(dataset)).hexdigest()


# ----------------------------------------------------------------------------
# augmentation
# ----------------------------------------------------------------------------

@dataclass
class CropParams:
    """Where a view came from, in source-pixel coordinates"""
    top: float
    left: float
    height: float
    width: float
    flip: bool
    brightness: float
    source_area: int

    @property
    def area_fraction(self):
        return self.height * self.width / self.source_area


@dataclass
class ViewBatch:
    """
    Multi-crop views

    For a single image (multicrop) each view is an S x S x C array of pixel
    values in [0, 255]. For a batch (make_view_batch) each view is a
    B x S x S x C normalized array and `crops` holds one list per view.
    """
    global_views: list
    local_views: list
    crops: list = field(default_factory=list)
    indices: np.ndarray = None
    labels: np.ndarray = None

    @property
    def num_views(self):
        return len(self.global_views) + len(self.local_views)

    @property
    def batch_size(self):
        return 0 if self.indices is None else len(self.indices)


def normalize_pixels(x):
    """(pixel / 255 - 0.5) / 0.25"""
    x = np.asarray(x, dtype=get_dtype())
    return (x / 255.0 - PIXEL_MEAN) / PIXEL_STD


def _sample_crop(rng, height, width, scale, ratio=CROP_RATIO, attempts=10):
    area = height * width
    log_ratio = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(attempts):
        target = area * rng.uniform(*scale)
        aspect = math.exp(rng.uniform(*log_ratio))
        w = math.sqrt(target * aspect)
        h = math.sqrt(target / aspect)
        if h <= height and w <= width:
            return rng.uniform(0.0, height - h), rng.uniform(0.0, width - w), h, w
    # square crop at the middle of the scale range
    side = math.sqrt(area * (scale[0] + scale[1]) / 2)
    h, w = min(side, height), min(side, width)
    return rng.uniform(0.0, height - h), rng.uniform(0.0, width - w), h, w


def _resize_crop(image, top, left, h, w, out_size):
    """Bilinear resample of a (sub-pixel) crop to out_size x out_size"""
    steps = (np.arange(out_size) + 0.5) / out_size
    ys = top + steps * h - 0.5
    xs = left + steps * w - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing='ij')
    channels = [map_coordinates(image[:, :, ch].astype(np.float64), [yy, xx], order=1, mode='nearest')
                for ch in range(image.shape[2])]
    return np.stack(channels, axis=-1)


def _make_view(image, rng, scale, out_size):
    height, width = image.shape[:2]
    top, left, h, w = _sample_crop(rng, height, width, scale)
    view = _resize_crop(image, top, left, h, w, out_size)
    flip = bool(rng.random() < 0.5)
    if flip:
        view = view[:, ::-1, :]
    brightness = float(rng.uniform(1.0 - BRIGHTNESS, 1.0 + BRIGHTNESS))
    view = np.clip(view * brightness, 0.0, 255.0)
    crop = CropParams(top=top, left=left, height=h, width=w, flip=flip,
                      brightness=brightness, source_area=height * width)
    return view.astype(get_dtype()), crop


def multicrop(image, v_local, rng, global_size=None, local_size=16):
    """
    Two global views and v_local local views of one image

    Globals cover 60-100% of the image area, locals 15-50%; every view gets
    a random horizontal flip and a +/-20% brightness jitter. Values stay in
    [0, 255]; crop parameters are recorded per view.

    Args:
        image: h x w x c uint8 image
        v_local (int): number of local views
        rng (numpy.random.Generator): per-sample stream
        global_size (int): global view side (defaults to the image side)
        local_size (int): local view side
    """
    image = np.asarray(image)
    global_size = global_size or image.shape[0]
    global_views, local_views, crops = [], [], []
    for _ in range(2):
        view, crop = _make_view(image, rng, GLOBAL_SCALE, global_size)
        global_views.append(view)
        crops.append(crop)
    for _ in range(v_local):
        view, crop = _make_view(image, rng, LOCAL_SCALE, local_size)
        local_views.append(view)
        crops.append(crop)
    return ViewBatch(global_views=global_views, local_views=local_views, crops=crops)


def sample_batch_indices(n, batch_size, seed, step):
    """Images used at `step`; depends only on (seed, step)"""
    rng = make_rng(seed, 'batch', step)
    return np.asarray(rng.choice(n, size=batch_size, replace=batch_size > n), dtype=np.int64)


def make_view_batch(dataset, indices, v_local, seed, step, global_size=None, local_size=16):
    """
    Stack normalized multi-crop views for a batch of images

    Each sample draws from its own stream keyed by (seed, step, position),
    so the result does not depend on the order samples are processed in.
    """
    indices = np.asarray(indices, dtype=np.int64)
    per_sample = [
        multicrop(dataset.pixels[idx], v_local, make_rng(seed, 'augment', step, pos),
                  global_size=global_size, local_size=local_size)
        for pos, idx in enumerate(indices)
    ]
    num_views = 2 + v_local

    def stacked(view_index):
        key = 'global_views' if view_index < 2 else 'local_views'
        offset = view_index if view_index < 2 else view_index - 2
        return normalize_pixels(np.stack([getattr(s, key)[offset] for s in per_sample]))

    return ViewBatch(
        global_views=[stacked(v) for v in range(2)],
        local_views=[stacked(v) for v in range(2, num_views)],
        crops=[[s.crops[v] for s in per_sample] for v in range(num_views)],
        indices=indices,
        labels=dataset.labels[indices],
    )


class BatchPrefetcher:
    """
    Builds view batches ahead of the training thread

    Worker threads fill a bounded window of pending batches; batches are
    handed out in step order, so content depends only on (seed, step).

    Usage:
        with BatchPrefetcher(dataset, 64, 4, seed=0, start=0, stop=100) as batches:
            for step, batch in batches:
                ...
    """

    def __init__(self, dataset, batch_size, v_local, seed, start, stop,
                 prefetch=2, workers=1, global_size=None, local_size=16):
        self.dataset = dataset
        self.batch_size = batch_size
        self.v_local = v_local
        self.seed = seed
        self.start = start
        self.stop = stop
        self.prefetch = max(1, prefetch)
        self.global_size = global_size
        self.local_size = local_size
        self._executor = ThreadPoolExecutor(max_workers=max(1, workers), thread_name_prefix='sop-prefetch')
        self._pending = deque()
        self._next = start

    def build(self, step):
        indices = sample_batch_indices(self.dataset.n, self.batch_size, self.seed, step)
        return make_view_batch(self.dataset, indices, self.v_local, self.seed, step,
                               global_size=self.global_size, local_size=self.local_size)

    def _fill(self):
        while len(self._pending) < self.prefetch and self._next < self.stop:
            step = self._next
            self._pending.append((step, self._executor.submit(self.build, step)))
            self._next += 1

    def __iter__(self):
        self._fill()
        while self._pending:
            step, future = self._pending.popleft()
            batch = future.result()
            self._fill()
            yield step, batch

    def close(self):
        for _, future in self._pending:
            future.cancel()
        self._pending.clear()
        self._executor.shutdown(wait=True)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False
