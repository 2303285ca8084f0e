"""Synthetic image domains, augmentation, and the on-disk dataset format.

Three domain kinds with deliberately different class structure:

* ``generic``: independent per-class prototype images, well separated
* ``finegrained``: one shared base image plus small per-class offsets
* ``texture``: sinusoid gratings where the class fixes frequency and
  orientation while each sample draws a random phase

Every pixel is a pure function of a ``SyntheticDomainSpec`` seed, so
regenerating from the same spec gives bitwise-identical arrays.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np

from .rng import Rng, mix_seed

KINDS = ("generic", "finegrained", "texture")


@dataclass
class SyntheticDomainSpec:
    kind: str
    num_classes: int
    samples_per_class: int
    image_size: int = 16
    noise: float = 0.1
    seed: int = 0

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError("unknown domain kind %r" % self.kind)
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be positive")
        if self.image_size < 2:
            raise ValueError("image_size must be at least 2")


@dataclass
class DomainDataset:
    name: str
    split: str
    images: np.ndarray  # (N, 1, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __len__(self):
        return self.images.shape[0]


def _class_images(spec, rng):
    """Yield ``(class_index, image)`` for every sample, class-major order."""
    s = spec.image_size
    if spec.kind == "generic":
        protos = [rng.uniforms((1, s, s)) * 0.5 + 0.25 for _ in range(spec.num_classes)]
        for c in range(spec.num_classes):
            for _ in range(spec.samples_per_class):
                yield c, protos[c] + rng.normals((1, s, s), spec.noise)
    elif spec.kind == "finegrained":
        base = rng.uniforms((1, s, s)) * 0.5 + 0.25
        deltas = [rng.normals((1, s, s), 0.12) for _ in range(spec.num_classes)]
        for c in range(spec.num_classes):
            for _ in range(spec.samples_per_class):
                yield c, base + deltas[c] + rng.normals((1, s, s), spec.noise)
    else:
        yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
        for c in range(spec.num_classes):
            angle = math.pi * c / spec.num_classes
            freq = 2.0 + (c % 3)
            u = xx * math.cos(angle) + yy * math.sin(angle)
            for _ in range(spec.samples_per_class):
                phase = rng.uniform() * 2.0 * math.pi
                wave = np.sin(2.0 * math.pi * freq * u / s + phase)
                img = 0.5 + 0.35 * wave[None, :, :]
                yield c, img + rng.normals((1, s, s), spec.noise)


def generate_domain(spec, name=None):
    """Build one domain and return its ``(train, val)`` split.

    The split is stratified: the first 80% of each class's samples go to
    train, the rest to val.
    """
    spec.validate()
    name = name or spec.kind
    rng = Rng(mix_seed(spec.seed, KINDS.index(spec.kind)))
    images, labels = [], []
    for c, img in _class_images(spec, rng):
        images.append(np.clip(img, 0.0, 1.0))
        labels.append(c)
    images = np.stack(images)
    labels = np.array(labels, dtype=np.int64)

    n_train = (4 * spec.samples_per_class) // 5
    tr_idx, va_idx = [], []
    for c in range(spec.num_classes):
        start = c * spec.samples_per_class
        tr_idx.extend(range(start, start + n_train))
        va_idx.extend(range(start + n_train, start + spec.samples_per_class))
    train = DomainDataset(name, "train", images[tr_idx], labels[tr_idx], spec.num_classes)
    val = DomainDataset(name, "val", images[va_idx], labels[va_idx], spec.num_classes)
    return train, val


# ---------------------------------------------------------------------------
# augmentation


def hflip(image):
    return image[:, :, ::-1].copy()


def rot90(image, k):
    return np.rot90(image, k, axes=(1, 2)).copy()


def shift(image, dy, dx):
    """Translate with zero fill, keeping shape."""
    c, h, w = image.shape
    out = np.zeros_like(image)
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    yd = slice(max(-dy, 0), min(h - dy, h))
    xd = slice(max(-dx, 0), min(w - dx, w))
    out[:, ys, xs] = image[:, yd, xd]
    return out


def augment(image, rng):
    """Random flip, quarter-turn rotation, and up-to-2px jitter."""
    if rng.uniform() < 0.5:
        image = hflip(image)
    k = rng.randrange(4)
    if k:
        image = rot90(image, k)
    dy = rng.randrange(5) - 2
    dx = rng.randrange(5) - 2
    if dy or dx:
        image = shift(image, dy, dx)
    return image


# ---------------------------------------------------------------------------
# on-disk format ("CLTD1")

MAGIC = b"CLTD1"
VERSION = 1


class DatasetError(Exception):
    """Base class for dataset file failures."""


class DatasetMagicError(DatasetError):
    """File does not start with the CLTD1 magic."""


class DatasetVersionError(DatasetError):
    """File version is not one this reader understands."""


class DatasetTruncationError(DatasetError):
    """File ends before the declared payload is complete."""


def save_dataset(path, dataset):
    n, c, h, w = dataset.images.shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(struct.pack("<5I", n, c, h, w, dataset.num_classes))
        fh.write(np.ascontiguousarray(dataset.images, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def load_dataset(path, name=None, split=""):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC):
        raise DatasetTruncationError("file shorter than the magic")
    if blob[: len(MAGIC)] != MAGIC:
        raise DatasetMagicError("bad magic %r" % blob[: len(MAGIC)])
    pos = len(MAGIC)
    if len(blob) < pos + 2 + 20:
        raise DatasetTruncationError("file ends inside the header")
    (version,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    if version != VERSION:
        raise DatasetVersionError(
            "unsupported version %d (reader supports %d)" % (version, VERSION)
        )
    n, c, h, w, num_classes = struct.unpack_from("<5I", blob, pos)
    pos += 20
    need = n * c * h * w * 8 + n * 4
    if len(blob) < pos + need:
        raise DatasetTruncationError(
            "payload needs %d bytes, file has %d" % (need, len(blob) - pos)
        )
    images = (
        np.frombuffer(blob, dtype="<f8", count=n * c * h * w, offset=pos)
        .reshape(n, c, h, w)
        .copy()
    )
    pos += n * c * h * w * 8
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=pos).astype(np.int64)
    return DomainDataset(name or "loaded", split, images, labels, num_classes)


# ---------------------------------------------------------------------------
# the three-domain suite used by the experiment harness

SUITE_ORDER = ("generic", "finegrained", "texture")

_SUITE_CLASSES = {"generic": 10, "finegrained": 9, "texture": 8}
_SUITE_NOISE = {"generic": 0.10, "finegrained": 0.10, "texture": 0.15}


def suite_specs(seed, samples_per_class=35, image_size=16):
    """Specs for the three evaluation domains, keyed by name."""
    specs = {}
    for i, kind in enumerate(SUITE_ORDER):
        specs[kind] = SyntheticDomainSpec(
            kind=kind,
            num_classes=_SUITE_CLASSES[kind],
            samples_per_class=samples_per_class,
            image_size=image_size,
            noise=_SUITE_NOISE[kind],
            seed=mix_seed(seed, 100 + i),
        )
    return specs


def make_suite(seed, samples_per_class=35, image_size=16):
    """Generate all three domains; returns name -> (train, val)."""
    return {
        name: generate_domain(spec, name)
        for name, spec in suite_specs(seed, samples_per_class, image_size).items()
    }


def pretrain_spec(seed, samples_per_class=40, image_size=16):
    """A separate generic-style domain used only to warm up the backbone."""
    return SyntheticDomainSpec(
        kind="generic",
        num_classes=8,
        samples_per_class=samples_per_class,
        image_size=image_size,
        noise=0.10,
        seed=mix_seed(seed, 999),
    )
