"""Datasets: synthetic informative-patch generator, CIFAR-10 reader, split,
augmentation and batching.

The synthetic task plants an additive class template on a known set S of patch
positions over clipped Gaussian background noise, so "which patches matter" has
a ground truth the masking network can be scored against. Patches outside S
carry no label information by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DataFormatError

_TAG_TEMPLATE = 0x7E31
_TAG_PIXELS = 0x9D01
_TAG_SPLIT = 0x51CE
_TAG_BATCH = 0xBA7C


@dataclass
class LabeledImage:
    pixels: np.ndarray  # (channels, side, side), values in [0, 1]
    label: int


@dataclass(frozen=True)
class SynthSpec:
    side: int = 16
    channels: int = 1
    patch_size: int = 4
    num_classes: int = 4
    informative: tuple[int, ...] = (0, 5, 10, 15)  # grid diagonal
    amplitude: float = 0.6
    noise: float = 0.1
    samples_per_class: int = 200

    def __post_init__(self):
        n = self.num_patches
        if self.side % self.patch_size != 0:
            raise ConfigError(f"side {self.side} not divisible by patch {self.patch_size}")
        if not self.informative:
            raise ConfigError("informative set must be nonempty")
        if any(p < 0 or p >= n for p in self.informative):
            raise ConfigError(f"informative set {self.informative} outside [0, {n})")
        if len(set(self.informative)) != len(self.informative):
            raise ConfigError("informative set has duplicates")
        if self.amplitude <= 0:
            raise ConfigError(f"amplitude must be > 0, got {self.amplitude}")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.num_classes < 2 or self.samples_per_class < 1:
            raise ConfigError("need >= 2 classes and >= 1 sample per class")

    @property
    def num_patches(self) -> int:
        return (self.side // self.patch_size) ** 2


@dataclass
class DatasetBundle:
    """80/20 split plus the unlabeled view; d_u aliases d_tr's images."""

    d_tr: list[LabeledImage]
    d_val: list[LabeledImage]
    d_u: list[np.ndarray]
    num_classes: int
    split_seed: int
    informative_set: tuple[int, ...] | None = None
    synth: SynthSpec | None = None

    def __post_init__(self):
        if len(self.d_u) != len(self.d_tr):
            raise ConfigError("d_u must mirror d_tr")


def class_templates(spec: SynthSpec, seed: int) -> np.ndarray:
    """(K, N, patch_pixels) additive patterns in [-1, 1]; zero outside S."""
    rng = np.random.default_rng([seed, _TAG_TEMPLATE])
    pp = spec.channels * spec.patch_size ** 2
    out = np.zeros((spec.num_classes, spec.num_patches, pp))
    for k in range(spec.num_classes):
        for p in sorted(spec.informative):
            out[k, p] = rng.uniform(-1.0, 1.0, size=pp)
    return out


def _patch_pixel_index(spec: SynthSpec, patch: int) -> tuple:
    g = spec.side // spec.patch_size
    py, px = divmod(patch, g)
    ys = slice(py * spec.patch_size, (py + 1) * spec.patch_size)
    xs = slice(px * spec.patch_size, (px + 1) * spec.patch_size)
    return (slice(None), ys, xs)


def synth_generate(spec: SynthSpec, seed: int) -> DatasetBundle:
    """Seeded synthetic bundle, already split 80/20."""
    templates = class_templates(spec, seed)
    rng = np.random.default_rng([seed, _TAG_PIXELS])
    pp = spec.channels * spec.patch_size ** 2
    images: list[LabeledImage] = []
    for k in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            img = rng.normal(0.5, spec.noise, size=(spec.channels, spec.side, spec.side))
            np.clip(img, 0.0, 1.0, out=img)
            for p in spec.informative:
                sl = _patch_pixel_index(spec, p)
                img[sl] = img[sl] + spec.amplitude * templates[k, p].reshape(
                    spec.channels, spec.patch_size, spec.patch_size)
            np.clip(img, 0.0, 1.0, out=img)
            images.append(LabeledImage(pixels=img, label=k))
    d_tr, d_val = split_80_20(images, seed)
    return DatasetBundle(
        d_tr=d_tr, d_val=d_val, d_u=[im.pixels for im in d_tr],
        num_classes=spec.num_classes, split_seed=seed,
        informative_set=tuple(sorted(spec.informative)), synth=spec)


def split_80_20(images: list, seed: int) -> tuple[list, list]:
    """Seeded Fisher-Yates shuffle of indices; first floor(80%) go to d_tr."""
    n = len(images)
    if n < 5:
        raise ConfigError(f"need >= 5 images to split, got {n}")
    rng = np.random.default_rng([seed, _TAG_SPLIT])
    idx = np.arange(n)
    rng.shuffle(idx)
    cut = (4 * n) // 5
    d_tr = [images[i] for i in idx[:cut]]
    d_val = [images[i] for i in idx[cut:]]
    return d_tr, d_val


def cifar10_read(path: str, max_images: int | None = None) -> list[LabeledImage]:
    """Standard CIFAR-10 binary batch: 3073-byte records, pixels scaled by /255."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % 3073 != 0:
        raise DataFormatError(f"{path}: length {len(blob)} not a multiple of 3073")
    count = len(blob) // 3073
    if max_images is not None:
        count = min(count, max_images)
    out: list[LabeledImage] = []
    for i in range(count):
        rec = np.frombuffer(blob, dtype=np.uint8, count=3073, offset=i * 3073)
        label = int(rec[0])
        if label > 9:
            raise DataFormatError(f"{path}: record {i} has label byte {label} > 9")
        img = rec[1:].astype(np.float64).reshape(3, 32, 32) / 255.0
        out.append(LabeledImage(pixels=img, label=label))
    return out


def parse_augment_policy(text: str) -> tuple[bool, int]:
    """'none' | 'flip' | 'flip+crop:PAD' -> (flip enabled, crop pad)."""
    t = text.strip()
    if t == "none":
        return False, 0
    if t == "flip":
        return True, 0
    if t.startswith("flip+crop:"):
        try:
            pad = int(t.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad augment policy {text!r}") from None
        if pad < 0:
            raise ConfigError(f"crop pad must be >= 0, got {pad}")
        return True, pad
    raise ConfigError(f"bad augment policy {text!r} (none | flip | flip+crop:PAD)")


def augment(image: np.ndarray, rng: np.random.Generator, policy: str) -> np.ndarray:
    """Horizontal flip with prob 0.5, then zero-pad + random crop back to size."""
    flip, pad = parse_augment_policy(policy)
    img = image
    if flip and rng.random() < 0.5:
        img = img[:, :, ::-1]
    if pad > 0:
        c, s, _ = img.shape
        padded = np.zeros((c, s + 2 * pad, s + 2 * pad))
        padded[:, pad:pad + s, pad:pad + s] = img
        oy = int(rng.integers(0, 2 * pad + 1))
        ox = int(rng.integers(0, 2 * pad + 1))
        img = padded[:, oy:oy + s, ox:ox + s]
    return np.ascontiguousarray(img)


def batches(items: list, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Per-epoch seeded shuffle; the final partial batch is kept."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(items)
    rng = np.random.default_rng([seed, _TAG_BATCH, epoch])
    idx = np.arange(n)
    rng.shuffle(idx)
    return [[items[i] for i in idx[k:k + batch_size]] for k in range(0, n, batch_size)]


def bundle_save(path: str, bundle: DatasetBundle) -> None:
    """Serialize a bundle with the shared tensor-container framing."""
    tensors = {
        "images.tr": np.stack([im.pixels for im in bundle.d_tr]),
        "labels.tr": np.array([im.label for im in bundle.d_tr], dtype=np.float64),
        "images.val": np.stack([im.pixels for im in bundle.d_val]),
        "labels.val": np.array([im.label for im in bundle.d_val], dtype=np.float64),
        "num_classes": np.array(float(bundle.num_classes)),
        "split_seed": np.array(float(bundle.split_seed)),
    }
    if bundle.informative_set is not None:
        tensors["informative"] = np.array(bundle.informative_set, dtype=np.float64)
    write_container(path, tensors)


def bundle_load(path: str) -> DatasetBundle:
    _, t = read_container(path)
    d_tr = [LabeledImage(pixels=img, label=int(lab))
            for img, lab in zip(t["images.tr"], t["labels.tr"])]
    d_val = [LabeledImage(pixels=img, label=int(lab))
             for img, lab in zip(t["images.val"], t["labels.val"])]
    informative = tuple(int(x) for x in t["informative"]) if "informative" in t else None
    return DatasetBundle(
        d_tr=d_tr, d_val=d_val, d_u=[im.pixels for im in d_tr],
        num_classes=int(t["num_classes"].reshape(-1)[0]),
        split_seed=int(t["split_seed"].reshape(-1)[0]),
        informative_set=informative)
