"""Datasets: directory ingestion, stratified splits and a synthetic generator.

The synthetic "fake" class is the same image family passed through a factor
two nearest-neighbour downsample/upsample, which leaves the periodic spectral
replicas typical of generator decoders.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from sfnet import spectral

logger = logging.getLogger(__name__)

REAL, FAKE = 0, 1
CLASS_DIRS = {"real": REAL, "fake": FAKE}
IMAGE_SUFFIXES = {".png", ".ppm"}
# edge ramp width in pixels; keeps shape content roughly band-limited
EDGE_SOFTNESS = 1.5


class DatasetError(ValueError):
    pass


class Sample:
    """One image with its label. Pixel data may be decoded lazily."""

    __slots__ = ("label", "source_id", "_image", "_loader")

    def __init__(self, label: int, source_id: str, image: Optional[np.ndarray] = None,
                 loader: Optional[Callable[[], np.ndarray]] = None):
        if label not in (REAL, FAKE):
            raise DatasetError(f"label must be 0 or 1, got {label}")
        if image is None and loader is None:
            raise DatasetError("a sample needs an image or a loader")
        self.label = label
        self.source_id = source_id
        self._image = None if image is None else _as_image(image)
        self._loader = loader

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            self._image = _as_image(self._loader())
        return self._image

    def __repr__(self) -> str:
        return f"Sample({self.source_id!r}, label={self.label})"


def _as_image(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if a.ndim != 3 or a.shape[0] != 3:
        raise DatasetError(f"images must be 3×H×W, got {a.shape}")
    return np.clip(a, 0.0, 1.0)


@dataclass
class DatasetManifest:
    samples: list
    root: Optional[str] = None
    skipped: int = 0
    # source_id -> "train" | "val", filled by split()
    assignment: dict = field(default_factory=dict)
    split_seed: Optional[int] = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> list:
        return [s.label for s in self.samples]

    def by_class(self, label: int) -> list:
        return [s for s in self.samples if s.label == label]

    def save(self, path) -> None:
        """Write the sample list and split assignment as JSON."""
        doc = {
            "root": self.root,
            "split_seed": self.split_seed,
            "samples": [{"source_id": s.source_id, "label": s.label,
                         "split": self.assignment.get(s.source_id)} for s in self.samples],
        }
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def resize_nearest(img: np.ndarray, extent: int) -> np.ndarray:
    """Nearest-neighbour resize of a C×H×W array to C×extent×extent."""
    _, h, w = img.shape
    rows = (np.arange(extent) * h) // extent
    cols = (np.arange(extent) * w) // extent
    return img[:, rows][:, :, cols]


def decode_image(path, extent: int) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return resize_nearest(arr.transpose(2, 0, 1), extent)


def load_directory(root, extent: int = 64) -> DatasetManifest:
    """Build a manifest from ``root/real`` and ``root/fake`` image files.

    Files are header-checked up front (undecodable ones are skipped and
    counted); pixels are decoded on first access.
    """
    root = Path(root)
    samples = []
    skipped = 0
    for sub, label in CLASS_DIRS.items():
        d = root / sub
        if not d.is_dir():
            raise DatasetError(f"missing class directory {d}")
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        count = 0
        for p in files:
            try:
                with Image.open(p) as im:
                    im.verify()
            except (UnidentifiedImageError, OSError, SyntaxError):
                skipped += 1
                continue
            samples.append(Sample(label, f"{sub}/{p.name}",
                                  loader=lambda p=p: decode_image(p, extent)))
            count += 1
        if count == 0:
            raise DatasetError(f"class directory {d} has no readable images")
    if skipped:
        logger.warning("skipped %d undecodable files under %s", skipped, root)
    return DatasetManifest(samples, root=str(root), skipped=skipped)


def _smooth_field(rng: np.random.Generator, extent: int, cutoff: float) -> np.ndarray:
    noise = rng.standard_normal((3, extent, extent))
    k = np.fft.fftfreq(extent)
    gain = np.exp(-(k[:, None] ** 2 + k[None, :] ** 2) / (2 * cutoff ** 2))
    z = spectral.transform(noise.astype(np.complex128), (1, 2))
    field_ = spectral.transform(z * gain, (1, 2), inverse=True).real / extent ** 2
    field_ -= field_.mean(axis=(1, 2), keepdims=True)
    field_ /= field_.std(axis=(1, 2), keepdims=True) + 1e-12
    return field_


def natural_image(rng: np.random.Generator, extent: int, noise: float = 0.05) -> np.ndarray:
    """Smooth colour field with a few soft-edged rectangles and discs, plus sensor noise."""
    base = rng.uniform(0.3, 0.7, size=(3, 1, 1))
    img = base + 0.12 * _smooth_field(rng, extent, rng.uniform(0.03, 0.08))
    yy, xx = np.mgrid[:extent, :extent].astype(np.float64)
    for _ in range(rng.integers(2, 6)):
        colour = rng.uniform(0.0, 1.0, size=(3, 1, 1))
        if rng.random() < 0.5:
            hh, hw = rng.uniform(extent / 16, extent / 4, size=2)
            cy, cx = rng.uniform(0, extent, size=2)
            # signed distance to the box edge, negative inside
            dist = np.maximum(np.abs(yy - cy) - hh, np.abs(xx - cx) - hw)
        else:
            r = rng.uniform(extent / 16, extent / 5)
            cy, cx = rng.uniform(0, extent, size=2)
            dist = np.hypot(yy - cy, xx - cx) - r
        alpha = 0.6 / (1.0 + np.exp(dist / EDGE_SOFTNESS))
        img = alpha * colour + (1 - alpha) * img
    img = img + noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def forge(img: np.ndarray) -> np.ndarray:
    """Factor-2 nearest downsample followed by nearest upsample."""
    return np.repeat(np.repeat(img[:, ::2, ::2], 2, axis=1), 2, axis=2)


def synth_dataset(n_per_class: int, extent: int = 64, seed: int = 0) -> DatasetManifest:
    if not spectral.is_power_of_two(extent):
        raise DatasetError(f"extent must be a power of two, got {extent}")
    if n_per_class < 1:
        raise DatasetError("n_per_class must be positive")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_per_class):
        samples.append(Sample(REAL, f"synth/real/{i:05d}", natural_image(rng, extent)))
        samples.append(Sample(FAKE, f"synth/fake/{i:05d}", forge(natural_image(rng, extent))))
    return DatasetManifest(samples, root=None)


def split(manifest: DatasetManifest, ratio: float = 0.5, seed: int = 0) -> tuple:
    """Stratified shuffle split into ``(train, val)`` sample lists.

    Each class contributes ``round(ratio * n)`` training samples, clamped so
    that both sides keep at least one sample. Manifest order is preserved
    within each side.
    """
    if not 0 < ratio < 1:
        raise DatasetError(f"ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    train_ids = set()
    for label in (REAL, FAKE):
        members = manifest.by_class(label)
        if len(members) < 2:
            raise DatasetError(f"class {label} has {len(members)} samples; need at least 2")
        n_train = min(max(int(round(ratio * len(members))), 1), len(members) - 1)
        order = rng.permutation(len(members))
        train_ids.update(members[i].source_id for i in order[:n_train])
    train = [s for s in manifest.samples if s.source_id in train_ids]
    val = [s for s in manifest.samples if s.source_id not in train_ids]
    manifest.assignment = {s.source_id: ("train" if s.source_id in train_ids else "val")
                           for s in manifest.samples}
    manifest.split_seed = seed
    return train, val


def to_arrays(samples: list) -> tuple:
    """Stack samples into an ``N×3×H×W`` float32 batch and an int label vector."""
    if not samples:
        raise DatasetError("no samples")
    x = np.stack([s.image for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


def band_energy(images: np.ndarray, scale: float = 4.0) -> np.ndarray:
    """Mean squared spectral magnitude outside the centered stop band, per image."""
    n, c, h, w = images.shape
    spec = np.fft.fftshift(spectral.transform(images.astype(np.complex128), (2, 3)), axes=(2, 3))
    keep = ~spectral.HighPassSpec(w, h, scale).mask()
    power = np.abs(spec) ** 2 / (h * w)
    return power[:, :, keep].mean(axis=(1, 2))
