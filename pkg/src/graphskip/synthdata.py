"""Deterministic synthetic segmentation corpus: shapes on noisy backgrounds."""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, ManifestError, ValidationError
from .rng import keyed_rng
from .serialization import read_manifest, write_manifest
from .tensor import Tensor

FAMILIES = ("ellipse", "rectangle", "blob-union")
SUPERSAMPLE = 4
MAX_DRAWS = 64


@dataclass
class SynthSpec:
    count: int
    size: int = 64
    family: str = "blob-union"
    noise: float = 0.04
    contrast: float = 0.8
    shift: float = 0.0
    min_area: float = 0.05
    max_area: float = 0.45
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("corpus needs at least one sample")
        if self.size % 32:
            raise ConfigError(f"size must be divisible by 32, got {self.size}")
        if self.family not in FAMILIES:
            raise ConfigError(f"family must be one of {FAMILIES}")
        if not 0.0 <= self.min_area < self.max_area <= 1.0:
            raise ConfigError("need 0 <= min_area < max_area <= 1")
        if self.noise < 0.0 or self.contrast <= 0.0:
            raise ConfigError("noise must be >= 0 and contrast > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def _fine_grid(size: int):
    step = np.arange(size * SUPERSAMPLE) + 0.5
    coords = step / SUPERSAMPLE
    return np.meshgrid(coords, coords, indexing="ij")


def _inside_ellipse(yy, xx, cy, cx, a, b, theta):
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _inside_rectangle(yy, xx, cy, cx, a, b, theta):
    dy, dx = yy - cy, xx - cx
    u = np.cos(theta) * dx + np.sin(theta) * dy
    v = -np.sin(theta) * dx + np.cos(theta) * dy
    return (np.abs(u) <= a) & (np.abs(v) <= b)


def _draw_shape(rng, spec: SynthSpec, yy, xx) -> np.ndarray:
    s = spec.size
    grow = 1.0 + 0.25 * spec.shift
    if spec.family == "ellipse":
        cy, cx = rng.uniform(0.35 * s, 0.65 * s, size=2)
        a, b = rng.uniform(0.12 * s, 0.30 * s, size=2) * grow
        return _inside_ellipse(yy, xx, cy, cx, a, b, rng.uniform(0.0, np.pi))
    if spec.family == "rectangle":
        cy, cx = rng.uniform(0.35 * s, 0.65 * s, size=2)
        a, b = rng.uniform(0.10 * s, 0.28 * s, size=2) * grow
        return _inside_rectangle(yy, xx, cy, cx, a, b, rng.uniform(0.0, np.pi))
    union = np.zeros(yy.shape, dtype=bool)
    for _ in range(int(rng.integers(2, 5))):
        cy, cx = rng.uniform(0.30 * s, 0.70 * s, size=2)
        a, b = rng.uniform(0.08 * s, 0.20 * s, size=2) * grow
        union |= _inside_ellipse(yy, xx, cy, cx, a, b, rng.uniform(0.0, np.pi))
    return union


def sample(spec: SynthSpec, index: int) -> Tuple[np.ndarray, np.ndarray]:
    """One (image (3,S,S) in [0,1], mask (1,S,S) in {0,1}) pair, keyed by index."""
    rng = keyed_rng(spec.seed, index)
    s = spec.size
    background = rng.uniform(0.15, 0.30)
    amplitude = spec.contrast * (1.0 - 0.3 * spec.shift) * rng.uniform(0.45, 0.60)
    gains = rng.uniform(0.9, 1.1, size=3)
    yy, xx = _fine_grid(s)
    for _ in range(MAX_DRAWS):
        fine = _draw_shape(rng, spec, yy, xx).astype(np.float64)
        soft = fine.reshape(s, SUPERSAMPLE, s, SUPERSAMPLE).mean(axis=(1, 3))
        mask = (soft >= 0.5).astype(np.float64)
        area = mask.mean()
        if spec.min_area <= area <= spec.max_area:
            break
    else:
        raise ValidationError(f"sample {index}: no shape satisfied the area "
                              f"bounds after {MAX_DRAWS} draws")
    gray = background + amplitude * soft
    image = gray[None, :, :] * gains[:, None, None]
    sigma = spec.noise + 0.03 * spec.shift
    if sigma > 0.0:
        image = image + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(image, 0.0, 1.0), mask[None, :, :]


def generate(spec: SynthSpec) -> List[Tuple[Tensor, Tensor]]:
    """The full corpus as (image, mask) tensor pairs."""
    pairs = []
    for i in range(spec.count):
        image, mask = sample(spec, i)
        pairs.append((Tensor(image), Tensor(mask)))
    return pairs


@dataclass
class AugmentPolicy:
    hflip: float = 0.5
    vflip: float = 0.5
    rotate: float = 5.0
    scales: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if not 0.0 <= self.hflip <= 1.0 or not 0.0 <= self.vflip <= 1.0:
            raise ConfigError("flip probabilities must be in [0,1]")
        if self.rotate < 0.0:
            raise ConfigError("rotation range must be >= 0 degrees")


def _snap32(n: float) -> int:
    return max(32, int(round(n / 32.0)) * 32)


def augment(pair, policy: AugmentPolicy, rng) -> Tuple[np.ndarray, np.ndarray]:
    """Apply one random flip/rotate(/scale-jitter) draw to an (image, mask) pair."""
    image, mask = pair
    image = image.data if isinstance(image, Tensor) else np.asarray(image)
    mask = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if rng.random() < policy.hflip:
        image, mask = np.flip(image, axis=2), np.flip(mask, axis=2)
    if rng.random() < policy.vflip:
        image, mask = np.flip(image, axis=1), np.flip(mask, axis=1)
    angle = rng.uniform(-policy.rotate, policy.rotate)
    if angle != 0.0:
        image = ndimage.rotate(image, angle, axes=(-2, -1), reshape=False,
                               order=1, mode="nearest")
        mask = ndimage.rotate(mask, angle, axes=(-2, -1), reshape=False,
                              order=0, mode="nearest")
    if policy.scales:
        factor = policy.scales[int(rng.integers(len(policy.scales)))]
        side = _snap32(image.shape[-1] * factor)
        if side != image.shape[-1]:
            # jitter through the snapped scale, then return to the native grid
            zoom = side / image.shape[-1]
            back = image.shape[-1] / side
            image = ndimage.zoom(image, (1, zoom, zoom), order=1, mode="nearest")
            image = ndimage.zoom(image, (1, back, back), order=1, mode="nearest")
            mask = ndimage.zoom(mask, (1, zoom, zoom), order=0, mode="nearest")
            mask = ndimage.zoom(mask, (1, back, back), order=0, mode="nearest")
    image = np.clip(np.ascontiguousarray(image), 0.0, 1.0)
    mask = (np.ascontiguousarray(mask) >= 0.5).astype(np.float64)
    return image, mask


def _image_to_png(image: np.ndarray, path: Path) -> None:
    u8 = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(np.transpose(u8, (1, 2, 0)), mode="RGB").save(path)


def _mask_to_pgm(mask: np.ndarray, path: Path) -> None:
    u8 = (mask[0] >= 0.5).astype(np.uint8) * 255
    Image.fromarray(u8, mode="L").save(path)


def save_corpus(directory, spec: SynthSpec, pairs=None) -> Path:
    """Write image PNGs, mask PGMs, and a manifest capturing the spec."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if pairs is None:
        pairs = generate(spec)
    entries = []
    for i, (image, mask) in enumerate(pairs):
        image = image.data if isinstance(image, Tensor) else image
        mask = mask.data if isinstance(mask, Tensor) else mask
        img_name, mask_name = f"img_{i:04d}.png", f"mask_{i:04d}.pgm"
        _image_to_png(image, directory / img_name)
        _mask_to_pgm(mask, directory / mask_name)
        entries.append({"image": img_name, "mask": mask_name})
    write_manifest(directory / "manifest.json",
                   {"format": "synth-corpus", "spec": spec.to_dict(),
                    "samples": entries})
    return directory


def load_corpus(directory) -> Tuple[SynthSpec, List[Tuple[np.ndarray, np.ndarray]]]:
    """Read a saved corpus back as float arrays in [0,1] / {0,1}."""
    directory = Path(directory)
    manifest = read_manifest(directory / "manifest.json")
    if manifest.get("format") != "synth-corpus":
        raise ManifestError(f"{directory} does not hold a synthetic corpus")
    spec = SynthSpec.from_dict(manifest["spec"])
    pairs = []
    for entry in manifest["samples"]:
        with Image.open(directory / entry["image"]) as img:
            rgb = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
        with Image.open(directory / entry["mask"]) as msk:
            gray = np.asarray(msk.convert("L"), dtype=np.float64)
        pairs.append((np.transpose(rgb, (2, 0, 1)),
                      (gray >= 128.0).astype(np.float64)[None, :, :]))
    return spec, pairs
