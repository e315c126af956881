"""
Synthetic micro fine-grained dataset and minimal image I/O.

Every image is a class-independent coarse shape on a random background, a
small class-specific patch pasted at a random position, and white noise.
Only the patch carries the label, so a classifier has to find a local detail.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np

from clan.checkpoint import load_tensors, save_tensors
from clan.errors import ConfigurationError, DataError, UsageError
from clan.tensor import Tensor

logger = logging.getLogger(__name__)

SPLITS = {'train': 1, 'test': 2}
_PATTERN_STREAM = 0
SHAPE_KINDS = ('disc', 'square', 'ring', 'cross', 'triangle', 'bar')


@dataclass
class SyntheticSpec:
    num_classes: int = 8
    image_size: int = 32
    base_shapes: int = 3
    patch_size: int = 4
    noise_std: float = 0.05
    samples_per_class: int = 200
    test_samples_per_class: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.image_size < 4:
            raise ConfigurationError(f"image_size must be >= 4, got {self.image_size}")
        if self.base_shapes < 1:
            raise ConfigurationError(f"base_shapes must be >= 1, got {self.base_shapes}")
        if self.patch_size < 0 or self.patch_size > self.image_size:
            raise ConfigurationError(
                f"patch_size {self.patch_size} does not fit a {self.image_size}px image"
            )
        if self.patch_size * 4 >= self.image_size and self.patch_size > 0:
            raise ConfigurationError(
                f"patch_size {self.patch_size} must be below image_size / 4 "
                f"({self.image_size / 4}) to stay a local cue"
            )
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.samples_per_class < 1 or self.test_samples_per_class < 1:
            raise ConfigurationError("samples per class must be >= 1")

    def split_size(self, split: str) -> int:
        per_class = self.samples_per_class if split == 'train' else self.test_samples_per_class
        return per_class * self.num_classes


@dataclass
class Sample:
    image: np.ndarray  # 3×S×S in [0, 1]
    label: int
    patch_location: Tuple[int, int]


def class_patterns(spec: SyntheticSpec) -> np.ndarray:
    """K×3×p×p binary patterns, one per class, fixed by the dataset seed."""
    rng = np.random.default_rng([spec.seed, _PATTERN_STREAM])
    p = spec.patch_size
    return rng.integers(0, 2, size=(spec.num_classes, 3, p, p)).astype(np.float64)


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.3, 0.7, size=2) * size
    radius = rng.uniform(0.18, 0.32) * size
    dy, dx = rows - cy, cols - cx
    if kind == 'disc':
        return dy ** 2 + dx ** 2 <= radius ** 2
    if kind == 'square':
        return (np.abs(dy) <= radius) & (np.abs(dx) <= radius)
    if kind == 'ring':
        dist = np.sqrt(dy ** 2 + dx ** 2)
        return (dist <= radius) & (dist >= 0.6 * radius)
    if kind == 'cross':
        arm = 0.35 * radius
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= radius)) | (
            (np.abs(dx) <= arm) & (np.abs(dy) <= radius)
        )
    if kind == 'triangle':
        return (dy <= radius) & (dy >= -radius) & (np.abs(dx) <= (dy + radius) / 2)
    return (np.abs(dy) <= 0.3 * radius) & (np.abs(dx) <= 1.5 * radius)


def _render_sample(
    spec: SyntheticSpec, split: str, index: int, patterns: np.ndarray
) -> Sample:
    rng = np.random.default_rng([spec.seed, SPLITS[split], index])
    size, p = spec.image_size, spec.patch_size
    label = index % spec.num_classes

    image = np.empty((3, size, size))
    image[:] = rng.uniform(0.2, 0.5, size=3)[:, None, None]
    kind = SHAPE_KINDS[int(rng.integers(spec.base_shapes)) % len(SHAPE_KINDS)]
    mask = _shape_mask(kind, size, rng)
    color = rng.uniform(0.3, 1.0, size=3)
    image[:, mask] = color[:, None]

    row, col = 0, 0
    if p > 0:
        row, col = (int(v) for v in rng.integers(0, size - p + 1, size=2))
        image[:, row:row + p, col:col + p] = patterns[label]

    if spec.noise_std > 0:
        image = image + rng.normal(0.0, spec.noise_std, size=image.shape)
    return Sample(image=np.clip(image, 0.0, 1.0), label=label, patch_location=(row, col))


def synth_generate(spec: SyntheticSpec, split: str) -> List[Sample]:
    """
    Deterministic dataset for (spec, split). Each sample draws from its own
    stream keyed by (seed, split, index), and labels cycle through the classes
    so every class gets exactly its share.
    """
    if split not in SPLITS:
        raise UsageError(f"split must be one of {sorted(SPLITS)}, got '{split}'")
    spec.validate()
    patterns = class_patterns(spec)
    samples = [
        _render_sample(spec, split, index, patterns) for index in range(spec.split_size(split))
    ]
    logger.info(f"Generated {len(samples)} {split} samples ({spec.num_classes} classes)")
    return samples


def iterate_batches(
    data: List[Sample], batch: int, seed: int, epoch: int
) -> Iterator[Tuple[Tensor, np.ndarray]]:
    """Shuffle keyed by (seed, epoch); the last partial batch is kept."""
    if batch < 1:
        raise UsageError(f"batch size must be >= 1, got {batch}")
    if not data:
        raise UsageError("cannot iterate over an empty dataset")
    order = np.random.default_rng([seed, epoch]).permutation(len(data))

    def _batches() -> Iterator[Tuple[Tensor, np.ndarray]]:
        for start in range(0, len(order), batch):
            chosen = [data[i] for i in order[start:start + batch]]
            images = Tensor(np.stack([s.image for s in chosen]))
            labels = np.array([s.label for s in chosen], dtype=np.int64)
            yield images, labels

    return _batches()


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------


def write_image_ppm(img: Union[Tensor, np.ndarray], path: Union[str, Path]) -> Path:
    """
    Binary P6, maxval 255, rows top to bottom, RGB interleaved,
    byte = round_half_up(255 * v). Out-of-range values are an error.
    """
    array = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
    if array.ndim != 3 or array.shape[0] != 3:
        raise DataError(f"PPM export needs a 3×H×W image, got shape {array.shape}")
    finite = array[~np.isnan(array)]
    if finite.size < array.size or array.min() < 0.0 or array.max() > 1.0:
        observed = f"[{finite.min()}, {finite.max()}]" if finite.size else "all NaN"
        raise DataError(
            f"PPM export needs values in [0, 1] without NaN, got {observed}"
        )
    _, h, w = array.shape
    quantised = np.floor(array.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(f"P6\n{w} {h}\n255\n".encode('ascii'))
        f.write(np.ascontiguousarray(quantised.transpose(1, 2, 0)).tobytes())
    return path


def _header_tokens(raw: bytes, count: int) -> Tuple[List[bytes], int]:
    tokens: List[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b'#':
            while pos < len(raw) and raw[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("Truncated PPM header")
        tokens.append(raw[start:pos])
    # exactly one whitespace byte separates maxval from the pixel data
    return tokens, pos + 1


def read_image_ppm(path: Union[str, Path]) -> np.ndarray:
    """Decode a binary P6 file (maxval 255) into a 3×H×W float array in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, offset = _header_tokens(raw, 4)
    if tokens[0] != b'P6':
        raise DataError(f"{path} is not a binary PPM (magic {tokens[0]!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {maxval}")
    pixels = np.frombuffer(raw[offset:offset + 3 * w * h], dtype=np.uint8)
    if pixels.size != 3 * w * h:
        raise DataError(f"{path}: expected {3 * w * h} pixel bytes, got {pixels.size}")
    return pixels.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# Dataset cache
# ---------------------------------------------------------------------------


def dataset_cache_path(cache_dir: Union[str, Path], spec: SyntheticSpec, split: str) -> Path:
    digest = hashlib.sha256(
        json.dumps({'spec': asdict(spec), 'split': split}, sort_keys=True).encode('utf-8')
    ).hexdigest()[:16]
    return Path(cache_dir) / f"synthetic_{split}_{digest}.clan"


def save_dataset(samples: List[Sample], path: Union[str, Path]) -> Path:
    return save_tensors(path, {
        'images': np.stack([s.image for s in samples]),
        'labels': np.array([s.label for s in samples], dtype=np.float64),
        'patch_locations': np.array([s.patch_location for s in samples], dtype=np.float64),
    })


def load_dataset(path: Union[str, Path]) -> List[Sample]:
    tensors = load_tensors(path)
    try:
        images, labels, locations = (
            tensors['images'], tensors['labels'], tensors['patch_locations']
        )
    except KeyError as e:
        raise DataError(f"{path} is not a dataset cache (missing {e})") from None
    return [
        Sample(image=img, label=int(label), patch_location=(int(loc[0]), int(loc[1])))
        for img, label, loc in zip(images, labels, locations)
    ]


def load_or_generate(
    spec: SyntheticSpec, split: str, cache_dir: Optional[Union[str, Path]] = None
) -> List[Sample]:
    """synth_generate, going through the on-disk cache when cache_dir is set."""
    if not cache_dir:
        return synth_generate(spec, split)
    path = dataset_cache_path(cache_dir, spec, split)
    if path.exists():
        logger.info(f"Loading cached {split} split from {path}")
        return load_dataset(path)
    samples = synth_generate(spec, split)
    save_dataset(samples, path)
    logger.info(f"Cached {split} split to {path}")
    return samples
