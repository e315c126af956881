"""
CLSA attention-map export.

For one sample and every tapped stage: the input image, the attention map
(min-max normalised, nearest-upsampled to the input size, grey replicated to
RGB) and a 50/50 overlay of the two, all as binary PPM.
"""

import logging
from pathlib import Path
from typing import Dict, List, Union

import numpy as np

from clan import ops
from clan.data import Sample, write_image_ppm
from clan.errors import UsageError
from clan.model import ClanModel, clan_forward
from clan.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


def normalize_map(attention: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    low, high = float(attention.min()), float(attention.max())
    if high - low <= 0.0:
        return np.zeros_like(attention, dtype=np.float64)
    return (attention.astype(np.float64) - low) / (high - low)


def upsample_map(attention: np.ndarray, size: int) -> np.ndarray:
    """h×w → size×size with nearest neighbour."""
    h, w = attention.shape
    with no_grad():
        grown = ops.resample(Tensor(attention.reshape(1, 1, h, w)), size, size, 'nearest')
    return grown.data.reshape(size, size).astype(np.float64)


def map_to_rgb(attention: np.ndarray) -> np.ndarray:
    return np.repeat(attention[None, :, :], 3, axis=0)


def overlay(image: np.ndarray, attention: np.ndarray) -> np.ndarray:
    """0.5 · image + 0.5 · map, the map replicated over RGB."""
    return 0.5 * image + 0.5 * map_to_rgb(attention)


def attention_images(model: ClanModel, sample: Sample) -> Dict[int, np.ndarray]:
    """Normalised, upsampled attention map per tapped stage for one sample."""
    if not model.config.clsa:
        raise UsageError("model has no CLSA branch, there is no attention map to export")
    size = sample.image.shape[-1]
    with no_grad():
        outputs = clan_forward(model, Tensor(sample.image[None]))
    images = {}
    for stage, attention in sorted(outputs.attention_maps.items()):
        raw = attention.data[0, 0]
        if raw.max() == raw.min():
            logger.warning(f"Stage {stage} attention map is constant ({raw.flat[0]:.4g})")
        images[stage] = upsample_map(normalize_map(raw), size)
    return images


def export_attention(
    model: ClanModel, sample: Sample, index: int, out_dir: Union[str, Path]
) -> List[Path]:
    out_dir = Path(out_dir)
    prefix = f"sample{index:04d}"
    image = sample.image.astype(np.float64)
    written = [write_image_ppm(image, out_dir / f"{prefix}_image.ppm")]
    for stage, attention in attention_images(model, sample).items():
        written.append(
            write_image_ppm(map_to_rgb(attention), out_dir / f"{prefix}_s{stage}_attention.ppm")
        )
        written.append(
            write_image_ppm(overlay(image, attention), out_dir / f"{prefix}_s{stage}_overlay.ppm")
        )
    logger.info(f"Wrote {len(written)} PPM files for sample {index} to {out_dir}")
    return written
