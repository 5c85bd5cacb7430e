"""Per-pixel anomaly maps, multi-pass inpainting, and threshold selection."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .data import blur_roundtrip, to_unit
from .metrics import DegenerateEntryWarning, f1_from_counts
from .models import CapabilityError

DEFAULT_THRESHOLDS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class AnomalyMap:
    """Scores in [0, 1] plus the raw error range they were normalised from."""

    scores: np.ndarray
    raw_min: float = 0.0
    raw_max: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape

    def save(self, path: str | Path, threshold: float | None = None) -> Path:
        """8-bit grayscale PNG plus a JSON sidecar with extrema and threshold."""
        path = Path(path).with_suffix(".png")
        Image.fromarray(np.rint(self.scores * 255).astype(np.uint8)).save(path)
        meta = {"raw_min": self.raw_min, "raw_max": self.raw_max, "threshold": threshold}
        path.with_suffix(".json").write_text(json.dumps(meta))
        return path


def normalize_error(err: np.ndarray, smoothing: float = 0.0) -> AnomalyMap:
    """Per-image min-max scaling; constant error maps become all zeros."""
    err = np.asarray(err, dtype=np.float64)
    if smoothing > 0:
        err = ndimage.gaussian_filter(err, smoothing)
    lo, hi = float(err.min()), float(err.max())
    if hi - lo <= 0:
        return AnomalyMap(np.zeros_like(err), lo, hi)
    return AnomalyMap((err - lo) / (hi - lo), lo, hi)


def error_map(image: np.ndarray, reconstruction: np.ndarray) -> np.ndarray:
    """Channel-mean squared error between two (H, W, 3) images in [0, 1]."""
    a = _unit_hwc(image)
    b = _unit_hwc(reconstruction)
    if a.shape != b.shape:
        raise ValueError(f"image {a.shape} and reconstruction {b.shape} differ in shape")
    return ((a - b) ** 2).mean(axis=-1)


def _unit_hwc(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
        if img.ndim == 3 and img.shape[0] in (3, 4) and img.shape[-1] not in (3, 4):
            img = img[:3].transpose(1, 2, 0)
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def _hwc(batch: torch.Tensor) -> np.ndarray:
    return batch.detach().cpu().numpy().transpose(0, 2, 3, 1).astype(np.float64)


def model_inputs(model, images: np.ndarray) -> torch.Tensor:
    """What a reconstruction model is fed when scoring ``images`` (8-bit NHWC)."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if model.kind == "SRGEN":
        low = model.config.low_size
        images = np.stack([blur_roundtrip(img, low) for img in images])
    return to_unit(images)


def reconstruct_images(model, images: np.ndarray) -> np.ndarray:
    """Float (N, H, W, 3) reconstructions for CAE/VAE/SRGEN models or snapshots."""
    if model.kind == "INPAINTGEN":
        raise CapabilityError("use inpaint_anomaly_map for INPAINTGEN models")
    return _hwc(model.reconstruct(model_inputs(model, images)))


def reconstruction_anomaly_map(model, image: np.ndarray, smoothing: float = 0.0) -> AnomalyMap:
    return reconstruction_anomaly_maps(model, np.asarray(image)[None], smoothing)[0]


def reconstruction_anomaly_maps(model, images: np.ndarray, smoothing: float = 0.0) -> list[AnomalyMap]:
    recs = reconstruct_images(model, images)
    return [normalize_error(error_map(img, rec), smoothing) for img, rec in zip(images, recs)]


# --------------------------------------------------------------------------
# masks for inpainting


@dataclass(frozen=True)
class MaskSet:
    """Occlusion masks; the masks of each pass partition the image grid."""

    masks: np.ndarray  # (K, H, W) uint8
    pass_index: np.ndarray  # (K,)

    @property
    def coverage_count(self) -> np.ndarray:
        return self.masks.sum(axis=0, dtype=np.int64)

    @property
    def num_passes(self) -> int:
        return int(self.pass_index.max()) + 1 if len(self.pass_index) else 0

    def __len__(self) -> int:
        return len(self.masks)


def _tiling_partition(height, width, patch, groups, rng) -> np.ndarray:
    oy, ox = rng.integers(0, patch, size=2)
    rows = (np.arange(height) + oy) // patch
    cols = (np.arange(width) + ox) // patch
    n_cols = int(cols[-1]) + 1
    tile = rows[:, None] * n_cols + cols[None, :]
    n_tiles = int(tile.max()) + 1
    group_of_tile = rng.permutation(n_tiles) % groups
    return group_of_tile[tile]


def build_mask_set(
    height: int,
    width: int,
    patch_size: int = 32,
    num_passes: int = 3,
    seed: int = 0,
    masks_per_pass: int = 4,
) -> MaskSet:
    """Random disjoint patch partitions, one per pass, each at a random offset.

    Every pass splits the ``patch_size`` tiling into ``masks_per_pass`` groups,
    so each pixel is occluded exactly once per pass.
    """
    if num_passes < 1 or patch_size < 1 or masks_per_pass < 1:
        raise ValueError("num_passes, patch_size and masks_per_pass must be positive")
    if patch_size > min(height, width):
        raise ValueError(f"patch_size {patch_size} exceeds the {height}x{width} grid")
    min_tiles = -(-height // patch_size) * -(-width // patch_size)
    if masks_per_pass > min_tiles:
        raise ValueError(f"cannot split {min_tiles} tiles into {masks_per_pass} non-empty masks")
    rng = np.random.default_rng(seed)
    masks, passes = [], []
    for p in range(num_passes):
        part = _tiling_partition(height, width, patch_size, masks_per_pass, rng)
        for g in range(masks_per_pass):
            m = (part == g).astype(np.uint8)
            if m.any():
                masks.append(m)
                passes.append(p)
    return MaskSet(np.stack(masks), np.array(passes))


def random_occlusions(n: int, size: int, patch_size: int, rng: np.random.Generator, masks_per_pass: int = 4) -> np.ndarray:
    """One random occlusion mask per training image, drawn like a mask-set member."""
    out = np.empty((n, size, size), dtype=np.uint8)
    for k in range(n):
        part = _tiling_partition(size, size, patch_size, masks_per_pass, rng)
        out[k] = part == rng.integers(masks_per_pass)
    return out


def occlude(images: torch.Tensor, masks: np.ndarray | torch.Tensor) -> torch.Tensor:
    """Zero the masked pixels and append the mask as a fourth channel."""
    m = torch.as_tensor(np.asarray(masks), dtype=images.dtype)
    if m.ndim == 2:
        m = m[None]
    m = m[:, None]
    return torch.cat([images * (1 - m), m], dim=1)


def average_masked_fills(fills: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Per-pixel mean of the fills over the passes whose mask covers the pixel.

    ``fills`` is (K, H, W, 3), ``masks`` is (K, H, W).
    """
    masks = np.asarray(masks, dtype=np.float64)
    count = masks.sum(axis=0)
    if np.any(count == 0):
        raise ValueError("mask set leaves some pixels uncovered")
    total = (np.asarray(fills, dtype=np.float64) * masks[..., None]).sum(axis=0)
    return total / count[..., None]


def inpaint_estimate(model, image: np.ndarray, mask_set: MaskSet) -> np.ndarray:
    if model.kind != "INPAINTGEN":
        raise CapabilityError(f"{model.kind} is not an inpainting model")
    if np.any(mask_set.coverage_count == 0):
        raise ValueError("mask set leaves some pixels uncovered")
    x = to_unit(np.asarray(image)[None]).expand(len(mask_set), -1, -1, -1)
    fills = _hwc(model.reconstruct(occlude(x, mask_set.masks)))
    return average_masked_fills(fills, mask_set.masks)


def inpaint_anomaly_map(model, image: np.ndarray, mask_set: MaskSet, smoothing: float = 0.0) -> AnomalyMap:
    est = inpaint_estimate(model, image, mask_set)
    return normalize_error(error_map(image, est), smoothing)


# --------------------------------------------------------------------------
# decisions


def binarize(amap: AnomalyMap | np.ndarray, threshold: float) -> np.ndarray:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    scores = amap.scores if isinstance(amap, AnomalyMap) else np.asarray(amap)
    return (scores > threshold).astype(np.uint8)


def _scores(m) -> np.ndarray:
    return m.scores if isinstance(m, AnomalyMap) else np.asarray(m)


def best_f1_threshold(
    maps: Sequence[AnomalyMap | np.ndarray],
    gts: Sequence[np.ndarray],
    thresholds: np.ndarray = DEFAULT_THRESHOLDS,
) -> tuple[float, float]:
    """Threshold maximising f1 over the pooled pixels of all maps.

    Ties go to the smallest threshold. If no pixel is anomalous the f1 is 0
    and a :class:`DegenerateEntryWarning` is raised.
    """
    if len(maps) == 0 or len(maps) != len(gts):
        raise ValueError("maps and ground truths must be non-empty and aligned")
    for m, g in zip(maps, gts):
        if _scores(m).shape != np.shape(g):
            raise ValueError("map and ground-truth shapes differ")
    scores = np.concatenate([_scores(m).ravel() for m in maps])
    labels = np.concatenate([np.asarray(g).ravel() for g in gts]).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        warnings.warn("no anomalous pixels in the pool; f1 is 0", DegenerateEntryWarning, stacklevel=2)
        return float(thresholds[0]), 0.0
    all_sorted = np.sort(scores)
    pos_sorted = np.sort(scores[labels])
    best_t, best_f1 = float(thresholds[0]), -1.0
    for t in thresholds:
        predicted = len(all_sorted) - int(np.searchsorted(all_sorted, t, side="right"))
        tp = n_pos - int(np.searchsorted(pos_sorted, t, side="right"))
        f1 = f1_from_counts(tp, predicted - tp, n_pos - tp)
        if f1 > best_f1:
            best_t, best_f1 = float(t), f1
    return best_t, best_f1


def mean_image_f1(maps, gts, threshold: float) -> float:
    """Per-image f1 at a fixed threshold, averaged (images without anomalies excluded)."""
    from .metrics import pixel_f1

    vals = [pixel_f1(binarize(m, threshold), g) for m, g in zip(maps, gts) if np.any(g)]
    return float(np.mean(vals)) if vals else 0.0
