"""Evaluation: pixel f1, continual-learning summaries over score matrices, FID."""

from __future__ import annotations

import csv
import functools
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class DegenerateEntryWarning(UserWarning):
    """A metric skipped an entry whose value made it undefined (e.g. a zero denominator)."""


# --------------------------------------------------------------------------
# f1


def confusion_counts(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int]:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    p = pred.astype(bool)
    g = gt.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return tp, fp, fn


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    if tp == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


def pixel_f1(pred: np.ndarray, gt: np.ndarray) -> float:
    """f1 = 2TP / (2TP + FP + FN), defined as 0 when there are no true positives."""
    return f1_from_counts(*confusion_counts(pred, gt))


# --------------------------------------------------------------------------
# score matrices


@dataclass
class ScoreMatrix:
    """Lower-triangular ``s[i, j]``: score on task ``j`` after training task ``i``.

    Indices are 1-based like task ids. Undefined cells hold NaN.
    """

    num_tasks: int
    metric_name: str = "f1"
    values: np.ndarray = field(default=None)  # type: ignore[assignment]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values is None:
            self.values = np.full((self.num_tasks, self.num_tasks), np.nan)
        else:
            self.values = np.array(self.values, dtype=float)

    def __setitem__(self, key: tuple[int, int], value: float) -> None:
        i, j = key
        if not 1 <= j <= i <= self.num_tasks:
            raise IndexError(f"({i}, {j}) is outside the lower triangle of a {self.num_tasks}-task matrix")
        self.values[i - 1, j - 1] = float(value)

    def __getitem__(self, key: tuple[int, int]) -> float:
        i, j = key
        if not 1 <= j <= i <= self.num_tasks:
            raise IndexError(f"({i}, {j}) is outside the lower triangle")
        return float(self.values[i - 1, j - 1])

    def defined(self, i: int, j: int) -> bool:
        return 1 <= j <= i <= self.num_tasks and not np.isnan(self.values[i - 1, j - 1])

    def row(self, i: int) -> np.ndarray:
        return self.values[i - 1, :i].copy()

    def row_complete(self, i: int) -> bool:
        return bool(np.all(~np.isnan(self.values[i - 1, :i])))

    def entries(self) -> int:
        return int(np.count_nonzero(~np.isnan(self.values)))

    def diagonal(self) -> np.ndarray:
        return np.diag(self.values).copy()

    def is_diagonal_only(self) -> bool:
        off = self.values[~np.eye(self.num_tasks, dtype=bool)]
        return bool(np.all(np.isnan(off)))

    def copy(self) -> "ScoreMatrix":
        return ScoreMatrix(self.num_tasks, self.metric_name, self.values.copy(), dict(self.meta))

    # -- serialisation ---------------------------------------------------

    def to_csv(self) -> str:
        """Row = training stage, column = evaluated task; empty cell = undefined."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["stage"] + [f"task_{j}" for j in range(1, self.num_tasks + 1)])
        for i in range(1, self.num_tasks + 1):
            cells = ["" if np.isnan(v) else repr(float(v)) for v in self.values[i - 1]]
            writer.writerow([i] + cells)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, metric_name: str = "f1") -> "ScoreMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        n = len(rows) - 1
        m = cls(n, metric_name)
        for r in rows[1:]:
            i = int(r[0])
            for j, cell in enumerate(r[1:], start=1):
                if cell != "":
                    m.values[i - 1, j - 1] = float(cell)
        return m

    def to_dict(self) -> dict:
        return {
            "metric_name": self.metric_name,
            "num_tasks": self.num_tasks,
            "values": [[None if np.isnan(v) else float(v) for v in row] for row in self.values],
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreMatrix":
        vals = np.array([[np.nan if v is None else v for v in row] for row in d["values"]], dtype=float)
        return cls(d["num_tasks"], d["metric_name"], vals, d.get("meta", {}))


def average_score(matrix: ScoreMatrix, T: int | None = None) -> float:
    """Mean of row ``T``: the average score over every task seen so far."""
    T = T or matrix.num_tasks
    if not matrix.row_complete(T):
        raise ValueError(f"row {T} of the score matrix is incomplete")
    return float(np.mean(matrix.row(T)))


def average_forgetting(matrix: ScoreMatrix, T: int | None = None) -> float:
    """Relative forgetting after ``T`` tasks, as a signed ratio.

    For each earlier task ``j`` the worst relative drop
    ``(s[l, j] - s[T, j]) / s[l, j]`` over the stages ``j <= l <= T-1`` is
    taken, then averaged over ``j``. Negative values mean the final model is
    better than every earlier one. Cells with ``s[l, j] == 0`` are skipped and
    reported with :class:`DegenerateEntryWarning`.
    """
    T = T or matrix.num_tasks
    if T < 2:
        raise ValueError("forgetting needs at least two tasks")
    for i in range(1, T + 1):
        if not matrix.row_complete(i):
            raise ValueError(f"row {i} of the score matrix is incomplete")
    per_task = []
    skipped = []
    for j in range(1, T):
        final = matrix[T, j]
        drops = []
        for l in range(j, T):
            ref = matrix[l, j]
            if ref == 0:
                skipped.append((l, j))
                continue
            drops.append((ref - final) / ref)
        if drops:
            per_task.append(max(drops))
    if skipped:
        warnings.warn(f"forgetting skipped zero-score cells {skipped}", DegenerateEntryWarning, stacklevel=2)
    if not per_task:
        return float("nan")
    return float(np.mean(per_task))


def fid_forgetting(matrix: ScoreMatrix, T: int | None = None) -> float:
    """FID analogue of :func:`average_forgetting`, where lower FID is better.

    Baseline for task ``j`` is the best (smallest) FID over stages
    ``j..T-1``; the value is the mean relative increase of the final FID over
    that baseline. Positive means reconstructions got worse.
    """
    T = T or matrix.num_tasks
    if T < 2:
        raise ValueError("forgetting needs at least two tasks")
    for i in range(1, T + 1):
        if not matrix.row_complete(i):
            raise ValueError(f"row {i} of the score matrix is incomplete")
    per_task = []
    skipped = []
    for j in range(1, T):
        best = min(matrix[l, j] for l in range(j, T))
        if best == 0:
            skipped.append(j)
            continue
        per_task.append((matrix[T, j] - best) / best)
    if skipped:
        warnings.warn(f"FID forgetting skipped tasks with zero baseline {skipped}", DegenerateEntryWarning, stacklevel=2)
    if not per_task:
        return float("nan")
    return float(np.mean(per_task))


# --------------------------------------------------------------------------
# FID


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int
    extractor: str = ""

    @classmethod
    def from_features(cls, feats: np.ndarray, extractor: str = "") -> "FeatureStats":
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2:
            raise ValueError("features must be (n_samples, n_dims)")
        if feats.shape[0] < 2:
            raise ValueError("need at least two samples for a covariance")
        mu = feats.mean(axis=0)
        sigma = np.cov(feats, rowvar=False)
        sigma = np.atleast_2d(sigma)
        return cls(mu, 0.5 * (sigma + sigma.T), feats.shape[0], extractor)


def sqrtm_psd_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> tuple[np.ndarray, float]:
    """Trace-equivalent square root of ``sigma_a @ sigma_b`` for PSD inputs.

    Uses ``sqrt(A) B sqrt(A)``, which is symmetric and shares its eigenvalues
    with ``A B``, so ``Tr sqrt(A B) = Tr sqrt(sqrt(A) B sqrt(A))``. Negative
    eigenvalues from round-off are clamped; the largest clamp is returned.
    """
    wa, va = np.linalg.eigh(0.5 * (sigma_a + sigma_a.T))
    clamp = float(max(0.0, -wa.min())) if wa.size else 0.0
    root_a = (va * np.sqrt(np.clip(wa, 0, None))) @ va.T
    m = root_a @ sigma_b @ root_a
    wm, vm = np.linalg.eigh(0.5 * (m + m.T))
    clamp = max(clamp, float(max(0.0, -wm.min())) if wm.size else 0.0)
    root = (vm * np.sqrt(np.clip(wm, 0, None))) @ vm.T
    return root, clamp


def fid(real: FeatureStats, gen: FeatureStats) -> float:
    """``||mu_r - mu_g||^2 + Tr(S_r + S_g - 2 (S_r S_g)^(1/2))``, clamped at 0."""
    if real.mean.shape != gen.mean.shape:
        raise ValueError(f"feature dims differ: {real.mean.shape} vs {gen.mean.shape}")
    diff = real.mean - gen.mean
    root, clamp = sqrtm_psd_product(real.covariance, gen.covariance)
    value = float(diff @ diff + np.trace(real.covariance) + np.trace(gen.covariance) - 2 * np.trace(root))
    if clamp > 0:
        logger.debug("FID square root clamped eigenvalues up to %.3g", clamp)
    if value < 0:
        logger.debug("FID clamped from %.3g to 0", value)
        value = 0.0
    return value


# --------------------------------------------------------------------------
# feature extractors


def pooled_pixel_features(images: np.ndarray, grid: int = 4) -> np.ndarray:
    """Deterministic, weight-free features in 8-bit intensity units.

    Block-averages each image to ``grid x grid x 3`` and appends per-channel
    mean and standard deviation. Good enough to rank reconstruction quality
    without a pretrained network.
    """
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    arr = arr.astype(np.float64)
    if arr.max(initial=0) <= 1.0 and np.asarray(images).dtype != np.uint8:
        arr = arr * 255.0
    n, h, w, _ = arr.shape
    if h % grid or w % grid:
        raise ValueError(f"image size {h}x{w} is not divisible by grid {grid}")
    blocks = arr.reshape(n, grid, h // grid, grid, w // grid, 3).mean(axis=(2, 4))
    stats = np.concatenate([arr.mean(axis=(1, 2)), arr.std(axis=(1, 2))], axis=1)
    return np.concatenate([blocks.reshape(n, -1), stats], axis=1)


class TorchvisionExtractor:
    """Penultimate pooled activations of an ImageNet classifier.

    Needs pretrained weights on disk or network access; only built on demand.
    """

    def __init__(self, arch: str = "resnet18"):
        import torch
        import torchvision

        weights = torchvision.models.get_model_weights(arch).DEFAULT
        model = torchvision.models.get_model(arch, weights=weights)
        model.fc = torch.nn.Identity()
        self.model = model.eval()
        self.transform = weights.transforms()
        self.name = f"torchvision:{arch}"

    def __call__(self, images: np.ndarray) -> np.ndarray:
        import torch

        from .data import to_unit

        with torch.no_grad():
            x = self.transform(to_unit(images))
            return self.model(x).numpy()


@functools.lru_cache(maxsize=4)
def get_extractor(name: str = "pixels") -> Callable[[np.ndarray], np.ndarray]:
    if name == "pixels":
        return pooled_pixel_features
    if name.startswith("torchvision"):
        arch = name.split(":", 1)[1] if ":" in name else "resnet18"
        return TorchvisionExtractor(arch)
    raise ValueError(f"unknown feature extractor {name!r}")


def extract_features(images: np.ndarray | Sequence[np.ndarray], extractor: str = "pixels") -> FeatureStats:
    arr = np.asarray(images)
    if arr.shape[0] == 0:
        raise ValueError("no images to extract features from")
    feats = get_extractor(extractor)(arr)
    return FeatureStats.from_features(feats, extractor)
