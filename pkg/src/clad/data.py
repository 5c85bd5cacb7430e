"""Task streams: MVTec ingestion, seeded synthetic textures, and resizing.

Images live in two encodings. The 8-bit one is a ``uint8`` array of shape
``(H, W, 3)`` and is what memory buffers, disk files and byte accounting use.
The unit-interval one is a ``float32`` torch tensor ``(N, 3, H, W)`` and only
appears inside model code (see :func:`to_unit` / :func:`to_uint8`).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
BYTES_PER_PIXEL = 3

# The ten MVTec object categories, in the usual benchmark order.
MVTEC_OBJECTS = (
    "bottle",
    "cable",
    "capsule",
    "hazelnut",
    "metal_nut",
    "pill",
    "screw",
    "toothbrush",
    "transistor",
    "zipper",
)


class IngestionError(RuntimeError):
    """Raised when a dataset directory cannot be turned into a task stream."""


def raw_image_bytes(size: int) -> int:
    """Bytes needed to hold one ``size x size`` RGB image at 8 bits per channel."""
    return size * size * BYTES_PER_PIXEL


def check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img
    if np.issubdtype(img.dtype, np.floating):
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise ValueError("unit-interval image has values outside [0, 1]")
        return img
    raise ValueError(f"unsupported image dtype {img.dtype}")


def check_mask(mask: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected an (H, W) mask, got shape {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask values must be 0 or 1")
    if shape is not None and mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match image {shape}")
    return mask.astype(np.uint8, copy=False)


@dataclass(frozen=True)
class TaskData:
    """One anomaly-detection task: normal training images and labeled tests."""

    task_id: int
    name: str
    train_images: tuple[np.ndarray, ...]
    test_images: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        for img in self.train_images:
            check_image(img)
        for img, mask in self.test_images:
            check_image(img)
            check_mask(mask, img.shape[:2])
        for arr in self.train_images:
            arr.setflags(write=False)
        for img, mask in self.test_images:
            img.setflags(write=False)
            mask.setflags(write=False)

    @property
    def train_array(self) -> np.ndarray:
        return np.stack(self.train_images)

    @property
    def test_array(self) -> np.ndarray:
        return np.stack([img for img, _ in self.test_images])

    @property
    def test_masks(self) -> np.ndarray:
        return np.stack([mask for _, mask in self.test_images])


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[TaskData, ...]
    working_size: int
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [t.task_id for t in self.tasks]
        if ids != list(range(1, len(ids) + 1)):
            raise ValueError(f"task ids must be 1..T without gaps, got {ids}")

    @property
    def total_tasks(self) -> int:
        return len(self.tasks)

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, task_id: int) -> TaskData:
        """1-based lookup, matching ``task_id``."""
        return self.tasks[task_id - 1]

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for task in self.tasks:
            h.update(task.name.encode())
            for img in task.train_images:
                h.update(img.tobytes())
            for img, mask in task.test_images:
                h.update(img.tobytes())
                h.update(mask.tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# resizing


def resize_image(img: np.ndarray, target: int, mode: str = "smooth") -> np.ndarray:
    """Resize an (H, W, 3) image to ``target x target``.

    ``smooth`` is bilinear (a triangle filter that widens when shrinking, so
    downscaling averages instead of aliasing); ``nearest`` replicates or
    subsamples pixels. 8-bit input gives 8-bit output, float input float32.
    """
    if target < 1:
        raise ValueError("target size must be >= 1")
    if mode not in ("smooth", "nearest"):
        raise ValueError(f"unknown resize mode {mode!r}")
    img = check_image(img)
    if img.shape[0] == target and img.shape[1] == target:
        return img.copy()
    resample = Image.BILINEAR if mode == "smooth" else Image.NEAREST
    if img.dtype == np.uint8:
        out = Image.fromarray(img, mode="RGB").resize((target, target), resample)
        return np.asarray(out, dtype=np.uint8).copy()
    planes = [
        np.asarray(
            Image.fromarray(img[..., c].astype(np.float32), mode="F").resize(
                (target, target), resample
            )
        )
        for c in range(3)
    ]
    return np.clip(np.stack(planes, axis=-1), 0.0, 1.0).astype(np.float32)


def resize_mask(mask: np.ndarray, target: int) -> np.ndarray:
    """Nearest-neighbour resize followed by re-binarization at 0.5."""
    mask = np.asarray(mask, dtype=np.float32)
    out = Image.fromarray(mask, mode="F").resize((target, target), Image.NEAREST)
    return (np.asarray(out) > 0.5).astype(np.uint8)


def blur_roundtrip(img: np.ndarray, low_size: int) -> np.ndarray:
    """Downscale to ``low_size`` and back; the degraded input of the SR model."""
    size = img.shape[0]
    return resize_image(resize_image(img, low_size, "smooth"), size, "smooth")


def to_unit(images: np.ndarray | Sequence[np.ndarray]) -> torch.Tensor:
    """8-bit ``(N, H, W, 3)`` -> float32 ``(N, 3, H, W)`` in [0, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).float()


def to_uint8(images: torch.Tensor) -> np.ndarray:
    """float ``(N, 3, H, W)`` in [0, 1] -> 8-bit ``(N, H, W, 3)`` (rounded)."""
    arr = images.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)


# --------------------------------------------------------------------------
# MVTec ingestion


def _list_images(folder: Path) -> list[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)


def _load_rgb(path: Path, size: int | None) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if size is not None and arr.shape[:2] != (size, size):
        arr = resize_image(arr, size, "smooth")
    return arr


def _load_mask(path: Path, size: int | None) -> np.ndarray:
    with Image.open(path) as im:
        arr = (np.asarray(im.convert("L")) > 127).astype(np.uint8)
    if size is not None and arr.shape != (size, size):
        arr = resize_mask(arr, size)
    return arr


def load_mvtec_category(root: Path, name: str, task_id: int, working_size: int | None) -> TaskData:
    cat = Path(root) / name
    train_dir = cat / "train" / "good"
    test_dir = cat / "test"
    gt_dir = cat / "ground_truth"
    for d in (cat, train_dir, test_dir):
        if not d.is_dir():
            raise IngestionError(f"missing directory {d.relative_to(root)}")

    train = [_load_rgb(p, working_size) for p in _list_images(train_dir)]
    if not train:
        raise IngestionError(f"no training images in {name}/train/good")

    tests: list[tuple[np.ndarray, np.ndarray]] = []
    defect_dirs = sorted(d for d in test_dir.iterdir() if d.is_dir())
    if not defect_dirs:
        raise IngestionError(f"no test images in {name}/test")
    for defect in defect_dirs:
        images = _list_images(defect)
        if defect.name == "good":
            for p in images:
                img = _load_rgb(p, working_size)
                tests.append((img, np.zeros(img.shape[:2], dtype=np.uint8)))
            continue
        mask_dir = gt_dir / defect.name
        masks = _list_images(mask_dir) if mask_dir.is_dir() else []
        if len(masks) != len(images):
            raise IngestionError(
                f"{name}/test/{defect.name}: {len(images)} images but "
                f"{len(masks)} masks in ground_truth/{defect.name}"
            )
        for img_path, mask_path in zip(images, masks):
            img = _load_rgb(img_path, working_size)
            mask = _load_mask(mask_path, working_size)
            if mask.shape != img.shape[:2]:
                mask = resize_mask(mask, img.shape[0])
            tests.append((img, mask))
    if not tests:
        raise IngestionError(f"no test images in {name}/test")
    return TaskData(task_id, name, tuple(train), tuple(tests))


def load_mvtec_stream(
    root_path: str | Path,
    task_names: Sequence[str] = MVTEC_OBJECTS,
    working_size: int | None = 256,
) -> TaskStream:
    """Build one task per category, in the order given.

    ``working_size=None`` keeps source resolution (useful for checking label
    counts); otherwise every image becomes ``working_size x working_size x 3``.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    tasks = tuple(
        load_mvtec_category(root, name, i, working_size)
        for i, name in enumerate(task_names, start=1)
    )
    size = working_size if working_size is not None else tasks[0].train_images[0].shape[0]
    return TaskStream(tasks, size, {"kind": "mvtec", "root": str(root), "tasks": list(task_names)})


# --------------------------------------------------------------------------
# synthetic textures

TEXTURE_FAMILIES = ("stripes", "checks", "blobs", "rings", "diagonal", "dots")


def _palette(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    hue = rng.uniform(0, 1)
    base = 0.5 + 0.4 * np.cos(2 * np.pi * (hue + np.array([0.0, 1 / 3, 2 / 3])))
    accent = 0.5 + 0.4 * np.cos(2 * np.pi * (hue + 0.5 + np.array([0.0, 1 / 3, 2 / 3])))
    return base * 0.6 + 0.1, accent * 0.6 + 0.3


def _texture_params(family: str, rng: np.random.Generator) -> dict:
    """Per-task layout; images of one task only jitter around it."""
    params = {"phase": rng.uniform(0, 2 * np.pi), "period": rng.uniform(0.22, 0.3)}
    if family == "rings":
        params["centre"] = rng.uniform(0.3, 0.7, size=2)
    elif family == "blobs":
        params["centres"] = rng.uniform(0.1, 0.9, size=(6, 2))
    return params


def _texture_field(family: str, size: int, rng: np.random.Generator, params: dict | None = None) -> np.ndarray:
    """A smooth field in [0, 1] of shape (size, size)."""
    if params is None:
        params = _texture_params(family, rng)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    phase = params["phase"] + rng.uniform(-0.3, 0.3)
    period = params["period"] * rng.uniform(0.95, 1.05)
    if family == "stripes":
        f = np.sin(2 * np.pi * xx / period + phase)
    elif family == "checks":
        f = np.sin(2 * np.pi * xx / period + phase) * np.sin(2 * np.pi * yy / period + phase)
        f = np.tanh(3 * f)
    elif family == "diagonal":
        f = np.sin(2 * np.pi * (xx + yy) / (1.4 * period) + phase)
    elif family == "rings":
        cy, cx = params["centre"] + rng.uniform(-0.03, 0.03, size=2)
        f = np.sin(2 * np.pi * np.hypot(xx - cx, yy - cy) / period + phase)
    elif family == "dots":
        f = np.cos(2 * np.pi * xx / period + phase) + np.cos(2 * np.pi * yy / period - phase)
        f = np.tanh(2 * f)
    elif family == "blobs":
        f = np.zeros_like(xx)
        for cy, cx in params["centres"] + rng.uniform(-0.03, 0.03, size=(6, 2)):
            f += np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / 0.015)
        f = 2 * np.tanh(f) - 1
    else:
        raise ValueError(family)
    return (f + 1) / 2


def _render(field_: np.ndarray, base: np.ndarray, accent: np.ndarray) -> np.ndarray:
    img = base[None, None, :] * (1 - field_[..., None]) + accent[None, None, :] * field_[..., None]
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)


def _inject_patch(
    img: np.ndarray, base: np.ndarray, accent: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Structural defect in the task's own palette: blocky noise plus a mild tint.

    Spotting it requires knowing the normal texture, so a model trained on a
    different task should not find it by colour alone.
    """
    size = img.shape[0]
    lo = max(2, size // 6)
    hi = max(lo + 1, size // 3)
    ph, pw = (int(v) for v in rng.integers(lo, hi + 1, size=2))
    y0 = int(rng.integers(0, size - ph + 1))
    x0 = int(rng.integers(0, size - pw + 1))
    cell = max(1, size // 32)
    coarse = rng.uniform(-0.4, 1.4, size=(-(-ph // cell), -(-pw // cell)))
    field_ = np.kron(coarse, np.ones((cell, cell)))[:ph, :pw]
    tint = rng.uniform(-0.25, 0.25, size=3)
    patch = np.clip(base * (1 - field_[..., None]) + accent * field_[..., None] + tint, 0, 1)
    out = img.copy()
    out[y0 : y0 + ph, x0 : x0 + pw] = np.rint(patch * 255).astype(np.uint8)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[y0 : y0 + ph, x0 : x0 + pw] = 1
    return out, mask


def generate_synthetic_stream(
    num_tasks: int,
    images_per_task: int,
    working_size: int = 64,
    seed: int = 0,
    test_per_task: int | None = None,
    anomalous_fraction: float = 0.5,
) -> TaskStream:
    """Seeded stand-in for MVTec: each task is its own texture family and palette.

    Test anomalies are rectangular patches of a contrasting colour and their
    masks mark exactly the patch pixels. Same arguments, same bytes.
    """
    if num_tasks < 1 or images_per_task < 1 or working_size < 1:
        raise ValueError("num_tasks, images_per_task and working_size must be positive")
    if images_per_task < 2:
        raise ValueError("images_per_task must be at least 2")
    if test_per_task is None:
        test_per_task = max(2, images_per_task // 2)
    if test_per_task < 1:
        raise ValueError("test_per_task must be positive")

    root = np.random.SeedSequence(seed)
    task_seeds = root.spawn(num_tasks)
    family_order = np.random.default_rng(root.spawn(1)[0]).permutation(len(TEXTURE_FAMILIES))
    tasks = []
    for t in range(num_tasks):
        rng = np.random.default_rng(task_seeds[t])
        family = TEXTURE_FAMILIES[family_order[t % len(TEXTURE_FAMILIES)]]
        base, accent = _palette(rng)
        params = _texture_params(family, rng)
        train = tuple(
            _render(_texture_field(family, working_size, rng, params), base, accent)
            for _ in range(images_per_task)
        )
        n_anom = max(1, int(round(test_per_task * anomalous_fraction)))
        tests = []
        for k in range(test_per_task):
            img = _render(_texture_field(family, working_size, rng, params), base, accent)
            if k < n_anom:
                img, mask = _inject_patch(img, base, accent, rng)
            else:
                mask = np.zeros(img.shape[:2], dtype=np.uint8)
            tests.append((img, mask))
        tasks.append(TaskData(t + 1, f"{family}-{t + 1}", train, tuple(tests)))
    source = {
        "kind": "synthetic",
        "num_tasks": num_tasks,
        "images_per_task": images_per_task,
        "test_per_task": test_per_task,
        "anomalous_fraction": anomalous_fraction,
        "seed": seed,
    }
    return TaskStream(tuple(tasks), working_size, source)


# --------------------------------------------------------------------------
# export / import


def export_stream(stream: TaskStream, out_dir: str | Path) -> Path:
    """Write PNG files plus ``manifest.json`` describing order and roles."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"working_size": stream.working_size, "source": stream.source, "tasks": []}
    for task in stream.tasks:
        tdir = out / f"{task.task_id:02d}_{task.name}"
        tdir.mkdir(exist_ok=True)
        entries = []
        for k, img in enumerate(task.train_images):
            rel = f"{tdir.name}/train_{k:04d}.png"
            Image.fromarray(img).save(out / rel)
            entries.append({"role": "train", "image": rel})
        for k, (img, mask) in enumerate(task.test_images):
            rel = f"{tdir.name}/test_{k:04d}.png"
            mrel = f"{tdir.name}/test_{k:04d}_mask.png"
            Image.fromarray(img).save(out / rel)
            Image.fromarray(mask * 255).save(out / mrel)
            entries.append({"role": "test", "image": rel, "mask": mrel})
        manifest["tasks"].append({"task_id": task.task_id, "name": task.name, "images": entries})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def import_stream(in_dir: str | Path) -> TaskStream:
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    tasks = []
    for entry in manifest["tasks"]:
        train, tests = [], []
        for item in entry["images"]:
            img = _load_rgb(root / item["image"], None)
            if item["role"] == "train":
                train.append(img)
            else:
                tests.append((img, _load_mask(root / item["mask"], None)))
        tasks.append(TaskData(entry["task_id"], entry["name"], tuple(train), tuple(tests)))
    return TaskStream(tuple(tasks), manifest["working_size"], manifest.get("source", {}))
