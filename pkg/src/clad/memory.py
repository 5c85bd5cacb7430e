"""Replay memories with byte-budget accounting.

Every memory holds :class:`MemoryItem` payloads tagged with their source task.
Finite memories keep per-task counts balanced (max - min <= 1 whenever tasks
have enough images) and evict uniformly at random from over-quota tasks.

Kinds:

=============  ==================================  ==========================
kind           payload                             retrieve
=============  ==================================  ==========================
RAW_HIGH       8-bit image, unbounded              the image
RAW_LOW        8-bit image, budget C               the image
LATENT_CAE     float32 CAE code                    live model's decoder
LATENT_VAE     float32 VAE posterior mean          live model's decoder
SCALE          8-bit downscaled image              SR snapshot on the upscale
GENERATIVE     nothing                             fresh VAE samples
=============  ==================================  ==========================
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .data import raw_image_bytes, resize_image, to_uint8, to_unit
from .models import CapabilityError

logger = logging.getLogger(__name__)

MEMORY_KINDS = ("RAW_HIGH", "RAW_LOW", "LATENT_CAE", "LATENT_VAE", "SCALE", "GENERATIVE")
DEFAULT_MEMORY_IMAGES = 40

# Factors quoted elsewhere that do not follow from the byte arithmetic.
QUOTED_FACTORS = {"LATENT_VAE": 196}


class MemoryAdvisory(UserWarning):
    """A memory call was a no-op (storing into a generative memory, retrieving from an empty one)."""


class FactorDiscrepancyWarning(UserWarning):
    """The computed compression factor differs from a commonly quoted figure."""


class BudgetExceeded(RuntimeError):
    pass


@dataclass
class ReplayBudget:
    budget_bytes: int | None
    item_bytes: int
    bytes_used: int = 0

    @property
    def capacity_items(self) -> int | None:
        if self.budget_bytes is None:
            return None
        return self.budget_bytes // self.item_bytes


@dataclass(frozen=True)
class MemoryItem:
    payload: np.ndarray
    source_task: int

    @property
    def nbytes(self) -> int:
        return int(self.payload.nbytes)


@dataclass
class ModelContext:
    """Models a memory may need: the live model and/or a frozen snapshot."""

    model: object | None = None
    snapshot: object | None = None


def balanced_targets(available: dict[int, int], capacity: int | None, keep_order: Sequence[int]) -> dict[int, int]:
    """Water-fill ``capacity`` slots across tasks.

    Tasks with fewer images than the fair share keep all of them; the rest
    split what is left evenly. Leftover single slots go to tasks in
    ``keep_order`` order.
    """
    if capacity is None:
        return dict(available)
    targets: dict[int, int] = {}
    open_tasks = list(available)
    remaining = capacity
    while open_tasks:
        share = remaining // len(open_tasks)
        small = [t for t in open_tasks if available[t] <= share]
        if not small:
            break
        for t in small:
            targets[t] = available[t]
            remaining -= available[t]
            open_tasks.remove(t)
    if open_tasks:
        share, extra = divmod(remaining, len(open_tasks))
        for t in open_tasks:
            targets[t] = share
        for t in [t for t in keep_order if t in open_tasks][:extra]:
            targets[t] += 1
    return targets


class ReplayMemory:
    """Base class: item storage, balancing, sampling, persistence."""

    kind = "RAW_LOW"

    def __init__(self, working_size: int, budget_bytes: int | None, item_bytes: int, seed: int = 0):
        self.working_size = working_size
        self.budget = ReplayBudget(budget_bytes, item_bytes)
        self.items: list[MemoryItem] = []
        self.seed = seed
        self.rng = np.random.default_rng(seed)

    def __repr__(self):
        return (
            f"{type(self).__name__}(kind={self.kind}, items={len(self.items)}, "
            f"bytes={self.bytes_used}/{self.budget.budget_bytes})"
        )

    def __len__(self) -> int:
        return len(self.items)

    @property
    def bytes_used(self) -> int:
        return self.budget.bytes_used

    @property
    def capacity_items(self) -> int | None:
        return self.budget.capacity_items

    def per_task_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for item in self.items:
            counts[item.source_task] = counts.get(item.source_task, 0) + 1
        return dict(sorted(counts.items()))

    def compression_factor(self) -> float:
        factor = raw_image_bytes(self.working_size) / self.budget.item_bytes
        quoted = QUOTED_FACTORS.get(self.kind)
        if quoted is not None and quoted != factor:
            warnings.warn(
                f"{self.kind} compression factor is {factor:g}; the quoted x{quoted} does not match "
                f"{raw_image_bytes(self.working_size)} / {self.budget.item_bytes} bytes",
                FactorDiscrepancyWarning,
                stacklevel=2,
            )
        return factor

    # -- payload hooks ---------------------------------------------------

    def _make_payloads(self, images: np.ndarray, ctx: ModelContext | None) -> list[np.ndarray]:
        return [np.array(img, dtype=np.uint8, copy=True) for img in images]

    def _decode(self, payloads: list[np.ndarray], ctx: ModelContext | None) -> torch.Tensor:
        return to_unit(np.stack(payloads))

    # -- store / retrieve ------------------------------------------------

    def store(
        self,
        images: np.ndarray | Sequence[np.ndarray],
        task_id: int,
        model_context: ModelContext | None = None,
        rng: np.random.Generator | None = None,
    ) -> "ReplayMemory":
        """Add a task's images, evicting to keep the budget and the balance."""
        rng = self.rng if rng is None else rng
        images = np.asarray(images)
        counts = self.per_task_counts()
        if task_id in counts:
            raise ValueError(f"task {task_id} was already stored")
        available = dict(counts)
        available[task_id] = len(images)
        targets = balanced_targets(available, self.capacity_items, list(counts) + [task_id])

        evict: set[int] = set()
        for t, have in counts.items():
            surplus = have - targets[t]
            if surplus > 0:
                idx = [k for k, item in enumerate(self.items) if item.source_task == t]
                evict.update(int(k) for k in rng.choice(idx, size=surplus, replace=False))
        if evict:
            self.items = [item for k, item in enumerate(self.items) if k not in evict]

        take = np.sort(rng.permutation(len(images))[: targets[task_id]])
        if len(take):
            for payload in self._make_payloads(images[take], model_context):
                self.items.append(MemoryItem(payload, task_id))
        self._recount()
        return self

    def _recount(self) -> None:
        used = sum(item.nbytes for item in self.items)
        for item in self.items:
            if item.nbytes != self.budget.item_bytes:
                raise BudgetExceeded(f"item of {item.nbytes} bytes in a {self.budget.item_bytes}-byte memory")
        if self.budget.budget_bytes is not None and used > self.budget.budget_bytes:
            raise BudgetExceeded(f"{used} bytes used of {self.budget.budget_bytes}")
        self.budget.bytes_used = used

    def sample_indices(self, n: int, rng: np.random.Generator | None = None) -> np.ndarray:
        """Uniform without replacement; wraps into a fresh permutation when ``n`` exceeds the size."""
        rng = self.rng if rng is None else rng
        size = len(self.items)
        if n <= 0 or size == 0:
            return np.zeros(0, dtype=int)
        chunks = []
        while n > 0:
            perm = rng.permutation(size)[:n]
            chunks.append(perm)
            n -= len(perm)
        return np.concatenate(chunks)

    def retrieve(
        self,
        n: int,
        model_context: ModelContext | None = None,
        rng: np.random.Generator | None = None,
    ) -> torch.Tensor:
        """``n`` replayed images as a float (n, 3, H, W) tensor."""
        size = self.working_size
        if n <= 0:
            return torch.zeros(0, 3, size, size)
        if not self.items:
            warnings.warn(f"{self.kind} memory is empty", MemoryAdvisory, stacklevel=2)
            return torch.zeros(0, 3, size, size)
        idx = self.sample_indices(n, rng)
        return self._decode([self.items[k].payload for k in idx], model_context)

    # -- persistence -----------------------------------------------------

    def ledger(self) -> dict:
        return {
            "kind": self.kind,
            "working_size": self.working_size,
            "budget_bytes": self.budget.budget_bytes,
            "item_bytes": self.budget.item_bytes,
            "bytes_used": self.bytes_used,
            "per_task_counts": {str(k): v for k, v in self.per_task_counts().items()},
            "seed": self.seed,
            "rng_state": self.rng.bit_generator.state,
            **self._extra_ledger(),
        }

    def _extra_ledger(self) -> dict:
        return {}

    def save(self, directory: str | Path) -> Path:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        if self.items:
            payloads = np.stack([item.payload for item in self.items])
        else:
            payloads = np.zeros((0,), dtype=np.uint8)
        tasks = np.array([item.source_task for item in self.items], dtype=np.int64)
        np.savez(out / "payloads.npz", payloads=payloads, tasks=tasks)
        (out / "ledger.json").write_text(json.dumps(self.ledger(), indent=2, default=int))
        return out


class RawMemory(ReplayMemory):
    def __init__(self, working_size: int, budget_bytes: int | None = None, seed: int = 0):
        super().__init__(working_size, budget_bytes, raw_image_bytes(working_size), seed)
        self.kind = "RAW_HIGH" if budget_bytes is None else "RAW_LOW"


class LatentMemory(ReplayMemory):
    """Stores encoder outputs; decodes with whatever the live model is now."""

    def __init__(self, model_kind: str, latent_shape: Iterable[int], working_size: int, budget_bytes: int, seed: int = 0):
        if model_kind not in ("CAE", "VAE"):
            raise ValueError(f"latent memory needs a CAE or VAE, got {model_kind}")
        self.latent_shape = tuple(int(s) for s in latent_shape)
        super().__init__(working_size, budget_bytes, int(np.prod(self.latent_shape)) * 4, seed)
        self.model_kind = model_kind
        self.kind = f"LATENT_{model_kind}"

    def _model(self, ctx: ModelContext | None):
        if ctx is None or ctx.model is None:
            raise ValueError(f"{self.kind} memory needs the live model in the model context")
        return ctx.model

    def _make_payloads(self, images, ctx):
        codes = self._model(ctx).encode(to_unit(images))
        return [c.numpy().astype(np.float32).reshape(self.latent_shape) for c in codes]

    def _decode(self, payloads, ctx):
        return self._model(ctx).decode(torch.from_numpy(np.stack(payloads)))

    def _extra_ledger(self):
        return {"latent_shape": list(self.latent_shape)}


class ScaleMemory(ReplayMemory):
    """Downscaled 8-bit images, restored by a frozen super-resolution snapshot."""

    kind = "SCALE"

    def __init__(self, working_size: int, budget_bytes: int, low_size: int | None = None, seed: int = 0):
        self.low_size = low_size or max(1, working_size // 8)
        super().__init__(working_size, budget_bytes, raw_image_bytes(self.low_size), seed)

    def compress(self, image: np.ndarray) -> np.ndarray:
        return resize_image(image, self.low_size, "smooth")

    def _make_payloads(self, images, ctx):
        return [self.compress(img) for img in images]

    def upscale(self, payloads: Sequence[np.ndarray]) -> torch.Tensor:
        """The blurry working-size inputs (``input_2``) for the stored items."""
        return to_unit(np.stack([resize_image(p, self.working_size, "smooth") for p in payloads]))

    def retrieve_pairs(
        self,
        n: int,
        model_context: ModelContext | None = None,
        rng: np.random.Generator | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(upscaled stored items, snapshot reconstructions of them)."""
        size = self.working_size
        empty = torch.zeros(0, 3, size, size)
        if n <= 0:
            return empty, empty
        if not self.items:
            warnings.warn("SCALE memory is empty", MemoryAdvisory, stacklevel=2)
            return empty, empty
        if model_context is None or model_context.snapshot is None:
            raise ValueError("SCALE retrieval needs the previous task's SR snapshot")
        idx = self.sample_indices(n, rng)
        inputs = self.upscale([self.items[k].payload for k in idx])
        return inputs, model_context.snapshot.reconstruct(inputs)

    def retrieve(self, n, model_context=None, rng=None):
        return self.retrieve_pairs(n, model_context, rng)[1]

    @torch.no_grad()
    def recompress(self, model, before_task: int) -> int:
        """Replace items of tasks ``< before_task`` by the downscaled output of ``model``.

        ``model`` is anything with ``reconstruct``; returns the number replaced.
        """
        replaced = 0
        for k, item in enumerate(self.items):
            if item.source_task >= before_task:
                continue
            out = model.reconstruct(self.upscale([item.payload]))
            self.items[k] = MemoryItem(self.compress(to_uint8(out)[0]), item.source_task)
            replaced += 1
        self._recount()
        return replaced

    def _extra_ledger(self):
        return {"low_size": self.low_size}


class GenerativeMemory(ReplayMemory):
    """Holds no data; replays fresh samples from a frozen VAE."""

    kind = "GENERATIVE"

    def __init__(self, working_size: int, seed: int = 0):
        super().__init__(working_size, None, 1, seed)

    def store(self, images, task_id, model_context=None, rng=None):
        warnings.warn("generative memory stores nothing", MemoryAdvisory, stacklevel=2)
        return self

    def compression_factor(self) -> float:
        raise CapabilityError("compression factor is undefined for generative replay")

    def retrieve(self, n, model_context=None, rng=None):
        rng = self.rng if rng is None else rng
        if n <= 0:
            return torch.zeros(0, 3, self.working_size, self.working_size)
        source = None
        if model_context is not None:
            source = model_context.snapshot or model_context.model
        if source is None:
            warnings.warn("no generator available for generative replay", MemoryAdvisory, stacklevel=2)
            return torch.zeros(0, 3, self.working_size, self.working_size)
        return source.sample(n, int(rng.integers(2**31)))


def default_budget(working_size: int, memory_images: int = DEFAULT_MEMORY_IMAGES) -> int:
    """Bytes of ``memory_images`` raw 8-bit images: the shared budget ``C``."""
    return memory_images * raw_image_bytes(working_size)


def make_memory(
    kind: str,
    working_size: int,
    budget_bytes: int | None = None,
    seed: int = 0,
    latent_shape: Iterable[int] | None = None,
    low_size: int | None = None,
) -> ReplayMemory:
    if kind not in MEMORY_KINDS:
        raise ValueError(f"unknown memory kind {kind!r}")
    if kind == "RAW_HIGH":
        return RawMemory(working_size, None, seed)
    if kind == "GENERATIVE":
        return GenerativeMemory(working_size, seed)
    if budget_bytes is None:
        budget_bytes = default_budget(working_size)
    if kind == "RAW_LOW":
        return RawMemory(working_size, budget_bytes, seed)
    if kind == "SCALE":
        return ScaleMemory(working_size, budget_bytes, low_size, seed)
    if latent_shape is None:
        raise ValueError(f"{kind} needs the model's latent shape")
    return LatentMemory(kind.split("_")[1], latent_shape, working_size, budget_bytes, seed)


def load_memory(directory: str | Path) -> ReplayMemory:
    root = Path(directory)
    ledger = json.loads((root / "ledger.json").read_text())
    mem = make_memory(
        ledger["kind"],
        ledger["working_size"],
        ledger["budget_bytes"],
        ledger["seed"],
        latent_shape=ledger.get("latent_shape"),
        low_size=ledger.get("low_size"),
    )
    data = np.load(root / "payloads.npz")
    mem.items = [MemoryItem(p.copy(), int(t)) for p, t in zip(data["payloads"], data["tasks"])]
    mem.rng.bit_generator.state = ledger["rng_state"]
    mem._recount()
    return mem


def compression_factor(memory: ReplayMemory) -> float:
    return memory.compression_factor()


def bytes_used(memory: ReplayMemory) -> int:
    return memory.bytes_used
