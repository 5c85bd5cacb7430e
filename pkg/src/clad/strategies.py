"""Training over a task stream for every continual-learning strategy.

A pipeline has an AD model (scores anomalies) and, when a different model
kind plays the memory role, a separate memory model. After each task ``i``
the pipeline is evaluated on the test sets of tasks ``1..i``.

SCALE replay during task ``i`` trains on two kinds of pairs:

* current task: ``(upscale(downscale(x)), x)``
* old tasks: ``(upscale(item), SR_{i-1}(upscale(item)))`` where ``item`` is a
  stored low-resolution image and ``SR_{i-1}`` the frozen snapshot taken at
  the end of the previous task.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .data import TaskData, TaskStream, blur_roundtrip, raw_image_bytes, to_unit
from .memory import (
    GenerativeMemory,
    ModelContext,
    ReplayMemory,
    ScaleMemory,
    load_memory,
    make_memory,
)
from .metrics import ScoreMatrix, extract_features, fid
from .models import ArchConfig, ModelSnapshot, Reconstructor, build_model, parameters_digest
from .scoring import (
    best_f1_threshold,
    build_mask_set,
    inpaint_estimate,
    mean_image_f1,
    normalize_error,
    error_map,
    occlude,
    random_occlusions,
    reconstruct_images,
)

logger = logging.getLogger(__name__)

STRATEGIES = (
    "SINGLE_MODEL",
    "FINE_TUNING",
    "REPLAY_HIGH_MEM",
    "REPLAY_LOW_MEM",
    "COMPRESSED_REPLAY",
    "DEGENERATIVE_COMPRESSED_REPLAY",
    "GENERATIVE_REPLAY",
)
AD_KINDS = ("CAE", "VAE", "SRGEN", "INPAINTGEN")
MEMORY_MODEL_KINDS = {"CAE": "LATENT_CAE", "VAE": "LATENT_VAE", "SRGEN": "SCALE"}


class ConfigurationError(ValueError):
    """Strategy and model kinds that cannot work together."""


class ProtocolError(RuntimeError):
    """The training protocol was violated (e.g. SCALE replay without a snapshot)."""


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class StrategyConfig:
    """One cell of an experiment grid.

    ``memory_images`` is the replay capacity in raw-image equivalents and sets
    the shared byte budget ``C`` unless ``budget_bytes`` is given.
    ``replay_batch_n`` is the per-side batch size: each step sees ``n``
    current-task images plus ``n`` replayed ones.
    """

    strategy: str
    ad_model: str
    memory_model: str | None = None
    memory_images: int = 40
    budget_bytes: int | None = None
    replay_batch_n: int | None = None
    epochs: int = 30
    seed: int = 0
    arch: ArchConfig = field(default_factory=ArchConfig)
    inpaint_patch: int | None = None
    inpaint_passes: int = 3
    masks_per_pass: int = 4
    fid_extractor: str = "pixels"
    evaluate_fid: bool = True

    def __post_init__(self):
        if isinstance(self.arch, dict):
            object.__setattr__(self, "arch", ArchConfig.from_dict(self.arch))
        self.validate()

    # -- derived ---------------------------------------------------------

    @property
    def working_size(self) -> int:
        return self.arch.working_size

    @property
    def batch_n(self) -> int:
        return self.replay_batch_n or self.arch.batch_size

    @property
    def patch_size(self) -> int:
        return self.inpaint_patch or max(2, self.working_size // 8)

    @property
    def memory_role_kind(self) -> str | None:
        """Model kind that produces replayed images, if a model does."""
        if self.strategy in ("COMPRESSED_REPLAY", "DEGENERATIVE_COMPRESSED_REPLAY", "GENERATIVE_REPLAY"):
            return self.memory_model or self.ad_model
        return None

    @property
    def separate_memory_model(self) -> bool:
        role = self.memory_role_kind
        return role is not None and role != self.ad_model

    @property
    def memory_kind(self) -> str | None:
        s = self.strategy
        if s in ("SINGLE_MODEL", "FINE_TUNING"):
            return None
        if s == "REPLAY_HIGH_MEM":
            return "RAW_HIGH"
        if s == "REPLAY_LOW_MEM":
            return "RAW_LOW"
        if s == "GENERATIVE_REPLAY":
            return "GENERATIVE"
        return MEMORY_MODEL_KINDS[self.memory_role_kind]

    @property
    def budget(self) -> int | None:
        if self.memory_kind in (None, "RAW_HIGH", "GENERATIVE"):
            return None
        if self.budget_bytes is not None:
            return self.budget_bytes
        return self.memory_images * raw_image_bytes(self.working_size)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}")
        if self.ad_model not in AD_KINDS:
            raise ConfigurationError(f"unknown AD model {self.ad_model!r}")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        role = self.memory_role_kind
        s = self.strategy
        if s in ("SINGLE_MODEL", "FINE_TUNING", "REPLAY_HIGH_MEM", "REPLAY_LOW_MEM"):
            if self.memory_model is not None:
                raise ConfigurationError(f"{s} does not use a memory model")
        elif s == "GENERATIVE_REPLAY":
            if role != "VAE":
                raise ConfigurationError("generative replay needs a VAE as AD or memory model")
        elif s == "DEGENERATIVE_COMPRESSED_REPLAY":
            if role != "SRGEN":
                raise ConfigurationError("degenerative compressed replay is defined for SR memory only")
        elif role not in MEMORY_MODEL_KINDS:
            raise ConfigurationError(
                f"{role} cannot act as a memory model; use one of {sorted(MEMORY_MODEL_KINDS)}"
            )
        if s in ("REPLAY_LOW_MEM", "COMPRESSED_REPLAY", "DEGENERATIVE_COMPRESSED_REPLAY"):
            if (self.budget or 0) <= 0:
                raise ConfigurationError("finite replay needs a positive byte budget")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arch"] = self.arch.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StrategyConfig":
        d = dict(d)
        if "arch" in d and isinstance(d["arch"], dict):
            d["arch"] = ArchConfig.from_dict(d["arch"])
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown strategy fields {sorted(unknown)}")
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def label(self) -> str:
        if self.separate_memory_model:
            return f"{self.strategy}[{self.memory_role_kind}]/{self.ad_model}"
        return f"{self.strategy}/{self.ad_model}"


def pair_memory_with_ad(
    memory_model_kind: str,
    ad_model_kind: str,
    config: StrategyConfig | None = None,
    strategy: str = "COMPRESSED_REPLAY",
    **overrides,
) -> StrategyConfig:
    """Config where ``memory_model_kind`` supplies old-task images and ``ad_model_kind`` scores."""
    if memory_model_kind not in MEMORY_MODEL_KINDS:
        raise ConfigurationError(f"{memory_model_kind} cannot reconstruct old-task images")
    base = config.to_dict() if config is not None else {}
    base.update(overrides)
    base.update(strategy=strategy, ad_model=ad_model_kind, memory_model=memory_model_kind)
    return StrategyConfig.from_dict(base)


# --------------------------------------------------------------------------
# pipeline state


@dataclass
class TrainedPipeline:
    config: StrategyConfig
    ad_model: Reconstructor
    memory: ReplayMemory | None = None
    memory_model: Reconstructor | None = None
    snapshot: ModelSnapshot | None = None
    completed_tasks: int = 0

    @property
    def memory_side(self) -> Reconstructor | None:
        """The model whose outputs feed replay (the AD model when it plays both roles)."""
        if self.config.memory_role_kind is None:
            return None
        return self.memory_model or self.ad_model

    @property
    def fid_model(self) -> Reconstructor:
        return self.memory_model or self.ad_model


@dataclass
class RunResult:
    pipeline: TrainedPipeline
    scores: ScoreMatrix
    fids: ScoreMatrix
    image_f1: ScoreMatrix
    thresholds: ScoreMatrix
    bytes_used: list[int] = field(default_factory=list)
    seconds_per_task: list[float] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)

    def __iter__(self):
        return iter((self.pipeline, self.scores, self.fids))


class Observer:
    """Hooks for instrumentation; subclass and override what you need."""

    wants_digests = False

    def on_batch(self, info: dict) -> None:
        pass

    def on_store(self, task_id: int, pipeline: TrainedPipeline) -> None:
        pass

    def on_task_end(self, task_id: int, pipeline: TrainedPipeline) -> None:
        pass


def _new_model(kind: str, cfg: StrategyConfig, task_id: int | None = None) -> Reconstructor:
    seed = cfg.seed if task_id is None else derive_seed(cfg.seed, 7, task_id)
    return build_model(kind, dataclasses.replace(cfg.arch, seed=seed, epochs=cfg.epochs))


def init_pipeline(cfg: StrategyConfig) -> TrainedPipeline:
    ad = _new_model(cfg.ad_model, cfg)
    mem_model = None
    if cfg.separate_memory_model:
        mem_model = build_model(
            cfg.memory_role_kind, dataclasses.replace(cfg.arch, seed=derive_seed(cfg.seed, 11), epochs=cfg.epochs)
        )
    memory = None
    kind = cfg.memory_kind
    if kind is not None:
        side = mem_model or ad
        memory = make_memory(
            kind,
            cfg.working_size,
            cfg.budget,
            seed=cfg.seed,
            latent_shape=side.latent_shape,
            low_size=cfg.arch.low_size,
        )
    return TrainedPipeline(cfg, ad, memory, mem_model)


# --------------------------------------------------------------------------
# batch construction


def blur_batch(images: torch.Tensor, low_size: int) -> torch.Tensor:
    arr = images.detach().numpy().transpose(0, 2, 3, 1)
    return to_unit(np.stack([blur_roundtrip(a, low_size) for a in arr])) if len(arr) else images


def training_pairs(
    kind: str,
    images: torch.Tensor,
    cfg: StrategyConfig,
    rng: np.random.Generator,
    blurred: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """(input, target) for a batch of clean images and a given model kind."""
    if kind in ("CAE", "VAE"):
        return images, images
    if kind == "SRGEN":
        if blurred is None:
            blurred = blur_batch(images, cfg.arch.low_size)
        return blurred, images
    masks = random_occlusions(len(images), cfg.working_size, cfg.patch_size, rng, cfg.masks_per_pass)
    return occlude(images, masks), images


@dataclass
class ReplayBatch:
    """What the memory contributed to one step."""

    images: torch.Tensor  # clean replayed images (targets for non-SR roles)
    sr_inputs: torch.Tensor | None = None  # SCALE only: upscaled stored items


def replay_batch(pipe: TrainedPipeline, task_id: int, n: int, rng: np.random.Generator) -> ReplayBatch:
    cfg = pipe.config
    size = cfg.working_size
    empty = torch.zeros(0, 3, size, size)
    mem = pipe.memory
    if mem is None or n == 0 or task_id == 1:
        return ReplayBatch(empty)
    if isinstance(mem, ScaleMemory):
        if pipe.snapshot is None or pipe.snapshot.task_index != task_id - 1:
            raise ProtocolError(f"SCALE replay in task {task_id} needs the snapshot from task {task_id - 1}")
        inputs, targets = mem.retrieve_pairs(n, ModelContext(snapshot=pipe.snapshot), rng)
        return ReplayBatch(targets, inputs)
    if isinstance(mem, GenerativeMemory):
        if pipe.snapshot is None:
            raise ProtocolError("generative replay needs the previous task's VAE snapshot")
        return ReplayBatch(mem.retrieve(n, ModelContext(snapshot=pipe.snapshot), rng))
    if len(mem) == 0:
        return ReplayBatch(empty)
    return ReplayBatch(mem.retrieve(n, ModelContext(model=pipe.memory_side), rng))


def _train_one(model, cur, cur_blur, replay: ReplayBatch, cfg, rng) -> dict:
    if model.kind == "SRGEN" and replay.sr_inputs is not None:
        inputs = torch.cat([cur_blur, replay.sr_inputs])
        targets = torch.cat([cur, replay.images])
    else:
        images = torch.cat([cur, replay.images])
        blurred = None
        if model.kind == "SRGEN":
            blurred = torch.cat([cur_blur, blur_batch(replay.images, cfg.arch.low_size)])
        inputs, targets = training_pairs(model.kind, images, cfg, rng, blurred)
    return model.train_step(inputs, targets)


def train_task_with_replay(
    pipe: TrainedPipeline,
    task: TaskData,
    observer: Observer | None = None,
) -> list[dict]:
    """Train on one task (mixing in replay), then update the memory.

    Covers every strategy; SCALE and its degenerative variant go through
    :func:`scale_train_task` semantics via the memory type.
    """
    cfg = pipe.config
    i = task.task_id
    rng = np.random.default_rng(derive_seed(cfg.seed, 1, i))
    torch.manual_seed(derive_seed(cfg.seed, 2, i))
    images = task.train_array
    low = cfg.arch.low_size
    needs_blur = "SRGEN" in (cfg.ad_model, cfg.memory_role_kind)
    blur_cache = to_unit(np.stack([blur_roundtrip(img, low) for img in images])) if needs_blur else None
    clean = to_unit(images)
    n = cfg.batch_n
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        for start in range(0, len(images), n):
            idx = order[start : start + n]
            cur = clean[idx]
            cur_blur = blur_cache[idx] if blur_cache is not None else None
            info: dict[str, Any] = {}
            if observer is not None and observer.wants_digests:
                info["live_digest_before"] = parameters_digest(pipe.memory_side or pipe.ad_model)
            replay = replay_batch(pipe, i, len(idx), rng)
            if observer is not None:
                if observer.wants_digests:
                    info["live_digest_after"] = parameters_digest(pipe.memory_side or pipe.ad_model)
                info.update(
                    task_id=i,
                    epoch=epoch,
                    current=cur,
                    replay_images=replay.images,
                    replay_inputs=replay.sr_inputs,
                    snapshot=pipe.snapshot,
                )
                observer.on_batch(info)
            rec = {"ad": _train_one(pipe.ad_model, cur, cur_blur, replay, cfg, rng)}
            if pipe.memory_model is not None:
                rec["memory"] = _train_one(pipe.memory_model, cur, cur_blur, replay, cfg, rng)
            losses.append(rec)
    end_of_task(pipe, task, rng)
    if observer is not None:
        observer.on_store(i, pipe)
    return losses


def end_of_task(pipe: TrainedPipeline, task: TaskData, rng: np.random.Generator) -> None:
    """Memory update after task ``i``: recompress (degenerative), snapshot, store."""
    cfg = pipe.config
    i = task.task_id
    mem = pipe.memory
    side = pipe.memory_side
    if cfg.strategy == "DEGENERATIVE_COMPRESSED_REPLAY":
        assert isinstance(mem, ScaleMemory) and side is not None
        mem.recompress(side, before_task=i)
    if isinstance(mem, (ScaleMemory, GenerativeMemory)):
        assert side is not None
        pipe.snapshot = side.snapshot(i)  # only the latest snapshot is kept
    if mem is not None and not isinstance(mem, GenerativeMemory):
        mem.store(task.train_array, i, ModelContext(model=side), rng)
    pipe.completed_tasks = i


def scale_train_task(pipe: TrainedPipeline, task: TaskData, observer: Observer | None = None) -> list[dict]:
    if not isinstance(pipe.memory, ScaleMemory):
        raise ConfigurationError("scale_train_task needs a SCALE memory")
    if task.task_id > 1 and (pipe.snapshot is None or pipe.snapshot.task_index != task.task_id - 1):
        raise ProtocolError(f"missing SR snapshot from task {task.task_id - 1}")
    return train_task_with_replay(pipe, task, observer)


def degenerative_scale_train_task(pipe: TrainedPipeline, task: TaskData, observer: Observer | None = None) -> list[dict]:
    if pipe.config.strategy != "DEGENERATIVE_COMPRESSED_REPLAY":
        raise ConfigurationError("pipeline is not configured for degenerative compressed replay")
    return scale_train_task(pipe, task, observer)


# --------------------------------------------------------------------------
# evaluation


def evaluate_task(model: Reconstructor, fid_model: Reconstructor, task: TaskData, cfg: StrategyConfig) -> dict:
    """f1 (pooled over the task's test pixels) and FID of ``fid_model``'s reconstructions."""
    images = task.test_array
    gts = list(task.test_masks)
    recs: dict[int, np.ndarray] = {}

    def reconstructions(m: Reconstructor) -> np.ndarray:
        if id(m) not in recs:
            if m.kind == "INPAINTGEN":
                ms = build_mask_set(
                    cfg.working_size,
                    cfg.working_size,
                    cfg.patch_size,
                    cfg.inpaint_passes,
                    derive_seed(cfg.seed, 3, task.task_id),
                    cfg.masks_per_pass,
                )
                recs[id(m)] = np.stack([inpaint_estimate(m, img, ms) for img in images])
            else:
                recs[id(m)] = reconstruct_images(m, images)
        return recs[id(m)]

    ad_recs = reconstructions(model)
    maps = [normalize_error(error_map(img, rec)) for img, rec in zip(images, ad_recs)]
    threshold, f1 = best_f1_threshold(maps, gts)
    out = {"f1": f1, "threshold": threshold, "image_f1": mean_image_f1(maps, gts, threshold)}
    if cfg.evaluate_fid and len(images) >= 2:
        real = extract_features(images, cfg.fid_extractor)
        gen = extract_features(reconstructions(fid_model).astype(np.float32), cfg.fid_extractor)
        out["fid"] = fid(real, gen)
    return out


# --------------------------------------------------------------------------
# checkpointing


def save_progress(pipe: TrainedPipeline, result: RunResult, directory: Path) -> None:
    """Atomic per-task checkpoint: model state plus memory contents."""
    directory = Path(directory)
    tmp = directory.with_name(directory.name + ".tmp")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    state = {"ad": pipe.ad_model.state_dict()}
    if pipe.memory_model is not None:
        state["memory_model"] = pipe.memory_model.state_dict()
    if pipe.snapshot is not None:
        state["snapshot"] = {"task_index": pipe.snapshot.task_index, "net": pipe.snapshot.state_dict()}
    torch.save(state, tmp / "models.pt")
    if pipe.memory is not None:
        pipe.memory.save(tmp / "memory")
    progress = {
        "config": pipe.config.to_dict(),
        "config_hash": pipe.config.config_hash(),
        "completed_tasks": pipe.completed_tasks,
        "matrices": {
            name: getattr(result, name).to_dict() for name in ("scores", "fids", "image_f1", "thresholds")
        },
        "bytes_used": result.bytes_used,
        "seconds_per_task": result.seconds_per_task,
    }
    (tmp / "progress.json").write_text(json.dumps(progress, indent=2, default=list))
    if directory.exists():
        shutil.rmtree(directory)
    tmp.rename(directory)


def load_progress(cfg: StrategyConfig, directory: Path) -> tuple[TrainedPipeline, RunResult] | None:
    directory = Path(directory)
    if not (directory / "progress.json").exists():
        return None
    progress = json.loads((directory / "progress.json").read_text())
    if progress["config_hash"] != cfg.config_hash():
        raise ConfigurationError(f"checkpoint in {directory} belongs to a different configuration")
    pipe = init_pipeline(cfg)
    state = torch.load(directory / "models.pt", weights_only=False)
    done = progress["completed_tasks"]
    if cfg.strategy == "SINGLE_MODEL":
        pipe.ad_model = _new_model(cfg.ad_model, cfg, done)
    pipe.ad_model.load_state_dict(state["ad"])
    if pipe.memory_model is not None:
        pipe.memory_model.load_state_dict(state["memory_model"])
    if "snapshot" in state:
        side = pipe.memory_side
        side_state = side.net.state_dict()
        side.net.load_state_dict(state["snapshot"]["net"])
        pipe.snapshot = side.snapshot(state["snapshot"]["task_index"])
        side.net.load_state_dict(side_state)
    if pipe.memory is not None:
        pipe.memory = load_memory(directory / "memory")
    pipe.completed_tasks = done
    m = progress["matrices"]
    result = RunResult(
        pipe,
        ScoreMatrix.from_dict(m["scores"]),
        ScoreMatrix.from_dict(m["fids"]),
        ScoreMatrix.from_dict(m["image_f1"]),
        ScoreMatrix.from_dict(m["thresholds"]),
        list(progress["bytes_used"]),
        list(progress["seconds_per_task"]),
    )
    return pipe, result


class Interrupted(RuntimeError):
    """Raised by ``run_stream(stop_after=...)`` to simulate a crash after a checkpoint."""


# --------------------------------------------------------------------------
# the loop


def run_stream(
    config: StrategyConfig,
    stream: TaskStream,
    observer: Observer | None = None,
    checkpoint_dir: str | Path | None = None,
    stop_after: int | None = None,
) -> RunResult:
    """Train over the stream and fill the score matrices row by row.

    With ``checkpoint_dir`` the state is saved after every task and an
    existing checkpoint for the same config is resumed. ``stop_after=k``
    raises :class:`Interrupted` right after task ``k`` is checkpointed.
    """
    cfg = config
    if stream.working_size != cfg.working_size:
        raise ConfigurationError(
            f"stream is {stream.working_size}px but the models are configured for {cfg.working_size}px"
        )
    T = stream.total_tasks
    resumed = load_progress(cfg, Path(checkpoint_dir)) if checkpoint_dir else None
    if resumed is not None:
        pipe, result = resumed
        logger.info("resuming %s after task %d", cfg.label, pipe.completed_tasks)
    else:
        pipe = init_pipeline(cfg)
        meta = {"strategy": cfg.label, "seed": cfg.seed, "extractor": cfg.fid_extractor}
        result = RunResult(
            pipe,
            ScoreMatrix(T, "f1", meta=dict(meta)),
            ScoreMatrix(T, "fid", meta=dict(meta)),
            ScoreMatrix(T, "image_f1", meta=dict(meta)),
            ScoreMatrix(T, "threshold", meta=dict(meta)),
        )

    for task in stream.tasks[pipe.completed_tasks :]:
        i = task.task_id
        t0 = time.perf_counter()
        if cfg.strategy == "SINGLE_MODEL":
            pipe.ad_model = _new_model(cfg.ad_model, cfg, i)
        losses = train_task_with_replay(pipe, task, observer)
        result.losses.append(losses[-1] if losses else {})
        if pipe.memory is not None and pipe.memory.budget.budget_bytes is not None:
            assert pipe.memory.bytes_used <= pipe.memory.budget.budget_bytes
        evaluated = [task] if cfg.strategy == "SINGLE_MODEL" else stream.tasks[:i]
        for old in evaluated:
            ev = evaluate_task(pipe.ad_model, pipe.fid_model, old, cfg)
            result.scores[i, old.task_id] = ev["f1"]
            result.image_f1[i, old.task_id] = ev["image_f1"]
            result.thresholds[i, old.task_id] = ev["threshold"]
            if "fid" in ev:
                result.fids[i, old.task_id] = ev["fid"]
        result.bytes_used.append(pipe.memory.bytes_used if pipe.memory is not None else 0)
        result.seconds_per_task.append(time.perf_counter() - t0)
        logger.info("%s task %d: f1 row %s", cfg.label, i, np.round(result.scores.row(i), 3))
        if observer is not None:
            observer.on_task_end(i, pipe)
        if checkpoint_dir:
            save_progress(pipe, result, Path(checkpoint_dir))
        if stop_after is not None and i >= stop_after and i < T:
            raise Interrupted(f"stopped after task {i}")
    result.pipeline = pipe
    return result
