"""Batch experiments: YAML configs, grid execution, result bundles, tables.

A config names a dataset, shared model settings and a grid of
strategy/model cells. Each cell trains over the whole stream and writes a
self-contained :class:`ResultBundle` whose summaries can be recomputed from
its stored matrices.

Orientation: f1 series rise as detection improves, FID series fall as
reconstructions improve.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import shutil
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import yaml

from .data import TaskStream, generate_synthetic_stream, load_mvtec_stream, MVTEC_OBJECTS
from .memory import make_memory
from .metrics import ScoreMatrix, average_forgetting, average_score, fid_forgetting
from .models import ArchConfig, CapabilityError, build_model
from .strategies import ConfigurationError, RunResult, StrategyConfig, run_stream

logger = logging.getLogger(__name__)

DATA_ROOT_ENV = "CLAD_DATA_ROOT"

STRATEGY_NAMES = {
    "SINGLE_MODEL": "Single Model",
    "FINE_TUNING": "Fine-Tuning",
    "REPLAY_HIGH_MEM": "Replay High Mem",
    "REPLAY_LOW_MEM": "Replay Low Mem",
    "COMPRESSED_REPLAY": "Compressed Replay",
    "DEGENERATIVE_COMPRESSED_REPLAY": "Degenerative Compressed Replay",
    "GENERATIVE_REPLAY": "Generative Replay",
}
MODEL_NAMES = {"CAE": "CAE", "VAE": "VAE", "SRGEN": "SCALE", "INPAINTGEN": "Inpaint"}


class ExperimentError(ValueError):
    pass


# --------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    num_tasks: int = 3
    images_per_task: int = 24
    test_per_task: int | None = None
    anomalous_fraction: float = 0.5
    seed: int = 0
    root: str | None = None
    tasks: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "mvtec"):
            raise ExperimentError(f"unknown dataset kind {self.kind!r}")
        if self.tasks is not None:
            object.__setattr__(self, "tasks", tuple(self.tasks))

    def resolved_root(self) -> str | None:
        return os.environ.get(DATA_ROOT_ENV) or self.root

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["tasks"] is not None:
            d["tasks"] = list(d["tasks"])
        return d

    def identity(self) -> dict:
        """What makes two bundles comparable; the root path is not part of it."""
        d = self.to_dict()
        d.pop("root")
        if self.kind == "mvtec":
            for k in ("num_tasks", "images_per_task", "test_per_task", "anomalous_fraction", "seed"):
                d.pop(k)
            d["tasks"] = list(self.tasks or MVTEC_OBJECTS)
        return d

    def build(self, working_size: int) -> TaskStream:
        if self.kind == "synthetic":
            return generate_synthetic_stream(
                self.num_tasks,
                self.images_per_task,
                working_size,
                seed=self.seed,
                test_per_task=self.test_per_task,
                anomalous_fraction=self.anomalous_fraction,
            )
        root = self.resolved_root()
        if not root:
            raise ExperimentError(f"MVTec dataset needs a root (config 'root' or ${DATA_ROOT_ENV})")
        return load_mvtec_stream(root, self.tasks or MVTEC_OBJECTS, working_size)


@dataclass(frozen=True)
class ExperimentConfig:
    """Dataset, shared model settings and the grid of cells to run.

    ``defaults`` holds :class:`StrategyConfig` fields applied to every grid
    entry before the entry's own values.
    """

    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    grid: tuple[dict, ...] = ()
    arch: ArchConfig = field(default_factory=ArchConfig)
    defaults: dict = field(default_factory=dict)
    epochs: int = 30
    seed: int = 0
    out: str | None = None
    name: str = "experiment"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)} | {"model"}
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown config keys {sorted(unknown)}")
        arch = d.pop("model", None) or d.pop("arch", None) or {}
        ds = d.pop("dataset", None) or {}
        grid = d.pop("grid", None) or []
        if not isinstance(grid, list):
            raise ExperimentError("'grid' must be a list of cells")
        try:
            return cls(
                dataset=DatasetSpec(**ds),
                grid=tuple(_expand_grid(grid)),
                arch=ArchConfig.from_dict(arch),
                **d,
            )
        except (TypeError, ValueError) as exc:
            raise ExperimentError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "seed": self.seed,
            "epochs": self.epochs,
            "out": self.out,
            "dataset": self.dataset.to_dict(),
            "model": self.arch.to_dict(),
            "defaults": dict(self.defaults),
            "grid": [dict(c) for c in self.grid],
        }

    def config_hash(self) -> str:
        """Stable across key order and output location; changes with any other field."""
        d = self.to_dict()
        d.pop("out")
        blob = json.dumps(d, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_overrides(self, seed: int | None = None, epochs: int | None = None, out: str | None = None):
        changes = {}
        if seed is not None:
            changes["seed"] = seed
        if epochs is not None:
            changes["epochs"] = epochs
        if out is not None:
            changes["out"] = str(out)
        return dataclasses.replace(self, **changes)

    def cell_config(self, entry: dict) -> StrategyConfig:
        d = {"epochs": self.epochs, "seed": self.seed, **self.defaults, **entry}
        d["arch"] = self.arch.to_dict()
        if "arch" in entry:
            d["arch"].update(entry["arch"])
        return StrategyConfig.from_dict(d)

    def strategy_configs(self) -> list[StrategyConfig]:
        problems = self.validate()
        if problems:
            raise ExperimentError("invalid grid:\n" + "\n".join(problems))
        return [self.cell_config(e) for e in self.grid]

    def validate(self) -> list[str]:
        """One diagnostic line per invalid grid entry; empty when all pass."""
        problems = []
        if not self.grid:
            problems.append("grid: no cells")
        for k, entry in enumerate(self.grid):
            try:
                self.cell_config(entry)
            except (ConfigurationError, ValueError, TypeError) as exc:
                problems.append(f"grid[{k}] {entry.get('strategy')}/{entry.get('ad_model')}: {exc}")
        return problems


def _expand_grid(entries: Iterable[dict]) -> list[dict]:
    """Entries may list several AD models; each becomes its own cell."""
    out = []
    for e in entries:
        if not isinstance(e, dict):
            raise ExperimentError(f"grid entry {e!r} is not a mapping")
        models = e.get("ad_model")
        if isinstance(models, list):
            out.extend({**e, "ad_model": m} for m in models)
        else:
            out.append(dict(e))
    return out


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ExperimentError(f"{path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ExperimentError(f"{path}: expected a mapping at top level")
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path


# --------------------------------------------------------------------------
# results


def _summary(value: float | None) -> float | None:
    return None if value is None or not np.isfinite(value) else float(value)


@dataclass
class ResultBundle:
    cell: StrategyConfig
    dataset: dict
    scores: ScoreMatrix
    fids: ScoreMatrix
    image_f1: ScoreMatrix | None = None
    compression_factor: float | None = None
    bytes_used: list[int] = field(default_factory=list)
    seconds_per_task: list[float] = field(default_factory=list)
    experiment_hash: str = ""

    @property
    def strategy(self) -> str:
        return self.cell.strategy

    @property
    def ad_model(self) -> str:
        return self.cell.ad_model

    @property
    def seed(self) -> int:
        return self.cell.seed

    @property
    def num_tasks(self) -> int:
        return self.scores.num_tasks

    @property
    def has_forgetting(self) -> bool:
        return self.strategy != "SINGLE_MODEL" and self.num_tasks > 1

    def summaries(self) -> dict:
        """S_T, F_T and FID counterparts, recomputed from the matrices."""
        T = self.num_tasks
        out: dict[str, Any] = {"S_T": None, "F_T": None, "FID_T": None, "F_T_fid": None}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if self.scores.row_complete(T):
                out["S_T"] = _summary(average_score(self.scores, T))
                if self.has_forgetting:
                    out["F_T"] = _summary(average_forgetting(self.scores, T))
            if self.fids.row_complete(T):
                out["FID_T"] = _summary(average_score(self.fids, T))
                if self.has_forgetting:
                    out["F_T_fid"] = _summary(fid_forgetting(self.fids, T))
            elif self.strategy == "SINGLE_MODEL" and not np.isnan(self.fids.diagonal()).any():
                out["FID_T"] = float(np.mean(self.fids.diagonal()))
            if self.strategy == "SINGLE_MODEL" and not np.isnan(self.scores.diagonal()).any():
                out["S_T"] = float(np.mean(self.scores.diagonal()))
        return out

    def series(self, metric: str = "f1") -> list[tuple[int, float]]:
        """(task index, mean of row i) for every completed row."""
        m = self.scores if metric == "f1" else self.fids
        if self.strategy == "SINGLE_MODEL":
            diag = m.diagonal()
            return [(i, float(np.mean(diag[:i]))) for i in range(1, m.num_tasks + 1) if not np.isnan(diag[:i]).any()]
        return [(i, float(np.mean(m.row(i)))) for i in range(1, m.num_tasks + 1) if m.row_complete(i)]

    def to_dict(self) -> dict:
        return {
            "cell": self.cell.to_dict(),
            "label": self.cell.label,
            "cell_hash": self.cell.config_hash(),
            "experiment_hash": self.experiment_hash,
            "dataset": self.dataset,
            "seed": self.seed,
            "extractor": self.cell.fid_extractor,
            "scores": self.scores.to_dict(),
            "fids": self.fids.to_dict(),
            "image_f1": self.image_f1.to_dict() if self.image_f1 is not None else None,
            "summaries": self.summaries(),
            "compression_factor": self.compression_factor,
            "bytes_used": list(self.bytes_used),
            "seconds_per_task": list(self.seconds_per_task),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResultBundle":
        return cls(
            cell=StrategyConfig.from_dict(d["cell"]),
            dataset=d["dataset"],
            scores=ScoreMatrix.from_dict(d["scores"]),
            fids=ScoreMatrix.from_dict(d["fids"]),
            image_f1=ScoreMatrix.from_dict(d["image_f1"]) if d.get("image_f1") else None,
            compression_factor=d.get("compression_factor"),
            bytes_used=list(d.get("bytes_used", [])),
            seconds_per_task=list(d.get("seconds_per_task", [])),
            experiment_hash=d.get("experiment_hash", ""),
        )

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "scores.csv").write_text(self.scores.to_csv())
        (directory / "fid.csv").write_text(self.fids.to_csv())
        path = directory / "bundle.json"
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2))
        tmp.replace(path)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ResultBundle":
        path = Path(path)
        if path.is_dir():
            path = path / "bundle.json"
        return cls.from_dict(json.loads(path.read_text()))


def cell_compression_factor(cell: StrategyConfig) -> float | None:
    """Raw bytes per stored byte for the cell's memory, if it has one that stores."""
    kind = cell.memory_kind
    if kind is None:
        return None
    shape = None
    if kind.startswith("LATENT"):
        shape = build_model(cell.memory_role_kind, cell.arch).latent_shape
    mem = make_memory(kind, cell.working_size, cell.budget, latent_shape=shape, low_size=cell.arch.low_size)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return float(mem.compression_factor())
    except CapabilityError:
        return None


def bundle_from_result(result: RunResult, cell: StrategyConfig, dataset: dict, experiment_hash: str = "") -> ResultBundle:
    return ResultBundle(
        cell=cell,
        dataset=dataset,
        scores=result.scores,
        fids=result.fids,
        image_f1=result.image_f1,
        compression_factor=cell_compression_factor(cell),
        bytes_used=list(result.bytes_used),
        seconds_per_task=list(result.seconds_per_task),
        experiment_hash=experiment_hash,
    )


# --------------------------------------------------------------------------
# running


def cell_dir(out: Path, index: int, cell: StrategyConfig) -> Path:
    slug = cell.label.replace("/", "-").replace("[", "-").replace("]", "").lower()
    return out / "cells" / f"{index:02d}_{slug}_s{cell.seed}"


def run_cell(
    cell: StrategyConfig,
    dataset: DatasetSpec,
    directory: str | Path,
    experiment_hash: str = "",
    stop_after: int | None = None,
) -> ResultBundle:
    """Run one grid cell with per-task checkpoints, or load its finished bundle."""
    directory = Path(directory)
    done = directory / "bundle.json"
    if done.exists():
        bundle = ResultBundle.load(done)
        if bundle.cell.config_hash() == cell.config_hash():
            logger.info("%s already complete", cell.label)
            return bundle
        raise ExperimentError(f"{directory} holds results for a different configuration")
    stream = dataset.build(cell.working_size)
    ckpt = directory / "checkpoint"
    result = run_stream(cell, stream, checkpoint_dir=ckpt, stop_after=stop_after)
    bundle = bundle_from_result(result, cell, dataset.identity(), experiment_hash)
    bundle.save(directory)
    shutil.rmtree(ckpt, ignore_errors=True)
    return bundle


def _run_cell_job(args) -> dict:
    cell_dict, ds_dict, directory, exp_hash = args
    import torch

    torch.set_num_threads(1)
    bundle = run_cell(StrategyConfig.from_dict(cell_dict), DatasetSpec(**ds_dict), directory, exp_hash)
    return bundle.to_dict()


def write_manifest(cfg: ExperimentConfig, out: Path, cells: Sequence[StrategyConfig]) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    manifest = {
        "name": cfg.name,
        "config_hash": cfg.config_hash(),
        "dataset": cfg.dataset.identity(),
        "cells": [
            {"label": c.label, "seed": c.seed, "hash": c.config_hash(), "dir": str(cell_dir(out, k, c).relative_to(out))}
            for k, c in enumerate(cells)
        ],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, parallel: int = 1) -> list[ResultBundle]:
    """Run every grid cell, resuming finished or checkpointed cells under ``out``.

    ``parallel > 1`` shards whole cells across processes; a stream is never split.
    """
    out = Path(out or cfg.out or "runs")
    cells = cfg.strategy_configs()
    manifest = out / "manifest.json"
    if manifest.exists():
        previous = json.loads(manifest.read_text())
        if previous.get("config_hash") != cfg.config_hash():
            raise ExperimentError(f"{out} was written by a different configuration; choose another --out")
    write_manifest(cfg, out, cells)
    exp_hash = cfg.config_hash()
    jobs = [(c.to_dict(), cfg.dataset.to_dict(), str(cell_dir(out, k, c)), exp_hash) for k, c in enumerate(cells)]
    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            return [ResultBundle.from_dict(d) for d in pool.map(_run_cell_job, jobs)]
    return [run_cell(c, cfg.dataset, cell_dir(out, k, c), exp_hash) for k, c in enumerate(cells)]


def resume_experiment(out: str | Path, parallel: int = 1) -> list[ResultBundle]:
    out = Path(out)
    if not (out / "config.yaml").exists():
        raise ExperimentError(f"nothing to resume in {out}")
    return run_experiment(load_config(out / "config.yaml"), out, parallel)


def load_bundles(out: str | Path) -> list[ResultBundle]:
    return [ResultBundle.load(p) for p in sorted(Path(out).glob("cells/*/bundle.json"))]


# --------------------------------------------------------------------------
# tables and plot data


def _check_same_dataset(bundles: Sequence[ResultBundle]) -> None:
    ids = {json.dumps(b.dataset, sort_keys=True) for b in bundles}
    if len(ids) > 1:
        raise ExperimentError("bundles come from different datasets; emit them separately")


def row_label(cell: StrategyConfig) -> str:
    name = STRATEGY_NAMES[cell.strategy]
    if cell.separate_memory_model:
        name += f" ({MODEL_NAMES[cell.memory_role_kind]} memory)"
    return name


def format_cell(value: float | None, forgetting: float | None, show_forgetting: bool = True) -> str:
    if value is None:
        return "-"
    if not show_forgetting:
        return f"{value:.2f} (-)"
    if forgetting is None:
        return f"{value:.2f}"
    return f"{value:.2f} ({forgetting * 100:.2f}%)"


def summary_table(bundles: Sequence[ResultBundle], metric: str = "f1") -> tuple[list[str], list[list[str]]]:
    """Header and rows: strategies down, AD models across.

    Cells repeated over seeds show the median of each summary.
    """
    _check_same_dataset(bundles)
    value_key, forget_key = ("S_T", "F_T") if metric == "f1" else ("FID_T", "F_T_fid")
    models = [m for m in MODEL_NAMES if any(b.ad_model == m for b in bundles)]
    header = ["Strategy"] + [MODEL_NAMES[m] for m in models]
    groups: dict[str, dict[str, list[ResultBundle]]] = {}
    order: list[str] = []
    for b in bundles:
        label = row_label(b.cell)
        if label not in groups:
            groups[label] = {}
            order.append(label)
        groups[label].setdefault(b.ad_model, []).append(b)
    rows = []
    for label in order:
        row = [label]
        for m in models:
            members = groups[label].get(m)
            if not members:
                row.append("")
                continue
            sums = [b.summaries() for b in members]
            value = _median([s[value_key] for s in sums])
            forgetting = _median([s[forget_key] for s in sums])
            row.append(format_cell(value, forgetting, members[0].has_forgetting))
        rows.append(row)
    return header, rows


def _median(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.median(vals)) if vals else None


def render_table(header: list[str], rows: list[list[str]], fmt: str = "markdown") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt != "markdown":
        raise ExperimentError(f"unknown table format {fmt!r}")
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def emit_tables(bundles: Sequence[ResultBundle], out_dir: str | Path, fmt: str = "markdown") -> list[Path]:
    """One table per metric (f1, FID) with forgetting in parentheses."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = "md" if fmt == "markdown" else "csv"
    paths = []
    for metric in ("f1", "fid"):
        header, rows = summary_table(bundles, metric)
        path = out_dir / f"table_{metric}.{ext}"
        path.write_text(render_table(header, rows, fmt))
        paths.append(path)
    return paths


def emit_plot_data(bundles: Sequence[ResultBundle], out_dir: str | Path) -> list[Path]:
    """Per metric, a long-format CSV of (strategy, model, seed, task, mean of row)."""
    _check_same_dataset(bundles)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for metric in ("f1", "fid"):
        path = out_dir / f"series_{metric}.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["strategy", "ad_model", "seed", "task", metric])
            for b in bundles:
                for i, v in b.series(metric):
                    writer.writerow([row_label(b.cell), MODEL_NAMES[b.ad_model], b.seed, i, repr(v)])
        paths.append(path)
    return paths

