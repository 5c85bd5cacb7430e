import dataclasses

import numpy as np
import pytest
import torch

from clad.data import generate_synthetic_stream, raw_image_bytes
from clad.memory import ScaleMemory
from clad.models import parameters_digest, reconstruct_with
from clad.strategies import (
    STRATEGIES,
    ConfigurationError,
    Interrupted,
    Observer,
    ProtocolError,
    StrategyConfig,
    degenerative_scale_train_task,
    derive_seed,
    init_pipeline,
    pair_memory_with_ad,
    replay_batch,
    run_stream,
    scale_train_task,
)

CELLS = [
    ("SINGLE_MODEL", "CAE", None),
    ("FINE_TUNING", "VAE", None),
    ("REPLAY_HIGH_MEM", "INPAINTGEN", None),
    ("REPLAY_LOW_MEM", "SRGEN", None),
    ("COMPRESSED_REPLAY", "CAE", None),
    ("COMPRESSED_REPLAY", "VAE", None),
    ("COMPRESSED_REPLAY", "SRGEN", None),
    ("COMPRESSED_REPLAY", "INPAINTGEN", "SRGEN"),
    ("COMPRESSED_REPLAY", "CAE", "VAE"),
    ("DEGENERATIVE_COMPRESSED_REPLAY", "SRGEN", None),
    ("GENERATIVE_REPLAY", "VAE", None),
    ("GENERATIVE_REPLAY", "CAE", "VAE"),
]


def cfg(tiny_arch, strategy="FINE_TUNING", ad="VAE", memory_model=None, **kw):
    kw.setdefault("memory_images", 2)
    return StrategyConfig(strategy, ad, memory_model, epochs=1, arch=tiny_arch, **kw)


def test_validation_rejects_bad_pairings(tiny_arch):
    with pytest.raises(ConfigurationError):
        cfg(tiny_arch, "SOMETHING")
    with pytest.raises(ConfigurationError):
        cfg(tiny_arch, "DEGENERATIVE_COMPRESSED_REPLAY", "VAE")
    with pytest.raises(ConfigurationError):
        cfg(tiny_arch, "GENERATIVE_REPLAY", "CAE")
    with pytest.raises(ConfigurationError):
        cfg(tiny_arch, "FINE_TUNING", "CAE", "VAE")
    with pytest.raises(ConfigurationError):
        cfg(tiny_arch, "COMPRESSED_REPLAY", "INPAINTGEN")
    with pytest.raises(ConfigurationError):
        cfg(tiny_arch, "REPLAY_LOW_MEM", "CAE", memory_images=0)
    with pytest.raises(ConfigurationError):
        pair_memory_with_ad("INPAINTGEN", "CAE")


def test_derived_fields(tiny_arch):
    c = cfg(tiny_arch, "COMPRESSED_REPLAY", "INPAINTGEN", "SRGEN", memory_images=40)
    assert c.memory_kind == "SCALE" and c.separate_memory_model
    assert c.budget == 40 * raw_image_bytes(32)
    assert c.label == "COMPRESSED_REPLAY[SRGEN]/INPAINTGEN"
    assert cfg(tiny_arch, "REPLAY_HIGH_MEM", "CAE").budget is None
    assert cfg(tiny_arch, "COMPRESSED_REPLAY", "VAE").memory_kind == "LATENT_VAE"
    paired = pair_memory_with_ad("SRGEN", "CAE", c)
    assert paired.memory_role_kind == "SRGEN" and paired.ad_model == "CAE"


def test_config_hash(tiny_arch):
    a = cfg(tiny_arch)
    assert a.config_hash() == StrategyConfig.from_dict(a.to_dict()).config_hash()
    assert a.config_hash() != dataclasses.replace(a, seed=1).config_hash()
    assert a.config_hash() != dataclasses.replace(a, arch=dataclasses.replace(tiny_arch, lr=1e-3)).config_hash()
    with pytest.raises(ConfigurationError):
        StrategyConfig.from_dict({**a.to_dict(), "colour": "red"})


def test_derive_seed():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, 1, 2), derive_seed(0, 2, 1), derive_seed(1, 1, 2)}) == 3


@pytest.mark.parametrize("strategy,ad,mem", CELLS)
def test_every_cell_runs(tiny_arch, tiny_stream, strategy, ad, mem):
    c = cfg(tiny_arch, strategy, ad, mem)
    r = run_stream(c, tiny_stream)
    T = tiny_stream.total_tasks
    if strategy == "SINGLE_MODEL":
        assert r.scores.is_diagonal_only() and not np.isnan(r.scores.diagonal()).any()
    else:
        assert all(r.scores.row_complete(i) for i in range(1, T + 1))
        assert all(r.fids.row_complete(i) for i in range(1, T + 1))
    assert np.nanmin(r.scores.values) >= 0 and np.nanmax(r.scores.values) <= 1
    if c.budget is not None:
        assert max(r.bytes_used) <= c.budget
    assert len(r.seconds_per_task) == T


def test_replay_low_keeps_balanced_memory(tiny_arch, tiny_stream):
    c = cfg(tiny_arch, "REPLAY_LOW_MEM", "CAE", memory_images=3)
    pipe, *_ = run_stream(c, tiny_stream)
    assert pipe.memory.per_task_counts() == {1: 1, 2: 1, 3: 1}


def test_generative_memory_uses_no_bytes(tiny_arch, tiny_stream):
    r = run_stream(cfg(tiny_arch, "GENERATIVE_REPLAY", "VAE"), tiny_stream)
    assert r.bytes_used == [0, 0, 0]
    assert r.pipeline.snapshot.task_index == 3


def test_stream_size_must_match(tiny_arch):
    with pytest.raises(ConfigurationError):
        run_stream(cfg(tiny_arch), generate_synthetic_stream(2, 2, 64))


class Recorder(Observer):
    wants_digests = True

    def __init__(self):
        self.batches = []

    def on_batch(self, info):
        if info["task_id"] == 2:
            self.batches.append(info)


def test_scale_targets_come_from_previous_snapshot(tiny_arch, tiny_stream):
    c = cfg(tiny_arch, "COMPRESSED_REPLAY", "SRGEN", memory_images=1)
    rec = Recorder()
    run_stream(c, tiny_stream, observer=rec)
    assert rec.batches
    for info in rec.batches:
        snap = info["snapshot"]
        assert snap.task_index == 1
        assert torch.equal(info["replay_images"], reconstruct_with(snap, info["replay_inputs"]))
        assert info["live_digest_before"] == info["live_digest_after"]


def test_scale_replay_without_snapshot_is_refused(tiny_arch, tiny_stream):
    c = cfg(tiny_arch, "COMPRESSED_REPLAY", "SRGEN")
    pipe = init_pipeline(c)
    pipe.memory.store(tiny_stream[1].train_array, 1)
    with pytest.raises(ProtocolError):
        replay_batch(pipe, 2, 2, np.random.default_rng(0))
    with pytest.raises(ProtocolError):
        scale_train_task(pipe, tiny_stream[2])
    with pytest.raises(ConfigurationError):
        degenerative_scale_train_task(pipe, tiny_stream[2])
    with pytest.raises(ConfigurationError):
        scale_train_task(init_pipeline(cfg(tiny_arch)), tiny_stream[1])


def test_degenerative_recompresses_old_items(tiny_arch, tiny_stream):
    c = cfg(tiny_arch, "DEGENERATIVE_COMPRESSED_REPLAY", "SRGEN", memory_images=1)
    pipe = init_pipeline(c)
    degenerative_scale_train_task(pipe, tiny_stream[1])
    first = {item.payload.tobytes() for item in pipe.memory.items}
    degenerative_scale_train_task(pipe, tiny_stream[2])
    old = {item.payload.tobytes() for item in pipe.memory.items if item.source_task == 1}
    assert isinstance(pipe.memory, ScaleMemory)
    assert old and not old <= first


def test_runs_are_deterministic(tiny_arch, tiny_stream):
    c = cfg(tiny_arch, "COMPRESSED_REPLAY", "INPAINTGEN", "SRGEN")
    a = run_stream(c, tiny_stream)
    b = run_stream(c, tiny_stream)
    assert a.scores.to_csv() == b.scores.to_csv()
    assert a.fids.to_csv() == b.fids.to_csv()
    assert parameters_digest(a.pipeline.ad_model) == parameters_digest(b.pipeline.ad_model)


@pytest.mark.parametrize("strategy,ad,mem", [("COMPRESSED_REPLAY", "VAE", None), ("DEGENERATIVE_COMPRESSED_REPLAY", "SRGEN", None), ("SINGLE_MODEL", "CAE", None)])
def test_resume_matches_uninterrupted(tiny_arch, tiny_stream, tmp_path, strategy, ad, mem):
    c = cfg(tiny_arch, strategy, ad, mem)
    full = run_stream(c, tiny_stream)
    with pytest.raises(Interrupted):
        run_stream(c, tiny_stream, checkpoint_dir=tmp_path / "ck", stop_after=1)
    resumed = run_stream(c, tiny_stream, checkpoint_dir=tmp_path / "ck")
    assert resumed.scores.to_csv() == full.scores.to_csv()
    assert resumed.fids.to_csv() == full.fids.to_csv()
    other = dataclasses.replace(c, seed=5)
    with pytest.raises(ConfigurationError):
        run_stream(other, tiny_stream, checkpoint_dir=tmp_path / "ck")


def test_strategy_list():
    assert len(STRATEGIES) == 7
