import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from clad.cli import main
from clad.experiment import (
    DATA_ROOT_ENV,
    DatasetSpec,
    ExperimentConfig,
    ExperimentError,
    ResultBundle,
    cell_dir,
    emit_plot_data,
    emit_tables,
    format_cell,
    load_bundles,
    load_config,
    run_cell,
    run_experiment,
    summary_table,
)
from clad.metrics import ScoreMatrix, average_forgetting, average_score
from clad.strategies import Interrupted, StrategyConfig

TINY = {
    "name": "tiny",
    "epochs": 1,
    "dataset": {"kind": "synthetic", "num_tasks": 3, "images_per_task": 4, "test_per_task": 4},
    "model": {
        "working_size": 32,
        "base_channels": 8,
        "latent_channels": 8,
        "latent_dim": 8,
        "gen_channels": 8,
        "disc_channels": 8,
        "batch_size": 4,
    },
    "defaults": {"memory_images": 2},
    "grid": [
        {"strategy": "FINE_TUNING", "ad_model": "VAE"},
        {"strategy": "REPLAY_LOW_MEM", "ad_model": "VAE"},
    ],
}


def write_config(path, data=TINY):
    path.write_text(yaml.safe_dump(data))
    return path


def bundle(strategy, model, rows, dataset=None, seed=0):
    T = len(rows)
    m = ScoreMatrix(T)
    for i, row in enumerate(rows, 1):
        for j, v in enumerate(row, 1):
            m[i, j] = v
    cell = StrategyConfig(strategy, model, seed=seed, arch={"working_size": 32})
    return ResultBundle(cell, dataset or {"kind": "synthetic"}, m, m.copy())


def test_config_parsing(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.yaml"))
    assert len(cfg.grid) == 2 and cfg.arch.working_size == 32
    cells = cfg.strategy_configs()
    assert [c.label for c in cells] == ["FINE_TUNING/VAE", "REPLAY_LOW_MEM/VAE"]
    assert cells[1].memory_images == 2 and cells[0].epochs == 1


def test_grid_expands_model_lists():
    cfg = ExperimentConfig.from_dict({**TINY, "grid": [{"strategy": "FINE_TUNING", "ad_model": ["CAE", "VAE"]}]})
    assert [c["ad_model"] for c in cfg.grid] == ["CAE", "VAE"]


def test_config_errors(tmp_path):
    with pytest.raises(ExperimentError):
        ExperimentConfig.from_dict({**TINY, "colour": 1})
    with pytest.raises(ExperimentError):
        ExperimentConfig.from_dict({**TINY, "model": {"widht": 3}})
    bad = ExperimentConfig.from_dict({**TINY, "grid": [{"strategy": "GENERATIVE_REPLAY", "ad_model": "CAE"}]})
    assert len(bad.validate()) == 1
    with pytest.raises(ExperimentError):
        bad.strategy_configs()
    (tmp_path / "x.yaml").write_text("- just\n- a list\n")
    with pytest.raises(ExperimentError):
        load_config(tmp_path / "x.yaml")


def test_config_hash_stability():
    a = ExperimentConfig.from_dict(TINY)
    reordered = ExperimentConfig.from_dict(dict(reversed(list(TINY.items()))))
    assert a.config_hash() == reordered.config_hash()
    assert a.config_hash() == a.with_overrides(out="/elsewhere").config_hash()
    assert a.config_hash() != a.with_overrides(seed=1).config_hash()
    assert a.config_hash() != a.with_overrides(epochs=30).config_hash()


def test_dataset_root_from_environment(monkeypatch, tmp_path):
    ds = DatasetSpec(kind="mvtec", root="/nowhere", tasks=["bottle"])
    assert ds.resolved_root() == "/nowhere"
    monkeypatch.setenv(DATA_ROOT_ENV, str(tmp_path))
    assert ds.resolved_root() == str(tmp_path)
    monkeypatch.delenv(DATA_ROOT_ENV)
    with pytest.raises(ExperimentError):
        DatasetSpec(kind="mvtec").build(32)


def test_format_cell():
    assert format_cell(0.34, 0.1327) == "0.34 (13.27%)"
    assert format_cell(0.36, None, show_forgetting=False) == "0.36 (-)"
    assert format_cell(None, None) == "-"


def test_tables():
    bundles = [
        bundle("SINGLE_MODEL", "VAE", [[0.3], [np.nan, 0.4]]),
        bundle("REPLAY_LOW_MEM", "VAE", [[0.4], [0.2, 0.5]]),
        bundle("REPLAY_LOW_MEM", "CAE", [[0.4], [0.4, 0.5]]),
    ]
    header, rows = summary_table(bundles)
    assert header == ["Strategy", "CAE", "VAE"]
    assert rows[0] == ["Single Model", "", "0.35 (-)"]
    assert rows[1] == ["Replay Low Mem", "0.45 (0.00%)", "0.35 (50.00%)"]
    assert summary_table([]) == (["Strategy"], [])


def test_tables_refuse_mixed_datasets():
    a = bundle("FINE_TUNING", "VAE", [[0.4], [0.2, 0.5]], {"kind": "synthetic", "seed": 0})
    b = bundle("FINE_TUNING", "CAE", [[0.4], [0.2, 0.5]], {"kind": "synthetic", "seed": 1})
    with pytest.raises(ExperimentError):
        summary_table([a, b])


def test_seed_repeats_use_median():
    rows = [[[0.4], [0.2, 0.5]], [[0.4], [0.4, 0.5]], [[0.4], [0.3, 0.1]]]
    bundles = [bundle("FINE_TUNING", "VAE", r, seed=k) for k, r in enumerate(rows)]
    _, table = summary_table(bundles)
    assert table[0][1] == "0.35 (25.00%)"


def test_emitted_files(tmp_path):
    bundles = [bundle("FINE_TUNING", "VAE", [[0.4], [0.2, 0.5], [0.1, 0.3, 0.6]])]
    md, fid_md = emit_tables(bundles, tmp_path, "markdown")
    assert md.read_text().startswith("| Strategy | VAE |")
    c, _ = emit_tables(bundles, tmp_path, "csv")
    assert list(csv.reader(c.open()))[1][0] == "Fine-Tuning"
    f1_path, _ = emit_plot_data(bundles, tmp_path)
    rows = list(csv.DictReader(f1_path.open()))
    assert [int(r["task"]) for r in rows] == [1, 2, 3]
    for r in rows:
        assert float(r["f1"]) == average_score(bundles[0].scores, int(r["task"]))
    empty = emit_tables([], tmp_path / "empty")[0].read_text()
    assert empty.splitlines()[0] == "| Strategy |"


def test_bundle_roundtrip_and_summaries(tmp_path):
    b = bundle("FINE_TUNING", "VAE", [[0.4], [0.2, 0.5]])
    b.save(tmp_path / "b")
    back = ResultBundle.load(tmp_path / "b")
    assert back.summaries() == b.summaries()
    stored = json.loads((tmp_path / "b" / "bundle.json").read_text())
    recomputed = average_forgetting(ScoreMatrix.from_csv((tmp_path / "b" / "scores.csv").read_text()))
    assert stored["summaries"]["F_T"] == recomputed == 0.5


def test_run_resume_and_cli(tmp_path, capsys):
    cfg = ExperimentConfig.from_dict(TINY)
    out = tmp_path / "run"
    bundles = run_experiment(cfg, out)
    assert len(bundles) == 2
    assert (out / "manifest.json").exists() and (out / "config.yaml").exists()
    assert len(load_bundles(out)) == 2

    again = run_experiment(cfg, out)
    assert [b.scores.to_csv() for b in again] == [b.scores.to_csv() for b in bundles]
    with pytest.raises(ExperimentError):
        run_experiment(cfg.with_overrides(seed=3), out)

    fresh = tmp_path / "fresh"
    cell = cfg.strategy_configs()[1]
    with pytest.raises(Interrupted):
        run_cell(cell, cfg.dataset, cell_dir(fresh, 1, cell), stop_after=2)
    resumed = run_experiment(cfg, fresh)
    assert resumed[1].scores.to_csv() == bundles[1].scores.to_csv()

    assert main(["tables", "--out", str(out), "--format", "csv"]) == 0
    assert "Fine-Tuning" in capsys.readouterr().out
    assert main(["plots", "--out", str(out)]) == 0
    assert (out / "plots" / "series_f1.csv").exists()
    assert main(["resume", "--out", str(out)]) == 0


def test_cli_validate_and_errors(tmp_path, capsys):
    good = write_config(tmp_path / "good.yaml")
    assert main(["validate", "--config", str(good)]) == 0
    assert "FINE_TUNING/VAE" in capsys.readouterr().out
    bad = write_config(tmp_path / "bad.yaml", {**TINY, "grid": [{"strategy": "FINE_TUNING", "ad_model": "GAN"}]})
    assert main(["validate", "--config", str(bad)]) == 2
    assert "grid[0]" in capsys.readouterr().err
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert main(["resume", "--out", str(tmp_path / "missing")]) == 2
    with pytest.raises(SystemExit):
        main(["run", "--config", str(good), "--epochs", "7"])


def test_cli_run_with_overrides(tmp_path):
    cfg_path = write_config(tmp_path / "c.yaml", {**TINY, "grid": TINY["grid"][:1]})
    out = tmp_path / "o"
    assert main(["run", "--config", str(cfg_path), "--out", str(out), "--seed", "4", "--parallel", "2"]) == 0
    (b,) = load_bundles(out)
    assert b.seed == 4
    assert (out / "tables" / "table_f1.md").exists()


def test_parallel_matches_sequential(tmp_path):
    cfg = ExperimentConfig.from_dict(TINY)
    seq = run_experiment(cfg, tmp_path / "a")
    par = run_experiment(cfg, tmp_path / "b", parallel=2)
    assert [b.scores.to_csv() for b in seq] == [b.scores.to_csv() for b in par]


@pytest.mark.parametrize("path", sorted((Path(__file__).parent.parent / "configs").glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = load_config(path)
    assert cfg.validate() == []
    assert cfg.strategy_configs()
