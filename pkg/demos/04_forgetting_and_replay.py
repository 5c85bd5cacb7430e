# Fine-tuning forgets, replay remembers: a three-task run with a small VAE.
#
# Takes about a minute on one CPU core.
import warnings

import numpy as np
import torch

from clad.data import generate_synthetic_stream
from clad.experiment import bundle_from_result, render_table, summary_table
from clad.metrics import average_forgetting, average_score
from clad.models import ArchConfig
from clad.strategies import StrategyConfig, run_stream

torch.set_num_threads(1)
warnings.simplefilter("ignore")

stream = generate_synthetic_stream(3, 24, 64, seed=0, test_per_task=24)
arch = ArchConfig(working_size=64, base_channels=16, latent_channels=64, latent_dim=64, lr=1e-3, betas=(0.9, 0.999))

bundles = []
for strategy in ("SINGLE_MODEL", "FINE_TUNING", "REPLAY_LOW_MEM"):
    cfg = StrategyConfig(strategy, "VAE", memory_images=6, epochs=30, arch=arch)
    result = run_stream(cfg, stream)
    print(strategy)
    print(result.scores.to_csv())
    if strategy != "SINGLE_MODEL":
        print("S_T", round(average_score(result.scores), 3), "F_T", round(average_forgetting(result.scores), 3))
    bundles.append(bundle_from_result(result, cfg, stream.source))

# the summary the experiment runner writes: f1 with forgetting in brackets
header, rows = summary_table(bundles)
print(render_table(header, rows))
