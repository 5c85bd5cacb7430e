# How much a compressed memory holds, and what comes back out of it.
import warnings

import numpy as np
import torch

from clad.data import generate_synthetic_stream, raw_image_bytes
from clad.memory import ModelContext, default_budget, make_memory
from clad.models import ArchConfig, build_model
from clad.strategies import blur_batch

torch.manual_seed(0)
size = 64
budget = default_budget(size, memory_images=4)  # room for four raw images
stream = generate_synthetic_stream(3, 24, size, seed=0)

raw = make_memory("RAW_LOW", size, budget)
scale = make_memory("SCALE", size, budget)
for task in stream:
    raw.store(task.train_array, task.task_id)
    scale.store(task.train_array, task.task_id)

print("budget bytes", budget, "=", budget // raw_image_bytes(size), "raw images")
print("raw memory  ", raw.per_task_counts(), "factor", raw.compression_factor())
print("SCALE memory", scale.per_task_counts(), "factor", scale.compression_factor())

# A SCALE item is an 8x8 thumbnail. Replay upscales it and lets a frozen
# super-resolution snapshot restore detail. Train a small SR model on task 1
# for a few hundred steps to see the effect.
arch = ArchConfig(working_size=size, base_channels=16, gen_channels=16, disc_channels=16)
sr = build_model("SRGEN", arch)
clean = torch.from_numpy(stream[1].train_array.transpose(0, 3, 1, 2) / 255.0).float()
blurred = blur_batch(clean, arch.low_size)
for step in range(300):
    idx = torch.randint(0, len(clean), (8,))
    sr.train_step(blurred[idx], clean[idx])

snap = sr.snapshot(task_index=1)
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    inputs, restored = scale.retrieve_pairs(4, ModelContext(snapshot=snap), np.random.default_rng(0))
print("replayed inputs", tuple(inputs.shape), "targets", tuple(restored.shape))
print("mean |target - input|", float((restored - inputs).abs().mean()))

# the same budget with CAE codes holds 6x more than raw, VAE codes 192x
cae = build_model("CAE", ArchConfig())
with warnings.catch_warnings(record=True) as caught:
    warnings.simplefilter("always")
    vae_mem = make_memory("LATENT_VAE", 256, default_budget(256), latent_shape=(256,))
    print("VAE latent factor", vae_mem.compression_factor(), "|", caught[0].message if caught else "")
print("CAE latent factor", make_memory("LATENT_CAE", 256, default_budget(256), latent_shape=cae.latent_shape).compression_factor())
