# A first look at the synthetic task stream.
#
# Each task is one texture family in its own palette. Test images carry a
# rectangular defect drawn in the task's colours, and the mask marks it.
from pathlib import Path

import numpy as np
from PIL import Image

from clad.data import blur_roundtrip, export_stream, generate_synthetic_stream

out = Path("demo_out")
out.mkdir(exist_ok=True)

stream = generate_synthetic_stream(num_tasks=3, images_per_task=24, working_size=64, seed=0, test_per_task=8)
for task in stream:
    print(task.task_id, task.name, task.train_array.shape, "anomalous test images:", int(task.test_masks.any(axis=(1, 2)).sum()))

# one row per task: four training images, a defective test image, its mask,
# and what the super-resolution model gets to see (downscaled 8x and back)
rows = []
for task in stream:
    test_img, mask = task.test_images[0]
    mask_rgb = np.repeat(mask[..., None] * 255, 3, axis=-1).astype(np.uint8)
    rows.append(np.concatenate([*task.train_array[:4], test_img, mask_rgb, blur_roundtrip(test_img, 8)], axis=1))
Image.fromarray(np.concatenate(rows)).resize((7 * 128, 3 * 128), Image.NEAREST).save(out / "stream.png")
print("wrote", out / "stream.png")

# the same bytes come back from disk
export_stream(stream, out / "stream")
print("digest", stream.digest()[:16])
