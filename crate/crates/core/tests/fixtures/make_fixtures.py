"""Regenerates the NPY fixtures with numpy. Run from this directory."""
import numpy as np

rng = np.random.default_rng(20240611)
np.save("random_64.npy", rng.standard_normal((64, 64, 64)).astype("<f4"))
np.save("small_4d.npy", np.arange(48, dtype="<f4").reshape(2, 3, 4, 2) / 7)
np.save("labels_3.npy", (np.arange(27, dtype=np.uint8) % 3).reshape(3, 3, 3))
