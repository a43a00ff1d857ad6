# %% [markdown]
# # The batch pipeline from Python
#
# The ``fmapkit`` command drives the whole pipeline from a JSON manifest:
# cache spectral bases, match pairs, refine, score, train and export learned
# descriptor fields.  Here every step is run through ``main`` in a temporary
# directory; the same argument lists work from a shell.

# %%
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from fmapkit.cli import main
from fmapkit.convert import PointMap, write_pointmap
from fmapkit.mesh import normalize_mesh, save_off
from fmapkit.synthetic import bumpy, icosphere, rotate_about_axis

work = Path(tempfile.mkdtemp(prefix="fmapkit-"))
os.chdir(work)

rng = np.random.default_rng(0)
blob = normalize_mesh(bumpy(icosphere(2), rng))
perm = rng.permutation(blob.n_vertices)
save_off(blob, "blob.off")
save_off(rotate_about_axis(blob.permuted(perm), 0.8), "copy.off")
write_pointmap(PointMap(perm, blob.n_vertices), "copy_gt.p2p")

manifest = {
    "shapes": [{"id": "blob", "path": "blob.off"}, {"id": "copy", "path": "copy.off"}],
    "pairs": [{"source": "blob", "target": "copy", "gt": "copy_gt.p2p"}],
}
Path("manifest.json").write_text(json.dumps(manifest, indent=2))

# %% [markdown]
# ## Spectral cache
# The second call finds both bases already cached.

# %%
main(["precompute", "--manifest", "manifest.json"])
main(["precompute", "--manifest", "manifest.json"])

# %% [markdown]
# ## Match, refine, evaluate

# %%
main(["match", "blob-copy", "--manifest", "manifest.json", "--out", "maps"])
main(["refine", "blob-copy", "--manifest", "manifest.json", "--method", "zoomout",
      "--fmap", "maps/blob-copy.fmap", "--k-final", "60", "--out", "maps"])
main(["eval", "--pred", "maps/blob-copy.zoomout.p2p", "--gt", "copy_gt.p2p", "--mesh", "blob.off", "--out", "report"])
print(Path("report/report.json").read_text()[:200])

# %% [markdown]
# ## Training and descriptor export
# A few steps of a reduced network, then one output channel written as a
# per-vertex field together with its low-pass reconstruction in the basis.

# %%
config = {
    "k": 20,
    "extractor": {"block_dims": [8, 16, 16], "up_dims": [16, 8], "kernel_size": 7, "base_cell": 0.1},
}
Path("config.json").write_text(json.dumps(config))
main(["train", "--manifest", "manifest.json", "--config", "config.json", "--steps", "5", "--out", "train"])
print(Path("train/train_log.csv").read_text())
main(["export-desc", "blob", "--manifest", "manifest.json", "--config", "config.json",
      "--checkpoint", "train/checkpoint.kpw", "--channels", "0", "--out", "desc"])
print(sorted(p.name for p in Path("desc").iterdir()))
