# %% [markdown]
# Checkpoint files and the command-line tool
#
# A benchmark directory is written with the ``generate-synthetic`` command,
# recovered with ``recover`` and scored with ``evaluate``. The same entry
# point is installed as the ``detuner`` console script.

# %%
import json
import tempfile
from pathlib import Path

from detuner import cli
from detuner.checkpoint import read_checkpoint

root = Path(tempfile.mkdtemp())
cli.main(["generate-synthetic", "--output", str(root / "bench"), "--m-layers", "3", "--seed", "7"])
print(sorted(p.name for p in (root / "bench").iterdir()))

# %% [markdown]
# Frozen layers are identical in every checkpoint and are skipped; only the
# fine-tuned ones are recovered. Ranks are inferred when not given.

# %%
cli.main(["recover", "--inputs", str(root / "bench"), "--output", str(root / "out"), "--jobs", "1"])
report = json.loads((root / "out" / "report.json").read_text())
print(report["fine_tuned_layers"], report["ranks"]["layer_000"], round(report["w_error"], 2))

# %%
manifest, mats = read_checkpoint(root / "out" / "recovered.lwra")
print(manifest.role, manifest.layer_ids, mats["layer_000"].dtype)

# %%
cli.main(["evaluate", "--recovered", str(root / "out" / "recovered.lwra"),
          "--ground-truth", str(root / "bench" / "ground_truth.lwra")])
