"""
The full pipeline through the command-line interface
====================================================

Generates a synthetic world on disk, writes a YAML config, and drives every
stage through the CLI exactly as a shell user would:

    fairssl pipeline --config run.yaml

Then re-runs with the same seed to show that every artifact checksum in the
run manifest comes out identical.
"""

import json
import tempfile
from pathlib import Path

import yaml

from fairssl.cli import main
from fairssl.synthetic import generate_world

workdir = Path(tempfile.mkdtemp(prefix="fairssl-demo-"))
world = generate_world(seed=77, out_dir=workdir / "world", n_pool=2000,
                       n_curated=150, n_eval=600)

config = {
    "seed": 77,
    "paths": {**world.files, "out_dir": str(workdir / "run1")},
    "trainer": {
        "epochs": 8, "stage_split": 0.75, "batch_size": 32, "base_lr": 1e-3,
        "warmup_epochs": 1, "val_subset_size": 48, "val_topk": 12,
    },
    "model": {"encoder_dims": [32, 16], "projection_dims": [32, 32, 8]},
    "probe": {"train_fraction": 0.5},
}
config_path = workdir / "run.yaml"
config_path.write_text(yaml.safe_dump(config))

print(f"working directory: {workdir}\n")
print("=== fairssl pipeline --config run.yaml ===")
code = main(["pipeline", "--config", str(config_path)])
print(f"exit status {code}\n")

print("=== second run, same seed, different output directory ===")
code = main(["pipeline", "--config", str(config_path), "--out", str(workdir / "run2")])
print(f"exit status {code}\n")

m1 = json.loads((workdir / "run1" / "run_manifest_pipeline.json").read_text())
m2 = json.loads((workdir / "run2" / "run_manifest_pipeline.json").read_text())
identical = m1["artifacts"] == m2["artifacts"]
print(f"artifact checksums identical across runs: {identical}")
print("\nartifacts of run 1:")
for name, digest in sorted(m1["artifacts"].items()):
    print(f"  {name:>24}: {digest[:16]}...")
