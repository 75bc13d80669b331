"""Run a small grid through the experiment harness and print the ranked report.

Run:  python demos/04_sweep_and_report.py [workdir]

Every cell of (depth, channels, label fraction, seed) becomes one run record
appended to a JSONL log; missing checkpoints are pretrained on demand. The
report ranks cells by F1 and pivots median F1 by mode and label fraction.
Setting MSAS_WORKERS runs cells in parallel processes.
"""

import os
import sys
import tempfile

from mocosas.downstream import SupervisedConfig
from mocosas.harness import SweepSpec, emit_report, read_log, run_sweep, select_best
from mocosas.moco import PretrainConfig
from mocosas.sonargen import SceneConfig, generate_dataset

work = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="mocosas_sweep_")
data = os.path.join(work, "data")
if not os.path.exists(os.path.join(data, "manifest.jsonl")):
    generate_dataset(SceneConfig(), {"pretrain": 256, "train": 120, "test": 60}, data, seed=5)

spec = SweepSpec(
    data_dir=data,
    label_fractions=[0.1, 1.0],
    channels=[1, 2],
    depths=[18],
    seeds=[0, 1],
    mode="both",
    checkpoint_dir=os.path.join(work, "ckpts"),
    pretrain_missing=True,
    pretrain=PretrainConfig(max_epochs=2, warmup_epochs=0),
    supervised=SupervisedConfig(epochs=2, min_steps=10),
)
log_path = os.path.join(work, "runs.jsonl")
records = run_sweep(spec, log_path=log_path)
report = emit_report(records, os.path.join(work, "report.csv"))
print(report.text)

best = select_best(read_log(log_path))
print(f"best run {best.run_id}: {best.mode} depth {best.config['depth']} channels {best.config['channels']} F1 {best.f1:.3f}")
print("artifacts in", work)
