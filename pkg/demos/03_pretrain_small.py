"""Contrastive pretraining on a small synthetic dataset, then a linear probe.

Run:  python demos/03_pretrain_small.py [workdir]

This is the whole pipeline at toy scale: generate chips, pretrain the
query/key encoders with a feature queue, freeze the query backbone, extract
pooled features and fit a linear SVM on a fraction of the labels. The default
sizes finish in a few minutes on one core; the numbers are far from what the
full 4000-snippet run reaches.
"""

import math
import os
import sys
import tempfile

from mocosas.downstream import extract_features
from mocosas.harness import SvmConfig, evaluate_svm
from mocosas.io import read_manifest
from mocosas.moco import PretrainConfig, load_query_backbone, pretrain, save_checkpoint
from mocosas.sonargen import SceneConfig, generate_dataset

work = sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="mocosas_demo_")
data = os.path.join(work, "data")
if not os.path.exists(os.path.join(data, "manifest.jsonl")):
    generate_dataset(SceneConfig(), {"pretrain": 512, "train": 200, "test": 100}, data, seed=3)
m = read_manifest(data)
print("snippets per split:", m.counts())

cfg = PretrainConfig(max_epochs=4, warmup_epochs=1)
res = pretrain(m.load(m.split("pretrain"), channels=1), cfg)
# Early epochs contrast against a partly filled queue, so the loss can rise
# while the queue fills; chance level with a full queue is ln(K + 1).
print(f"chance level with a full queue of {cfg.queue_size}: {math.log(cfg.queue_size + 1):.4f}")
for r in res.history:
    print(f"epoch {r.epoch}: loss {r.loss:.4f}, lr {r.lr:.2e}")
ckpt = os.path.join(work, "query.msas")
save_checkpoint(ckpt, res.state)

bp = load_query_backbone(ckpt)
feats = {}
for split in ("train", "test"):
    entries = m.split(split)
    feats[split] = extract_features(bp, m.load(entries, channels=1), [e.id for e in entries], [e.label for e in entries])
print("feature matrix:", feats["train"].rows.shape)

for frac in (0.05, 1.0):
    out = evaluate_svm(feats["train"], feats["test"], frac, seed=0, svm=SvmConfig())
    print(f"{frac:5.0%} labels: precision {out['precision']:.3f} recall {out['recall']:.3f} F1 {out['f1']:.3f} ({out['n_train']} training rows)")
