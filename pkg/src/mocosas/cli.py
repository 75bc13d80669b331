"""Command-line front end: ``python -m mocosas <command> ...``.

Config files are YAML or JSON mappings whose sections are named after the
config types they fill:

    scene:      SceneConfig fields        (gen)
    detector:   DetectorConfig fields     (gen, chip)
    counts:     {pretrain, train, test}   (gen)
    pretrain:   PretrainConfig fields, with nested backbone/augment (pretrain)
    supervised: SupervisedConfig fields   (supervised)
    svm:        SvmConfig fields          (svm)

A sweep spec file holds SweepSpec fields at the top level.
"""

import argparse
import glob
import json
import logging
import os
import sys
from dataclasses import replace

from .backbone import BackboneConfig
from .chipper import DetectorConfig, chip_scene
from .config import ConfigError, from_dict, load_file
from .downstream import SupervisedConfig, extract_features
from .harness import RunConfig, StageError, SvmConfig, SweepSpec, emit_report, read_log, run_experiment, run_svm_on_features, run_sweep, select_best
from .io import DatasetManifest, ManifestEntry, read_manifest, write_features, write_snippet
from .moco import PretrainConfig, load_query_backbone, pretrain, save_checkpoint, write_history
from .sonargen import SceneConfig, chip_label, desk_detector_config, generate_dataset, generate_scene, load_scene, save_scene

log = logging.getLogger("mocosas")


def _section(cfg: dict, name: str, cls, default=None):
    if name in cfg:
        return from_dict(cls, cfg[name])
    return default if default is not None else cls()


def _config(path) -> dict:
    return load_file(path) if path else {}


def cmd_gen(args) -> int:
    cfg = _config(args.config)
    scene = _section(cfg, "scene", SceneConfig)
    det = _section(cfg, "detector", DetectorConfig, desk_detector_config())
    if args.scenes:
        os.makedirs(args.out, exist_ok=True)
        for i in range(args.scenes):
            save_scene(os.path.join(args.out, f"scene_{i:05d}.npz"), generate_scene(replace(scene, seed=args.seed ^ i)))
        print(f"wrote {args.scenes} scenes to {args.out}")
        return 0
    counts = {"pretrain": 4000, "train": 600, "test": 200}
    counts.update(cfg.get("counts", {}))
    m = generate_dataset(scene, counts, args.out, seed=args.seed, detector_config=det)
    print(json.dumps(m.counts()))
    return 0


def cmd_chip(args) -> int:
    cfg = _config(args.config)
    det = _section(cfg, "detector", DetectorConfig, desk_detector_config())
    split = args.split
    paths = sorted(glob.glob(os.path.join(args.inp, "*.npz")))
    if not paths:
        raise FileNotFoundError(f"no scene .npz files under {args.inp}")
    os.makedirs(os.path.join(args.out, "snippets"), exist_ok=True)
    manifest = DatasetManifest(root=os.path.abspath(args.out))
    for p in paths:
        scene = load_scene(p)
        stem = os.path.splitext(os.path.basename(p))[0]
        dets, snippets = chip_scene(scene, det)
        for j, (d, snip) in enumerate(zip(dets, snippets)):
            sid = f"{stem}_{j:03d}"
            rel = os.path.join("snippets", sid + ".snip")
            write_snippet(os.path.join(args.out, rel), snip.astype("float32"))
            label = None if split == "pretrain" else chip_label(scene, d, det)
            manifest.entries.append(ManifestEntry(sid, rel, split, label, snip.shape[0]))
    manifest.write(args.out)
    print(f"{len(manifest.entries)} snippets from {len(paths)} scenes")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    pcfg = _section(cfg, "pretrain", PretrainConfig)
    m = read_manifest(args.data)
    x = m.load(m.split("pretrain"), channels=args.channels or pcfg.backbone.in_channels)
    bcfg = replace(pcfg.backbone, in_channels=x.shape[1], input_size=x.shape[-1])
    if args.depth:
        bcfg = replace(bcfg, depth_variant=args.depth)
    pcfg = replace(pcfg, backbone=bcfg)
    res = pretrain(x, pcfg, max_epochs=args.epochs)
    save_checkpoint(args.out, res.state)
    if args.history:
        write_history(args.history, res.history)
    print(f"{len(res.history)} epochs, final loss {res.history[-1].loss:.5f}, early stop: {res.stopped_early}")
    return 0


def cmd_extract(args) -> int:
    bp = load_query_backbone(args.ckpt)
    m = read_manifest(args.data)
    entries = m.split(args.split)
    if not entries:
        raise ValueError(f"split {args.split!r} is empty")
    x = m.load(entries, channels=bp.config.in_channels)
    labels = None if args.split == "pretrain" else [e.label for e in entries]
    fm = extract_features(bp, x, [e.id for e in entries], labels, flip_prob=args.flip_prob, seed=args.seed)
    write_features(args.out, fm.rows, fm.ids, fm.labels)
    print(f"{fm.rows.shape[0]} x {fm.rows.shape[1]} features -> {args.out}")
    return 0


def cmd_svm(args) -> int:
    svm = _section(_config(args.config), "svm", SvmConfig)
    rec = run_svm_on_features(args.features, args.test, args.fraction, args.seed, svm, log_path=args.log)
    print(json.dumps(rec.metrics))
    return 0


def cmd_supervised(args) -> int:
    sup = _section(_config(args.config), "supervised", SupervisedConfig)
    rc = RunConfig(
        mode="supervised",
        data_dir=args.data,
        label_fraction=args.fraction,
        depth=args.depth,
        channels=args.channels,
        seed=args.seed,
        width_multiplier=args.width,
        supervised=sup,
    )
    rec = run_experiment(rc, log_path=args.log)
    print(json.dumps(rec.metrics))
    return 0


def cmd_sweep(args) -> int:
    spec = from_dict(SweepSpec, load_file(args.spec))
    records = run_sweep(spec, log_path=args.log)
    report = emit_report(records, args.report)
    print(report.text)
    return 0 if not report.failures else 3


def cmd_best(args) -> int:
    print(select_best(read_log(args.log)).to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="python -m mocosas", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="generate a synthetic dataset (or raw scenes with --scenes)")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--scenes", type=int, default=0, help="write this many raw scenes instead of a dataset")
    s.set_defaults(fn=cmd_gen)

    s = sub.add_parser("chip", help="detect and cut snippets from raw scene files")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--split", default="pretrain", choices=["pretrain", "train", "test"])
    s.set_defaults(fn=cmd_chip)

    s = sub.add_parser("pretrain", help="contrastive pretraining on the pretrain split")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.add_argument("--epochs", type=int)
    s.add_argument("--channels", type=int, choices=[1, 2])
    s.add_argument("--depth", type=int, choices=[18, 34, 50])
    s.set_defaults(fn=cmd_pretrain)

    s = sub.add_parser("extract", help="frozen-backbone features for one split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True, choices=["pretrain", "train", "test"])
    s.add_argument("--out", required=True)
    s.add_argument("--flip-prob", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_extract)

    s = sub.add_parser("svm", help="train the linear SVM on a label fraction and score the test features")
    s.add_argument("--features", required=True)
    s.add_argument("--test", required=True, help="test-split feature file")
    s.add_argument("--fraction", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_svm)

    s = sub.add_parser("supervised", help="train the randomly initialized baseline")
    s.add_argument("--data", required=True)
    s.add_argument("--fraction", type=float, default=1.0)
    s.add_argument("--depth", type=int, default=18, choices=[18, 34, 50])
    s.add_argument("--channels", type=int, default=1, choices=[1, 2])
    s.add_argument("--width", type=float, default=BackboneConfig().width_multiplier)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--log")
    s.add_argument("--config")
    s.set_defaults(fn=cmd_supervised)

    s = sub.add_parser("sweep", help="run a grid from a spec file and write the ranked report")
    s.add_argument("--spec", required=True)
    s.add_argument("--log", required=True)
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_sweep)

    s = sub.add_parser("best", help="print the highest-F1 record of a run log")
    s.add_argument("--log", required=True)
    s.set_defaults(fn=cmd_best)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, StageError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
