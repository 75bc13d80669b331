"""Experiment orchestration: single runs, the label-fraction/depth/channel grid, the run log and reports.

A run is described by a :class:`RunConfig` and produces one :class:`RunRecord`,
appended as a JSON line to the run log. Records are never rewritten; a sweep
that hits a failing cell records the failure and moves on.
"""

import csv
import hashlib
import io
import json
import logging
import os
import statistics
import time
import uuid
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence

import numpy as np

from .backbone import BackboneConfig
from .config import from_dict, to_dict
from .downstream import (
    FeatureMatrix,
    SupervisedConfig,
    confusion,
    extract_features,
    metrics,
    stratified_sample,
    svm_predict,
    svm_train,
    train_supervised,
)
from .io import read_features, read_manifest
from .moco import PretrainConfig, load_query_backbone, pretrain, save_checkpoint, write_history

log = logging.getLogger(__name__)

MODES = ("ssl", "supervised")
REPORT_COLUMNS = ["run_id", "mode", "backbone", "label_pct", "channels", "seed", "precision", "recall", "f1", "wall_seconds"]


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and the original exception is chained."""

    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        super().__init__(f"{stage}: {type(exc).__name__}: {exc}")


@dataclass
class SvmConfig:
    C: float = 1.0
    tolerance: float = 1e-6
    max_iter: int = 100_000
    standardize: bool = True


@dataclass
class RunConfig:
    mode: str = "ssl"
    data_dir: str = ""
    checkpoint: Optional[str] = None
    label_fraction: float = 1.0
    channels: int = 1
    depth: int = 18
    seed: int = 0
    width_multiplier: float = 0.25
    # seed of the flip augmentation applied when extracting training features;
    # kept apart from ``seed`` so that seeds vary only the labeled subset and SVM
    feature_seed: int = 0
    train_flip_prob: float = 0.5
    svm: SvmConfig = field(default_factory=SvmConfig)
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)
    tags: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0 < self.label_fraction <= 1:
            raise ValueError(f"label_fraction must lie in (0, 1], got {self.label_fraction}")
        if self.channels not in (1, 2):
            raise ValueError(f"channels must be 1 or 2, got {self.channels}")
        if self.depth not in (18, 34, 50):
            raise ValueError(f"depth must be 18, 34 or 50, got {self.depth}")


@dataclass
class RunRecord:
    run_id: str
    mode: str
    config: dict
    config_hash: str
    provenance: dict
    metrics: dict
    wall_seconds: float
    started_at: str
    finished_at: str
    status: str = "ok"
    error: Optional[str] = None

    @property
    def f1(self) -> float:
        v = self.metrics.get("f1") if self.metrics else None
        return float(v) if v is not None else float("nan")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        return cls(**json.loads(line))

    def run_config(self) -> RunConfig:
        return from_dict(RunConfig, self.config)


# ---------------------------------------------------------------- hashing and the run log


_DIGESTS: Dict[tuple, str] = {}


def file_digest(path) -> str:
    """sha256 of a file's bytes, memoized on (path, size, mtime)."""
    st = os.stat(path)
    key = (os.path.abspath(path), st.st_size, st.st_mtime_ns)
    if key not in _DIGESTS:
        h = hashlib.sha256()
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
        _DIGESTS[key] = h.hexdigest()
    return _DIGESTS[key]


def content_hash(config: dict, inputs: Sequence[str] = ()) -> str:
    """Hash of the canonical config JSON together with the contents of its input files."""
    h = hashlib.sha256(json.dumps(config, sort_keys=True).encode())
    for p in inputs:
        h.update(file_digest(p).encode())
    return h.hexdigest()


def append_record(path, record: RunRecord) -> None:
    """Append one JSON line; the file is only ever opened for appending."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "a") as fh:
        fh.write(record.to_json() + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def read_log(path) -> List[RunRecord]:
    if not os.path.exists(path):
        return []
    with open(path) as fh:
        return [RunRecord.from_json(line) for line in fh if line.strip()]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


# ---------------------------------------------------------------- single runs


class RunCache:
    """Per-process memo of loaded splits and extracted features, so grid cells share work."""

    def __init__(self):
        self.snippets: Dict[tuple, tuple] = {}
        self.features: Dict[tuple, FeatureMatrix] = {}


def _load_split(data_dir: str, split: str, channels: int, cache: RunCache):
    manifest = read_manifest(data_dir)
    key = (os.path.abspath(data_dir), file_digest(os.path.join(data_dir, "manifest.jsonl")), split, channels)
    if key not in cache.snippets:
        entries = manifest.split(split)
        if not entries:
            raise ValueError(f"split {split!r} is empty in {data_dir}")
        labels = np.array([e.label for e in entries], dtype=np.int64) if split != "pretrain" else None
        cache.snippets[key] = (manifest.load(entries, channels=channels), [e.id for e in entries], labels)
    return cache.snippets[key]


def _features(config: RunConfig, split: str, cache: RunCache) -> FeatureMatrix:
    flip = config.train_flip_prob if split == "train" else 0.0
    key = (file_digest(config.checkpoint), os.path.abspath(config.data_dir), split, config.channels, flip, config.feature_seed)
    if key not in cache.features:
        bp = load_query_backbone(config.checkpoint)
        if bp.config.depth_variant != config.depth or bp.config.in_channels != config.channels:
            raise ValueError(
                f"checkpoint is depth {bp.config.depth_variant} / {bp.config.in_channels} channels, "
                f"run wants depth {config.depth} / {config.channels} channels"
            )
        x, ids, labels = _load_split(config.data_dir, split, config.channels, cache)
        cache.features[key] = extract_features(bp, x, ids, labels, flip_prob=flip, seed=config.feature_seed)
    return cache.features[key]


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def evaluate_svm(train: FeatureMatrix, test: FeatureMatrix, fraction: float, seed: int, svm: SvmConfig) -> dict:
    """Fit the SVM on a stratified ``fraction`` of ``train`` and score it on ``test``."""
    idx = _stage("sample", stratified_sample, train.labels, fraction, seed)
    model = _stage(
        "svm_train",
        svm_train,
        train.subset(idx),
        C=svm.C,
        tolerance=svm.tolerance,
        max_iter=svm.max_iter,
        seed=seed,
        standardize=svm.standardize,
    )
    pred = _stage("evaluate", svm_predict, model, test.rows)
    out = metrics(confusion(test.labels, pred))
    out["n_train"] = int(len(idx))
    out["n_test"] = int(len(test.ids))
    out["svm_sweeps"] = int(model.sweeps)
    return out


def _record(config_dict, inputs, provenance, mode, started, t0, result=None, error=None) -> RunRecord:
    chash = content_hash(config_dict, inputs)
    return RunRecord(
        run_id=f"{chash[:12]}-{uuid.uuid4().hex[:8]}",
        mode=mode,
        config=config_dict,
        config_hash=chash,
        provenance=provenance,
        metrics=result or {},
        wall_seconds=time.perf_counter() - t0,
        started_at=started,
        finished_at=_now(),
        status="ok" if error is None else "failed",
        error=error,
    )


def _inputs(config: RunConfig) -> List[str]:
    out = []
    manifest = os.path.join(config.data_dir, "manifest.jsonl")
    if os.path.exists(manifest):
        out.append(manifest)
    if config.mode == "ssl" and config.checkpoint and os.path.exists(config.checkpoint):
        out.append(config.checkpoint)
    return out


def run_experiment(config: RunConfig, log_path=None, cache: Optional[RunCache] = None) -> RunRecord:
    """Run one cell: extract -> SVM -> evaluate (ssl), or train from scratch -> evaluate (supervised).

    Raises :class:`StageError` naming the failing stage. When ``log_path`` is
    given the record is appended to it.
    """
    cache = cache or RunCache()
    started, t0 = _now(), time.perf_counter()
    if not os.path.exists(os.path.join(config.data_dir, "manifest.jsonl")):
        raise StageError("load", FileNotFoundError(f"no manifest.jsonl under {config.data_dir!r}"))
    if config.mode == "ssl":
        if not config.checkpoint or not os.path.exists(config.checkpoint):
            raise StageError("load", FileNotFoundError(f"SSL run needs a checkpoint, got {config.checkpoint!r}"))
        provenance = {"init": "pretrained", "checkpoint": os.path.abspath(config.checkpoint), "checkpoint_sha256": file_digest(config.checkpoint)}
        train = _stage("extract", _features, config, "train", cache)
        test = _stage("extract", _features, config, "test", cache)
        result = evaluate_svm(train, test, config.label_fraction, config.seed, config.svm)
    else:
        # random initialization by construction: no checkpoint is ever read here
        provenance = {"init": "random", "init_seed": config.seed}
        x, _, y = _stage("load", _load_split, config.data_dir, "train", config.channels, cache)
        xt, _, yt = _stage("load", _load_split, config.data_dir, "test", config.channels, cache)
        bcfg = _stage(
            "configure",
            BackboneConfig,
            depth_variant=config.depth,
            in_channels=config.channels,
            width_multiplier=config.width_multiplier,
            input_size=x.shape[-1],
        )
        model = _stage("train_supervised", train_supervised, x, y, config.label_fraction, bcfg, config.supervised, config.seed)
        pred = _stage("evaluate", model.predict, xt)
        result = metrics(confusion(yt, pred))
        result["n_train"] = int(round(config.label_fraction * len(y)))
        result["n_test"] = int(len(yt))
        result["train_accuracy"] = model.train_accuracy
    cfg = to_dict(config)
    if config.mode == "supervised":
        cfg["checkpoint"] = None
    record = _record(cfg, _inputs(config), provenance, config.mode, started, t0, result)
    if log_path is not None:
        append_record(log_path, record)
    return record


def run_svm_on_features(train_path, test_path, fraction: float, seed: int, svm: Optional[SvmConfig] = None, log_path=None) -> RunRecord:
    """SSL evaluation starting from feature files written by ``extract``."""
    svm = svm or SvmConfig()
    started, t0 = _now(), time.perf_counter()
    train = FeatureMatrix(*_stage("load", read_features, train_path))
    test = FeatureMatrix(*_stage("load", read_features, test_path))
    if train.labels is None or test.labels is None:
        raise StageError("load", ValueError("feature files must carry labels"))
    result = evaluate_svm(train, test, fraction, seed, svm)
    cfg = {"mode": "ssl", "train_features": os.path.abspath(train_path), "test_features": os.path.abspath(test_path),
           "label_fraction": fraction, "seed": seed, "svm": asdict(svm)}
    record = _record(cfg, [train_path, test_path], {"init": "features", "train_features_sha256": file_digest(train_path)}, "ssl", started, t0, result)
    if log_path is not None:
        append_record(log_path, record)
    return record


# ---------------------------------------------------------------- sweeps


@dataclass
class SweepSpec:
    data_dir: str = ""
    label_fractions: List[float] = field(default_factory=lambda: [0.01, 0.05, 0.10, 1.0])
    channels: List[int] = field(default_factory=lambda: [1, 2])
    depths: List[int] = field(default_factory=lambda: [18, 34, 50])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    mode: str = "ssl"
    # "18x1" -> checkpoint path; missing entries fall back to checkpoint_dir/r{depth}_c{channels}.msas
    checkpoints: Dict[str, str] = field(default_factory=dict)
    checkpoint_dir: Optional[str] = None
    pretrain_missing: bool = False
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    width_multiplier: float = 0.25
    feature_seed: int = 0
    train_flip_prob: float = 0.5
    svm: SvmConfig = field(default_factory=SvmConfig)
    supervised: SupervisedConfig = field(default_factory=SupervisedConfig)

    def __post_init__(self):
        if self.mode not in MODES + ("both",):
            raise ValueError(f"mode must be ssl, supervised or both, got {self.mode!r}")

    def modes(self) -> List[str]:
        return list(MODES) if self.mode == "both" else [self.mode]

    def checkpoint_for(self, depth: int, channels: int) -> Optional[str]:
        key = f"{depth}x{channels}"
        if key in self.checkpoints:
            return self.checkpoints[key]
        if self.checkpoint_dir:
            return os.path.join(self.checkpoint_dir, f"r{depth}_c{channels}.msas")
        return None

    def cells(self) -> List[RunConfig]:
        out = []
        for mode in self.modes():
            for depth in self.depths:
                for ch in self.channels:
                    for frac in self.label_fractions:
                        for seed in self.seeds:
                            out.append(
                                RunConfig(
                                    mode=mode,
                                    data_dir=self.data_dir,
                                    checkpoint=self.checkpoint_for(depth, ch) if mode == "ssl" else None,
                                    label_fraction=frac,
                                    channels=ch,
                                    depth=depth,
                                    seed=seed,
                                    width_multiplier=self.width_multiplier,
                                    feature_seed=self.feature_seed,
                                    train_flip_prob=self.train_flip_prob,
                                    svm=self.svm,
                                    supervised=self.supervised,
                                )
                            )
        return out


def pretrain_checkpoint(spec: SweepSpec, depth: int, channels: int, path: str) -> str:
    """Pretrain the (depth, channels) backbone on the pretrain split and save it at ``path``."""
    x, _, _ = _load_split(spec.data_dir, "pretrain", channels, RunCache())
    bcfg = BackboneConfig(depth, channels, spec.width_multiplier, x.shape[-1])
    res = pretrain(x, replace(spec.pretrain, backbone=bcfg))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    save_checkpoint(path, res.state)
    write_history(os.path.splitext(path)[0] + "_history.csv", res.history)
    return path


def _failure(config: RunConfig, exc: BaseException) -> RunRecord:
    t0 = time.perf_counter()
    started = _now()
    return _record(to_dict(config), _inputs(config), {}, config.mode, started, t0, None, str(exc))


def _run_cell(config: RunConfig, cache: Optional[RunCache] = None) -> RunRecord:
    try:
        return run_experiment(config, cache=cache)
    except Exception as exc:  # a failing cell must not stop the sweep
        log.warning("cell %s depth %d ch %d frac %g seed %d failed: %s", config.mode, config.depth, config.channels, config.label_fraction, config.seed, exc)
        return _failure(config, exc)


def worker_count() -> int:
    """Parallelism bound from ``MSAS_WORKERS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("MSAS_WORKERS", "1")))
    except ValueError:
        return 1


def run_sweep(spec: SweepSpec, log_path=None, workers: Optional[int] = None) -> List[RunRecord]:
    """Execute every grid cell and return the records in grid order.

    Records are appended to ``log_path`` by this process only, one at a time,
    whatever the number of workers.
    """
    cells = spec.cells()
    if not cells:
        return []
    if "ssl" in spec.modes() and spec.pretrain_missing:
        for depth in spec.depths:
            for ch in spec.channels:
                path = spec.checkpoint_for(depth, ch)
                if path and not os.path.exists(path):
                    log.info("pretraining missing checkpoint %s", path)
                    try:
                        pretrain_checkpoint(spec, depth, ch, path)
                    except Exception as exc:
                        log.warning("pretraining depth %d ch %d failed: %s", depth, ch, exc)
    workers = workers or worker_count()
    records: List[RunRecord] = []
    if workers == 1:
        cache = RunCache()
        for cfg in cells:
            rec = _run_cell(cfg, cache)
            if log_path is not None:
                append_record(log_path, rec)
            records.append(rec)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rec in pool.map(_run_cell, cells):
                if log_path is not None:
                    append_record(log_path, rec)
                records.append(rec)
    return records


# ---------------------------------------------------------------- selection and reports


def select_best(records: Sequence[RunRecord]) -> RunRecord:
    """Highest-F1 successful record; ties go to the earliest start time."""
    ok = [r for r in records if r.status == "ok" and r.metrics.get("f1") is not None]
    if not ok:
        raise ValueError("no successful runs in the log")
    return min(ok, key=lambda r: (-r.f1, r.started_at))


def _row(r: RunRecord) -> dict:
    c = r.config
    return {
        "run_id": r.run_id,
        "mode": r.mode,
        "backbone": f"resnet{c.get('depth', '')}" if "depth" in c else "features",
        "label_pct": round(100.0 * float(c.get("label_fraction", 0.0)), 6),
        "channels": c.get("channels", ""),
        "seed": c.get("seed", ""),
        "precision": r.metrics.get("precision"),
        "recall": r.metrics.get("recall"),
        "f1": r.metrics.get("f1"),
        "wall_seconds": r.wall_seconds,
    }


@dataclass
class Report:
    rows: List[dict]
    failures: List[RunRecord]
    pivot: Dict[tuple, dict]
    text: str


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}" if isinstance(v, float) else str(v)


def emit_report(records: Sequence[RunRecord], out_path) -> Report:
    """Write the ranked CSV to ``out_path`` and a readable summary next to it (``.txt``).

    Successful runs are ranked by descending F1 (ties: earliest start). The
    summary adds the median F1 by (mode, label %) with per-seed values, and
    lists failed cells separately.
    """
    ok = sorted((r for r in records if r.status == "ok"), key=lambda r: (-r.f1, r.started_at))
    failures = [r for r in records if r.status != "ok"]
    rows = [_row(r) for r in ok]
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else ("" if v is None else v) for k, v in row.items()})

    pivot: Dict[tuple, dict] = {}
    for row in rows:
        cell = pivot.setdefault((row["mode"], row["label_pct"]), {"values": []})
        cell["values"].append(row["f1"])
    for cell in pivot.values():
        cell["median"] = statistics.median(cell["values"])

    buf = io.StringIO()
    buf.write(f"{len(rows)} successful runs, {len(failures)} failed\n\n")
    header = ["rank", "mode", "backbone", "label_pct", "channels", "seed", "precision", "recall", "f1"]
    buf.write("  ".join(f"{h:>9}" for h in header) + "\n")
    for rank, row in enumerate(rows, 1):
        vals = [rank] + [row[h] for h in header[1:]]
        buf.write("  ".join(f"{_fmt(v):>9}" for v in vals) + "\n")
    buf.write("\nmedian F1 by mode and label %\n")
    for (mode, pct), cell in sorted(pivot.items()):
        seeds = ", ".join(f"{v:.3f}" for v in cell["values"])
        buf.write(f"  {mode:>10}  {pct:>7g}%  {cell['median']:.4f}   [{seeds}]\n")
    if failures:
        buf.write("\nfailed cells\n")
        for r in failures:
            c = r.config
            buf.write(f"  {r.mode} depth={c.get('depth')} channels={c.get('channels')} frac={c.get('label_fraction')} seed={c.get('seed')}: {r.error}\n")
    text = buf.getvalue()
    with open(os.path.splitext(str(out_path))[0] + ".txt", "w") as fh:
        fh.write(text)
    return Report(rows, failures, pivot, text)


def read_report(path) -> List[dict]:
    """Parse a report CSV back into typed rows."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            typed = dict(row)
            for k in ("label_pct", "precision", "recall", "f1", "wall_seconds"):
                typed[k] = float(row[k]) if row[k] != "" else None
            for k in ("channels", "seed"):
                typed[k] = int(row[k]) if row[k] != "" else None
            out.append(typed)
    return out
