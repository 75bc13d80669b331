"""Frozen-feature evaluation: feature extraction, linear SVM, supervised baseline, metrics."""

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numba import njit

from . import tensor as T
from .augment import eval_augment, network_input, sample_seed
from .backbone import BackboneConfig, BackboneParams, build, forward_features
from .moco import AdamWState, adamw_step, one_cycle_lr
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class SvmError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, model, gap: float, sweeps: int):
        self.model, self.gap, self.sweeps = model, gap, sweeps
        super().__init__(f"SVM did not reach the duality-gap tolerance after {sweeps} sweeps (gap {gap:.3e})")


@dataclass
class FeatureMatrix:
    rows: np.ndarray
    ids: List[str]
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        if self.rows.ndim != 2 or self.rows.shape[0] != len(self.ids):
            raise ValueError(f"{self.rows.shape[0]} feature rows for {len(self.ids)} ids")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.ids),):
                raise ValueError("labels must have one entry per row")
        if not np.all(np.isfinite(self.rows)):
            raise ValueError("feature rows must be finite")

    def subset(self, idx) -> "FeatureMatrix":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureMatrix(self.rows[idx], [self.ids[i] for i in idx], None if self.labels is None else self.labels[idx])


# ---------------------------------------------------------------- features


def extract_features(
    bp: BackboneParams,
    snippets: np.ndarray,
    ids: Sequence[str],
    labels=None,
    flip_prob: float = 0.0,
    seed: int = 0,
    batch_size: int = 128,
) -> FeatureMatrix:
    """Eval-mode backbone embeddings of raw-intensity snippets, with optional seeded flips."""
    if len(snippets) != len(ids):
        raise ValueError(f"{len(snippets)} snippets for {len(ids)} ids")
    c = bp.config.in_channels
    if len(snippets) and snippets.shape[1] < c:
        raise ValueError(f"backbone needs {c} channels, snippets have {snippets.shape[1]}")
    rows = []
    for lo in range(0, len(snippets), batch_size):
        chunk = [
            eval_augment(snippets[i, :c], flip_prob, sample_seed(seed, i)) for i in range(lo, min(lo + batch_size, len(snippets)))
        ]
        rows.append(forward_features(bp, network_input(np.stack(chunk)), training=False).data)
    out = np.concatenate(rows) if rows else np.zeros((0, bp.config.embed_dim))
    return FeatureMatrix(out, list(ids), labels)


# ---------------------------------------------------------------- linear SVM


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    C: float
    mean: Optional[np.ndarray] = None
    scale: Optional[np.ndarray] = None
    sweeps: int = 0
    gap: float = 0.0
    objective_history: List[float] = field(default_factory=list)

    def decision_function(self, rows: np.ndarray) -> np.ndarray:
        x = np.asarray(rows, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.w.shape[0]:
            raise ValueError(f"feature dimension {x.shape[-1]} does not match model dimension {self.w.shape[0]}")
        if self.mean is not None:
            x = (x - self.mean) / self.scale
        return x @ self.w + self.b


def dual_objective(alpha: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    """0.5 a^T Q a - sum(a) with Q_ij = y_i y_j (x_i . x_j + 1): the minimized form."""
    v = (alpha * y) @ np.hstack([x, np.ones((len(x), 1))])
    return 0.5 * float(v @ v) - float(alpha.sum())


def _primal(w: np.ndarray, b: float, x, y, C: float) -> float:
    margins = y * (x @ w + b)
    return 0.5 * (float(w @ w) + b * b) + C * float(np.maximum(0.0, 1.0 - margins).sum())


@njit(cache=True)
def _cd_sweep(xa, y, qd, alpha, wa, order, C):
    d = xa.shape[1]
    for i in order:
        if qd[i] == 0.0:
            continue
        g = 0.0
        for j in range(d):
            g += wa[j] * xa[i, j]
        g = y[i] * g - 1.0
        new = min(max(alpha[i] - g / qd[i], 0.0), C)
        delta = new - alpha[i]
        if delta != 0.0:
            alpha[i] = new
            step = delta * y[i]
            for j in range(d):
                wa[j] += step * xa[i, j]


def svm_train(
    features: FeatureMatrix,
    C: float = 1.0,
    tolerance: float = 1e-6,
    max_iter: int = 100_000,
    seed: int = 0,
    standardize: bool = True,
) -> SvmModel:
    """L1-hinge linear SVM by dual coordinate descent.

    The bias is a weight on a constant feature (regularized, as in liblinear),
    so the dual is a box-constrained QP. Sweeps visit coordinates in a seeded
    random order and stop when the duality gap falls to
    ``tolerance * max(1, primal)``.
    """
    if features.labels is None:
        raise SvmError("SVM training needs labels")
    labels = features.labels
    if len(np.unique(labels)) < 2:
        raise SvmError("SVM training needs both classes present")
    if C <= 0:
        raise SvmError("C must be positive")
    x = features.rows
    mean = scale = None
    if standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale = np.where(scale > 1e-12, scale, 1.0)
        x = (x - mean) / scale
    y = np.where(labels > 0, 1.0, -1.0)
    n, d = x.shape
    xa = np.hstack([x, np.ones((n, 1))])
    qd = (xa * xa).sum(axis=1)
    alpha = np.zeros(n)
    wa = np.zeros(d + 1)
    rng = np.random.default_rng(seed)
    history = []
    gap = np.inf
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        _cd_sweep(xa, y, qd, alpha, wa, rng.permutation(n), float(C))
        dual = 0.5 * float(wa @ wa) - float(alpha.sum())
        history.append(dual)
        primal = _primal(wa[:d], wa[d], x, y, C)
        gap = primal + dual
        if gap <= tolerance * max(1.0, abs(primal)):
            break
    model = SvmModel(wa[:d].copy(), float(wa[d]), C, mean, scale, sweeps, float(gap), history)
    if gap > tolerance * max(1.0, abs(_primal(wa[:d], wa[d], x, y, C))):
        raise ConvergenceError(model, float(gap), sweeps)
    return model


def svm_predict(model: SvmModel, rows: np.ndarray) -> np.ndarray:
    """1 where the decision value is strictly positive, else 0."""
    return (model.decision_function(rows) > 0).astype(np.int64)


# ---------------------------------------------------------------- metrics


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(y_true, y_pred) -> ConfusionCounts:
    t = np.asarray(y_true).astype(bool)
    p = np.asarray(y_pred).astype(bool)
    if t.shape != p.shape:
        raise ValueError("label and prediction shapes differ")
    return ConfusionCounts(int(np.sum(t & p)), int(np.sum(~t & p)), int(np.sum(t & ~p)), int(np.sum(~t & ~p)))


def precision(c: ConfusionCounts) -> float:
    d = c.tp + c.fp
    return c.tp / d if d else 0.0


def recall(c: ConfusionCounts) -> float:
    d = c.tp + c.fn
    return c.tp / d if d else 0.0


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return 2.0 * p * r / (p + r) if p + r > 0 else 0.0


def metrics(c: ConfusionCounts, report_undefined: bool = False) -> dict:
    """Precision/recall/F1 plus counts; degenerate denominators give 0, or None if ``report_undefined``."""
    out = {"precision": precision(c), "recall": recall(c), "f1": f1(c), "counts": asdict(c)}
    if report_undefined:
        if c.tp + c.fp == 0:
            out["precision"] = None
        if c.tp + c.fn == 0:
            out["recall"] = None
        if out["precision"] is None or out["recall"] is None:
            out["f1"] = None
    return out


def metrics_json(c: ConfusionCounts) -> str:
    return json.dumps(metrics(c))


# ---------------------------------------------------------------- supervised baseline


def stratified_sample(labels: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    """Seeded per-class sample of ``round(fraction * N)`` indices, at least one per class."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    labels = np.asarray(labels)
    n = len(labels)
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    total = max(len(classes), int(round(fraction * n)))
    chosen = []
    remaining = total
    for pos, c in enumerate(classes):
        members = np.flatnonzero(labels == c)
        if pos == len(classes) - 1:
            k = remaining
        else:
            k = int(round(total * len(members) / n))
        k = int(np.clip(k, 1, len(members)))
        remaining -= k
        chosen.append(rng.choice(members, size=k, replace=False))
    out = np.sort(np.concatenate(chosen)) if chosen else np.zeros(0, dtype=np.int64)
    if out.size == 0:
        raise ValueError("empty subset after sampling")
    return out


@dataclass
class SupervisedConfig:
    epochs: int = 30
    min_steps: int = 150
    batch_size: int = 64
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    warmup_epochs: float = 3
    p_hflip: float = 0.5


@dataclass
class SupervisedModel:
    backbone: BackboneParams
    head_w: Tensor
    head_b: Tensor
    train_accuracy: float = 0.0
    steps: int = 0

    def logits(self, batch: np.ndarray, training: bool = False) -> Tensor:
        return T.linear(forward_features(self.backbone, batch, training=training), self.head_w, self.head_b)

    def predict(self, snippets: np.ndarray, batch_size: int = 128) -> np.ndarray:
        c = self.backbone.config.in_channels
        out = []
        for lo in range(0, len(snippets), batch_size):
            x = network_input(np.asarray(snippets[lo : lo + batch_size, :c], dtype=np.float64))
            out.append(self.logits(x).data.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def train_supervised(
    snippets: np.ndarray,
    labels: np.ndarray,
    fraction: float,
    backbone_config: BackboneConfig,
    config: Optional[SupervisedConfig] = None,
    seed: int = 0,
) -> SupervisedModel:
    """Randomly initialized backbone + linear head trained end to end with cross entropy.

    Small subsets repeat epochs until ``min_steps`` optimizer steps have run.
    """
    cfg = config or SupervisedConfig()
    idx = stratified_sample(labels, fraction, seed)
    x = np.asarray(snippets[idx, : backbone_config.in_channels], dtype=np.float64)
    y = np.asarray(labels)[idx].astype(np.int64)
    bp = build(backbone_config, seed=seed)
    rng = np.random.default_rng([seed, 5])
    e = backbone_config.embed_dim
    model = SupervisedModel(
        bp, Tensor(rng.normal(0.0, np.sqrt(1.0 / e), size=(e, 2)), requires_grad=True), Tensor(np.zeros(2), requires_grad=True)
    )
    params = dict(("backbone." + k, v) for k, v in bp.params.items())
    params["head.w"], params["head.b"] = model.head_w, model.head_b
    n = len(idx)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    epochs = max(cfg.epochs, -(-cfg.min_steps // steps_per_epoch))
    total = epochs * steps_per_epoch
    opt = AdamWState()
    step = 0
    for epoch in range(epochs):
        order = np.random.default_rng([seed, 6, epoch]).permutation(n)
        for s in range(steps_per_epoch):
            sel = order[s * bs : (s + 1) * bs]
            batch = np.stack(
                [eval_augment(x[i], cfg.p_hflip, sample_seed(seed * 1_000_003 + epoch, int(idx[i]))) for i in sel]
            )
            for p in params.values():
                p.grad = None
            with Tape() as tape:
                loss = T.softmax_cross_entropy(model.logits(network_input(batch), training=True), y[sel])
            T.backward(loss, tape)
            lr = one_cycle_lr(step, total, cfg.warmup_epochs, steps_per_epoch, cfg.learning_rate)
            adamw_step(params, {k: p.grad for k, p in params.items() if p.grad is not None}, opt, lr, cfg.weight_decay)
            step += 1
    model.steps = step
    model.train_accuracy = float(np.mean(model.predict(x) == y))
    return model
