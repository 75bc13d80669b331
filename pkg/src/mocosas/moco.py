"""Momentum-contrast pretraining.

A query encoder (backbone + two-layer projection head) is trained with the
queue-based InfoNCE loss; a key encoder tracks it by exponential moving average
and feeds a FIFO queue of negatives. Per batch: encode both views, compute the
loss on the query side, step AdamW, update the key encoder, then enqueue keys.
"""

import csv
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .augment import AugmentConfig, batch_views
from .backbone import BackboneConfig, BackboneParams, build, config_from_arrays, forward_features, _config_arrays
from .checkpoint import load_arrays, save_arrays
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    batch_size: int = 64
    queue_size: int = 512
    temperature: float = 0.07
    momentum: float = 0.99
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    warmup_epochs: int = 10
    max_epochs: int = 200
    early_stop_patience: int = 10
    min_delta: float = 0.0
    proj_hidden_dim: Optional[int] = None
    proj_out_dim: int = 128
    seed: int = 0
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.batch_size < 1 or self.queue_size < self.batch_size or self.queue_size % self.batch_size:
            raise ValueError(f"queue_size {self.queue_size} must be a positive multiple of batch_size {self.batch_size}")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")


# ---------------------------------------------------------------- encoder


@dataclass
class Encoder:
    backbone: BackboneParams
    head: "OrderedDict[str, Tensor]"

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out = OrderedDict(("backbone." + k, v) for k, v in self.backbone.params.items())
        out.update(("head." + k, v) for k, v in self.head.items())
        return out

    def copy(self, requires_grad: bool) -> "Encoder":
        bb = self.backbone.copy()
        for v in bb.params.values():
            v.requires_grad = requires_grad
        head = OrderedDict((k, Tensor(v.data.copy(), requires_grad=requires_grad)) for k, v in self.head.items())
        return Encoder(bb, head)


def build_encoder(config: PretrainConfig) -> Encoder:
    bb = build(config.backbone, seed=config.seed)
    e = config.backbone.embed_dim
    hidden = config.proj_hidden_dim or e
    rng = np.random.default_rng([config.seed, 1])
    head = OrderedDict()
    head["fc1.w"] = Tensor(rng.normal(0.0, np.sqrt(2.0 / e), size=(e, hidden)), requires_grad=True)
    head["fc1.b"] = Tensor(np.zeros(hidden), requires_grad=True)
    head["fc2.w"] = Tensor(rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, config.proj_out_dim)), requires_grad=True)
    head["fc2.b"] = Tensor(np.zeros(config.proj_out_dim), requires_grad=True)
    return Encoder(bb, head)


def encode(enc: Encoder, batch: np.ndarray, training: bool = True) -> Tensor:
    """Backbone features -> projection head -> unit-norm embedding."""
    h = forward_features(enc.backbone, batch, training=training)
    h = T.relu(T.linear(h, enc.head["fc1.w"], enc.head["fc1.b"]))
    z = T.linear(h, enc.head["fc2.w"], enc.head["fc2.b"])
    return T.l2_normalize(z)


# ---------------------------------------------------------------- loss and state updates


def _check_unit_rows(name: str, a: np.ndarray, tol: float = 1e-4) -> None:
    if a.size and np.max(np.abs(np.sqrt((a * a).sum(axis=1)) - 1.0)) > tol:
        raise ValueError(f"{name} rows must be unit-norm")


def ntxent_loss(q: Tensor, k_pos, queue, temperature: float) -> Tensor:
    """Mean over rows of -log softmax of the positive logit against queue negatives.

    Only ``q`` carries gradient; keys and queue enter as constants.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    k = np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos, dtype=np.float64)
    negs = np.asarray(queue.data if isinstance(queue, Tensor) else queue, dtype=np.float64).reshape(-1, q.shape[1])
    if k.shape != q.shape:
        raise ValueError(f"query {q.shape} and key {k.shape} shapes differ")
    _check_unit_rows("query", q.data)
    _check_unit_rows("key", k)
    _check_unit_rows("queue", negs)
    pos = T.tsum(T.mul(q, Tensor(k)), axis=1, keepdims=True)
    parts = [pos]
    if negs.shape[0]:
        parts.append(T.matmul(q, Tensor(negs.T)))
    logits = T.divide(T.concat(parts, axis=1), temperature)
    return T.softmax_cross_entropy(logits, np.zeros(q.shape[0], dtype=np.int64))


def momentum_update(query_params: Dict[str, Tensor], key_params: Dict[str, Tensor], m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q for every named parameter."""
    if query_params.keys() != key_params.keys():
        raise ValueError("query and key parameter names differ")
    for name, q in query_params.items():
        k = key_params[name]
        if k.shape != q.shape:
            raise ValueError(f"{name}: key shape {k.shape} != query shape {q.shape}")
        k.data = m * k.data + (1.0 - m) * q.data


@dataclass
class QueueState:
    queue: np.ndarray
    ptr: int = 0
    filled: int = 0

    @property
    def size(self) -> int:
        return self.queue.shape[0]

    def negatives(self) -> np.ndarray:
        return self.queue[: self.filled]


def init_queue(size: int, dim: int, seed: int) -> QueueState:
    q = np.random.default_rng([seed, 2]).standard_normal((size, dim))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return QueueState(q)


def enqueue(state: QueueState, keys: np.ndarray) -> QueueState:
    """Overwrite rows [ptr, ptr + B) with ``keys`` and advance ``ptr`` modulo K."""
    keys = np.asarray(keys, dtype=np.float64)
    b = keys.shape[0]
    if b == 0 or state.size % b:
        raise ValueError(f"batch of {b} keys does not divide queue size {state.size}")
    queue = state.queue.copy()
    queue[state.ptr : state.ptr + b] = keys
    return QueueState(queue, (state.ptr + b) % state.size, min(state.size, state.filled + b))


def one_cycle_lr(step: int, total_steps: int, warmup_epochs: float, steps_per_epoch: int, peak_lr: float) -> float:
    """Linear warmup from peak/25 to peak, then cosine annealing to peak/1e4."""
    start, final = peak_lr / 25.0, peak_lr / 1e4
    warm = min(int(round(warmup_epochs * steps_per_epoch)), total_steps)
    if warm > 0 and step <= warm:
        return start + (peak_lr - start) * step / warm
    span = total_steps - warm
    if span <= 0:
        return final
    progress = min(1.0, (step - warm) / span)
    return float(final + (peak_lr - final) * 0.5 * (1.0 + np.cos(np.pi * progress)))


@dataclass
class AdamWState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Dict[str, Tensor],
    grads: Dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
) -> AdamWState:
    """Decoupled weight decay followed by a bias-corrected Adam step (in place on ``params``)."""
    b1, b2 = betas
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        data = p.data * (1.0 - lr * weight_decay)
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class EarlyStopping:
    """Stop once the best loss has not improved by more than ``min_delta`` for ``patience`` epochs."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = -1
        self.wait = 0

    def update(self, epoch: int, loss: float) -> bool:
        if loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.wait = loss, epoch, 0
        else:
            self.wait += 1
        return self.wait >= self.patience


# ---------------------------------------------------------------- training loop


@dataclass
class MoCoState:
    query: Encoder
    key: Encoder
    queue: QueueState
    optimizer: AdamWState = field(default_factory=AdamWState)
    epoch: int = 0


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    wall_seconds: float


@dataclass
class PretrainResult:
    state: MoCoState
    history: List[EpochRecord]
    stopped_early: bool


def init_state(config: PretrainConfig) -> MoCoState:
    query = build_encoder(config)
    key = query.copy(requires_grad=False)
    return MoCoState(query, key, init_queue(config.queue_size, config.proj_out_dim, config.seed))


def train_step(state: MoCoState, v1: np.ndarray, v2: np.ndarray, config: PretrainConfig, lr: float) -> float:
    params = state.query.parameters()
    for p in params.values():
        p.grad = None
    k = encode(state.key, v2, training=True).data
    with Tape() as tape:
        q = encode(state.query, v1, training=True)
        loss = ntxent_loss(q, k, state.queue.negatives(), config.temperature)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError("non-finite contrastive loss")
    T.backward(loss, tape)
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    adamw_step(params, grads, state.optimizer, lr, config.weight_decay)
    momentum_update(params, state.key.parameters(), config.momentum)
    state.queue = enqueue(state.queue, k)
    return value


def pretrain(
    snippets: np.ndarray,
    config: PretrainConfig,
    channels: Optional[int] = None,
    max_epochs: Optional[int] = None,
    epoch_callback=None,
) -> PretrainResult:
    """Pretrain on raw-intensity snippets (N, C, S, S); the last partial batch of each epoch is dropped."""
    n = len(snippets)
    if n == 0:
        raise TrainingError("empty pretraining set")
    if channels is not None:
        snippets = snippets[:, :channels]
    b = config.batch_size
    steps_per_epoch = n // b
    if steps_per_epoch == 0:
        raise TrainingError(f"pretraining set of {n} is smaller than one batch of {b}")
    epochs = max_epochs or config.max_epochs
    total = epochs * steps_per_epoch
    state = init_state(config)
    stopper = EarlyStopping(config.early_stop_patience, config.min_delta)
    history: List[EpochRecord] = []
    step = 0
    stopped = False
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, 3, epoch]).permutation(n)
        epoch_seed = int(np.random.default_rng([config.seed, 4, epoch]).integers(2**62))
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * b : (s + 1) * b]
            v1, v2 = batch_views(snippets[idx], idx, config.augment, epoch_seed)
            lr = one_cycle_lr(step, total, config.warmup_epochs, steps_per_epoch, config.learning_rate)
            losses.append(train_step(state, v1, v2, config, lr))
            step += 1
        state.epoch = epoch + 1
        rec = EpochRecord(epoch + 1, float(np.mean(losses)), lr, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d loss %.5f lr %.2e (%.1fs)", rec.epoch, rec.loss, rec.lr, rec.wall_seconds)
        if epoch_callback is not None:
            epoch_callback(rec, state)
        if stopper.update(rec.epoch, rec.loss):
            stopped = True
            break
    return PretrainResult(state, history, stopped)


# ---------------------------------------------------------------- persistence


def write_history(path, history: List[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "lr", "wall_seconds"])
        for r in history:
            w.writerow([r.epoch, repr(float(r.loss)), repr(float(r.lr)), f"{r.wall_seconds:.3f}"])


def read_history(path) -> List[EpochRecord]:
    with open(path) as fh:
        return [
            EpochRecord(int(r["epoch"]), float(r["loss"]), float(r["lr"]), float(r["wall_seconds"]))
            for r in csv.DictReader(fh)
        ]


def state_arrays(state: MoCoState) -> Dict[str, np.ndarray]:
    arrays = _config_arrays(state.query.backbone.config)
    for side, enc in (("query.", state.query), ("key.", state.key)):
        arrays.update(enc.backbone.state_arrays(side))
        arrays.update({side + "head." + k: v.data for k, v in enc.head.items()})
    arrays["queue"] = state.queue.queue
    arrays["queue_ptr"] = np.array(float(state.queue.ptr))
    arrays["queue_filled"] = np.array(float(state.queue.filled))
    for name in state.optimizer.m:
        arrays["opt.m." + name] = state.optimizer.m[name]
        arrays["opt.v." + name] = state.optimizer.v[name]
    arrays["opt.step"] = np.array(float(state.optimizer.step))
    arrays["epoch"] = np.array(float(state.epoch))
    return arrays


def save_checkpoint(path, state: MoCoState) -> None:
    save_arrays(path, state_arrays(state))


def load_checkpoint(path) -> MoCoState:
    arrays = load_arrays(path)
    bcfg = config_from_arrays(arrays)
    out_dim = arrays["query.head.fc2.w"].shape[1]
    hidden = arrays["query.head.fc1.w"].shape[1]
    cfg = PretrainConfig(backbone=bcfg, proj_out_dim=out_dim, proj_hidden_dim=hidden, queue_size=arrays["queue"].shape[0], batch_size=1)
    state = init_state(cfg)
    for side, enc in (("query.", state.query), ("key.", state.key)):
        enc.backbone.load_state_arrays(arrays, side)
        for k, v in enc.head.items():
            v.data = np.array(arrays[side + "head." + k])
    state.queue = QueueState(np.array(arrays["queue"]), int(arrays["queue_ptr"]), int(arrays["queue_filled"]))
    opt = AdamWState(step=int(arrays["opt.step"]))
    for name in arrays:
        if name.startswith("opt.m."):
            key = name[len("opt.m."):]
            opt.m[key] = np.array(arrays[name])
            opt.v[key] = np.array(arrays["opt.v." + key])
    state.optimizer = opt
    state.epoch = int(arrays["epoch"])
    return state


def load_query_backbone(path) -> BackboneParams:
    """The pretrained query backbone from a checkpoint, for feature extraction."""
    arrays = load_arrays(path)
    bp = build(config_from_arrays(arrays), seed=0)
    bp.load_state_arrays(arrays, "query.")
    return bp
