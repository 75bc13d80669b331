"""Finite-difference gradient suite shared by the unit tests and the acceptance run.

Every case builds a random instance from a seed and returns ``(loss_fn, leaves)``;
the loss is a random projection of the op's output, so every output entry
contributes to the checked gradient.
"""

import time

import numpy as np

from mocosas import tensor as T
from mocosas.backbone import BackboneConfig, build, forward_features
from mocosas.gradcheck import check_gradients, relative_error
from mocosas.tensor import Tensor

H = 1e-5
INSTANCES = 20


def _leaf(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data, requires_grad=True)


def _project(rng, out: Tensor) -> Tensor:
    w = Tensor(rng.normal(size=out.shape))
    return T.tsum(T.mul(out, w))


def case_add(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4)
    return lambda: _project(np.random.default_rng(1), T.add(a, b)), [a, b]


def case_sub(rng):
    a, b = _leaf(rng, 2, 3, 1), _leaf(rng, 3, 5)
    return lambda: _project(np.random.default_rng(1), T.sub(a, b)), [a, b]


def case_mul(rng):
    a, b = _leaf(rng, 4, 1, 3), _leaf(rng, 2, 3)
    return lambda: _project(np.random.default_rng(1), T.mul(a, b)), [a, b]


def case_scale_divide(rng):
    a = _leaf(rng, 5)
    c = float(rng.uniform(0.5, 2.0))
    return lambda: _project(np.random.default_rng(1), T.divide(T.scale(a, c), c + 1.0)), [a]


def case_relu(rng):
    a = _leaf(rng, 4, 6)
    return lambda: _project(np.random.default_rng(1), T.relu(a)), [a]


def case_sum_mean(rng):
    a = _leaf(rng, 3, 4, 2)
    axis = int(rng.integers(0, 3))
    return lambda: T.add(_project(np.random.default_rng(1), T.tsum(a, axis=axis)), T.mean(T.mul(a, a))), [a]


def case_reshape_flatten_concat(rng):
    a, b = _leaf(rng, 2, 3, 2, 2), _leaf(rng, 2, 5)
    return lambda: _project(np.random.default_rng(1), T.concat([T.flatten(a), T.reshape(b, (2, 5))], axis=1)), [a, b]


def case_matmul(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 4, 2)
    return lambda: _project(np.random.default_rng(1), T.matmul(a, b)), [a, b]


def case_linear(rng):
    x, w, b = _leaf(rng, 5, 3), _leaf(rng, 3, 4), _leaf(rng, 4)
    return lambda: _project(np.random.default_rng(1), T.linear(x, w, b)), [x, w, b]


def case_l2_normalize(rng):
    x = _leaf(rng, 4, 6)
    return lambda: _project(np.random.default_rng(1), T.l2_normalize(x)), [x]


def case_softmax_cross_entropy(rng):
    x = _leaf(rng, 6, 5)
    y = rng.integers(0, 5, size=6)
    return lambda: T.softmax_cross_entropy(x, y), [x]


def case_conv2d(rng):
    cin, cout = rng.integers(1, 4, size=2)
    k = int(rng.choice([1, 3, 5]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    x = _leaf(rng, 2, cin, 7, 7)
    w = _leaf(rng, cout, cin, k, k)
    b = _leaf(rng, cout)
    return lambda: _project(np.random.default_rng(1), T.conv2d(x, w, b, stride=stride, padding=pad)), [x, w, b]


def case_batchnorm_train(rng):
    x = _leaf(rng, 3, 2, 4, 4)
    g, b = _leaf(rng, 2, low=0.5), _leaf(rng, 2)

    def loss():
        return _project(np.random.default_rng(1), T.batchnorm2d(x, g, b, np.zeros(2), np.ones(2), training=True))

    return loss, [x, g, b]


def case_batchnorm_eval(rng):
    x = _leaf(rng, 2, 3, 3, 3)
    g, b = _leaf(rng, 3), _leaf(rng, 3)
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    return lambda: _project(np.random.default_rng(1), T.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training=False)), [x, g, b]


def case_maxpool2d(rng):
    x = _leaf(rng, 2, 2, 7, 7)
    return lambda: _project(np.random.default_rng(1), T.maxpool2d(x, 3, 2, 1)), [x]


def case_adaptive_avg_pool(rng):
    x = _leaf(rng, 2, 3, 4, 5)
    return lambda: _project(np.random.default_rng(1), T.adaptive_avg_pool2d(x, 1)), [x]


OP_CASES = {
    "add": case_add,
    "sub": case_sub,
    "mul": case_mul,
    "scale_divide": case_scale_divide,
    "relu": case_relu,
    "sum_mean": case_sum_mean,
    "reshape_flatten_concat": case_reshape_flatten_concat,
    "matmul": case_matmul,
    "linear": case_linear,
    "l2_normalize": case_l2_normalize,
    "softmax_cross_entropy": case_softmax_cross_entropy,
    "conv2d": case_conv2d,
    "batchnorm2d_train": case_batchnorm_train,
    "batchnorm2d_eval": case_batchnorm_eval,
    "maxpool2d": case_maxpool2d,
    "adaptive_avg_pool2d": case_adaptive_avg_pool,
}


def op_errors(name: str, instances: int = INSTANCES) -> list:
    """Worst relative error of each random instance of one op."""
    out = []
    for i in range(instances):
        loss_fn, leaves = OP_CASES[name](np.random.default_rng([i, 17]))
        out.append(max(check_gradients(loss_fn, leaves, h=H).values()))
    return out


class _KinkRecorder:
    """Records ReLU sign patterns and max-pool argmax choices during forward passes.

    Central differences are only meaningful when the perturbed points lie on
    the same smooth piece of the network as the base point; a probe whose
    +h or -h evaluation flips a ReLU or changes a pooling winner straddles a
    kink and says nothing about the derivative there.
    """

    def __init__(self):
        self.log = None
        self._relu, self._pool = T.relu, T.maxpool2d

    def __enter__(self):
        rec = self

        def relu(x):
            if rec.log is not None:
                rec.log.append(np.packbits(x.data > 0).tobytes())
            return rec._relu(x)

        def maxpool2d(x, kernel, stride, padding=0):
            out = rec._pool(x, kernel, stride, padding)
            if rec.log is not None:
                rec.log.append(_argmax_key(x.data, out.data, kernel, stride, padding))
            return out

        T.relu, T.maxpool2d = relu, maxpool2d
        return self

    def __exit__(self, *exc):
        T.relu, T.maxpool2d = self._relu, self._pool

    def pattern(self, fn):
        self.log = []
        value = float(fn().data)
        pat, self.log = tuple(self.log), None
        return value, pat


def _argmax_key(x, out, kernel, stride, padding):
    from numpy.lib.stride_tricks import sliding_window_view

    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    ho, wo = out.shape[2:]
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    return win.reshape(*win.shape[:4], -1).argmax(axis=-1).astype(np.int8).tobytes()


def network_errors(instances: int = INSTANCES, probes: int = 3, return_skips: bool = False):
    """Depth-18 width-0.25 network in training mode, one random instance per seed.

    Each instance draws fresh weights and a fresh input batch. Parameter
    tensors are dealt round-robin over instances so that, across the suite,
    every tensor (and the input) is differenced at ``probes`` random entries.
    Probes that straddle a ReLU/max-pool kink are redrawn (and counted).
    """
    cfg = BackboneConfig(depth_variant=18, width_multiplier=0.25, input_size=32)
    names = list(build(cfg, 0).params)
    deal = np.random.default_rng(5).permutation(len(names))
    out, skipped = [], 0
    for i in range(instances):
        rng = np.random.default_rng([i, 23])
        bp = build(cfg, seed=1000 + i)
        for p in bp.params.values():
            # perturb the deterministic init so biases/affine terms are not exactly 0/1
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
        x = Tensor(rng.normal(size=(4, 1, 32, 32)), requires_grad=True)
        proj = rng.normal(size=(4, cfg.embed_dim))
        buffers = {k: v.copy() for k, v in bp.buffers.items()}

        def loss():
            for k, v in buffers.items():
                bp.buffers[k][...] = v
            return T.tsum(T.mul(forward_features(bp, x, training=True), Tensor(proj)))

        leaves = [x] + [bp.params[names[j]] for j in deal[i::instances]]
        for leaf in leaves:
            leaf.grad = None
        with T.Tape() as tape:
            root = loss()
        T.backward(root, tape)
        worst = 0.0
        with _KinkRecorder() as rec:
            _, base = rec.pattern(loss)
            for leaf in leaves:
                flat = leaf.data.reshape(-1)
                grad = leaf.grad.reshape(-1)
                done = 0
                for j in rng.permutation(flat.size):
                    if done == probes:
                        break
                    orig = flat[j]
                    flat[j] = orig + H
                    fp, pp = rec.pattern(loss)
                    flat[j] = orig - H
                    fm, pm = rec.pattern(loss)
                    flat[j] = orig
                    if pp != base or pm != base:
                        skipped += 1
                        continue
                    done += 1
                    worst = max(worst, relative_error(grad[j : j + 1], np.array([(fp - fm) / (2 * H)])))
        out.append(worst)
    return (out, skipped) if return_skips else out


def run_suite() -> dict:
    """All ops plus the network; returns {name: worst error over instances} and the wall time."""
    t0 = time.perf_counter()
    worst = {name: max(op_errors(name)) for name in OP_CASES}
    net, skipped = network_errors(return_skips=True)
    worst["resnet18_w0.25"] = max(net)
    return {"worst": worst, "kink_probes_redrawn": skipped, "seconds": time.perf_counter() - t0}
