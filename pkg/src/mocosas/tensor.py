"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape every op is a plain numpy
computation, which is how frozen encoders and eval passes run.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = tsum(mul(w, w))
    >>> grads = backward(loss, tape)
    >>> grads[w]
    array([2., 2., 2.])
"""

import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_state = threading.local()


class Tensor:
    """An n-d float64 array that may take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest, and ops record on the innermost one.
    A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self._position: Dict[int, int] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        self._position[id(output)] = len(self.nodes)
        self.nodes.append(_Node(tuple(inputs), output, backward_fn))

    def contains(self, t: Tensor) -> bool:
        pos = self._position.get(id(t))
        return pos is not None and self.nodes[pos].output is t


def current_tape() -> Optional[Tape]:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    tape = current_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=track)
    if track:
        tape.record(out, inputs, backward_fn)
    return out


def backward(root: Tensor, tape: Tape) -> Dict[Tensor, np.ndarray]:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf on ``tape``.

    Returns a mapping from each leaf reached to the gradient contributed by this
    call. A root that does not require a gradient is a constant and yields an
    empty mapping.
    """
    if root.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    if not tape.contains(root):
        raise ValueError("root was not produced on this tape")

    grads: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    holders: Dict[int, Tensor] = {id(root): root}
    stop = tape._position[id(root)]
    for node in reversed(tape.nodes[: stop + 1]):
        g = grads.pop(id(node.output), None)
        holders.pop(id(node.output), None)
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t

    out: Dict[Tensor, np.ndarray] = {}
    for key, g in grads.items():
        leaf = holders[key]
        g = np.reshape(g, leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar."""
    c = float(c)
    return _result(x.data * c, (x,), lambda g: (g * c,))


def divide(x: Tensor, c: float) -> Tensor:
    """Divide by a nonzero python scalar."""
    c = float(c)
    if c == 0.0:
        raise ZeroDivisionError("divide by zero scalar")
    return _result(x.data / c, (x,), lambda g: (g / c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return divide(tsum(x, axis=axis, keepdims=keepdims), float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading axis."""
    return reshape(x, (x.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear bias shape {bias.shape} does not match out dim {weight.shape[1]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return _result(out, inputs, bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Divide each row by ``max(||row||, eps)``."""
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    active = norm >= eps

    def bw(g):
        proj = (g * y).sum(axis=1, keepdims=True)
        return (np.where(active, g - y * proj, g) / denom,)

    return _result(y, (x,), bw)


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    n = logits.shape[0]
    if logits.data.ndim != 2 or targets.shape != (n,):
        raise ValueError(f"cross entropy expects (N, C) logits and N targets, got {logits.shape}, {targets.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsumexp - z[rows, targets]))

    def bw(g):
        p = np.exp(z - logsumexp[:, None])
        p[rows, targets] -= 1.0
        return (p * (float(g) / n),)

    return _result(np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- image ops


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation, NCHW input and (O, I, K, K) weight, zero padding."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, i, k, k2 = weight.shape
    if c != i:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, weight expects {i}")
    if k != k2:
        raise ValueError(f"conv2d needs square kernels, got {k}x{k2}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match {o} output channels")
    ho, wo = _out_size(h, k, stride, padding), _out_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d kernel {k} larger than padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
            dxp = np.zeros(xp.shape)
            span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
            for a in range(k):
                for b in range(k):
                    dxp[:, :, a : a + span_h : stride, b : b + span_w : stride] += dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
            gx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _result(out, inputs, bw)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = True,
) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics normalize the input (biased variance)
    and ``running_mean`` / ``running_var`` are updated in place, the variance
    with the unbiased estimate. In eval mode the running statistics are used.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) or running_var.shape != (c,):
        raise ValueError(f"batchnorm channel mismatch: input has {c} channels, gamma {gamma.shape}, beta {beta.shape}")
    axes = (0, 2, 3)
    g4 = gamma.data.reshape(1, c, 1, 1)
    if training:
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=axes)
        unbiased = var * m / (m - 1) if m > 1 else var
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        centered = x.data - running_mean.reshape(1, c, 1, 1)
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std.reshape(1, c, 1, 1)
    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            dxhat = g * g4
            if training:
                gx = (inv_std.reshape(1, c, 1, 1) / m) * (
                    m * dxhat
                    - dxhat.sum(axis=axes, keepdims=True)
                    - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = dxhat * inv_std.reshape(1, c, 1, 1)
        return gx, dgamma, dbeta

    return _result(out, (x, gamma, beta), bw)


def maxpool2d(x: Tensor, kernel: int, stride: int, padding: int = 0) -> Tensor:
    """Window maximum with -inf padding; ties go to the first cell in row-major order."""
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError(f"invalid maxpool kernel={kernel}, stride={stride}, padding={padding}")
    n, c, h, w = x.shape
    if kernel > h + 2 * padding or kernel > w + 2 * padding:
        raise ValueError(f"maxpool window {kernel} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho, wo = _out_size(h, kernel, stride, padding), _out_size(w, kernel, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        dxp = np.zeros(xp.shape)
        span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for idx in range(kernel * kernel):
            a, b = divmod(idx, kernel)
            dxp[:, :, a : a + span_h : stride, b : b + span_w : stride] += np.where(arg == idx, g, 0.0)
        return (dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp,)

    return _result(out, (x,), bw)


def adaptive_avg_pool2d(x: Tensor, out_size: int = 1) -> Tensor:
    """Global average pooling; only ``out_size == 1`` is supported."""
    if out_size != 1:
        raise ValueError("only global average pooling (out_size=1) is supported")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return _result(out, (x,), lambda g: (np.broadcast_to(g / (h * w), x.shape).copy(),))
