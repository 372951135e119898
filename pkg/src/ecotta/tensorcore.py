"""Reverse-mode autodiff over dense numpy arrays, with an activation ledger.

Every differentiable op builds a :class:`GraphNode` when at least one input
requires a gradient. A node whose op owns a *trainable* weight (linear, conv,
BN affine) keeps the input it needs for the weight gradient in
``saved_activations`` and records its byte size in the thread-local
:class:`ActivationLedger`. Frozen weight-bearing ops keep nothing of the sort:
their input gradient only needs the weight itself.

State that is needed purely to propagate input gradients through elementwise
ops (ReLU masks, the normalised input of a frozen batch-statistics BN) is held
in the backward closure but is not ledger-counted.

There is no implicit broadcasting: binary ops require identical shapes, and
the only broadcast is the bias/affine add inside linear and batchnorm.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    ConfigurationError,
    DimensionError,
    LabelError,
    LifecycleError,
    NumericError,
    StatisticsError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_FLOAT_TYPES = (np.float32, np.float64)


# ---------------------------------------------------------------------------
# thread-local engine state


@dataclass
class ActivationLedger:
    """Byte counts of activations saved for weight gradients in one forward pass."""

    entries: list = field(default_factory=list)

    def record(self, op, nbytes):
        self.entries.append((op, int(nbytes)))

    @property
    def total_bytes(self):
        return sum(n for _, n in self.entries)

    def reset(self):
        self.entries.clear()


class _EngineState(threading.local):
    def __init__(self):
        self.grad_enabled = True
        self.ledger = ActivationLedger()


_state = _EngineState()


def current_ledger():
    return _state.ledger


def reset_ledger():
    _state.ledger.reset()


def ledger_bytes():
    """Total saved-activation bytes recorded since the last reset."""
    return _state.ledger.total_bytes


def grad_enabled():
    return _state.grad_enabled


@contextmanager
def no_grad():
    """Disable graph construction (and hence ledger recording) in this thread."""
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ---------------------------------------------------------------------------
# tensors and graph nodes


def _as_array(data, dtype=None):
    if dtype is not None:
        return np.ascontiguousarray(data, dtype=dtype)
    if isinstance(data, np.ndarray) and data.dtype.type in _FLOAT_TYPES:
        return data
    return np.asarray(data, dtype=np.float32)


class Tensor:
    """An n-dimensional float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def numel(self):
        return int(self.data.size)

    @property
    def node(self):
        return self._node

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"


class Parameter(Tensor):
    """A leaf tensor owned by a layer; ``frozen`` parameters get no gradient.

    ``velocity`` is the momentum buffer used by :func:`sgd_step`.
    """

    __slots__ = ("velocity",)

    def __init__(self, data, frozen=False, dtype=None, name=None):
        super().__init__(data, requires_grad=not frozen, dtype=dtype, name=name)
        self.velocity = None

    @property
    def frozen(self):
        return not self.requires_grad

    @frozen.setter
    def frozen(self, value):
        self.requires_grad = not value
        if value:
            self.grad = None


class GraphNode:
    """One recorded op: its inputs, backward rule and ledger-counted saves."""

    __slots__ = ("op", "inputs", "saved_activations", "frozen", "backward_fn", "consumed")

    def __init__(self, op, inputs, backward_fn, saved_activations=(), frozen=False):
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.saved_activations = list(saved_activations)
        self.frozen = frozen
        self.consumed = False

    @property
    def saved_bytes(self):
        return sum(a.nbytes for a in self.saved_activations)

    def release(self):
        self.backward_fn = None
        self.saved_activations = []
        self.consumed = True

    def __repr__(self):
        return f"GraphNode({self.op}, inputs={len(self.inputs)}, saved={self.saved_bytes}B)"


def _wrap(op, data, inputs, backward_fn, saved=(), weights=()):
    """Package an op result; attach a node only when some input needs a gradient."""
    out = Tensor(data)
    if not (_state.grad_enabled and any(t.requires_grad for t in inputs)):
        return out
    node = GraphNode(
        op,
        inputs,
        backward_fn,
        saved_activations=saved,
        frozen=bool(weights) and not any(w.requires_grad for w in weights),
    )
    if node.saved_activations:
        _state.ledger.record(op, node.saved_bytes)
    out.requires_grad = True
    out._node = node
    return out


def _tracking(*tensors):
    return _state.grad_enabled and any(t is not None and t.requires_grad for t in tensors)


def _trainable(*weights):
    return _state.grad_enabled and any(w is not None and w.requires_grad for w in weights)


def detach(x):
    """Same values, no graph connection; the data buffer is shared."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# backward


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for t in node.inputs:
            if t.requires_grad and t._node is not None and id(t._node) not in seen:
                stack.append((t._node, False))
    order.reverse()
    return order


def _accumulate_leaf(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.shape)
    else:
        t.grad += g


def backward(loss):
    """Accumulate d(loss)/d(leaf) into every trainable leaf reachable from ``loss``.

    The graph is single-use: nodes release their saved state as they are
    processed, and a second call on the same graph raises
    :class:`LifecycleError`.
    """
    if loss.numel != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    root = loss._node
    if root is None:
        _accumulate_leaf(loss, np.ones_like(loss.data))
        return
    if root.consumed:
        raise LifecycleError("backward called on a graph that was already consumed")
    order = _toposort(root)
    for node in order:
        if node.consumed:
            raise LifecycleError(f"graph node {node.op!r} was consumed by an earlier backward")
    pending = {id(root): np.ones_like(loss.data)}
    for node in order:
        g = pending.pop(id(node), None)
        if g is None:
            node.release()
            continue
        needs = tuple(t.requires_grad for t in node.inputs)
        in_grads = node.backward_fn(g, needs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._node is None:
                _accumulate_leaf(t, gi)
            else:
                key = id(t._node)
                pending[key] = gi if key not in pending else pending[key] + gi
        node.release()


def isolate(out, boundary):
    """Re-root the subgraph between ``boundary`` and ``out`` on detached inputs.

    Returns a tensor with the values of ``out`` whose gradient reaches only the
    leaves (parameters) inside that subgraph: every boundary tensor is replaced
    by a detached copy. Backward rules and saved activations are shared with
    the original nodes, so nothing is recomputed and nothing new is recorded
    in the ledger.
    """
    stops = {id(b) for b in boundary}
    clones = {}

    def clone(t):
        if id(t) in stops:
            return detach(t)
        if t._node is None or not t.requires_grad:
            return t
        if id(t) in clones:
            return clones[id(t)]
        node = t._node
        inputs = tuple(clone(i) for i in node.inputs)
        new = Tensor(t.data)
        if any(i.requires_grad for i in inputs):
            new.requires_grad = True
            new._node = GraphNode(node.op, inputs, node.backward_fn, frozen=node.frozen)
        clones[id(t)] = new
        return new

    return clone(out)


# ---------------------------------------------------------------------------
# optimisation helpers


def sgd_step(params, lr, momentum=0.0):
    """``w <- w - lr * v`` with ``v <- momentum * v + grad`` (``v = grad`` when momentum is 0).

    Only trainable parameters holding a gradient move; the velocity buffer
    is kept on each :class:`Parameter`.
    """
    for p in params:
        if p.requires_grad and p.grad is not None:
            if not momentum:
                p.data -= lr * p.grad
                continue
            v = p.grad.copy() if p.velocity is None else momentum * p.velocity + p.grad
            p.velocity = v
            p.data -= lr * v


def reset_momentum(params):
    for p in params:
        p.velocity = None


def zero_grad(params):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# weight-bearing ops


def linear(x, w, b=None):
    """``x @ w + b`` for ``x: [B, I]``, ``w: [I, O]``, ``b: [O]``."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: cannot multiply x{x.shape} by w{w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match w{w.shape}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    inputs = (x, w) if b is None else (x, w, b)
    if not _tracking(*inputs):
        return Tensor(out)
    keep = x.data if _trainable(w) else None
    wd = w.data

    def bw(g, needs):
        gx = g @ wd.T if needs[0] else None
        gw = keep.T @ g if needs[1] else None
        if b is None:
            return gx, gw
        return gx, gw, (g.sum(axis=0) if needs[2] else None)

    saved = (keep,) if keep is not None else ()
    return _wrap("linear", out, inputs, bw, saved=saved, weights=(w,))


def _check_conv(x, kernel, stride, padding):
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    o, c, kh, kw = kernel.shape
    if kh != kw or kh not in (1, 3):
        raise ConfigurationError(f"conv2d supports 1x1 and 3x3 kernels, got {kh}x{kw}")
    if padding is None:
        padding = kh // 2
    if padding != kh // 2:
        raise ConfigurationError(f"conv2d: kernel {kh} requires padding {kh // 2}, got {padding}")
    if x.shape[1] != c:
        raise DimensionError(f"conv2d: input has {x.shape[1]} channels, kernel expects {c}")
    if stride < 1:
        raise ConfigurationError(f"conv2d: stride must be >= 1, got {stride}")
    return kh, padding


def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def _im2col(x, k, stride, pad):
    b, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    if k == 1:
        return x[:, :, ::stride, ::stride].reshape(b, c, ho * wo), ho, wo
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = x
    sb, sc, sh, sw = xp.strides
    win = as_strided(xp, shape=(b, c, k, k, ho, wo), strides=(sb, sc, sh, sw, sh * stride, sw * stride))
    return win.reshape(b, c * k * k, ho * wo), ho, wo


def _col2im(dcols, x_shape, k, stride, pad, ho, wo):
    b, c, h, w = x_shape
    if k == 1:
        dx = np.zeros(x_shape, dtype=dcols.dtype)
        dx[:, :, ::stride, ::stride] = dcols.reshape(b, c, ho, wo)
        return dx
    d = dcols.reshape(b, c, k * k, ho, wo)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, i * k + j]
    return dxp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x, kernel, stride=1, padding=None):
    """Bias-free cross-correlation, ``x: [B, C, H, W]``, ``kernel: [O, C, k, k]``."""
    k, pad = _check_conv(x, kernel, stride, padding)
    o = kernel.shape[0]
    b = x.shape[0]
    cols, ho, wo = _im2col(x.data, k, stride, pad)
    wm = kernel.data.reshape(o, -1)
    out = np.matmul(wm, cols).reshape(b, o, ho, wo)
    if not _tracking(x, kernel):
        return Tensor(out)
    keep = x.data if _trainable(kernel) else None
    x_shape = x.shape
    kshape = kernel.shape

    def bw(g, needs):
        gm = g.reshape(b, o, ho * wo)
        gx = gk = None
        if needs[0]:
            gx = _col2im(np.matmul(wm.T, gm), x_shape, k, stride, pad, ho, wo)
        if needs[1]:
            c, _, _ = _im2col(keep, k, stride, pad)
            gk = np.tensordot(gm, c, axes=([0, 2], [0, 2])).reshape(kshape)
        return gx, gk

    saved = (keep,) if keep is not None else ()
    return _wrap("conv2d", out, (x, kernel), bw, saved=saved, weights=(kernel,))


class BatchNormParams:
    """Affine parameters and running statistics of one BN layer."""

    def __init__(self, num_features, eps=BN_EPS, momentum=BN_MOMENTUM, frozen=False, name=None, dtype=np.float32):
        self.num_features = int(num_features)
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(num_features, dtype=dtype), frozen=frozen, name=f"{name}.gamma" if name else None)
        self.beta = Parameter(np.zeros(num_features, dtype=dtype), frozen=frozen, name=f"{name}.beta" if name else None)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.name = name

    def parameters(self):
        return [self.gamma, self.beta]

    def set_frozen(self, frozen):
        self.gamma.frozen = frozen
        self.beta.frozen = frozen

    def source_stats(self):
        return self.running_mean, self.running_var


def adaptbn_stats(source, batch, n, b):
    """Mix source and batch BN statistics with pseudo-count ``n``.

    ``mean = (n * mu_s + b * mu_t) / (n + b)``; the variance uses the same
    convex weights. Returns ``(mean, var)``.
    """
    if n < 0 or b < 0:
        raise ConfigurationError(f"adaptbn_stats: counts must be non-negative, got N={n}, B={b}")
    if n + b == 0:
        raise ConfigurationError("adaptbn_stats: N + B must be positive")
    mu_s, var_s = source
    mu_t, var_t = batch
    w = b / (n + b)
    return w * mu_t + (1.0 - w) * mu_s, w * var_t + (1.0 - w) * var_s


def batchnorm(x, bn, mode="train", adapt_n=None, update_stats=True):
    """Batch normalisation over the channel axis of ``[B, C]`` or ``[B, C, H, W]``.

    mode
        ``"train"`` normalises with (biased) batch statistics and, when
        ``update_stats`` is true, moves the running statistics by
        ``bn.momentum``. ``"eval"`` uses the running statistics.
        ``"adaptbn"`` uses :func:`adaptbn_stats` with pseudo-count
        ``adapt_n``, treating the running statistics as the source.

    The output is computed in factored form ``x * a + b`` with
    ``a = gamma / sqrt(var + eps)`` and ``b = beta - mean * a``.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"batchnorm expects [B, C] or [B, C, H, W], got {x.shape}")
    c = x.shape[1]
    if c != bn.num_features:
        raise DimensionError(f"batchnorm: input has {c} channels, layer has {bn.num_features}")
    if mode not in ("train", "eval", "adaptbn"):
        raise ConfigurationError(f"unknown batchnorm mode {mode!r}")
    xd = x.data
    axes = (0,) if xd.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if xd.ndim == 2 else (1, c, 1, 1)
    m = xd.size // c
    nb = xd.shape[0]

    if mode == "eval":
        w = 0.0
        mu, var = bn.running_mean, bn.running_var
        mu_t = None
    else:
        if mode == "train" and m < 2:
            raise StatisticsError(
                f"batchnorm train mode needs at least 2 values per channel, got {m} (input {xd.shape})"
            )
        mu_t = xd.mean(axis=axes)
        var_t = xd.var(axis=axes)
        if mode == "train":
            w = 1.0
            mu, var = mu_t, var_t
            if update_stats:
                mom = bn.momentum
                bn.running_mean = ((1 - mom) * bn.running_mean + mom * mu_t).astype(bn.running_mean.dtype)
                bn.running_var = ((1 - mom) * bn.running_var + mom * var_t).astype(bn.running_var.dtype)
        else:
            if adapt_n is None:
                raise ConfigurationError("batchnorm adaptbn mode needs adapt_n")
            w = nb / (adapt_n + nb)
            mu, var = adaptbn_stats((bn.running_mean, bn.running_var), (mu_t, var_t), adapt_n, nb)
    mu = np.asarray(mu, dtype=xd.dtype)
    std = np.sqrt(np.asarray(var, dtype=xd.dtype) + xd.dtype.type(bn.eps))
    inv = (1.0 / std).astype(xd.dtype)
    gamma, beta = bn.gamma.data.astype(xd.dtype, copy=False), bn.beta.data.astype(xd.dtype, copy=False)
    # gamma / std (not gamma * inv) keeps gamma == std an exact unit scale
    a = gamma / std
    shift = beta - mu * a
    out = xd * a.reshape(bshape) + shift.reshape(bshape)

    inputs = (x, bn.gamma, bn.beta)
    if not _tracking(*inputs):
        return Tensor(out)
    affine = _trainable(bn.gamma, bn.beta)
    need_xhat = affine or (x.requires_grad and w > 0)
    xhat = ((xd - mu.reshape(bshape)) * inv.reshape(bshape)) if need_xhat else None
    shift_t = (mu - mu_t).reshape(bshape) if (mu_t is not None and w > 0) else None
    a_b, inv_b, gamma_b = a.reshape(bshape), inv.reshape(bshape), gamma.reshape(bshape)

    def bw(g, needs):
        gx = gg = gb = None
        if needs[1]:
            gg = (g * xhat).sum(axis=axes)
        if needs[2]:
            gb = g.sum(axis=axes)
        if needs[0]:
            if w == 0.0:
                gx = g * a_b
            else:
                gh = g * gamma_b
                s1 = gh.sum(axis=axes).reshape(bshape)
                s2 = (gh * xhat).sum(axis=axes).reshape(bshape)
                centred_t = xhat / inv_b + shift_t
                gx = inv_b * (gh - (w / m) * s1 - (w / m) * s2 * centred_t * inv_b)
        return gx, gg, gb

    saved = (xhat,) if affine else ()
    return _wrap("batchnorm", out, inputs, bw, saved=saved, weights=(bn.gamma, bn.beta))


# ---------------------------------------------------------------------------
# weight-free ops


def relu(x):
    """Rectifier. The derivative at exactly 0 is taken as 1, so a branch
    whose pre-activation starts at 0 (zero-initialised BN) still receives
    gradient."""
    out = np.maximum(x.data, 0)
    if not _tracking(x):
        return Tensor(out)
    mask = x.data >= 0
    return _wrap("relu", out, (x,), lambda g, needs: (g * mask,))


def residual_add(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"residual_add: shapes {a.shape} and {b.shape} differ")
    return _wrap("add", a.data + b.data, (a, b), lambda g, needs: (g, g))


add = residual_add


def scale(x, c):
    """Multiply by a python scalar."""
    c = float(c)
    return _wrap("scale", x.data * c, (x,), lambda g, needs: (g * c,))


def global_avg_pool(x):
    """Mean over the spatial axes: ``[B, C, H, W] -> [B, C]``."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    n = h * w

    def bw(g, needs):
        return (np.broadcast_to((g / n)[:, :, None, None], (b, c, h, w)).copy(),)

    return _wrap("avgpool", out, (x,), bw)


def sum_all(x):
    shape = x.shape
    return _wrap("sum", np.asarray(x.data.sum()), (x,), lambda g, needs: (np.full(shape, g, dtype=x.dtype),))


def mean(x):
    shape, n = x.shape, x.numel
    return _wrap("mean", np.asarray(x.data.mean()), (x,), lambda g, needs: (np.full(shape, g / n, dtype=x.dtype),))


def masked_mean(x, mask):
    """``(1/B) * sum_i mask_i * x_i`` for ``x: [B]``; masked-out entries get zero gradient."""
    if x.ndim != 1:
        raise DimensionError(f"masked_mean expects a 1-d tensor, got {x.shape}")
    mask = np.asarray(mask, dtype=x.dtype).reshape(x.shape)
    n = x.shape[0]
    out = np.asarray((x.data * mask).sum() / n)
    return _wrap("masked_mean", out, (x,), lambda g, needs: (g * mask / n,))


def _target_array(x, target):
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != x.shape:
        raise DimensionError(f"loss target shape {t.shape} does not match {x.shape}")
    return t


def l1_loss(x, target):
    """Mean absolute difference to a constant target (no gradient into the target)."""
    t = _target_array(x, target)
    diff = x.data - t
    n = x.numel
    out = np.asarray(np.abs(diff).mean())
    return _wrap("l1", out, (x,), lambda g, needs: (g * np.sign(diff) / n,))


def mse_loss(x, target):
    """Mean squared difference to a constant target."""
    t = _target_array(x, target)
    diff = x.data - t
    n = x.numel
    out = np.asarray((diff * diff).mean())
    return _wrap("mse", out, (x,), lambda g, needs: (g * 2.0 * diff / n,))


def _log_softmax(z):
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite logits")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return shifted - lse


def _check_logits(logits):
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B, C], got {logits.shape}")
    if logits.shape[1] < 2:
        raise DimensionError(f"need at least 2 classes, got {logits.shape[1]}")


def softmax(logits):
    _check_logits(logits)
    return np.exp(_log_softmax(logits.data))


def entropy(logits):
    """Per-sample Shannon entropy (nats) of ``softmax(logits)``: ``[B, C] -> [B]``."""
    _check_logits(logits)
    logp = _log_softmax(logits.data)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)

    def bw(g, needs):
        return (-g[:, None] * p * (logp + h[:, None]),)

    return _wrap("entropy", h, (logits,), bw)


def batch_mean_entropy(logits):
    """Entropy of the batch-averaged softmax prediction (a scalar)."""
    _check_logits(logits)
    logp = _log_softmax(logits.data)
    p = np.exp(logp)
    n = p.shape[0]
    ybar = p.mean(axis=0)
    out = np.asarray(-(ybar * np.log(ybar)).sum())

    def bw(g, needs):
        u = -np.log(ybar)
        inner = (p * u).sum(axis=1, keepdims=True)
        return ((g / n) * p * (u - inner),)

    return _wrap("batch_mean_entropy", out, (logits,), bw)


def cross_entropy(logits, labels):
    """Mean negative log-probability of the true class."""
    _check_logits(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise LabelError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    logp = _log_softmax(logits.data)
    rows = np.arange(n)
    out = np.asarray(-logp[rows, labels].mean())

    def bw(g, needs):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return _wrap("cross_entropy", out, (logits,), bw)
