"""Dense float64 tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array and remembers how it was produced; calling
:func:`backward` on a scalar tensor walks the recorded graph in reverse
topological order and accumulates exact gradients into every reachable leaf.
Everything is 64-bit so gradient checks against central finite differences
can be tight.

Shapes follow a channels x height x width layout with an optional leading
batch extent.  There is no general broadcasting: every operation states the
shapes it accepts and raises on anything else.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericError

__all__ = [
    "Tensor",
    "Parameter",
    "backward",
    "add",
    "add_n",
    "scalar_mul",
    "scale",
    "add_channel_bias",
    "relu",
    "softplus",
    "softmax",
    "pick",
    "sum_reduce",
    "mse_loss",
    "conv2d",
    "adam_step",
    "sgd_step",
]


class Tensor:
    """A node in a differentiation graph holding a float64 ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._spent = False

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def assert_finite(self, context: str = "tensor") -> "Tensor":
        if not np.isfinite(self.data).all():
            raise NumericError(f"non-finite values in {context}")
        return self

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A named leaf tensor with persistent optimizer slot buffers."""

    __slots__ = ("name", "m", "v", "step_count")

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = None
        self.v = None
        self.step_count = 0

    def reset_slots(self) -> None:
        self.m = None
        self.v = None
        self.step_count = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _result(data, parents, backward_fn):
    """Wrap an op result, recording the graph edge only when a parent needs it."""
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(node, contribution):
    if node.grad is None:
        node.grad = np.array(contribution, dtype=np.float64, copy=True)
    else:
        node.grad += contribution


def backward(loss: Tensor, params=None):
    """Reverse-mode sweep from a scalar loss.

    Visits the graph below ``loss`` in exact reverse topological order and
    leaves d(loss)/d(leaf) in each reachable leaf's ``.grad``.  When
    ``params`` is given, returns ``{param: gradient}`` with exact zeros for
    parameters the loss does not depend on.  A graph can be swept only once.
    """
    if loss.data.ndim != 0:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.data.shape}")
    if loss._spent:
        raise RuntimeError("backward() called twice on the same graph")
    loss._spent = True

    # Iterative DFS post-order; recursion would overflow on deep unrolled nets.
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    for node in topo:
        node.grad = None
    loss.grad = np.ones((), dtype=np.float64)

    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
        if node is not loss and node._backward is not None:
            # Interior activations are dead after their closure fires.
            node.grad = None
            node._parents = ()
            node._backward = None

    if params is None:
        return None
    grads = {}
    for p in params:
        if id(p) not in visited or p.grad is None:
            p.grad = np.zeros_like(p.data)
        grads[p] = p.grad
    return grads


# ---------------------------------------------------------------------------
# elementwise and reduction ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")

    def back(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _result(a.data + b.data, (a, b), back)


def add_n(tensors) -> Tensor:
    """Sum of same-shaped tensors; one graph node regardless of arity."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("add_n: empty list")
    shape = tensors[0].data.shape
    for t in tensors[1:]:
        if t.data.shape != shape:
            raise ValueError(f"add_n: shape mismatch {t.data.shape} vs {shape}")
    total = tensors[0].data.copy()
    for t in tensors[1:]:
        total += t.data

    def back(g):
        for t in tensors:
            if t.requires_grad:
                _accumulate(t, g)

    return _result(total, tensors, back)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def back(g):
        if a.requires_grad:
            _accumulate(a, c * g)

    return _result(a.data * c, (a,), back)


def scale(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar graph node; differentiable in both."""
    if s.data.ndim != 0:
        raise ValueError(f"scale: scalar expected, got shape {s.data.shape}")
    a_data, s_data = a.data, s.data

    def back(g):
        if a.requires_grad:
            _accumulate(a, s_data * g)
        if s.requires_grad:
            _accumulate(s, np.sum(a_data * g))

    return _result(a_data * s_data, (a, s), back)


def add_channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias to a (C,H,W) or (B,C,H,W) tensor."""
    if b.data.ndim != 1:
        raise ValueError(f"bias must be rank 1, got shape {b.data.shape}")
    if x.data.ndim == 3:
        c_axis, reduce_axes = 0, (1, 2)
    elif x.data.ndim == 4:
        c_axis, reduce_axes = 1, (0, 2, 3)
    else:
        raise ValueError(f"expected rank 3 or 4 input, got shape {x.data.shape}")
    if x.data.shape[c_axis] != b.data.shape[0]:
        raise ValueError(
            f"bias length {b.data.shape[0]} != channel count {x.data.shape[c_axis]}"
        )
    bshape = [1] * x.data.ndim
    bshape[c_axis] = b.data.shape[0]

    def back(g):
        if x.requires_grad:
            _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=reduce_axes))

    return _result(x.data + b.data.reshape(bshape), (x, b), back)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, v); the subgradient at exactly 0 is 0."""
    mask = x.data > 0.0

    def back(g):
        if x.requires_grad:
            _accumulate(x, g * mask)

    return _result(np.where(mask, x.data, 0.0), (x,), back)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(v)), computed overflow-free."""
    d = x.data
    out = np.maximum(d, 0.0) + np.log1p(np.exp(-np.abs(d)))
    sig = 1.0 / (1.0 + np.exp(-d))

    def back(g):
        if x.requires_grad:
            _accumulate(x, g * sig)

    return _result(out, (x,), back)


def softmax(logits: Tensor) -> Tensor:
    """Softmax of a rank-1 tensor, stabilized by max subtraction."""
    if logits.data.ndim != 1 or logits.data.size == 0:
        raise ValueError(f"softmax: nonempty rank-1 input required, got shape {logits.data.shape}")
    shifted = logits.data - logits.data.max()
    e = np.exp(shifted)
    s = e / e.sum()

    def back(g):
        if logits.requires_grad:
            _accumulate(logits, s * (g - np.dot(g, s)))

    return _result(s, (logits,), back)


def pick(v: Tensor, i: int) -> Tensor:
    """Extract element i of a rank-1 tensor as a scalar node."""
    if v.data.ndim != 1:
        raise ValueError(f"pick: rank-1 input required, got shape {v.data.shape}")
    i = int(i)

    def back(g):
        if v.requires_grad:
            contribution = np.zeros_like(v.data)
            contribution[i] = g
            _accumulate(v, contribution)

    return _result(v.data[i], (v,), back)


def sum_reduce(x: Tensor) -> Tensor:
    def back(g):
        if x.requires_grad:
            _accumulate(x, np.full_like(x.data, g))

    return _result(x.data.sum(), (x,), back)


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences over all elements.

    Raises :class:`NumericError` if the prediction is not finite, so a
    diverged forward pass surfaces at the loss instead of propagating.
    """
    if pred.data.shape != target.data.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.data.shape} vs {target.data.shape}")
    if not np.isfinite(pred.data).all():
        raise NumericError("non-finite prediction in mse_loss")
    diff = pred.data - target.data
    n = diff.size

    def back(g):
        coeff = g * 2.0 / n
        if pred.requires_grad:
            _accumulate(pred, coeff * diff)
        if target.requires_grad:
            _accumulate(target, -coeff * diff)

    return _result(np.mean(diff * diff), (pred, target), back)


# ---------------------------------------------------------------------------
# convolution

_EINSUM_PATHS = {}


def _einsum(expr, a, b):
    key = (expr, a.shape, b.shape)
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path = np.einsum_path(expr, a, b, optimize="optimal")[0]
        _EINSUM_PATHS[key] = path
    return np.einsum(expr, a, b, optimize=path)


def _conv_forward(x4, w, dilation, groups):
    """Grouped same-padded cross-correlation on (B,Cin,H,W) input."""
    batch, c_in, height, width = x4.shape
    c_out, cig, k, _ = w.shape
    cog = c_out // groups
    keff = dilation * (k - 1) + 1
    pad = dilation * (k - 1) // 2
    xp = np.pad(x4, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (keff, keff), axis=(2, 3))[..., ::dilation, ::dilation]
    win = win.reshape(batch, groups, cig, height, width, k, k)
    wg = w.reshape(groups, cog, cig, k, k)
    out = _einsum("bgihwuv,goiuv->bgohw", win, wg)
    return np.ascontiguousarray(out.reshape(batch, c_out, height, width)), win


def _conv_grad_kernel(gout, win, groups, wshape):
    batch, c_out, height, width = gout.shape
    gg = gout.reshape(batch, groups, c_out // groups, height, width)
    gw = _einsum("bgohw,bgihwuv->goiuv", gg, win)
    return gw.reshape(wshape)


def _conv_grad_input(gout, w, dilation, groups):
    # Same-padded stride-1 correlation: d/dx is the correlation of the output
    # gradient with the spatially flipped, channel-transposed kernel.
    c_out, cig, k, _ = w.shape
    cog = c_out // groups
    wt = w.reshape(groups, cog, cig, k, k).transpose(0, 2, 1, 3, 4)
    wt = wt[..., ::-1, ::-1].reshape(groups * cig, cog, k, k)
    gx, _ = _conv_forward(gout, np.ascontiguousarray(wt), dilation, groups)
    return gx


def conv2d(x: Tensor, kernel: Tensor, dilation: int = 1, groups: int = 1) -> Tensor:
    """Zero-padded cross-correlation preserving spatial size.

    ``x`` is (C_in,H,W) or (B,C_in,H,W); ``kernel`` is
    (C_out, C_in/groups, k, k) with odd k.  Padding is fixed at
    dilation*(k-1)/2 so output extents equal input extents.
    """
    dilation = int(dilation)
    groups = int(groups)
    if dilation < 1 or groups < 1:
        raise ValueError("dilation and groups must be positive")
    if kernel.data.ndim != 4 or kernel.data.shape[2] != kernel.data.shape[3]:
        raise ValueError(f"kernel must be (C_out, C_in/groups, k, k), got {kernel.data.shape}")
    k = kernel.data.shape[2]
    if k % 2 == 0:
        raise ValueError(f"kernel size must be odd, got {k}")
    batched = x.data.ndim == 4
    if not batched and x.data.ndim != 3:
        raise ValueError(f"input must be rank 3 or 4, got shape {x.data.shape}")
    x4 = x.data if batched else x.data[None]
    c_in = x4.shape[1]
    c_out = kernel.data.shape[0]
    if c_in % groups != 0 or c_out % groups != 0:
        raise ValueError(f"channel counts ({c_in}, {c_out}) not divisible by groups={groups}")
    if kernel.data.shape[1] != c_in // groups:
        raise ValueError(
            f"kernel expects {kernel.data.shape[1]} input channels per group, got {c_in // groups}"
        )

    out4, win = _conv_forward(x4, kernel.data, dilation, groups)
    _conv_mac_counter.add(out4.size * kernel.data.shape[1] * k * k)
    wshape = kernel.data.shape

    def back(g):
        g4 = g if batched else g[None]
        g4 = np.ascontiguousarray(g4)
        if kernel.requires_grad:
            _accumulate(kernel, _conv_grad_kernel(g4, win, groups, wshape))
        if x.requires_grad:
            gx = _conv_grad_input(g4, kernel.data, dilation, groups)
            _accumulate(x, gx if batched else gx[0])

    return _result(out4 if batched else out4[0], (x, kernel), back)


class _MacCounter:
    """Tally of convolution multiply-accumulates, used by FLOP-count tests."""

    def __init__(self):
        self.enabled = False
        self.total = 0

    def add(self, macs):
        if self.enabled:
            self.total += int(macs)

    def start(self):
        self.enabled = True
        self.total = 0

    def stop(self) -> int:
        self.enabled = False
        return self.total


_conv_mac_counter = _MacCounter()


# ---------------------------------------------------------------------------
# optimizer steps


def adam_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8,
              weight_decay=0.0, decoupled=False):
    """One bias-corrected adaptive-moment step on each parameter.

    ``grads`` maps each Parameter to its gradient array.  With
    ``decoupled=True`` the weight decay acts directly on the weights
    (decoupled AdamW semantics); otherwise it is added to the gradient.
    """
    for p in params:
        g = grads[p]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if p.m is None:
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
        if weight_decay != 0.0 and not decoupled:
            g = g + weight_decay * p.data
        p.step_count += 1
        t = p.step_count
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** t)
        v_hat = p.v / (1.0 - beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay != 0.0 and decoupled:
            update = update + weight_decay * p.data
        p.data -= lr * update


def sgd_step(params, grads, lr):
    """Plain gradient descent, used by the literal update-rule fidelity mode."""
    for p in params:
        g = grads[p]
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
        p.data -= lr * g
