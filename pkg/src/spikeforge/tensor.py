"""Dense tensors, reverse-mode autodiff and the layer kernels both networks use.

Tensors wrap a numpy array (float32 unless created from float64 data, which is
kept for gradient checking). Every differentiable operation records its
parents and a backward closure; :meth:`Tensor.backward` walks the resulting
graph in reverse topological order, visiting each node once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:  # optional fast path for the raw convolution kernels
    import torch
    import torch.nn.functional as F
except ImportError:  # pragma: no cover - exercised only without torch
    torch = None

DEFAULT_DTYPE = np.float32
# set to False to force the pure-numpy kernels
USE_TORCH_KERNELS = torch is not None


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent."""


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype == np.float64 and isinstance(data, (np.ndarray, np.float64)):
        return arr
    return arr.astype(DEFAULT_DTYPE, copy=False)


class Tensor:
    """N-dimensional array node in the autodiff graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None,
                 _parents: tuple = (), _op: str = ""):
        self.data = _as_array(data, dtype)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.data.dtype)
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Back-propagate from this node into every leaf with ``requires_grad``.

        Without ``grad`` the node must be a scalar.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward(g):
                if parent is None or pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    pg = _unbroadcast(pg, parent.shape)
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(ensure_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(ensure_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = ensure_tensor(other, self.dtype)
        return mul(self, power(other, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def ensure_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str,
          backward: Callable[[np.ndarray], Iterable]) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, dtype=data.dtype, _parents=tuple(parents), _op=op)
    if requires:
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = ensure_tensor(a)
    b = ensure_tensor(b, a.dtype)
    return _node(a.data + b.data, (a, b), "add", lambda g: ((a, g), (b, g)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), "neg", lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a = ensure_tensor(a)
    b = ensure_tensor(b, a.dtype)
    return _node(a.data * b.data, (a, b), "mul",
                 lambda g: ((a, g * b.data), (b, g * a.data)))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _node(out, (a,), "pow",
                 lambda g: ((a, g * exponent * a.data ** (exponent - 1)),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), "exp", lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), "log", lambda g: ((a, g / a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), "sigmoid", lambda g: ((a, g * out * (1 - out)),))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow."""
    out = np.logaddexp(0, a.data).astype(a.dtype, copy=False)
    return _node(out, (a,), "softplus", lambda g: ((a, g * _sigmoid(a.data)),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), "relu", lambda g: ((a, g * mask),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split on sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis), dtype=a.dtype)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).astype(a.dtype)),)

    return _node(out, (a,), "sum", backward)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis) * (1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: ((a, g.reshape(a.shape)),))


def straight_through(surrogate: Tensor, value: np.ndarray) -> Tensor:
    """Return a node whose value is ``value`` but whose gradient flows into ``surrogate``.

    This is how spiking forward passes are paired with smooth backward passes.
    """
    value = np.asarray(value, dtype=surrogate.dtype)
    if value.shape != surrogate.shape:
        raise ShapeError(f"straight-through value {value.shape} vs surrogate {surrogate.shape}")
    return _node(value, (surrogate,), "straight_through", lambda g: ((surrogate, g),))


# ---------------------------------------------------------------------------
# layer kernels (raw numpy, batch-first NCHW)
# ---------------------------------------------------------------------------

def _same_padding(k: int) -> tuple[int, int]:
    total = k - 1
    return total // 2, total - total // 2


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """im2col matrix of shape (N*H'*W', C*kh*kw) for a pre-padded NCHW input."""
    n, c = x.shape[:2]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv_forward(xp: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    if USE_TORCH_KERNELS:
        with torch.no_grad():
            return F.conv2d(torch.from_numpy(np.ascontiguousarray(xp)),
                            torch.from_numpy(np.ascontiguousarray(k, dtype=xp.dtype)),
                            stride=stride).numpy()
    return _conv_forward_np(xp, k, stride)


def _conv_forward_np(xp: np.ndarray, k: np.ndarray, stride: int) -> np.ndarray:
    cout, cin, kh, kw = k.shape
    n = xp.shape[0]
    if kh == stride and kw == stride and xp.shape[2] % stride == 0 and xp.shape[3] % stride == 0:
        # non-overlapping windows: a reshape replaces sliding_window_view
        ho, wo = xp.shape[2] // stride, xp.shape[3] // stride
        cols = (xp.reshape(n, cin, ho, kh, wo, kw).transpose(0, 2, 4, 1, 3, 5)
                .reshape(n * ho * wo, cin * kh * kw))
    else:
        cols, ho, wo = _windows(xp, kh, kw, stride)
    out = cols @ k.reshape(cout, -1).T
    return out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)


def _conv_input_grad(g: np.ndarray, k: np.ndarray, stride: int,
                     xp_shape: tuple[int, ...]) -> np.ndarray:
    if USE_TORCH_KERNELS:
        ho, wo = g.shape[2:]
        kh, kw = k.shape[2:]
        extra = (xp_shape[2] - ((ho - 1) * stride + kh), xp_shape[3] - ((wo - 1) * stride + kw))
        with torch.no_grad():
            return F.conv_transpose2d(torch.from_numpy(np.ascontiguousarray(g)),
                                      torch.from_numpy(np.ascontiguousarray(k, dtype=g.dtype)),
                                      stride=stride, output_padding=extra).numpy()
    return _conv_input_grad_np(g, k, stride, xp_shape)


def _conv_input_grad_np(g: np.ndarray, k: np.ndarray, stride: int,
                        xp_shape: tuple[int, ...]) -> np.ndarray:
    n, cout, ho, wo = g.shape
    _, cin, kh, kw = k.shape
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    dcols = (gm @ k.reshape(cout, -1)).reshape(n, ho, wo, cin, kh, kw)
    if kh == stride and kw == stride and xp_shape[2] == ho * kh and xp_shape[3] == wo * kw:
        return dcols.transpose(0, 3, 1, 4, 2, 5).reshape(xp_shape)
    dx = np.zeros(xp_shape, dtype=g.dtype)
    dcols = dcols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
    return dx


def _conv_kernel_grad(xp: np.ndarray, g: np.ndarray, k_shape: tuple[int, ...],
                      stride: int) -> np.ndarray:
    cout, cin, kh, kw = k_shape
    n, _, ho, wo = g.shape
    if kh == stride and kw == stride and xp.shape[2] == ho * kh and xp.shape[3] == wo * kw:
        cols = (xp.reshape(n, cin, ho, kh, wo, kw).transpose(0, 2, 4, 1, 3, 5)
                .reshape(n * ho * wo, cin * kh * kw))
    else:
        cols, _, _ = _windows(xp, kh, kw, stride)
    gm = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
    return (gm.T @ cols).reshape(k_shape)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected a C,H,W or N,C,H,W tensor, got shape {x.shape}")
    return x, False


def conv2d(x, kernel, stride: int = 1, padding: str = "valid", bias=None) -> Tensor:
    """2-D cross-correlation with optional per-channel bias.

    ``kernel`` has layout (C_out, C_in, kH, kW); ``x`` is (C, H, W) or (N, C, H, W).
    """
    x = ensure_tensor(x)
    kernel = ensure_tensor(kernel, x.dtype)
    xb, squeeze = _batched(x)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D, got shape {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if xb.shape[1] != cin:
        raise ShapeError(f"input has {xb.shape[1]} channels, kernel expects {cin}")
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_padding(kh), _same_padding(kw)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding mode {padding!r}")
    xp = np.pad(xb.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))) if (pt or pb or pl or pr) else xb.data
    if kh > xp.shape[2] or kw > xp.shape[3]:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    out = _conv_forward(xp, kernel.data, stride)
    parents = [xb, kernel]
    if bias is not None:
        bias = ensure_tensor(bias, x.dtype)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        dxp = _conv_input_grad(g, kernel.data, stride, xp.shape) if xb.requires_grad else None
        if dxp is not None and (pt or pb or pl or pr):
            dxp = dxp[:, :, pt:pt + xb.shape[2], pl:pl + xb.shape[3]]
        grads = [(xb, dxp)]
        if kernel.requires_grad:
            grads.append((kernel, _conv_kernel_grad(xp, g, kernel.shape, stride)))
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    res = _node(out.astype(x.dtype, copy=False), parents, "conv2d", backward)
    return reshape(res, res.shape[1:]) if squeeze else res


def conv2d_transpose(x, kernel, stride: int = 1, bias=None) -> Tensor:
    """Adjoint of a valid ``conv2d`` at the same stride.

    ``kernel`` uses the forward-conv layout (C_in_of_x, C_out, kH, kW), so
    ``dot(conv2d(a, k), y) == dot(a, conv2d_transpose(y, k))``.
    Output spatial size is ``(H - 1) * stride + kH``.
    """
    x = ensure_tensor(x)
    kernel = ensure_tensor(kernel, x.dtype)
    xb, squeeze = _batched(x)
    if kernel.ndim != 4:
        raise ShapeError(f"kernel must be 4-D, got shape {kernel.shape}")
    cy, cout, kh, kw = kernel.shape
    if xb.shape[1] != cy:
        raise ShapeError(f"input has {xb.shape[1]} channels, transpose kernel expects {cy}")
    n, _, h, w = xb.shape
    out_shape = (n, cout, (h - 1) * stride + kh, (w - 1) * stride + kw)
    out = _conv_input_grad(xb.data, kernel.data, stride, out_shape)
    parents = [xb, kernel]
    if bias is not None:
        bias = ensure_tensor(bias, x.dtype)
        if bias.shape != (cout,):
            raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
        out = out + bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        grads = []
        if xb.requires_grad:
            grads.append((xb, _conv_forward(g, kernel.data, stride)))
        if kernel.requires_grad:
            grads.append((kernel, _conv_kernel_grad(g, xb.data, kernel.shape, stride)))
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3))))
        return grads

    res = _node(out.astype(x.dtype, copy=False), parents, "conv2d_transpose", backward)
    return reshape(res, res.shape[1:]) if squeeze else res


def avg_pool2d(x, window: int) -> Tensor:
    """Non-overlapping average pooling; spatial dims must divide by ``window``."""
    x = ensure_tensor(x)
    xb, squeeze = _batched(x)
    n, c, h, w = xb.shape
    if window < 1 or h % window or w % window:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by pooling window {window}")
    out = xb.data.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))
    scale = 1.0 / (window * window)

    def backward(g):
        up = np.repeat(np.repeat(g, window, axis=2), window, axis=3) * scale
        return ((xb, up.astype(xb.dtype, copy=False)),)

    res = _node(out.astype(x.dtype, copy=False), (xb,), "avg_pool2d", backward)
    return reshape(res, res.shape[1:]) if squeeze else res


def dense(x, weights, bias=None) -> Tensor:
    """``W @ x + b`` for ``x`` of shape (N_in,) or (batch, N_in)."""
    x = ensure_tensor(x)
    weights = ensure_tensor(weights, x.dtype)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    out = x.data @ weights.data.T
    parents = [x, weights]
    if bias is not None:
        bias = ensure_tensor(bias, x.dtype)
        if bias.shape != (weights.shape[0],):
            raise ShapeError(f"dense: bias {bias.shape} vs {weights.shape[0]} outputs")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [(x, g @ weights.data)]
        if weights.requires_grad:
            grads.append((weights, np.outer(g, x.data) if g.ndim == 1 else g.T @ x.data))
        if bias is not None:
            grads.append((bias, g if g.ndim == 1 else g.sum(axis=0)))
        return grads

    return _node(out.astype(x.dtype, copy=False), parents, "dense", backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments plus shared hyperparameters."""

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, param: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns the new parameter array and state."""
    param = np.asarray(param)
    grad = np.asarray(grad, dtype=param.dtype)
    if grad.shape != param.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    m = np.zeros_like(param) if state.m is None else state.m
    v = np.zeros_like(param) if state.v is None else state.v
    t = state.step + 1
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    new = param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    nstate = AdamState(state.lr, state.beta1, state.beta2, state.eps, t, m, v)
    return new.astype(param.dtype, copy=False), nstate


@dataclass
class Adam:
    """Adam over a list of parameter tensors, updated in place."""

    params: list[Tensor]
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        self.states = [AdamState(self.lr, self.beta1, self.beta2, self.eps) for _ in self.params]

    def step(self) -> None:
        for i, p in enumerate(self.params):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.states[i] = adam_step(self.states[i], p.data, grad)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
