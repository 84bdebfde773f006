"""Reverse-mode differentiation over float64 numpy arrays.

The expression graph is the tape: every operation returns a `Tensor` node
holding its inputs and a backward closure, and `Tensor.backward()` walks the
nodes in reverse topological order, so each node's inputs are visited after
the node itself and one pass fills the gradient of every reachable leaf.

The op set is closed: everything the restoration networks and losses need
compiles to the functions below, and each op carries a finite-difference
test. Elementwise ops broadcast with numpy semantics; gradients are summed
back onto the original shapes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ndtensor as nd


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


class Tensor:
    """Graph node: float64 value plus links to the inputs that produced it."""

    def __init__(self, data, _prev=(), _op: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in op '{_op or 'leaf'}'")
        self.grad = None
        self._prev = tuple(_prev)
        self._backward = None
        self._op = _op

    # -- graph plumbing ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def accum_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value with no graph history (constant leaf)."""
        return Tensor(self.data.copy())

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar output, got shape {self.shape}")
        # iterative DFS; training graphs can exceed the recursion limit
        topo, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    # method forms; dispatch through module globals so tests can patch ops
    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return abs_(self)

    def power(self, p):
        return power(self, p)

    def clamp(self, lo, hi):
        return clamp(self, lo, hi)

    def mean(self, axes=None, keepdims=False):
        return mean(self, axes, keepdims)

    def sum(self, axes=None, keepdims=False):
        return sum_(self, axes, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def item(self) -> float:
        return float(self.data.reshape(()))


class Param(Tensor):
    """Named learnable leaf, optionally with clamp bounds re-applied after
    every optimizer step."""

    def __init__(self, value, name: str, lo: float = None, hi: float = None):
        super().__init__(value)
        self.name = name
        self.lo = lo
        self.hi = hi

    def apply_bounds(self) -> None:
        if self.lo is not None or self.hi is not None:
            np.clip(self.data, self.lo, self.hi, out=self.data)

    def __repr__(self):
        return f"Param({self.name}, shape={self.shape})"


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def constant(x) -> Tensor:
    return _lift(x)


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data, (a, b), "add")

    def bw():
        a.accum_grad(_unbroadcast(out.grad, a.data.shape))
        b.accum_grad(_unbroadcast(out.grad, b.data.shape))

    out._backward = bw
    return out


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data - b.data, (a, b), "sub")

    def bw():
        a.accum_grad(_unbroadcast(out.grad, a.data.shape))
        b.accum_grad(_unbroadcast(-out.grad, b.data.shape))

    out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data, (a, b), "mul")

    def bw():
        a.accum_grad(_unbroadcast(out.grad * b.data, a.data.shape))
        b.accum_grad(_unbroadcast(out.grad * a.data, b.data.shape))

    out._backward = bw
    return out


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Tensor(a.data / b.data, (a, b), "div")  # finite guard raises on /0

    def bw():
        a.accum_grad(_unbroadcast(out.grad / b.data, a.data.shape))
        b.accum_grad(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape))

    out._backward = bw
    return out


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading dims (numpy semantics, ndim >= 2)."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul requires ndim >= 2, got {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), (a, b), "matmul")

    def bw():
        ga = np.matmul(out.grad, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), out.grad)
        a.accum_grad(_unbroadcast(ga, a.data.shape))
        b.accum_grad(_unbroadcast(gb, b.data.shape))

    out._backward = bw
    return out


# -- convolution --------------------------------------------------------------

def _windows3x3(x: np.ndarray) -> np.ndarray:
    """Zero-pad by 1 and return (B,C,H,W,3,3) sliding windows."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    return np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))


def conv2d_3x3(x, w) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1.

    x: (B, Cin, H, W); w: (Cout, Cin, 3, 3) -> (B, Cout, H, W).
    """
    x, w = _lift(x), _lift(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d_3x3: bad shapes x={x.shape}, w={w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d_3x3: channel mismatch x={x.shape}, w={w.shape}")
    win = _windows3x3(x.data)
    out = Tensor(np.einsum("bihwkl,oikl->bohw", win, w.data, optimize=True), (x, w), "conv2d_3x3")

    def bw():
        g = out.grad
        w.accum_grad(np.einsum("bohw,bihwkl->oikl", g, win, optimize=True))
        # dx: full correlation of the padded upstream grad with the flipped kernel
        gp = np.pad(g, ((0, 0), (0, 0), (2, 2), (2, 2)))
        gwin = np.lib.stride_tricks.sliding_window_view(gp, (3, 3), axis=(2, 3))
        wflip = w.data[:, :, ::-1, ::-1]
        dxp = np.einsum("bohwkl,oikl->bihw", gwin, wflip, optimize=True)
        x.accum_grad(dxp[:, :, 1:-1, 1:-1])

    out._backward = bw
    return out


# -- elementwise nonlinearities -----------------------------------------------

def relu(x) -> Tensor:
    x = _lift(x)
    out = Tensor(np.maximum(x.data, 0.0), (x,), "relu")

    def bw():
        x.accum_grad(out.grad * (x.data > 0.0))

    out._backward = bw
    return out


def leaky_relu(x, slope: float = 0.1) -> Tensor:
    # gradient at exactly 0 takes the negative-slope branch
    x = _lift(x)
    out = Tensor(np.where(x.data > 0.0, x.data, slope * x.data), (x,), "leaky_relu")

    def bw():
        x.accum_grad(out.grad * np.where(x.data > 0.0, 1.0, slope))

    out._backward = bw
    return out


def exp(x) -> Tensor:
    x = _lift(x)
    out = Tensor(np.exp(x.data), (x,), "exp")

    def bw():
        x.accum_grad(out.grad * out.data)

    out._backward = bw
    return out


def sin(x) -> Tensor:
    x = _lift(x)
    out = Tensor(np.sin(x.data), (x,), "sin")

    def bw():
        x.accum_grad(out.grad * np.cos(x.data))

    out._backward = bw
    return out


def cos(x) -> Tensor:
    x = _lift(x)
    out = Tensor(np.cos(x.data), (x,), "cos")

    def bw():
        x.accum_grad(-out.grad * np.sin(x.data))

    out._backward = bw
    return out


def sqrt(x) -> Tensor:
    x = _lift(x)
    out = Tensor(np.sqrt(x.data), (x,), "sqrt")

    def bw():
        x.accum_grad(out.grad * 0.5 / out.data)

    out._backward = bw
    return out


def power(x, p: float) -> Tensor:
    x = _lift(x)
    out = Tensor(x.data**p, (x,), "power")

    def bw():
        x.accum_grad(out.grad * p * x.data ** (p - 1.0))

    out._backward = bw
    return out


def abs_(x) -> Tensor:
    # subgradient 0 at the kink
    x = _lift(x)
    out = Tensor(np.abs(x.data), (x,), "abs")

    def bw():
        x.accum_grad(out.grad * np.sign(x.data))

    out._backward = bw
    return out


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient is zero outside the closed interval."""
    x = _lift(x)
    out = Tensor(np.clip(x.data, lo, hi), (x,), "clamp")

    def bw():
        inside = (x.data >= lo) & (x.data <= hi)
        x.accum_grad(out.grad * inside)

    out._backward = bw
    return out


# -- reductions ---------------------------------------------------------------

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(a % ndim for a in axes)


def sum_(x, axes=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    axes = _norm_axes(axes, x.ndim)
    out = Tensor(x.data.sum(axis=axes, keepdims=keepdims), (x,), "sum")

    def bw():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes)
        x.accum_grad(np.broadcast_to(g, x.data.shape).copy())

    out._backward = bw
    return out


def mean(x, axes=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    axes = _norm_axes(axes, x.ndim)
    count = float(np.prod([x.data.shape[a] for a in axes])) if axes else 1.0
    if count == 0:
        raise ValueError("mean: empty reduction axis")
    out = Tensor(x.data.mean(axis=axes, keepdims=keepdims), (x,), "mean")

    def bw():
        g = out.grad
        if not keepdims:
            g = np.expand_dims(g, axes)
        x.accum_grad(np.broadcast_to(g, x.data.shape) / count)

    out._backward = bw
    return out


# -- structure ----------------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: empty input list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat")
    sizes = [t.data.shape[axis] for t in tensors]

    def bw():
        start = 0
        for t, s in zip(tensors, sizes):
            sl = [slice(None)] * out.data.ndim
            sl[axis] = slice(start, start + s)
            t.accum_grad(out.grad[tuple(sl)])
            start += s

    out._backward = bw
    return out


def slice_(x, idx) -> Tensor:
    """Basic-indexing slice; backward scatters into the source positions."""
    x = _lift(x)
    out = Tensor(x.data[idx], (x,), "slice")

    def bw():
        g = np.zeros_like(x.data)
        g[idx] += out.grad
        x.accum_grad(g)

    out._backward = bw
    return out


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    out = Tensor(x.data.reshape(shape), (x,), "reshape")

    def bw():
        x.accum_grad(out.grad.reshape(x.data.shape))

    out._backward = bw
    return out


def transpose(x, axes) -> Tensor:
    x = _lift(x)
    axes = tuple(axes)
    out = Tensor(x.data.transpose(axes), (x,), "transpose")
    inverse = tuple(np.argsort(axes))

    def bw():
        x.accum_grad(out.grad.transpose(inverse))

    out._backward = bw
    return out


def pixel_unshuffle(x, factor: int) -> Tensor:
    """Autodiff wrapper over the space-to-channel rearrangement; the backward
    pass is the inverse rearrangement."""
    x = _lift(x)
    out = Tensor(nd.pixel_unshuffle(x.data, factor), (x,), "pixel_unshuffle")

    def bw():
        x.accum_grad(nd.pixel_shuffle(out.grad, factor))

    out._backward = bw
    return out


# -- composite normalizations ---------------------------------------------------
# built from primitive ops so their backward passes need no separate derivation

def softmax(x, axis: int = -1) -> Tensor:
    x = _lift(x)
    shift = constant(x.data.max(axis=axis, keepdims=True))  # detached; cancels in the ratio
    e = exp(x - shift)
    return e / sum_(e, axes=axis, keepdims=True)


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean, unit variance over one axis (no affine part)."""
    x = _lift(x)
    mu = mean(x, axes=axis, keepdims=True)
    d = x - mu
    var = mean(d * d, axes=axis, keepdims=True)
    return d / sqrt(var + eps)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    # eps inside the root keeps the backward finite at the origin
    x = _lift(x)
    n = sqrt(sum_(x * x, axes=axis, keepdims=True) + eps)
    return x / n


# -- finite-difference verification ---------------------------------------------

@dataclass
class FdEntry:
    name: str
    max_rel_err: float
    passed: bool
    checked: int


@dataclass
class FdReport:
    entries: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def summary(self) -> str:
        lines = [
            f"{'PASS' if e.passed else 'FAIL'} {e.name}: "
            f"max_rel_err={e.max_rel_err:.3e} over {e.checked} entries"
            for e in self.entries
        ]
        return "\n".join(lines)


def fd_check(f, params, h: float = 1e-5, tol: float = 1e-4,
             max_entries: int = None, rng: nd.Rng = None) -> FdReport:
    """Compare analytic gradients of the scalar `f()` against central
    differences (f(x+h) - f(x-h)) / 2h for every listed param.

    `f` must rebuild its graph from the params' current values on each call.
    For large params, `max_entries` caps how many elements are perturbed
    (chosen by `rng`, default seed 0); small params are checked exhaustively.
    The relative error denominator is floored at 1e-6 so near-zero gradient
    pairs compare in absolute terms.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    out = f()
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ValueError("fd_check: f must return a scalar Tensor")
    out.backward()
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for p in params}

    if rng is None:
        rng = nd.Rng(0)
    report = FdReport()
    for p in params:
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            idxs = np.sort(rng.permutation(n)[:max_entries])
        else:
            idxs = np.arange(n)
        an_flat = analytic[id(p)].reshape(-1)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = f().item()
            flat[i] = orig - h
            f_minus = f().item()
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(f"fd_check: non-finite f at param {p.name}[{i}]")
            fd = (f_plus - f_minus) / (2.0 * h)
            a = an_flat[i]
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            worst = max(worst, rel)
        report.entries.append(FdEntry(p.name, worst, worst <= tol, len(idxs)))
    return report
