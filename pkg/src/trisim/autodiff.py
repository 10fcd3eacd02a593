"""Dense float64 tensors with a reverse-mode gradient tape.

The tape is built dynamically: every operation that touches a tensor with
``requires_grad`` records its parents and a vector-Jacobian-product closure.
Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients into the leaf tensors.

Only the operations needed by the workbench networks are provided; there is
no general broadcasting engine beyond what bias terms and scalar constants
require.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "ContractError",
    "ShapeError",
    "no_grad",
    "grad_enabled",
    "as_tensor",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "take_columns",
    "take_positions",
    "bmm_nt",
    "logsumexp",
    "l2_normalize",
]


class _GradMode:
    enabled = True


class no_grad:
    """Context manager that suspends tape recording."""

    def __enter__(self):
        self._prev = _GradMode.enabled
        _GradMode.enabled = False
        return self

    def __exit__(self, *exc):
        _GradMode.enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _GradMode.enabled


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._vjp = None

    # ---- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # ---- graph construction ------------------------------------------------
    @staticmethod
    def _make(data, parents, vjp) -> "Tensor":
        out = Tensor(data)
        if _GradMode.enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    # ---- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other).__sub__(self)

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data * b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self, other
        return Tensor._make(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other).__truediv__(self)

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if not np.isscalar(p):
            raise ContractError("only scalar exponents are supported")
        x = self
        return Tensor._make(
            x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1),)
        )

    # ---- elementwise functions ----------------------------------------------
    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        x = self
        return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g / (2.0 * out_data),))

    def tanh(self):
        out_data = np.tanh(self.data)
        return Tensor._make(
            out_data, (self,), lambda g: (g * (1.0 - out_data * out_data),)
        )

    def leaky_relu(self, slope: float = 0.2):
        x = self
        pos = x.data > 0
        return Tensor._make(
            np.where(pos, x.data, slope * x.data),
            (x,),
            lambda g: (g * np.where(pos, 1.0, slope),),
        )

    def clip(self, lo: float, hi: float):
        x = self
        inside = (x.data >= lo) & (x.data <= hi)
        return Tensor._make(
            np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,)
        )

    def minimum(self, other):
        other = as_tensor(other)
        a, b = self, other
        take_a = a.data <= b.data
        return Tensor._make(
            np.where(take_a, a.data, b.data),
            (a, b),
            lambda g: (
                _unbroadcast(g * take_a, a.shape),
                _unbroadcast(g * ~take_a, b.shape),
            ),
        )

    # ---- reductions -----------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        x = self

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, x.shape).copy(),)
            gg = g
            if not keepdims:
                gg = np.expand_dims(g, axis)
            return (np.broadcast_to(gg, x.shape).copy(),)

        return Tensor._make(x.data.sum(axis=axis, keepdims=keepdims), (x,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[a] for a in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # ---- shaping -----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        x = self
        return Tensor._make(
            x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),)
        )

    def flatten(self):
        return self.reshape(-1)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        x = self
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),)
        )

    @property
    def T(self):
        if self.ndim != 2:
            raise ShapeError("T expects a 2-D tensor")
        return self.transpose(1, 0)

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self, other
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(
                f"matmul expects 2-D operands, got {a.shape} @ {b.shape}"
            )
        return Tensor._make(
            a.data @ b.data,
            (a, b),
            lambda g: (g @ b.data.T, a.data.T @ g),
        )

    # ---- backward -----------------------------------------------------------
    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp
    )


# ---- convolution ------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    n, c = xp.shape[0], xp.shape[1]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[
                :, :, i : i + stride * oh : stride, j : j + stride * ow : stride
            ]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(cols, n, c, hp, wp, kh, kw, stride, oh, ow):
    xp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += (
                cols6[:, :, i, j]
            )
    return xp


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0):
    """2-D convolution; x (N,C,H,W), w (Cout,Cin,kh,kw), b (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D x and w, got {x.shape}, {w.shape}")
    n, c, h, wid = x.shape
    cout, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wid + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d output would be empty")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, oh, ow)  # (N, CKK, P)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols)  # (N, Cout, P)
    if b is not None:
        out = out + b.data[:, None]
    out = out.reshape(n, cout, oh, ow)

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gmat = g.reshape(n, cout, oh * ow)
        gw = np.einsum("nop,nkp->ok", gmat, cols).reshape(w.shape)
        gcols = np.matmul(wmat.T, gmat)
        gxp = _col2im(gcols, n, c, xp.shape[2], xp.shape[3], kh, kw, stride, oh, ow)
        if padding:
            gx = gxp[:, :, padding:-padding, padding:-padding]
        else:
            gx = gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, vjp)


def conv_transpose2d(
    x: Tensor, w: Tensor, b: Tensor | None, stride: int = 1, padding: int = 0
):
    """Transposed 2-D convolution; x (N,Cin,H,W), w (Cin,Cout,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d expects 4-D x and w, got {x.shape}, {w.shape}"
        )
    n, c, h, wid = x.shape
    cin, cout, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"conv_transpose2d channel mismatch: input {c}, kernel {cin}")
    ohp = (h - 1) * stride + kh  # padded output size
    owp = (wid - 1) * stride + kw
    oh, ow = ohp - 2 * padding, owp - 2 * padding
    if oh < 1 or ow < 1:
        raise ShapeError("conv_transpose2d output would be empty")
    xmat = x.data.reshape(n, c, h * wid)
    wmat = w.data.reshape(cin, cout * kh * kw)
    cols = np.matmul(wmat.T, xmat)  # (N, CoutKK, HW)
    outp = _col2im(cols, n, cout, ohp, owp, kh, kw, stride, h, wid)
    out = outp[:, :, padding : ohp - padding, padding : owp - padding]
    if b is not None:
        out = out + b.data[None, :, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def vjp(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        gcols = _im2col(gp, kh, kw, stride, h, wid)  # (N, CoutKK, HW)
        gx = np.matmul(wmat, gcols).reshape(x.shape)
        gw = np.einsum("ncp,nkp->ck", xmat, gcols).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._make(out, parents, vjp)


def bmm_nt(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with the second operand transposed:
    (N,S,K) x (N,T,K) -> (N,S,T)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"bmm_nt shape mismatch: {a.shape} x {b.shape}")

    def vjp(g):
        return (
            np.einsum("nst,ntk->nsk", g, b.data),
            np.einsum("nst,nsk->ntk", g, a.data),
        )

    return Tensor._make(np.einsum("nsk,ntk->nst", a.data, b.data), (a, b), vjp)


def take_positions(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather shared spatial positions from a (N,C,P) tensor -> (N,S,C)."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"take_positions expects (N,C,P), got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), slice(None), idx), g.transpose(0, 2, 1))
        return (gx,)

    return Tensor._make(
        np.ascontiguousarray(x.data[:, :, idx].transpose(0, 2, 1)), (x,), vjp
    )


def take_columns(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select columns of a (C, P) tensor, returning (len(idx), C)."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"take_columns expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), idx), g.T)
        return (gx,)

    return Tensor._make(x.data[:, idx].T.copy(), (x,), vjp)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """log(sum(exp(x))) along `axis`, max-subtracted for stability."""
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)  # constant shift
    s = (x - Tensor(m)).exp().sum(axis=axis)
    return s.log() + Tensor(np.squeeze(m, axis=axis))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along `axis` to unit Euclidean norm."""
    x = as_tensor(x)
    norm = (x * x).sum(axis=axis, keepdims=True).sqrt()
    return x / norm
