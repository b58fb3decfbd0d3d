"""Reverse-mode automatic differentiation over dense float64 arrays.

Small and deterministic: values are numpy arrays, the graph is recorded
through parent links on each `Tensor`, and `backward()` replays it once in
reverse topological order. Gradients accumulate (+=) on leaf tensors only,
so shared parameters collect contributions from every use site; call
`zero_grad()` between optimization steps.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

from .errors import DomainError, GraphError, ShapeError

Array = np.ndarray

EPS = 1e-12


class Tensor:
    """A float64 n-d array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array, dict], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requires_grad leaf below self.

        Cotangents of interior nodes live only for the duration of the call;
        repeated calls therefore add identical contributions to the leaves.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self._parents and not self.requires_grad:
            raise GraphError("backward() called on a tensor with no recorded forward")

        order = self._toposort()
        cotangents: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in order:
            ct = cotangents.pop(id(node), None)
            if ct is None:
                continue
            if node._backward is not None:
                node._backward(ct, cotangents)
            elif node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += ct

    def _toposort(self) -> list["Tensor"]:
        # Iterative DFS; order depends only on graph structure, never on ids.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        order.reverse()
        return order

    # Operator sugar; all dispatch to the module-level ops below.
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: Array, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _send(parent: Tensor, contribution: Array, cotangents: dict) -> None:
    """Route a cotangent contribution to a parent during backward replay.

    Contributions collect in the per-call dict even for leaves; backward()
    adds the completed cotangent to a leaf's .grad in one operation, which
    keeps repeated backward calls exactly additive.
    """
    if not (parent.requires_grad or parent._parents):
        return
    key = id(parent)
    if key in cotangents:
        cotangents[key] = cotangents[key] + contribution
    else:
        cotangents[key] = contribution


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a cotangent over the axes that numpy broadcasting expanded."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    if a.data.shape == b.data.shape:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# ---------------------------------------------------------------------------
# elementwise ops


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def backward(ct, cot):
        _send(a, _unbroadcast(ct, a.shape), cot)
        _send(b, _unbroadcast(ct, b.shape), cot)

    return _make(a.data + b.data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def backward(ct, cot):
        _send(a, _unbroadcast(ct, a.shape), cot)
        _send(b, _unbroadcast(-ct, b.shape), cot)

    return _make(a.data - b.data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)

    def backward(ct, cot):
        _send(a, _unbroadcast(ct * b.data, a.shape), cot)
        _send(b, _unbroadcast(ct * a.data, b.shape), cot)

    return _make(a.data * b.data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    if np.any(b.data == 0.0):
        raise DomainError("division by zero; guard the denominator first")

    def backward(ct, cot):
        _send(a, _unbroadcast(ct / b.data, a.shape), cot)
        _send(b, _unbroadcast(-ct * a.data / (b.data * b.data), b.shape), cot)

    return _make(a.data / b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(ct, cot):
        _send(a, -ct, cot)

    return _make(-a.data, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive value; clip the input first")

    def backward(ct, cot):
        _send(a, ct / a.data, cot)

    return _make(np.log(a.data), (a,), backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(ct, cot):
        _send(a, ct * out_data, cot)

    return _make(out_data, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    # Stable in both tails: exp of a non-positive argument only.
    x = a.data
    e = np.exp(-np.abs(x))
    out_data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(ct, cot):
        _send(a, ct * out_data * (1.0 - out_data), cot)

    return _make(out_data, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def backward(ct, cot):
        _send(a, ct * (1.0 - out_data * out_data), cot)

    return _make(out_data, (a,), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(ct, cot):
        _send(a, ct * mask, cot)

    return _make(np.where(mask, a.data, 0.0), (a,), backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only where the clamp is inactive."""
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(ct, cot):
        _send(a, ct * inside, cot)

    return _make(np.clip(a.data, lo, hi), (a,), backward)


_UNARY = {"neg": neg, "log": log, "exp": exp, "sigmoid": sigmoid,
          "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op_kind: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch an elementwise op by name (add, sub, mul, div, neg, log, exp,
    sigmoid, tanh, relu)."""
    if op_kind in _BINARY:
        if b is None:
            raise ShapeError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        if b is not None:
            raise ShapeError(f"{op_kind} takes a single operand")
        return _UNARY[op_kind](a)
    raise ShapeError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# reductions


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for ndim {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"duplicate axes in {axes}")
    return tuple(sorted(out))


def _restore_dims(ct: Array, shape: tuple[int, ...], axes: tuple[int, ...]) -> Array:
    expanded = list(shape)
    for ax in axes:
        expanded[ax] = 1
    return ct.reshape(expanded)


def reduce_sum(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)

    def backward(ct, cot):
        _send(a, np.broadcast_to(_restore_dims(ct, a.shape, axes), a.shape).copy(), cot)

    return _make(a.data.sum(axis=axes), (a,), backward)


def reduce_mean(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1

    def backward(ct, cot):
        spread = np.broadcast_to(_restore_dims(ct, a.shape, axes), a.shape)
        _send(a, spread / count, cot)

    return _make(a.data.mean(axis=axes), (a,), backward)


def reduce_max(a: Tensor, axes=None) -> Tensor:
    axes = _normalize_axes(axes, a.data.ndim)
    out_data = a.data.max(axis=axes)

    def backward(ct, cot):
        full = np.broadcast_to(_restore_dims(out_data, a.shape, axes), a.shape)
        mask = a.data == full
        # Ties share the cotangent equally; keeps backward deterministic.
        counts = np.broadcast_to(
            _restore_dims(mask.sum(axis=axes), a.shape, axes), a.shape)
        spread = np.broadcast_to(_restore_dims(ct, a.shape, axes), a.shape)
        _send(a, spread * mask / counts, cot)

    return _make(out_data, (a,), backward)


def reduce_fsum(a: Tensor) -> Tensor:
    """Exactly rounded full sum of a 1-D tensor.

    fsum's result is independent of operand order, so reductions over class
    axes stay invariant under label permutations.
    """
    if a.data.ndim != 1:
        raise ShapeError(f"reduce_fsum expects a 1-D tensor, got {a.shape}")
    out_data = np.float64(math.fsum(a.data))

    def backward(ct, cot):
        _send(a, np.broadcast_to(ct, a.shape).copy(), cot)

    return _make(out_data, (a,), backward)


_REDUCERS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(op_kind: str, a: Tensor, axes=None) -> Tensor:
    if op_kind not in _REDUCERS:
        raise ShapeError(f"unknown reduction {op_kind!r}")
    return _REDUCERS[op_kind](a, axes)


# ---------------------------------------------------------------------------
# shape manipulation


def getitem(a: Tensor, key) -> Tensor:
    out_data = a.data[key]

    def backward(ct, cot):
        buf = np.zeros_like(a.data)
        buf[key] = ct
        _send(a, buf, cot)

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(ct, cot):
        _send(a, ct.reshape(a.shape), cot)

    return _make(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def backward(ct, cot):
        _send(a, ct.transpose(inverse), cot)

    return _make(a.data.transpose(axes), (a,), backward)


def flip(a: Tensor, axis: int) -> Tensor:
    def backward(ct, cot):
        _send(a, np.flip(ct, axis=axis), cot)

    return _make(np.flip(a.data, axis=axis), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(ct, cot):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            index = [slice(None)] * ct.ndim
            index[axis] = slice(lo, hi)
            _send(t, ct[tuple(index)], cot)

    return _make(np.concatenate([t.data for t in tensors], axis=axis),
                 tuple(tensors), backward)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate (1, W, C) row tensors into (H, W, C)."""
    return concat(tensors, axis=0)


# ---------------------------------------------------------------------------
# softmax


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise DomainError("softmax on non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(ct, cot):
        inner = (ct * out_data).sum(axis=axis, keepdims=True)
        _send(a, out_data * (ct - inner), cot)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# convolution


def _im2col(padded: Array, kh: int, kw: int, out_h: int, out_w: int) -> Array:
    view = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
    # (H, W, Cin, kh, kw) -> (H*W, kh*kw*Cin)
    cols = view.transpose(0, 1, 3, 4, 2).reshape(out_h * out_w, kh * kw * padded.shape[2])
    return np.ascontiguousarray(cols)


def conv2d(inp: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-padding zero-fill 2-D convolution.

    inp (H, W, Cin), kernel (kh, kw, Cin, Cout) with odd kh/kw, bias (Cout,).
    Output (H, W, Cout); gradients flow to input, kernel, and bias.
    """
    if inp.data.ndim != 3 or kernel.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects input (H,W,Cin) and kernel (kh,kw,Cin,Cout), "
            f"got {inp.shape} and {kernel.shape}")
    h, w, cin = inp.shape
    kh, kw, kcin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got {kh}x{kw}")
    if kcin != cin:
        raise ShapeError(f"kernel expects {kcin} input channels, image has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")

    ph, pw = kh // 2, kw // 2

    # A height-1 input only ever meets the kernel's center row through the
    # zero padding; collapse to that row so scans stay cheap.
    row_only = h == 1 and kh > 1
    col_only = w == 1 and kw > 1 and not row_only
    if row_only:
        eff_kernel = kernel.data[ph:ph + 1]
    elif col_only:
        eff_kernel = kernel.data[:, pw:pw + 1]
    else:
        eff_kernel = kernel.data
    kh_eff = 1 if row_only else kh
    kw_eff = 1 if col_only else kw
    ph_eff = 0 if row_only else ph
    pw_eff = 0 if col_only else pw

    if ph_eff or pw_eff:
        padded = np.zeros((h + 2 * ph_eff, w + 2 * pw_eff, cin))
        padded[ph_eff:ph_eff + h, pw_eff:pw_eff + w] = inp.data
    else:
        padded = inp.data
    cols = _im2col(padded, kh_eff, kw_eff, h, w)
    kmat = eff_kernel.reshape(kh_eff * kw_eff * cin, cout)
    out_data = cols @ kmat
    if bias is not None:
        out_data = out_data + bias.data
    out_data = out_data.reshape(h, w, cout)

    def backward(ct, cot):
        ct2 = ct.reshape(h * w, cout)
        if kernel.requires_grad or kernel._parents:
            kgrad_eff = (cols.T @ ct2).reshape(kh_eff, kw_eff, cin, cout)
            if row_only:
                kgrad = np.zeros_like(kernel.data)
                kgrad[ph:ph + 1] = kgrad_eff
            elif col_only:
                kgrad = np.zeros_like(kernel.data)
                kgrad[:, pw:pw + 1] = kgrad_eff
            else:
                kgrad = kgrad_eff
            _send(kernel, kgrad, cot)
        if bias is not None and (bias.requires_grad or bias._parents):
            _send(bias, ct2.sum(axis=0), cot)
        if inp.requires_grad or inp._parents:
            dcols = (ct2 @ kmat.T).reshape(h, w, kh_eff, kw_eff, cin)
            dpad = np.zeros_like(padded)
            for i in range(kh_eff):
                for j in range(kw_eff):
                    dpad[i:i + h, j:j + w] += dcols[:, :, i, j, :]
            if ph_eff or pw_eff:
                dinp = dpad[ph_eff:ph_eff + h, pw_eff:pw_eff + w]
            else:
                dinp = dpad
            _send(inp, dinp, cot)

    parents = (inp, kernel) if bias is None else (inp, kernel, bias)
    return _make(out_data, parents, backward)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f: Callable[[Tensor], Tensor], theta: Tensor,
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise DomainError(f"eps {eps} outside [1e-7, 1e-4]")
    theta = Tensor(theta.data.copy(), requires_grad=True)
    out = f(theta)
    if out.data.size != 1:
        raise GraphError(f"grad_check needs a scalar function, got shape {out.shape}")
    theta.zero_grad()
    out.backward()
    analytic = (theta.grad if theta.grad is not None
                else np.zeros_like(theta.data)).ravel()

    numeric = np.zeros_like(analytic)
    flat = theta.data.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(Tensor(theta.data)).data)
        flat[i] = orig - eps
        lo = float(f(Tensor(theta.data)).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
