"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is define-by-run: every operation whose inputs include a tensor
with ``requires_grad`` records a backward closure on its output. Calling
``backward()`` on a scalar result walks the recorded operations once, in
reverse topological order, and accumulates gradients additively into the
``grad`` buffers of all participating tensors.

Graphs are rebuilt on every forward pass; resetting between optimization
steps means zeroing leaf gradients and running a fresh forward.
"""

from __future__ import annotations

import numpy as np

# Guards 1/x factors in backward rules only; forward raises on exact zero.
BACKWARD_EPS = 1e-12

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, exc_type, exc, tb):
        global _grad_enabled
        _grad_enabled = self._prev


class NonFiniteError(ArithmeticError):
    """A tensor that must be finite contains NaN or Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev = ()
        self._backward = None
        self._done = False

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return self.data.item()

    def __float__(self):
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def assert_finite(self, context="tensor"):
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"{context} contains NaN or Inf")
        return self

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    # ------------------------------------------------------------------
    # graph plumbing

    def _record(self, out_data, prev, backward):
        out = Tensor(out_data)
        if _grad_enabled and any(p.requires_grad for p in prev):
            out.requires_grad = True
            out._prev = prev
            out._backward = backward
        return out

    def backward(self):
        """Populate ``grad`` on every reachable ``requires_grad`` tensor.

        Requires a single-element tensor. Raises if called a second time on
        the same graph; rebuild the forward pass (and zero leaf grads) to
        take another gradient.
        """
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        if self._done:
            raise RuntimeError(
                "backward already ran on this graph; rebuild the forward pass"
            )
        self._done = True
        self.grad = np.ones_like(self.data)
        for node in reversed(_toposort(self)):
            if node._backward is not None:
                node._backward(node.grad)

    # ------------------------------------------------------------------
    # elementwise operations (shapes must be equal, or one operand scalar)

    def __add__(self, other):
        a, b = self, _wrap(other)
        _check_elementwise(a, b, "add")
        out_data = a.data + b.data

        def bw(g):
            _accum(a, g)
            _accum(b, g)

        return self._record(out_data, (a, b), bw)

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, _wrap(other)
        _check_elementwise(a, b, "sub")
        out_data = a.data - b.data

        def bw(g):
            _accum(a, g)
            _accum(b, -g)

        return self._record(out_data, (a, b), bw)

    def __rsub__(self, other):
        return _wrap(other) - self

    def __mul__(self, other):
        a, b = self, _wrap(other)
        _check_elementwise(a, b, "mul")
        out_data = a.data * b.data

        def bw(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)

        return self._record(out_data, (a, b), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, _wrap(other)
        _check_elementwise(a, b, "div")
        if np.any(b.data == 0.0):
            raise ZeroDivisionError("division by exact zero")
        out_data = a.data / b.data
        denom = b.data + BACKWARD_EPS

        def bw(g):
            _accum(a, g / denom)
            _accum(b, -g * a.data / (denom * denom))

        return self._record(out_data, (a, b), bw)

    def __rtruediv__(self, other):
        return _wrap(other) / self

    def __neg__(self):
        return self * -1.0

    def log(self):
        if np.any(self.data <= 0.0):
            raise ValueError("log undefined for non-positive values")
        out_data = np.log(self.data)
        src = self.data

        def bw(g):
            _accum(self, g / (src + BACKWARD_EPS))

        return self._record(out_data, (self,), bw)

    def square(self):
        out_data = self.data * self.data
        src = self.data

        def bw(g):
            _accum(self, 2.0 * src * g)

        return self._record(out_data, (self,), bw)

    def clamp_min(self, floor):
        """Elementwise max(x, floor) for a scalar floor.

        Gradient follows the active branch: 1 where x > floor, 0 where the
        floor binds (including at the kink).
        """
        floor = float(floor)
        out_data = np.maximum(self.data, floor)
        mask = self.data > floor

        def bw(g):
            _accum(self, g * mask)

        return self._record(out_data, (self,), bw)

    # ------------------------------------------------------------------
    # reductions

    def sum(self, axes=None):
        axes = _normalize_axes(axes, self.ndim, self.shape, "sum")
        out_data = self.data.sum(axis=axes)
        keep_shape = _keepdims_shape(self.shape, axes)
        in_shape = self.shape

        def bw(g):
            _accum(self, np.broadcast_to(g.reshape(keep_shape), in_shape))

        return self._record(out_data, (self,), bw)

    def mean(self, axes=None):
        axes = _normalize_axes(axes, self.ndim, self.shape, "mean")
        out_data = self.data.mean(axis=axes)
        keep_shape = _keepdims_shape(self.shape, axes)
        count = self.size // max(out_data.size, 1)
        in_shape = self.shape

        def bw(g):
            _accum(self, np.broadcast_to(g.reshape(keep_shape) / count, in_shape))

        return self._record(out_data, (self,), bw)

    def max(self, axes=None):
        """Max over axes; the gradient goes to the first (row-major) argmax."""
        axes = _normalize_axes(axes, self.ndim, self.shape, "max")
        kept = tuple(i for i in range(self.ndim) if i not in axes)
        perm = kept + axes
        moved = self.data.transpose(perm)
        kept_shape = moved.shape[: len(kept)]
        flat = moved.reshape(kept_shape + (-1,))
        idx = flat.argmax(axis=-1)
        out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        inv_perm = tuple(np.argsort(perm))
        moved_shape = moved.shape

        def bw(g):
            scatter = np.zeros_like(flat)
            np.put_along_axis(scatter, idx[..., None], g[..., None], axis=-1)
            _accum(self, scatter.reshape(moved_shape).transpose(inv_perm))

        return self._record(out_data, (self,), bw)

    # ------------------------------------------------------------------
    # shape manipulation

    def reshape(self, shape):
        out_data = self.data.reshape(shape)
        in_shape = self.shape

        def bw(g):
            _accum(self, g.reshape(in_shape))

        return self._record(out_data, (self,), bw)


# ----------------------------------------------------------------------
# module-level helpers


def _wrap(value):
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_elementwise(a, b, op):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(
        f"{op}: shapes must match or one operand must be scalar, "
        f"got {a.shape} and {b.shape}"
    )


def _accum(t, g):
    """Add g into t.grad, reducing over broadcast scalar operands."""
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        g = np.asarray(g.sum()).reshape(t.data.shape)
    if t.grad is None:
        t.grad = np.array(g)  # first contribution: copy instead of zeros+add
    else:
        t.grad += g


def _normalize_axes(axes, ndim, shape, op):
    if axes is None:
        axes = tuple(range(ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    else:
        axes = tuple(axes)
    if len(set(axes)) != len(axes):
        raise ValueError(f"{op}: duplicate axes {axes}")
    for ax in axes:
        if not 0 <= ax < ndim:
            raise ValueError(f"{op}: axis {ax} out of range for ndim {ndim}")
        if shape[ax] == 0:
            raise ValueError(f"{op}: reduction over empty axis {ax}")
    return axes


def _keepdims_shape(shape, axes):
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _toposort(root):
    order = []
    seen = set()
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
        for parent in node._prev:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def concat(tensors, axis=0):
    """Concatenate along an axis; gradients slice back to each input."""
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of no tensors")
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.data.shape[axis] for t in tensors]
    offsets = np.concatenate([[0], np.cumsum(extents)])

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(t, g[tuple(sl)])

    return tensors[0]._record(out_data, tuple(tensors), bw)


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


_ELEMENTWISE_KINDS = ("add", "sub", "mul", "div", "log", "square", "clamp-min")
_REDUCE_KINDS = ("sum", "mean", "max")


def elementwise(kind, a, b=None):
    """Dispatch an elementwise op by name (binary ops need b)."""
    a = _wrap(a)
    if kind == "add":
        return a + b
    if kind == "sub":
        return a - b
    if kind == "mul":
        return a * b
    if kind == "div":
        return a / b
    if kind == "log":
        return a.log()
    if kind == "square":
        return a.square()
    if kind == "clamp-min":
        return a.clamp_min(b)
    raise ValueError(f"unknown elementwise kind {kind!r}; expected one of {_ELEMENTWISE_KINDS}")


def reduce(kind, a, axes=None):
    """Dispatch a reduction by name."""
    a = _wrap(a)
    if kind == "sum":
        return a.sum(axes)
    if kind == "mean":
        return a.mean(axes)
    if kind == "max":
        return a.max(axes)
    raise ValueError(f"unknown reduce kind {kind!r}; expected one of {_REDUCE_KINDS}")
