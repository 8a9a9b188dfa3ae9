"""Dense tensors with reverse-mode automatic differentiation.

numpy-backed and define-by-run: every operation records its parent tensors
plus a closure mapping the output gradient to input gradients, so the
computation graph is rebuilt on each forward pass. ``backward()`` on a
scalar walks that graph once in reverse topological order and accumulates
gradients additively across fan-out.

Shapes follow numpy broadcasting. Gradients of broadcast operands are
summed back down to the operand's shape, so elementwise ops can mix
arbitrary leading batch dimensions with parameter tensors.

Data is float64 by default; a float32 mode exists for storage, but
gradient checking assumes float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ContractError, EvaluationError, ShapeError

__all__ = [
    "Tensor",
    "concat",
    "convolve",
    "grad_check",
    "GradCheckReport",
    "layer_norm",
    "log_softmax",
    "silu",
    "softmax",
]


def _coerce(data, dtype):
    arr = np.asarray(data) if dtype is None else np.asarray(data, dtype=dtype)
    if arr.dtype.kind != "f":
        arr = arr.astype(np.float64)
    return arr


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (the inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """N-dimensional real array with an attached gradient slot.

    `grad` stays None until a backward pass deposits into it; repeated
    backward passes accumulate. Tensors are immutable after creation
    except for gradient accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @classmethod
    def _from_op(cls, data, parents, backward):
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    # -- autodiff driver ----------------------------------------------------

    def backward(self):
        """Populate `.grad` on every requires_grad tensor reachable from self.

        Self must be scalar (size 1). Each graph node is visited exactly
        once, in reverse topological order; fan-out gradients accumulate
        additively.
        """
        if self.data.size != 1:
            raise ContractError(
                f"backward() requires a scalar loss, got shape {self.data.shape}"
            )
        if not self.requires_grad:
            return
        order = self._toposort()
        self.grad = np.ones_like(self.data) if self.grad is None else self.grad + np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g
            # consumed: free the closure, tape edges, and intermediate grad
            node._backward = None
            node._parents = ()
            node.grad = None

    def _toposort(self):
        order = []
        seen = set()
        stack = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return order

    # -- elementwise arithmetic (numpy broadcasting) ------------------------

    def _wrap(self, other):
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other):
        other = self._wrap(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a + b,
            (self, other),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __mul__(self, other):
        other = self._wrap(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
        )

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        other = self._wrap(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a - b,
            (self, other),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return self._wrap(other) - self

    def __truediv__(self, other):
        other = self._wrap(other)
        a, b = self.data, other.data
        return Tensor._from_op(
            a / b,
            (self, other),
            lambda g: (
                _unbroadcast(g / b, a.shape),
                _unbroadcast(-g * a / (b * b), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return self._wrap(other) / self

    def __pow__(self, exponent):
        if not np.isscalar(exponent):
            raise ShapeError("pow supports scalar exponents only")
        a = self.data
        out = a**exponent
        return Tensor._from_op(
            out, (self,), lambda g: (g * exponent * a ** (exponent - 1),)
        )

    def exp(self):
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,))

    def log(self):
        a = self.data
        return Tensor._from_op(np.log(a), (self,), lambda g: (g / a,))

    def sigmoid(self):
        out = expit(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out * (1.0 - out),))

    def softplus(self):
        # log(1 + e^x), computed without overflow for large |x|
        a = self.data
        out = np.logaddexp(0.0, a)
        return Tensor._from_op(out, (self,), lambda g: (g * expit(a),))

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a_shape = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, a_shape).copy(),)
            g_exp = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(g_exp, a_shape).copy(),)

        return Tensor._from_op(np.asarray(out), (self,), backward)

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[a] for a in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- matrix product -----------------------------------------------------

    def __matmul__(self, other):
        other = self._wrap(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError(
                f"matmul requires >=2-d operands, got {a.shape} and {b.shape}"
            )
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {a.shape} @ {b.shape}"
            )
        out = a @ b

        def backward(g):
            da = _unbroadcast(g @ b.swapaxes(-1, -2), a.shape)
            db = _unbroadcast(a.swapaxes(-1, -2) @ g, b.shape)
            return da, db

        return Tensor._from_op(out, (self, other), backward)

    def matmul(self, other):
        return self @ other

    # -- shape manipulation -------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a_shape = self.data.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(a_shape),)
        )

    def swapaxes(self, axis1, axis2):
        return Tensor._from_op(
            self.data.swapaxes(axis1, axis2),
            (self,),
            lambda g: (g.swapaxes(axis1, axis2),),
        )

    def narrow(self, axis, start, length):
        """Slice `length` entries starting at `start` along one axis."""
        ax = axis % self.data.ndim
        idx = (slice(None),) * ax + (slice(start, start + length),)
        a_shape = self.data.shape

        def backward(g):
            full = np.zeros(a_shape, dtype=g.dtype)
            full[idx] = g
            return (full,)

        return Tensor._from_op(np.ascontiguousarray(self.data[idx]), (self,), backward)

    def pad(self, pad_width):
        """Zero-pad; `pad_width` is a full per-axis ((before, after), ...) spec."""
        pad_width = tuple(tuple(p) for p in pad_width)
        if len(pad_width) != self.data.ndim:
            raise ShapeError(
                f"pad_width has {len(pad_width)} entries for a {self.data.ndim}-d tensor"
            )
        idx = tuple(
            slice(b, b + n) for (b, _), n in zip(pad_width, self.data.shape)
        )
        return Tensor._from_op(
            np.pad(self.data, pad_width), (self,), lambda g: (g[idx],)
        )

    def index_select(self, indices, axis):
        """Gather along `axis`; backward scatter-adds, so repeated indices sum."""
        indices = np.asarray(indices, dtype=np.intp)
        ax = axis % self.data.ndim
        a_shape = self.data.shape
        out = np.take(self.data, indices, axis=ax)

        def backward(g):
            full = np.zeros(a_shape, dtype=g.dtype)
            np.add.at(
                np.moveaxis(full, ax, 0), indices, np.moveaxis(g, ax, 0)
            )
            return (full,)

        return Tensor._from_op(out, (self,), backward)

    def flip(self, axis):
        return Tensor._from_op(
            np.flip(self.data, axis=axis).copy(),
            (self,),
            lambda g: (np.flip(g, axis=axis).copy(),),
        )


def concat(tensors, axis):
    """Concatenate along `axis`; backward splits the gradient back."""
    tensors = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    ax = axis % tensors[0].data.ndim
    sizes = [t.data.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        g_moved = np.moveaxis(g, ax, 0)
        return tuple(
            np.moveaxis(g_moved[offsets[i] : offsets[i + 1]], 0, ax)
            for i in range(len(sizes))
        )

    return Tensor._from_op(out, tuple(tensors), backward)


# -- composite neural-net operations ---------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtracted before exponentiation)."""
    shift = np.max(x.data, axis=axis, keepdims=True)
    e = (x - Tensor(shift)).exp()
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shift = np.max(x.data, axis=axis, keepdims=True)
    centered = x - Tensor(shift)
    lse = centered.exp().sum(axis=axis, keepdims=True).log()
    return centered - lse


def silu(x: Tensor) -> Tensor:
    return x * x.sigmoid()


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    if eps <= 0:
        raise ContractError(f"layer_norm eps must be positive, got {eps}")
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    normed = centered * ((var + eps) ** -0.5)
    return normed * gamma + beta


# -- convolution ------------------------------------------------------------

_CONV_MODES = ("causal1d", "standard1d", "depthwise1d", "standard2d", "grouped2d")


def _grouped_mix(x_slice: Tensor, w_k: Tensor, groups: int, c_out: int, c_in: int):
    """Channel mixing w_k[c_out, c_in/groups] @ x_slice[..., c_in, spatial]."""
    if groups == 1:
        return w_k @ x_slice
    og, ig = c_out // groups, c_in // groups
    parts = []
    for g in range(groups):
        wg = w_k.narrow(0, g * og, og)
        xg = x_slice.narrow(-2, g * ig, ig)
        parts.append(wg @ xg)
    return concat(parts, axis=-2)


def convolve(x: Tensor, w: Tensor, mode: str, groups: int = 1) -> Tensor:
    """Grouped convolution over the trailing spatial axes of `x`.

    1-d modes take x[..., C_in, L] and w[C_out, C_in/groups, K]; 2-d modes
    take x[..., C_in, H, W] and w[C_out, C_in/groups, Kh, Kw]. `causal1d`
    pads only on the left by K-1 so output t depends on inputs <= t; the
    standard modes zero-pad symmetrically and preserve spatial extent.
    `depthwise1d` is standard1d with one group per channel (w[C, 1, K]).
    """
    from .errors import ConfigError

    if mode not in _CONV_MODES:
        raise ConfigError(f"unknown convolution mode {mode!r}")
    two_d = mode in ("standard2d", "grouped2d")
    spatial = 2 if two_d else 1
    if x.ndim < spatial + 1:
        raise ShapeError(f"{mode} needs x[..., C, spatial], got shape {x.shape}")
    c_in = x.shape[-spatial - 1]
    if mode == "depthwise1d":
        groups = c_in
    c_out = w.shape[0]
    if w.ndim != 2 + spatial:
        raise ShapeError(f"{mode} weight must be {2 + spatial}-d, got {w.shape}")
    if c_in % groups or c_out % groups:
        raise ConfigError(
            f"groups={groups} must divide channels (C_in={c_in}, C_out={c_out})"
        )
    if w.shape[1] != c_in // groups:
        raise ShapeError(
            f"weight shape {w.shape} inconsistent with C_in={c_in}, groups={groups}"
        )
    depthwise = groups == c_in and c_out == c_in

    if not two_d:
        k = w.shape[-1]
        length = x.shape[-1]
        left, right = (k - 1, 0) if mode == "causal1d" else ((k - 1) // 2, k // 2)
        pads = ((0, 0),) * (x.ndim - 1) + ((left, right),)
        xp = x.pad(pads)
        out = None
        for tap in range(k):
            x_slice = xp.narrow(-1, tap, length)
            if depthwise:
                w_tap = w.narrow(-1, tap, 1).reshape(c_out, 1)
                term = x_slice * w_tap
            else:
                w_tap = w.narrow(-1, tap, 1).reshape(c_out, c_in // groups)
                term = _grouped_mix(x_slice, w_tap, groups, c_out, c_in)
            out = term if out is None else out + term
        return out

    kh, kw = w.shape[-2], w.shape[-1]
    h, wid = x.shape[-2], x.shape[-1]
    pads = ((0, 0),) * (x.ndim - 2) + (
        ((kh - 1) // 2, kh // 2),
        ((kw - 1) // 2, kw // 2),
    )
    xp = x.pad(pads)
    out = None
    lead = x.shape[:-3]
    for i in range(kh):
        for j in range(kw):
            x_slice = xp.narrow(-2, i, h).narrow(-1, j, wid)
            if depthwise:
                w_tap = w.narrow(-2, i, 1).narrow(-1, j, 1).reshape(c_out, 1, 1)
                term = x_slice * w_tap
            else:
                w_tap = w.narrow(-2, i, 1).narrow(-1, j, 1).reshape(
                    c_out, c_in // groups
                )
                flat = x_slice.reshape(*lead, c_in, h * wid)
                term = _grouped_mix(flat, w_tap, groups, c_out, c_in).reshape(
                    *lead, c_out, h, wid
                )
            out = term if out is None else out + term
    return out


# -- gradient checking -------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of comparing analytic gradients with central differences."""

    max_rel_err: float
    worst_index: tuple
    analytic: np.ndarray
    numeric: np.ndarray

    def ok(self, tol: float) -> bool:
        return self.max_rel_err < tol


def grad_check(f, x, tol: float = 1e-4, step: float = 1e-5) -> GradCheckReport:
    """Compare analytic gradient of scalar `f` at `x` with central differences.

    Relative error per element is |a - n| / max(|a|, |n|, 1e-8); the report
    carries the maximum. `f` must be a pure scalar-valued function of one
    Tensor; evaluation happens in float64.
    """
    base = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    xt = Tensor(base.copy(), requires_grad=True)
    y = f(xt)
    if y.data.size != 1:
        raise ContractError("grad_check requires a scalar-valued function")
    if not np.isfinite(y.data).all():
        raise EvaluationError("grad_check: f(x) is not finite")
    y.backward()
    analytic = (
        xt.grad if xt.grad is not None else np.zeros_like(base)
    ).astype(np.float64)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        bumped = base.copy().reshape(-1)
        bumped[i] += step
        f_plus = float(f(Tensor(bumped.reshape(base.shape))).data.reshape(()))
        bumped[i] -= 2 * step
        f_minus = float(f(Tensor(bumped.reshape(base.shape))).data.reshape(()))
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise EvaluationError("grad_check: perturbed f(x) is not finite")
        flat[i] = (f_plus - f_minus) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    rel = np.abs(analytic - numeric) / denom
    worst = int(np.argmax(rel))
    return GradCheckReport(
        max_rel_err=float(rel.reshape(-1)[worst]),
        worst_index=np.unravel_index(worst, base.shape),
        analytic=analytic,
        numeric=numeric,
    )
