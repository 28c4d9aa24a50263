"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Only the operators the separation model and its losses need are provided.
Convolution-style ops accept either an unbatched ``(C, T)`` input or a batched
``(N, C, T)`` input; the batch axis is carried through untouched.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_seq = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""


class GradError(RuntimeError):
    """Backward pass requested on something that has no graph to walk."""


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple["Tensor", ...]
    output: "Tensor"
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    seq: int = field(default_factory=lambda: next(_seq))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data.copy()
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, data: np.ndarray, inputs: Iterable[Tensor], backward_fn) -> Tensor:
    inputs = tuple(inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.node = Node(op, inputs, out, backward_fn) if out.requires_grad else None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * out, b.shape)

    return _record("div", out, (a, b), bw)


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    exponent = float(exponent)
    return _record(
        "pow",
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
    )


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def log10(a) -> Tensor:
    return log(a) * (1.0 / np.log(10.0))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=np.float64), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _record("getitem", np.array(a.data[index], dtype=np.float64), (a,), bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record("stack", out, tensors, bw)


def pad_last(a, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    a = as_tensor(a)
    widths = [(0, 0)] * (a.ndim - 1) + [(left, right)]
    end = a.shape[-1] + left

    return _record(
        "pad",
        np.pad(a.data, widths),
        (a,),
        lambda g: (np.ascontiguousarray(g[..., left:end]),),
    )


def crop_last(a, length: int) -> Tensor:
    """Keep the first ``length`` samples of the last axis."""
    a = as_tensor(a)
    if length > a.shape[-1]:
        raise ShapeError(f"cannot crop length {a.shape[-1]} to {length}")
    return getitem(a, (Ellipsis, slice(0, length)))


# activations


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split form avoids overflow in exp for large |x|
    x = a.data
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _record("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def prelu(a, slope) -> Tensor:
    """PReLU with one slope per channel (channel axis is ``-2``) or a scalar slope."""
    a, slope = as_tensor(a), as_tensor(slope)
    if slope.ndim == 0 or slope.size == 1:
        s = slope.data.reshape(())
    else:
        if a.ndim < 2 or slope.shape[0] != a.shape[-2]:
            raise ShapeError(f"prelu slope {slope.shape} does not match channels of {a.shape}")
        s = slope.data[:, None]
    neg = a.data < 0
    factor = np.where(neg, s, 1.0)
    out = a.data * factor

    def bw(g):
        gx = g * factor
        gs = g * np.where(neg, a.data, 0.0)
        if slope.ndim == 0 or slope.size == 1:
            gs = np.asarray(gs.sum()).reshape(slope.shape)
        else:
            gs = unbroadcast(gs, (slope.shape[0], 1)).reshape(slope.shape)
        return gx, gs

    return _record("prelu", out, (a, slope), bw)


def activation(a, kind: str, slope=None) -> Tensor:
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu needs a slope")
        return prelu(a, slope)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "relu":
        return relu(a)
    raise ValueError(f"unknown activation {kind!r}")


# normalisation


def global_layer_norm(x, gain, bias, epsilon: float = 1e-8) -> Tensor:
    """gLN: normalise over every channel and frame of each example, then affine per channel."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-2],) or bias.shape != (x.shape[-2],):
        raise ShapeError(f"gLN gain/bias {gain.shape}/{bias.shape} vs input {x.shape}")
    axes = (-2, -1)
    mu = x.data.mean(axis=axes, keepdims=True)
    centred = x.data - mu
    var = (centred**2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = centred * inv
    out = gain.data[:, None] * xhat + bias.data[:, None]

    def bw(g):
        gxhat = g * gain.data[:, None]
        gx = inv * (
            gxhat
            - gxhat.mean(axis=axes, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
        )
        reduce_axes = tuple(i for i in range(g.ndim) if i != g.ndim - 2)
        return gx, (g * xhat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _record("gln", out, (x, gain, bias), bw)


# convolution


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected (C, T) or (N, C, T) input, got shape {x.shape}")


def conv_output_length(length: int, kernel: int, stride: int = 1, dilation: int = 1) -> int:
    span = (kernel - 1) * dilation + 1
    return (length - span) // stride + 1


def conv1d(x, kernels, stride: int = 1, dilation: int = 1, groups: int = 1) -> Tensor:
    """Valid 1-D cross-correlation.

    ``x`` is ``(C_in, T)`` or ``(N, C_in, T)``; ``kernels`` is
    ``(C_out, C_in // groups, L)``. Output length is
    ``floor((T - span) / stride) + 1`` with ``span = (L - 1) * dilation + 1``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1 or dilation < 1 or groups < 1:
        raise ValueError("stride, dilation and groups must be positive")
    xb, squeeze = _as_batched(x.data)
    if kernels.ndim != 3:
        raise ShapeError(f"kernels must be (C_out, C_in/groups, L), got {kernels.shape}")
    n, c_in, t = xb.shape
    c_out, cg, k = kernels.shape
    if c_in % groups or c_out % groups or cg * groups != c_in:
        raise ShapeError(
            f"input channels {c_in} (input shape {x.shape}) do not match kernels "
            f"shape {kernels.shape} with groups={groups}"
        )
    span = (k - 1) * dilation + 1
    if t < span:
        raise ShapeError(f"input length {t} shorter than kernel span {span}")
    t_out = (t - span) // stride + 1
    og = c_out // groups
    w = kernels.data

    pointwise = k == 1 and stride == 1 and groups == 1
    depthwise = groups == c_in == c_out
    stop = stride * (t_out - 1) + 1
    windows = None
    if pointwise:
        out = np.matmul(w[:, :, 0], xb)
    elif depthwise:
        out = np.zeros((n, c_out, t_out))
        for tap in range(k):
            off = tap * dilation
            out += w[:, 0, tap][:, None] * xb[:, :, off : off + stop : stride]
    else:
        windows = sliding_window_view(xb, span, axis=-1)[:, :, ::stride, ::dilation][:, :, :t_out]
        if groups == 1:
            cols = windows.transpose(0, 2, 1, 3).reshape(n, t_out, c_in * k)
            out = np.matmul(cols, w.reshape(c_out, c_in * k).T).transpose(0, 2, 1)
        else:
            wg = windows.reshape(n, groups, cg, t_out, k)
            out = np.einsum("ngctl,gocl->ngot", wg, w.reshape(groups, og, cg, k)).reshape(n, c_out, t_out)
    out = np.ascontiguousarray(out)

    def bw(g):
        gb = g[None] if squeeze else g
        if pointwise:
            gw = np.tensordot(gb, xb, axes=([0, 2], [0, 2]))[:, :, None]
            gx = np.matmul(w[:, :, 0].T, gb)
        elif depthwise:
            gw = np.empty_like(w)
            gx = np.zeros_like(xb)
            for tap in range(k):
                off = tap * dilation
                seg = xb[:, :, off : off + stop : stride]
                gw[:, 0, tap] = np.einsum("nct,nct->c", gb, seg)
                gx[:, :, off : off + stop : stride] += w[:, 0, tap][:, None] * gb
        else:
            if groups == 1:
                gw = np.einsum("not,nctl->ocl", gb, windows, optimize=True)
                gwin = np.einsum("not,ocl->nctl", gb, w, optimize=True)
            else:
                gg = gb.reshape(n, groups, og, t_out)
                wg = windows.reshape(n, groups, cg, t_out, k)
                gw = np.einsum("ngot,ngctl->gocl", gg, wg).reshape(c_out, cg, k)
                gwin = np.einsum("ngot,gocl->ngctl", gg, w.reshape(groups, og, cg, k)).reshape(
                    n, c_in, t_out, k
                )
            gx = np.zeros_like(xb)
            for tap in range(k):
                off = tap * dilation
                gx[:, :, off : off + stop : stride] += gwin[:, :, :, tap]
        return (gx[0] if squeeze else gx), gw

    return _record("conv1d", out[0] if squeeze else out, (x, kernels), bw)


def conv1d_transpose(x, kernels, stride: int = 1) -> Tensor:
    """Transposed 1-D convolution (overlap-add), the adjoint of :func:`conv1d`.

    ``x`` is ``(C_in, T')`` or ``(N, C_in, T')``; ``kernels`` is ``(C_in, C_out, L)``.
    Output length is ``(T' - 1) * stride + L``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if stride < 1:
        raise ValueError("stride must be positive")
    xb, squeeze = _as_batched(x.data)
    if kernels.ndim != 3 or kernels.shape[0] != xb.shape[1]:
        raise ShapeError(
            f"input shape {x.shape} has {xb.shape[1]} channels but kernels shape {kernels.shape} "
            f"expects {kernels.shape[0] if kernels.ndim == 3 else '?'}"
        )
    n, c_in, t_in = xb.shape
    if t_in < 1:
        raise ShapeError("transposed convolution needs at least one frame")
    _, c_out, k = kernels.shape
    w = kernels.data
    t_out = (t_in - 1) * stride + k
    stop = stride * (t_in - 1) + 1

    frames = np.matmul(xb.transpose(0, 2, 1), w.reshape(c_in, c_out * k)).reshape(n, t_in, c_out, k)
    out = np.zeros((n, c_out, t_out))
    for tap in range(k):
        out[:, :, tap : tap + stop : stride] += frames[:, :, :, tap].transpose(0, 2, 1)

    def bw(g):
        gb = g[None] if squeeze else g
        gframes = sliding_window_view(gb, k, axis=-1)[:, :, ::stride][:, :, :t_in]  # (n, o, t, l)
        gf = gframes.transpose(0, 2, 1, 3).reshape(n, t_in, c_out * k)
        gx = np.matmul(gf, w.reshape(c_in, c_out * k).T).transpose(0, 2, 1)
        gw = np.matmul(xb.transpose(1, 0, 2).reshape(c_in, n * t_in), gf.reshape(n * t_in, c_out * k))
        gx = np.ascontiguousarray(gx)
        return (gx[0] if squeeze else gx), gw.reshape(c_in, c_out, k)

    return _record("conv1d_transpose", out[0] if squeeze else out, (x, kernels), bw)


# backward


@dataclass
class Tape:
    """Operations reachable from a root, in execution (hence topological) order."""

    nodes: list[Node]

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Node] = []
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            stack.extend(node.inputs)
        nodes.sort(key=lambda nd: nd.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that requires grad."""
    if root.size != 1:
        raise GradError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise GradError("root does not require grad (detached or built from constants)")
    if tape is None:
        tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = grads[key] + gi if key in grads else gi
    if root.node is None:
        root.grad = np.ones_like(root.data) if root.grad is None else root.grad + 1.0


def grad(fn: Callable[..., Tensor], *arrays: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves built from ``arrays``; return value and gradients."""
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*leaves)
    backward(out)
    return out.item(), [np.zeros_like(l.data) if l.grad is None else l.grad for l in leaves]


def finite_difference_check(
    fn: Callable[[Tensor], Tensor], point, step: float = 1e-6
) -> float:
    """Max over coordinates of |analytic - central difference| / max(|analytic|, 1e-8)."""
    x0 = np.array(as_tensor(point).data, dtype=np.float64)
    _, (analytic,) = grad(fn, x0)
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(Tensor(x0)).item()
        flat[i] = orig - step
        down = fn(Tensor(x0)).item()
        flat[i] = orig
        num_flat[i] = (up - down) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(np.abs(analytic), 1e-8)
    return float(err.max())
