"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations the segmentation network and its losses need
are provided.  Every op accepts a single image laid out as ``C x H x W`` or a
batch ``N x C x H x W``.  Arrays keep whatever float dtype they were created
with, so gradient checks simply build their inputs in float64.

Recording happens only inside an active :class:`Tape`::

    with Tape() as tape:
        loss = cross_entropy_loss(forward(params, x), y)
    grads = tape.backward(loss, params)
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

IGNORE_INDEX = 255


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float array plus the bookkeeping needed to take part in a tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return scale(self, float(other))

    __rmul__ = __mul__


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], tuple]


@dataclass
class Tape:
    """Ordered record of primitive ops, replayed once in reverse."""

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def reset(self) -> None:
        self.nodes.clear()
        self.consumed = False

    def backward(self, loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor] | None = None) -> dict:
        """Accumulate d(loss)/d(param) for every parameter.

        ``params`` may be a name->Tensor mapping (the result is keyed by
        name), an iterable of named tensors, or ``None`` for every named leaf
        seen on the tape.  Parameters the loss does not reach get zeros.
        """
        if self.consumed:
            raise TapeError("backward already ran on this tape; call reset() first")
        if loss.data.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        if params is None:
            seen = {}
            for node in self.nodes:
                for inp in node.inputs:
                    if inp.requires_grad and inp.name is not None:
                        seen[inp.name] = inp
            params = seen
        if isinstance(params, Mapping):
            items = params.items()
        else:
            items = ((p.name, p) for p in params)
        out = {}
        for name, p in items:
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else g.astype(p.dtype, copy=False)
        return out


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.nodes.append(_Node(out, inputs, backward))
    return out


def no_grad_value(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


# --------------------------------------------------------------------------
# elementwise and reductions
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _record(a.data + a.dtype.type(c), (a,), lambda g: (g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return _record(np.asarray(a.data.sum(dtype=dtype)), (a,),
                   lambda g: (np.full(shape, g, dtype=dtype),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, dilation: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded cross-correlation (no kernel flip), lowered to one GEMM."""
    squeeze = x.data.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be CxHxW or NxCxHxW, got {x.shape}")
    wd = weight.data
    n, c, h, w = xd.shape
    o, ci, k, k2 = wd.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {ci}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
    ho = conv_output_size(h, k, stride, dilation, padding)
    wo = conv_output_size(w, k, stride, dilation, padding)
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d: output would be empty")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    cols = np.empty((n, c, k, k, ho, wo), dtype=xd.dtype)
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride]
    cols = cols.reshape(n, c * k * k, ho * wo)
    wmat = wd.reshape(o, c * k * k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(n, o, ho, wo)
    if squeeze:
        out = out[0]

    def backward(g):
        g4 = (g[None] if squeeze else g).reshape(n, o, ho * wo)
        gw = np.tensordot(g4, cols, axes=([0, 2], [0, 2])).reshape(wd.shape) if weight.requires_grad else None
        gb = g4.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g4).reshape(n, c, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    r0, c0 = i * dilation, j * dilation
                    gxp[:, :, r0:r0 + span_h:stride, c0:c0 + span_w:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
            if squeeze:
                gx = gx[0]
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, backward)


# --------------------------------------------------------------------------
# resampling
# --------------------------------------------------------------------------

def interpolation_matrix(n_in: int, factor: int, dtype=np.float64) -> np.ndarray:
    """Rows map output positions to input weights, half-pixel centres."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    np.add.at(m, (np.arange(n_out), lo), 1 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return _record(x.data.copy(), (x,), lambda g: (g,))
    h, w = x.shape[-2:]
    ah = interpolation_matrix(h, factor, x.dtype)
    aw = interpolation_matrix(w, factor, x.dtype)
    out = ah @ x.data @ aw.T
    return _record(out, (x,), lambda g: (ah.T @ g @ aw,))


# --------------------------------------------------------------------------
# probabilities and losses
# --------------------------------------------------------------------------

def _log_softmax(logits: np.ndarray, axis: int) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    """Plain-array channel softmax, used wherever no gradient is needed."""
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_channel(logits: Tensor) -> Tensor:
    p = softmax(logits.data, axis=-3)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-3, keepdims=True)),)

    return _record(p, (logits,), backward)


def _check_labels(labels: np.ndarray, num_classes: int) -> None:
    bad = (labels >= num_classes) & (labels != IGNORE_INDEX)
    if np.any(bad) or np.any(labels < 0):
        raise ValueError(f"labels must lie in 0..{num_classes - 1} or be {IGNORE_INDEX}")


def cross_entropy_loss(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean over non-ignored pixels of -log softmax at the true class."""
    labels = np.asarray(labels)
    num_classes = logits.shape[-3]
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    _check_labels(labels, num_classes)
    valid = labels != ignore_index
    count = int(valid.sum())
    dtype = logits.dtype
    if count == 0:
        return _record(np.zeros((), dtype=dtype), (logits,),
                       lambda g: (np.zeros_like(logits.data),))
    safe = np.where(valid, labels, 0).astype(np.intp)
    logp = _log_softmax(logits.data, axis=-3)
    picked = np.take_along_axis(logp, np.expand_dims(safe, -3), axis=-3)
    picked = np.squeeze(picked, -3)
    loss = -(picked * valid).sum(dtype=dtype) / dtype.type(count)

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, np.expand_dims(safe, -3), 1, axis=-3)
        grad -= onehot
        grad *= np.expand_dims(valid, -3)
        return (grad * (g / count),)

    return _record(np.asarray(loss, dtype=dtype), (logits,), backward)


def kl_divergence_loss(target_probs, student_logits: Tensor, atol: float = 1e-5) -> Tensor:
    """Pixel-mean KL(target || softmax(student)); the target gets no gradient."""
    pt = np.asarray(no_grad_value(target_probs))
    if pt.shape != student_logits.shape:
        raise ShapeError(f"target {pt.shape} does not match student {student_logits.shape}")
    if np.any(pt < 0):
        raise ValueError("target probabilities must be nonnegative")
    if np.any(np.abs(pt.sum(axis=-3) - 1) > atol):
        raise ValueError("target probabilities must sum to 1 at every pixel")
    dtype = student_logits.dtype
    pt = pt.astype(dtype, copy=False)
    num_pixels = pt.size // pt.shape[-3]
    logps = _log_softmax(student_logits.data, axis=-3)
    with np.errstate(divide="ignore", invalid="ignore"):
        logpt = np.where(pt > 0, np.log(np.where(pt > 0, pt, 1)), 0)
    loss = (pt * (logpt - logps)).sum(dtype=dtype) / dtype.type(num_pixels)

    def backward(g):
        return ((np.exp(logps) - pt) * (g / num_pixels),)

    return _record(np.asarray(loss, dtype=dtype), (student_logits,), backward)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

@dataclass
class OptimizerState:
    base_lr: float = 2.5e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    power: float = 0.9
    max_iter: int = 1
    iteration: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def poly_lr(iteration: int, state: OptimizerState) -> float:
    if iteration < 0 or iteration > state.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {state.max_iter}]")
    return state.base_lr * (1 - iteration / state.max_iter) ** state.power


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
             state: OptimizerState) -> Mapping[str, Tensor]:
    """Momentum SGD with L2 decay folded into the velocity; updates in place."""
    lr = poly_lr(state.iteration, state)
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        dt = p.dtype.type
        v = dt(state.momentum) * v + g + dt(state.weight_decay) * p.data
        state.velocity[name] = v
        p.data = p.data - dt(lr) * v
    state.iteration += 1
    return params
