"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values are numpy arrays (float32 by default, float64 for verification).
Operations record themselves onto the innermost active ``Graph`` when any
input requires gradients; outside a ``with Graph():`` block they evaluate
pure numpy with no tracking, which doubles as inference mode.

A Graph and the tensors created under it belong to one execution context.
Leaf tensors (e.g. model parameters) may be shared read-only across
contexts; their ``.grad`` is only touched by backward passes run in the
context that used them.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Operation inputs do not conform to the op's shape rules."""


class GraphError(RuntimeError):
    """Graph misuse: backward re-run, non-scalar loss, missing grads."""


class ZeroVectorError(ValueError):
    """Cosine of a zero vector is undefined."""


class Tensor:
    """A dense n-dimensional float array, optionally tracked for autodiff."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"


@dataclass
class OpRecord:
    """One primitive application: inputs, output, and its backward rule.

    ``backward`` accumulates into the inputs' ``.grad`` given the output
    gradient; ``forward`` recomputes the output value from the inputs'
    current data (used to verify replay determinism). Saved intermediates
    live in the closures.
    """

    name: str
    inputs: tuple
    output: Tensor
    backward: object
    forward: object


_LOCAL = threading.local()


def _graph_stack() -> list:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


class Graph:
    """Ordered tape of primitive operations, replayed in reverse by backward().

    Execution order is topological by construction. ``backward`` may run
    once per graph; build a fresh graph for every forward pass.
    """

    def __init__(self):
        self.records: list[OpRecord] = []
        self._backward_done = False

    def __enter__(self) -> "Graph":
        _graph_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _graph_stack().pop()
        assert popped is self
        return False

    def describe(self) -> list[tuple[str, tuple[int, ...], int]]:
        """(op name, input tensor ids, output tensor id) per record, in order."""
        return [(r.name, tuple(id(t) for t in r.inputs), id(r.output)) for r in self.records]

    def replay_matches(self) -> bool:
        """Recompute every recorded forward from current input data; True iff
        each output is reproduced bit-for-bit."""
        for rec in self.records:
            if rec.forward().tobytes() != rec.output.data.tobytes():
                return False
        return True

    def backward(self, loss: Tensor):
        """Populate ``.grad`` for every requires_grad tensor reachable from loss.

        Gradients accumulate (+=) for tensors feeding multiple ops.
        """
        if self._backward_done:
            raise GraphError("backward() already ran on this graph; build a new Graph")
        if loss.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
        self._backward_done = True
        loss.grad = np.ones_like(loss.data)
        for rec in reversed(self.records):
            gout = rec.output.grad
            if gout is None:
                continue  # branch not feeding the loss
            rec.backward(gout)


def _record(name, inputs, out_data, backward, forward):
    """Wrap op output; append an OpRecord when tracking is active."""
    graph = _active_graph()
    tracked = graph is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=tracked, dtype=out_data.dtype)
    if tracked:
        graph.records.append(OpRecord(name, tuple(inputs), out, backward, forward))
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(t.data.dtype, copy=True)
    else:
        t.grad += g


def frozen(params):
    """Context manager: temporarily clear requires_grad on the given tensors
    so backward passes skip their gradient work (e.g. parameters during an
    input-space attack)."""
    import contextlib

    @contextlib.contextmanager
    def _ctx():
        tensors = list(params.values()) if isinstance(params, dict) else list(params)
        saved = [t.requires_grad for t in tensors]
        for t in tensors:
            t.requires_grad = False
        try:
            yield
        finally:
            for t, flag in zip(tensors, saved):
                t.requires_grad = flag

    return _ctx()


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {tuple(a.shape)} and {tuple(b.shape)} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _record("add", (a, b), a.data + b.data, backward, lambda: a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _record("sub", (a, b), a.data - b.data, backward, lambda: a.data - b.data)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _record("mul", (a, b), a.data * b.data, backward, lambda: a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        _accum(a, g * c)

    return _record("scale", (a,), a.data * c, backward, lambda: a.data * c)


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = a.data > 0

    def backward(g):
        _accum(a, g * mask)

    return _record("relu", (a,), np.maximum(a.data, 0), backward, lambda: np.maximum(a.data, 0))


# ---------------------------------------------------------------------------
# linear algebra and shape primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1-D/2-D operands (vectors follow numpy matmul rules)."""
    if a.data.ndim > 2 or b.data.ndim > 2 or a.data.ndim == 0 or b.data.ndim == 0:
        raise ShapeError(f"matmul: expected 1-D or 2-D operands, got {tuple(a.shape)} and {tuple(b.shape)}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {tuple(a.shape)} and {tuple(b.shape)}")

    def backward(g):
        if a.requires_grad:
            if b.data.ndim == 2:
                _accum(a, g @ b.data.T if a.data.ndim == 2 else b.data @ g)
            else:
                _accum(a, np.outer(g, b.data) if a.data.ndim == 2 else g * b.data)
        if b.requires_grad:
            if a.data.ndim == 2:
                _accum(b, a.data.T @ g)
            else:
                _accum(b, np.outer(a.data, g) if b.data.ndim == 2 else g * a.data)

    return _record("matmul", (a, b), a.data @ b.data, backward, lambda: a.data @ b.data)


def flatten(a: Tensor, start_axis: int = 1) -> Tensor:
    """Collapse all axes from start_axis onward into one."""
    in_shape = a.shape
    out_shape = in_shape[:start_axis] + (-1,)

    def backward(g):
        _accum(a, g.reshape(in_shape))

    return _record("flatten", (a,), a.data.reshape(out_shape), backward, lambda: a.data.reshape(out_shape))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - module-level np-style name
    def backward(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.dtype, copy=True))

    return _record("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype), backward,
                   lambda: np.asarray(a.data.sum(), dtype=a.dtype))


def mean(a: Tensor) -> Tensor:
    n = a.size

    def backward(g):
        _accum(a, np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True))

    return _record("mean", (a,), np.asarray(a.data.mean(), dtype=a.dtype), backward,
                   lambda: np.asarray(a.data.mean(), dtype=a.dtype))


# ---------------------------------------------------------------------------
# convolution and pooling


def _conv2d_out_shape(x_shape, w_shape, stride, padding):
    n, c, h, w = x_shape
    o, ci, kh, kw = w_shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    return n, o, ho, wo


def _conv_windows(x, kh, kw, stride, padding):
    """Sliding (kh, kw) windows of the padded input: (N, C, Ho, Wo, kh, kw) view."""
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def _conv2d_forward(x, w, bias, stride, padding):
    kh, kw = w.shape[2], w.shape[3]
    win = _conv_windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias[None, :, None, None]
    return out


def _conv2d_input_grad(g, w, x_shape, stride, padding):
    """Transposed correlation routing the output gradient back to the input.

    For stride 1 this is exactly a full correlation with the channel-swapped,
    spatially flipped kernel; larger strides scatter offset by offset.
    """
    o, c, kh, kw = w.shape
    n, _, h, wd = x_shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if stride == 1 and padding <= kh - 1 and padding <= kw - 1:
        w_t = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - padding, kh - 1 - padding),
                        (kw - 1 - padding, kw - 1 - padding)))
        return _conv2d_forward(gp, w_t, None, 1, 0)[:, :, :h, :wd]
    gx = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=g.dtype)
    gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # (N, Ho, Wo, O)
    for i in range(kh):
        for j in range(kw):
            patch = gt @ w[:, :, i, j]  # (N, Ho, Wo, C)
            gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += \
                patch.transpose(0, 3, 1, 2)
    if padding:
        gx = gx[:, :, padding:-padding, padding:-padding]
    return gx


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x is NCHW, w is OIHW, bias is (O,).

    Backward is the direct transposed correlation (full correlation with the
    flipped kernel); no column-matrix buffer is materialized.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: need NCHW input and OIHW kernel, got {tuple(x.shape)} and {tuple(w.shape)}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: channel mismatch between input {tuple(x.shape)} and kernel {tuple(w.shape)}")
    n, o, ho, wo = _conv2d_out_shape(x.shape, w.shape, stride, padding)
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {tuple(w.shape)} does not fit input {tuple(x.shape)} "
                         f"with stride={stride} padding={padding}")
    kh, kw = w.shape[2], w.shape[3]
    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        if w.requires_grad:
            win = _conv_windows(x.data, kh, kw, stride, padding)
            _accum(w, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
        if x.requires_grad:
            _accum(x, _conv2d_input_grad(g, w.data, x.shape, stride, padding))
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 2, 3)))

    bias_data = None if bias is None else bias.data
    return _record("conv2d", inputs, _conv2d_forward(x.data, w.data, bias_data, stride, padding),
                   backward, lambda: _conv2d_forward(x.data, w.data, bias_data, stride, padding))


def avgpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k-by-k average pooling; trailing rows/cols are dropped."""
    if x.data.ndim != 4:
        raise ShapeError(f"avgpool2d: need NCHW input, got {tuple(x.shape)}")
    n, c, h, w = x.shape
    ho, wo = h // k, w // k
    if ho == 0 or wo == 0:
        raise ShapeError(f"avgpool2d: window {k} larger than input {tuple(x.shape)}")

    inv = 1.0 / (k * k)

    def fwd():
        out = np.zeros((n, c, ho, wo), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                out += x.data[:, :, i : ho * k : k, j : wo * k : k]
        out *= inv
        return out

    def backward(g):
        gx = np.zeros_like(x.data)
        gk = g * inv
        for i in range(k):
            for j in range(k):
                gx[:, :, i : ho * k : k, j : wo * k : k] = gk
        _accum(x, gx)

    return _record("avgpool2d", (x,), fwd(), backward, fwd)


# ---------------------------------------------------------------------------
# losses and objectives


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (plain numpy helper)."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Mean cross-entropy of logits against integer class labels.

    Accepts a single (K,) vector with a scalar label or an (N,K) batch with
    N labels. Returns (scalar loss, class probabilities) with probabilities
    as a plain array for inspection.
    """
    a = logits.data
    squeeze = a.ndim == 1
    a2 = a[None, :] if squeeze else a
    if a2.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be (K,) or (N,K), got {tuple(a.shape)}")
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = a2.shape
    if y.shape != (n,):
        raise ShapeError(f"softmax_cross_entropy: got {y.size} labels for {n} rows")
    if np.any(y < 0) or np.any(y >= k):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {k})")
    if not np.all(np.isfinite(a2)):
        raise ValueError("softmax_cross_entropy: non-finite logits")

    shifted = a2 - a2.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    loss_val = np.asarray(-logp[np.arange(n), y].mean(), dtype=a.dtype)

    def backward(g):
        onehot = np.zeros_like(a2)
        onehot[np.arange(n), y] = 1
        glogits = (probs - onehot) * (g / n)
        _accum(logits, glogits.astype(a.dtype)[0] if squeeze else glogits.astype(a.dtype))

    def fwd():
        s = a2 - a2.max(axis=1, keepdims=True)
        lp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
        return np.asarray(-lp[np.arange(n), y].mean(), dtype=a.dtype)

    loss = _record("softmax_cross_entropy", (logits,), loss_val, backward, fwd)
    return loss, (probs[0] if squeeze else probs)


def cosine_distance(u: Tensor, target: np.ndarray) -> Tensor:
    """1 - cos(u, target) against a fixed target vector; scale-invariant in u."""
    v = np.asarray(target, dtype=np.float64).reshape(-1)
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ZeroVectorError("cosine_distance: target is the zero vector")
    ud = u.data.reshape(-1).astype(np.float64)
    nu = np.linalg.norm(ud)
    if nu < 1e-30:
        raise ZeroVectorError("cosine_distance: input feature vector is zero")
    cos = float(ud @ v / (nu * nv))

    def backward(g):
        gu = -(v / (nu * nv) - cos * ud / (nu * nu)) * float(g)
        _accum(u, gu.reshape(u.shape).astype(u.dtype))

    def fwd():
        x = u.data.reshape(-1).astype(np.float64)
        return np.asarray(1.0 - x @ v / (np.linalg.norm(x) * nv), dtype=u.dtype)

    return _record("cosine_distance", (u,), np.asarray(1.0 - cos, dtype=u.dtype), backward, fwd)


def total_variation(z: Tensor, eps: float = 1e-8) -> Tensor:
    """Isotropic total variation of an NCHW image batch.

    Per channel and pixel: sqrt(dh^2 + dw^2 + eps) with forward differences,
    zero beyond the last row/column; eps avoids the kink at zero.
    """
    if z.data.ndim != 4:
        raise ShapeError(f"total_variation: need NCHW input, got {tuple(z.shape)}")

    def pieces(data):
        dh = np.zeros_like(data)
        dw = np.zeros_like(data)
        dh[:, :, :-1, :] = data[:, :, 1:, :] - data[:, :, :-1, :]
        dw[:, :, :, :-1] = data[:, :, :, 1:] - data[:, :, :, :-1]
        s = np.sqrt(dh * dh + dw * dw + eps)
        return dh, dw, s

    dh, dw, s = pieces(z.data)

    def backward(g):
        gz = np.zeros_like(z.data)
        rh = dh / s
        rw = dw / s
        gz[:, :, 1:, :] += rh[:, :, :-1, :]
        gz[:, :, :-1, :] -= rh[:, :, :-1, :]
        gz[:, :, :, 1:] += rw[:, :, :, :-1]
        gz[:, :, :, :-1] -= rw[:, :, :, :-1]
        _accum(z, gz * float(g))

    return _record("total_variation", (z,), np.asarray(s.sum(), dtype=z.dtype), backward,
                   lambda: np.asarray(pieces(z.data)[2].sum(), dtype=z.dtype))


# ---------------------------------------------------------------------------
# verification


@dataclass
class FiniteDiffReport:
    """Result of a central-difference gradient check."""

    max_rel_error: float
    excluded: list[int] = field(default_factory=list)
    per_coord_error: np.ndarray | None = None

    def ok(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error <= tol


def finite_diff_check(fn, point: Tensor, eps: float = 1e-4) -> FiniteDiffReport:
    """Compare backward() gradients of fn at point against central differences.

    fn maps a Tensor to a scalar Tensor and must be deterministic. Coordinates
    where the one-sided slopes disagree badly (a ReLU-style kink under the
    probe) are flagged as excluded and skipped in the error maximum.
    """
    if eps <= 0:
        raise ValueError("finite_diff_check: eps must be positive")
    x0 = point.data.astype(np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True, dtype=np.float64)
    with Graph() as g:
        out = fn(leaf)
        if out.size != 1:
            raise GraphError("finite_diff_check: fn must return a scalar")
        g.backward(out)
    if leaf.grad is None:
        raise GraphError("finite_diff_check: fn does not depend on the point")
    analytic = leaf.grad.reshape(-1)
    f0 = float(out.data)
    if not np.isfinite(f0):
        raise ValueError("finite_diff_check: fn returned a non-finite value")

    flat = x0.reshape(-1)
    errors = np.zeros(flat.size)
    excluded: list[int] = []
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(Tensor(x0.copy(), dtype=np.float64)).data)
        flat[i] = orig - eps
        fm = float(fn(Tensor(x0.copy(), dtype=np.float64)).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(f"finite_diff_check: non-finite fn value at coordinate {i}")
        s_plus = (fp - f0) / eps
        s_minus = (f0 - fm) / eps
        central = (fp - fm) / (2 * eps)
        # one-sided slopes disagreeing at O(1) while smooth curvature would
        # give O(eps) marks a kink under the probe
        if abs(s_plus - s_minus) > 0.05 * max(abs(s_plus), abs(s_minus)) and abs(s_plus - s_minus) > 10 * eps:
            excluded.append(i)
            continue
        denom = max(abs(central), abs(analytic[i]), 1e-6)
        errors[i] = abs(central - analytic[i]) / denom
    return FiniteDiffReport(float(errors.max()) if flat.size else 0.0, excluded, errors)
