"""Reverse-mode differentiation over dense numpy tensors.

Define-by-run: calling a primitive computes its output immediately and, when a
Graph is being recorded (``with record() as g:``), appends one node per
executed primitive to the tape. The tape order is the execution order, which
is already topological, so ``backward`` simply walks it once in reverse and
applies each node's chain rule, accumulating gradients additively at fan-out.
Outside a recording context the primitives still compute (cheap inference
mode) but nothing is retained.

The primitive set is intentionally small: elementwise arithmetic, reductions,
ReLU, slicing/reshape/concat, valid 3D convolution, 2x max-pooling and
nearest-neighbor upsampling. Warping lives in :mod:`dualreg.warp` and plugs in
through :func:`register_op`. Training runs at float32; gradient checks must
use float64 inputs (finite-difference conditioning).
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np


class Tensor:
    """A dense array plus an optional same-shape gradient accumulator.

    ``requires_grad=False`` marks pure data (images, constants); backward
    rules skip it, which in particular avoids the input-gradient correlation
    of the first convolution layer.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, dtype=None, requires_grad=True):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Node:
    """One executed primitive: its inputs, output, and forward/backward rules."""

    __slots__ = ("name", "parents", "out", "fwd", "bwd")

    def __init__(self, name, parents, out, fwd, bwd):
        self.name = name
        self.parents = parents
        self.out = out
        self.fwd = fwd
        self.bwd = bwd


class Graph:
    """Tape of executed primitives, in execution order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def replay(self):
        """Re-execute every recorded primitive in order on current leaf data."""
        for node in self.nodes:
            node.fwd()


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


@contextmanager
def record(graph: Graph | None = None):
    """Record executed primitives into ``graph`` (a fresh one by default)."""
    g = graph if graph is not None else Graph()
    _stack().append(g)
    try:
        yield g
    finally:
        _stack().pop()


def register_op(name, parents, out, fwd, bwd) -> Tensor:
    """Attach a primitive's node to the active graph, if any.

    External modules use this to contribute primitives (e.g. the warp layer)
    without autodiff needing to know about them.
    """
    stack = _stack()
    if stack:
        stack[-1].nodes.append(Node(name, tuple(parents), out, fwd, bwd))
    return out


def backward(graph: Graph, output: Tensor, seed=1.0) -> None:
    """Walk the tape in reverse, accumulating gradients into every leaf.

    ``seed`` is broadcast to the output's shape (1.0 for a scalar loss).
    """
    seed_arr = np.broadcast_to(np.asarray(seed, dtype=output.data.dtype), output.data.shape)
    output.grad = seed_arr.copy() if output.grad is None else output.grad + seed_arr
    for node in reversed(graph.nodes):
        if node.out.grad is not None:
            node.bwd(node.out.grad)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _accum(t: Tensor, g) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.data.shape), dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data + b.data)

    def fwd():
        out.data = a.data + b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return register_op("add", (a, b), out, fwd, bwd)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data - b.data)

    def fwd():
        out.data = a.data - b.data

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return register_op("sub", (a, b), out, fwd, bwd)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data * b.data)

    def fwd():
        out.data = a.data * b.data

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return register_op("mul", (a, b), out, fwd, bwd)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = Tensor(a.data / b.data)

    def fwd():
        out.data = a.data / b.data

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * out.data / b.data, b.data.shape))

    return register_op("div", (a, b), out, fwd, bwd)


def scale(a, s: float) -> Tensor:
    a = _lift(a)
    sv = a.data.dtype.type(s)
    out = Tensor(a.data * sv)

    def fwd():
        out.data = a.data * sv

    def bwd(g):
        _accum(a, g * sv)

    return register_op("scale", (a,), out, fwd, bwd)


def add_scalar(a, s: float) -> Tensor:
    a = _lift(a)
    sv = a.data.dtype.type(s)
    out = Tensor(a.data + sv)

    def fwd():
        out.data = a.data + sv

    def bwd(g):
        _accum(a, g)

    return register_op("add_scalar", (a,), out, fwd, bwd)


def sqrt(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.sqrt(a.data))

    def fwd():
        out.data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * (0.5 / out.data))

    return register_op("sqrt", (a,), out, fwd, bwd)


def relu(a) -> Tensor:
    a = _lift(a)
    out = Tensor(np.maximum(a.data, 0))

    def fwd():
        out.data = np.maximum(a.data, 0)

    def bwd(g):
        _accum(a, g * (a.data > 0))

    return register_op("relu", (a,), out, fwd, bwd)


# ---------------------------------------------------------------------------
# Reductions and shape ops


def tsum(a, axes=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.sum(axis=axes, keepdims=keepdims))

    def fwd():
        out.data = a.data.sum(axis=axes, keepdims=keepdims)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape))

    return register_op("sum", (a,), out, fwd, bwd)


def tmean(a, axes=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.mean(axis=axes, keepdims=keepdims))
    count = a.data.size / max(1, out.data.size)

    def fwd():
        out.data = a.data.mean(axis=axes, keepdims=keepdims)

    def bwd(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        _accum(a, np.broadcast_to(g, a.data.shape) / a.data.dtype.type(count))

    return register_op("mean", (a,), out, fwd, bwd)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out = Tensor(a.data.reshape(shape).copy())

    def fwd():
        out.data = a.data.reshape(shape).copy()

    def bwd(g):
        _accum(a, g.reshape(a.data.shape))

    return register_op("reshape", (a,), out, fwd, bwd)


def slice_nd(a, key) -> Tensor:
    """Extract a rectangular block; ``key`` is a tuple of slices, one per axis."""
    a = _lift(a)
    key = tuple(key)
    if len(key) != a.data.ndim or not all(isinstance(s, slice) for s in key):
        raise ValueError("key must provide one slice per axis")
    out = Tensor(a.data[key].copy())

    def fwd():
        out.data = a.data[key].copy()

    def bwd(g):
        if not a.requires_grad:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        a.grad[key] += g

    return register_op("slice", (a,), out, fwd, bwd)


def concat(parts, axis=0) -> Tensor:
    parts = [_lift(p) for p in parts]
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.data.shape[axis] for p in parts]

    def fwd():
        out.data = np.concatenate([p.data for p in parts], axis=axis)

    def bwd(g):
        offset = 0
        for p, n in zip(parts, sizes):
            key = [slice(None)] * g.ndim
            key[axis] = slice(offset, offset + n)
            _accum(p, g[tuple(key)])
            offset += n

    return register_op("concat", tuple(parts), out, fwd, bwd)


# ---------------------------------------------------------------------------
# Spatial primitives: valid 3D convolution, 2x pooling, 2x upsampling.
# Layouts are always (N, C, D, H, W) with W fastest.


_COL_BYTES = 48 << 20  # scratch bound for the lowered column matrix


def _fill_col(col, xn, z0, z1, Ho, Wo, kd, kh, kw):
    """Lower one depth slab of one sample into (Ci*k^3, voxels) rows."""
    r = 0
    for ci in range(xn.shape[0]):
        for dz in range(kd):
            for dy in range(kh):
                for dx in range(kw):
                    np.copyto(col[r].reshape(z1 - z0, Ho, Wo),
                              xn[ci, z0 + dz:z1 + dz, dy:dy + Ho, dx:dx + Wo])
                    r += 1


def _conv_geometry(x_shape, w_shape):
    N, Ci, D, H, W = x_shape
    Co, Ci2, kd, kh, kw = w_shape
    if Ci != Ci2:
        raise ValueError(f"channel mismatch: input {Ci} vs kernel {Ci2}")
    Do, Ho, Wo = D - kd + 1, H - kh + 1, W - kw + 1
    if min(Do, Ho, Wo) <= 0:
        raise ValueError(f"input {x_shape[2:]} too small for kernel {(kd, kh, kw)}")
    return N, Ci, Co, (kd, kh, kw), (Do, Ho, Wo)


def _corr3(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid cross-correlation of (N, Ci, D, H, W) with (Co, Ci, kd, kh, kw).

    Depth slabs are lowered to a (Ci*k^3, voxels) column matrix with
    row-contiguous block copies, then reduced by a single GEMM per slab.
    1x1x1 kernels skip the lowering entirely.
    """
    N, Ci, Co, (kd, kh, kw), (Do, Ho, Wo) = _conv_geometry(x.shape, w.shape)
    out = np.empty((N, Co, Do, Ho, Wo), dtype=x.dtype)
    if kd == kh == kw == 1:
        for n in range(N):
            np.matmul(w.reshape(Co, Ci), x[n].reshape(Ci, -1), out=out[n].reshape(Co, -1))
        return out
    K = Ci * kd * kh * kw
    wmat = np.ascontiguousarray(w.reshape(Co, K))
    step = max(1, min(Do, int(_COL_BYTES // max(1, K * Ho * Wo * x.itemsize))))
    col = np.empty((K, step * Ho * Wo), dtype=x.dtype)
    for n in range(N):
        for z0 in range(0, Do, step):
            z1 = min(Do, z0 + step)
            colv = col[:, :(z1 - z0) * Ho * Wo]
            _fill_col(colv, x[n], z0, z1, Ho, Wo, kd, kh, kw)
            np.matmul(wmat, colv, out=out[n, :, z0:z1].reshape(Co, -1))
    return out


def _corr3_weight_grad(x: np.ndarray, g: np.ndarray, w_shape) -> np.ndarray:
    """d(conv)/d(kernel): correlate the input with the upstream gradient."""
    N, Ci, Co, (kd, kh, kw), (Do, Ho, Wo) = _conv_geometry(x.shape, w_shape)
    K = Ci * kd * kh * kw
    gw = np.zeros((Co, K), dtype=x.dtype)
    if kd == kh == kw == 1:
        for n in range(N):
            gw += g[n].reshape(Co, -1) @ x[n].reshape(Ci, -1).T
        return gw.reshape(w_shape)
    step = max(1, min(Do, int(_COL_BYTES // max(1, K * Ho * Wo * x.itemsize))))
    col = np.empty((K, step * Ho * Wo), dtype=x.dtype)
    for n in range(N):
        for z0 in range(0, Do, step):
            z1 = min(Do, z0 + step)
            colv = col[:, :(z1 - z0) * Ho * Wo]
            _fill_col(colv, x[n], z0, z1, Ho, Wo, kd, kh, kw)
            gw += g[n, :, z0:z1].reshape(Co, -1) @ colv.T
    return gw.reshape(w_shape)


def conv3d(x, w, b=None) -> Tensor:
    """Valid (no padding) 3D convolution, plus per-output-channel bias."""
    x, w = _lift(x), _lift(w)
    b = _lift(b) if b is not None else None

    def compute():
        out_data = _corr3(x.data, w.data)
        if b is not None:
            out_data += b.data.reshape(1, -1, 1, 1, 1)
        return out_data

    out = Tensor(compute())

    def fwd():
        out.data = compute()

    def bwd(g):
        if w.requires_grad:
            _accum(w, _corr3_weight_grad(x.data, g, w.data.shape))
        if b is not None:
            _accum(b, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            kd, kh, kw = w.data.shape[2:]
            # full correlation with the channel-transposed, spatially flipped kernel
            wt = np.ascontiguousarray(w.data.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
            gp = np.pad(g, ((0, 0), (0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            _accum(x, _corr3(gp, wt))

    parents = (x, w, b) if b is not None else (x, w)
    return register_op("conv3d", parents, out, fwd, bwd)


def maxpool2(x) -> Tensor:
    """2x2x2 max pooling; spatial extents must be even."""
    x = _lift(x)
    N, C, D, H, W = x.data.shape
    if D % 2 or H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial extents, got {(D, H, W)}")

    def compute():
        return x.data.reshape(N, C, D // 2, 2, H // 2, 2, W // 2, 2).max(axis=(3, 5, 7))

    out = Tensor(compute())

    def fwd():
        out.data = compute()

    def bwd(g):
        win = x.data.reshape(N, C, D // 2, 2, H // 2, 2, W // 2, 2)
        expand = out.data[:, :, :, None, :, None, :, None]
        gx = ((win == expand) * g[:, :, :, None, :, None, :, None]).reshape(N, C, D, H, W)
        _accum(x, gx.astype(x.data.dtype, copy=False))

    return register_op("maxpool2", (x,), out, fwd, bwd)


def batchnorm(x, gamma, beta, eps: float = 1e-5):
    """Batch normalization over (batch, spatial) per channel, batch statistics.

    ``x`` is (N, C, D, H, W); ``gamma``/``beta`` are per-channel affine
    parameters of shape (C,). Uses the biased variance. Returns
    ``(out, stats)`` where ``stats`` carries the batch mean/variance for
    running-average bookkeeping. Inference-time normalization with stored
    running statistics is plain elementwise arithmetic and does not need
    this fused primitive.
    """
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    axes = (0, 2, 3, 4)
    cshape = (1, -1, 1, 1, 1)
    m = x.data.size // x.data.shape[1]
    state = {}

    def compute():
        mu = x.data.mean(axis=axes, keepdims=True)
        var = np.square(x.data - mu).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
        state["mu"], state["var"], state["inv"] = mu, var, inv
        return gamma.data.reshape(cshape) * ((x.data - mu) * inv) + beta.data.reshape(cshape)

    out = Tensor(compute())

    def fwd():
        out.data = compute()

    def bwd(g):
        xh = (x.data - state["mu"]) * state["inv"]
        dgamma = (g * xh).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        _accum(gamma, dgamma)
        _accum(beta, dbeta)
        if x.requires_grad:
            coef = (gamma.data.reshape(cshape) * state["inv"])
            gx = coef * (g - dbeta.reshape(cshape) / m - xh * (dgamma.reshape(cshape) / m))
            _accum(x, gx.astype(x.data.dtype, copy=False))

    register_op("batchnorm", (x, gamma, beta), out, fwd, bwd)
    return out, state


def upsample2(x) -> Tensor:
    """Nearest-neighbor 2x upsampling; backward sums each 2x2x2 block."""
    x = _lift(x)
    N, C, D, H, W = x.data.shape

    def compute():
        return x.data.repeat(2, axis=2).repeat(2, axis=3).repeat(2, axis=4)

    out = Tensor(compute())

    def fwd():
        out.data = compute()

    def bwd(g):
        _accum(x, g.reshape(N, C, D, 2, H, 2, W, 2).sum(axis=(3, 5, 7)))

    return register_op("upsample2", (x,), out, fwd, bwd)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking


def gradcheck_detail(fn, x, h=1e-4, sample=None, seed=0):
    """Compare analytic and central-difference gradients of a scalar function.

    ``fn`` maps one Tensor to a scalar Tensor and must be deterministic;
    ``x`` must be float64. When ``sample`` is given, only that many randomly
    chosen coordinates are probed (for large inputs). Returns
    ``(max_relative_error, worst_coordinate_index)``.
    """
    x = np.asarray(x)
    if x.dtype != np.float64:
        raise ValueError("gradcheck requires float64 input")
    with record() as g:
        xt = Tensor(x.copy())
        y = fn(xt)
    if y.data.size != 1:
        raise ValueError("fn must be scalar-valued")
    if not np.isfinite(y.data).all():
        raise FloatingPointError("fn returned a non-finite value")
    backward(g, y)
    analytic = (xt.grad if xt.grad is not None else np.zeros_like(x)).ravel()

    if sample is None or sample >= x.size:
        indices = np.arange(x.size)
    else:
        indices = np.random.default_rng(seed).choice(x.size, size=sample, replace=False)

    def evaluate(arr):
        out = fn(Tensor(arr))
        val = float(out.data)
        if not np.isfinite(val):
            raise FloatingPointError("fn returned a non-finite value")
        return val

    max_err, worst = 0.0, 0
    flat = x.ravel()
    for i in indices:
        xp = flat.copy()
        xp[i] += h
        fp = evaluate(xp.reshape(x.shape))
        xp[i] -= 2 * h
        fm = evaluate(xp.reshape(x.shape))
        numeric = (fp - fm) / (2 * h)
        a = analytic[i]
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        if err > max_err:
            max_err, worst = err, int(i)
    return max_err, np.unravel_index(worst, x.shape)


def gradcheck(fn, x, h=1e-4, sample=None, seed=0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    err, _ = gradcheck_detail(fn, x, h=h, sample=sample, seed=seed)
    return err
