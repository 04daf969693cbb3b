"""Dense-tensor kernel with reverse-mode automatic differentiation.

A minimal tape engine over numpy arrays: each op builds an output Tensor
holding a closure that pushes gradients to its parents; ``backward`` on a
scalar root walks the recorded graph in reverse topological order.

Conventions:
  - 2-D matrices, 1-D vectors and 0-d scalars only; the single broadcast
    supported is row-wise bias addition (r,c)+(c,).
  - 64-bit floats are the default and are mandatory for gradient checks;
    32-bit arrays are accepted for training runs.
  - matmul multiply-add counts (2*m*n*k) are recorded in a global
    FlopLedger so forward cost can be audited analytically.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

# tanh-approximation GELU constant sqrt(2/pi)
GELU_C0 = 0.7978845608028654
GELU_C1 = 0.044715


class FlopLedger:
    """Exact multiply-add counters, keyed by op kind.

    Only matmul-like ops contribute (2*m*n*k each); elementwise work is
    not tracked. Counters never decrease within a forward pass; call
    ``reset`` between measurements.
    """

    def __init__(self):
        self.counts: dict[str, int] = {}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def add(self, kind: str, n: int) -> None:
        self.counts[kind] = self.counts.get(kind, 0) + int(n)

    def reset(self) -> None:
        self.counts = {}

    def snapshot(self) -> dict[str, int]:
        return dict(self.counts)


LEDGER = FlopLedger()


def derived_rng(seed: int, *tags) -> np.random.Generator:
    """Counter-based generator keyed by (seed, tags...).

    The same (seed, tags) tuple always yields the same stream, independent
    of call order, which keeps dropout masks and data sampling reproducible
    across runs and across checkpoint resume.
    """
    h = hashlib.sha256(repr((int(seed),) + tuple(tags)).encode()).digest()
    key = np.frombuffer(h[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


class Tensor:
    """Array node in the autodiff graph.

    ``grad`` accumulates chain-rule contributions from all consumers; it
    stays None until a backward pass reaches this node. Repeated backward
    calls keep accumulating until ``clear_grad`` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents=()):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw arrays, not Tensors")
        arr = np.asarray(data)
        if arr.dtype not in (np.float64, np.float32):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = _parents

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def clear_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad = self.grad + g

    def backward(self) -> None:
        """Populate grads of every ancestor; root must be scalar."""
        if self.data.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.shape}")
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
                if id(p) not in visited:
                    stack.append((p, False))
        # Contributions of this pass live in a scratch map so that repeated
        # backward calls accumulate independent passes into .grad.
        scratch: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        def sink(t: Tensor, g: np.ndarray) -> None:
            prev = scratch.get(id(t))
            scratch[id(t)] = g if prev is None else prev + g

        for node in reversed(topo):
            g = scratch.pop(id(node), None)
            if g is None:
                continue
            node._accumulate(g)
            if node._backward is not None:
                node._backward(g, sink)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def _as_const(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _track(inputs) -> bool:
    return any(
        isinstance(t, Tensor) and (t.requires_grad or t._parents or t._backward)
        for t in inputs
    )


def _make(data, inputs, backward):
    out = Tensor(data)
    if _track(inputs):
        out._parents = tuple(t for t in inputs if isinstance(t, Tensor))
        out._backward = backward
        out.requires_grad = True
    return out


def clear_grads(tensors) -> None:
    for t in tensors:
        t.clear_grad()


def make_op(data, inputs, backward) -> Tensor:
    """Build a Tensor from a custom op.

    ``backward(g, sink)`` must push each parent's gradient contribution via
    ``sink(parent, grad)``. Non-Tensor inputs are ignored for the graph.
    """
    return _make(data, inputs, backward)


# -- arithmetic ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor, rowwise: bool = False) -> Tensor:
    """Exact row-by-column product; ledger += 2*m*n*k.

    ``rowwise=True`` computes each output row as an independent (1,k)@(k,n)
    product. The result is then bitwise-independent of which other rows are
    present in the batch, which the sparse expert dispatch relies on; plain
    BLAS gemm does not guarantee that.
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    LEDGER.add("matmul", 2 * m * n * k)
    if rowwise:
        data = (a.data[:, None, :] @ b.data)[:, 0, :]
    else:
        data = a.data @ b.data

    def backward(g, sink):
        sink(a, g @ b.data.T)
        sink(b, a.data.T @ g)

    return _make(data, (a, b), backward)


def add(a: Tensor, b) -> Tensor:
    """a + b for same shapes, (r,c)+(c,) bias rows, or a scalar constant."""
    bd = _as_const(b)
    if bd.shape not in (a.shape, ()) and not (
        a.ndim == 2 and bd.ndim == 1 and bd.shape[0] == a.shape[1]
    ):
        raise ShapeError(f"add shapes {a.shape} + {bd.shape}")
    data = a.data + bd

    def backward(g, sink):
        sink(a, g)
        if isinstance(b, Tensor):
            if b.shape == a.shape:
                sink(b, g)
            elif b.ndim == 1 and a.ndim == 2:
                sink(b, g.sum(axis=0))
            else:
                sink(b, g.sum())

    return _make(data, (a, b), backward)


def sub(a: Tensor, b) -> Tensor:
    bd = _as_const(b)
    if bd.shape not in (a.shape, ()):
        raise ShapeError(f"sub shapes {a.shape} - {bd.shape}")
    data = a.data - bd

    def backward(g, sink):
        sink(a, g)
        if isinstance(b, Tensor):
            sink(b, -g if b.shape == a.shape else -g.sum())

    return _make(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a same-shape Tensor/array or a scalar."""
    bd = _as_const(b)
    if bd.shape not in (a.shape, ()):
        raise ShapeError(f"mul shapes {a.shape} * {bd.shape}")
    data = a.data * bd

    def backward(g, sink):
        sink(a, g * bd)
        if isinstance(b, Tensor):
            sink(b, (g * a.data) if b.shape == a.shape else (g * a.data).sum())

    return _make(data, (a, b), backward)


def div(a: Tensor, b) -> Tensor:
    bd = _as_const(b)
    if bd.shape not in (a.shape, ()):
        raise ShapeError(f"div shapes {a.shape} / {bd.shape}")
    data = a.data / bd

    def backward(g, sink):
        sink(a, g / bd)
        if isinstance(b, Tensor):
            gb = -g * a.data / (bd * bd)
            sink(b, gb if b.shape == a.shape else gb.sum())

    return _make(data, (a, b), backward)


def scale_rows(x: Tensor, w) -> Tensor:
    """out[i, j] = x[i, j] * w[i]; w is a length-r vector."""
    wd = _as_const(w)
    if x.ndim != 2 or wd.shape != (x.shape[0],):
        raise ShapeError(f"scale_rows shapes {x.shape} * {wd.shape}")
    data = x.data * wd[:, None]

    def backward(g, sink):
        sink(x, g * wd[:, None])
        if isinstance(w, Tensor):
            sink(w, (g * x.data).sum(axis=1))

    return _make(data, (x, w), backward)


def tsum(x: Tensor) -> Tensor:
    data = x.data.sum()

    def backward(g, sink):
        sink(x, np.full_like(x.data, g))

    return _make(data, (x,), backward)


def tmean(x: Tensor) -> Tensor:
    n = x.data.size
    data = x.data.sum() / n

    def backward(g, sink):
        sink(x, np.full_like(x.data, g / n))

    return _make(data, (x,), backward)


def sum_cols(x: Tensor) -> Tensor:
    """Row sums of a matrix: (r,c) -> (r,)."""
    if x.ndim != 2:
        raise ShapeError(f"sum_cols wants a matrix, got {x.shape}")
    data = x.data.sum(axis=1)

    def backward(g, sink):
        sink(x, np.repeat(g[:, None], x.shape[1], axis=1))

    return _make(data, (x,), backward)


def sqrt(x: Tensor) -> Tensor:
    data = np.sqrt(x.data)

    def backward(g, sink):
        sink(x, g * 0.5 / data)

    return _make(data, (x,), backward)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"transpose wants a matrix, got {x.shape}")

    def backward(g, sink):
        sink(x, g.T)

    return _make(x.data.T.copy(), (x,), backward)


# -- nonlinearities -------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation.

    gelu(x) = 0.5*x*(1 + tanh(0.7978845608*(x + 0.044715*x^3)))
    """
    xd = x.data
    inner = GELU_C0 * (xd + GELU_C1 * xd**3)
    t = np.tanh(inner)
    data = 0.5 * xd * (1.0 + t)

    def backward(g, sink):
        dinner = GELU_C0 * (1.0 + 3.0 * GELU_C1 * xd * xd)
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner
        sink(x, g * dx)

    return _make(data, (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    data = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                    np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))

    def backward(g, sink):
        sink(x, g * data * (1.0 - data))

    return _make(data, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed as max(x,0) + log1p(exp(-|x|))."""
    xd = x.data
    data = np.maximum(xd, 0.0) + np.log1p(np.exp(-np.abs(xd)))

    def backward(g, sink):
        s = np.where(xd >= 0, 1.0 / (1.0 + np.exp(-np.abs(xd))),
                     np.exp(-np.abs(xd)) / (1.0 + np.exp(-np.abs(xd))))
        sink(x, g * s)

    return _make(data, (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction."""
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows wants a matrix, got {x.shape}")
    if np.isnan(x.data).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=1, keepdims=True)

    def backward(g, sink):
        dot = (g * data).sum(axis=1, keepdims=True)
        sink(x, (g - dot) * data)

    return _make(data, (x,), backward)


def logsumexp_rows(x: Tensor) -> Tensor:
    """Stable per-row log-sum-exp: (r,c) -> (r,)."""
    if x.ndim != 2:
        raise ShapeError(f"logsumexp_rows wants a matrix, got {x.shape}")
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=1, keepdims=True)
    data = (m + np.log(s))[:, 0]

    def backward(g, sink):
        sink(x, g[:, None] * (e / s))

    return _make(data, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero mean / unit variance, then affine gamma*y + beta."""
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm shapes {x.shape}, {gamma.shape}, {beta.shape}")
    c = x.shape[1]
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = y * gamma.data + beta.data

    def backward(g, sink):
        sink(gamma, (g * y).sum(axis=0))
        sink(beta, g.sum(axis=0))
        dy = g * gamma.data
        dx = inv * (dy - dy.mean(axis=1, keepdims=True)
                    - y * (dy * y).mean(axis=1, keepdims=True))
        sink(x, dx)
        _ = c

    return _make(data, (x, gamma, beta), backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Zero entries with prob p and scale survivors by 1/(1-p) in training."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout p must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    data = x.data * keep * scale

    def backward(g, sink):
        sink(x, g * keep * scale)

    return _make(data, (x,), backward)


# -- indexing -------------------------------------------------------------


def gather_rows(x: Tensor, rows) -> Tensor:
    """Select rows by index; gradient scatter-adds back."""
    rows = np.asarray(rows, dtype=np.int64)
    data = x.data[rows]

    def backward(g, sink):
        dx = np.zeros_like(x.data)
        np.add.at(dx, rows, g)
        sink(x, dx)

    return _make(data, (x,), backward)


def scatter_rows(src: Tensor, rows, total_rows: int) -> Tensor:
    """Place src rows at the given indices of a zero (total_rows, c) matrix."""
    rows = np.asarray(rows, dtype=np.int64)
    if len(np.unique(rows)) != len(rows):
        raise ShapeError("scatter_rows: duplicate target rows")
    data = np.zeros((total_rows, src.shape[1]), dtype=src.data.dtype)
    data[rows] = src.data

    def backward(g, sink):
        sink(src, g[rows])

    return _make(data, (src,), backward)


def take_per_row(x: Tensor, cols) -> Tensor:
    """out[i] = x[i, cols[i]]; (r,c) -> (r,)."""
    return take_at(x, np.arange(x.shape[0]), cols)


def take_at(x: Tensor, rows, cols) -> Tensor:
    """out[i] = x[rows[i], cols[i]]; gradient scatter-adds back."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    data = x.data[rows, cols]

    def backward(g, sink):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (rows, cols), g)
        sink(x, dx)

    return _make(data, (x,), backward)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    data = x.data[:, start:stop].copy()

    def backward(g, sink):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        sink(x, dx)

    return _make(data, (x,), backward)


def concat_cols(parts: list[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=1)
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g, sink):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            sink(p, g[:, a:b])

    return _make(data, tuple(parts), backward)


def multihead_attend(q: Tensor, k: Tensor, v: Tensor, heads: int,
                     weights_sink: list | None = None) -> Tensor:
    """Fused scaled dot-product attention over all heads.

    Inputs are already-projected (rows, dim) matrices; dim splits evenly
    into heads, each scaled by 1/sqrt(dim/heads). Ledger counts the score
    and attend matmuls. ``weights_sink`` receives one (rows_q, rows_k)
    weight matrix per head.
    """
    if q.ndim != 2 or k.shape != v.shape or q.shape[1] != k.shape[1]:
        raise ShapeError(f"attend shapes {q.shape}, {k.shape}, {v.shape}")
    dim = q.shape[1]
    if dim % heads != 0:
        raise ShapeError(f"dim {dim} not divisible by heads {heads}")
    dh = dim // heads
    lq, lk = q.shape[0], k.shape[0]
    scale = 1.0 / np.sqrt(dh)
    qh = q.data.reshape(lq, heads, dh).transpose(1, 0, 2)
    kh = k.data.reshape(lk, heads, dh).transpose(1, 0, 2)
    vh = v.data.reshape(lk, heads, dh).transpose(1, 0, 2)
    scores = qh @ kh.transpose(0, 2, 1) * scale          # (H, lq, lk)
    if np.isnan(scores).any():
        raise NumericError("attention scores contain NaN")
    e = np.exp(scores - scores.max(axis=2, keepdims=True))
    attn = e / e.sum(axis=2, keepdims=True)
    if weights_sink is not None:
        for h in range(heads):
            weights_sink.append(attn[h])
    out = (attn @ vh).transpose(1, 0, 2).reshape(lq, dim)
    LEDGER.add("matmul", 2 * heads * lq * lk * dh * 2)

    def backward(g, sink):
        go = g.reshape(lq, heads, dh).transpose(1, 0, 2)
        g_attn = go @ vh.transpose(0, 2, 1)
        gv = attn.transpose(0, 2, 1) @ go
        g_scores = (g_attn - (g_attn * attn).sum(axis=2, keepdims=True)) * attn
        g_scores *= scale
        gq = g_scores @ kh
        gk = g_scores.transpose(0, 2, 1) @ qh
        sink(q, gq.transpose(1, 0, 2).reshape(lq, dim))
        sink(k, gk.transpose(1, 0, 2).reshape(lk, dim))
        sink(v, gv.transpose(1, 0, 2).reshape(lk, dim))

    return _make(out, (q, k, v), backward)


def concat_rows(parts: list[Tensor]) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=0)
    heights = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + heights)

    def backward(g, sink):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            sink(p, g[a:b])

    return _make(data, tuple(parts), backward)
