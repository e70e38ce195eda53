"""Minimal dense-tensor engine with tape-based reverse-mode gradients.

Backed by numpy. Compute is float32 by default; pass dtype=np.float64 when
building models for finite-difference verification. Tensors are immutable
after creation (backward writes only to .grad).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "add",
    "mul",
    "scale",
    "matmul",
    "transpose",
    "add_rowvec",
    "linear_forward",
    "relu",
    "reshape",
    "concat_last",
    "broadcast_points",
    "max_pool_points",
    "batch_norm_forward",
    "dropout",
    "softmax_cross_entropy",
    "l2_normalize_rows",
    "tsum",
    "backward",
    "BNState",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class Tensor:
    """A dense multi-dimensional array node in a recorded computation.

    Fields
    ------
    data : np.ndarray (row-major)
    requires_grad : bool
    grad : same-shape np.ndarray, populated by backward()
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, dtype=None,
                 _parents=(), _backward=None, _op=""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"


def _result(data, parents, backward_fn, op):
    """Wrap a forward result, recording provenance only if a parent needs grad."""
    needs = any(p.requires_grad for p in parents)
    if needs:
        return Tensor(data, requires_grad=True, _parents=parents,
                      _backward=backward_fn, _op=op)
    return Tensor(data, requires_grad=False, _op=op)


def _accum(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data + b.data

    def bw(g):
        _accum(a, g)
        _accum(b, g)

    return _result(out_data, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out_data = a.data * b.data

    def bw(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _result(out_data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out_data = a.data * c

    def bw(g):
        _accum(a, g * c)

    return _result(out_data, (a,), bw, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} x {b.shape} do not conform")
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _result(out_data, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose: expected 2-d, got {a.shape}")
    out_data = a.data.T.copy()

    def bw(g):
        _accum(a, g.T)

    return _result(out_data, (a,), bw, "transpose")


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """x[B,D] + b[D], the bias add. The only broadcast this engine supports."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_rowvec: shapes {x.shape} + {b.shape} do not conform")
    out_data = x.data + b.data

    def bw(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _result(out_data, (x, b), bw, "add_rowvec")


def linear_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """out[i,k] = sum_j x[i,j] w[j,k] + b[k]."""
    return add_rowvec(matmul(x, w), b)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)
    mask = x.data > 0  # subgradient 0 at the tie x == 0

    def bw(g):
        _accum(x, g * mask)

    return _result(out_data, (x,), bw, "relu")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)
    orig = x.data.shape

    def bw(g):
        _accum(x, g.reshape(orig))

    return _result(out_data, (x,), bw, "reshape")


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the last axis; leading axes must match."""
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise ShapeError(f"concat_last: leading dims differ {a.shape} vs {b.shape}")
    out_data = np.concatenate([a.data, b.data], axis=-1)
    da = a.data.shape[-1]

    def bw(g):
        _accum(a, g[..., :da])
        _accum(b, g[..., da:])

    return _result(out_data, (a, b), bw, "concat_last")


def broadcast_points(v: Tensor, n: int) -> Tensor:
    """Tile v[B,D] to [B,N,D] (a global feature repeated per point)."""
    if v.data.ndim != 2:
        raise ShapeError(f"broadcast_points: expected 2-d, got {v.shape}")
    out_data = np.repeat(v.data[:, None, :], n, axis=1)

    def bw(g):
        _accum(v, g.sum(axis=1))

    return _result(out_data, (v,), bw, "broadcast_points")


def max_pool_points(x: Tensor) -> Tensor:
    """Max over the point axis: [B,N,D] -> [B,D].

    Gradient routes to the first argmax per (b, d); ties broken by index.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"max_pool_points: expected [B,N,D], got {x.shape}")
    if x.shape[1] == 0:
        raise ShapeError("max_pool_points: empty cloud (N == 0)")
    idx = np.argmax(x.data, axis=1)  # first occurrence on ties
    out_data = np.max(x.data, axis=1)

    def bw(g):
        gx = np.zeros_like(x.data)
        b_ix, d_ix = np.meshgrid(np.arange(x.shape[0]), np.arange(x.shape[2]),
                                 indexing="ij")
        gx[b_ix, idx, d_ix] = g
        _accum(x, gx)

    return _result(out_data, (x,), bw, "max_pool_points")


class BNState:
    """Learned scale/shift plus running statistics for one batch-norm layer."""

    def __init__(self, dim, dtype=np.float32):
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)

    @property
    def dim(self):
        return self.gamma.shape[0]


_BN_EPS = 1e-5


def batch_norm_forward(x: Tensor, state: BNState, momentum: float,
                       training: bool) -> Tensor:
    """Batch normalization over rows of x[B,D].

    Training mode normalizes by batch statistics and updates
    running <- momentum * running + (1 - momentum) * batch.
    Eval mode normalizes by the stored running statistics.
    """
    if x.data.ndim != 2 or x.shape[1] != state.dim:
        raise ShapeError(f"batch_norm: input {x.shape} vs state dim {state.dim}")
    gamma, beta = state.gamma, state.beta
    if training:
        if x.shape[0] < 2:
            raise ShapeError(f"batch_norm: batch of {x.shape[0]} too small for training mode")
        m = x.data.mean(axis=0)
        v = x.data.var(axis=0)
        inv = 1.0 / np.sqrt(v + _BN_EPS)
        xhat = (x.data - m) * inv
        out_data = xhat * gamma.data + beta.data
        mom = float(momentum)
        state.running_mean = (mom * state.running_mean + (1.0 - mom) * m).astype(x.dtype)
        state.running_var = (mom * state.running_var + (1.0 - mom) * v).astype(x.dtype)
        B = x.shape[0]

        def bw(g):
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(beta, g.sum(axis=0))
            gx_hat = g * gamma.data
            gx = inv / B * (B * gx_hat - gx_hat.sum(axis=0)
                            - xhat * (gx_hat * xhat).sum(axis=0))
            _accum(x, gx)

        return _result(out_data, (x, gamma, beta), bw, "batch_norm")
    else:
        inv = 1.0 / np.sqrt(state.running_var + _BN_EPS)
        xhat = (x.data - state.running_mean) * inv
        out_data = xhat * gamma.data + beta.data

        def bw(g):
            _accum(gamma, (g * xhat).sum(axis=0))
            _accum(beta, g.sum(axis=0))
            _accum(x, g * gamma.data * inv)

        return _result(out_data, (x, gamma, beta), bw, "batch_norm_eval")


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability rate, scale survivors by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype)
    factor = 1.0 / (1.0 - rate)
    out_data = x.data * keep * factor

    def bw(g):
        _accum(x, g * keep * factor)

    return _result(out_data, (x,), bw, "dropout")


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label], row-max stabilized."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected [B,K], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    B, K = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"softmax_cross_entropy: {B} rows but {labels.shape} labels")
    if labels.min() < 0 or labels.max() >= K:
        raise IndexError(f"label out of range [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    probs = ez / ez.sum(axis=1, keepdims=True)
    logp = z - np.log(ez.sum(axis=1, keepdims=True))
    out_data = -logp[np.arange(B), labels].mean()

    def bw(g):
        gl = probs.copy()
        gl[np.arange(B), labels] -= 1.0
        _accum(logits, g * gl / B)

    return _result(np.asarray(out_data, dtype=logits.dtype), (logits,), bw,
                   "softmax_cross_entropy")


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize the last axis of x to unit norm."""
    norms = np.sqrt((x.data ** 2).sum(axis=-1, keepdims=True))
    norms = np.maximum(norms, eps)
    y = x.data / norms

    def bw(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        _accum(x, (g - y * dot) / norms)

    return _result(y, (x,), bw, "l2_normalize_rows")


def tsum(x: Tensor) -> Tensor:
    out_data = np.asarray(x.data.sum(), dtype=x.dtype)

    def bw(g):
        _accum(x, np.full_like(x.data, g))

    return _result(out_data, (x,), bw, "sum")


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from loss.

    loss must be a scalar. Walks the recorded graph in reverse topological
    order; each node's local backward accumulates into its parents.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
