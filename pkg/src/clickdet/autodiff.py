"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Just enough for the toy detector: linear maps, pointwise nonlinearities,
concatenation, gather/grouped max, softmax, cosine rows, and reduction
losses. Every op validates output finiteness so a NaN is caught at its
source rather than surfacing later as a diverged loss.

A tape is implicit: each Tensor records its parents and a backward closure;
``backward`` walks the graph in reverse topological order, visiting each
node exactly once. Graphs are single-threaded; distinct graphs may run on
distinct threads.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Mapping, Sequence

import numpy as np

CHECKPOINT_MAGIC = b"PCCKPT\x00\x00"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; carries the offending op name."""

    def __init__(self, op: str):
        super().__init__(f"non-finite values produced by op {op!r}")
        self.op = op


class CheckpointError(Exception):
    """Malformed, truncated, or wrong-version checkpoint container."""


class Tensor:
    """A dense float64 array with an optional place in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # Light arithmetic sugar; the real op surface is the module functions.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(op)
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=np.float64)
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._parents = parents if out.requires_grad else ()
    out._backward = backward if out.requires_grad else None
    out._op = op
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _scalar(g) -> float:
    """Extract the single element of a scalar-shaped gradient."""
    return float(np.asarray(g).reshape(-1)[0])


def backward(out: Tensor, grad: np.ndarray | None = None) -> None:
    """Reverse-mode sweep from ``out``; seeds with ones for scalar outputs."""
    if grad is None:
        if out.data.size != 1:
            raise ValueError("backward() without an explicit seed needs a scalar output")
        grad = np.ones_like(out.data)
    else:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != out.data.shape:
            raise ValueError(f"seed gradient shape {grad.shape} != output shape {out.data.shape}")
    if not out.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    _accum(out, grad)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# Elementwise and structural ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, g)

    return _node(a.data + b.data, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"sub shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g)
        if b.requires_grad:
            _accum(b, -g)

    return _node(a.data - b.data, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch {a.shape} vs {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * b.data)
        if b.requires_grad:
            _accum(b, g * a.data)

    return _node(a.data * b.data, "mul", (a, b), bwd)


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * s)

    return _node(x.data * s, "scale", (x,), bwd)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), bwd)


def linear(x, weight, bias=None) -> Tensor:
    """x @ W (+ b). The one sanctioned broadcast: bias over rows."""
    x, weight = _as_tensor(x), _as_tensor(weight)
    y = matmul(x, weight)
    if bias is None:
        return y
    bias = _as_tensor(bias)
    if bias.data.ndim != 1 or bias.shape[0] != y.shape[1]:
        raise ValueError(f"bias shape {bias.shape} incompatible with output {y.shape}")

    def bwd(g):
        if y.requires_grad:
            _accum(y, g)
        if bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _node(y.data + bias.data, "add_bias", (y, bias), bwd)


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * mask)

    return _node(np.where(mask, x.data, 0.0), "relu", (x,), bwd)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    # stable split form: never exponentiates a positive argument
    pos = x.data >= 0
    e = np.exp(np.where(pos, -x.data, x.data))
    s = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * s * (1.0 - s))

    return _node(s, "sigmoid", (x,), bwd)


def concat(xs: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(x) for x in xs]
    if not ts:
        raise ValueError("concat needs at least one input")
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            if t.requires_grad:
                _accum(t, piece)

    return _node(np.concatenate([t.data for t in ts], axis=axis), "concat", tuple(ts), bwd)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g.reshape(x.shape))

    return _node(x.data.reshape(shape), "reshape", (x,), bwd)


def slice_cols(x, start: int, stop: int) -> Tensor:
    """Contiguous column slice of a 2-D tensor."""
    x = _as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("slice_cols expects a 2-D tensor")
    if not 0 <= start <= stop <= x.shape[1]:
        raise ValueError(f"bad column slice [{start}:{stop}] for shape {x.shape}")

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[:, start:stop] = g
            _accum(x, gx)

    return _node(x.data[:, start:stop].copy(), "slice_cols", (x,), bwd)


def gather_rows(x, idx) -> Tensor:
    """Row selection x[idx]; backward scatter-adds into the source rows."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.ndim != 1:
        raise ValueError("gather_rows expects a 1-D index array")

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            np.add.at(gx, idx, g)
            _accum(x, gx)

    return _node(x.data[idx], "gather_rows", (x,), bwd)


def max_over_group(x, groups) -> Tensor:
    """Per-group feature max: x is (R, D), groups is (M, k) row indices.

    out[m, d] = max over x[groups[m], d]. Ties break to the lowest position
    inside the group, and backward routes gradient to exactly that row.
    """
    x = _as_tensor(x)
    groups = np.asarray(groups, dtype=np.intp)
    if x.data.ndim != 2 or groups.ndim != 2:
        raise ValueError("max_over_group expects 2-D x and 2-D groups")
    gathered = x.data[groups]                 # (M, k, D)
    arg = gathered.argmax(axis=1)             # first max = lowest position
    m_idx = np.arange(groups.shape[0])[:, None]
    winners = groups[m_idx, arg]              # (M, D) source row per feature

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            d_idx = np.arange(x.shape[1])[None, :]
            np.add.at(gx, (winners, np.broadcast_to(d_idx, winners.shape)), g)
            _accum(x, gx)

    return _node(gathered.max(axis=1), "max_over_group", (x,), bwd)


def max_elemwise(a, b) -> Tensor:
    """Elementwise max; ties route gradient to the first argument."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"max_elemwise shape mismatch {a.shape} vs {b.shape}")
    take_a = a.data >= b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * take_a)
        if b.requires_grad:
            _accum(b, g * ~take_a)

    return _node(np.where(take_a, a.data, b.data), "max_elemwise", (a, b), bwd)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * s).sum(axis=axis, keepdims=True)
            _accum(x, s * (g - dot))

    return _node(s, "softmax", (x,), bwd)


def cosine_rows(f, p) -> Tensor:
    """Cosine similarity of every row of f (N, D) against a vector p (D,).

    Returns (N, 1). Zero-norm rows (or a zero-norm p) map to 0 with zero
    gradient, matching the correlation-map convention.
    """
    f, p = _as_tensor(f), _as_tensor(p)
    pvec = p.data.reshape(-1)
    if f.data.ndim != 2 or f.shape[1] != pvec.shape[0]:
        raise ValueError(f"cosine_rows shape mismatch {f.shape} vs {p.shape}")
    rf = np.sqrt((f.data * f.data).sum(axis=1))      # (N,)
    rp = float(np.sqrt((pvec * pvec).sum()))
    num = f.data @ pvec                              # (N,)
    ok = (rf > 0.0) & (rp > 0.0)
    denom = np.where(ok, rf * rp, 1.0)
    m = np.where(ok, num / denom, 0.0)

    def bwd(g):
        gv = g.reshape(-1) * ok
        if f.requires_grad:
            safe_rf = np.where(ok, rf, 1.0)
            gf = (gv / denom)[:, None] * pvec[None, :]
            gf -= ((gv * m) / (safe_rf * safe_rf))[:, None] * f.data
            _accum(f, gf)
        if p.requires_grad:
            gp = (gv / denom) @ f.data
            if rp > 0.0:
                gp -= (gv * m).sum() * pvec / (rp * rp)
            _accum(p, gp.reshape(p.shape))

    return _node(m.reshape(-1, 1), "cosine_rows", (f, p), bwd)


# ---------------------------------------------------------------------------
# Reductions and losses
# ---------------------------------------------------------------------------

def sum_all(x) -> Tensor:
    x = _as_tensor(x)

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, _scalar(g)))

    return _node(np.array(x.data.sum()), "sum", (x,), bwd)


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size

    def bwd(g):
        if x.requires_grad:
            _accum(x, np.full_like(x.data, _scalar(g) / n))

    return _node(np.array(x.data.mean()), "mean", (x,), bwd)


def smooth_l1(pred, target) -> Tensor:
    """Huber-style loss (delta=1), mean over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"smooth_l1 shape mismatch {pred.shape} vs {target.shape}")
    e = pred.data - target.data
    small = np.abs(e) < 1.0
    per = np.where(small, 0.5 * e * e, np.abs(e) - 0.5)
    n = per.size

    def bwd(g):
        d = np.clip(e, -1.0, 1.0) * (_scalar(g) / n)
        if pred.requires_grad:
            _accum(pred, d)
        if target.requires_grad:
            _accum(target, -d)

    return _node(np.array(per.mean()), "smooth_l1", (pred, target), bwd)


def binary_cross_entropy(pred, target, weights: np.ndarray | None = None, eps: float = 1e-12) -> Tensor:
    """Weighted-mean BCE on probabilities; predictions clamped to [eps, 1-eps].

    ``weights`` (per element, constant) rebalance rare positives; the loss
    is the weighted mean, normalized by the weight sum.
    """
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"bce shape mismatch {pred.shape} vs {target.shape}")
    p = np.clip(pred.data, eps, 1.0 - eps)
    t = target.data
    per = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    if weights is None:
        w = np.ones_like(per)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(per.shape)
    w_sum = w.sum()
    if w_sum <= 0:
        raise ValueError("bce weights must have positive sum")

    def bwd(g):
        inside = (pred.data > eps) & (pred.data < 1.0 - eps)
        d = np.where(inside, (p - t) / (p * (1.0 - p)), 0.0) * (w * (_scalar(g) / w_sum))
        if pred.requires_grad:
            _accum(pred, d)
        if target.requires_grad:
            _accum(target, (np.log(1.0 - p) - np.log(p)) * (w * (_scalar(g) / w_sum)))

    return _node(np.array((per * w).sum() / w_sum), "binary_cross_entropy", (pred, target), bwd)


def cross_entropy(logits, labels, weights: np.ndarray | None = None) -> Tensor:
    """Weighted-mean negative log-likelihood under softmax(logits).

    ``weights`` (per row, constant) counteract label imbalance; the loss is
    normalized by the weight sum.
    """
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy shape mismatch {logits.shape} vs {labels.shape}")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    nll = logsumexp - shifted[np.arange(len(labels)), labels]
    n = len(labels)
    if weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(weights, dtype=np.float64).reshape(n)
    w_sum = w.sum()
    if w_sum <= 0:
        raise ValueError("cross_entropy weights must have positive sum")
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    def bwd(g):
        if logits.requires_grad:
            d = probs.copy()
            d[np.arange(n), labels] -= 1.0
            _accum(logits, d * (w[:, None] * (_scalar(g) / w_sum)))

    return _node(np.array((nll * w).sum() / w_sum), "cross_entropy", (logits,), bwd)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """Per-parameter first/second moment estimates plus the step counter."""

    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, np.ndarray]:
    """One adaptive-moment update; returns new parameter arrays.

    ``state`` is advanced in place; parameters with no gradient this step
    are carried through unchanged (their moments decay).
    """
    state.step += 1
    t = state.step
    out: dict[str, np.ndarray] = {}
    for name, value in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(value)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(value)
            v = np.zeros_like(value)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        out[name] = value - lr * m_hat / (np.sqrt(v_hat) + eps)
    return out


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: Mapping[str, np.ndarray], metadata: dict) -> None:
    """Versioned container: magic, version, JSON index+metadata, float64 payload."""
    names = sorted(params)
    index = [{"name": n, "shape": list(np.asarray(params[n]).shape)} for n in names]
    header = json.dumps({"params": index, "metadata": metadata}, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<B", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(CHECKPOINT_MAGIC) + 5:
        raise CheckpointError(f"{path}: file shorter than header")
    if data[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version = data[len(CHECKPOINT_MAGIC)]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    off = len(CHECKPOINT_MAGIC) + 1
    (hlen,) = struct.unpack_from("<I", data, off)
    off += 4
    if len(data) < off + hlen:
        raise CheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(data[off: off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    off += hlen
    params: dict[str, np.ndarray] = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = data[off: off + nbytes]
        if len(chunk) < nbytes:
            raise CheckpointError(f"{path}: payload truncated at {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        off += nbytes
    return params, header["metadata"]
