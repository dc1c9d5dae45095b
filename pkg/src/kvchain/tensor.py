"""Dense float arrays with a recording tape for reverse-mode gradients.

The engine runs on plain numpy arrays wrapped in :class:`Tensor`. Ops record
themselves onto the active :class:`ComputeGraph` (a tape); ``backward`` walks
the tape in exact reverse order and fills ``.grad`` on tensors created with
``requires_grad=True``.

Two global switches shape the numerics:

* precision: "f32" (default) or "f64" (used for finite-difference checks).
* exact reductions: when on, every reduction whose length can differ between
  code paths (the key/query axes of attention, the contraction axis of
  matmul) is evaluated strictly left to right via cumulative sums. Appending
  masked entries to a row then changes nothing, bit for bit, so the cached
  and recomputed code paths agree exactly. The default fast path uses BLAS,
  which is run-to-run deterministic but not stable under shape changes.
"""

from __future__ import annotations

import contextlib

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}

_dtype = np.float32
_exact = False
_guard = False
_graph: "ComputeGraph | None" = None


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class MaskError(ValueError):
    """A softmax row or loss has no unmasked entry."""


class GraphError(RuntimeError):
    """Backward was asked about a node the tape never recorded."""


def set_precision(name: str) -> None:
    global _dtype
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}, expected one of {sorted(_DTYPES)}")
    _dtype = _DTYPES[name]


def dtype() -> np.dtype:
    return np.dtype(_dtype)


def precision_name() -> str:
    return "f64" if _dtype == np.float64 else "f32"


@contextlib.contextmanager
def precision(name: str):
    global _dtype
    prev = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = prev


def set_exact_reductions(flag: bool) -> None:
    global _exact
    _exact = bool(flag)


def exact_reductions_enabled() -> bool:
    return _exact


@contextlib.contextmanager
def exact_reductions(flag: bool = True):
    global _exact
    prev = _exact
    _exact = bool(flag)
    try:
        yield
    finally:
        _exact = prev


def set_finite_guard(flag: bool) -> None:
    """When on, every op output is checked for NaN/Inf (slow, used in tests)."""
    global _guard
    _guard = bool(flag)


@contextlib.contextmanager
def finite_guard(flag: bool = True):
    global _guard
    prev = _guard
    _guard = bool(flag)
    try:
        yield
    finally:
        _guard = prev


class Tensor:
    """A shaped float buffer, optionally carrying a gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "_traced")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._traced = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._traced


class ComputeGraph:
    """Tape of recorded ops, replayed in exact reverse for gradients."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.params: list[Tensor] = []
        self._param_ids: set[int] = set()

    def __enter__(self) -> "ComputeGraph":
        global _graph
        if _graph is not None:
            raise GraphError("a compute graph is already recording")
        _graph = self
        return self

    def __exit__(self, *exc) -> None:
        global _graph
        _graph = None

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.nodes.append((out, inputs, backward_fn))
        for t in inputs:
            if t.requires_grad and id(t) not in self._param_ids:
                self._param_ids.add(id(t))
                self.params.append(t)

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on registered parameters reachable from ``loss``.

        Gradients accumulate into existing ``.grad`` buffers, which is what a
        batched trainer wants; call ``zero_grad`` between optimizer steps.
        """
        if loss.data.ndim != 0:
            raise GraphError("backward expects a scalar loss")
        if not any(out is loss for out, _, _ in self.nodes):
            raise GraphError("loss tensor is not an output of this graph")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.data.dtype)}
        for out, inputs, backward_fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not _needs_grad(t):
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
        for p in self.params:
            g = grads.get(id(p))
            if g is None:
                continue
            if p.grad is None:
                p.grad = np.array(g, dtype=p.data.dtype)
            else:
                p.grad = p.grad + g


def _finish(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if _guard and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("op produced NaN/Inf")
    out = Tensor(out_data)
    if _graph is not None and any(_needs_grad(t) for t in inputs):
        out._traced = True
        _graph._record(out, inputs, backward_fn)
    return out


# Exact-reduction primitives ------------------------------------------------
#
# _reduce_last: the reduced axis is last and its length is identical across
# the code paths being compared (head_dim, d_model, vocab), so numpy's
# pairwise tree is the same on both sides and a plain sum is bitwise stable.
#
# _chain_last: the reduced axis is last but its length differs across paths
# (key/query counts). cumsum-and-take-last runs strictly left to right, so
# appended all-zero tail entries cannot change the result.


def _reduce_last(a: np.ndarray) -> np.ndarray:
    return a.sum(axis=-1)


def _chain_last(a: np.ndarray) -> np.ndarray:
    if _exact:
        return np.cumsum(a, axis=-1)[..., -1]
    return a.sum(axis=-1)


def _contract(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a (m,k) @ b (k,n), with a shape-stable reduction in exact mode."""
    if _exact:
        return _reduce_last(a[:, None, :] * b.T[None, :, :])
    return a @ b


# Ops ------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        ga = _contract(g, bd.T) if _needs_grad(a) else None
        gb = _contract(ad.T, g) if _needs_grad(b) else None
        return ga, gb

    return _finish(_contract(ad, bd), (a, b), backward_fn)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes {a.shape} vs {b.shape}")

    def backward_fn(g):
        return g, g

    return _finish(a.data + b.data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data

    def backward_fn(g):
        return g * bd, g * ad

    return _finish(ad * bd, (a, b), backward_fn)


def scale(a: Tensor, s: float) -> Tensor:
    s = _dtype(s)

    def backward_fn(g):
        return (g * s,)

    return _finish(a.data * s, (a,), backward_fn)


def silu(a: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def backward_fn(g):
        return (g * (sig + a.data * sig * (1.0 - sig)),)

    return _finish(out, (a,), backward_fn)


def swiglu(x: Tensor, w_gate: Tensor, w_up: Tensor, w_down: Tensor) -> Tensor:
    """w_down applied to silu(x w_gate) * (x w_up)."""
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_up)), w_down)


def rmsnorm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"rmsnorm dim {x.shape[-1]} vs weight {weight.shape}")
    d = x.shape[-1]
    xd, wd = x.data, weight.data
    inv = 1.0 / np.sqrt(_reduce_last(xd * xd) / d + _dtype(eps))
    inv = inv[..., None]
    normed = xd * inv

    def backward_fn(g):
        gx = None
        if _needs_grad(x):
            gw_x = g * wd
            dot = _reduce_last(gw_x * xd)[..., None]
            gx = gw_x * inv - xd * (inv**3) * dot / d
        gw = _chain_last((g * normed).T) if _needs_grad(weight) else None
        return gx, gw

    return _finish(normed * wd, (x, weight), backward_fn)


def softmax_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row softmax over the last axis; masked entries get weight exactly 0.

    ``mask`` is a 0/1 (or bool) array matching the trailing dims of ``a``;
    1 means keep. Masked entries are pushed to -inf before exponentiation so
    they leave exp as +0.0 and never touch the normalization.
    """
    scores = a.data
    if mask is not None:
        keep = np.asarray(mask, dtype=bool)
        if keep.shape != scores.shape[-keep.ndim:]:
            raise ShapeError(f"mask shape {keep.shape} vs scores {scores.shape}")
        if not keep.any(axis=-1).all():
            raise MaskError("softmax row with every entry masked")
        scores = np.where(keep, scores, -np.inf)
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / _chain_last(e)[..., None]

    def backward_fn(g):
        inner = _chain_last(probs * g)[..., None]
        return (probs * (g - inner),)

    return _finish(probs, (a,), backward_fn)


def cross_entropy(logits: Tensor, targets: np.ndarray, loss_mask: np.ndarray) -> Tensor:
    """Mean negative log-softmax of ``targets`` over positions with mask 1."""
    t, v = logits.shape
    ids = np.asarray(targets, dtype=np.int64)
    keep = np.asarray(loss_mask, dtype=bool)
    if ids.shape != (t,) or keep.shape != (t,):
        raise ShapeError("targets/loss_mask must be one entry per logits row")
    if not keep.any():
        raise MaskError("cross_entropy with every position masked")
    rows = np.flatnonzero(keep)
    if ids[rows].min() < 0 or ids[rows].max() >= v:
        raise ValueError("target id out of vocabulary range")
    ld = logits.data
    shifted = ld - ld.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    probs = e / _reduce_last(e)[..., None]
    nll = -np.log(probs[rows, ids[rows]])
    count = len(rows)
    loss = nll.sum() / count

    def backward_fn(g):
        gl = np.zeros_like(ld)
        gl[rows] = probs[rows]
        gl[rows, ids[rows]] -= 1.0
        return (gl * (g / count),)

    return _finish(np.asarray(loss, dtype=_dtype), (logits,), backward_fn)


def embed_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError("embedding id out of range")
    td = table.data

    def backward_fn(g):
        gt = np.zeros_like(td)
        np.add.at(gt, ids, g)
        return (gt,)

    return _finish(td[ids], (table,), backward_fn)


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("concat of nothing")
    sizes = [p.shape[0] for p in parts]
    offs = np.concatenate([[0], np.cumsum(sizes)])

    def backward_fn(g):
        return tuple(g[offs[i]:offs[i + 1]] for i in range(len(parts)))

    return _finish(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    n = a.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice [{start}:{stop}] of {n} rows")

    def backward_fn(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _finish(a.data[start:stop].copy(), (a,), backward_fn)


def concat_seq(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate (H, S, D) tensors along the sequence axis."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[2]:
        raise ShapeError(f"concat_seq {a.shape} + {b.shape}")
    na = a.shape[1]

    def backward_fn(g):
        return g[:, :na], g[:, na:]

    return _finish(np.concatenate([a.data, b.data], axis=1), (a, b), backward_fn)


# Attention-shaped ops. q/k/v are (heads, seq, head_dim). Reductions over the
# key and query axes go through _chain_last so cache-based and full-sequence
# evaluations of the same row agree exactly in exact mode.


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    t, d = x.shape
    if d % n_heads:
        raise ShapeError(f"{d} dims across {n_heads} heads")
    hd = d // n_heads

    def backward_fn(g):
        return (g.transpose(1, 0, 2).reshape(t, d),)

    return _finish(x.data.reshape(t, n_heads, hd).transpose(1, 0, 2).copy(), (x,), backward_fn)


def merge_heads(x: Tensor) -> Tensor:
    h, t, hd = x.shape

    def backward_fn(g):
        return (g.reshape(t, h, hd).transpose(1, 0, 2),)

    return _finish(x.data.transpose(1, 0, 2).reshape(t, h * hd).copy(), (x,), backward_fn)


def rope_rotate(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive (even, odd) component pairs of the last axis.

    cos/sin broadcast against x's leading dims with head_dim/2 as last axis.
    The rotation is orthogonal, so the gradient is the inverse rotation.
    """
    xd = x.data
    even, odd = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos

    def backward_fn(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = -ge * sin + go * cos
        return (gx,)

    return _finish(out, (x,), backward_fn)


def attn_scores(q: Tensor, k: Tensor) -> Tensor:
    """(H,T,D) x (H,S,D) -> (H,T,S) dot products over head_dim."""
    if q.ndim != 3 or k.ndim != 3 or q.shape[0] != k.shape[0] or q.shape[2] != k.shape[2]:
        raise ShapeError(f"attn_scores {q.shape} x {k.shape}")
    qd, kd = q.data, k.data

    def backward_fn(g):
        gq = gk = None
        if _exact:
            if _needs_grad(q):
                gq = _chain_last(g[:, :, None, :] * kd.transpose(0, 2, 1)[:, None, :, :])
            if _needs_grad(k):
                gk = _chain_last(g.transpose(0, 2, 1)[:, :, None, :] * qd.transpose(0, 2, 1)[:, None, :, :])
        else:
            if _needs_grad(q):
                gq = g @ kd
            if _needs_grad(k):
                gk = g.transpose(0, 2, 1) @ qd
        return gq, gk

    if _exact:
        out = _reduce_last(qd[:, :, None, :] * kd[:, None, :, :])
    else:
        out = qd @ kd.transpose(0, 2, 1)
    return _finish(out, (q, k), backward_fn)


def attn_mix(probs: Tensor, v: Tensor) -> Tensor:
    """(H,T,S) x (H,S,D) -> (H,T,D) weighted sums over the key axis."""
    pd, vd = probs.data, v.data

    def backward_fn(g):
        gp = gv = None
        if _exact:
            if _needs_grad(probs):
                gp = _reduce_last(g[:, :, None, :] * vd[:, None, :, :])
            if _needs_grad(v):
                gv = _chain_last(pd.transpose(0, 2, 1)[:, :, None, :] * g.transpose(0, 2, 1)[:, None, :, :])
        else:
            if _needs_grad(probs):
                gp = g @ vd.transpose(0, 2, 1)
            if _needs_grad(v):
                gv = pd.transpose(0, 2, 1) @ g
        return gp, gv

    if _exact:
        out = _chain_last(pd[:, :, None, :] * vd.transpose(0, 2, 1)[:, None, :, :])
    else:
        out = pd @ vd
    return _finish(out, (probs, v), backward_fn)
