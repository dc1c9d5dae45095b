"""Rotary position embedding with caller-supplied position IDs.

Positions are explicit integers rather than implicit sequence indices, which
is what lets a downstream model continue at position l+1 over an upstream
cache. Attention scores depend only on position differences, so the two
numbering schemes are interchangeable; ``score_shift_invariance_check``
measures exactly that.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass(frozen=True)
class RopeFrequencies:
    head_dim: int
    base: float
    thetas: np.ndarray  # head_dim/2 angles per unit position, strictly decreasing

    def __post_init__(self):
        if self.head_dim % 2 or self.head_dim <= 0:
            raise ValueError(f"head_dim must be positive and even, got {self.head_dim}")
        if len(self.thetas) != self.head_dim // 2:
            raise ValueError("thetas length must be head_dim/2")


def rope_freqs(head_dim: int, base: float = 10000.0) -> RopeFrequencies:
    """thetas[i] = base ** (-2i / head_dim) for the i-th 2D subspace."""
    if head_dim % 2 or head_dim <= 0:
        raise ValueError(f"head_dim must be positive and even, got {head_dim}")
    if base <= 1.0:
        raise ValueError("base must exceed 1")
    i = np.arange(head_dim // 2, dtype=np.float64)
    return RopeFrequencies(head_dim, float(base), base ** (-2.0 * i / head_dim))


def cos_sin(freqs: RopeFrequencies, positions) -> tuple[np.ndarray, np.ndarray]:
    """Per-position rotation tables, shape (len(positions), head_dim/2).

    Angles are always formed in float64 before the cos/sin evaluation and only
    then cast, which keeps f32 position-shift drift well under test tolerances.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.size and pos.min() < 0:
        raise ValueError("positions must be nonnegative")
    angles = pos[..., None] * freqs.thetas
    return np.cos(angles).astype(T.dtype()), np.sin(angles).astype(T.dtype())


def rope_apply(x: T.Tensor, positions, freqs: RopeFrequencies) -> T.Tensor:
    """Rotate pairs (2i, 2i+1) of the last axis by positions[t] * thetas[i].

    Accepts (seq, head_dim) or (heads, seq, head_dim); positions has one
    entry per sequence row.
    """
    pos = np.asarray(positions)
    seq_axis = x.ndim - 2
    if x.shape[seq_axis] != len(pos):
        raise T.ShapeError(f"{len(pos)} positions for sequence length {x.shape[seq_axis]}")
    if x.shape[-1] != freqs.head_dim:
        raise T.ShapeError(f"head_dim {x.shape[-1]} vs freqs {freqs.head_dim}")
    cos, sin = cos_sin(freqs, pos)
    return T.rope_rotate(x, cos, sin)


def attention_score(q: np.ndarray, k: np.ndarray, m: int, n: int, freqs: RopeFrequencies) -> float:
    """Dot product of q rotated to position m with k rotated to position n."""
    qr = rope_apply(T.Tensor(q[None, :]), [m], freqs).data[0]
    kr = rope_apply(T.Tensor(k[None, :]), [n], freqs).data[0]
    return float(qr @ kr)


def score_shift_invariance_check(q: np.ndarray, k: np.ndarray, m: int, n: int, s: int,
                                 freqs: RopeFrequencies) -> float:
    """|score(m, n) - score(m+s, n+s)|; tiny by the relative-position property."""
    if min(m, n, m + s, n + s) < 0:
        raise ValueError("positions must stay nonnegative")
    return abs(attention_score(q, k, m, n, freqs) - attention_score(q, k, m + s, n + s, freqs))
