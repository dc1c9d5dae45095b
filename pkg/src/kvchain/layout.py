"""Segment-labeled token layouts, position IDs, and cascade attention masks.

A layout is an ordered list of role-tagged segments: shared content, one
model's learnable prompt, a model's unique input, or a model's output. One
visibility rule generates every mask in the system: a key is hidden from a
query exactly when the key is some model's prompt and the query belongs to a
different model (shared-content queries treat every prompt as foreign).
Single-round, multi-round and inference masks differ only in their layouts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

SHARED = "shared"
PROMPT = "prompt"
INPUT = "input"
OUTPUT = "output"

_KINDS = (SHARED, PROMPT, INPUT, OUTPUT)


@dataclass(frozen=True)
class SegmentRole:
    kind: str
    model_id: int | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown role kind {self.kind!r}")
        if (self.kind == SHARED) != (self.model_id is None):
            raise ValueError("shared roles carry no model_id; model roles need one")

    def __str__(self) -> str:
        return self.kind if self.model_id is None else f"{self.kind}({self.model_id})"


def shared() -> SegmentRole:
    return SegmentRole(SHARED)


def prompt(model_id: int) -> SegmentRole:
    return SegmentRole(PROMPT, model_id)


def unique_input(model_id: int) -> SegmentRole:
    return SegmentRole(INPUT, model_id)


def output(model_id: int) -> SegmentRole:
    return SegmentRole(OUTPUT, model_id)


@dataclass(frozen=True)
class Segment:
    role: SegmentRole
    length: int

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("segments must hold at least one token")


@dataclass(frozen=True)
class SegmentLayout:
    segments: tuple[Segment, ...]
    start_position: int = 0

    def __post_init__(self):
        if self.start_position < 0:
            raise ValueError("start_position must be nonnegative")

    @property
    def total(self) -> int:
        return sum(s.length for s in self.segments)

    def token_roles(self) -> list[SegmentRole]:
        roles: list[SegmentRole] = []
        for seg in self.segments:
            roles.extend([seg.role] * seg.length)
        return roles

    def to_json(self) -> str:
        items = [{"role": s.role.kind, "model": s.role.model_id, "len": s.length}
                 for s in self.segments]
        return json.dumps({"start_position": self.start_position, "segments": items})

    @staticmethod
    def from_json(text: str) -> "SegmentLayout":
        raw = json.loads(text)
        segs = tuple(Segment(SegmentRole(i["role"], i["model"]), i["len"])
                     for i in raw["segments"])
        return SegmentLayout(segs, raw["start_position"])


def make_layout(parts: list[tuple[SegmentRole, int]], start_position: int = 0) -> SegmentLayout:
    """Build a layout, dropping zero-length segments."""
    segs = tuple(Segment(role, n) for role, n in parts if n > 0)
    return SegmentLayout(segs, start_position)


def assign_positions(layout: SegmentLayout) -> np.ndarray:
    """Consecutive position IDs starting at the layout's start_position."""
    return np.arange(layout.start_position, layout.start_position + layout.total, dtype=np.int64)


def visible(query_role: SegmentRole, key_role: SegmentRole,
            mask_foreign_prompts: bool = True) -> bool:
    """May a query of one role attend to a key of another, causality aside?

    False exactly when the key is a prompt belonging to a different model
    than the query (shared-content queries have no model, so every prompt is
    foreign to them). The flag disables the rule for ablations, making
    everything visible.
    """
    if not mask_foreign_prompts:
        return True
    if key_role.kind != PROMPT:
        return True
    return query_role.model_id == key_role.model_id


def visibility_matrix(query_roles, key_roles, mask_foreign_prompts: bool = True) -> np.ndarray:
    """Vectorized visible() over role sequences; no causality applied."""
    if not mask_foreign_prompts:
        return np.ones((len(query_roles), len(key_roles)), dtype=bool)
    k_is_prompt = np.array([k.kind == PROMPT for k in key_roles])
    k_model = np.array([-1 if k.model_id is None else k.model_id for k in key_roles])
    q_model = np.array([-2 if q.model_id is None else q.model_id for q in query_roles])
    return ~k_is_prompt[None, :] | (q_model[:, None] == k_model[None, :])


def build_mask(layout: SegmentLayout, mask_foreign_prompts: bool = True) -> np.ndarray:
    """Boolean (T, T) matrix: row i may attend to column j.

    Lower-triangular causal support intersected with the visibility rule.
    The diagonal stays true for any layout because a token's own role is
    never foreign to itself.
    """
    roles = layout.token_roles()
    t = len(roles)
    causal = np.tril(np.ones((t, t), dtype=bool))
    mask = causal & visibility_matrix(roles, roles, mask_foreign_prompts)
    assert mask.diagonal().all(), "visibility rule must keep the diagonal"
    return mask


def loss_mask(layout: SegmentLayout, trained_model: int) -> np.ndarray:
    """1 exactly on Output(trained_model) token positions."""
    roles = layout.token_roles()
    mask = np.array([r.kind == OUTPUT and r.model_id == trained_model for r in roles],
                    dtype=np.int8)
    if not mask.any():
        raise ValueError(f"layout has no output segment for model {trained_model}")
    return mask


def single_round_online_layout(shared_len: int, prompt_a_len: int, input_a_len: int,
                               output_a_len: int, prompt_b_len: int, input_b_len: int,
                               output_b_len: int, start_position: int = 0) -> SegmentLayout:
    """Combined two-model training layout with the upstream pass inlined.

    Order: shared content, prompt A, unique input A, output A, prompt B,
    unique input B, output B. Shared content precedes the prompts so its KV
    entries cannot depend on any prompt; B's segments sit after the whole A
    pass and read A's output entries directly.
    """
    if prompt_a_len < 1 or prompt_b_len < 1:
        raise ValueError("prompts need at least one token")
    return make_layout([
        (shared(), shared_len),
        (prompt(0), prompt_a_len),
        (unique_input(0), input_a_len),
        (output(0), output_a_len),
        (prompt(1), prompt_b_len),
        (unique_input(1), input_b_len),
        (output(1), output_b_len),
    ], start_position)


def chain_online_layout(shared_len: int,
                        stages: list[tuple[int, int, int, int]],
                        start_position: int = 0) -> SegmentLayout:
    """Generalized combined layout for chains of any length.

    ``stages`` holds (model_id, prompt_len, input_len, output_len) in chain
    order; each stage appends prompt, unique input, then output.
    """
    parts: list[tuple[SegmentRole, int]] = [(shared(), shared_len)]
    for model_id, p_len, i_len, o_len in stages:
        if p_len < 1:
            raise ValueError("prompts need at least one token")
        parts += [(prompt(model_id), p_len), (unique_input(model_id), i_len),
                  (output(model_id), o_len)]
    return make_layout(parts, start_position)


def multi_round_layout(prompt_lens: dict[int, int], shared_len: int,
                       turns: list[tuple[SegmentRole, int]],
                       start_position: int = 0) -> SegmentLayout:
    """Multi-round training layout: every prompt up front, then shared
    content, then the interleaved round segments in chronological order."""
    parts: list[tuple[SegmentRole, int]] = []
    for model_id in sorted(prompt_lens):
        if prompt_lens[model_id] < 1:
            raise ValueError("prompts need at least one token")
        parts.append((prompt(model_id), prompt_lens[model_id]))
    parts.append((shared(), shared_len))
    parts.extend(turns)
    return make_layout(parts, start_position)
