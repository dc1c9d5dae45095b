"""Chain inference: cache-reusing runtime versus the text-passing baseline.

Both runtimes drive the same greedy decode loop; they differ only in what
gets prefilled. The baseline gives every model its own cache and re-prefills
shared content plus all intermediate text produced by the other models. The
cache-sharing runtime keeps one cache for the whole chain: shared content
enters once, each prompt enters once, and decoded output entries are read
downstream directly, so a model's prefill shrinks to its own prompt and
unique input.

Prefill order mirrors the corresponding training layouts: single-round
caches hold shared content, upstream text, prompt, then unique input;
multi-round caches hold shared content, prompt, then the chronological
stream of turns.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import layout as L
from . import tensor as T
from .model import KvCache, ModelWeights, decode_step, embed_sequence, greedy_token, prefill
from .tasks import START, STOP
from .trainer import PromptParams


@dataclass
class ChainModel:
    model_id: int
    prompt: PromptParams
    max_new_tokens: int = 8
    input_provider: object | None = None
    force_length: bool = False  # decode exactly max_new_tokens, ignoring stop


@dataclass
class ChainSpec:
    models: list[ChainModel]
    rounds: int = 1
    stop_token: int = STOP
    start_token: int = START
    mask_foreign_prompts: bool = True

    def __post_init__(self):
        ids = [m.model_id for m in self.models]
        if len(set(ids)) != len(ids):
            raise ValueError("chain model ids must be distinct")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if any(m.max_new_tokens < 1 for m in self.models):
            raise ValueError("max_new_tokens must be at least 1")


@dataclass
class StepTrace:
    model_id: int
    round: int
    cache_id: int
    prefill_tokens: int
    decoded_tokens: int
    cache_before: int
    cache_after: int
    wall_s: float


@dataclass
class TextEvent:
    """A piece of intermediate text: a model's output or an injected input."""
    kind: str            # "output" | "input"
    model_id: int
    length: int
    visit: int           # index of the visit that produced it


@dataclass
class ChainTrace:
    mode: str
    shared_len: int
    steps: list[StepTrace] = field(default_factory=list)
    events: list[TextEvent] = field(default_factory=list)
    caches_created: int = 0
    cache_peaks: dict[int, int] = field(default_factory=dict)
    n_visits: int = 0

    def prefill_total(self, model_id: int | None = None) -> int:
        return sum(s.prefill_tokens for s in self.steps
                   if model_id is None or s.model_id == model_id)

    def summary(self) -> dict:
        return {"mode": self.mode, "shared_len": self.shared_len,
                "caches_created": self.caches_created,
                "prefill_tokens": self.prefill_total(),
                "decoded_tokens": sum(s.decoded_tokens for s in self.steps)}


def _decode_output(weights: ModelWeights, cm: ChainModel, spec: ChainSpec,
                   cache: KvCache) -> list[int]:
    """Greedy decode loop. The start marker and every emitted token enter the
    cache under this model's output role, so the final cache segment matches
    the training layout [start, tokens..., stop]."""
    cfg = weights.config
    role = L.output(cm.model_id)
    cur = spec.start_token
    emitted: list[int] = []
    while True:
        pos = cache.last_position + 1
        emb = T.embed_rows(weights.embed, np.array([cur]))
        logits = decode_step(weights, cfg, emb, pos, role, cache, spec.mask_foreign_prompts)
        nxt = greedy_token(logits.data)
        emitted.append(nxt)
        cur = nxt
        if (not cm.force_length and nxt == spec.stop_token) or len(emitted) >= cm.max_new_tokens:
            emb = T.embed_rows(weights.embed, np.array([cur]))
            decode_step(weights, cfg, emb, cache.last_position + 1, role, cache,
                        spec.mask_foreign_prompts)
            break
    return emitted


def _strip(tokens: list[int], stop_token: int) -> list[int]:
    return [t for t in tokens if t != stop_token]


def _prefill_block(weights: ModelWeights, cache: KvCache, pieces: list,
                   roles: list[L.SegmentRole], mask_foreign_prompts: bool) -> int:
    """Prefill mixed id/prompt pieces; returns the number of tokens added."""
    flat_roles: list[L.SegmentRole] = []
    parts = []
    for piece, role in zip(pieces, roles):
        n = piece.shape[0] if isinstance(piece, T.Tensor) else len(piece)
        if n == 0:
            continue
        parts.append(piece)
        flat_roles.extend([role] * n)
    if not parts:
        return 0
    embeds = embed_sequence(weights, parts)
    start = cache.last_position + 1
    positions = np.arange(start, start + len(flat_roles))
    prefill(weights, weights.config, embeds, flat_roles, positions, cache,
            mask_foreign_prompts)
    return len(flat_roles)


def _provider_input(cm: ChainModel, providers: dict | None, round_idx: int,
                    outputs: dict) -> list[int]:
    provider = cm.input_provider
    if providers and cm.model_id in providers:
        provider = providers[cm.model_id]
    if provider is None:
        return []
    return list(provider(cm.model_id, round_idx, outputs))


def run_chain_text(weights: ModelWeights, spec: ChainSpec, shared_tokens: list[int],
                   providers: dict | None = None):
    """Text-passing baseline: per-model caches, intermediate text re-prefilled."""
    cfg = weights.config
    outputs: dict[tuple[int, int], list[int]] = {}
    trace = ChainTrace("text", len(shared_tokens))
    caches: dict[int, KvCache] = {}
    cache_ids: dict[int, int] = {}
    events: list[TextEvent] = []
    texts: list[list[int]] = []
    consumed: dict[int, int] = {m.model_id: 0 for m in spec.models}
    visit = 0
    for r in range(spec.rounds):
        for cm in spec.models:
            t0 = time.perf_counter()
            m = cm.model_id
            fresh = m not in caches
            if fresh:
                caches[m] = KvCache(cfg)
                cache_ids[m] = trace.caches_created
                trace.caches_created += 1
            cache = caches[m]
            news: list[int] = []
            for ev, toks in zip(events[consumed[m]:], texts[consumed[m]:]):
                if ev.model_id == m and ev.kind == "output":
                    continue
                news.extend(toks)
            consumed[m] = len(events)
            ui = _provider_input(cm, providers, r, outputs)
            if ui:
                events.append(TextEvent("input", m, len(ui), visit))
                texts.append(ui)
                consumed[m] = len(events)
            if fresh and spec.rounds == 1:
                pieces = [shared_tokens, news, T.Tensor(cm.prompt.embeddings.data), ui]
                roles = [L.shared(), L.unique_input(m), L.prompt(m), L.unique_input(m)]
            elif fresh:
                pieces = [shared_tokens, T.Tensor(cm.prompt.embeddings.data), news, ui]
                roles = [L.shared(), L.prompt(m), L.unique_input(m), L.unique_input(m)]
            else:
                pieces = [news, ui]
                roles = [L.unique_input(m), L.unique_input(m)]
            before = cache.length
            n_prefill = _prefill_block(weights, cache, pieces, roles,
                                       spec.mask_foreign_prompts)
            emitted = _decode_output(weights, cm, spec, cache)
            text = _strip(emitted, spec.stop_token)
            outputs[(m, r)] = text
            events.append(TextEvent("output", m, len(text), visit))
            texts.append(text)
            consumed[m] = len(events)
            trace.steps.append(StepTrace(m, r, cache_ids[m], n_prefill, len(emitted),
                                         before, cache.length,
                                         time.perf_counter() - t0))
            trace.cache_peaks[cache_ids[m]] = cache.length
            visit += 1
    trace.events = events
    trace.n_visits = visit
    return outputs, trace


def run_chain_fthss(weights: ModelWeights, spec: ChainSpec, shared_tokens: list[int],
                    providers: dict | None = None):
    """Cache-sharing runtime: one persistent cache across models and rounds.

    Single-round chains prefill shared content first and each prompt on
    activation; multi-round chains prefill every prompt up front and then the
    shared content, mirroring the joint training layout.
    """
    for cm in spec.models:
        if not cm.prompt.trained:
            raise ValueError(f"prompt for model {cm.model_id} is untrained")
    cfg = weights.config
    outputs: dict[tuple[int, int], list[int]] = {}
    trace = ChainTrace("fthss", len(shared_tokens))
    cache = KvCache(cfg)
    trace.caches_created = 1
    setup_tokens = 0
    if spec.models:
        if spec.rounds > 1:
            pieces: list = [T.Tensor(cm.prompt.embeddings.data) for cm in spec.models]
            roles = [L.prompt(cm.model_id) for cm in spec.models]
            pieces.append(shared_tokens)
            roles.append(L.shared())
        else:
            pieces, roles = [shared_tokens], [L.shared()]
        setup_tokens = _prefill_block(weights, cache, pieces, roles,
                                      spec.mask_foreign_prompts)
    activated: set[int] = set()
    visit = 0
    for r in range(spec.rounds):
        for cm in spec.models:
            t0 = time.perf_counter()
            m = cm.model_id
            pieces, roles = [], []
            if spec.rounds == 1 and m not in activated:
                pieces.append(T.Tensor(cm.prompt.embeddings.data))
                roles.append(L.prompt(m))
            activated.add(m)
            ui = _provider_input(cm, providers, r, outputs)
            if ui:
                pieces.append(ui)
                roles.append(L.unique_input(m))
                trace.events.append(TextEvent("input", m, len(ui), visit))
            before = cache.length
            n_prefill = _prefill_block(weights, cache, pieces, roles,
                                       spec.mask_foreign_prompts)
            if visit == 0:
                n_prefill += setup_tokens
            emitted = _decode_output(weights, cm, spec, cache)
            text = _strip(emitted, spec.stop_token)
            outputs[(m, r)] = text
            trace.events.append(TextEvent("output", m, len(text), visit))
            trace.steps.append(StepTrace(m, r, 0, n_prefill, len(emitted), before,
                                         cache.length, time.perf_counter() - t0))
            visit += 1
    trace.cache_peaks[0] = cache.length
    trace.n_visits = visit
    return outputs, trace


def expected_prefill_savings(spec: ChainSpec, text_trace: ChainTrace,
                             fthss_trace: ChainTrace) -> int:
    """Independent bookkeeping form of the prefill gap.

    The baseline re-prefills shared content once per extra cache, and every
    intermediate text event once per other model that visits after it; the
    shared runtime never prefills outputs and injects each input once. Input
    lengths must agree across modes for the identity to be exact (they do
    here: retrieval injections have fixed shape).
    """
    n_models = len(spec.models)
    if n_models == 0:
        return 0
    rounds = text_trace.n_visits // n_models
    saving = (text_trace.caches_created - fthss_trace.caches_created) * text_trace.shared_len
    last_visit = {cm.model_id: (rounds - 1) * n_models + pos
                  for pos, cm in enumerate(spec.models)}
    for ev in text_trace.events:
        consumers = sum(1 for m, lv in last_visit.items()
                        if m != ev.model_id and lv > ev.visit)
        saving += consumers * ev.length
    return saving


def final_answer(spec: ChainSpec, outputs: dict) -> list[int]:
    if not spec.models:
        return []
    last = spec.models[-1].model_id
    return outputs.get((last, spec.rounds - 1), [])


def compare_chains(weights: ModelWeights, spec: ChainSpec,
                   dataset, provider_factory=None) -> dict:
    """Run both runtimes over a dataset and return a paired report."""
    from .tasks import eval_exact_match, eval_token_f1

    preds = {"text": [], "fthss": []}
    prefills = {"text": {}, "fthss": {}}
    walls = {"text": 0.0, "fthss": 0.0}
    caches = {"text": 0, "fthss": 0}
    savings_expected = 0
    savings_observed = 0
    golds = []
    for ex in dataset:
        providers = provider_factory(ex) if provider_factory else None
        golds.append(list(ex.answer))
        runs = {"text": run_chain_text(weights, spec, ex.shared, providers),
                "fthss": run_chain_fthss(weights, spec, ex.shared, providers)}
        for mode, (outputs, trace) in runs.items():
            preds[mode].append(final_answer(spec, outputs))
            for s in trace.steps:
                prefills[mode][s.model_id] = prefills[mode].get(s.model_id, 0) + s.prefill_tokens
            walls[mode] += sum(s.wall_s for s in trace.steps)
            caches[mode] = max(caches[mode], trace.caches_created)
        savings_expected += expected_prefill_savings(spec, runs["text"][1], runs["fthss"][1])
        savings_observed += (runs["text"][1].prefill_total()
                             - runs["fthss"][1].prefill_total())
    report = {
        "n": len(dataset),
        "em_text": eval_exact_match(preds["text"], golds) if dataset else 0.0,
        "f1_text": eval_token_f1(preds["text"], golds) if dataset else 0.0,
        "em_fthss": eval_exact_match(preds["fthss"], golds) if dataset else 0.0,
        "f1_fthss": eval_token_f1(preds["fthss"], golds) if dataset else 0.0,
        "prefill_text": prefills["text"],
        "prefill_fthss": prefills["fthss"],
        "caches_text": caches["text"],
        "caches_fthss": caches["fthss"],
        "wall_text_s": walls["text"],
        "wall_fthss_s": walls["fthss"],
        "prefill_savings": savings_observed,
        "expected_savings": savings_expected,
    }
    report["accuracy_delta"] = report["em_fthss"] - report["em_text"]
    return report
