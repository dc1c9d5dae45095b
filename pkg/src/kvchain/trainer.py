"""Training regimes: base pretraining, standard prompt tuning, cache-sharing
fine-tuning in offline and online single-round forms, joint multi-round
training, small-sample continuation, and finite-difference gradient checks.

Only prompt embeddings ever receive gradients outside of pretraining; base
weights stay frozen and the trainers refuse to run otherwise. The offline and
online single-round paths consume the random stream in the same order, so
under exact reductions they produce bitwise-identical prompt parameters.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import layout as L
from . import tensor as T
from .model import (CacheError, CheckpointError, KvCache, ModelConfig, ModelWeights,
                    cache_load, cache_save, forward_full, prefill, embed_sequence,
                    CHECKPOINT_VERSION, _PROMPT_MAGIC)
from .tasks import START, STOP, SyntheticExample


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PromptParams:
    """Learnable continuous prompt rows for one model in the chain."""

    model_id: int
    embeddings: T.Tensor
    trained: bool = False

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]

    def frozen_copy(self) -> "PromptParams":
        return PromptParams(self.model_id, T.Tensor(self.embeddings.data.copy()), self.trained)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_PROMPT_MAGIC)
            f.write(struct.pack("<I3IB", CHECKPOINT_VERSION, self.model_id,
                                self.embeddings.shape[0], self.embeddings.shape[1],
                                1 if self.trained else 0))
            f.write(np.ascontiguousarray(self.embeddings.data, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "PromptParams":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != _PROMPT_MAGIC:
            raise CheckpointError(f"not a prompt checkpoint: {path}")
        version, model_id, n, d, trained = struct.unpack_from("<I3IB", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported prompt checkpoint version {version}")
        off = 4 + struct.calcsize("<I3IB")
        if len(blob) != off + n * d * 4:
            raise CheckpointError(f"truncated prompt checkpoint: {path}")
        data = np.frombuffer(blob[off:], dtype="<f4").reshape(n, d).astype(T.dtype())
        return cls(model_id, T.Tensor(data), bool(trained))


@dataclass
class TrainConfig:
    lr: float = 3e-2
    epochs: int = 3
    batch_size: int = 8
    warmup_frac: float = 0.03
    seed: int = 0
    n_prompt_tokens: int = 10
    mask_foreign_prompts: bool = True
    log_path: str | None = None

    def __post_init__(self):
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1 or self.n_prompt_tokens < 1:
            raise ValueError("hyperparameters must be positive")
        if not 0 <= self.warmup_frac < 1:
            raise ValueError("warmup_frac must lie in [0, 1)")


class Adam:
    """First/second-moment optimizer, no weight decay."""

    def __init__(self, params: list[T.Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr_scale: float = 1.0) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.data = p.data - (self.lr * lr_scale) * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grads(self) -> None:
        for p in self.params:
            p.grad = None


def lr_schedule(step: int, total_steps: int, warmup_frac: float) -> float:
    """Linear warmup to 1.0, then linear decay toward (not to) zero."""
    warm = max(1, int(total_steps * warmup_frac))
    if step < warm:
        return (step + 1) / warm
    if total_steps <= warm:
        return 1.0
    return max(0.05, (total_steps - step) / (total_steps - warm))


# Item construction ----------------------------------------------------------


@dataclass
class TrainItem:
    layout: L.SegmentLayout
    pieces: list            # per segment: int id list, or ("prompt", model_id)
    token_ids: np.ndarray   # full-length ids; prompt slots hold 0 and are never targets
    loss_models: list[int]


def _finish_item(parts, contents, loss_models) -> TrainItem:
    kept_parts, kept_contents = [], []
    for (role, length), content in zip(parts, contents):
        if length > 0:
            kept_parts.append((role, length))
            kept_contents.append(content)
    layout = L.make_layout(kept_parts)
    ids = np.zeros(layout.total, dtype=np.int64)
    off = 0
    for (role, length), content in zip(kept_parts, kept_contents):
        if not (isinstance(content, tuple) and content[0] == "prompt"):
            ids[off:off + length] = content
        off += length
    return TrainItem(layout, kept_contents, ids, loss_models)


def _wrap(tokens: list[int]) -> list[int]:
    return [START, *tokens, STOP]


def standard_item(ex: SyntheticExample, model_id: int, n_prompt: int,
                  upstream_text: bool = False) -> TrainItem:
    """Plain-text prompt tuning item: shared content, any upstream output
    text, the model's prompt, its unique input, then its output."""
    if len(ex.rounds) > 1:
        return _multiround_standard_item(ex, model_id, n_prompt)
    turns = ex.rounds[0]
    idx = next(i for i, t in enumerate(turns) if t.model_id == model_id)
    turn = turns[idx]
    history: list[int] = []
    if upstream_text:
        for t in turns[:idx]:
            history.extend(t.output)
    parts = [(L.shared(), len(ex.shared)),
             (L.unique_input(model_id), len(history)),
             (L.prompt(model_id), n_prompt),
             (L.unique_input(model_id), len(turn.unique_input)),
             (L.output(model_id), len(turn.output) + 2)]
    contents = [ex.shared, history, ("prompt", model_id), turn.unique_input,
                _wrap(turn.output)]
    return _finish_item(parts, contents, [model_id])


def _multiround_standard_item(ex: SyntheticExample, model_id: int, n_prompt: int) -> TrainItem:
    """Chronological text view for one model in a multi-round chain: its own
    turns become output segments, everything other models contributed in
    between (their inputs and outputs) becomes plain input text."""
    parts = [(L.shared(), len(ex.shared)), (L.prompt(model_id), n_prompt)]
    contents: list = [ex.shared, ("prompt", model_id)]
    for rnd in ex.rounds:
        for t in rnd:
            if t.model_id == model_id:
                parts.append((L.unique_input(model_id), len(t.unique_input)))
                contents.append(t.unique_input)
                parts.append((L.output(model_id), len(t.output) + 2))
                contents.append(_wrap(t.output))
            else:
                text = list(t.unique_input) + list(t.output)
                parts.append((L.unique_input(model_id), len(text)))
                contents.append(text)
    return _finish_item(parts, contents, [model_id])


def chain_online_item(ex: SyntheticExample, through_model: int, n_prompt: int) -> TrainItem:
    """Combined single-round item inlining every stage up to through_model."""
    turns = ex.rounds[0]
    parts = [(L.shared(), len(ex.shared))]
    contents: list = [ex.shared]
    for t in turns:
        if t.model_id > through_model:
            break
        parts.append((L.prompt(t.model_id), n_prompt))
        contents.append(("prompt", t.model_id))
        parts.append((L.unique_input(t.model_id), len(t.unique_input)))
        contents.append(t.unique_input)
        parts.append((L.output(t.model_id), len(t.output) + 2))
        contents.append(_wrap(t.output))
    return _finish_item(parts, contents, [through_model])


def upstream_prefix_item(ex: SyntheticExample, through_model: int, n_prompt: int) -> TrainItem:
    """The shared-plus-upstream prefix whose KV states the offline mode stores."""
    turns = ex.rounds[0]
    parts = [(L.shared(), len(ex.shared))]
    contents: list = [ex.shared]
    for t in turns:
        if t.model_id >= through_model:
            break
        parts.append((L.prompt(t.model_id), n_prompt))
        contents.append(("prompt", t.model_id))
        parts.append((L.unique_input(t.model_id), len(t.unique_input)))
        contents.append(t.unique_input)
        parts.append((L.output(t.model_id), len(t.output) + 2))
        contents.append(_wrap(t.output))
    return _finish_item(parts, contents, [])


def own_block_item(ex: SyntheticExample, model_id: int, n_prompt: int,
                   start_position: int) -> TrainItem:
    """The downstream block the offline mode trains on top of a loaded cache."""
    turn = next(t for t in ex.rounds[0] if t.model_id == model_id)
    parts = [(L.prompt(model_id), n_prompt),
             (L.unique_input(model_id), len(turn.unique_input)),
             (L.output(model_id), len(turn.output) + 2)]
    contents = [("prompt", model_id), turn.unique_input, _wrap(turn.output)]
    item = _finish_item(parts, contents, [model_id])
    item.layout = replace(item.layout, start_position=start_position)
    return item


def multi_round_joint_item(ex: SyntheticExample, prompt_lens: dict[int, int]) -> TrainItem:
    """One cascade-masked sequence: all prompts up front, shared content,
    then every round's turns in order; losses attach to every model."""
    parts = [(L.prompt(m), prompt_lens[m]) for m in sorted(prompt_lens)]
    contents: list = [("prompt", m) for m in sorted(prompt_lens)]
    parts.append((L.shared(), len(ex.shared)))
    contents.append(ex.shared)
    for rnd in ex.rounds:
        for t in rnd:
            parts.append((L.unique_input(t.model_id), len(t.unique_input)))
            contents.append(t.unique_input)
            parts.append((L.output(t.model_id), len(t.output) + 2))
            contents.append(_wrap(t.output))
    return _finish_item(parts, contents, sorted(prompt_lens))


def pretrain_item(doc: list[int]) -> TrainItem:
    parts = [(L.output(0), len(doc))]
    return _finish_item(parts, [list(doc)], [0])


# Forward/loss plumbing -------------------------------------------------------


def _item_embeddings(weights: ModelWeights, item: TrainItem,
                     prompts: dict[int, T.Tensor]) -> T.Tensor:
    pieces = []
    for content in item.pieces:
        if isinstance(content, tuple) and content[0] == "prompt":
            pieces.append(prompts[content[1]])
        else:
            pieces.append(np.asarray(content, dtype=np.int64))
    return embed_sequence(weights, pieces)


def item_loss(weights: ModelWeights, item: TrainItem, prompts: dict[int, T.Tensor],
              mask_foreign_prompts: bool = True, lm_over_all: bool = False) -> T.Tensor:
    """Forward the combined sequence and sum next-token losses per trained model."""
    embeds = _item_embeddings(weights, item, prompts)
    logits, _ = forward_full(weights, weights.config, embeds, item.layout,
                             mask_foreign_prompts=mask_foreign_prompts)
    head = T.slice_rows(logits, 0, item.layout.total - 1)
    targets = item.token_ids[1:]
    if lm_over_all:
        return T.cross_entropy(head, targets, np.ones(len(targets), dtype=np.int8))
    total: T.Tensor | None = None
    for m in item.loss_models:
        mask = L.loss_mask(item.layout, m)[1:]
        term = T.cross_entropy(head, targets, mask)
        total = term if total is None else T.add(total, term)
    return total


def _offline_item_loss(weights: ModelWeights, ex: SyntheticExample, model_id: int,
                       n_prompt: int, prompts: dict[int, T.Tensor], cache: KvCache,
                       mask_foreign_prompts: bool) -> T.Tensor:
    item = own_block_item(ex, model_id, n_prompt, cache.last_position + 1)
    embeds = _item_embeddings(weights, item, prompts)
    work = cache.clone()
    _, logits = prefill(weights, weights.config, embeds, item.layout.token_roles(),
                        L.assign_positions(item.layout), work, mask_foreign_prompts)
    head = T.slice_rows(logits, 0, item.layout.total - 1)
    mask = L.loss_mask(item.layout, model_id)[1:]
    return T.cross_entropy(head, item.token_ids[1:], mask)


# Training loops --------------------------------------------------------------


def _require_frozen(weights: ModelWeights) -> None:
    if any(t.requires_grad for t in weights.tensors()):
        raise ValueError("base weights must be frozen before prompt tuning")


def _init_prompt(config: ModelConfig, model_id: int, n_tokens: int,
                 rng: np.random.Generator, std: float = 0.02) -> PromptParams:
    data = rng.normal(0.0, std, (n_tokens, config.d_model))
    return PromptParams(model_id, T.Tensor(data, requires_grad=True))


def _train_loop(weights: ModelWeights, dataset, tc: TrainConfig, params: list[T.Tensor],
                loss_fn, mode: str, rng: np.random.Generator,
                step_probe=None) -> None:
    n = len(dataset)
    if n == 0 or tc.epochs == 0:
        return
    opt = Adam(params, tc.lr)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = steps_per_epoch * tc.epochs
    log_f = open(tc.log_path, "a") if tc.log_path else None
    step = 0
    try:
        for _ in range(tc.epochs):
            order = rng.permutation(n)
            for b in range(steps_per_epoch):
                batch = order[b * tc.batch_size:(b + 1) * tc.batch_size]
                opt.zero_grads()
                losses = []
                for idx in batch:
                    with T.ComputeGraph() as g:
                        loss = loss_fn(dataset[int(idx)])
                        g.backward(loss)
                    losses.append(loss.item())
                mean_loss = float(np.mean(losses))
                if not math.isfinite(mean_loss):
                    raise TrainingDiverged(f"non-finite loss at step {step}")
                inv = 1.0 / len(batch)
                for p in params:
                    if p.grad is not None:
                        p.grad = p.grad * inv
                gnorm = math.sqrt(sum(float((p.grad ** 2).sum())
                                      for p in params if p.grad is not None))
                opt.step(lr_schedule(step, total_steps, tc.warmup_frac))
                if step_probe is not None:
                    step_probe(step, mean_loss)
                if log_f:
                    log_f.write(json.dumps({"step": step, "loss": mean_loss,
                                            "grad_norm": gnorm, "mode": mode}) + "\n")
                step += 1
    finally:
        if log_f:
            log_f.close()


def pretrain_base(config: ModelConfig, corpus: list[list[int]], tc: TrainConfig,
                  rng: np.random.Generator | None = None) -> ModelWeights:
    """Train every weight on next-token prediction over the corpus, then
    freeze. Stands in for a pretrained base the prompts later steer."""
    rng = rng or np.random.default_rng(tc.seed)
    weights = ModelWeights.init(config, rng)
    weights.set_requires_grad(True)
    items = [pretrain_item(doc) for doc in corpus]

    def loss_fn(item):
        return item_loss(weights, item, {}, lm_over_all=True)

    _train_loop(weights, items, tc, weights.tensors(), loss_fn, "pretrain", rng)
    weights.set_requires_grad(False)
    return weights


def held_out_nll(weights: ModelWeights, corpus: list[list[int]]) -> float:
    """Mean next-token loss over documents, no gradients involved."""
    losses = [item_loss(weights, pretrain_item(doc), {}, lm_over_all=True).item()
              for doc in corpus]
    return float(np.mean(losses))


def train_standard_prompt(weights: ModelWeights, dataset: list[SyntheticExample],
                          model_id: int, tc: TrainConfig,
                          upstream_text: bool = False) -> PromptParams:
    """Ordinary prompt tuning on plain-text inputs for one model."""
    _require_frozen(weights)
    rng = np.random.default_rng(tc.seed)
    prompt = _init_prompt(weights.config, model_id, tc.n_prompt_tokens, rng)
    items = [standard_item(ex, model_id, tc.n_prompt_tokens, upstream_text)
             for ex in dataset]
    prompts = {model_id: prompt.embeddings}

    def loss_fn(item):
        return item_loss(weights, item, prompts, tc.mask_foreign_prompts)

    _train_loop(weights, items, tc, [prompt.embeddings], loss_fn,
                "standard", rng)
    prompt.trained = True
    return prompt


def _check_upstream(upstream: list[PromptParams]) -> None:
    for p in upstream:
        if not p.trained:
            raise ValueError(f"upstream prompt for model {p.model_id} is untrained; "
                             "chain stages must be fine-tuned in order")


def train_fthss_single_round_online(weights: ModelWeights, upstream: list[PromptParams],
                                    dataset: list[SyntheticExample], tc: TrainConfig,
                                    model_id: int | None = None,
                                    step_probe=None) -> PromptParams:
    """Train the next model's prompt against upstream KV states recomputed in
    memory: one combined masked pass per example, loss on this model's output
    only, upstream prompts entering as constant inputs."""
    _require_frozen(weights)
    _check_upstream(upstream)
    if model_id is None:
        model_id = len(upstream)
    rng = np.random.default_rng(tc.seed)
    prompt = _init_prompt(weights.config, model_id, tc.n_prompt_tokens, rng)
    prompts = {p.model_id: T.Tensor(p.embeddings.data.copy()) for p in upstream}
    prompts[model_id] = prompt.embeddings
    items = [chain_online_item(ex, model_id, tc.n_prompt_tokens) for ex in dataset]

    def loss_fn(item):
        return item_loss(weights, item, prompts, tc.mask_foreign_prompts)

    _train_loop(weights, items, tc, [prompt.embeddings], loss_fn,
                "fthss-online", rng, step_probe)
    prompt.trained = True
    return prompt


def materialize_upstream_caches(weights: ModelWeights, upstream: list[PromptParams],
                                dataset: list[SyntheticExample], n_prompt: int,
                                cache_dir, model_id: int) -> list[Path]:
    """Offline stage one: run the upstream pass per example and store the KV
    states the downstream model is allowed to see."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    chash = weights.config.config_hash()
    prompts = {p.model_id: T.Tensor(p.embeddings.data.copy()) for p in upstream}
    paths = []
    for ex in dataset:
        item = upstream_prefix_item(ex, model_id, n_prompt)
        embeds = _item_embeddings(weights, item, prompts)
        _, kv = forward_full(weights, weights.config, embeds, item.layout,
                             collect_kv=True)
        cache = KvCache(weights.config)
        cache.extend(L.assign_positions(item.layout), item.layout.token_roles(),
                     [k for k, _ in kv], [v for _, v in kv])
        path = cache_dir / f"ex{ex.example_id:06d}-{chash:016x}.kvc"
        cache_save(cache, path)
        paths.append(path)
    return paths


def train_fthss_single_round_offline(weights: ModelWeights, upstream: list[PromptParams],
                                     dataset: list[SyntheticExample], tc: TrainConfig,
                                     cache_dir, model_id: int | None = None,
                                     step_probe=None) -> PromptParams:
    """Two-stage variant: store upstream KV states to disk, then train the
    downstream prompt over loaded caches with positions continuing at l+1."""
    _require_frozen(weights)
    _check_upstream(upstream)
    if model_id is None:
        model_id = len(upstream)
    materialize_upstream_caches(weights, upstream, dataset, tc.n_prompt_tokens,
                                cache_dir, model_id)
    cache_dir = Path(cache_dir)
    chash = weights.config.config_hash()
    caches: dict[int, KvCache] = {}
    for ex in dataset:
        path = cache_dir / f"ex{ex.example_id:06d}-{chash:016x}.kvc"
        if not path.exists():
            raise CacheError(f"missing upstream cache file: {path}")
        caches[ex.example_id] = cache_load(path, weights.config)
    rng = np.random.default_rng(tc.seed)
    prompt = _init_prompt(weights.config, model_id, tc.n_prompt_tokens, rng)
    prompts = {model_id: prompt.embeddings}

    def loss_fn(ex):
        return _offline_item_loss(weights, ex, model_id, tc.n_prompt_tokens,
                                  prompts, caches[ex.example_id], tc.mask_foreign_prompts)

    _train_loop(weights, dataset, tc, [prompt.embeddings], loss_fn,
                "fthss-offline", rng, step_probe)
    prompt.trained = True
    return prompt


def train_fthss_multi_round(weights: ModelWeights, dataset: list[SyntheticExample],
                            tc: TrainConfig) -> dict[int, PromptParams]:
    """Synchronous joint training for repeatedly-invoked chains: one cascade
    sequence per example, per-model losses summed, all prompts updated."""
    _require_frozen(weights)
    roster = sorted({t.model_id for ex in dataset for t in ex.turns()})
    if not roster:
        raise ValueError("dataset has no model turns")
    rng = np.random.default_rng(tc.seed)
    prompts = {m: _init_prompt(weights.config, m, tc.n_prompt_tokens, rng) for m in roster}
    lens = {m: tc.n_prompt_tokens for m in roster}
    items = [multi_round_joint_item(ex, lens) for ex in dataset]
    tensors = {m: prompts[m].embeddings for m in roster}

    def loss_fn(item):
        return item_loss(weights, item, tensors, tc.mask_foreign_prompts)

    _train_loop(weights, items, tc, [tensors[m] for m in roster], loss_fn,
                "fthss-multiround", rng)
    for p in prompts.values():
        p.trained = True
    return prompts


def continue_fthss(weights: ModelWeights, upstream: list[PromptParams],
                   standard_prompt: PromptParams, small_data: list[SyntheticExample],
                   tc: TrainConfig) -> PromptParams:
    """Adapt an existing plain-text prompt to upstream KV states by resuming
    from its parameters and running the online objective on a small sample."""
    _require_frozen(weights)
    _check_upstream(upstream)
    model_id = standard_prompt.model_id
    prompt = PromptParams(model_id, T.Tensor(standard_prompt.embeddings.data.copy(),
                                             requires_grad=True), True)
    if not small_data or tc.epochs == 0:
        prompt.embeddings.requires_grad = False
        return prompt
    rng = np.random.default_rng(tc.seed)
    prompts = {p.model_id: T.Tensor(p.embeddings.data.copy()) for p in upstream}
    prompts[model_id] = prompt.embeddings
    items = [chain_online_item(ex, model_id, tc.n_prompt_tokens) for ex in small_data]

    def loss_fn(item):
        return item_loss(weights, item, prompts, tc.mask_foreign_prompts)

    _train_loop(weights, items, tc, [prompt.embeddings], loss_fn, "continue", rng)
    return prompt


def grad_check(loss_closure, params: list[T.Tensor], step: float = 1e-5,
               n_coords: int = 32, seed: int = 0, atol: float = 1e-8) -> float:
    """Central finite differences against tape gradients on a coordinate
    subsample. Requires the 64-bit build; truncation error swamps f32.

    Differences below ``atol`` count as exact so that true-zero gradients are
    not divided by finite-difference noise."""
    if T.dtype() != np.float64:
        raise ValueError("grad_check requires f64 precision")
    for p in params:
        p.grad = None
    with T.ComputeGraph() as g:
        loss = loss_closure()
        g.backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1)
        count = min(n_coords, flat.size)
        for idx in rng.choice(flat.size, size=count, replace=False):
            orig = flat[idx]
            flat[idx] = orig + step
            hi = loss_closure().item()
            flat[idx] = orig - step
            lo = loss_closure().item()
            flat[idx] = orig
            numeric = (hi - lo) / (2 * step)
            diff = abs(numeric - gflat[idx])
            if diff > atol:
                worst = max(worst, diff / max(abs(numeric), abs(gflat[idx]), atol))
    return worst
