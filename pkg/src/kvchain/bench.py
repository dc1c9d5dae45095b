"""Deterministic cost accounting and wall-clock probes for chain inference.

Token counts and FLOP estimates come straight from traces; timing runs are
separate and never feed the accounting. The headline comparisons: baseline
prefill grows with the intermediate text it re-reads, cache bytes multiply
per model in the baseline but stay single-copy when shared, and the FLOP gap
grows quadratically with intermediate length.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from .chain import ChainModel, ChainSpec, ChainTrace, run_chain_fthss, run_chain_text
from .model import ModelConfig, ModelWeights
from .trainer import PromptParams


@dataclass
class CostRow:
    mode: str
    intermediate_tokens: int
    prefill_tokens: int
    attn_flops: float
    kv_bytes: int
    mean_s: float
    std_s: float


@dataclass
class CostReport:
    rows: list[CostRow] = field(default_factory=list)

    def by_mode(self, mode: str) -> list[CostRow]:
        return [r for r in self.rows if r.mode == mode]


def kv_bytes(layers: int, kv_heads: int, head_dim: int, positions: int,
             bytes_per_scalar: int, n_models: int = 1, mode: str = "fthss") -> int:
    """Cache footprint: C = 2 * layers * kv_heads * head_dim * positions * bytes.

    The text-passing baseline holds one copy per model in multi-round chains;
    the sharing runtime holds a single copy regardless of chain length.
    """
    if min(layers, kv_heads, head_dim, bytes_per_scalar, n_models) < 1 or positions < 0:
        raise ValueError("sizes must be positive (positions may be zero)")
    c = 2 * layers * kv_heads * head_dim * positions * bytes_per_scalar
    if mode == "baseline":
        return n_models * c
    if mode == "fthss":
        return c
    raise ValueError(f"unknown mode {mode!r}")


def count_prefill_tokens(trace: ChainTrace, model_id: int | None = None) -> int:
    return trace.prefill_total(model_id)


def attention_flops(config: ModelConfig, trace: ChainTrace) -> float:
    """Score plus value FLOPs summed over trace steps.

    A block of q rows entering a cache of c prior entries costs
    2*d*(c+i+1) multiply-adds per row i for scores and the same for the
    value mix, per head per layer. Projections are excluded; they scale
    linearly in tokens and cancel out of mode comparisons at fixed decode
    length.
    """
    per_hl = config.n_heads * config.n_layers
    total = 0.0
    for s in trace.steps:
        c = s.cache_before
        for q_len in (s.prefill_tokens, s.decoded_tokens):
            kv_sum = q_len * c + q_len * (q_len + 1) // 2
            total += 2 * 2 * config.head_dim * kv_sum * per_hl
            c += q_len
    return total


def fit_quadratic_r2(xs, ys) -> tuple[np.ndarray, float]:
    """Least-squares quadratic fit and its R^2."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    coeffs = np.polyfit(xs, ys, 2)
    pred = np.polyval(coeffs, xs)
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    return coeffs, 1.0 - ss_res / ss_tot if ss_tot else 1.0


def _forced_length_spec(prompt_a: PromptParams, prompt_b: PromptParams,
                        intermediate_len: int, answer_len: int,
                        mask_foreign_prompts: bool = True) -> ChainSpec:
    a = ChainModel(0, prompt_a, max_new_tokens=intermediate_len, force_length=True)
    b = ChainModel(1, prompt_b, max_new_tokens=answer_len, force_length=True)
    return ChainSpec([a, b], mask_foreign_prompts=mask_foreign_prompts)


def time_chain(weights: ModelWeights, prompt_a: PromptParams, prompt_b: PromptParams,
               shared_tokens: list[int], intermediate_lengths: list[int],
               trials: int = 10, answer_len: int = 8) -> CostReport:
    """Wall-clock the downstream model's phase at forced intermediate lengths.

    The upstream model decodes exactly L tokens in both modes; the report row
    timing covers only the downstream model's prefill plus decode, which is
    where the two runtimes differ. The first trial is warmup and discarded.
    """
    if trials < 3:
        raise ValueError("need at least 3 trials")
    cfg = weights.config
    report = CostReport()
    for length in intermediate_lengths:
        spec = _forced_length_spec(prompt_a, prompt_b, length, answer_len)
        for mode, runner in (("text", run_chain_text), ("fthss", run_chain_fthss)):
            times = []
            last_trace = None
            for _ in range(trials + 1):
                _, trace = runner(weights, spec, shared_tokens)
                b_steps = [s for s in trace.steps if s.model_id == 1]
                times.append(sum(s.wall_s for s in b_steps))
                last_trace = trace
            times = times[1:]
            b_prefill = last_trace.prefill_total(1)
            b_only = ChainTrace(mode, last_trace.shared_len,
                                [s for s in last_trace.steps if s.model_id == 1])
            peak = max(last_trace.cache_peaks.values())
            report.rows.append(CostRow(
                mode, length, b_prefill, attention_flops(cfg, b_only),
                kv_bytes(cfg.n_layers, cfg.n_heads, cfg.head_dim, peak,
                         np.dtype("f4").itemsize,
                         n_models=len(spec.models),
                         mode="baseline" if mode == "text" else "fthss"),
                float(np.mean(times)), float(np.std(times))))
    return report


_COLUMNS = ["mode", "intermediate_tokens", "prefill_tokens", "attn_flops",
            "kv_bytes", "mean_s", "std_s"]


def report_render(report: CostReport) -> str:
    """CSV rendering, parseable back via report_parse."""
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(_COLUMNS)
    for r in report.rows:
        w.writerow([r.mode, r.intermediate_tokens, r.prefill_tokens,
                    repr(r.attn_flops), r.kv_bytes, repr(r.mean_s), repr(r.std_s)])
    return buf.getvalue()


def report_parse(text: str) -> CostReport:
    rows = list(csv.reader(io.StringIO(text)))
    if rows[0] != _COLUMNS:
        raise ValueError("unexpected report header")
    report = CostReport()
    for row in rows[1:]:
        report.rows.append(CostRow(row[0], int(row[1]), int(row[2]), float(row[3]),
                                   int(row[4]), float(row[5]), float(row[6])))
    return report
