"""Seeded synthetic task families over a small symbolic vocabulary.

Two task shapes drive the chain experiments:

* compress-then-answer: the shared input is a query key plus a shuffled fact
  list; the first model isolates the queried fact, the second reads the
  answer off the clean fact. Values collide across facts on purpose, so
  answering straight from the noisy input cannot lean on value bigrams.
* multi-round pointer chase: the query names a start key; each round one
  model emits the next key to look up, a simulated retrieval injects the
  fetched fact, and the other model extracts the hop result.

Every generator is a pure function of its seed, and each dataset ships with
a rule-based solver so tests can confirm solvability without any model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

VOCAB_SIZE = 64

STOP = 0        # end-of-output marker, shared by every model
START = 1       # begin-of-output marker fed as the first decode input
QUERY = 2
SEP = 3
UNK = 4

KEYS = list(range(8, 24))       # 16 key symbols
VALUES = list(range(24, 40))    # 16 value symbols
FILLER = list(range(40, 64))    # only used by the pretraining corpus


@dataclass
class ModelTurn:
    model_id: int
    unique_input: list[int] = field(default_factory=list)
    output: list[int] = field(default_factory=list)


@dataclass
class SyntheticExample:
    example_id: int
    shared: list[int]
    rounds: list[list[ModelTurn]]   # rounds, each a list of turns in chain order
    answer: list[int]
    table: dict[int, int] = field(default_factory=dict)  # retrieval table (multi-round)

    def turns(self) -> list[ModelTurn]:
        return [t for rnd in self.rounds for t in rnd]

    def to_json(self) -> str:
        return json.dumps({
            "id": self.example_id,
            "shared": self.shared,
            "rounds": [[{"model": t.model_id, "input": t.unique_input, "output": t.output}
                        for t in rnd] for rnd in self.rounds],
            "answer": self.answer,
            "table": sorted(self.table.items()),
        })

    @staticmethod
    def from_json(text: str) -> "SyntheticExample":
        raw = json.loads(text)
        rounds = [[ModelTurn(t["model"], list(t["input"]), list(t["output"])) for t in rnd]
                  for rnd in raw["rounds"]]
        return SyntheticExample(raw["id"], list(raw["shared"]), rounds,
                                list(raw["answer"]), dict(tuple(p) for p in raw["table"]))


def save_dataset(examples: list[SyntheticExample], path) -> None:
    with open(path, "w") as f:
        for ex in examples:
            f.write(ex.to_json() + "\n")


def load_dataset(path) -> list[SyntheticExample]:
    with open(path) as f:
        return [SyntheticExample.from_json(line) for line in f if line.strip()]


def gen_compress_qa(seed: int, n: int, n_facts: int = 7, n_distractors: int = 6
                    ) -> list[SyntheticExample]:
    """Fact-list compression followed by answer extraction.

    shared: [QUERY, key, SEP, k, v1, v2, SEP, ...] with one relevant fact
    hidden among distractors. Model 0's gold output is the relevant fact,
    model 1's gold output (and the final answer) is the fact's value pair.
    """
    if n_facts < 1:
        raise ValueError("need at least one fact")
    if n_facts != n_distractors + 1:
        raise ValueError("n_facts must equal n_distractors + 1 (one relevant fact)")
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        keys = rng.choice(KEYS, size=n_facts, replace=False)
        facts = [(int(k), int(rng.choice(VALUES)), int(rng.choice(VALUES))) for k in keys]
        target = int(rng.integers(n_facts))
        qkey, v1, v2 = facts[target]
        shared = [QUERY, qkey]
        for k, a, b in facts:
            shared += [SEP, k, a, b]
        turns = [ModelTurn(0, [], [qkey, v1, v2]), ModelTurn(1, [], [v1, v2])]
        examples.append(SyntheticExample(i, shared, [turns], [v1, v2]))
    return examples


def solve_compress_qa(shared: list[int]) -> list[int]:
    """Independent rule-based reader: find the queried fact, return its value."""
    qkey = shared[1]
    i = 2
    while i < len(shared):
        if shared[i] == SEP and shared[i + 1] == qkey:
            return [shared[i + 2], shared[i + 3]]
        i += 4
    raise ValueError("query key not present in fact list")


def gen_multi_round(seed: int, n: int, hops: int = 2, n_distractors: int = 6
                    ) -> list[SyntheticExample]:
    """Pointer-chase task: follow key -> key links for `hops` rounds.

    Round r: model 0 plans by emitting the key to look up, the runtime
    retrieves [key, successor] from the example's table as model 1's unique
    input, and model 1 emits the successor. The final successor is a value
    token and the answer.
    """
    if hops < 2:
        raise ValueError("need at least two hops")
    if hops + 1 > len(KEYS):
        raise ValueError("hop chain longer than the key inventory")
    rng = np.random.default_rng(seed)
    examples = []
    for i in range(n):
        chain = [int(k) for k in rng.choice(KEYS, size=hops, replace=False)]
        value = int(rng.choice(VALUES))
        targets = chain[1:] + [value]
        table = dict(zip(chain, targets))
        spare = [k for k in KEYS if k not in chain]
        for k in rng.permutation(spare)[:n_distractors]:
            table[int(k)] = int(rng.choice(VALUES))
        shared = [QUERY, chain[0]]
        rounds = []
        for r in range(hops):
            key = chain[r]
            rounds.append([ModelTurn(0, [], [key]),
                           ModelTurn(1, [key, table[key]], [table[key]])])
        examples.append(SyntheticExample(i, shared, rounds, [value], table))
    return examples


def solve_multi_round(example: SyntheticExample) -> list[int]:
    """Walk the retrieval table from the query key to the final value."""
    cur = example.shared[1]
    for _ in range(len(example.rounds)):
        cur = example.table[cur]
    return [cur]


def direct_qa_view(examples: list[SyntheticExample], model_id: int = 0
                   ) -> list[SyntheticExample]:
    """Single-model view of a chain dataset: shared input straight to answer."""
    return [SyntheticExample(ex.example_id, ex.shared,
                             [[ModelTurn(model_id, [], list(ex.answer))]],
                             list(ex.answer))
            for ex in examples]


def make_retrieval_provider(example: SyntheticExample):
    """Simulated retriever for chain inference: looks up the planner's last
    emitted token in the example's table."""

    def provider(model_id: int, round_idx: int, outputs: dict) -> list[int]:
        plans = [toks for (m, r), toks in outputs.items() if m == 0 and r == round_idx]
        if not plans or not plans[-1]:
            return [UNK, UNK]
        key = plans[-1][-1]
        return [key, example.table.get(key, UNK)]

    return provider


def eval_exact_match(predictions: list[list[int]], golds: list[list[int]]) -> float:
    if len(predictions) != len(golds):
        raise ValueError("prediction/gold length mismatch")
    if not golds:
        return 0.0
    return float(np.mean([p == g for p, g in zip(predictions, golds)]))


def eval_token_f1(predictions: list[list[int]], golds: list[list[int]]) -> float:
    if len(predictions) != len(golds):
        raise ValueError("prediction/gold length mismatch")
    if not golds:
        return 0.0
    scores = []
    for p, g in zip(predictions, golds):
        from collections import Counter
        overlap = sum((Counter(p) & Counter(g)).values())
        if not p or not g or not overlap:
            scores.append(0.0)
            continue
        prec = overlap / len(p)
        rec = overlap / len(g)
        scores.append(2 * prec * rec / (prec + rec))
    return float(np.mean(scores))


def gen_pretrain_corpus(seed: int, n_docs: int) -> list[list[int]]:
    """Next-token corpus teaching the base skills prompts later select from:
    literal copying, keyed fact lookup with the full fact re-emitted, clean
    single-fact extraction, and pointer-hop emission."""
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(n_docs):
        kind = rng.integers(4)
        if kind == 0:
            # repeated random span: generic induction material
            span = [int(t) for t in rng.choice(FILLER + KEYS + VALUES, size=rng.integers(4, 10))]
            docs.append(span + span + [STOP])
        elif kind == 1:
            # noisy fact list, then the queried fact re-emitted verbatim
            n_facts = int(rng.integers(2, 8))
            keys = rng.choice(KEYS, size=n_facts, replace=False)
            facts = [(int(k), int(rng.choice(VALUES)), int(rng.choice(VALUES))) for k in keys]
            k, v1, v2 = facts[rng.integers(n_facts)]
            doc = [QUERY, k]
            for f in facts:
                doc += [SEP, *f]
            docs.append(doc + [START, k, v1, v2, STOP])
        elif kind == 2:
            # one clean fact, answer is its value pair
            k = int(rng.choice(KEYS))
            v1, v2 = int(rng.choice(VALUES)), int(rng.choice(VALUES))
            docs.append([QUERY, k, SEP, k, v1, v2, START, v1, v2, STOP])
        else:
            # pointer hop: next link after the current pointer
            a, b = (int(k) for k in rng.choice(KEYS, size=2, replace=False))
            c = int(rng.choice(VALUES))
            docs.append([QUERY, a, START, a, STOP, a, b, START, b, STOP, b, c,
                         START, c, STOP])
    return docs
