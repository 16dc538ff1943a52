"""Greedy and beam-search decoding with pointer copying and OOV substitution."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import (
    EncodedExample,
    ModelParams,
    decoder_step,
    encode_document,
    encode_query,
    initial_state,
)
from .numgrad import DiffArray
from .textprep import EOS_ID, GO_ID, UNK_ID, Vocabulary


@dataclass
class BeamConfig:
    beam_width: int = 5
    max_len: int = 32

    def __post_init__(self):
        if self.beam_width < 1 or self.max_len < 1:
            raise ValueError("beam_width and max_len must be at least 1")


@dataclass
class Hypothesis:
    """A (partial) output sequence; ``token_ids`` excludes the implicit <GO>."""

    token_ids: list[int] = field(default_factory=list)
    logprob: float = 0.0
    state: DiffArray | None = None
    alive: bool = True
    attention_rows: list[np.ndarray] = field(default_factory=list)
    pointer_steps: list[bool] = field(default_factory=list)
    attended: list[int] = field(default_factory=list)
    order: int = 0
    raw_tokens: list[str] = field(default_factory=list)

    @property
    def finished(self) -> bool:
        return bool(self.token_ids) and self.token_ids[-1] == EOS_ID

    @property
    def output_ids(self) -> list[int]:
        return self.token_ids[:-1] if self.finished else list(self.token_ids)

    @property
    def prev_id(self) -> int:
        return self.token_ids[-1] if self.token_ids else GO_ID

    def attention_matrix(self) -> np.ndarray:
        return np.stack(self.attention_rows) if self.attention_rows else np.zeros((0, 0))


def _extend(h: Hypothesis, token: int, score: float, step, order: int) -> Hypothesis:
    child = Hypothesis(
        token_ids=h.token_ids + [token],
        logprob=score,
        state=step.s_t,
        attention_rows=h.attention_rows + [step.alpha_t.values],
        pointer_steps=h.pointer_steps + [step.pointer_used],
        attended=h.attended + [step.i_prime],
        order=order,
    )
    child.alive = token != EOS_ID
    return child


def greedy_decode(params: ModelParams, doc_ids: Sequence[int], query_ids: Sequence[int], max_len: int = 32) -> Hypothesis:
    """Step-wise argmax decoding; the score uses the generator's top log-probability."""
    enc = encode_document(params, doc_ids)
    q = encode_query(params, query_ids)
    h = Hypothesis(state=initial_state(params, enc))
    for _ in range(max_len):
        step = decoder_step(params, h.state, h.prev_id, q, enc)
        logp = step.log_p_gen.values
        h = _extend(h, step.y_t, h.logprob + float(logp[step.y_gen]), step, 0)
        if not h.alive:
            break
    return h


@dataclass
class BeamResult:
    best: Hypothesis
    finished: list[Hypothesis]
    beam: list[Hypothesis]


def beam_search(
    params: ModelParams, doc_ids: Sequence[int], query_ids: Sequence[int], cfg: BeamConfig | None = None
) -> BeamResult:
    """Beam search over generator top-k expansions.

    At steps where the pointer switch fires, every child emits the copied
    token while still being scored with one of the generator's top-k
    log-probabilities, so ``k`` children are spawned either way. Search stops
    at ``max_len`` or once no live hypothesis can beat the best finished one
    (scores never increase). Without length normalisation.
    """
    cfg = cfg or BeamConfig()
    k = cfg.beam_width
    enc = encode_document(params, doc_ids)
    q = encode_query(params, query_ids)
    counter = itertools.count()
    alive = [Hypothesis(state=initial_state(params, enc), order=next(counter))]
    finished: list[Hypothesis] = []
    for _ in range(cfg.max_len):
        candidates = []
        for h in alive:
            step = decoder_step(params, h.state, h.prev_id, q, enc)
            logp = step.log_p_gen.values
            # stable sort: equal scores keep the lower token id first
            top = np.argsort(-logp, kind="stable")[:k]
            for j in top:
                token = step.y_ptr if step.pointer_used else int(j)
                candidates.append(_extend(h, token, h.logprob + float(logp[j]), step, next(counter)))
        candidates.sort(key=lambda c: (-c.logprob, c.order))
        alive = []
        for c in candidates:
            if len(alive) >= k:
                break
            (alive if c.alive else finished).append(c)
        if not alive:
            break
        if finished and max(f.logprob for f in finished) >= alive[0].logprob:
            break
    pool = finished or alive
    best = min(pool, key=lambda c: (-c.logprob, c.order))
    return BeamResult(best, sorted(finished, key=lambda c: (-c.logprob, c.order)), alive)


def postprocess_unk(hyp: Hypothesis, raw_doc_tokens: Sequence[str], doc_ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    """Render output ids as tokens, copying the surface word for pointed <UNK>s."""
    out = []
    for tok, used_ptr, i in zip(hyp.output_ids, hyp.pointer_steps, hyp.attended):
        if used_ptr and doc_ids[i] == UNK_ID and tok == UNK_ID:
            out.append(raw_doc_tokens[i])
        else:
            out.append(vocab.id_to_token[tok])
    hyp.raw_tokens = out
    return out


@dataclass
class LengthStats:
    count: int = 0
    mean: float = 0.0
    min: int = 0
    max: int = 0

    def format(self) -> str:
        return f"count\t{self.count}\nmean\t{self.mean:.2f}\nmin\t{self.min}\nmax\t{self.max}\n"


def length_stats(lengths: Sequence[int]) -> LengthStats:
    if not lengths:
        return LengthStats()
    return LengthStats(len(lengths), float(np.mean(lengths)), int(min(lengths)), int(max(lengths)))


@dataclass
class DecodedSummary:
    query_id: str
    tokens: list[str]
    hypothesis: Hypothesis
    doc_tokens: list[str]


def _id_key(query_id: str) -> tuple:
    return tuple(int(p) for p in query_id.split("."))


def decode_corpus(
    params: ModelParams,
    vocab: Vocabulary,
    triples: Sequence,
    cfg: BeamConfig | None = None,
    max_doc_len: int = 800,
) -> tuple[list[DecodedSummary], LengthStats]:
    """Decode one summary per doc-query pair, ordered by query ID."""
    cfg = cfg or BeamConfig()
    pairs = {}
    for t in triples:
        pairs.setdefault(t.query_id, t)
    out = []
    for qid in sorted(pairs, key=_id_key):
        ex = EncodedExample.from_triple(pairs[qid], vocab, params.hp.gen_vocab_size, max_doc_len)
        hyp = beam_search(params, ex.doc_ids, ex.query_ids, cfg).best
        # documents are lowercased during preprocessing, so copied words are too
        surface = [w.lower() for w in ex.raw_doc_tokens]
        tokens = postprocess_unk(hyp, surface, ex.doc_ids, vocab)
        out.append(DecodedSummary(qid, tokens, hyp, surface))
    return out, length_stats([len(d.tokens) for d in out])


def write_decoded(path: str | Path, decoded: Sequence[DecodedSummary]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for d in decoded:
            fh.write(f"{d.query_id}\t{' '.join(d.tokens)}\n")


def read_decoded(path: str | Path) -> dict[str, list[str]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'query_id<TAB>summary'")
            qid, text = line.split("\t", 1)
            out[qid] = text.split()
    return out


def export_attention(path: str | Path, output_tokens: Sequence[str], doc_tokens: Sequence[str], matrix: np.ndarray) -> None:
    """Tab-separated attention matrix with token labels.

    The header row lists the document tokens; each following row starts with
    the output token and holds its attention weights over the document.
    """
    matrix = np.asarray(matrix)
    if matrix.shape != (len(output_tokens), len(doc_tokens)):
        raise ValueError(f"matrix shape {matrix.shape} does not match labels {(len(output_tokens), len(doc_tokens))}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t" + "\t".join(doc_tokens) + "\n")
        for tok, row in zip(output_tokens, matrix):
            fh.write(tok + "\t" + "\t".join(f"{x:.6g}" for x in row) + "\n")


def read_attention(path: str | Path) -> tuple[list[str], list[str], np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")[1:]
        rows, labels = [], []
        for line in fh:
            parts = line.rstrip("\n").split("\t")
            labels.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    return labels, header, np.array(rows).reshape(len(labels), len(header))
