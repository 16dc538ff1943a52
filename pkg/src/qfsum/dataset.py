"""Document-query-summary triples built from articles with entity markup.

Every occurrence of an entity inside a highlight yields one triple whose query
is the entity and whose target summary is the whole highlight. Entity token
runs in the summary that also occur in the document get pointer supervision
towards the first document occurrence.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .textprep import EOS, tokenize_spans

log = logging.getLogger(__name__)

SPLITS = ("train", "validation", "test")


@dataclass
class Entity:
    text: str
    highlight_index: int | None
    start: int
    end: int


@dataclass
class RawArticle:
    article_id: str
    body: str
    highlights: list[str]
    entities: list[Entity] = field(default_factory=list)

    def __post_init__(self):
        if not self.highlights:
            raise ValueError(f"article {self.article_id}: needs at least one highlight")
        self.entities = [e if isinstance(e, Entity) else Entity(**e) for e in self.entities]
        for e in self.entities:
            host = self.body if e.highlight_index is None else self.highlights[e.highlight_index]
            if not 0 <= e.start < e.end <= len(host):
                raise ValueError(f"article {self.article_id}: entity span {e.start}:{e.end} outside its text")

    @classmethod
    def from_json(cls, obj: dict) -> "RawArticle":
        return cls(
            article_id=str(obj["article_id"]),
            body=obj["body"],
            highlights=list(obj["highlights"]),
            entities=[Entity(**e) for e in obj.get("entities", [])],
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, separators=(",", ":"))


@dataclass
class TrainingTriple:
    article_id: str
    doc_tokens: list[str]
    raw_doc_tokens: list[str]
    query_tokens: list[str]
    summary_tokens: list[str]
    x_ptr: list[int]
    pointed_index: list[int]
    doc_id: str = ""
    query_id: str = ""
    ref_id: str = ""

    def __post_init__(self):
        n = len(self.summary_tokens)
        if not (len(self.x_ptr) == len(self.pointed_index) == n):
            raise ValueError("x_ptr / pointed_index / summary lengths differ")
        if not self.query_tokens:
            raise ValueError("empty query")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "TrainingTriple":
        return cls(**json.loads(line))


def _find(seq: Sequence[str], sub: Sequence[str]) -> int:
    n = len(sub)
    for i in range(len(seq) - n + 1):
        if list(seq[i:i + n]) == list(sub):
            return i
    return -1


def _span_tokens(spans, start: int, end: int) -> list[int]:
    return [i for i, (_, s, e) in enumerate(spans) if s < end and e > start]


def pointer_supervision(
    doc_tokens: Sequence[str], summary_tokens: Sequence[str], entity_runs: Iterable[Sequence[int]]
) -> tuple[list[int], list[int]]:
    """Pointer flags and document indices for the summary tokens.

    ``entity_runs`` lists, per entity occurrence, the summary positions it
    covers. A run whose token sequence occurs in the document points to the
    consecutive positions of its first occurrence; everything else gets
    ``x_ptr = 0`` and index -1.
    """
    x_ptr = [0] * len(summary_tokens)
    pointed = [-1] * len(summary_tokens)
    for run in entity_runs:
        run = list(run)
        if not run:
            continue
        at = _find(doc_tokens, [summary_tokens[i] for i in run])
        if at < 0:
            continue
        for k, pos in enumerate(run):
            x_ptr[pos] = 1
            pointed[pos] = at + k
    return x_ptr, pointed


def build_triples(article: RawArticle) -> list[TrainingTriple]:
    """One triple per (highlight, entity occurrence in that highlight)."""
    body_spans = tokenize_spans(article.body)
    raw_doc = [t for t, _, _ in body_spans]
    doc = [t.lower() for t in raw_doc]
    triples = []
    for h_idx, highlight in enumerate(article.highlights):
        ents = [e for e in article.entities if e.highlight_index == h_idx]
        if not ents:
            log.info("article %s highlight %d has no entities; skipped", article.article_id, h_idx)
            continue
        spans = tokenize_spans(highlight)
        summary = [t.lower() for t, _, _ in spans]
        runs = [_span_tokens(spans, e.start, e.end) for e in ents]
        x_ptr, pointed = pointer_supervision(doc, summary, runs)
        for e, run in zip(ents, runs):
            query = [summary[i] for i in run]
            if not query:
                continue
            triples.append(
                TrainingTriple(
                    article_id=article.article_id,
                    doc_tokens=list(doc),
                    raw_doc_tokens=list(raw_doc),
                    query_tokens=query,
                    summary_tokens=summary + [EOS],
                    x_ptr=x_ptr + [0],
                    pointed_index=pointed + [-1],
                )
            )
    return triples


def heuristic_entities(article_id: str, body: str, highlights: Sequence[str]) -> RawArticle:
    """HEURISTIC annotator: runs of capitalised tokens count as entities.

    Only meant for synthetic corpora without real entity markup; sentence
    initial words are picked up too.
    """
    entities = []
    for h_idx, text in [(None, body)] + list(enumerate(highlights)):
        run = []
        for tok, s, e in tokenize_spans(text) + [("", len(text), len(text))]:
            if tok[:1].isupper():
                run.append((s, e))
                continue
            if run:
                start, end = run[0][0], run[-1][1]
                entities.append(Entity(text[start:end], h_idx, start, end))
                run = []
    return RawArticle(article_id, body, list(highlights), entities)


def _unit_draw(seed: int, article_id: str) -> float:
    digest = hashlib.blake2b(f"{seed}:{article_id}".encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2.0**64


def assign_splits(
    article_ids: Iterable[str], seed: int, val_fraction: float, test_fraction: float
) -> dict[str, str]:
    """Independent per-article draw; same seed and id always give the same split."""
    if not (0 <= val_fraction < 1 and 0 <= test_fraction < 1 and val_fraction + test_fraction < 1):
        raise ValueError("split fractions must lie in [0, 1) and sum below 1")
    out = {}
    for aid in article_ids:
        u = _unit_draw(seed, aid)
        if u < val_fraction:
            out[aid] = "validation"
        elif u < val_fraction + test_fraction:
            out[aid] = "test"
        else:
            out[aid] = "train"
    return out


def _letters(i: int) -> str:
    # 0 -> A, 25 -> Z, 26 -> AA
    s = ""
    i += 1
    while i:
        i, r = divmod(i - 1, 26)
        s = chr(65 + r) + s
    return s


def assign_ids(triples: Sequence[TrainingTriple], seed: int = 0) -> list[TrainingTriple]:
    """Number documents, queries and references hierarchically.

    Documents get ``1, 2, ...``; queries ``d.1, d.2, ...``; references
    ``A.d.q, B.d.q, ...``. The order within each level is shuffled with
    ``seed``. Returned triples are sorted by (document, query, reference).
    """
    rng = random.Random(seed)
    docs: OrderedDict[str, OrderedDict[tuple, list]] = OrderedDict()
    for t in triples:
        docs.setdefault(t.article_id, OrderedDict()).setdefault(tuple(t.query_tokens), []).append(t)
    doc_keys = list(docs)
    rng.shuffle(doc_keys)
    out = []
    for d, aid in enumerate(doc_keys, 1):
        queries = list(docs[aid].items())
        rng.shuffle(queries)
        for q, (_, refs) in enumerate(queries, 1):
            refs = list(refs)
            rng.shuffle(refs)
            for r, t in enumerate(refs):
                t = TrainingTriple(**{**asdict(t), "doc_id": str(d), "query_id": f"{d}.{q}", "ref_id": f"{_letters(r)}.{d}.{q}"})
                out.append(t)
    return out


def truncate(triple: TrainingTriple, max_doc_len: int = 800) -> TrainingTriple:
    """Keep the first ``max_doc_len`` document tokens.

    Pointer supervision aimed past the cut is dropped (x_ptr set to 0).
    """
    if len(triple.doc_tokens) <= max_doc_len:
        return triple
    x_ptr, pointed = list(triple.x_ptr), list(triple.pointed_index)
    for i, (x, p) in enumerate(zip(x_ptr, pointed)):
        if x and p >= max_doc_len:
            x_ptr[i], pointed[i] = 0, -1
    d = asdict(triple)
    d.update(
        doc_tokens=triple.doc_tokens[:max_doc_len],
        raw_doc_tokens=triple.raw_doc_tokens[:max_doc_len],
        x_ptr=x_ptr,
        pointed_index=pointed,
    )
    return TrainingTriple(**d)


def check_pointer_consistency(triples: Iterable[TrainingTriple]) -> list[str]:
    """Describe every pointer target that does not match its summary token."""
    problems = []
    for t in triples:
        for i, (x, p) in enumerate(zip(t.x_ptr, t.pointed_index)):
            if x and (not 0 <= p < len(t.doc_tokens) or t.doc_tokens[p] != t.summary_tokens[i]):
                problems.append(f"{t.ref_id or t.article_id}: summary position {i}")
            if not x and p != -1:
                problems.append(f"{t.ref_id or t.article_id}: index set without pointer at {i}")
    return problems


@dataclass
class SplitStats:
    docs: int = 0
    pairs: int = 0
    triples: int = 0
    words_per_doc: float = 0.0
    words_per_query: float = 0.0
    words_per_summary: float = 0.0
    duplicates: int = 0


def split_stats(triples: Sequence[TrainingTriple]) -> SplitStats:
    if not triples:
        return SplitStats()
    docs = {}
    pairs = {}
    seen = set()
    dups = 0
    for t in triples:
        docs.setdefault(t.article_id, len(t.doc_tokens))
        pairs.setdefault((t.article_id, tuple(t.query_tokens)), len(t.query_tokens))
        key = (t.article_id, tuple(t.query_tokens), tuple(t.summary_tokens))
        dups += key in seen
        seen.add(key)
    summary_words = [len([w for w in t.summary_tokens if w != EOS]) for t in triples]
    return SplitStats(
        docs=len(docs),
        pairs=len(pairs),
        triples=len(triples),
        words_per_doc=sum(docs.values()) / len(docs),
        words_per_query=sum(pairs.values()) / len(pairs),
        words_per_summary=sum(summary_words) / len(triples),
        duplicates=dups,
    )


def corpus_stats(by_split: dict[str, Sequence[TrainingTriple]]) -> dict[str, SplitStats]:
    return {name: split_stats(by_split.get(name, [])) for name in SPLITS}


def format_stats(stats: dict[str, SplitStats]) -> str:
    """Plain-text table with the dataset statistics rows."""
    cols = [("Training", "train"), ("Val.", "validation"), ("Test", "test")]
    rows = [
        ("#doc", lambda s: f"{s.docs:,}"),
        ("#doc-query pairs", lambda s: f"{s.pairs:,}"),
        ("#doc-query-sum", lambda s: f"{s.triples:,}"),
        ("avg #words/doc", lambda s: f"{s.words_per_doc:.2f}"),
        ("avg #words/query", lambda s: f"{s.words_per_query:.2f}"),
        ("avg #words/sum", lambda s: f"{s.words_per_summary:.2f}"),
        ("#duplicate triples", lambda s: f"{s.duplicates:,}"),
    ]
    lines = [f"{'':<20}" + "".join(f"{title:>12}" for title, _ in cols)]
    for label, fmt in rows:
        lines.append(f"{label:<20}" + "".join(f"{fmt(stats[key]):>12}" for _, key in cols))
    return "\n".join(lines) + "\n"


def read_articles(path: str | Path) -> list[RawArticle]:
    articles = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                articles.append(RawArticle.from_json(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return articles


def write_articles(path: str | Path, articles: Iterable[RawArticle]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in articles:
            fh.write(a.to_json() + "\n")


def write_triples(path: str | Path, triples: Iterable[TrainingTriple]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in triples:
            fh.write(t.to_json() + "\n")


def read_triples(path: str | Path) -> list[TrainingTriple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(TrainingTriple.from_json(line))
            except (json.JSONDecodeError, TypeError, ValueError) as err:
                raise ValueError(f"{path}:{lineno}: {err}") from None
    return out


def build_dataset(
    articles: Sequence[RawArticle], seed: int = 42, val_fraction: float = 0.015, test_fraction: float = 0.015
) -> dict[str, list[TrainingTriple]]:
    """Split articles, build triples and assign IDs independently per split."""
    splits = assign_splits([a.article_id for a in articles], seed, val_fraction, test_fraction)
    grouped: dict[str, list[TrainingTriple]] = {name: [] for name in SPLITS}
    for article in sorted(articles, key=lambda a: a.article_id):
        grouped[splits[article.article_id]].extend(build_triples(article))
    return {name: assign_ids(ts, seed) for name, ts in grouped.items()}


def token_stream(triples: Iterable[TrainingTriple]) -> Iterable[str]:
    """Tokens for vocabulary counting: each document, highlight and query once."""
    seen_docs, seen_text = set(), set()
    for t in triples:
        if t.article_id not in seen_docs:
            seen_docs.add(t.article_id)
            yield from t.doc_tokens
        for key, toks in (("s", t.summary_tokens), ("q", t.query_tokens)):
            k = (t.article_id, key, tuple(toks))
            if k not in seen_text:
                seen_text.add(k)
                yield from (w for w in toks if w != EOS)
