"""ROUGE scoring, the first-query-sentence baseline and offset-query evaluation."""

from __future__ import annotations

from collections import Counter, OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .textprep import EOS

METRICS = ("rouge_1", "rouge_2", "rouge_l", "rouge_su4")
METRIC_TITLES = {"rouge_1": "1", "rouge_2": "2", "rouge_l": "L", "rouge_su4": "SU4"}
SKIP_DISTANCE = 4
BEGIN = "<s>"


@dataclass(frozen=True)
class RougeScore:
    recall: float = 0.0
    precision: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, hits: float, ref_total: float, cand_total: float) -> "RougeScore":
        r = hits / ref_total if ref_total else 0.0
        p = hits / cand_total if cand_total else 0.0
        f = 2 * p * r / (p + r) if p + r else 0.0
        return cls(r, p, f)


def _best(scores: Iterable[RougeScore]) -> RougeScore:
    # first reference wins ties
    best = RougeScore()
    for s in scores:
        if s.f1 > best.f1:
            best = s
    return best


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _overlap_score(cand: Counter, ref: Counter) -> RougeScore:
    hits = sum((cand & ref).values())
    return RougeScore.from_counts(hits, sum(ref.values()), sum(cand.values()))


def _refs(references) -> list[Sequence[str]]:
    if references and isinstance(references[0], str):
        return [references]
    return list(references)


def rouge_n(candidate: Sequence[str], references, n: int) -> RougeScore:
    """Clipped n-gram overlap, best-matching reference by F1."""
    if n < 1:
        raise ValueError("n must be positive")
    cand = ngrams(candidate, n)
    return _best(_overlap_score(cand, ngrams(ref, n)) for ref in _refs(references))


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, 1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], references) -> RougeScore:
    """LCS recall/precision treating each summary as one sequence."""
    return _best(
        RougeScore.from_counts(lcs_length(candidate, ref), len(ref), len(candidate)) for ref in _refs(references)
    )


def skip_units(tokens: Sequence[str], skip: int = SKIP_DISTANCE) -> Counter:
    """Skip bigrams with at most ``skip`` words between, plus unigrams.

    Unigrams are counted as pairs with a begin-of-sequence marker.
    """
    units = Counter((BEGIN, t) for t in tokens)
    for i, a in enumerate(tokens):
        for b in tokens[i + 1:i + skip + 2]:
            units[(a, b)] += 1
    return units


def rouge_su4(candidate: Sequence[str], references) -> RougeScore:
    cand = skip_units(candidate)
    return _best(_overlap_score(cand, skip_units(ref)) for ref in _refs(references))


METRIC_FUNCS: dict[str, Callable] = {
    "rouge_1": lambda c, r: rouge_n(c, r, 1),
    "rouge_2": lambda c, r: rouge_n(c, r, 2),
    "rouge_l": rouge_l,
    "rouge_su4": rouge_su4,
}


def first_query_sentence(doc_sentences: Sequence[Sequence[str]], query_tokens: Sequence[str]) -> list[str]:
    """First sentence containing the query contiguously, else the first sentence."""
    sentences = [s for s in doc_sentences if len(s)]
    if not sentences:
        raise ValueError("empty document")
    n = len(query_tokens)
    for sent in sentences:
        for i in range(len(sent) - n + 1):
            if n and list(sent[i:i + n]) == list(query_tokens):
                return list(sent)
    return list(sentences[0])


# -- reference sets ------------------------------------------------------------


def _qid_key(qid: str) -> tuple[int, ...]:
    return tuple(int(p) for p in qid.split("."))


def reference_set(triples: Iterable) -> "OrderedDict[str, list[tuple[str, list[str]]]]":
    """query_id -> [(ref_id, tokens)], with <EOS> stripped."""
    refs: dict[str, list] = {}
    for t in triples:
        refs.setdefault(t.query_id, []).append((t.ref_id, [w for w in t.summary_tokens if w != EOS]))
    return OrderedDict((q, sorted(refs[q])) for q in sorted(refs, key=_qid_key))


def offset_queries(refset: Mapping[str, list]) -> "OrderedDict[str, list]":
    """Give query d.j the references of d.(j+1); the last query wraps to d.1."""
    by_doc: dict[str, list[str]] = {}
    for qid in refset:
        by_doc.setdefault(qid.split(".")[0], []).append(qid)
    out = OrderedDict()
    for qid in refset:
        siblings = sorted(by_doc[qid.split(".")[0]], key=_qid_key)
        j = siblings.index(qid)
        out[qid] = refset[siblings[(j + 1) % len(siblings)]]
    return out


def write_reference_dir(directory: str | Path, refset: Mapping[str, list]) -> None:
    """One file per reference, named by its ID (e.g. ``A.1.2.txt``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for refs in refset.values():
        for ref_id, tokens in refs:
            (directory / f"{ref_id}.txt").write_text(" ".join(tokens) + "\n", encoding="utf-8")


def read_reference_dir(directory: str | Path) -> "OrderedDict[str, list]":
    refs: dict[str, list] = {}
    for path in sorted(Path(directory).glob("*.txt")):
        ref_id = path.stem
        letter, qid = ref_id.split(".", 1)
        refs.setdefault(qid, []).append((ref_id, path.read_text(encoding="utf-8").split()))
    return OrderedDict((q, sorted(refs[q])) for q in sorted(refs, key=_qid_key))


# -- run evaluation ------------------------------------------------------------


@dataclass
class RunReport:
    name: str
    per_pair: "OrderedDict[str, dict[str, RougeScore]]"

    def mean(self, metric: str, field: str = "f1") -> float:
        vals = [getattr(s[metric], field) for s in self.per_pair.values()]
        return float(np.mean(vals)) if vals else 0.0

    def bootstrap_ci(self, metric: str, field: str = "f1", resamples: int = 1000, seed: int = 0, level: float = 0.95):
        vals = np.array([getattr(s[metric], field) for s in self.per_pair.values()])
        if vals.size == 0:
            return 0.0, 0.0
        rng = np.random.default_rng(seed)
        means = vals[rng.integers(0, vals.size, size=(resamples, vals.size))].mean(axis=1)
        lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
        return float(lo), float(hi)


def evaluate_run(
    decoded: Mapping[str, Sequence[str]],
    refset: Mapping[str, list],
    metrics: Sequence[str] = METRICS,
    offset: bool = False,
    name: str = "system",
    stem: Callable[[str], str] | None = None,
) -> RunReport:
    """Score every decoded summary against its (optionally offset) references.

    ``stem`` maps each token before matching; scoring is unstemmed by default.
    """
    missing = [q for q in decoded if q not in refset]
    if missing:
        raise KeyError(f"decoded query ids without references: {', '.join(sorted(missing, key=_qid_key))}")
    refs = offset_queries(refset) if offset else refset
    per_pair = OrderedDict()
    for qid in sorted(decoded, key=_qid_key):
        cand = list(decoded[qid])
        ref_tokens = [list(toks) for _, toks in refs[qid]]
        if stem is not None:
            cand = [stem(w) for w in cand]
            ref_tokens = [[stem(w) for w in toks] for toks in ref_tokens]
        per_pair[qid] = {m: METRIC_FUNCS[m](cand, ref_tokens) for m in metrics}
    return RunReport(name, per_pair)


def format_report(reports: Sequence[RunReport], metrics: Sequence[str] = METRICS, field: str = "f1") -> str:
    """Rows are systems, columns ROUGE-1/2/L/SU4 as percentages."""
    width = max([len(r.name) for r in reports] + [5])
    lines = [f"{'Model':<{width}}" + "".join(f"{METRIC_TITLES[m]:>8}" for m in metrics)]
    for r in reports:
        lines.append(f"{r.name:<{width}}" + "".join(f"{100 * r.mean(m, field):>8.2f}" for m in metrics))
    return "\n".join(lines) + "\n"


def porter_stemmer() -> Callable[[str], str]:
    """Porter stemming from NLTK, an optional dependency."""
    try:
        from nltk.stem.porter import PorterStemmer
    except ImportError as err:
        raise RuntimeError("stemming needs the optional 'nltk' package (pip install nltk)") from err
    return PorterStemmer().stem


def format_pairs(report: RunReport) -> str:
    metrics = list(next(iter(report.per_pair.values()), {}))
    head = ["query_id"] + [f"{m}_{f}" for m in metrics for f in ("r", "p", "f")]
    lines = ["\t".join(head)]
    for qid, scores in report.per_pair.items():
        cells = [qid]
        for m in metrics:
            s = scores[m]
            cells += [f"{s.recall:.6f}", f"{s.precision:.6f}", f"{s.f1:.6f}"]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
