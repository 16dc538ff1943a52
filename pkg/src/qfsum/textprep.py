"""Tokenization, vocabularies and embedding-table initialisation."""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .numgrad import DiffArray

GO, EOS, UNK = "<GO>", "<EOS>", "<UNK>"
SPECIALS = (GO, EOS, UNK)
GO_ID, EOS_ID, UNK_ID = 0, 1, 2

# characters split off the edges of whitespace chunks
PUNCT = set(',.!?;:"()')
_ABBREV = re.compile(r"^(?:[A-Za-z]\.){2,}$")


class EmbeddingFileError(ValueError):
    pass


def tokenize_spans(text: str) -> list[tuple[str, int, int]]:
    """Split ``text`` into original-case tokens with character offsets.

    Whitespace separates chunks; the characters ``, . ! ? ; : " ( )`` are
    peeled off both ends of each chunk as standalone tokens, except that a
    dotted abbreviation such as ``U.S.`` keeps its final period.
    """
    out = []
    for m in re.finditer(r"\S+", text):
        chunk, start = m.group(), m.start()
        lo, hi = 0, len(chunk)
        head = []
        while lo < hi and chunk[lo] in PUNCT:
            head.append((chunk[lo], start + lo, start + lo + 1))
            lo += 1
        tail = []
        while lo < hi and chunk[hi - 1] in PUNCT and not _ABBREV.match(chunk[lo:hi]):
            tail.append((chunk[hi - 1], start + hi - 1, start + hi))
            hi -= 1
        out.extend(head)
        if lo < hi:
            out.append((chunk[lo:hi], start + lo, start + hi))
        out.extend(reversed(tail))
    return out


def tokenize(text: str) -> list[str]:
    """Lowercased tokens of ``text``.

    >>> tokenize("U.S. soccer , friday .")
    ['u.s.', 'soccer', ',', 'friday', '.']
    """
    return [tok.lower() for tok, _, _ in tokenize_spans(text)]


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    """Cut a token list after every ``.``, ``!`` or ``?`` token."""
    sentences, current = [], []
    for tok in tokens:
        current.append(tok)
        if tok in (".", "!", "?"):
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences


class Vocabulary:
    """Token/id bijection with ``<GO>``, ``<EOS>``, ``<UNK>`` at ids 0, 1, 2."""

    def __init__(self, tokens: Iterable[str]):
        self.id_to_token = list(SPECIALS)
        for tok in tokens:
            if tok in SPECIALS:
                continue
            self.id_to_token.append(tok)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @property
    def specials(self) -> dict[str, int]:
        return {tok: i for i, tok in enumerate(SPECIALS)}

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.token_to_id.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def prefix(self, size: int) -> "Vocabulary":
        """The vocabulary of the ``size`` lowest ids (specials included)."""
        return Vocabulary(self.id_to_token[3:max(size, 3)])

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.id_to_token).encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def __repr__(self) -> str:
        return f"Vocabulary(size={self.size})"


def build_vocab(corpus: Iterable[str], max_size: int) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically.

    ``corpus`` is a flat token stream. The result holds at most ``max_size``
    entries including the three specials.
    """
    if max_size < 3:
        raise ValueError("max_size must leave room for the 3 special tokens")
    counts = Counter(tok for tok in corpus if tok not in SPECIALS)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(tok for tok, _ in ranked[: max_size - 3])


@dataclass
class EmbeddingTable:
    matrix: DiffArray

    @property
    def d_emb(self) -> int:
        return self.matrix.shape[1]

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


def read_embedding_file(path: str | Path, dim: int | None = None) -> dict[str, np.ndarray]:
    """Parse a GloVe-style text file of ``token v1 ... vd`` lines."""
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            token, fields = parts[0], parts[1:]
            if dim is None:
                dim = len(fields)
            if len(fields) != dim or dim == 0:
                raise EmbeddingFileError(f"{path}:{lineno}: expected {dim} values, got {len(fields)}")
            try:
                vectors[token] = np.array([float(x) for x in fields])
            except ValueError as err:
                raise EmbeddingFileError(f"{path}:{lineno}: non-numeric value ({err})") from None
    return vectors


def init_embeddings(
    vocab: Vocabulary,
    pretrained_file: str | Path | None = None,
    d_emb: int = 100,
    rng: np.random.Generator | None = None,
) -> EmbeddingTable:
    """Embedding table for ``vocab``.

    Tokens present in the pretrained file copy its vector. All other rows,
    specials included, are drawn per dimension from a normal distribution
    with the file's mean and population standard deviation. Without a file
    every row is drawn from N(0, 0.1).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if pretrained_file is None:
        mu, sigma, vectors = np.zeros(d_emb), np.full(d_emb, 0.1), {}
    else:
        vectors = read_embedding_file(pretrained_file, d_emb)
        if not vectors:
            raise EmbeddingFileError(f"{pretrained_file}: no vectors")
        allv = np.stack(list(vectors.values()))
        mu, sigma = allv.mean(axis=0), allv.std(axis=0)
    matrix = rng.normal(mu, sigma, size=(vocab.size, d_emb))
    for tok, i in vocab.token_to_id.items():
        if tok in vectors:
            matrix[i] = vectors[tok]
    return EmbeddingTable(DiffArray(matrix, requires_grad=True))
