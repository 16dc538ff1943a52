"""Small generated corpora with real entity spans, for tests and demos.

Each document lists a few people, one sentence each. The highlight for a
person repeats the subject-verb-object part of their sentence, so the right
summary is fully determined by which person is the query.
"""

from __future__ import annotations

import numpy as np

from .dataset import Entity, RawArticle

NAMES = [
    "Alice", "Bruno", "Chen", "Dmitri", "Elena", "Farid", "Greta", "Hiro", "Ines", "Jonas",
    "Kofi", "Lena", "Mateo", "Nadia", "Oscar", "Priya", "Quinn", "Rosa", "Sven", "Tariq",
    "Uma", "Viktor", "Wanda", "Xavier", "Yusuf", "Zora",
]
VERBS = ["bought", "painted", "sold", "repaired", "found", "lost", "built", "stole"]
OBJECTS = ["a car", "the house", "a boat", "an old bike", "the red door", "a piano", "two chairs", "the fence"]
PLACES = ["Oslo", "Lima", "Cairo", "Perth", "Quito", "Riga"]


def query_corpus(n_docs: int = 10, people_per_doc: int = 2, seed: int = 0, n_names: int = 6) -> list[RawArticle]:
    """Articles whose highlights depend only on the queried person.

    Names come from the first ``n_names`` entries of the pool and are
    annotated as entities both in the body and in highlights; places appear
    only in the body. Small pools keep query matching learnable by tiny
    attention layers.
    """
    if not people_per_doc <= n_names <= len(NAMES):
        raise ValueError("need people_per_doc <= n_names <= len(NAMES)")
    rng = np.random.default_rng(seed)
    articles = []
    for d in range(n_docs):
        people = rng.choice(n_names, size=people_per_doc, replace=False)
        sentences, highlights, entities = [], [], []
        body = ""
        for h_idx, p in enumerate(people):
            name = NAMES[p]
            verb = VERBS[rng.integers(len(VERBS))]
            obj = OBJECTS[rng.integers(len(OBJECTS))]
            place = PLACES[rng.integers(len(PLACES))]
            sentence = f"{name} {verb} {obj} in {place} ."
            start = len(body) + (1 if body else 0)
            body = f"{body} {sentence}" if body else sentence
            entities.append(Entity(name, None, start, start + len(name)))
            highlight = f"{name} {verb} {obj}"
            highlights.append(highlight)
            entities.append(Entity(name, h_idx, 0, len(name)))
            sentences.append(sentence)
        articles.append(RawArticle(f"syn{d:03d}", body, highlights, entities))
    return articles
