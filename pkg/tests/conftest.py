import time

import numpy as np
import pytest

from qfsum.dataset import assign_ids, build_triples, token_stream
from qfsum.model import EncodedExample, HyperParams, ModelParams
from qfsum.synthetic import query_corpus
from qfsum.textprep import build_vocab
from qfsum.training import TrainConfig, new_train_state, train

_RESULTS = {}
_START = {}


def toy_hyperparams(d=4, vocab=12, gen_vocab=8) -> HyperParams:
    return HyperParams(d, d, d, d, d, d, vocab, gen_vocab)


def random_model(seed: int, hp: HyperParams | None = None, sigma: float = 0.5) -> ModelParams:
    """Model with every parameter (biases too) drawn from N(0, sigma)."""
    rng = np.random.default_rng(seed)
    params = ModelParams.initialize(hp or toy_hyperparams(), rng)
    for _, p in params.named_parameters():
        p.values[...] = rng.normal(0.0, sigma, size=p.shape)
    return params


def synthetic_examples(n_docs=10, people=2, seed=0, gen_vocab_size=None):
    """Triples, vocabulary and encoded examples for a generated query corpus."""
    triples = assign_ids([t for a in query_corpus(n_docs, people, seed) for t in build_triples(a)], seed)
    vocab = build_vocab(token_stream(triples), 10_000)
    gen = gen_vocab_size or vocab.size
    examples = [EncodedExample.from_triple(t, vocab, gen) for t in triples]
    return triples, vocab, examples


def overfit_hyperparams(vocab_size: int, gen_vocab_size: int | None = None) -> HyperParams:
    return HyperParams(16, 32, 16, 32, 16, 16, vocab_size, gen_vocab_size or vocab_size)


OVERFIT_EPOCHS = 300


@pytest.fixture(scope="session")
def overfit_run():
    """One memorisation run on the 20-triple generated corpus, shared across tests.

    Returns ``(state, triples, examples, logs, seconds)``.
    """
    triples, vocab, examples = synthetic_examples(10, 2, seed=0)
    cfg = TrainConfig(batch_size=30, lr=1e-2, seed=0, init_scale=0.3)
    t0 = time.perf_counter()
    state = new_train_state(overfit_hyperparams(vocab.size), vocab, examples, cfg)
    logs = train(state, examples, OVERFIT_EPOCHS)
    return state, triples, examples, logs, time.perf_counter() - t0


@pytest.fixture
def acceptance(request):
    """Record a PASS/FAIL line for the terminal summary."""

    def record(criterion: int, passed: bool, detail: str) -> None:
        _RESULTS[criterion] = (bool(passed), detail)
        print(f"[criterion {criterion}] {'PASS' if passed else 'FAIL'}: {detail}")

    return record


def suite_elapsed() -> float:
    return time.perf_counter() - _START.get("t", time.perf_counter())


def pytest_sessionstart(session):
    _START["t"] = time.perf_counter()


def pytest_collection_modifyitems(session, config, items):
    # the runtime-budget criterion measures the whole session, so it runs last
    last = [it for it in items if it.name == "test_criterion_10_suite_runtime"]
    for it in last:
        items.remove(it)
        items.append(it)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        passed, detail = _RESULTS[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
