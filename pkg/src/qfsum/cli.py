"""Command line front end: build-data, train, decode, baseline, evaluate.

Every option can also be given in a ``key=value`` config file passed with
``--config``; command line flags override the file. Logs go to stderr, data
goes to files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dataset, evaluation, inference, training
from .model import EncodedExample, HyperParams
from .textprep import build_vocab, init_embeddings, split_sentences

log = logging.getLogger("qfsum")

COMMANDS = ("build-data", "train", "decode", "baseline", "evaluate")


class UsageError(Exception):
    """Bad configuration or missing input; reported without a traceback."""


@dataclass
class RunConfig:
    # paths
    corpus: str | None = None
    out_dir: str | None = None
    triples: str | None = None
    references: str | None = None
    checkpoint: str | None = None
    loss_log: str | None = None
    validation: str | None = None
    val_log: str | None = None
    embeddings: str | None = None
    output: str | None = None
    stats: str | None = None
    attention_dir: str | None = None
    pointer_log: str | None = None
    report: str | None = None
    pairs_dir: str | None = None
    system: list[str] = field(default_factory=list)
    # data
    seed: int = 42
    val_fraction: float = 0.015
    test_fraction: float = 0.015
    max_doc_len: int = 800
    # model
    d_emb: int = 100
    d_doc: int = 512
    d_que: int = 256
    d_dec: int = 512
    d_att: int = 256
    d_gen: int = 256
    vocab_size: int = 150_000
    gen_vocab_size: int = 20_000
    # training
    epochs: int = 1
    batch_size: int = 30
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = None
    save_every: int = 0
    init_scale: float = 0.08
    resume: bool = False
    # decoding and evaluation
    beam_width: int = 5
    max_len: int = 32
    offset_queries: bool = False
    stem: bool = False
    bootstrap: int = 0

    def hyperparams(self, vocab_size: int) -> HyperParams:
        return HyperParams(
            d_emb=self.d_emb,
            d_doc=self.d_doc,
            d_que=self.d_que,
            d_dec=self.d_dec,
            d_att=self.d_att,
            d_gen=self.d_gen,
            vocab_size=vocab_size,
            gen_vocab_size=min(self.gen_vocab_size, vocab_size),
        )

    def train_config(self) -> training.TrainConfig:
        names = {f.name for f in fields(training.TrainConfig)}
        return training.TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(key: str, value):
    kind = _FIELD_TYPES[key]
    if not isinstance(value, str):
        return value
    if kind == "bool":
        return _parse_bool(value)
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    if kind == "float | None":
        return None if value.lower() in ("", "none") else float(value)
    if kind == "list[str]":
        return [v.strip() for v in value.split(",") if v.strip()]
    return value


def resolve_config(config_path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values = {}
    if config_path:
        if not Path(config_path).is_file():
            raise UsageError(f"config file not found: {config_path}")
        try:
            raw = training.read_config(config_path)
        except ValueError as err:
            raise UsageError(str(err)) from None
        unknown = sorted(set(raw) - set(_FIELD_TYPES))
        if unknown:
            raise UsageError(f"{config_path}: unknown keys: {', '.join(unknown)}")
        values.update(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig(**{k: _convert(k, v) for k, v in values.items()})
    except ValueError as err:
        raise UsageError(f"bad config value: {err}") from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    checks = [
        (0 <= cfg.val_fraction < 1 and 0 <= cfg.test_fraction < 1 and cfg.val_fraction + cfg.test_fraction < 1,
         "split fractions must lie in [0, 1) and sum below 1"),
        (cfg.epochs >= 0, "epochs must be >= 0"),
        (cfg.batch_size >= 1, "batch_size must be >= 1"),
        (cfg.max_doc_len >= 1, "max_doc_len must be >= 1"),
        (cfg.beam_width >= 1, "beam_width must be >= 1"),
        (cfg.max_len >= 1, "max_len must be >= 1"),
        (cfg.lr > 0, "lr must be positive"),
        (cfg.save_every >= 0, "save_every must be >= 0"),
        (cfg.bootstrap >= 0, "bootstrap must be >= 0"),
        (cfg.vocab_size >= 3 and cfg.gen_vocab_size >= 3, "vocabulary sizes must be >= 3"),
        (min(cfg.d_emb, cfg.d_doc, cfg.d_que, cfg.d_dec, cfg.d_att, cfg.d_gen) >= 1, "dimensions must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise UsageError(msg)


def _require(cfg: RunConfig, *keys: str, existing: Sequence[str] = ()) -> None:
    for key in keys:
        if getattr(cfg, key) in (None, []):
            raise UsageError(f"missing required option --{key.replace('_', '-')}")
    for key in existing:
        path = getattr(cfg, key)
        if not Path(path).exists():
            raise UsageError(f"{key.replace('_', ' ')} not found: {path}")


# -- build-data ----------------------------------------------------------------


def cmd_build_data(cfg: RunConfig) -> int:
    _require(cfg, "corpus", "out_dir", existing=["corpus"])
    articles = dataset.read_articles(cfg.corpus)
    by_split = dataset.build_dataset(articles, cfg.seed, cfg.val_fraction, cfg.test_fraction)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, triples in by_split.items():
        problems = dataset.check_pointer_consistency(triples)
        if problems:
            raise UsageError("inconsistent pointer supervision: " + "; ".join(problems[:5]))
        dataset.write_triples(out / f"{name}.jsonl", triples)
        log.info("%s: %d triples", name, len(triples))
    report = dataset.format_stats(dataset.corpus_stats(by_split))
    (out / "stats.txt").write_text(report, encoding="utf-8")
    sys.stderr.write(report)
    return 0


# -- train ---------------------------------------------------------------------


def _config_diff(stored: dict, wanted: dict) -> list[str]:
    return [f"  {k}: checkpoint={stored.get(k)!r} requested={wanted.get(k)!r}"
            for k in sorted(set(stored) | set(wanted)) if stored.get(k) != wanted.get(k)]


def _trim_loss_log(path: Path, step: int) -> None:
    # drop lines logged after the checkpoint we resume from; column 2 is the step
    if not path.exists():
        return
    keep = [ln for ln in path.read_text(encoding="utf-8").splitlines(True) if int(ln.split()[1]) <= step]
    path.write_text("".join(keep), encoding="utf-8")


def cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "triples", "checkpoint", existing=["triples"])
    triples = dataset.read_triples(cfg.triples)
    if not triples:
        raise UsageError(f"no training triples in {cfg.triples}")
    vocab = build_vocab(dataset.token_stream(triples), cfg.vocab_size)
    hp = cfg.hyperparams(vocab.size)
    tcfg = cfg.train_config()
    ckpt = Path(cfg.checkpoint)
    loss_log = Path(cfg.loss_log) if cfg.loss_log else None
    examples = [EncodedExample.from_triple(t, vocab, hp.gen_vocab_size, cfg.max_doc_len) for t in triples]

    if cfg.resume and ckpt.exists():
        state = training.load_checkpoint(ckpt)
        stored_cfg = {k: v for k, v in asdict(state.config).items() if k != "epochs"}
        wanted_cfg = {k: v for k, v in asdict(tcfg).items() if k != "epochs"}
        diff = _config_diff(state.params.hp.to_dict(), hp.to_dict()) + _config_diff(stored_cfg, wanted_cfg)
        if state.vocab != vocab:
            diff.append(f"  vocab_sha256: checkpoint={state.vocab.fingerprint()} requested={vocab.fingerprint()}")
        if diff:
            raise UsageError("checkpoint does not match the requested configuration:\n" + "\n".join(diff))
        state.config = tcfg
        for path in (loss_log, Path(cfg.val_log) if cfg.val_log else None):
            if path:
                _trim_loss_log(path, state.step)
        log.info("resumed from %s at epoch %d, step %d", ckpt, state.epoch, state.step)
    else:
        emb = None
        if cfg.embeddings:
            _require(cfg, existing=["embeddings"])
            emb = init_embeddings(vocab, cfg.embeddings, cfg.d_emb, np.random.default_rng(cfg.seed)).matrix.values
        state = training.new_train_state(hp, vocab, examples, tcfg, emb)
        training.save_checkpoint(ckpt, state)
        if loss_log:
            loss_log.write_text("", encoding="utf-8")
        log.info("initialised model: vocab %d, generator vocab %d", vocab.size, hp.gen_vocab_size)

    val_examples = []
    if cfg.validation:
        _require(cfg, existing=["validation"])
        val_examples = [EncodedExample.from_triple(t, vocab, hp.gen_vocab_size, cfg.max_doc_len)
                        for t in dataset.read_triples(cfg.validation)]
    val_log = Path(cfg.val_log) if cfg.val_log else None
    if val_log and not (cfg.resume and val_log.exists()):
        val_log.write_text("", encoding="utf-8")
    log_fh = open(loss_log, "a", encoding="utf-8", newline="\n") if loss_log else None

    def on_batch(entry: training.BatchLog) -> None:
        if not all(np.isfinite([entry.L, entry.L_gen, entry.L_att, entry.L_ptr])):
            raise FloatingPointError(f"non-finite loss at step {entry.step}")
        if log_fh:
            log_fh.write(entry.line() + "\n")
            log_fh.flush()
        log.debug("epoch %d step %d loss %.4f", entry.epoch, entry.step, entry.L)

    def on_checkpoint(st: training.TrainState) -> None:
        training.save_checkpoint(ckpt, st)
        log.info("checkpoint at epoch %d step %d", st.epoch, st.step)
        if val_examples and not st.epoch_order:
            # epoch boundary: report held-out loss, training has no stopping rule of its own
            val = training.mean_loss(st.params, val_examples)
            log.info("epoch %d validation loss %.6f", st.epoch, val)
            if val_log:
                with open(val_log, "a", encoding="utf-8", newline="\n") as fh:
                    fh.write(f"{st.epoch} {st.step} {val!r}\n")

    try:
        training.train(state, examples, cfg.epochs, on_batch, on_checkpoint)
    finally:
        if log_fh:
            log_fh.close()
    return 0


# -- decode / baseline ---------------------------------------------------------


def _load_model(cfg: RunConfig) -> training.TrainState:
    _require(cfg, "checkpoint")
    if not Path(cfg.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {cfg.checkpoint}")
    return training.load_checkpoint(cfg.checkpoint)


def cmd_decode(cfg: RunConfig) -> int:
    _require(cfg, "triples", "output", existing=["triples"])
    state = _load_model(cfg)
    triples = dataset.read_triples(cfg.triples)
    beam = inference.BeamConfig(cfg.beam_width, cfg.max_len)
    decoded, stats = inference.decode_corpus(state.params, state.vocab, triples, beam, cfg.max_doc_len)
    inference.write_decoded(cfg.output, decoded)
    if cfg.stats:
        Path(cfg.stats).write_text(stats.format(), encoding="utf-8")
    if cfg.pointer_log:
        with open(cfg.pointer_log, "w", encoding="utf-8", newline="\n") as fh:
            for d in decoded:
                fh.write(f"{d.query_id}\t{sum(d.hypothesis.pointer_steps)}\t{len(d.hypothesis.pointer_steps)}\n")
    if cfg.attention_dir:
        adir = Path(cfg.attention_dir)
        adir.mkdir(parents=True, exist_ok=True)
        for d in decoded:
            labels = list(d.tokens) + (["<EOS>"] if d.hypothesis.finished else [])
            inference.export_attention(adir / f"{d.query_id}.tsv", labels, d.doc_tokens, d.hypothesis.attention_matrix())
    sys.stderr.write(stats.format())
    return 0


def baseline_summaries(triples: Sequence[dataset.TrainingTriple]) -> list[tuple[str, list[str]]]:
    """First-query-sentence output per doc-query pair, on the full document."""
    pairs = {}
    for t in triples:
        pairs.setdefault(t.query_id, t)
    out = []
    for qid in sorted(pairs, key=lambda q: tuple(int(p) for p in q.split("."))):
        t = pairs[qid]
        out.append((qid, evaluation.first_query_sentence(split_sentences(t.doc_tokens), t.query_tokens)))
    return out


def cmd_baseline(cfg: RunConfig) -> int:
    _require(cfg, "triples", "output", existing=["triples"])
    summaries = baseline_summaries(dataset.read_triples(cfg.triples))
    with open(cfg.output, "w", encoding="utf-8", newline="\n") as fh:
        for qid, tokens in summaries:
            fh.write(f"{qid}\t{' '.join(tokens)}\n")
    stats = inference.length_stats([len(t) for _, t in summaries])
    if cfg.stats:
        Path(cfg.stats).write_text(stats.format(), encoding="utf-8")
    sys.stderr.write(stats.format())
    return 0


# -- evaluate ------------------------------------------------------------------


def _load_references(path: str):
    p = Path(path)
    if p.is_dir():
        return evaluation.read_reference_dir(p)
    return evaluation.reference_set(dataset.read_triples(p))


def cmd_evaluate(cfg: RunConfig) -> int:
    _require(cfg, "references", "system", "report", existing=["references"])
    refs = _load_references(cfg.references)
    if not refs:
        raise UsageError(f"no references in {cfg.references}")
    stem = evaluation.porter_stemmer() if cfg.stem else None
    reports = []
    for spec in cfg.system:
        if "=" not in spec:
            raise UsageError(f"--system expects NAME=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        if not Path(path).is_file():
            raise UsageError(f"system output not found: {path}")
        decoded = inference.read_decoded(path)
        try:
            reports.append(evaluation.evaluate_run(decoded, refs, name=name, stem=stem))
            if cfg.offset_queries:
                reports.append(evaluation.evaluate_run(decoded, refs, offset=True, name=f"{name} (offset)", stem=stem))
        except KeyError as err:
            raise UsageError(f"{name}: {err.args[0]}") from None
    text = []
    for title, fld in (("F1", "f1"), ("Recall", "recall"), ("Precision", "precision")):
        text.append(f"ROUGE {title} (x100)\n" + evaluation.format_report(reports, field=fld))
    if cfg.bootstrap:
        lines = [f"95% bootstrap intervals of F1 ({cfg.bootstrap} resamples, seed {cfg.seed})"]
        for r in reports:
            cells = []
            for m in evaluation.METRICS:
                lo, hi = r.bootstrap_ci(m, resamples=cfg.bootstrap, seed=cfg.seed)
                cells.append(f"{evaluation.METRIC_TITLES[m]} [{100 * lo:.2f}, {100 * hi:.2f}]")
            lines.append(f"{r.name}: " + "  ".join(cells))
        text.append("\n".join(lines) + "\n")
    report = "\n".join(text)
    Path(cfg.report).write_text(report, encoding="utf-8")
    if cfg.pairs_dir:
        pdir = Path(cfg.pairs_dir)
        pdir.mkdir(parents=True, exist_ok=True)
        for r in reports:
            safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in r.name)
            (pdir / f"{safe}.tsv").write_text(evaluation.format_pairs(r), encoding="utf-8")
    sys.stderr.write(report)
    return 0


HANDLERS = {
    "build-data": cmd_build_data,
    "train": cmd_train,
    "decode": cmd_decode,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
}


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qfsum", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", metavar="PATH", help="key=value file; flags override it")
        p.add_argument("--seed", type=int)

    def dims(p):
        for name in ("d_emb", "d_doc", "d_que", "d_dec", "d_att", "d_gen", "vocab_size", "gen_vocab_size"):
            p.add_argument("--" + name.replace("_", "-"), type=int)

    p = sub.add_parser("build-data", help="article corpus -> triple files and stats")
    common(p)
    p.add_argument("--corpus", metavar="PATH", help="articles, one JSON object per line")
    p.add_argument("--out-dir", metavar="DIR")
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--test-fraction", type=float)

    p = sub.add_parser("train", help="train or resume a model")
    common(p)
    dims(p)
    p.add_argument("--triples", metavar="PATH", help="training triples")
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--loss-log", metavar="PATH")
    p.add_argument("--validation", metavar="PATH", help="triples whose mean loss is logged after each epoch")
    p.add_argument("--val-log", metavar="PATH", help="file for the per-epoch validation losses")
    p.add_argument("--embeddings", metavar="PATH", help="pretrained vectors, GloVe text format")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--clip-norm", type=float)
    p.add_argument("--save-every", type=int, help="also checkpoint every N optimizer steps")
    p.add_argument("--init-scale", type=float)
    p.add_argument("--max-doc-len", type=int)
    p.add_argument("--resume", action="store_const", const=True, help="continue from --checkpoint if it exists")

    p = sub.add_parser("decode", help="beam-search summaries for a triple file")
    common(p)
    p.add_argument("--checkpoint", metavar="PATH")
    p.add_argument("--triples", metavar="PATH")
    p.add_argument("--output", metavar="PATH")
    p.add_argument("--stats", metavar="PATH", help="length statistics")
    p.add_argument("--attention-dir", metavar="DIR", help="one attention TSV per query")
    p.add_argument("--pointer-log", metavar="PATH", help="pointer steps per summary")
    p.add_argument("--beam-width", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--max-doc-len", type=int)

    p = sub.add_parser("baseline", help="first sentence containing the query")
    common(p)
    p.add_argument("--triples", metavar="PATH")
    p.add_argument("--output", metavar="PATH")
    p.add_argument("--stats", metavar="PATH")

    p = sub.add_parser("evaluate", help="ROUGE report for one or more systems")
    common(p)
    p.add_argument("--references", metavar="PATH", help="triple file or reference directory")
    p.add_argument("--system", metavar="NAME=PATH", action="append", help="repeatable")
    p.add_argument("--report", metavar="PATH")
    p.add_argument("--pairs-dir", metavar="DIR", help="per-pair score TSVs")
    p.add_argument("--offset-queries", action="store_const", const=True, help="add offset-query rows")
    p.add_argument("--stem", action="store_const", const=True, help="Porter stemming (needs nltk)")
    p.add_argument("--bootstrap", type=int, metavar="N", help="bootstrap resamples for confidence intervals")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
        force=True,
    )
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        cfg = resolve_config(args.config, overrides)
        return HANDLERS[args.command](cfg)
    except (UsageError, ValueError, KeyError, OSError, FloatingPointError, RuntimeError) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        log.error("%s", msg)
        return 2 if isinstance(err, UsageError) else 1


if __name__ == "__main__":
    sys.exit(main())
