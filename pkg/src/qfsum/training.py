"""Supervised losses, Adam, minibatch training and checkpoints."""

from __future__ import annotations

import base64
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numgrad as ng
from .model import EncodedExample, ForwardPass, HyperParams, ModelParams, forward_teacher_forced
from .textprep import Vocabulary

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "qfsum-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LossBreakdown:
    """Loss components in nats; ``L`` stays on the tape for backward."""

    L: ng.DiffArray
    L_gen: float
    L_att: float
    L_ptr: float
    N_S: int

    @property
    def value(self) -> float:
        return float(self.L.values)


def _sum(terms: list[ng.DiffArray]) -> ng.DiffArray:
    if not terms:
        return ng.DiffArray(0.0)
    return ng.total(ng.stack(terms))


def compute_loss(fp: ForwardPass | Sequence, example: EncodedExample) -> LossBreakdown:
    """Pointer, generator and supervised-attention losses, normalised by N_S.

    L_ptr sums the binary cross-entropy of the switch at every step, L_gen the
    generator negative log-likelihood where the pointer is off, and L_att the
    negative log attention on the pointed document position where it is on.
    """
    steps = fp.steps if isinstance(fp, ForwardPass) else list(fp)
    n = len(example.summary_ids)
    if len(steps) != n:
        raise ValueError(f"{len(steps)} decoder steps for a summary of length {n}")
    gen_terms, att_terms, ptr_terms = [], [], []
    for step, x, i_star, target in zip(steps, example.x_ptr, example.pointed_index, example.gen_targets):
        if x:
            assert i_star >= 0, "pointer position without a target index"
            ptr_terms.append(ng.log_sigmoid(step.ptr_logit))
            att_terms.append(ng.take(ng.log_softmax(step.e_t), int(i_star)))
        else:
            ptr_terms.append(ng.log_sigmoid(ng.neg(step.ptr_logit)))
            gen_terms.append(ng.take(step.log_p_gen, int(target)))
    L_gen, L_att, L_ptr = (ng.neg(_sum(t)) for t in (gen_terms, att_terms, ptr_terms))
    L = ng.scale(ng.add(ng.add(L_gen, L_att), L_ptr), 1.0 / n)
    return LossBreakdown(L, float(L_gen.values), float(L_att.values), float(L_ptr.values), n)


def example_loss(params: ModelParams, example: EncodedExample) -> LossBreakdown:
    return compute_loss(forward_teacher_forced(params, example), example)


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, named: Sequence[tuple[str, ng.DiffArray]]) -> None:
        for name, p in named:
            if name not in self.m:
                self.m[name] = np.zeros_like(p.values)
                self.v[name] = np.zeros_like(p.values)


def adam_step(opt: OptimizerState, named: Sequence[tuple[str, ng.DiffArray]], clip: float | None = None) -> None:
    """Bias-corrected Adam update from each parameter's ``grad``; grads are zeroed after."""
    opt.ensure(named)
    for name, p in named:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    if clip is not None:
        norm = np.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in named))
        if norm > clip:
            for _, p in named:
                p.grad *= clip / norm
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for name, p in named:
        g = p.grad
        m, v = opt.m[name], opt.v[name]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p.values -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
        p.zero_grad()


@dataclass
class TrainConfig:
    """Training settings; ``save_every`` counts optimizer steps (0 = epoch ends only)."""

    batch_size: int = 30
    max_doc_len: int = 800
    epochs: int = 1
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = None
    save_every: int = 0
    init_scale: float = 0.08


def make_batches(examples: Sequence[EncodedExample], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Fixed batch composition: shuffle once, then group by document length."""
    order = rng.permutation(len(examples))
    order = sorted(order.tolist(), key=lambda i: len(examples[i].doc_ids))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


@dataclass
class TrainState:
    """Everything needed to continue training exactly where it stopped."""

    params: ModelParams
    opt: OptimizerState
    vocab: Vocabulary
    gen_vocab_size: int
    config: TrainConfig
    batches: list[list[int]]
    rng: np.random.Generator
    epoch: int = 0
    epoch_order: list[int] = field(default_factory=list)
    batch_pos: int = 0

    @property
    def step(self) -> int:
        return self.opt.step


def new_train_state(
    hp: HyperParams,
    vocab: Vocabulary,
    examples: Sequence[EncodedExample],
    config: TrainConfig,
    embedding: np.ndarray | None = None,
) -> TrainState:
    rng = np.random.default_rng(config.seed)
    params = ModelParams.initialize(hp, rng, embedding, config.init_scale)
    opt = OptimizerState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.adam_eps)
    opt.ensure(params.named_parameters())
    batches = make_batches(examples, config.batch_size, rng)
    return TrainState(params, opt, vocab, hp.gen_vocab_size, config, batches, rng)


@dataclass
class BatchLog:
    epoch: int  # 1-based, matching the validation log
    step: int
    L: float
    L_gen: float
    L_att: float
    L_ptr: float

    def line(self) -> str:
        return f"{self.epoch} {self.step} {self.L!r} {self.L_gen!r} {self.L_att!r} {self.L_ptr!r}"


def train_batch(params: ModelParams, batch: Sequence[EncodedExample]) -> tuple[float, float, float, float]:
    """Accumulate gradients of the batch-mean loss; return mean components.

    Each example is recorded on its own tape and back-propagated in index
    order so the summation order is fixed.
    """
    scale = 1.0 / len(batch)
    tot = np.zeros(4)
    for ex in batch:
        with ng.Tape() as tape:
            lb = example_loss(params, ex)
            scaled = ng.scale(lb.L, scale)
        tape.backward(scaled)
        tot += (lb.value, lb.L_gen / lb.N_S, lb.L_att / lb.N_S, lb.L_ptr / lb.N_S)
    return tuple((tot * scale).tolist())


def train(
    state: TrainState,
    examples: Sequence[EncodedExample],
    epochs: int,
    on_batch: Callable[[BatchLog], None] | None = None,
    on_checkpoint: Callable[[TrainState], None] | None = None,
) -> list[BatchLog]:
    """Train until ``state.epoch == epochs``.

    Batches keep their composition across epochs; only the order in which
    they are visited is reshuffled at the start of every epoch.
    """
    logs = []
    named = state.params.named_parameters()
    while state.epoch < epochs:
        if not state.epoch_order:
            state.epoch_order = state.rng.permutation(len(state.batches)).tolist()
            state.batch_pos = 0
        while state.batch_pos < len(state.epoch_order):
            batch = [examples[i] for i in state.batches[state.epoch_order[state.batch_pos]]]
            L, Lg, La, Lp = train_batch(state.params, batch)
            adam_step(state.opt, named, state.config.clip_norm)
            state.batch_pos += 1
            entry = BatchLog(state.epoch + 1, state.opt.step, L, Lg, La, Lp)
            logs.append(entry)
            if on_batch:
                on_batch(entry)
            if on_checkpoint and state.config.save_every and state.opt.step % state.config.save_every == 0:
                on_checkpoint(state)
        state.epoch += 1
        state.epoch_order = []
        state.batch_pos = 0
        if on_checkpoint:
            on_checkpoint(state)
    return logs


def mean_loss(params: ModelParams, examples: Sequence[EncodedExample]) -> float:
    """Average per-token loss without recording gradients."""
    if not examples:
        return 0.0
    return float(np.mean([example_loss(params, ex).value for ex in examples]))


# -- checkpoints ---------------------------------------------------------------


def _encode_array(a: np.ndarray) -> dict:
    # asarray keeps 0-d arrays 0-d; ascontiguousarray would promote them
    a = np.asarray(a, dtype="<f8")
    return {"shape": list(a.shape), "dtype": "<f8", "data": base64.b64encode(a.tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    if obj["dtype"] != "<f8":
        raise ValueError(f"unsupported dtype {obj['dtype']}")
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    """Line-JSON container: one header line, then one line per array.

    Arrays are little-endian float64, base64 encoded, so a load/save cycle
    reproduces the file byte for byte.
    """
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "endianness": "little",
        "hyperparams": state.params.hp.to_dict(),
        "config": asdict(state.config),
        "vocab": state.vocab.id_to_token,
        "vocab_sha256": state.vocab.fingerprint(),
        "gen_vocab_size": state.gen_vocab_size,
        "epoch": state.epoch,
        "batch_pos": state.batch_pos,
        "epoch_order": state.epoch_order,
        "batches": state.batches,
        "rng_state": state.rng.bit_generator.state,
        "adam": {"lr": state.opt.lr, "beta1": state.opt.beta1, "beta2": state.opt.beta2, "eps": state.opt.eps, "step": state.opt.step},
    }
    lines = [json.dumps(header, sort_keys=True, separators=(",", ":"))]
    for name, p in state.params.named_parameters():
        for kind, arr in (("param", p.values), ("adam_m", state.opt.m[name]), ("adam_v", state.opt.v[name])):
            lines.append(json.dumps({"kind": kind, "name": name, **_encode_array(arr)}, sort_keys=True, separators=(",", ":")))
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> TrainState:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        if header.get("endianness") != "little":
            raise ValueError(f"{path}: unsupported endianness")
        arrays: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                arrays[obj["kind"]][obj["name"]] = _decode_array(obj)
    hp = HyperParams(**header["hyperparams"])
    vocab = Vocabulary(header["vocab"][3:])
    if vocab.fingerprint() != header["vocab_sha256"]:
        raise ValueError(f"{path}: vocabulary hash mismatch")
    params = ModelParams.initialize(hp, np.random.default_rng(0), arrays["param"]["embedding"])
    params.load_arrays(arrays["param"])
    a = header["adam"]
    opt = OptimizerState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["step"], arrays["adam_m"], arrays["adam_v"])
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    cfg_fields = {f.name for f in fields(TrainConfig)}
    config = TrainConfig(**{k: v for k, v in header["config"].items() if k in cfg_fields})
    return TrainState(
        params=params,
        opt=opt,
        vocab=vocab,
        gen_vocab_size=header["gen_vocab_size"],
        config=config,
        batches=header["batches"],
        rng=rng,
        epoch=header["epoch"],
        epoch_order=header["epoch_order"],
        batch_pos=header["batch_pos"],
    )


# -- config files --------------------------------------------------------------


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out

