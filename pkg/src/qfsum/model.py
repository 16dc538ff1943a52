"""Query-conditioned pointer-generator network.

A bidirectional GRU reads the document, a unidirectional GRU reads the query,
and a GRU decoder attends over the document states at every step. Each step
produces a generator distribution over the generator vocabulary and a pointer
switch probability; when the switch exceeds 0.5 the most attended document
token is copied instead of the generator's choice.

All vectors are 1-D :class:`~qfsum.numgrad.DiffArray` objects, matrices are
``(d_out, d_in)`` so that ``W @ x`` is a forward application.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import numgrad as ng
from .numgrad import DiffArray
from .textprep import GO_ID, UNK_ID, Vocabulary

INIT_SCALE = 0.08


@dataclass
class HyperParams:
    d_emb: int = 100
    d_doc: int = 512  # per direction
    d_que: int = 256
    d_dec: int = 512
    d_att: int = 256
    d_gen: int = 256
    vocab_size: int = 150_000
    gen_vocab_size: int = 20_000

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")
        if self.gen_vocab_size > self.vocab_size:
            raise ValueError("gen_vocab_size cannot exceed vocab_size")

    def to_dict(self) -> dict:
        return asdict(self)


def _uniform(rng, scale, *shape) -> DiffArray:
    return DiffArray(rng.uniform(-scale, scale, size=shape), requires_grad=True)


def _zeros(*shape) -> DiffArray:
    return DiffArray(np.zeros(shape), requires_grad=True)


@dataclass
class GRUCellParams:
    W_r: DiffArray
    W_z: DiffArray
    W_h: DiffArray
    b_r: DiffArray
    b_z: DiffArray
    b_h: DiffArray

    @classmethod
    def init(cls, d_in: int, d_out: int, rng: np.random.Generator, scale: float = INIT_SCALE) -> "GRUCellParams":
        return cls(
            _uniform(rng, scale, d_out, d_in + d_out),
            _uniform(rng, scale, d_out, d_in + d_out),
            _uniform(rng, scale, d_out, d_in + d_out),
            _zeros(d_out),
            _zeros(d_out),
            _zeros(d_out),
        )

    @property
    def d_out(self) -> int:
        return self.W_r.shape[0]

    @property
    def d_in(self) -> int:
        return self.W_r.shape[1] - self.W_r.shape[0]


@dataclass
class AttentionParams:
    W_att: DiffArray  # (d_att, 2*d_doc + d_dec + d_emb + d_que)
    v_att: DiffArray
    b_att: DiffArray


@dataclass
class GeneratorParams:
    W_gen1: DiffArray  # (d_gen, d_dec + 2*d_doc)
    b_gen1: DiffArray
    W_gen2: DiffArray  # (|V_gen|, d_gen)
    b_gen2: DiffArray


@dataclass
class PointerParams:
    v_ptr: DiffArray  # d_dec + d_emb + 2*d_doc
    b_ptr: DiffArray  # 0-d


@dataclass
class ModelParams:
    hp: HyperParams
    embedding: DiffArray
    enc_fwd: GRUCellParams
    enc_bwd: GRUCellParams
    query_enc: GRUCellParams
    decoder: GRUCellParams
    W_init: DiffArray  # (d_dec, 2*d_doc): encoder final state -> s_0
    b_init: DiffArray
    attention: AttentionParams
    generator: GeneratorParams
    pointer: PointerParams

    @classmethod
    def initialize(
        cls,
        hp: HyperParams,
        rng: np.random.Generator,
        embedding: np.ndarray | None = None,
        init_scale: float = INIT_SCALE,
    ) -> "ModelParams":
        """Uniform(-init_scale, init_scale) matrices and zero biases."""
        d2 = 2 * hp.d_doc
        a = init_scale
        if embedding is None:
            emb = DiffArray(rng.normal(0.0, 0.1, size=(hp.vocab_size, hp.d_emb)), requires_grad=True)
        else:
            if embedding.shape != (hp.vocab_size, hp.d_emb):
                raise ValueError(f"embedding shape {embedding.shape} != {(hp.vocab_size, hp.d_emb)}")
            emb = DiffArray(embedding, requires_grad=True)
        params = cls(
            hp=hp,
            embedding=emb,
            enc_fwd=GRUCellParams.init(hp.d_emb, hp.d_doc, rng, a),
            enc_bwd=GRUCellParams.init(hp.d_emb, hp.d_doc, rng, a),
            query_enc=GRUCellParams.init(hp.d_emb, hp.d_que, rng, a),
            decoder=GRUCellParams.init(d2 + hp.d_que + hp.d_emb, hp.d_dec, rng, a),
            W_init=_uniform(rng, a, hp.d_dec, d2),
            b_init=_zeros(hp.d_dec),
            attention=AttentionParams(
                _uniform(rng, a, hp.d_att, d2 + hp.d_dec + hp.d_emb + hp.d_que),
                _uniform(rng, a, hp.d_att),
                _zeros(hp.d_att),
            ),
            generator=GeneratorParams(
                _uniform(rng, a, hp.d_gen, hp.d_dec + d2),
                _zeros(hp.d_gen),
                _uniform(rng, a, hp.gen_vocab_size, hp.d_gen),
                _zeros(hp.gen_vocab_size),
            ),
            pointer=PointerParams(_uniform(rng, a, hp.d_dec + hp.d_emb + d2), _zeros()),
        )
        params.check_shapes()
        return params

    def named_parameters(self) -> list[tuple[str, DiffArray]]:
        out = [("embedding", self.embedding)]
        for group in ("enc_fwd", "enc_bwd", "query_enc", "decoder"):
            cell = getattr(self, group)
            out.extend((f"{group}.{f.name}", getattr(cell, f.name)) for f in fields(cell))
        out += [("W_init", self.W_init), ("b_init", self.b_init)]
        for group in ("attention", "generator", "pointer"):
            obj = getattr(self, group)
            out.extend((f"{group}.{f.name}", getattr(obj, f.name)) for f in fields(obj))
        return out

    def zero_grads(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def check_shapes(self) -> None:
        hp, d2 = self.hp, 2 * self.hp.d_doc
        expected = {
            "embedding": (hp.vocab_size, hp.d_emb),
            "W_init": (hp.d_dec, d2),
            "b_init": (hp.d_dec,),
            "attention.W_att": (hp.d_att, d2 + hp.d_dec + hp.d_emb + hp.d_que),
            "attention.v_att": (hp.d_att,),
            "attention.b_att": (hp.d_att,),
            "generator.W_gen1": (hp.d_gen, hp.d_dec + d2),
            "generator.b_gen1": (hp.d_gen,),
            "generator.W_gen2": (hp.gen_vocab_size, hp.d_gen),
            "generator.b_gen2": (hp.gen_vocab_size,),
            "pointer.v_ptr": (hp.d_dec + hp.d_emb + d2,),
            "pointer.b_ptr": (),
        }
        for group, d_in, d_out in (
            ("enc_fwd", hp.d_emb, hp.d_doc),
            ("enc_bwd", hp.d_emb, hp.d_doc),
            ("query_enc", hp.d_emb, hp.d_que),
            ("decoder", d2 + hp.d_que + hp.d_emb, hp.d_dec),
        ):
            for w in ("W_r", "W_z", "W_h"):
                expected[f"{group}.{w}"] = (d_out, d_in + d_out)
            for b in ("b_r", "b_z", "b_h"):
                expected[f"{group}.{b}"] = (d_out,)
        for name, p in self.named_parameters():
            if p.shape != expected[name]:
                raise ng.DimensionError(f"{name}: shape {p.shape}, expected {expected[name]}")

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: p.values for name, p in self.named_parameters()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if arrays[name].shape != p.shape:
                raise ng.DimensionError(f"{name}: stored shape {arrays[name].shape} != {p.shape}")
            p.values[...] = arrays[name]


def gru_step(cell: GRUCellParams, h_prev: DiffArray, x: DiffArray) -> DiffArray:
    """One GRU update ``h = GRU(h_prev, x)``.

    r = sigma(W_r [x, h_prev] + b_r)
    z = sigma(W_z [x, h_prev] + b_z)
    h' = tanh(W_h [x, r * h_prev] + b_h)
    h = z * h_prev + (1 - z) * h'
    """
    if h_prev.shape != (cell.d_out,) or x.shape != (cell.d_in,):
        raise ng.DimensionError(
            f"gru_step: cell expects x {(cell.d_in,)}, h {(cell.d_out,)}; got {x.shape}, {h_prev.shape}"
        )
    xh = ng.concat([x, h_prev])
    r = ng.sigmoid(ng.add(ng.matmul(cell.W_r, xh), cell.b_r))
    z = ng.sigmoid(ng.add(ng.matmul(cell.W_z, xh), cell.b_z))
    h_cand = ng.tanh(ng.add(ng.matmul(cell.W_h, ng.concat([x, ng.mul(r, h_prev)])), cell.b_h))
    return ng.add(ng.mul(z, h_prev), ng.mul(ng.oneminus(z), h_cand))


def embed(params: ModelParams, token_id: int) -> DiffArray:
    if not 0 <= token_id < params.embedding.shape[0]:
        raise ValueError(f"token id {token_id} outside the input vocabulary")
    return ng.take(params.embedding, int(token_id))


@dataclass
class EncoderStates:
    """Per-position document states ``h_i = [fwd_i, bwd_i]`` plus caches."""

    states: list[DiffArray]
    final: DiffArray  # [last forward state, last backward state]
    doc_ids: list[int]
    _matrix: DiffArray | None = field(default=None, repr=False)
    _att_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.states)

    @property
    def matrix(self) -> DiffArray:
        if self._matrix is None:
            self._matrix = ng.stack(self.states)
        return self._matrix


def encode_document(params: ModelParams, doc_ids: Sequence[int]) -> EncoderStates:
    if len(doc_ids) == 0:
        raise ValueError("cannot encode an empty document")
    xs = [embed(params, i) for i in doc_ids]
    d = params.hp.d_doc
    h = DiffArray(np.zeros(d))
    fwd = []
    for x in xs:
        h = gru_step(params.enc_fwd, h, x)
        fwd.append(h)
    h = DiffArray(np.zeros(d))
    bwd = []
    for x in reversed(xs):
        h = gru_step(params.enc_bwd, h, x)
        bwd.append(h)
    bwd.reverse()
    states = [ng.concat([f, b]) for f, b in zip(fwd, bwd)]
    # bwd[0] is the backward reader's state after the whole reversed document
    final = ng.concat([fwd[-1], bwd[0]])
    return EncoderStates(states, final, list(doc_ids))


def encode_query(params: ModelParams, query_ids: Sequence[int]) -> DiffArray:
    if len(query_ids) == 0:
        raise ValueError("cannot encode an empty query")
    h = DiffArray(np.zeros(params.hp.d_que))
    for i in query_ids:
        h = gru_step(params.query_enc, h, embed(params, i))
    return h


def initial_state(params: ModelParams, enc: EncoderStates) -> DiffArray:
    return ng.add(ng.matmul(params.W_init, enc.final), params.b_init)


def attend(
    att: AttentionParams, enc: EncoderStates, s_prev: DiffArray, y_prev_emb: DiffArray, q: DiffArray
) -> tuple[DiffArray, DiffArray, DiffArray]:
    """Context vector, attention weights and raw scores for one decoder step.

    The score ``v^T tanh(W [h_i, s, x, q] + b)`` is evaluated for all
    positions at once by splitting ``W`` into the block acting on ``h_i``
    (applied once per document and cached) and the block acting on the rest.
    """
    n_h = enc.states[0].shape[0]
    width = n_h + s_prev.shape[0] + y_prev_emb.shape[0] + q.shape[0]
    if att.W_att.shape[1] != width:
        raise ng.DimensionError(f"attend: W_att has {att.W_att.shape[1]} columns, inputs give {width}")
    key = id(att.W_att)
    if key not in enc._att_cache:
        W_h = ng.take(att.W_att, (slice(None), slice(0, n_h)))
        W_rest = ng.take(att.W_att, (slice(None), slice(n_h, None)))
        H_proj = ng.matmul(enc.matrix, ng.transpose(W_h))
        enc._att_cache[key] = (W_rest, H_proj)
    W_rest, H_proj = enc._att_cache[key]
    u = ng.add(ng.matmul(W_rest, ng.concat([s_prev, y_prev_emb, q])), att.b_att)
    e = ng.matmul(ng.tanh(ng.add(H_proj, ng.repeat_rows(u, len(enc)))), att.v_att)
    alpha = ng.softmax(e)
    c = ng.matmul(alpha, enc.matrix)
    return c, alpha, e


def generator_logits(gen: GeneratorParams, s_t: DiffArray, c_t: DiffArray) -> DiffArray:
    hidden = ng.add(ng.matmul(gen.W_gen1, ng.concat([s_t, c_t])), gen.b_gen1)
    return ng.add(ng.matmul(gen.W_gen2, hidden), gen.b_gen2)


def pointer_logit(ptr: PointerParams, s_t: DiffArray, y_prev_emb: DiffArray, c_t: DiffArray) -> DiffArray:
    return ng.add(ng.matmul(ptr.v_ptr, ng.concat([s_t, y_prev_emb, c_t])), ptr.b_ptr)


@dataclass
class DecoderStep:
    s_t: DiffArray
    c_t: DiffArray
    alpha_t: DiffArray
    e_t: DiffArray
    z_t: DiffArray
    log_p_gen: DiffArray
    ptr_logit: DiffArray
    p_gen: np.ndarray
    p_ptr: float
    y_gen: int
    i_prime: int
    y_ptr: int
    y_t: int

    @property
    def pointer_used(self) -> bool:
        return self.p_ptr > 0.5


def decoder_step(
    params: ModelParams, s_prev: DiffArray, y_prev_id: int, q: DiffArray, enc: EncoderStates
) -> DecoderStep:
    """Attend with ``s_prev``, update the decoder GRU, then score outputs."""
    if s_prev.shape != (params.hp.d_dec,):
        raise ng.DimensionError(f"decoder state has shape {s_prev.shape}, expected {(params.hp.d_dec,)}")
    x = embed(params, y_prev_id)
    c, alpha, e = attend(params.attention, enc, s_prev, x, q)
    s = gru_step(params.decoder, s_prev, ng.concat([c, q, x]))
    z = generator_logits(params.generator, s, c)
    log_p_gen = ng.log_softmax(z)
    p_gen = np.exp(log_p_gen.values)
    logit = pointer_logit(params.pointer, s, x, c)
    p_ptr = float(ng.sigmoid(DiffArray(logit.values)).values)
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    y_gen = int(np.argmax(p_gen))
    i_prime = int(np.argmax(alpha.values))
    y_ptr = int(enc.doc_ids[i_prime])
    return DecoderStep(
        s_t=s,
        c_t=c,
        alpha_t=alpha,
        e_t=e,
        z_t=z,
        log_p_gen=log_p_gen,
        ptr_logit=logit,
        p_gen=p_gen,
        p_ptr=p_ptr,
        y_gen=y_gen,
        i_prime=i_prime,
        y_ptr=y_ptr,
        y_t=y_ptr if p_ptr > 0.5 else y_gen,
    )


@dataclass
class EncodedExample:
    """A triple mapped to vocabulary ids, ready for the network."""

    doc_ids: list[int]
    query_ids: list[int]
    summary_ids: list[int]  # ids in V, last one is <EOS>
    gen_targets: list[int]  # ids in V_gen; out-of-V_gen words become <UNK>
    x_ptr: list[int]
    pointed_index: list[int]
    raw_doc_tokens: list[str] = field(default_factory=list)

    @classmethod
    def from_triple(cls, triple, vocab: Vocabulary, gen_vocab_size: int, max_doc_len: int = 800) -> "EncodedExample":
        from .dataset import truncate

        t = truncate(triple, max_doc_len)
        summary_ids = vocab.encode(t.summary_tokens)
        return cls(
            doc_ids=vocab.encode(t.doc_tokens),
            query_ids=vocab.encode(t.query_tokens),
            summary_ids=summary_ids,
            gen_targets=[i if i < gen_vocab_size else UNK_ID for i in summary_ids],
            x_ptr=list(t.x_ptr),
            pointed_index=list(t.pointed_index),
            raw_doc_tokens=list(t.raw_doc_tokens),
        )


@dataclass
class ForwardPass:
    steps: list[DecoderStep]
    enc: EncoderStates
    q: DiffArray

    def attention_matrix(self) -> np.ndarray:
        return np.stack([s.alpha_t.values for s in self.steps])


def forward_teacher_forced(params: ModelParams, example: EncodedExample) -> ForwardPass:
    """Unroll the decoder over the reference summary, feeding gold tokens."""
    enc = encode_document(params, example.doc_ids)
    q = encode_query(params, example.query_ids)
    s = initial_state(params, enc)
    prev = GO_ID
    steps = []
    for target in example.summary_ids:
        step = decoder_step(params, s, prev, q, enc)
        steps.append(step)
        s, prev = step.s_t, target
    return ForwardPass(steps, enc, q)
