import dataclasses
import math

import numpy as np
import pytest

from qfsum.model import EncodedExample, forward_teacher_forced
from qfsum.numgrad import DiffArray
from qfsum.training import (
    BatchLog,
    OptimizerState,
    TrainConfig,
    adam_step,
    compute_loss,
    example_loss,
    load_checkpoint,
    make_batches,
    mean_loss,
    new_train_state,
    read_config,
    save_checkpoint,
    train,
    train_batch,
)

from conftest import overfit_hyperparams, random_model, synthetic_examples
from oracles import loss_ref


def _zero(params):
    for _, p in params.named_parameters():
        p.values[...] = 0.0
    return params


def _example(doc, query, summary, x_ptr=None, pointed=None, gen_targets=None):
    n = len(summary)
    return EncodedExample(list(doc), list(query), list(summary), list(gen_targets or summary),
                          list(x_ptr or [0] * n), list(pointed or [-1] * n))


@pytest.fixture(scope="module")
def tiny():
    return synthetic_examples(5, 2, 0)


class TestComputeLoss:
    def test_pointer_step_at_half(self):
        # p_ptr = 0.5 from a zero pointer, alpha = 0.5 over two positions
        params = _zero(random_model(0))
        ex = _example([4, 5], [6], [4], x_ptr=[1], pointed=[0])
        lb = example_loss(params, ex)
        assert lb.L_ptr == pytest.approx(math.log(2), abs=1e-15)
        assert lb.L_att == pytest.approx(math.log(2), abs=1e-15)
        assert lb.L_gen == 0.0
        assert lb.value == pytest.approx(2 * math.log(2), abs=1e-15)

    def test_certain_generator(self):
        params = _zero(random_model(0))
        params.generator.b_gen2.values[5] = 800.0
        params.pointer.b_ptr.values[...] = -1.3
        lb = example_loss(params, _example([4, 5], [6], [5]))
        assert lb.L_gen == 0.0 and lb.L_att == 0.0
        assert lb.L_ptr == pytest.approx(-math.log(1 - 1 / (1 + math.exp(1.3))), abs=1e-14)

    def test_zero_model_uniform_generator(self):
        params = _zero(random_model(0))
        lb = example_loss(params, _example([4, 5, 6], [7], [3, 5, 1]))
        assert lb.L_gen / 3 == pytest.approx(math.log(8), abs=1e-14)
        assert lb.value == pytest.approx(math.log(8) + math.log(2), abs=1e-14)

    def test_components_non_negative_and_normalised(self):
        for seed in range(10):
            params = random_model(seed, sigma=1.0)
            ex = _example([3, 4, 5, 6], [7, 8], [4, 9, 1], x_ptr=[1, 0, 0], pointed=[1, -1, -1],
                          gen_targets=[4, 2, 1])
            lb = example_loss(params, ex)
            assert min(lb.L_gen, lb.L_att, lb.L_ptr) >= 0
            assert lb.value == pytest.approx((lb.L_gen + lb.L_att + lb.L_ptr) / 3, rel=1e-15)

    def test_matches_straight_line_sums(self):
        params = random_model(3)
        ex = _example([3, 4, 5, 6, 9], [7, 8], [5, 11, 3, 1], x_ptr=[1, 0, 1, 0], pointed=[2, -1, 0, -1],
                      gen_targets=[5, 2, 3, 1])
        lb = example_loss(params, ex)
        ref = loss_ref(params.state_arrays(), 4, ex.doc_ids, ex.query_ids, ex.summary_ids,
                       ex.gen_targets, ex.x_ptr, ex.pointed_index)
        np.testing.assert_allclose([lb.value, lb.L_gen, lb.L_att, lb.L_ptr], ref, rtol=0, atol=1e-12)

    def test_length_mismatch(self):
        params = random_model(0)
        ex = _example([3, 4], [5], [6, 1])
        fp = forward_teacher_forced(params, ex)
        with pytest.raises(ValueError):
            compute_loss(fp.steps[:1], ex)

    def test_masking(self):
        params = random_model(4)
        ex = _example([3, 4, 5], [6], [4, 7, 1], x_ptr=[1, 0, 0], pointed=[1, -1, -1])
        steps = forward_teacher_forced(params, ex).steps
        base = compute_loss(steps, ex)
        rng = np.random.default_rng(0)
        # scramble the generator output where the pointer is on
        scrambled_gen = list(steps)
        scrambled_gen[0] = dataclasses.replace(steps[0], log_p_gen=DiffArray(np.log(rng.dirichlet(np.ones(8)))))
        assert compute_loss(scrambled_gen, ex).L_gen == base.L_gen
        # and the attention scores where it is off
        scrambled_att = list(steps)
        for t in (1, 2):
            scrambled_att[t] = dataclasses.replace(steps[t], e_t=DiffArray(rng.normal(size=3)))
        assert compute_loss(scrambled_att, ex).L_att == base.L_att


class TestAdam:
    def _param(self, values, grad):
        p = DiffArray(np.array(values, dtype=float), requires_grad=True)
        p.grad[...] = grad
        return p

    def test_first_step_closed_form(self):
        g = np.array([0.3, -2.0, 1e-3])
        p = self._param([1.0, 1.0, 1.0], g)
        opt = OptimizerState(lr=0.01)
        adam_step(opt, [("p", p)])
        np.testing.assert_allclose(p.values, 1.0 - 0.01 * g / (np.abs(g) + 1e-8), rtol=0, atol=1e-15)
        assert opt.step == 1
        np.testing.assert_array_equal(p.grad, 0.0)

    def test_zero_gradient_fresh_state(self):
        p = self._param([1.0, -2.0], [0.0, 0.0])
        adam_step(OptimizerState(), [("p", p)])
        np.testing.assert_array_equal(p.values, [1.0, -2.0])

    def test_zero_gradient_decays_moments(self):
        p = self._param([1.0, -2.0], [0.5, -0.5])
        opt = OptimizerState()
        adam_step(opt, [("p", p)])
        m, v = opt.m["p"].copy(), opt.v["p"].copy()
        adam_step(opt, [("p", p)])
        np.testing.assert_allclose(opt.m["p"], 0.9 * m, rtol=1e-15)
        np.testing.assert_allclose(opt.v["p"], 0.999 * v, rtol=1e-15)

    def test_constant_gradient_limit(self):
        p = self._param([0.0], [0.0])
        opt = OptimizerState(lr=1e-3)
        prev = 0.0
        for _ in range(2000):
            p.grad[...] = 0.7
            adam_step(opt, [("p", p)])
            delta, prev = p.values[0] - prev, p.values[0]
        assert delta == pytest.approx(-1e-3, rel=1e-6)

    def test_nan_names_parameter(self):
        good = self._param([1.0], [0.1])
        bad = self._param([1.0, 2.0], [0.1, np.nan])
        with pytest.raises(FloatingPointError, match="decoder.W_h"):
            adam_step(OptimizerState(), [("embedding", good), ("decoder.W_h", bad)])
        assert good.values[0] == 1.0

    def test_clipping(self):
        p = self._param([0.0, 0.0], [30.0, 40.0])
        opt = OptimizerState(lr=1.0, beta1=0.0, beta2=0.0)
        adam_step(opt, [("p", p)], clip=5.0)
        np.testing.assert_allclose(opt.m["p"], [3.0, 4.0])


class TestBatching:
    def test_batch_of_one(self, tiny):
        _, v, ex = tiny
        params = random_model(0, overfit_hyperparams(v.size))
        L, *_ = train_batch(params, [ex[0]])
        assert L == example_loss(params, ex[0]).value

    def test_batch_gradient_is_mean(self, tiny):
        _, v, ex = tiny
        params = random_model(1, overfit_hyperparams(v.size), sigma=0.1)
        train_batch(params, ex[:3])
        batched = params.generator.W_gen2.grad.copy()
        params.zero_grads()
        manual = np.zeros_like(batched)
        for e in ex[:3]:
            train_batch(params, [e])
            manual += params.generator.W_gen2.grad / 3
            params.zero_grads()
        np.testing.assert_allclose(batched, manual, rtol=1e-12, atol=1e-15)

    def test_fixed_composition(self, tiny):
        _, _, ex = tiny
        batches = make_batches(ex, 3, np.random.default_rng(0))
        assert sorted(i for b in batches for i in b) == list(range(len(ex)))
        assert [len(b) for b in batches] == [3, 3, 3, 1]

    def test_composition_kept_order_reshuffled(self, tiny):
        _, v, ex = tiny
        state = new_train_state(overfit_hyperparams(v.size), v, ex, TrainConfig(batch_size=2, seed=2))
        batches = [list(b) for b in state.batches]
        orders = {}
        train(state, ex, 4, on_batch=lambda e: orders.setdefault(e.epoch, list(state.epoch_order)))
        assert state.batches == batches
        assert all(sorted(o) == list(range(len(batches))) for o in orders.values())
        assert len({tuple(o) for o in orders.values()}) > 1

    def test_loss_log_line(self):
        entry = BatchLog(0, 3, 1.5, 0.25, 0.125, 0.1)
        assert entry.line() == "0 3 1.5 0.25 0.125 0.1"


class TestTrainLoop:
    def _run(self, data, epochs, seed=0, **kw):
        _, v, ex = data
        cfg = TrainConfig(batch_size=5, seed=seed, **kw)
        state = new_train_state(overfit_hyperparams(v.size), v, ex, cfg)
        return state, train(state, ex, epochs)

    def test_smoothed_loss_decreases(self, tiny):
        _, logs = self._run(tiny, 50)
        per_epoch = np.array([np.mean([l.L for l in logs if l.epoch == e]) for e in range(1, 51)])
        smooth = np.convolve(per_epoch, np.ones(5) / 5, mode="valid")
        assert smooth[-1] < smooth[0]
        plateau = longest = 0
        for a, b in zip(smooth, smooth[1:]):
            plateau = plateau + 1 if b >= a else 0
            longest = max(longest, plateau)
        assert longest <= 5

    def test_same_seed_same_log(self, tiny):
        _, a = self._run(tiny, 3)
        _, b = self._run(tiny, 3)
        assert [l.line() for l in a] == [l.line() for l in b]

    def test_different_seed_differs(self, tiny):
        _, a = self._run(tiny, 1, seed=0)
        _, b = self._run(tiny, 1, seed=1)
        assert [l.line() for l in a] != [l.line() for l in b]

    def test_steps_and_epochs_counted(self, tiny):
        state, logs = self._run(tiny, 2)
        assert state.epoch == 2 and state.step == 4 == len(logs)
        assert [l.step for l in logs] == [1, 2, 3, 4]
        assert [l.epoch for l in logs] == [1, 1, 2, 2]

    def test_mean_loss_does_not_touch_grads(self, tiny):
        state, _ = self._run(tiny, 0)
        mean_loss(state.params, tiny[2][:2])
        for _, p in state.params.named_parameters():
            assert not p.grad.any()

    def test_checkpoint_callback(self, tiny):
        _, v, ex = tiny
        state = new_train_state(overfit_hyperparams(v.size), v, ex, TrainConfig(batch_size=2, save_every=2))
        seen = []
        train(state, ex, 1, on_checkpoint=lambda s: seen.append((s.step, bool(s.epoch_order))))
        assert seen == [(2, True), (4, True), (5, False)]


class TestCheckpoint:
    def test_round_trip_bytes(self, tiny, tmp_path):
        _, v, ex = tiny
        state = new_train_state(overfit_hyperparams(v.size), v, ex, TrainConfig(batch_size=3, seed=4, save_every=1))
        # stop mid-epoch so optimiser moments and batch position are non-trivial
        def halt(s):
            if s.step == 2:
                save_checkpoint(tmp_path / "a.ckpt", s)
                raise KeyboardInterrupt

        with pytest.raises(KeyboardInterrupt):
            train(state, ex, 1, on_checkpoint=halt)
        loaded = load_checkpoint(tmp_path / "a.ckpt")
        save_checkpoint(tmp_path / "b.ckpt", loaded)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.vocab == v and loaded.step == 2 and loaded.batch_pos == 2
        assert loaded.params.pointer.b_ptr.shape == ()

    def test_resume_mid_epoch_is_bitwise(self, tiny, tmp_path):
        _, v, ex = tiny
        cfg = TrainConfig(batch_size=3, seed=5, save_every=3)
        full = new_train_state(overfit_hyperparams(v.size), v, ex, cfg)
        full_logs = train(full, ex, 3)

        part = new_train_state(overfit_hyperparams(v.size), v, ex, cfg)

        def halt(s):
            if s.step == 6:
                save_checkpoint(tmp_path / "mid.ckpt", s)
                raise KeyboardInterrupt

        with pytest.raises(KeyboardInterrupt):
            train(part, ex, 3, on_checkpoint=halt)
        resumed = load_checkpoint(tmp_path / "mid.ckpt")
        assert resumed.epoch_order  # really mid-epoch
        rest = train(resumed, ex, 3)
        assert [l.line() for l in full_logs[6:]] == [l.line() for l in rest]
        save_checkpoint(tmp_path / "full.ckpt", full)
        save_checkpoint(tmp_path / "resumed.ckpt", resumed)
        assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "resumed.ckpt").read_bytes()

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_text('{"format": "other"}\n')
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_checkpoint(path)


class TestConfigFile:
    def test_key_values_and_comments(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("# model\nd_emb = 16\n\nlr=0.01  # faster\n")
        assert read_config(path) == {"d_emb": "16", "lr": "0.01"}

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("d_emb 16\n")
        with pytest.raises(ValueError, match=":1:"):
            read_config(path)
