"""Batch planning, optimization, gradient checking, fine-tuning."""

import numpy as np
import pytest

from sopipeline import metrics, shards
from sopipeline.bpe import MIN_VOCAB_SIZE, train_bpe
from sopipeline.errors import ChecksumMismatchError, MetricError, TrainingError, UsageError
from sopipeline.mlm import (
    EncoderConfig,
    HeadKind,
    attach_head,
    build_encoder,
    finetune,
    grad_check,
    make_masked_batch,
    plan_batches,
    train_mlm,
)
from sopipeline.mlm.training import MomentumSGD, classifier_loss_sums


class TestPlanBatches:
    def test_paper_scale_example(self):
        plan = plan_batches(500_000, 8, 2048)
        assert plan.accumulation_steps == 31
        assert plan.effective_tokens == 507_904

    def test_exact_fit(self):
        assert plan_batches(2048, 1, 2048).accumulation_steps == 1

    def test_second_example(self):
        assert plan_batches(500_000, 32, 512).accumulation_steps == 31

    def test_minimality_by_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = int(rng.integers(1, 64))
            t = int(rng.integers(1, 4096))
            target = int(rng.integers(1, 2_000_000))
            plan = plan_batches(target, m, t)
            a = plan.accumulation_steps
            assert m * t * a >= target
            assert a == 1 or m * t * (a - 1) < target

    def test_rejects_nonpositive(self):
        with pytest.raises(UsageError):
            plan_batches(0, 8, 128)


def tiny_model(**kw):
    base = dict(n_layers=1, hidden=8, n_heads=2, vocab_size=20, max_positions=8, seed=1)
    base.update(kw)
    return build_encoder(EncoderConfig(**base))


def tiny_batch(vocab_size=20, n=3, T=6):
    seqs = [list(np.random.default_rng(11 + i).integers(6, vocab_size, size=T - i % 2)) for i in range(n)]
    return make_masked_batch(seqs, 0.3, vocab_size=vocab_size, seq_len=T, seed=5)


class TestGradCheck:
    def test_attention_only(self):
        assert grad_check(tiny_model(sublayers=("attention",)), tiny_batch()) < 1e-4

    def test_ffn_only(self):
        assert grad_check(tiny_model(sublayers=("ffn",)), tiny_batch()) < 1e-4

    def test_full_two_layers(self):
        assert grad_check(tiny_model(n_layers=2), tiny_batch()) < 1e-4

    def test_linear_probe(self):
        assert grad_check(tiny_model(n_layers=0), tiny_batch()) < 1e-6

    def test_tied_head(self):
        assert grad_check(tiny_model(tied_head=True), tiny_batch()) < 1e-4

    def test_large_epsilon_exceeds_tolerance(self):
        assert grad_check(tiny_model(), tiny_batch(), epsilon=1e-1) > 1e-4


class TestTrainMlm:
    def _seqs(self, n=16, T=10, vocab=64, seed=0):
        rng = np.random.default_rng(seed)
        return [list(rng.integers(6, vocab, size=T)) for _ in range(n)]

    def test_zero_lr_constant_trace(self):
        # fixed data + fixed masks: with lr=0 nothing changes step to step
        model = tiny_model(vocab_size=64, max_positions=16)
        seqs = self._seqs(n=4)
        plan = plan_batches(4 * 10, 4, 10)
        losses = train_mlm(model, seqs, plan, steps=5, lr=0.0, seed=2, remask_each_step=False)
        assert len(losses) == 5
        assert all(l == losses[0] for l in losses)

    def test_deterministic_given_seed(self):
        results = []
        for _ in range(2):
            model = tiny_model(vocab_size=64, max_positions=16, seed=3)
            plan = plan_batches(40, 4, 10)
            results.append(train_mlm(model, self._seqs(), plan, steps=4, lr=0.05, seed=9))
        assert results[0] == results[1]

    def test_loss_decreases_on_memorization(self):
        model = build_encoder(
            EncoderConfig(n_layers=2, hidden=32, n_heads=4, vocab_size=64, max_positions=16, seed=0)
        )
        seqs = self._seqs(n=8, T=10)
        plan = plan_batches(8 * 10, 8, 10)
        losses = train_mlm(
            model, seqs, plan, steps=120, lr=0.05, seed=4, remask_each_step=False, warmup_steps=20
        )
        assert losses[-1] < losses[0] / 3

    def test_accumulation_equivalence(self):
        # a=4 micro-batches of 8 must equal one 32-sequence batch exactly
        seqs = self._seqs(n=32, T=10)
        updates = []
        for micro, accum in ((8, 4), (32, 1)):
            model = build_encoder(
                EncoderConfig(
                    n_layers=2, hidden=16, n_heads=4, vocab_size=64, max_positions=16,
                    seed=7, dtype="float64",
                )
            )
            plan = plan_batches(micro * 10 * accum, micro, 10)
            assert plan.accumulation_steps == accum
            train_mlm(model, seqs, plan, steps=1, lr=0.1, seed=5)
            updates.append({k: v.copy() for k, v in model.params.items()})
        for name in updates[0]:
            a, b = updates[0][name], updates[1][name]
            denom = np.maximum(np.abs(a), 1e-12)
            assert (np.abs(a - b) / denom).max() < 1e-6, name

    def test_checksum_mismatch(self, tmp_path):
        vocab = train_bpe(["aa bb cc " * 4], MIN_VOCAB_SIZE + 2, sample_fraction=1.0)
        shard = tmp_path / "s.sotk"
        shards.write_token_shard(shard, [vocab.encode("aa bb")], vocab.checksum)
        model = build_encoder(
            EncoderConfig(
                n_layers=1, hidden=8, n_heads=2, vocab_size=vocab.vocab_size,
                max_positions=16, vocab_checksum=b"\x00" * 8,
            )
        )
        reader = shards.ShardReader(shard)
        with pytest.raises(ChecksumMismatchError):
            train_mlm(model, reader, plan_batches(10, 1, 10), steps=1, lr=0.1)

    def test_nonfinite_loss_aborts_with_step(self):
        model = tiny_model(vocab_size=64, max_positions=16)
        plan = plan_batches(40, 4, 10)
        with np.errstate(all="ignore"), pytest.raises(TrainingError) as exc_info:
            train_mlm(model, self._seqs(), plan, steps=300, lr=50.0, seed=0)
        assert exc_info.value.step is not None

    def test_warmup_schedule(self):
        opt = MomentumSGD(1.0, warmup_steps=10)
        assert opt.rate(0) == pytest.approx(0.1)
        assert opt.rate(4) == pytest.approx(0.5)
        assert opt.rate(9) == pytest.approx(1.0)
        assert opt.rate(50) == 1.0

    def test_empty_sequences_dropped(self):
        model = tiny_model(vocab_size=64, max_positions=16)
        plan = plan_batches(20, 2, 10)
        seqs = [[], list(range(10, 20)), [], list(range(20, 30))]
        losses = train_mlm(model, seqs, plan, steps=2, lr=0.01, seed=0)
        assert len(losses) == 2

    def test_all_empty_reader_errors(self):
        model = tiny_model(vocab_size=64, max_positions=16)
        with pytest.raises(UsageError):
            train_mlm(model, [[], []], plan_batches(10, 1, 10), steps=1, lr=0.01)


class TestFinetune:
    def _clf(self, kind=HeadKind.TOKEN, n_classes=2, **kw):
        base = dict(n_layers=1, hidden=16, n_heads=2, vocab_size=40, max_positions=16, seed=2)
        base.update(kw)
        return attach_head(build_encoder(EncoderConfig(**base)), kind, n_classes)

    def test_uniform_weights_equal_unweighted_loss(self):
        # algebraic identity, so assert it tightly in float64
        clf = self._clf(dtype="float64")
        ids = np.array([[10, 11, 12, 13]])
        attn = np.ones_like(ids)
        labels = np.array([[0, 1, 0, 1]])
        uniform = np.array([0.5, 0.5])
        loss_w, mass_w, _, _ = classifier_loss_sums(clf, ids, attn, labels, uniform)
        loss_u, mass_u, _, _ = classifier_loss_sums(clf, ids, attn, labels, None)
        assert loss_w / mass_w == pytest.approx(loss_u / mass_u, rel=1e-12)

    def test_absent_class_errors(self):
        clf = self._clf(kind=HeadKind.SEQUENCE, n_classes=3)
        data = [([3, 10, 11], 0), ([3, 12, 13], 1)]  # class 2 never observed
        with pytest.raises(MetricError):
            finetune(clf, data, epochs=1, lr=0.01)

    def test_label_out_of_range(self):
        clf = self._clf(kind=HeadKind.SEQUENCE, n_classes=2)
        with pytest.raises(MetricError):
            finetune(clf, [([3, 10], 5)], epochs=1)

    def test_token_labels_must_align(self):
        clf = self._clf()
        with pytest.raises(UsageError):
            finetune(clf, [([10, 11, 12], [0, 1])], class_weights=[0.5, 0.5], epochs=1)

    def test_separable_parity_task(self):
        rng = np.random.default_rng(99)
        vocab_size = 106

        def make(n, seed):
            r = np.random.default_rng(seed)
            out = []
            for _ in range(n):
                ids = r.integers(6, vocab_size, size=12)
                out.append((list(ids), list(ids % 2)))
            return out

        cfg = EncoderConfig(n_layers=1, hidden=32, n_heads=4, vocab_size=vocab_size, max_positions=16, seed=3)
        clf = attach_head(build_encoder(cfg), HeadKind.TOKEN, 2)
        train = make(256, 1)
        heldout = make(64, 2)
        clf, preds = finetune(
            clf, train, eval_data=heldout, batch_size=32, lr=0.02, epochs=12, seed=5, warmup_steps=10
        )
        y_true = np.concatenate([lab for _, lab in heldout])
        y_pred = np.concatenate(preds)
        stats = metrics.confusion(y_true, y_pred, 2)
        weights = metrics.class_weights(stats.ap, metrics.WeightMode.INVERSE_FREQUENCY)
        assert metrics.weighted_f1(stats, weights) > 0.95

    def test_sequence_head_reads_position_zero(self):
        clf = self._clf(kind=HeadKind.SEQUENCE, n_classes=2)
        ids = np.array([[3, 10, 11], [3, 12, 13]])
        attn = np.ones_like(ids)
        y, _ = clf.encoder.hidden_states(ids, attn)
        logits = clf.logits(y)
        manual = y[:, 0, :] @ clf.params["cls_head.w"] + clf.params["cls_head.b"]
        np.testing.assert_allclose(logits, manual)

    def test_classifier_gradients_match_finite_differences(self):
        # spot-check the fine-tune path's gradients too
        clf = self._clf(kind=HeadKind.TOKEN, n_classes=2, seed=8)
        clf64 = attach_head(clf.encoder.astype("float64"), HeadKind.TOKEN, 2)
        for k in clf.params:
            clf64.params[k] = clf.params[k].astype("float64")
        ids = np.array([[10, 11, 12], [13, 14, 15]])
        attn = np.ones_like(ids)
        labels = ids % 2
        weights = np.array([0.3, 0.7])

        loss_sum, mass, _, grads = classifier_loss_sums(clf64, ids, attn, labels, weights)
        eps = 1e-6
        worst = 0.0
        for name, tensor in list(clf64.encoder.params.items()) + list(clf64.params.items()):
            flat = tensor.reshape(-1)
            idx = np.random.default_rng(0).integers(0, flat.size, size=min(5, flat.size))
            for i in idx:
                orig = flat[i]
                flat[i] = orig + eps
                up, _, _, _ = classifier_loss_sums(clf64, ids, attn, labels, weights, want_grads=False)
                flat[i] = orig - eps
                down, _, _, _ = classifier_loss_sums(clf64, ids, attn, labels, weights, want_grads=False)
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                analytic = grads[name].reshape(-1)[i]
                worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-4))
        assert worst < 1e-4
