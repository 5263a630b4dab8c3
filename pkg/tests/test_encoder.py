"""Encoder structure: init determinism, pre-norm wiring, forward oracle."""

import math

import numpy as np
import pytest

from sopipeline.errors import TrainingError, UsageError
from sopipeline.mlm import (
    ATTENTION,
    FFN,
    EncoderConfig,
    IGNORE_LABEL,
    MaskedBatch,
    build_encoder,
    forward_mlm,
    load_checkpoint,
    make_masked_batch,
    save_checkpoint,
)


def small_config(**kw):
    base = dict(n_layers=2, hidden=16, n_heads=4, vocab_size=50, max_positions=12, seed=0)
    base.update(kw)
    return EncoderConfig(**base)


class TestBuildEncoder:
    def test_same_seed_bit_identical(self):
        a = build_encoder(small_config(seed=9))
        b = build_encoder(small_config(seed=9))
        for name in a.param_names:
            assert a.params[name].tobytes() == b.params[name].tobytes()

    def test_different_seed_differs(self):
        a = build_encoder(small_config(seed=1))
        b = build_encoder(small_config(seed=2))
        assert a.params["tok_emb"].tobytes() != b.params["tok_emb"].tobytes()

    def test_head_divisibility_error(self):
        with pytest.raises(UsageError):
            EncoderConfig(n_layers=1, hidden=32, n_heads=5, vocab_size=50)

    def test_parameter_count_matches_manual_enumeration(self):
        cfg = small_config(n_layers=2, hidden=32, n_heads=4, vocab_size=100, max_positions=64)
        model = build_encoder(cfg)
        d, v, p = 32, 100, 64
        per_layer = 12 * d * d + 13 * d
        expected = 2 * per_layer + (v + p) * d + 2 * d + d * v + v  # untied head
        assert model.parameter_count == expected

    def test_zero_biases_unit_gains(self):
        model = build_encoder(small_config())
        assert (model.params["L0.ln1.g"] == 1).all()
        assert (model.params["L0.attn.bq"] == 0).all()
        assert (model.params["final_ln.b"] == 0).all()

    def test_tied_head_has_no_head_tensor(self):
        tied = build_encoder(small_config(tied_head=True))
        untied = build_encoder(small_config(tied_head=False))
        assert "head.w" not in tied.params
        d, v = 16, 50
        assert untied.parameter_count - tied.parameter_count == d * v + v


class TestPreNormWiring:
    def test_zeroed_residual_branches_give_normed_embeddings(self):
        # with every residual-branch output projection zeroed, the stack is
        # an identity over embeddings up to the final layer norm
        model = build_encoder(small_config(n_layers=3))
        for layer in range(3):
            model.params[f"L{layer}.attn.wo"][:] = 0
            model.params[f"L{layer}.attn.bo"][:] = 0
            model.params[f"L{layer}.ffn.w2"][:] = 0
            model.params[f"L{layer}.ffn.b2"][:] = 0
        ids = np.array([[7, 8, 9, 10]])
        mask = np.ones_like(ids)
        y, _ = model.hidden_states(ids, mask)

        x = model.params["tok_emb"][ids] + model.params["pos_emb"][:4][None]
        mu = x.mean(-1, keepdims=True)
        var = x.var(-1, keepdims=True)
        expected = (x - mu) / np.sqrt(var + 1e-5)
        expected = expected * model.params["final_ln.g"] + model.params["final_ln.b"]
        np.testing.assert_allclose(y, expected, rtol=1e-6)

    def test_sublayer_selection(self):
        attn_only = build_encoder(small_config(sublayers=(ATTENTION,)))
        ffn_only = build_encoder(small_config(sublayers=(FFN,)))
        assert "L0.ffn.w1" not in attn_only.params
        assert "L0.attn.wq" not in ffn_only.params


class TestForwardMlm:
    def test_initial_loss_near_log_vocab(self):
        cfg = EncoderConfig(n_layers=2, hidden=32, n_heads=4, vocab_size=1000, max_positions=64, seed=0)
        model = build_encoder(cfg)
        seqs = [list(np.random.default_rng(i).integers(6, 1000, size=48)) for i in range(8)]
        batch = make_masked_batch(seqs, 0.15, vocab_size=1000, seed=1)
        loss, logits = forward_mlm(model, batch)
        assert abs(loss - math.log(1000)) / math.log(1000) < 0.05
        assert logits.shape == (8, 48, 1000)

    def test_loss_reads_only_labeled_logits(self):
        # loss equals CE computed from the labeled rows of the returned
        # logits alone, so logits at ignored positions cannot contribute
        model = build_encoder(small_config(dtype="float64"))
        ids = np.array([[10, 11, 12, 13], [14, 15, 16, 17]])
        mask = np.ones_like(ids)
        labels = np.array(
            [[IGNORE_LABEL, 11, IGNORE_LABEL, IGNORE_LABEL], [14, IGNORE_LABEL, IGNORE_LABEL, 17]]
        )
        loss, logits = forward_mlm(model, MaskedBatch(ids, mask, labels, 0.15))
        labeled = labels != IGNORE_LABEL
        rows = logits[labeled]
        targets = labels[labeled]
        shifted = rows - rows.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1)) + rows.max(axis=-1)
        manual = float((lse - rows[np.arange(len(targets)), targets]).mean())
        assert loss == pytest.approx(manual, rel=1e-12)

    def test_zero_labeled_positions_error(self):
        model = build_encoder(small_config())
        ids = np.array([[10, 11]])
        labels = np.full_like(ids, IGNORE_LABEL)
        with pytest.raises(TrainingError):
            forward_mlm(model, MaskedBatch(ids, np.ones_like(ids), labels, 0.15))

    def test_too_long_sequence_rejected(self):
        model = build_encoder(small_config(max_positions=4))
        ids = np.arange(10, 16).reshape(1, 6)
        labels = ids.copy()
        with pytest.raises(UsageError):
            forward_mlm(model, MaskedBatch(ids, np.ones_like(ids), labels, 0.15))

    def test_micro_model_matches_scalar_oracle(self):
        """1 layer, d=2, V=8, T=2: compare against an independent
        loop-by-loop forward pass written with plain floats."""
        cfg = EncoderConfig(
            n_layers=1, hidden=2, n_heads=1, vocab_size=8, max_positions=2, seed=0, dtype="float64"
        )
        model = build_encoder(cfg)
        # overwrite with small hand-picked weights
        p = model.params
        p["tok_emb"][:] = np.arange(16).reshape(8, 2) * 0.01
        p["pos_emb"][:] = [[0.01, -0.02], [0.03, 0.04]]
        p["L0.ln1.g"][:] = [1.1, 0.9]
        p["L0.ln1.b"][:] = [0.01, -0.01]
        p["L0.attn.wq"][:] = [[0.10, -0.20], [0.30, 0.05]]
        p["L0.attn.bq"][:] = [0.01, 0.02]
        p["L0.attn.wk"][:] = [[0.07, 0.11], [-0.13, 0.17]]
        p["L0.attn.bk"][:] = [0.00, -0.01]
        p["L0.attn.wv"][:] = [[0.2, -0.1], [0.15, 0.25]]
        p["L0.attn.bv"][:] = [0.03, 0.00]
        p["L0.attn.wo"][:] = [[0.5, 0.1], [-0.2, 0.4]]
        p["L0.attn.bo"][:] = [0.01, 0.01]
        p["L0.ln2.g"][:] = [0.95, 1.05]
        p["L0.ln2.b"][:] = [0.0, 0.02]
        p["L0.ffn.w1"][:] = np.linspace(-0.3, 0.3, 16).reshape(2, 8)
        p["L0.ffn.b1"][:] = np.linspace(0.01, 0.08, 8)
        p["L0.ffn.w2"][:] = np.linspace(0.2, -0.2, 16).reshape(8, 2)
        p["L0.ffn.b2"][:] = [0.005, -0.005]
        p["final_ln.g"][:] = [1.0, 1.02]
        p["final_ln.b"][:] = [0.002, 0.0]
        p["head.w"][:] = np.linspace(-0.4, 0.4, 16).reshape(2, 8)
        p["head.b"][:] = np.linspace(0.0, 0.07, 8)

        ids = np.array([[6, 7]])
        labels = np.array([[7, IGNORE_LABEL]])
        batch = MaskedBatch(ids, np.ones_like(ids), labels, 0.5)
        loss, _ = forward_mlm(model, batch)

        oracle = _scalar_forward_loss(p, ids[0].tolist(), {0: 7})
        assert loss == pytest.approx(oracle, rel=1e-12)


def _scalar_forward_loss(p, ids, labeled):
    """Independent scalar re-implementation (loops + math module only)."""
    eps = 1e-5
    d, V = 2, 8

    def ln(vec, g, b):
        mu = sum(vec) / len(vec)
        var = sum((x - mu) ** 2 for x in vec) / len(vec)
        return [((x - mu) / math.sqrt(var + eps)) * gi + bi for x, gi, bi in zip(vec, g, b)]

    def matvec(vec, w, b):  # w is [in][out]
        return [sum(vec[i] * w[i][j] for i in range(len(vec))) + b[j] for j in range(len(b))]

    def gelu(x):
        return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))

    w = {k: v.tolist() for k, v in p.items()}
    T = len(ids)
    x = [[w["tok_emb"][t][j] + w["pos_emb"][pos][j] for j in range(d)] for pos, t in enumerate(ids)]

    # attention sublayer (single head)
    h = [ln(row, w["L0.ln1.g"], w["L0.ln1.b"]) for row in x]
    q = [matvec(row, w["L0.attn.wq"], w["L0.attn.bq"]) for row in h]
    k = [matvec(row, w["L0.attn.wk"], w["L0.attn.bk"]) for row in h]
    v = [matvec(row, w["L0.attn.wv"], w["L0.attn.bv"]) for row in h]
    ctx = []
    for i in range(T):
        scores = [sum(q[i][a] * k[j][a] for a in range(d)) / math.sqrt(d) for j in range(T)]
        mx = max(scores)
        exps = [math.exp(s - mx) for s in scores]
        z = sum(exps)
        probs = [e / z for e in exps]
        ctx.append([sum(probs[j] * v[j][a] for j in range(T)) for a in range(d)])
    attn_out = [matvec(row, w["L0.attn.wo"], w["L0.attn.bo"]) for row in ctx]
    x = [[x[i][j] + attn_out[i][j] for j in range(d)] for i in range(T)]

    # ffn sublayer
    h = [ln(row, w["L0.ln2.g"], w["L0.ln2.b"]) for row in x]
    a1 = [matvec(row, w["L0.ffn.w1"], w["L0.ffn.b1"]) for row in h]
    g1 = [[gelu(val) for val in row] for row in a1]
    f = [matvec(row, w["L0.ffn.w2"], w["L0.ffn.b2"]) for row in g1]
    x = [[x[i][j] + f[i][j] for j in range(d)] for i in range(T)]

    y = [ln(row, w["final_ln.g"], w["final_ln.b"]) for row in x]
    total, count = 0.0, 0
    for pos, target in labeled.items():
        logits = matvec(y[pos], w["head.w"], w["head.b"])
        mx = max(logits)
        lse = mx + math.log(sum(math.exp(l - mx) for l in logits))
        total += lse - logits[target]
        count += 1
    return total / count


class TestCheckpoints:
    def test_roundtrip(self, tmp_path):
        model = build_encoder(small_config(seed=4))
        path = tmp_path / "m.sockpt"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        assert loaded.config == model.config
        for name in model.param_names:
            np.testing.assert_array_equal(loaded.params[name], model.params[name])

    def test_truncated_checkpoint(self, tmp_path):
        from sopipeline.errors import ChecksumMismatchError

        model = build_encoder(small_config())
        path = tmp_path / "m.sockpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-100])
        with pytest.raises(ChecksumMismatchError):
            load_checkpoint(path)
