"""Encoder forward/backward, freezing, pre-training.

Gradient checks run the whole encoder end to end at tiny widths with the
finite-difference referee from the tensor tests.  The pre-training probe
uses a closed-form least-squares readout, so no gradient code is shared
between claim and check.
"""

import numpy as np
import pytest

from peftmerge.backbone import (
    BackboneConfig,
    BackboneParams,
    ClassifierModel,
    SequenceLengthError,
    VocabularyError,
    backbone_backward,
    backbone_forward,
    backbone_param_shapes,
    compute_fingerprint,
    freeze,
    generate_mixture_for,
    init_backbone_weights,
    model_accuracy,
    pretrain_backbone,
    verify_fingerprint,
)
from peftmerge.peft import PeftConfig, init_random
from peftmerge.tensor import DimensionError, finite_diff_check

TINY = dict(vocab_size=9, d_model=8, n_heads=2, d_ff=12, n_layers=2,
            max_seq_len=6, n_total_classes=4)


def tiny_backbone(seed=0, **kw):
    cfg = BackboneConfig(**{**TINY, **kw})
    return freeze(cfg, init_backbone_weights(cfg, seed=seed))


def tiny_peft(kind="adapter", seed=0):
    cfg = PeftConfig(kind=kind, d_model=8, n_layers=2, head_classes=4,
                     lora_rank=2, adapter_bottleneck=3)
    return init_random(cfg, seed=seed)


def tokens(rng, n, length=5, vocab=9):
    return [rng.integers(0, vocab, size=length) for _ in range(n)]


# ---------------------------------------------------------------------------
# forward basics
# ---------------------------------------------------------------------------


class TestForward:
    def test_output_shape(self):
        bb = tiny_backbone()
        pooled, _ = backbone_forward(tokens(np.random.default_rng(0), 4), bb)
        assert pooled.shape == (4, 8)

    @pytest.mark.parametrize("kind", ["lora", "adapter"])
    def test_fresh_attachment_is_exact_noop(self, kind):
        bb = tiny_backbone()
        toks = tokens(np.random.default_rng(1), 5)
        bare, _ = backbone_forward(toks, bb)
        attached, _ = backbone_forward(toks, bb, attachment=tiny_peft(kind))
        assert np.array_equal(bare, attached)

    def test_batch_permutation_equivariance(self):
        bb = tiny_backbone()
        rng = np.random.default_rng(2)
        toks = [rng.integers(0, 9, size=rng.integers(2, 7)) for _ in range(6)]
        toks[0] = rng.integers(0, 9, size=6)  # pin the padded width
        perm = [3, 0, 5, 1, 4, 2]
        a, _ = backbone_forward(toks, bb)
        b, _ = backbone_forward([toks[i] for i in perm], bb)
        assert np.array_equal(a[perm], b)

    def test_variable_lengths_padding_does_not_leak(self):
        # a sequence's pooled vector must not depend on its batchmates
        bb = tiny_backbone()
        rng = np.random.default_rng(3)
        short = rng.integers(0, 9, size=2)
        long = rng.integers(0, 9, size=6)
        alone, _ = backbone_forward([short], bb)
        padded, _ = backbone_forward([short, long], bb)
        assert np.allclose(alone[0], padded[0], atol=1e-6)

    def test_rejects_out_of_vocab_token(self):
        with pytest.raises(VocabularyError):
            backbone_forward([np.array([0, 9])], tiny_backbone())

    def test_rejects_negative_token(self):
        with pytest.raises(VocabularyError):
            backbone_forward([np.array([-1, 0])], tiny_backbone())

    def test_rejects_empty_sequence(self):
        with pytest.raises(SequenceLengthError):
            backbone_forward([np.array([], dtype=np.int64)], tiny_backbone())

    def test_rejects_overlong_sequence(self):
        with pytest.raises(SequenceLengthError):
            backbone_forward([np.zeros(7, dtype=np.int64)], tiny_backbone())

    def test_rejects_empty_batch(self):
        with pytest.raises(ValueError):
            backbone_forward([], tiny_backbone())

    def test_rejects_attachment_width_mismatch(self):
        cfg = PeftConfig(kind="adapter", d_model=16, n_layers=2, head_classes=4,
                         lora_rank=2, adapter_bottleneck=3)
        with pytest.raises(DimensionError):
            backbone_forward([np.array([0, 1])], tiny_backbone(),
                             attachment=init_random(cfg, seed=0))


# ---------------------------------------------------------------------------
# freeze / fingerprint
# ---------------------------------------------------------------------------


class TestFreeze:
    def test_frozen_weights_are_read_only(self):
        bb = tiny_backbone()
        with pytest.raises(ValueError):
            bb.weights["tok_emb"][0, 0] = 1.0

    def test_verify_fingerprint_round_trip(self):
        bb = tiny_backbone()
        assert verify_fingerprint(bb)

    def test_tampering_breaks_verification(self):
        bb = tiny_backbone()
        doctored = {k: v.copy() for k, v in bb.weights.items()}
        doctored["tok_emb"][0, 0] += 1.0
        fake = BackboneParams(bb.config, doctored, bb.fingerprint)
        assert not verify_fingerprint(fake)

    def test_fingerprint_covers_every_tensor(self):
        bb = tiny_backbone()
        for name in backbone_param_shapes(bb.config):
            doctored = {k: v.copy() for k, v in bb.weights.items()}
            doctored[name] = doctored[name] + 1.0
            assert compute_fingerprint(bb.config, doctored) != bb.fingerprint, name

    def test_config_validation(self):
        with pytest.raises(ValueError):
            BackboneConfig(**{**TINY, "d_model": 9})  # not divisible by heads
        with pytest.raises(ValueError):
            BackboneConfig(**{**TINY, "n_layers": 0})


# ---------------------------------------------------------------------------
# end-to-end gradients
# ---------------------------------------------------------------------------


def _f64_weights(cfg, seed, boost=10.0):
    """Float64 weights scaled off the near-uniform-attention init point.

    At the 0.02 init, query/key products are ~1e-6 and attention is
    numerically uniform; gradients through it sit at the round-off floor
    and finite differences cannot resolve them.  Boosting the matrices
    moves the check to a region where the softmax actually bends.
    """
    weights = {}
    for name, arr in init_backbone_weights(cfg, seed=seed, dtype=np.float64).items():
        base = name.split(".")[-1]
        if base in ("ln1_g", "ln2_g"):
            weights[name] = arr
        else:
            weights[name] = arr * boost
    return weights


def _attachment_gradcheck(kind, seed):
    """Full-model check: loss = <pooled, R>, params = attachment layers."""
    cfg = BackboneConfig(**TINY)
    bb = freeze(cfg, _f64_weights(cfg, seed))
    phi = tiny_peft(kind, seed=seed)
    rng = np.random.default_rng(900 + seed)
    toks = tokens(rng, 3)
    R = rng.normal(size=(3, 8))

    names = [n for n in phi.params if n.startswith("L")]
    sizes = {n: phi.params[n].size for n in names}

    def pack(params):
        return np.concatenate([params[n].ravel() for n in names])

    def unpack(flat):
        out, off = {}, 0
        for n in names:
            out[n] = flat[off : off + sizes[n]].reshape(phi.params[n].shape)
            off += sizes[n]
        return out

    # float64 throughout for the check
    phi64 = phi.copy()
    for n in phi64.params:
        phi64.params[n] = phi64.params[n].astype(np.float64)
    rng2 = np.random.default_rng(950 + seed)
    for n in names:  # move off the zero init so relu paths are active
        phi64.params[n] = phi64.params[n] + rng2.normal(0, 0.3, phi64.params[n].shape)

    def loss_fn(flat):
        trial = phi64.copy()
        trial.params.update(unpack(np.asarray(flat, np.float64)))
        pooled, _ = backbone_forward(toks, bb, attachment=trial)
        return float(np.sum(pooled * R))

    pooled, cache = backbone_forward(toks, bb, attachment=phi64)
    att_grads, _ = backbone_backward(cache, R)
    flat = pack(phi64.params)
    grad = np.concatenate([att_grads[n].ravel() for n in names])
    return finite_diff_check(loss_fn, flat, grad, eps=1e-5)


class TestGradients:
    @pytest.mark.parametrize("seed", range(4))
    def test_adapter_attachment_end_to_end(self, seed):
        assert _attachment_gradcheck("adapter", seed) < 1e-5

    @pytest.mark.parametrize("seed", range(4))
    def test_lora_attachment_end_to_end(self, seed):
        assert _attachment_gradcheck("lora", seed) < 1e-5

    # eps per parameter: the attention score path bends sharply at the
    # boosted point, so wq needs a wider stencil to dodge round-off
    @pytest.mark.parametrize("name,eps", [
        ("tok_emb", 1e-5), ("L0.wq", 3e-4), ("L0.ff_w1", 1e-5),
        ("L1.ln2_g", 1e-5), ("L1.bo", 1e-5),
    ])
    def test_backbone_weight_gradients(self, name, eps):
        cfg = BackboneConfig(**TINY)
        weights = _f64_weights(cfg, seed=5)
        rng = np.random.default_rng(55)
        toks = tokens(rng, 3)
        R = rng.normal(size=(3, 8))

        def loss_fn(arr):
            trial = dict(weights)
            trial[name] = np.asarray(arr, np.float64)
            from peftmerge.backbone import _forward

            pooled, _ = _forward(toks, cfg, trial, None)
            return float(np.sum(pooled * R))

        from peftmerge.backbone import _forward

        pooled, cache = _forward(toks, cfg, weights, None)
        _, bb_grads = backbone_backward(cache, R, need_backbone_grads=True)
        assert finite_diff_check(loss_fn, weights[name], bb_grads[name], eps=eps) < 1e-5


# ---------------------------------------------------------------------------
# pre-training
# ---------------------------------------------------------------------------


def _lstsq_probe_accuracy(bb, mixture):
    """Closed-form readout: least-squares one-hot regression on pooled features."""
    seqs = [e[0] for e in mixture.examples]
    labels = np.array([e[1] for e in mixture.examples])
    feats, _ = backbone_forward(seqs, bb)
    X = np.hstack([feats, np.ones((len(seqs), 1))])
    Y = np.eye(mixture.spec.n_classes)[labels]
    W, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return float((np.argmax(X @ W, axis=1) == labels).mean())


class TestPretrain:
    def test_deterministic(self):
        cfg = BackboneConfig(**TINY)
        a = pretrain_backbone(cfg, corpus_seed=3, steps=12)
        b = pretrain_backbone(cfg, corpus_seed=3, steps=12)
        assert a.fingerprint == b.fingerprint

    def test_corpus_seed_changes_result(self):
        cfg = BackboneConfig(**TINY)
        a = pretrain_backbone(cfg, corpus_seed=3, steps=12)
        b = pretrain_backbone(cfg, corpus_seed=4, steps=12)
        assert a.fingerprint != b.fingerprint

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            pretrain_backbone(BackboneConfig(**TINY), corpus_seed=0, steps=0)

    def test_returns_frozen_verified_backbone(self):
        bb = pretrain_backbone(BackboneConfig(**TINY), corpus_seed=1, steps=8)
        assert verify_fingerprint(bb)
        with pytest.raises(ValueError):
            bb.weights["tok_emb"][0, 0] = 0.0

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_pretrained_features_beat_random_on_probe(self, seed):
        cfg = BackboneConfig(**TINY)
        random_bb = freeze(cfg, init_backbone_weights(cfg, seed=seed))
        trained_bb = pretrain_backbone(cfg, corpus_seed=seed, steps=120)
        mixture = generate_mixture_for(cfg, seed)
        assert _lstsq_probe_accuracy(trained_bb, mixture) > _lstsq_probe_accuracy(
            random_bb, mixture
        )


# ---------------------------------------------------------------------------
# classifier wrapper
# ---------------------------------------------------------------------------


class TestClassifierModel:
    def test_accuracy_counts_argmax_matches(self):
        bb = tiny_backbone()
        phi = tiny_peft()
        rng = np.random.default_rng(7)
        examples = [(t, int(rng.integers(0, 4))) for t in tokens(rng, 12)]
        model = ClassifierModel(bb, phi)
        logits = model.logits([e[0] for e in examples])
        by_hand = np.mean(
            [int(np.argmax(logits[i]) == examples[i][1]) for i in range(12)]
        )
        assert model_accuracy(model, examples) == pytest.approx(by_hand)

    def test_accuracy_rejects_empty(self):
        with pytest.raises(ValueError):
            model_accuracy(ClassifierModel(tiny_backbone(), tiny_peft()), [])
