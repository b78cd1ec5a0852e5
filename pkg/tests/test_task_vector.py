"""Task-vector arithmetic: extraction, merging, application, folding.

The merge identities (zero lambda, permutation robustness, linearity,
telescoping under warm-start lineage) are checked on modules whose
"training" is a seeded random walk, so every expected value can be
recomputed independently from the walk itself.
"""

import numpy as np
import pytest

from peftmerge.backbone import (
    BackboneConfig,
    ClassifierModel,
    freeze,
    init_backbone_weights,
)
from peftmerge.peft import (
    IncompatibleModuleError,
    PeftConfig,
    PeftParamSet,
    flatten,
    flatten_dict,
    init_pre,
    init_random,
    unflatten,
)
from peftmerge.task_vector import (
    DEFAULT_LAMBDA_GRID,
    MergeConfig,
    TaskVector,
    UnsupportedKindError,
    apply,
    combine,
    compute_task_vector,
    fold_lora,
    lambda_sweep,
)
def small_cfg(kind="adapter", **kw):
    base = dict(kind=kind, d_model=8, n_layers=2, head_classes=5,
                lora_rank=2, adapter_bottleneck=3)
    base.update(kw)
    return PeftConfig(**base)


def small_backbone(seed=0, **kw):
    base = dict(vocab_size=11, d_model=8, n_heads=2, d_ff=16, n_layers=2,
                max_seq_len=6, n_total_classes=5)
    base.update(kw)
    config = BackboneConfig(**base)
    return freeze(config, init_backbone_weights(config, seed=seed))


def fake_tune(phi, seed, scale=0.1):
    """Deterministic random walk on the live parameters only."""
    rng = np.random.default_rng(seed)
    for name in phi.params:
        step = rng.normal(0, scale, phi.params[name].shape)
        phi.params[name] = (phi.params[name] + step).astype(phi.params[name].dtype)
    return phi


def some_tokens(rng, n, vocab=11, length=5):
    return [rng.integers(0, vocab, size=length) for _ in range(n)]


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


class TestComputeTaskVector:
    def test_untrained_module_gives_zero_vector(self):
        phi = init_random(small_cfg(), seed=1)
        tau = compute_task_vector(phi)
        assert np.array_equal(tau.values, np.zeros_like(tau.values))

    def test_hand_arithmetic(self):
        phi = init_random(small_cfg(), seed=2)
        flat_init = flatten_dict(phi.init_snapshot, phi.config)
        live = flat_init.copy()
        live[0] += 1.0
        live[1] += 2.0
        phi.params = unflatten(live, phi.config)
        tau = compute_task_vector(phi)
        want = np.zeros_like(live)
        want[0], want[1] = 1.0, 2.0
        assert np.allclose(tau.values, want, atol=1e-7)

    def test_init_plus_tau_reconstructs_live(self):
        phi = fake_tune(init_random(small_cfg(), seed=3), seed=33)
        tau = compute_task_vector(phi)
        recon = flatten_dict(phi.init_snapshot, phi.config) + tau.values
        assert np.allclose(recon, flatten(phi), atol=1e-6)

    def test_pre_init_module_has_zero_vector_by_construction(self):
        prev = fake_tune(init_random(small_cfg(), seed=4), seed=44)
        tau = compute_task_vector(init_pre(prev))
        assert np.array_equal(tau.values, np.zeros_like(tau.values))

    def test_missing_snapshot_rejected(self):
        from peftmerge.task_vector import IntegrityError

        phi = init_random(small_cfg(), seed=5)
        phi.init_snapshot = {}
        with pytest.raises(IntegrityError):
            compute_task_vector(phi)


# ---------------------------------------------------------------------------
# combine
# ---------------------------------------------------------------------------


def vec(cfg, values, task):
    return TaskVector(cfg, np.asarray(values, np.float32), source_task=task)


class TestCombine:
    def test_hand_case_quarter_lambda(self):
        c = small_cfg()
        n = flatten(init_random(c, seed=0)).size
        v1 = np.zeros(n, np.float32)
        v2 = np.zeros(n, np.float32)
        v1[:2] = [1.0, 2.0]
        v2[:2] = [-1.0, 0.0]
        out = combine([vec(c, v1, "t1"), vec(c, v2, "t2")], MergeConfig(lam=0.25))
        assert out.values[0] == 0.0
        assert out.values[1] == pytest.approx(0.5)
        assert np.array_equal(out.values[2:], np.zeros(n - 2))

    def test_lambda_zero_gives_exact_zero(self):
        c = small_cfg()
        taus = [compute_task_vector(fake_tune(init_random(c, seed=s), seed=s + 10), f"t{s}")
                for s in range(3)]
        out = combine(taus, MergeConfig(lam=0.0))
        assert np.array_equal(out.values, np.zeros_like(out.values))

    def test_permutation_robust(self):
        c = small_cfg()
        taus = [compute_task_vector(fake_tune(init_random(c, seed=s), seed=s + 20), f"t{s}")
                for s in range(4)]
        a = combine(taus, MergeConfig(lam=0.25))
        b = combine(list(reversed(taus)), MergeConfig(lam=0.25))
        assert np.allclose(a.values, b.values, atol=1e-6)

    def test_linear_in_lambda(self):
        c = small_cfg()
        taus = [compute_task_vector(fake_tune(init_random(c, seed=s), seed=s + 30), f"t{s}")
                for s in range(3)]
        half = combine(taus, MergeConfig(lam=0.5))
        quarter = combine(taus, MergeConfig(lam=0.25))
        assert np.allclose(half.values, 2.0 * quarter.values, atol=1e-6)

    def test_telescoping_under_pre_lineage(self):
        # chain of warm starts: sum of increments equals end minus start
        c = small_cfg()
        first = init_random(c, seed=6)
        start = flatten_dict(first.init_snapshot, c).copy()
        phi = fake_tune(first, seed=60)
        taus = [compute_task_vector(phi, "t0")]
        for s in range(1, 5):
            phi = fake_tune(init_pre(phi), seed=60 + s)
            taus.append(compute_task_vector(phi, f"t{s}"))
        total = combine(taus, MergeConfig(lam=1.0))
        want = flatten(phi) - start
        assert np.allclose(total.values, want, atol=1e-5)

    def test_rejects_empty_list(self):
        with pytest.raises(ValueError):
            combine([], MergeConfig())

    def test_rejects_mixed_configs(self):
        a = compute_task_vector(init_random(small_cfg(), seed=0), "t1")
        b = compute_task_vector(init_random(small_cfg(adapter_bottleneck=4), seed=0), "t2")
        with pytest.raises(IncompatibleModuleError):
            combine([a, b], MergeConfig())


class TestMergeConfig:
    def test_rejects_lambda_outside_range(self):
        with pytest.raises(ValueError):
            MergeConfig(lam=-0.1)
        with pytest.raises(ValueError):
            MergeConfig(lam=2.5)

    def test_rejects_unknown_anchor_policy(self):
        with pytest.raises(ValueError):
            MergeConfig(anchor="last_module")

    def test_rejects_unknown_summation_order(self):
        with pytest.raises(ValueError):
            MergeConfig(summation_order="by_norm")


# ---------------------------------------------------------------------------
# apply
# ---------------------------------------------------------------------------


class TestApply:
    def test_zero_tau_equals_anchor_init_forward(self):
        bb = small_backbone()
        anchor = init_random(small_cfg(), seed=7)
        zero = TaskVector(anchor.config, np.zeros(flatten(anchor).size, np.float32), "z")
        merged = apply(bb, anchor, zero)
        rng = np.random.default_rng(70)
        toks = some_tokens(rng, 6)
        ref = ClassifierModel(bb, anchor)
        assert np.array_equal(merged.logits(toks), ref.logits(toks))

    def test_single_task_lambda_one_round_trip(self):
        bb = small_backbone()
        phi = fake_tune(init_random(small_cfg(), seed=8), seed=80)
        tau = combine([compute_task_vector(phi, "t1")], MergeConfig(lam=1.0))
        merged = apply(bb, _with_own_init_as_anchor(phi), tau)
        rng = np.random.default_rng(81)
        toks = some_tokens(rng, 8)
        want = ClassifierModel(bb, phi).logits(toks)
        got = merged.logits(toks)
        assert np.max(np.abs(got - want)) < 1e-5

    def test_apply_then_extract_is_inverse(self):
        bb = small_backbone()
        phi = fake_tune(init_random(small_cfg(), seed=9), seed=90)
        tau = compute_task_vector(phi, "t1")
        merged = apply(bb, _with_own_init_as_anchor(phi), tau)
        back = compute_task_vector(merged.phi)
        assert np.allclose(back.values, tau.values, atol=1e-6)

    def test_backbone_bytes_untouched(self):
        bb = small_backbone()
        before = {k: v.copy() for k, v in bb.weights.items()}
        phi = fake_tune(init_random(small_cfg(), seed=10), seed=100)
        apply(bb, _with_own_init_as_anchor(phi), compute_task_vector(phi, "t1"))
        for k in before:
            assert np.array_equal(bb.weights[k], before[k])

    def test_rejects_config_mismatch(self):
        bb = small_backbone()
        anchor = init_random(small_cfg(), seed=0)
        other = compute_task_vector(init_random(small_cfg(adapter_bottleneck=4), seed=0), "t")
        with pytest.raises(IncompatibleModuleError):
            apply(bb, anchor, other)


def _with_own_init_as_anchor(phi):
    """The module itself serves as anchor: its snapshot is its init."""
    return phi


# ---------------------------------------------------------------------------
# lambda sweep
# ---------------------------------------------------------------------------


class _FakeSet:
    def __init__(self, examples):
        self.examples = examples


class TestLambdaSweep:
    def _setup(self):
        bb = small_backbone()
        phi = fake_tune(init_random(small_cfg(), seed=12), seed=120)
        taus = [compute_task_vector(phi, "t1")]
        rng = np.random.default_rng(121)
        examples = [(t, int(rng.integers(0, 5))) for t in some_tokens(rng, 10)]
        return bb, phi, taus, [_FakeSet(examples)]

    def test_table_preserves_grid_order(self):
        bb, phi, taus, vals = self._setup()
        _, table = lambda_sweep(taus, phi, bb, vals, grid=(0.5, 0.1, 1.0))
        assert [row[0] for row in table] == [0.5, 0.1, 1.0]

    def test_best_lambda_comes_from_grid(self):
        bb, phi, taus, vals = self._setup()
        best, table = lambda_sweep(taus, phi, bb, vals)
        assert best in DEFAULT_LAMBDA_GRID
        best_acc = max(acc for _, acc in table)
        assert dict(table)[best] == best_acc

    def test_tie_breaks_toward_smallest_lambda(self):
        bb, phi, taus, vals = self._setup()
        zero = [TaskVector(phi.config, np.zeros_like(taus[0].values), "t1")]
        best, table = lambda_sweep(zero, phi, bb, vals, grid=(1.0, 0.25, 0.5))
        accs = [acc for _, acc in table]
        assert len(set(accs)) == 1  # zero vector: lambda cannot matter
        assert best == 0.25

    def test_rejects_empty_grid_and_empty_validation(self):
        bb, phi, taus, vals = self._setup()
        with pytest.raises(ValueError):
            lambda_sweep(taus, phi, bb, vals, grid=())
        with pytest.raises(ValueError):
            lambda_sweep(taus, phi, bb, [], grid=(0.5,))


# ---------------------------------------------------------------------------
# LoRA folding
# ---------------------------------------------------------------------------


class TestFoldLora:
    def test_folded_matches_attached_on_random_inputs(self):
        bb = small_backbone(seed=3)
        phi = fake_tune(init_random(small_cfg(kind="lora"), seed=13), seed=130, scale=0.05)
        folded = fold_lora(bb, phi)
        # the folded backbone wants the head but no lora attachment
        head_only = phi.copy()
        for name in list(head_only.params):
            if name.startswith("L"):
                head_only.params[name] = np.zeros_like(head_only.params[name])
        rng = np.random.default_rng(131)
        toks = some_tokens(rng, 100)
        want = ClassifierModel(bb, phi).logits(toks)
        got = ClassifierModel(folded, head_only).logits(toks)
        assert np.max(np.abs(got - want)) < 1e-4

    def test_only_q_and_v_weights_change(self):
        bb = small_backbone(seed=4)
        phi = fake_tune(init_random(small_cfg(kind="lora"), seed=14), seed=140)
        folded = fold_lora(bb, phi)
        for name in bb.weights:
            base = name.split(".")[-1]
            same = np.array_equal(folded.weights[name], bb.weights[name])
            if base in ("wq", "wv"):
                assert not same, name
            else:
                assert same, name

    def test_fingerprint_recomputed(self):
        bb = small_backbone(seed=5)
        phi = fake_tune(init_random(small_cfg(kind="lora"), seed=15), seed=150)
        folded = fold_lora(bb, phi)
        assert folded.fingerprint != bb.fingerprint

    def test_rejects_adapter_module(self):
        bb = small_backbone()
        phi = init_random(small_cfg(kind="adapter"), seed=0)
        with pytest.raises(UnsupportedKindError):
            fold_lora(bb, phi)
