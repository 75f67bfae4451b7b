"""Loss oracles: closed forms, naive references, and gradient checks."""

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from earthmim import autodiff as ad, data, masking, objectives as obj, tokenizer as tk
from earthmim.autodiff import Tensor, grad_check
from earthmim.data import GeneratorConfig
from earthmim.masking import MaskConfig
from earthmim.objectives import (
    LossConfig,
    ObjectiveError,
    combined_loss,
    create_frozen_projection,
    instance_contrastive_loss,
    patch_discrimination_loss,
    project_targets,
    target_variance,
    verify_frozen,
)
from earthmim.tokenizer import TokenizerConfig


def _unit(v):
    return v / max(np.linalg.norm(v), 1e-12)


def naive_patch_loss(preds, targets, groups, tau):
    """Direct per-row candidate enumeration; the O(M^2) reference."""
    losses = []
    for i in range(len(preds)):
        cand = [j for j in range(len(targets)) if groups[j] == groups[i]]
        logits = np.array([_unit(preds[i]) @ _unit(targets[j]) / tau for j in cand])
        shift = logits.max()
        log_z = shift + np.log(np.exp(logits - shift).sum())
        losses.append(log_z - logits[cand.index(i)])
    return float(np.mean(losses))


def naive_ntxent(a, b, tau):
    z = np.stack([_unit(v) for v in np.concatenate([a, b])])
    n, half = len(z), len(a)
    losses = []
    for i in range(n):
        pos = i + half if i < half else i - half
        others = [j for j in range(n) if j != i]
        logits = np.array([z[i] @ z[j] / tau for j in others])
        shift = logits.max()
        log_z = shift + np.log(np.exp(logits - shift).sum())
        losses.append(log_z - z[i] @ z[pos] / tau)
    return float(np.mean(losses))


@pytest.fixture(scope="module")
def pipeline():
    """A real batch with targets, for loss tests that need honest inputs."""
    cfg = GeneratorConfig(presence_dropout=0.0)
    samples = data.synth_generate(0, 4, cfg)
    tok_config = TokenizerConfig(model_dim=32, p_eff_choices=(8,), crop_choices=(2,))
    params = tk.init_tokenizer_params(cfg.registry, tok_config, np.random.default_rng(1))
    rngs = [np.random.default_rng((0, i)) for i in range(4)]
    batch = tk.assemble_batch(samples, cfg.registry, tok_config, params, rngs, cfg.num_classes)
    plan = masking.sample_mask_plan(batch, MaskConfig(), seed=0)
    _, slots = masking.apply_mask(batch, plan)
    frozen = create_frozen_projection(cfg.registry, 8, 32, seed=0)
    return cfg.registry, batch, slots, frozen


class TestFrozenProjection:
    def test_targets_deterministic(self, pipeline):
        registry, batch, slots, frozen = pipeline
        a = project_targets(batch, slots, frozen)
        b = project_targets(batch, slots, frozen)
        np.testing.assert_array_equal(a, b)

    def test_hash_roundtrip(self):
        frozen = create_frozen_projection(GeneratorConfig().registry, 8, 64, seed=3)
        assert verify_frozen(frozen)
        again = create_frozen_projection(GeneratorConfig().registry, 8, 64, seed=3)
        assert again.content_hash == frozen.content_hash

    def test_different_seed_different_hash(self):
        reg = GeneratorConfig().registry
        assert (
            create_frozen_projection(reg, 8, 64, seed=0).content_hash
            != create_frozen_projection(reg, 8, 64, seed=1).content_hash
        )

    def test_tampering_detected(self):
        frozen = create_frozen_projection(GeneratorConfig().registry, 8, 64, seed=3)
        weights = {k: v.copy() for k, v in frozen.weights.items()}
        first = next(iter(weights))
        weights[first][0, 0] += 1.0
        altered = obj.FrozenProjection(
            weights=weights, biases=frozen.biases, seed=frozen.seed, content_hash=frozen.content_hash
        )
        assert not verify_frozen(altered)

    def test_random_patches_map_to_distinct_targets(self):
        rng = np.random.default_rng(0)
        frozen = create_frozen_projection(GeneratorConfig().registry, 8, 64, seed=0)
        w = frozen.weights["radar_backscatter"]
        patches = rng.normal(size=(1000, w.shape[0]))
        targets = patches @ w
        assert pdist(targets).min() > 0

    def test_variance_scale(self):
        # Normal(0, 1/pdim) weights keep unit-variance inputs near unit variance
        rng = np.random.default_rng(1)
        frozen = create_frozen_projection(GeneratorConfig().registry, 8, 64, seed=0)
        w = frozen.weights["optical_visible"]
        targets = rng.normal(size=(2000, w.shape[0])) @ w
        assert 0.8 < targets.var() < 1.2


class TestPatchDiscrimination:
    def test_single_row_zero_loss(self, pipeline):
        registry = pipeline[0]
        pred = Tensor(np.random.default_rng(0).normal(size=(1, 8)))
        tgt = np.random.default_rng(1).normal(size=(1, 8))
        loss = patch_discrimination_loss(pred, tgt, np.zeros(1), registry, LossConfig())
        np.testing.assert_allclose(loss.data, 0.0, atol=1e-15)

    def test_uniform_similarities_give_log_n(self, pipeline):
        registry = pipeline[0]
        n = 6
        v = np.ones((n, 8))
        loss = patch_discrimination_loss(Tensor(v), v.copy(), np.zeros(n), registry, LossConfig())
        np.testing.assert_allclose(loss.data, np.log(n), atol=1e-12)

    def test_two_candidate_closed_form(self, pipeline):
        registry = pipeline[0]
        e = np.zeros(8)
        e[0] = 1.0
        preds = Tensor(np.stack([e, -e]))
        targets = np.stack([e, -e])
        loss = patch_discrimination_loss(
            preds, targets, np.zeros(2), registry, LossConfig(tau_patch=0.1)
        )
        # the logsumexp runs near magnitude 20, so absolute precision ~1e-15
        np.testing.assert_allclose(loss.data, np.log(1 + np.exp(-20.0)), atol=1e-12)

    @pytest.mark.parametrize("m", [4, 32, 256])
    def test_matches_naive_reference(self, pipeline, m):
        registry = pipeline[0]
        rng = np.random.default_rng(m)
        preds = rng.normal(size=(m, 16))
        targets = rng.normal(size=(m, 16))
        groups = rng.integers(0, 3, size=m)
        # give every row's group at least itself; degenerate singletons are fine
        loss = patch_discrimination_loss(
            Tensor(preds), targets, groups, registry, LossConfig(tau_patch=0.2)
        )
        ref = naive_patch_loss(preds, targets, groups, 0.2)
        np.testing.assert_allclose(float(loss.data), ref, atol=1e-9)

    def test_candidates_respect_bandset_scope(self, pipeline):
        registry, batch, slots, frozen = pipeline
        targets = project_targets(batch, slots, frozen)
        preds = Tensor(np.random.default_rng(0).normal(size=targets.shape))
        capture = {}
        patch_discrimination_loss(
            preds, targets, slots.bandset_index, registry, LossConfig(), capture=capture
        )
        groups = capture["groups"]
        for i, gi in enumerate(groups):
            same = groups == gi
            assert capture["candidate_counts"][i] == same.sum()
        # rows of different bandsets never share a group under SameBandset
        assert set(groups.tolist()) == set(np.unique(slots.bandset_index).tolist())

    def test_modality_scope_merges_bandsets(self, pipeline):
        registry, batch, slots, frozen = pipeline
        targets = project_targets(batch, slots, frozen)
        preds = Tensor(np.random.default_rng(0).normal(size=targets.shape))
        capture = {}
        patch_discrimination_loss(
            preds,
            targets,
            slots.bandset_index,
            registry,
            LossConfig(negative_scope=obj.SCOPE_SAME_MODALITY),
            capture=capture,
        )
        bandsets = registry.bandsets()
        modalities = np.array([bandsets[b].modality_id for b in slots.bandset_index])
        for mod in np.unique(modalities):
            rows = np.nonzero(modalities == mod)[0]
            assert len(set(capture["groups"][rows].tolist())) == 1

    def test_global_scope_uses_everything(self, pipeline):
        registry, batch, slots, frozen = pipeline
        targets = project_targets(batch, slots, frozen)
        preds = Tensor(np.random.default_rng(0).normal(size=targets.shape))
        capture = {}
        patch_discrimination_loss(
            preds,
            targets,
            slots.bandset_index,
            registry,
            LossConfig(negative_scope=obj.SCOPE_GLOBAL),
            capture=capture,
        )
        assert (capture["candidate_counts"] == len(targets)).all()

    def test_gradient_matches_finite_differences(self, pipeline):
        registry = pipeline[0]
        rng = np.random.default_rng(5)
        targets = rng.normal(size=(6, 8))
        groups = np.array([0, 0, 0, 1, 1, 1])

        def f(t):
            return patch_discrimination_loss(t, targets, groups, registry, LossConfig())

        err = grad_check(f, Tensor(rng.normal(size=(6, 8))))
        assert err <= 1e-4

    def test_zero_norm_prediction_stays_finite(self, pipeline):
        registry = pipeline[0]
        preds = np.random.default_rng(0).normal(size=(3, 8))
        preds[1] = 0.0
        targets = np.random.default_rng(1).normal(size=(3, 8))
        targets[2] = 0.0
        capture = {}
        loss = patch_discrimination_loss(
            Tensor(preds), targets, np.zeros(3), registry, LossConfig(), capture=capture
        )
        assert np.isfinite(loss.data)
        assert capture["zero_norm_targets"] == 1


class TestInstanceContrastive:
    def test_orthogonal_pair_closed_form(self):
        e1, e2 = np.zeros(8), np.zeros(8)
        e1[0] = e2[1] = 1.0
        loss = instance_contrastive_loss(Tensor(np.stack([e1, e2])), Tensor(np.stack([e1, e2])), 1.0)
        np.testing.assert_allclose(loss.data, np.log((np.e + 2) / np.e), rtol=1e-12)

    def test_identical_embeddings_give_log_2b_minus_1(self):
        for b in (2, 5):
            z = np.tile(np.arange(1.0, 9.0), (b, 1))
            loss = instance_contrastive_loss(Tensor(z), Tensor(z.copy()), 0.5)
            np.testing.assert_allclose(loss.data, np.log(2 * b - 1), atol=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(2)
        a, b = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
        base = instance_contrastive_loss(Tensor(a), Tensor(b), 0.1)
        scaled = instance_contrastive_loss(Tensor(3 * a), Tensor(3 * b), 0.1)
        np.testing.assert_allclose(base.data, scaled.data, atol=1e-12)

    @pytest.mark.parametrize("b", [2, 7])
    def test_matches_naive_reference(self, b):
        rng = np.random.default_rng(b)
        x, y = rng.normal(size=(b, 12)), rng.normal(size=(b, 12))
        loss = instance_contrastive_loss(Tensor(x), Tensor(y), 0.3)
        np.testing.assert_allclose(float(loss.data), naive_ntxent(x, y, 0.3), atol=1e-9)

    def test_small_batch_rejected(self):
        one = np.ones((1, 4))
        with pytest.raises(ObjectiveError, match="batch size"):
            instance_contrastive_loss(Tensor(one), Tensor(one), 0.1)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        other = rng.normal(size=(3, 6))

        def f(t):
            return instance_contrastive_loss(t, Tensor(other), 0.5)

        assert grad_check(f, Tensor(rng.normal(size=(3, 6)))) <= 1e-4


class TestCombinedLoss:
    def _views(self, registry, seed=0, grad=False):
        rng = np.random.default_rng(seed)
        preds0 = Tensor(rng.normal(size=(5, 8)), requires_grad=grad)
        preds1 = Tensor(rng.normal(size=(5, 8)), requires_grad=grad)
        tgt0, tgt1 = rng.normal(size=(5, 8)), rng.normal(size=(5, 8))
        groups = np.array([0, 0, 1, 1, 1])
        pooled = (
            Tensor(rng.normal(size=(3, 8)), requires_grad=grad),
            Tensor(rng.normal(size=(3, 8)), requires_grad=grad),
        )
        return (preds0, tgt0, groups), (preds1, tgt1, groups), pooled

    def test_zero_weight_drops_instance_term(self, pipeline):
        registry = pipeline[0]
        v0, v1, pooled = self._views(registry)
        total, breakdown = combined_loss(v0, v1, pooled, registry, LossConfig(lambda_inst=0.0))
        np.testing.assert_allclose(
            total.data, breakdown.patch_view0 + breakdown.patch_view1, atol=1e-15
        )
        assert breakdown.instance == 0.0

    def test_identical_views_have_equal_patch_components(self, pipeline):
        registry = pipeline[0]
        v0, _, pooled = self._views(registry)
        _, breakdown = combined_loss(v0, v0, pooled, registry, LossConfig())
        assert breakdown.patch_view0 == breakdown.patch_view1

    def test_breakdown_sums_to_total(self, pipeline):
        registry = pipeline[0]
        v0, v1, pooled = self._views(registry)
        config = LossConfig()
        total, breakdown = combined_loss(v0, v1, pooled, registry, config)
        recomposed = (
            breakdown.patch_view0 + breakdown.patch_view1 + config.lambda_inst * breakdown.instance
        )
        assert abs(breakdown.total - recomposed) <= 1e-12
        assert breakdown.total == float(total.data)

    def test_gradient_reaches_both_views(self, pipeline):
        registry = pipeline[0]
        v0, v1, pooled = self._views(registry, grad=True)
        total, _ = combined_loss(v0, v1, pooled, registry, LossConfig())
        ad.backward(total)
        for t in (v0[0], v1[0], *pooled):
            assert t.grad is not None and np.abs(t.grad).sum() > 0


class TestTargetVariance:
    def test_constant_targets_zero(self):
        assert target_variance(np.full((10, 4), 3.0)) == 0.0

    def test_known_value(self):
        targets = np.array([[0.0, 0.0], [2.0, 2.0]])
        np.testing.assert_allclose(target_variance(targets), 1.0)
