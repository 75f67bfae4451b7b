"""Mask plan category semantics, validity, and distribution checks."""

import itertools

import numpy as np
import pytest

from earthmim import data, masking, tokenizer as tk
from earthmim.data import BandsetSpec, GeneratorConfig, ModalitySpec, Registry, Sample
from earthmim.masking import (
    ABSENT,
    BandsetCategory,
    MaskConfig,
    MaskingError,
    apply_mask,
    plan_statistics,
    sample_mask_plan,
)
from earthmim.tokenizer import TokenizerConfig

EO = BandsetCategory.ENCODE_ONLY
DO = BandsetCategory.DECODE_ONLY
ED = BandsetCategory.ENCODE_AND_DECODE
NS = BandsetCategory.NOT_SELECTED


def obs_map_registry():
    return Registry(
        modalities=(
            ModalitySpec(
                id="sensor",
                kind=data.OBSERVATION,
                temporal=data.TIME_SERIES,
                bandsets=(BandsetSpec("sensor_band", "sensor", 2),),
            ),
            ModalitySpec(
                id="classes",
                kind=data.MAP,
                temporal=data.STATIC,
                bandsets=(BandsetSpec("classes_band", "classes", 5),),
            ),
        )
    )


def make_batch(registry, n_samples=1, crop=2, t=4, seed=0, h=16):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_samples):
        rasters, presence = {}, {}
        for bs in registry.bandsets():
            static = registry.is_static(bs.id)
            steps = 1 if static else t
            if registry.kind_of(bs.id) == data.MAP:
                rasters[bs.id] = rng.integers(0, 5, size=(steps, h, h, 1)).astype(np.int64)
            else:
                rasters[bs.id] = rng.normal(size=(steps, h, h, bs.band_count))
            presence[bs.id] = np.ones(steps, dtype=bool)
        samples.append(
            Sample(rasters=rasters, timestamps=np.arange(t) % 12, presence=presence, location_id=i)
        )
    config = TokenizerConfig(model_dim=16, p_eff_choices=(8,), crop_choices=(crop,))
    params = tk.init_tokenizer_params(registry, config, np.random.default_rng(1))
    rngs = [np.random.default_rng((seed, i)) for i in range(n_samples)]
    return tk.assemble_batch(samples, registry, config, params, rngs, 5)


class TestPlanSampling:
    def test_deterministic_in_seed(self):
        batch = make_batch(obs_map_registry())
        a = sample_mask_plan(batch, MaskConfig(), seed=7)
        b = sample_mask_plan(batch, MaskConfig(), seed=7)
        np.testing.assert_array_equal(a.categories, b.categories)
        np.testing.assert_array_equal(a.visible, b.visible)
        np.testing.assert_array_equal(a.target, b.target)

    def test_obs_must_encode_when_alone_with_map(self):
        # only the observation can encode, so every valid plan encodes it;
        # and if it is EncodeOnly the map must carry the decoding side
        batch = make_batch(obs_map_registry())
        for seed in range(300):
            plan = sample_mask_plan(batch, MaskConfig(), seed=seed)
            obs_cat, map_cat = plan.categories[0]
            assert obs_cat in (EO, ED)
            if obs_cat == EO:
                assert map_cat == DO

    def test_map_never_encodes(self):
        batch = make_batch(obs_map_registry())
        for seed in range(10_000):
            plan = sample_mask_plan(batch, MaskConfig(), seed=seed)
            assert plan.categories[0, 1] in (DO, NS)

    def test_every_plan_has_input_and_target(self):
        batch = make_batch(obs_map_registry(), n_samples=4)
        for seed in range(200):
            plan = sample_mask_plan(batch, MaskConfig(), seed=seed)
            for si in range(4):
                lo, hi = batch.boundaries[si], batch.boundaries[si + 1]
                assert plan.visible[lo:hi].sum() >= 1
                assert plan.target[lo:hi].sum() >= 1

    def test_visible_target_disjoint(self):
        batch = make_batch(obs_map_registry(), n_samples=4)
        for seed in range(200):
            plan = sample_mask_plan(batch, MaskConfig(), seed=seed)
            assert not (plan.visible & plan.target).any()

    def test_encode_and_decode_partitions_bandset(self):
        batch = make_batch(obs_map_registry(), crop=4)
        config = MaskConfig(observation_probs=(0.0, 0.0, 0.0, 1.0))
        plan = sample_mask_plan(batch, config, seed=0)
        obs_tokens = batch.bandset_index == 0
        used = plan.visible | plan.target
        np.testing.assert_array_equal(used[obs_tokens], True)

    def test_two_views_differ(self):
        batch = make_batch(obs_map_registry(), crop=4)
        differing = 0
        for seed in range(100):
            a = sample_mask_plan(batch, MaskConfig(), seed=seed, view_id=0)
            b = sample_mask_plan(batch, MaskConfig(), seed=seed, view_id=1)
            if not (
                np.array_equal(a.categories, b.categories)
                and np.array_equal(a.visible, b.visible)
            ):
                differing += 1
        assert differing >= 95

    def test_plan_independent_of_batch_composition(self):
        reg = obs_map_registry()
        solo = make_batch(reg, n_samples=1)
        plan_solo = sample_mask_plan(solo, MaskConfig(), seed=3)
        batch = make_batch(reg, n_samples=3)
        plan_batch = sample_mask_plan(batch, MaskConfig(), seed=3)
        np.testing.assert_array_equal(plan_solo.categories[0], plan_batch.categories[0])

    def test_no_observation_tokens_rejected(self):
        reg = obs_map_registry()
        rng = np.random.default_rng(0)
        sample = Sample(
            rasters={
                "sensor_band": rng.normal(size=(4, 16, 16, 2)),
                "classes_band": rng.integers(0, 5, size=(1, 16, 16, 1)).astype(np.int64),
            },
            timestamps=np.arange(4),
            presence={
                "sensor_band": np.zeros(4, dtype=bool),
                "classes_band": np.ones(1, dtype=bool),
            },
            location_id=0,
        )
        config = TokenizerConfig(model_dim=16, p_eff_choices=(8,), crop_choices=(2,))
        params = tk.init_tokenizer_params(reg, config, np.random.default_rng(1))
        batch = tk.assemble_tokens(sample, reg, config, params, np.random.default_rng(0), 5)
        with pytest.raises(MaskingError, match="no observation tokens"):
            sample_mask_plan(batch, MaskConfig(), seed=0)

    def test_retry_budget_exhaustion_names_config(self):
        batch = make_batch(obs_map_registry())
        impossible = MaskConfig(observation_probs=(1.0, 0.0, 0.0, 0.0), map_probs=(1.0, 0.0, 0.0, 0.0))
        with pytest.raises(MaskingError, match="attempts"):
            sample_mask_plan(batch, impossible, seed=0)

    def test_map_encoding_probs_rejected(self):
        with pytest.raises(MaskingError, match="maps cannot"):
            MaskConfig(map_probs=(0.25, 0.25, 0.25, 0.25))

    def test_mask_ratio_rounding_up(self):
        # masking pools all 45 bandset tokens: ceil(22.5) = 23 masked, 22 visible
        batch = make_batch(obs_map_registry(), crop=3, h=24, t=5)
        config = MaskConfig(observation_probs=(0.0, 0.0, 0.0, 1.0))
        plan = sample_mask_plan(batch, config, seed=0)
        obs_tokens = batch.bandset_index == 0
        assert obs_tokens.sum() == 45
        assert plan.visible[obs_tokens].sum() == 22
        assert plan.target[obs_tokens].sum() == 23


class TestApplyMask:
    def test_split_partition(self):
        batch = make_batch(obs_map_registry(), crop=4)
        config = MaskConfig(observation_probs=(0.0, 0.0, 0.0, 1.0), map_probs=(0.0, 0.0, 1.0, 0.0))
        plan = sample_mask_plan(batch, config, seed=2)
        enc, tgt = apply_mask(batch, plan)
        obs_tokens = np.nonzero(batch.bandset_index == 0)[0]
        # r = 0.5 on 16 tokens per (bandset, timestep): half visible, half targets
        assert len(enc.token_indices) == len(obs_tokens) // 2
        assert not set(enc.token_indices) & set(tgt.token_indices)
        np.testing.assert_array_equal(
            enc.embeddings.data, batch.embeddings.data[enc.token_indices]
        )

    def test_decode_only_contributes_no_encoder_tokens(self):
        batch = make_batch(obs_map_registry())
        config = MaskConfig(observation_probs=(0.0, 1.0, 0.0, 0.0), map_probs=(0.0, 0.0, 1.0, 0.0))
        plan = sample_mask_plan(batch, config, seed=0)
        enc, tgt = apply_mask(batch, plan)
        map_rows = set(np.nonzero(batch.bandset_index == 1)[0])
        assert map_rows.isdisjoint(enc.token_indices)
        assert map_rows.issubset(tgt.token_indices)

    def test_not_selected_absent_from_both(self):
        batch = make_batch(obs_map_registry())
        # map NotSelected with certainty; decoding falls to the observation
        config = MaskConfig(observation_probs=(0.0, 0.0, 0.0, 1.0), map_probs=(1.0, 0.0, 0.0, 0.0))
        plan = sample_mask_plan(batch, config, seed=0)
        enc, tgt = apply_mask(batch, plan)
        map_rows = set(np.nonzero(batch.bandset_index == 1)[0])
        assert map_rows.isdisjoint(enc.token_indices)
        assert map_rows.isdisjoint(tgt.token_indices)

    def test_length_mismatch_rejected(self):
        batch = make_batch(obs_map_registry())
        plan = sample_mask_plan(batch, MaskConfig(), seed=0)
        other = make_batch(obs_map_registry(), crop=2, t=6, seed=5)
        with pytest.raises(MaskingError, match="tokens"):
            apply_mask(other, plan)


class TestPlanStatistics:
    def test_single_plan_counts(self):
        batch = make_batch(obs_map_registry())
        plan = sample_mask_plan(batch, MaskConfig(), seed=0)
        stats = plan_statistics([plan])
        assert stats.category_counts.sum() == 2  # one sample, two bandsets
        assert stats.n_plans == 1

    def test_forced_category_shows_up_pure(self):
        batch = make_batch(obs_map_registry(), n_samples=8)
        config = MaskConfig(observation_probs=(0.0, 0.0, 0.0, 1.0))
        plans = [sample_mask_plan(batch, config, seed=s) for s in range(10)]
        stats = plan_statistics(plans)
        assert stats.frequencies()[0, ED] == 1.0

    def test_frequencies_match_rejection_oracle(self):
        # exact conditional category marginals by enumerating every
        # assignment and zeroing the invalid ones
        cfg = GeneratorConfig(presence_dropout=0.0)
        registry = cfg.registry
        samples = data.synth_generate(0, 16, cfg)
        tok_config = TokenizerConfig(model_dim=16, p_eff_choices=(8,), crop_choices=(2,))
        params = tk.init_tokenizer_params(registry, tok_config, np.random.default_rng(1))
        rngs = [np.random.default_rng((0, i)) for i in range(len(samples))]
        batch = tk.assemble_batch(samples, registry, tok_config, params, rngs, cfg.num_classes)

        mask_config = MaskConfig()
        kinds = [registry.kind_of(bs.id) for bs in registry.bandsets()]
        n_bs = len(kinds)
        oracle = np.zeros((n_bs, 4))
        total_p = 0.0
        for combo in itertools.product(range(4), repeat=n_bs):
            p = 1.0
            for bi, cat in enumerate(combo):
                p *= mask_config.probs_for(kinds[bi])[cat]
            if p == 0.0:
                continue
            encoded = sum(1 for c in combo if c in (EO, ED))
            decoded = sum(1 for c in combo if c in (DO, ED))
            if encoded < 1 or decoded < 1:
                continue
            total_p += p
            for bi, cat in enumerate(combo):
                oracle[bi, cat] += p
        oracle /= total_p

        plans = [sample_mask_plan(batch, mask_config, seed=s) for s in range(625)]
        stats = plan_statistics(plans)
        empirical = stats.frequencies()
        assert stats.category_counts.sum(axis=1).min() == 625 * 16
        np.testing.assert_allclose(empirical, oracle, atol=0.02)

    def test_absent_bandsets_tracked_separately(self):
        cfg = GeneratorConfig(presence_dropout=0.0)
        sample = data.synth_generate(0, 1, cfg)[0]
        sample.presence["radar_backscatter"][:] = False
        tok_config = TokenizerConfig(model_dim=16, p_eff_choices=(8,), crop_choices=(2,))
        params = tk.init_tokenizer_params(cfg.registry, tok_config, np.random.default_rng(1))
        batch = tk.assemble_tokens(sample, cfg.registry, tok_config, params, np.random.default_rng(0), 5)
        plan = sample_mask_plan(batch, MaskConfig(), seed=0)
        assert plan.categories[0, 0] == ABSENT
        stats = plan_statistics([plan])
        assert stats.absent_counts[0] == 1
        assert stats.category_counts[0].sum() == 0


class TestUniformPlan:
    def test_deterministic(self):
        batch = make_batch(obs_map_registry(), n_samples=3)
        a = masking.sample_uniform_plan(batch, MaskConfig(), seed=5)
        b = masking.sample_uniform_plan(batch, MaskConfig(), seed=5)
        np.testing.assert_array_equal(a.visible, b.visible)
        np.testing.assert_array_equal(a.target, b.target)
        np.testing.assert_array_equal(a.categories, b.categories)

    def test_observation_tokens_partitioned(self):
        # every observation token lands in exactly one side of the split
        batch = make_batch(obs_map_registry(), n_samples=2, t=5)
        registry = batch.registry
        plan = masking.sample_uniform_plan(batch, MaskConfig(), seed=1)
        kinds = [registry.kind_of(bs.id) for bs in registry.bandsets()]
        obs_rows = np.array([kinds[bi] == data.OBSERVATION for bi in batch.bandset_index])
        assert not (plan.visible & plan.target).any()
        assert (plan.visible[obs_rows] | plan.target[obs_rows]).all()

    def test_pooled_ceil_count(self):
        # 5 timesteps x 4 tokens = 20 obs tokens; ceil(0.5 * 20) = 10 targets
        batch = make_batch(obs_map_registry(), n_samples=1, t=5)
        for seed in range(50):
            plan = masking.sample_uniform_plan(batch, MaskConfig(), seed=seed)
            obs_rows = np.array(
                [batch.registry.kind_of(batch.registry.bandsets()[bi].id) == data.OBSERVATION
                 for bi in batch.bandset_index]
            )
            assert plan.target[obs_rows].sum() == 10
            assert plan.visible[obs_rows].sum() == 10

    def test_maps_never_visible(self):
        batch = make_batch(obs_map_registry(), n_samples=2)
        for seed in range(500):
            plan = masking.sample_uniform_plan(batch, MaskConfig(), seed=seed)
            map_rows = np.array(
                [batch.registry.kind_of(batch.registry.bandsets()[bi].id) == data.MAP
                 for bi in batch.bandset_index]
            )
            assert not plan.visible[map_rows].any()
            assert plan.categories[:, 1].max() <= DO  # NotSelected or DecodeOnly

    def test_map_exclusion_config_respected(self):
        batch = make_batch(obs_map_registry(), n_samples=2)
        config = MaskConfig(map_probs=(1.0, 0.0, 0.0, 0.0))
        for seed in range(50):
            plan = masking.sample_uniform_plan(batch, config, seed=seed)
            map_rows = np.array(
                [batch.registry.kind_of(batch.registry.bandsets()[bi].id) == data.MAP
                 for bi in batch.bandset_index]
            )
            assert not plan.visible[map_rows].any()
            assert not plan.target[map_rows].any()
            assert (plan.categories[:, 1] == NS).all()

    def test_categories_reflect_realized_split(self):
        batch = make_batch(obs_map_registry(), n_samples=4, t=6)
        plan = masking.sample_uniform_plan(batch, MaskConfig(), seed=3)
        registry = batch.registry
        for si in range(4):
            lo, hi = batch.boundaries[si], batch.boundaries[si + 1]
            for bi in np.unique(batch.bandset_index[lo:hi]):
                rows = np.arange(lo, hi)[batch.bandset_index[lo:hi] == bi]
                if registry.kind_of(registry.bandsets()[bi].id) == data.MAP:
                    continue
                has_vis, has_tgt = plan.visible[rows].any(), plan.target[rows].any()
                expect = ED if (has_vis and has_tgt) else (EO if has_vis else DO)
                assert plan.categories[si, bi] == expect

    def test_usable_by_apply_mask(self):
        batch = make_batch(obs_map_registry(), n_samples=2)
        plan = masking.sample_uniform_plan(batch, MaskConfig(), seed=0)
        enc, slots = apply_mask(batch, plan)
        assert len(enc.token_indices) >= 1
        assert len(slots.token_indices) >= 1
        assert not set(enc.token_indices) & set(slots.token_indices)
