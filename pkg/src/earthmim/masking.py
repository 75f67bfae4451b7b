"""Modality-aware mask plans.

Each (sample, bandset) pair is assigned one of four categories, then tokens
inside encoding categories are split into visible and masked at a fixed
ratio. Map bandsets can only be decoded or skipped: the encoder never sees
map content. Plans are resampled a bounded number of times until every
sample both encodes and decodes something.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MAP, OBSERVATION, Registry
from .tokenizer import TokenBatch

# categories array entry for bandsets with no tokens in a sample
ABSENT = -1

RETRY_BUDGET = 32


class MaskingError(ValueError):
    """Raised for unsatisfiable plans or mismatched batches."""


class BandsetCategory(enum.IntEnum):
    NOT_SELECTED = 0
    ENCODE_ONLY = 1
    DECODE_ONLY = 2
    ENCODE_AND_DECODE = 3


ENCODING = (BandsetCategory.ENCODE_ONLY, BandsetCategory.ENCODE_AND_DECODE)
DECODING = (BandsetCategory.DECODE_ONLY, BandsetCategory.ENCODE_AND_DECODE)


@dataclass(frozen=True)
class MaskConfig:
    """Category probabilities per modality kind plus the within-bandset ratio."""

    mask_ratio: float = 0.5
    observation_probs: tuple[float, float, float, float] = (0.1, 0.2, 0.2, 0.5)
    map_probs: tuple[float, float, float, float] = (0.5, 0.0, 0.5, 0.0)
    min_encoded_bandsets: int = 1
    min_decoded_bandsets: int = 1

    def __post_init__(self):
        if not (0.0 < self.mask_ratio < 1.0):
            raise MaskingError("mask_ratio must be in (0, 1)")
        for name, probs in (("observation", self.observation_probs), ("map", self.map_probs)):
            if abs(sum(probs) - 1.0) > 1e-12 or min(probs) < 0:
                raise MaskingError(f"{name} category probabilities must be a distribution")
        if self.map_probs[BandsetCategory.ENCODE_ONLY] or self.map_probs[BandsetCategory.ENCODE_AND_DECODE]:
            raise MaskingError("maps cannot take encoding categories")

    def probs_for(self, kind: str) -> tuple[float, ...]:
        return self.observation_probs if kind == OBSERVATION else self.map_probs


@dataclass
class MaskPlan:
    """Categories per (sample, bandset) and per-token visibility/target flags."""

    categories: np.ndarray  # (n_samples, n_bandsets), BandsetCategory or ABSENT
    visible: np.ndarray  # (N,) bool, token feeds the encoder
    target: np.ndarray  # (N,) bool, token is a decoder target
    view_id: int
    seed: int
    n_tokens: int


@dataclass
class EncoderTokens:
    """The visible slice of a batch, ready for the encoder."""

    embeddings: Tensor
    token_indices: np.ndarray
    sample_index: np.ndarray


@dataclass
class TargetSlots:
    """Identities of decoder targets; content stays in the parent batch."""

    token_indices: np.ndarray
    sample_index: np.ndarray
    bandset_index: np.ndarray


def _sample_tokens_by_bandset(batch: TokenBatch, si: int) -> dict[int, np.ndarray]:
    lo, hi = batch.boundaries[si], batch.boundaries[si + 1]
    out: dict[int, np.ndarray] = {}
    for bi in np.unique(batch.bandset_index[lo:hi]):
        out[int(bi)] = lo + np.nonzero(batch.bandset_index[lo:hi] == bi)[0]
    return out


def _draw_sample_plan(
    tokens_by_bandset: dict[int, np.ndarray],
    kinds: list[str],
    config: MaskConfig,
    rng: np.random.Generator,
):
    """One attempt: categories for present bandsets plus token mask flags."""
    categories: dict[int, int] = {}
    for bi in sorted(tokens_by_bandset):
        probs = config.probs_for(kinds[bi])
        categories[bi] = int(rng.choice(4, p=probs))

    visible_idx: list[np.ndarray] = []
    target_idx: list[np.ndarray] = []
    for bi in sorted(tokens_by_bandset):
        idx = tokens_by_bandset[bi]
        cat = categories[bi]
        if cat == BandsetCategory.NOT_SELECTED:
            continue
        if cat == BandsetCategory.DECODE_ONLY:
            target_idx.append(idx)
            continue
        n = len(idx)
        k = int(np.ceil(config.mask_ratio * n))
        masked = rng.choice(n, size=k, replace=False)
        mask_flags = np.zeros(n, dtype=bool)
        mask_flags[masked] = True
        visible_idx.append(idx[~mask_flags])
        if cat == BandsetCategory.ENCODE_AND_DECODE:
            target_idx.append(idx[mask_flags])
        # ENCODE_ONLY: masked tokens are dropped outright
    return categories, visible_idx, target_idx


def _valid(categories: dict[int, int], visible_idx, target_idx, config: MaskConfig) -> bool:
    encoded = sum(1 for c in categories.values() if c in ENCODING)
    decoded = sum(1 for c in categories.values() if c in DECODING)
    if encoded < config.min_encoded_bandsets or decoded < config.min_decoded_bandsets:
        return False
    n_visible = sum(len(v) for v in visible_idx)
    n_target = sum(len(t) for t in target_idx)
    return n_visible >= 1 and n_target >= 1


def sample_mask_plan(
    batch: TokenBatch, config: MaskConfig, seed: int, view_id: int = 0
) -> MaskPlan:
    """Draw a plan for every sample in the batch, deterministic in (seed, view_id).

    Each sample uses its own sub-seed, so a plan for sample i does not depend
    on which other samples share the batch.
    """
    registry = batch.registry
    bandsets = registry.bandsets()
    kinds = [registry.kind_of(bs.id) for bs in bandsets]
    n_samples = len(batch.boundaries) - 1

    categories = np.full((n_samples, len(bandsets)), ABSENT, dtype=np.int64)
    visible = np.zeros(len(batch), dtype=bool)
    target = np.zeros(len(batch), dtype=bool)

    for si in range(n_samples):
        by_bandset = _sample_tokens_by_bandset(batch, si)
        if not any(kinds[bi] == OBSERVATION for bi in by_bandset):
            raise MaskingError(f"sample {si} has no observation tokens to encode")
        rng = np.random.default_rng(np.random.SeedSequence((seed, view_id, si)))
        for attempt in range(RETRY_BUDGET):
            cats, vis_idx, tgt_idx = _draw_sample_plan(by_bandset, kinds, config, rng)
            if _valid(cats, vis_idx, tgt_idx, config):
                break
        else:
            raise MaskingError(
                f"no valid plan for sample {si} after {RETRY_BUDGET} attempts with {config}"
            )
        for bi, cat in cats.items():
            categories[si, bi] = cat
        for idx in vis_idx:
            visible[idx] = True
        for idx in tgt_idx:
            target[idx] = True

    return MaskPlan(
        categories=categories,
        visible=visible,
        target=target,
        view_id=view_id,
        seed=seed,
        n_tokens=len(batch),
    )


def sample_uniform_plan(
    batch: TokenBatch, config: MaskConfig, seed: int, view_id: int = 0
) -> MaskPlan:
    """Token-level masking that ignores bandset structure.

    All observation tokens of a sample form one pool; ceil(ratio * n) of them
    become targets and the rest stay visible. Maps keep their category draw
    (they can still never be encoded), so the map restriction survives even
    in this ablation mode. Categories are reported post hoc from the realized
    split.
    """
    registry = batch.registry
    bandsets = registry.bandsets()
    kinds = [registry.kind_of(bs.id) for bs in bandsets]
    n_samples = len(batch.boundaries) - 1

    categories = np.full((n_samples, len(bandsets)), ABSENT, dtype=np.int64)
    visible = np.zeros(len(batch), dtype=bool)
    target = np.zeros(len(batch), dtype=bool)

    for si in range(n_samples):
        by_bandset = _sample_tokens_by_bandset(batch, si)
        obs_idx = np.concatenate(
            [by_bandset[bi] for bi in sorted(by_bandset) if kinds[bi] == OBSERVATION]
            or [np.array([], dtype=np.intp)]
        )
        if len(obs_idx) == 0:
            raise MaskingError(f"sample {si} has no observation tokens to encode")
        rng = np.random.default_rng(np.random.SeedSequence((seed, view_id, si)))
        for attempt in range(RETRY_BUDGET):
            k = int(np.ceil(config.mask_ratio * len(obs_idx)))
            masked_pos = rng.choice(len(obs_idx), size=k, replace=False)
            flags = np.zeros(len(obs_idx), dtype=bool)
            flags[masked_pos] = True
            map_cats = {
                bi: int(rng.choice(4, p=config.probs_for(kinds[bi])))
                for bi in sorted(by_bandset)
                if kinds[bi] != OBSERVATION
            }
            if flags.any() and not flags.all():
                break
        else:
            raise MaskingError(
                f"no valid plan for sample {si} after {RETRY_BUDGET} attempts with {config}"
            )
        visible[obs_idx[~flags]] = True
        target[obs_idx[flags]] = True
        for bi in sorted(by_bandset):
            if kinds[bi] != OBSERVATION:
                cat = map_cats[bi]
                categories[si, bi] = cat
                if cat == BandsetCategory.DECODE_ONLY:
                    target[by_bandset[bi]] = True
                continue
            has_vis = visible[by_bandset[bi]].any()
            has_tgt = target[by_bandset[bi]].any()
            if has_vis and has_tgt:
                categories[si, bi] = BandsetCategory.ENCODE_AND_DECODE
            elif has_vis:
                categories[si, bi] = BandsetCategory.ENCODE_ONLY
            else:
                categories[si, bi] = BandsetCategory.DECODE_ONLY

    return MaskPlan(
        categories=categories,
        visible=visible,
        target=target,
        view_id=view_id,
        seed=seed,
        n_tokens=len(batch),
    )


def apply_mask(batch: TokenBatch, plan: MaskPlan) -> tuple[EncoderTokens, TargetSlots]:
    """Split the batch into encoder inputs and decoder target identities."""
    if plan.n_tokens != len(batch):
        raise MaskingError(f"plan covers {plan.n_tokens} tokens, batch has {len(batch)}")
    vis = np.nonzero(plan.visible)[0]
    tgt = np.nonzero(plan.target)[0]
    encoder_tokens = EncoderTokens(
        embeddings=ad.gather_rows(batch.embeddings, vis),
        token_indices=vis,
        sample_index=batch.sample_index[vis],
    )
    target_slots = TargetSlots(
        token_indices=tgt,
        sample_index=batch.sample_index[tgt],
        bandset_index=batch.bandset_index[tgt],
    )
    return encoder_tokens, target_slots


@dataclass
class PlanStats:
    """Exact counts over a list of plans, for property tests and reports."""

    category_counts: np.ndarray  # (n_bandsets, 4)
    absent_counts: np.ndarray  # (n_bandsets,)
    visible_tokens: int
    total_tokens: int
    n_plans: int

    def frequencies(self) -> np.ndarray:
        totals = self.category_counts.sum(axis=1, keepdims=True)
        return self.category_counts / np.maximum(totals, 1)

    @property
    def mean_visible_fraction(self) -> float:
        return self.visible_tokens / max(self.total_tokens, 1)


def plan_statistics(plans: list[MaskPlan]) -> PlanStats:
    if not plans:
        raise MaskingError("need at least one plan")
    n_bandsets = plans[0].categories.shape[1]
    counts = np.zeros((n_bandsets, 4), dtype=np.int64)
    absent = np.zeros(n_bandsets, dtype=np.int64)
    visible_tokens = 0
    total_tokens = 0
    for plan in plans:
        for row in plan.categories:
            for bi, cat in enumerate(row):
                if cat == ABSENT:
                    absent[bi] += 1
                else:
                    counts[bi, cat] += 1
        visible_tokens += int(plan.visible.sum())
        total_tokens += plan.n_tokens
    return PlanStats(
        category_counts=counts,
        absent_counts=absent,
        visible_tokens=visible_tokens,
        total_tokens=total_tokens,
        n_plans=len(plans),
    )
