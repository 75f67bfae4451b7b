"""Pretraining losses over frozen-projection latent targets.

Targets are raw patches pushed through per-bandset linear maps that are
drawn once at initialization and never updated; their hash is re-verified
at every checkpoint. Predictions are scored against targets with a
cosine/cross-entropy patch discrimination loss whose negatives respect a
configurable scope, plus a batch-level instance contrastive term.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Registry
from .masking import TargetSlots
from .tokenizer import TokenBatch

NEG_INF = -1e30
COSINE_EPS = 1e-12

SCOPE_SAME_BANDSET = "same_bandset"
SCOPE_SAME_MODALITY = "same_modality"
SCOPE_GLOBAL = "global"
SCOPES = (SCOPE_SAME_BANDSET, SCOPE_SAME_MODALITY, SCOPE_GLOBAL)


class ObjectiveError(ValueError):
    """Raised for invalid loss configs or degenerate inputs."""


@dataclass(frozen=True)
class LossConfig:
    tau_patch: float = 0.1
    tau_inst: float = 0.1
    lambda_inst: float = 0.1
    negative_scope: str = SCOPE_SAME_BANDSET

    def __post_init__(self):
        if self.tau_patch <= 0 or self.tau_inst <= 0:
            raise ObjectiveError("temperatures must be positive")
        if self.lambda_inst < 0:
            raise ObjectiveError("lambda_inst must be non-negative")
        if self.negative_scope not in SCOPES:
            raise ObjectiveError(f"unknown negative scope {self.negative_scope!r}")


@dataclass(frozen=True)
class FrozenProjection:
    """Per-bandset target projections, fixed for the life of a run."""

    weights: dict[str, np.ndarray]
    biases: dict[str, np.ndarray]
    seed: int
    content_hash: str


def _hash_arrays(weights: dict[str, np.ndarray], biases: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for bid in sorted(weights):
        digest.update(bid.encode())
        digest.update(np.ascontiguousarray(weights[bid]).astype("<f8").tobytes())
        digest.update(np.ascontiguousarray(biases[bid]).astype("<f8").tobytes())
    return digest.hexdigest()


def create_frozen_projection(
    registry: Registry, base_patch_size: int, dim: int, seed: int
) -> FrozenProjection:
    """Draw target projections for every bandset, maps included.

    Weight variance 1/patch_pixel_dim keeps target norms comparable across
    bandsets with different band counts.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF0)))
    weights: dict[str, np.ndarray] = {}
    biases: dict[str, np.ndarray] = {}
    for bs in registry.bandsets():
        pdim = base_patch_size * base_patch_size * bs.band_count
        weights[bs.id] = rng.normal(0.0, 1.0 / np.sqrt(pdim), size=(pdim, dim))
        biases[bs.id] = np.zeros(dim)
    for arr in list(weights.values()) + list(biases.values()):
        arr.setflags(write=False)
    return FrozenProjection(
        weights=weights, biases=biases, seed=seed, content_hash=_hash_arrays(weights, biases)
    )


def verify_frozen(frozen: FrozenProjection) -> bool:
    """True when the stored arrays still hash to the recorded value."""
    return _hash_arrays(frozen.weights, frozen.biases) == frozen.content_hash


def project_targets(batch: TokenBatch, slots: TargetSlots, frozen: FrozenProjection) -> np.ndarray:
    """Target embeddings (M x dim) for the slots, grouped per bandset.

    Pure numpy: targets are constants of the data and the frozen weights, so
    no gradient path exists by construction.
    """
    bandsets = batch.registry.bandsets()
    dim = next(iter(frozen.weights.values())).shape[1]
    out = np.empty((len(slots.token_indices), dim))
    for bi in np.unique(slots.bandset_index):
        bid = bandsets[bi].id
        if bid not in frozen.weights:
            raise ObjectiveError(f"no frozen projection for bandset {bid!r}")
        rows = np.nonzero(slots.bandset_index == bi)[0]
        raw = batch.raw_patches[bid][batch.raw_row[slots.token_indices[rows]]]
        out[rows] = raw @ frozen.weights[bid] + frozen.biases[bid]
    return out


def target_variance(targets: np.ndarray) -> float:
    """Mean per-dimension variance; the collapse sentinel logged every step."""
    return float(targets.var(axis=0).mean())


def _unit_rows(x: Tensor) -> Tensor:
    norm = ad.pow_const(ad.reduce_sum(ad.multiply(x, x), axis=1, keepdims=True), 0.5)
    return ad.multiply(x, ad.pow_const(ad.clip_min_const(norm, COSINE_EPS), -1.0))


def _unit_rows_np(x: np.ndarray, capture: dict | None = None) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    zero = norm[:, 0] < COSINE_EPS
    if capture is not None:
        capture["zero_norm_targets"] = int(zero.sum())
    return x / np.maximum(norm, COSINE_EPS)


def _log_softmax_diag(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over rows of (logsumexp_row - own_logit), under an additive mask."""
    m = logits.data.shape[0]
    masked = ad.add(logits, Tensor(mask))
    # constant shift keeps exp in range; any constant leaves the value exact
    shift = masked.data.max(axis=1, keepdims=True)
    lse = ad.add(
        ad.log(ad.reduce_sum(ad.exp(ad.add(masked, Tensor(-shift))), axis=1)),
        Tensor(shift[:, 0]),
    )
    own = ad.reduce_sum(ad.multiply(logits, Tensor(np.eye(m))), axis=1)
    return ad.reduce_mean(ad.add(lse, ad.scale(own, -1.0)))


def patch_discrimination_loss(
    predictions: Tensor,
    targets: np.ndarray,
    bandset_ids: np.ndarray,
    registry: Registry,
    config: LossConfig,
    capture: dict | None = None,
) -> Tensor:
    """Cross-entropy over cosine logits; true class is each row's own target.

    Candidate sets are restricted by ``config.negative_scope``: rows only
    compete against targets whose bandset (or modality, or anything, for
    Global) matches their own.
    """
    m = predictions.data.shape[0]
    if m < 1:
        raise ObjectiveError("need at least one prediction")
    if targets.shape != predictions.data.shape:
        raise ObjectiveError("predictions and targets must align row for row")

    if config.negative_scope == SCOPE_SAME_BANDSET:
        groups = np.asarray(bandset_ids)
    elif config.negative_scope == SCOPE_SAME_MODALITY:
        bandsets = registry.bandsets()
        modality_of = {i: bs.modality_id for i, bs in enumerate(bandsets)}
        names = [modality_of[int(b)] for b in bandset_ids]
        _, groups = np.unique(names, return_inverse=True)
    else:
        groups = np.zeros(m, dtype=np.int64)

    same_group = groups[:, None] == groups[None, :]
    if capture is not None:
        capture["candidate_counts"] = same_group.sum(axis=1)
        capture["groups"] = groups.copy()
    mask = np.where(same_group, 0.0, NEG_INF)

    logits = ad.scale(
        ad.matmul(_unit_rows(predictions), Tensor(_unit_rows_np(targets, capture).T)),
        1.0 / config.tau_patch,
    )
    return _log_softmax_diag(logits, mask)


def instance_contrastive_loss(pooled_view0: Tensor, pooled_view1: Tensor, tau_inst: float) -> Tensor:
    """NT-Xent across both views of the micro-batch.

    Every embedding is an anchor; its positive is the other view of the same
    sample and its negatives are the remaining 2B - 2 embeddings.
    """
    b = pooled_view0.data.shape[0]
    if b < 2:
        raise ObjectiveError("instance loss needs batch size >= 2 for negatives")
    z = _unit_rows(ad.concat([pooled_view0, pooled_view1], axis=0))
    logits = ad.scale(ad.matmul(z, ad.transpose(z, (1, 0))), 1.0 / tau_inst)
    n = 2 * b
    mask = np.full((n, n), 0.0)
    np.fill_diagonal(mask, NEG_INF)  # an anchor never competes with itself

    masked = ad.add(logits, Tensor(mask))
    shift = masked.data.max(axis=1, keepdims=True)
    lse = ad.add(
        ad.log(ad.reduce_sum(ad.exp(ad.add(masked, Tensor(-shift))), axis=1)),
        Tensor(shift[:, 0]),
    )
    pos_cols = np.concatenate([np.arange(b) + b, np.arange(b)])
    pick = np.zeros((n, n))
    pick[np.arange(n), pos_cols] = 1.0
    own = ad.reduce_sum(ad.multiply(logits, Tensor(pick)), axis=1)
    return ad.reduce_mean(ad.add(lse, ad.scale(own, -1.0)))


@dataclass
class LossBreakdown:
    total: float
    patch_view0: float
    patch_view1: float
    instance: float


def combined_loss(
    view0: tuple[Tensor, np.ndarray, np.ndarray],
    view1: tuple[Tensor, np.ndarray, np.ndarray],
    pooled_pair: tuple[Tensor, Tensor],
    registry: Registry,
    config: LossConfig,
) -> tuple[Tensor, LossBreakdown]:
    """Sum of both views' patch losses plus the scaled instance term.

    Each view is (predictions, targets, bandset_ids); the instance term is
    skipped entirely when its weight is zero so single-view ablations stay
    well-defined.
    """
    loss0 = patch_discrimination_loss(*view0, registry, config)
    loss1 = patch_discrimination_loss(*view1, registry, config)
    total = ad.add(loss0, loss1)
    inst_value = 0.0
    if config.lambda_inst > 0:
        inst = instance_contrastive_loss(*pooled_pair, config.tau_inst)
        total = ad.add(total, ad.scale(inst, config.lambda_inst))
        inst_value = float(inst.data)
    breakdown = LossBreakdown(
        total=float(total.data),
        patch_view0=float(loss0.data),
        patch_view1=float(loss1.data),
        instance=inst_value,
    )
    return total, breakdown
