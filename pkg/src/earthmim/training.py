"""Pretraining loop and ablation matrices.

Each optimizer step tokenizes its micro-batches once, draws two independent
mask plans, encodes and decodes both views, and accumulates mean-semantics
gradients before a single AdamW update. All randomness flows from the run
seed through named sub-seeds, so a resumed run replays the exact stream a
straight run would have produced.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import NormStats, Registry, compute_stats, normalize
from .masking import EncoderTokens, MaskConfig, apply_mask, sample_mask_plan, sample_uniform_plan
from .model import (
    ModelParams,
    decoder_forward,
    encoder_forward,
    init_model_params,
    load_checkpoint,
    pool_by_sample,
    save_checkpoint,
)
from .objectives import (
    LossBreakdown,
    LossConfig,
    instance_contrastive_loss,
    patch_discrimination_loss,
    project_targets,
    target_variance,
    verify_frozen,
)
from .tokenizer import assemble_batch

# sub-seed tags: one namespace per consumer of the run seed
GEOMETRY_TAG = 0xA0
MASK_TAG = 0xB0
ORDER_TAG = 0xC0

TARGET_MODES = ("frozen", "ema", "pixel")
MASKING_MODES = ("modality_aware", "uniform_random")

COLLAPSE_FRACTION = 0.1  # target variance below this fraction of initial flags collapse


class TrainingError(ValueError):
    """Raised for invalid optimizer configs or broken runs."""


@dataclass(frozen=True)
class OptimConfig:
    base_lr: float = 1e-4
    weight_decay: float = 0.02
    batch_size: int = 32
    micro_batch_size: int = 8
    warmup_steps: int = 200
    total_steps: int = 2000
    final_lr_fraction: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.batch_size % self.micro_batch_size:
            raise TrainingError("micro_batch_size must divide batch_size")
        if self.warmup_steps >= self.total_steps and self.total_steps > 0:
            raise TrainingError("warmup_steps must be smaller than total_steps")
        if self.total_steps < 0:
            raise TrainingError("total_steps must be >= 0")


@dataclass(frozen=True)
class AblationSpec:
    """One arm of the study matrices: a named delta from the final recipe."""

    name: str = "final"
    target_mode: str = "frozen"
    masking_mode: str = "modality_aware"
    negative_scope: str = "same_bandset"
    lambda_inst: float = 0.1
    use_maps: bool = True
    ema_momentum: float = 0.99

    def __post_init__(self):
        if self.target_mode not in TARGET_MODES:
            raise TrainingError(f"unknown target_mode {self.target_mode!r}")
        if self.masking_mode not in MASKING_MODES:
            raise TrainingError(f"unknown masking_mode {self.masking_mode!r}")


# development path: cumulative additions, each row re-enabling one idea
TABLE4 = (
    AblationSpec("full_latent_mim", target_mode="ema", masking_mode="uniform_random",
                 negative_scope="global", lambda_inst=0.0, use_maps=False),
    AblationSpec("latent_mim_lite", masking_mode="uniform_random",
                 negative_scope="global", lambda_inst=0.0, use_maps=False),
    AblationSpec("modality_masking", negative_scope="global", lambda_inst=0.0, use_maps=False),
    AblationSpec("modality_patch_disc", lambda_inst=0.0, use_maps=False),
    AblationSpec("contrastive_loss", use_maps=False),
    AblationSpec("maps"),
)

# removal study: each arm strips a single component from the final recipe
TABLE5 = (
    AblationSpec("mae", target_mode="pixel"),
    AblationSpec("no_maps", use_maps=False),
    AblationSpec("random_masking", masking_mode="uniform_random"),
    AblationSpec("no_instance_contrastive", lambda_inst=0.0),
    AblationSpec("patch_disc_only", negative_scope="global", lambda_inst=0.0),
    AblationSpec("final"),
)

MATRICES = {"table4": TABLE4, "table5": TABLE5}


def ablation_matrix(name: str) -> tuple[AblationSpec, ...]:
    if name not in MATRICES:
        raise TrainingError(f"unknown ablation matrix {name!r}; have {sorted(MATRICES)}")
    return MATRICES[name]


def mask_config_for(ablation: AblationSpec, base: MaskConfig | None = None) -> MaskConfig:
    base = base or MaskConfig()
    if ablation.use_maps:
        return base
    return dataclasses.replace(base, map_probs=(1.0, 0.0, 0.0, 0.0))


def loss_config_for(ablation: AblationSpec, base: LossConfig | None = None) -> LossConfig:
    base = base or LossConfig()
    return dataclasses.replace(
        base, negative_scope=ablation.negative_scope, lambda_inst=ablation.lambda_inst
    )


# ---------------------------------------------------------------------------
# optimizer

def lr_at(step: int, config: OptimConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to the final fraction."""
    if step < 0 or step > config.total_steps:
        raise TrainingError(f"step {step} outside [0, {config.total_steps}]")
    if config.warmup_steps > 0 and step <= config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    final = config.final_lr_fraction * config.base_lr
    span = config.total_steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span
    return final + (config.base_lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    """Everything a resume needs beyond the model parameters themselves."""

    params: ModelParams
    step: int
    adam_t: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None
    seed: int
    initial_target_variance: float | None = None
    collapsed_at: int | None = None
    skipped_steps: int = 0


def init_train_state(params: ModelParams, seed: int, ablation: AblationSpec) -> TrainState:
    m = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}
    v = {name: np.zeros_like(t.data) for name, t in params.named_parameters()}
    ema = None
    if ablation.target_mode == "ema":
        ema = {name: t.data.copy() for name, t in params.named_parameters()}
    return TrainState(params=params, step=0, adam_t=0, m=m, v=v, ema=ema, seed=seed)


def adamw_step(state: TrainState, grads: dict[str, np.ndarray], lr: float, config: OptimConfig) -> bool:
    """Apply one decoupled-weight-decay Adam update in place.

    Returns False (and leaves everything untouched) when any gradient is
    non-finite; the caller decides whether that is fatal.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            return False
    t = state.adam_t + 1
    b1, b2 = config.beta1, config.beta2
    for name, tensor in state.params.named_parameters():
        g = grads[name]
        tensor.data = tensor.data * (1.0 - lr * config.weight_decay)
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / (1.0 - b1**t)
        v_hat = state.v[name] / (1.0 - b2**t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    state.adam_t = t
    return True


def _update_ema(state: TrainState, momentum: float) -> None:
    for name, tensor in state.params.named_parameters():
        state.ema[name] = momentum * state.ema[name] + (1.0 - momentum) * tensor.data


# ---------------------------------------------------------------------------
# one training step

def _ema_target_latents(batch, params: ModelParams, ema: dict[str, np.ndarray]) -> np.ndarray:
    """Full-visibility encoder pass under the averaged weights."""
    n = len(batch.sample_index)
    dim = params.model_config.encoder.model_dim
    content = np.zeros((n, dim))
    for bid, rows in batch.token_rows.items():
        w_name = f"tok.patch_w.{bid}"
        if w_name in ema and len(rows):
            content[rows] = batch.raw_patches[bid] @ ema[w_name] + ema[f"tok.patch_b.{bid}"]
    online_rows = params.learned["tok.modality"].data[batch.bandset_index]
    ema_rows = ema["tok.modality"][batch.bandset_index]
    embeddings = content + (batch.context.data - online_rows) + ema_rows
    shadow = dataclasses.replace(params, learned={k: Tensor(a) for k, a in ema.items()})
    tokens = EncoderTokens(
        embeddings=Tensor(embeddings),
        token_indices=np.arange(n),
        sample_index=batch.sample_index,
    )
    return encoder_forward(tokens, shadow).data


def _pixel_view_loss(preds: Tensor, batch, slots, params: ModelParams):
    """Mean elementwise Huber penalty against the raw (normalized) patches."""
    bandsets = params.registry.bandsets()
    total = None
    count = 0
    flat_parts = []
    for bi in np.unique(slots.bandset_index):
        bid = bandsets[int(bi)].id
        rows = np.nonzero(slots.bandset_index == bi)[0]
        raw = batch.raw_patches[bid][batch.raw_row[slots.token_indices[rows]]]
        out = ad.add(
            ad.matmul(ad.gather_rows(preds, rows), params.learned[f"head.{bid}.w"]),
            params.learned[f"head.{bid}.b"],
        )
        part = ad.reduce_sum(ad.smooth_l1(out, raw))
        total = part if total is None else ad.add(total, part)
        count += raw.size
        flat_parts.append(raw.ravel())
    flat = np.concatenate(flat_parts)
    return ad.scale(total, 1.0 / count), float(flat.var())


def micro_batch_loss(
    params: ModelParams,
    samples: list,
    num_classes: int,
    ablation: AblationSpec,
    seed: int,
    step: int,
    micro_index: int,
    ema: dict[str, np.ndarray] | None = None,
    mask_base: MaskConfig | None = None,
    loss_base: LossConfig | None = None,
) -> tuple[Tensor, LossBreakdown, float]:
    """Tokenize once, mask twice, encode and decode both views.

    Returns the (unscaled) loss node, its component breakdown, and the mean
    target variance across views.
    """
    registry = params.registry
    rngs = [
        np.random.default_rng(np.random.SeedSequence((seed, GEOMETRY_TAG, step, micro_index, i)))
        for i in range(len(samples))
    ]
    batch = assemble_batch(samples, registry, params.tokenizer_config, params.tok, rngs, num_classes)

    mask_seed = int(
        np.random.SeedSequence((seed, MASK_TAG, step, micro_index)).generate_state(1)[0]
    )
    plan_fn = sample_mask_plan if ablation.masking_mode == "modality_aware" else sample_uniform_plan
    mask_config = mask_config_for(ablation, mask_base)
    loss_config = loss_config_for(ablation, loss_base)

    ema_latents = None
    if ablation.target_mode == "ema":
        ema_latents = _ema_target_latents(batch, params, ema)

    views = []
    pooled = []
    pixel_losses = []
    tvars = []
    for view_id in (0, 1):
        plan = plan_fn(batch, mask_config, seed=mask_seed, view_id=view_id)
        enc_tokens, slots = apply_mask(batch, plan)
        latents = encoder_forward(enc_tokens, params)
        preds = decoder_forward(latents, enc_tokens.sample_index, batch, slots, params)
        pooled.append(pool_by_sample(latents, enc_tokens.sample_index, len(samples)))
        if ablation.target_mode == "pixel":
            loss, tvar = _pixel_view_loss(preds, batch, slots, params)
            pixel_losses.append(loss)
            tvars.append(tvar)
        else:
            if ablation.target_mode == "frozen":
                targets = project_targets(batch, slots, params.frozen)
            else:
                targets = ema_latents[slots.token_indices]
            views.append((preds, targets, slots.bandset_index))
            tvars.append(target_variance(targets))

    if ablation.target_mode == "pixel":
        total = ad.add(pixel_losses[0], pixel_losses[1])
        inst_value = 0.0
        if loss_config.lambda_inst > 0:
            inst = instance_contrastive_loss(pooled[0], pooled[1], loss_config.tau_inst)
            total = ad.add(total, ad.scale(inst, loss_config.lambda_inst))
            inst_value = float(inst.data)
        breakdown = LossBreakdown(
            total=float(total.data),
            patch_view0=float(pixel_losses[0].data),
            patch_view1=float(pixel_losses[1].data),
            instance=inst_value,
        )
    else:
        loss0 = patch_discrimination_loss(*views[0], registry, loss_config)
        loss1 = patch_discrimination_loss(*views[1], registry, loss_config)
        total = ad.add(loss0, loss1)
        inst_value = 0.0
        if loss_config.lambda_inst > 0:
            inst = instance_contrastive_loss(pooled[0], pooled[1], loss_config.tau_inst)
            total = ad.add(total, ad.scale(inst, loss_config.lambda_inst))
            inst_value = float(inst.data)
        breakdown = LossBreakdown(
            total=float(total.data),
            patch_view0=float(loss0.data),
            patch_view1=float(loss1.data),
            instance=inst_value,
        )
    return total, breakdown, float(np.mean(tvars))


def _batch_indices(seed: int, step: int, n: int, optim: OptimConfig) -> np.ndarray:
    batches_per_epoch = n // optim.batch_size
    if batches_per_epoch == 0:
        raise TrainingError(f"dataset of {n} samples is smaller than batch_size {optim.batch_size}")
    epoch, pos = divmod(step - 1, batches_per_epoch)
    rng = np.random.default_rng(np.random.SeedSequence((seed, ORDER_TAG, epoch)))
    perm = rng.permutation(n)
    return perm[pos * optim.batch_size : (pos + 1) * optim.batch_size]


def pretrain_step(
    state: TrainState,
    samples: list,
    num_classes: int,
    optim: OptimConfig,
    ablation: AblationSpec,
    step: int,
    mask_base: MaskConfig | None = None,
    loss_base: LossConfig | None = None,
) -> dict:
    """One optimizer step: accumulate over micro-batches, then update."""
    params = state.params
    k = optim.batch_size // optim.micro_batch_size
    indices = _batch_indices(state.seed, step, len(samples), optim)
    params.zero_grad()

    totals, v0s, v1s, insts, tvars = [], [], [], [], []
    for u in range(k):
        chunk = [samples[i] for i in indices[u * optim.micro_batch_size : (u + 1) * optim.micro_batch_size]]
        try:
            loss, breakdown, tvar = micro_batch_loss(
                params, chunk, num_classes, ablation, state.seed, step, u,
                ema=state.ema, mask_base=mask_base, loss_base=loss_base,
            )
        except Exception as exc:
            raise TrainingError(f"step {step} micro-batch {u} failed: {exc}") from exc
        if not np.isfinite(breakdown.total):
            raise TrainingError(f"non-finite loss at step {step}")
        ad.backward(ad.scale(loss, 1.0 / k))
        totals.append(breakdown.total)
        v0s.append(breakdown.patch_view0)
        v1s.append(breakdown.patch_view1)
        insts.append(breakdown.instance)
        tvars.append(tvar)

    grads = {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.named_parameters()
    }
    grad_norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    lr = lr_at(step, optim)
    applied = adamw_step(state, grads, lr, optim)
    if not applied:
        state.skipped_steps += 1
    elif state.ema is not None:
        _update_ema(state, ablation.ema_momentum)
    state.step = step

    record = {
        "step": step,
        "lr": lr,
        "loss_total": float(np.mean(totals)),
        "loss_patch_v0": float(np.mean(v0s)),
        "loss_patch_v1": float(np.mean(v1s)),
        "loss_inst": float(np.mean(insts)),
        "target_variance": float(np.mean(tvars)),
        "grad_norm": grad_norm,
    }
    if state.initial_target_variance is None:
        state.initial_target_variance = record["target_variance"]
    elif (
        state.collapsed_at is None
        and record["target_variance"] < COLLAPSE_FRACTION * state.initial_target_variance
    ):
        state.collapsed_at = step
    return record


# ---------------------------------------------------------------------------
# checkpoint plumbing for full train state

def _stats_payload(stats: NormStats) -> dict:
    return {
        "means": {k: list(v) for k, v in stats.means.items()},
        "stds": {k: list(v) for k, v in stats.stds.items()},
        "provenance": stats.provenance,
        "clamped": [[str(a), int(b)] for a, b in stats.clamped],
    }


def stats_from_payload(payload: dict) -> NormStats:
    return NormStats(
        means={k: np.asarray(v, dtype=np.float64) for k, v in payload["means"].items()},
        stds={k: np.asarray(v, dtype=np.float64) for k, v in payload["stds"].items()},
        provenance=payload["provenance"],
        clamped=tuple((str(a), int(b)) for a, b in payload["clamped"]),
    )


def save_train_state(
    path: str | Path,
    state: TrainState,
    ablation: AblationSpec,
    stats: NormStats,
    num_classes: int,
) -> None:
    extra = {
        "seed": state.seed,
        "ablation": dataclasses.asdict(ablation),
        "stats": _stats_payload(stats),
        "num_classes": num_classes,
        "initial_target_variance": state.initial_target_variance,
        "collapsed_at": state.collapsed_at,
        "skipped_steps": state.skipped_steps,
    }
    save_checkpoint(path, state.params, state.step, extra=extra)
    side = {f"m.{k}": v for k, v in state.m.items()}
    side.update({f"v.{k}": v for k, v in state.v.items()})
    if state.ema is not None:
        side.update({f"ema.{k}": v for k, v in state.ema.items()})
    side["adam_t"] = np.array(state.adam_t)
    np.savez(Path(path).with_suffix(".optim.npz"), **side)


def load_train_state(path: str | Path) -> tuple[TrainState, AblationSpec, NormStats, int, dict]:
    params, header = load_checkpoint(path)
    extra = header["extra"]
    ablation = AblationSpec(**extra["ablation"])
    stats = stats_from_payload(extra["stats"])
    side_path = Path(path).with_suffix(".optim.npz")
    if not side_path.exists():
        raise TrainingError(f"optimizer state {side_path} missing; cannot resume")
    with np.load(side_path) as side:
        m = {k[2:]: side[k].copy() for k in side.files if k.startswith("m.")}
        v = {k[2:]: side[k].copy() for k in side.files if k.startswith("v.")}
        ema = {k[4:]: side[k].copy() for k in side.files if k.startswith("ema.")} or None
        adam_t = int(side["adam_t"])
    state = TrainState(
        params=params,
        step=header["step"],
        adam_t=adam_t,
        m=m,
        v=v,
        ema=ema,
        seed=extra["seed"],
        initial_target_variance=extra["initial_target_variance"],
        collapsed_at=extra["collapsed_at"],
        skipped_steps=extra["skipped_steps"],
    )
    return state, ablation, stats, extra["num_classes"], header


# ---------------------------------------------------------------------------
# the full loop

def pretrain(
    samples: list,
    params: ModelParams,
    optim: OptimConfig,
    ablation: AblationSpec,
    out_dir: str | Path,
    seed: int,
    num_classes: int = 5,
    stats: NormStats | None = None,
    resume_from: str | Path | None = None,
    mask_base: MaskConfig | None = None,
    loss_base: LossConfig | None = None,
) -> dict:
    """Run (or continue) a pretraining job; returns a run summary.

    Raw samples go in; normalization statistics are computed from them once
    and stored in every checkpoint so evaluation can reuse them.
    """
    out = Path(out_dir)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"

    if resume_from is not None:
        state, saved_ablation, stats, saved_classes, _ = load_train_state(resume_from)
        if saved_ablation != ablation:
            raise TrainingError("checkpoint was trained under a different ablation arm")
        if saved_classes != num_classes:
            raise TrainingError("checkpoint num_classes does not match")
        if state.seed != seed:
            raise TrainingError(f"checkpoint seed {state.seed} does not match run seed {seed}")
        params = state.params
        mode = "a"
    else:
        stats = stats or compute_stats(samples, params.registry)
        state = init_train_state(params, seed, ablation)
        mode = "w"

    if ablation.target_mode == "pixel" and not params.pixel_heads:
        raise TrainingError("pixel target mode needs params built with pixel_heads=True")
    normalized = [normalize(s, stats, params.registry) for s in samples]
    frozen_hash = params.frozen.content_hash
    halted = False
    # the init is the first last-good checkpoint, so an early NaN halt
    # still leaves something to resume or inspect
    last_checkpoint = ckpt_dir / f"step_{state.step:06d}.ckpt"
    if resume_from is None:
        save_train_state(last_checkpoint, state, ablation, stats, num_classes)
    else:
        last_checkpoint = Path(resume_from)

    with metrics_path.open(mode) as metrics_file:
        for step in range(state.step + 1, optim.total_steps + 1):
            try:
                record = pretrain_step(
                    state, normalized, num_classes, optim, ablation, step,
                    mask_base=mask_base, loss_base=loss_base,
                )
            except TrainingError as exc:
                if "non-finite loss" in str(exc):
                    halted = True
                    break
                raise
            metrics_file.write(json.dumps(record, sort_keys=True) + "\n")
            if step % optim.checkpoint_every == 0 or step == optim.total_steps:
                if params.frozen.content_hash != frozen_hash or not verify_frozen(params.frozen):
                    raise TrainingError("frozen projection changed mid-run")
                last_checkpoint = ckpt_dir / f"step_{step:06d}.ckpt"
                save_train_state(last_checkpoint, state, ablation, stats, num_classes)

    final_path = ckpt_dir / "final.ckpt"
    if not halted and state.step >= optim.total_steps:
        save_train_state(final_path, state, ablation, stats, num_classes)
        last_checkpoint = final_path

    summary = {
        "steps_run": state.step,
        "halted": halted,
        "collapsed_at": state.collapsed_at,
        "initial_target_variance": state.initial_target_variance,
        "skipped_steps": state.skipped_steps,
        "final_checkpoint": str(last_checkpoint) if last_checkpoint else None,
        "metrics_path": str(metrics_path),
        "ablation": ablation.name,
        "seed": seed,
    }
    with (out / "summary.json").open("w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
    return summary
