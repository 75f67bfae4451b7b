"""Pre-norm ViT encoder and shallow cross-attending decoder.

The encoder runs full self-attention over every visible token of a sample
(space, time, and modality at once); samples sharing a batch are isolated
by an additive attention mask. The decoder turns each target slot into a
MASK-token query carrying the slot's positional, temporal, and modality
context, lets queries self-attend (toggleable), and cross-attends them to
the encoder latents of their own sample.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Registry, registry_from_dict, registry_to_dict
from .masking import EncoderTokens, TargetSlots
from .objectives import FrozenProjection, _hash_arrays, create_frozen_projection
from .tokenizer import TokenBatch, TokenizerConfig, TokenizerParams

NEG_INF = -1e30

CHECKPOINT_MAGIC = b"EMCK"
CHECKPOINT_VERSION = 1

ATTN_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


class ModelError(ValueError):
    """Raised for invalid configs, empty inputs, or bad checkpoints."""


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 2
    model_dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.model_dim % self.heads:
            raise ModelError("model_dim must be divisible by heads")


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 2


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    decoder_query_self_attention: bool = True


# encoder presets; the decoder keeps the encoder's width and head count
PRESETS: dict[str, ModelConfig] = {
    "desk": ModelConfig(EncoderConfig(depth=2, model_dim=64, heads=4), DecoderConfig(depth=2)),
    "nano": ModelConfig(EncoderConfig(depth=4, model_dim=128, heads=8), DecoderConfig(depth=4)),
}


@dataclass
class ModelParams:
    """All run state: learned tensors by name, plus the frozen projections.

    ``learned`` is the optimizer's entire world; the frozen projections are
    deliberately not Tensors so no gradient path can reach them.
    """

    registry: Registry
    model_config: ModelConfig
    tokenizer_config: TokenizerConfig
    learned: dict[str, Tensor]
    tok: TokenizerParams
    frozen: FrozenProjection
    init_seed: int
    pixel_heads: bool = False

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.learned.items())

    def zero_grad(self) -> None:
        for t in self.learned.values():
            t.grad = None


def _init_attn(learned, prefix, dim, rng):
    for name in ("wq", "wk", "wv", "wo"):
        learned[f"{prefix}.{name}"] = Tensor(rng.normal(0.0, 0.02, size=(dim, dim)), requires_grad=True)
    for name in ("bq", "bk", "bv", "bo"):
        learned[f"{prefix}.{name}"] = Tensor(np.zeros(dim), requires_grad=True)


def _init_ln(learned, prefix, dim):
    learned[f"{prefix}.g"] = Tensor(np.ones(dim), requires_grad=True)
    learned[f"{prefix}.b"] = Tensor(np.zeros(dim), requires_grad=True)


def _init_mlp(learned, prefix, dim, ratio, rng):
    hidden = int(dim * ratio)
    learned[f"{prefix}.w1"] = Tensor(rng.normal(0.0, 0.02, size=(dim, hidden)), requires_grad=True)
    learned[f"{prefix}.b1"] = Tensor(np.zeros(hidden), requires_grad=True)
    learned[f"{prefix}.w2"] = Tensor(rng.normal(0.0, 0.02, size=(hidden, dim)), requires_grad=True)
    learned[f"{prefix}.b2"] = Tensor(np.zeros(dim), requires_grad=True)


def init_model_params(
    registry: Registry,
    model_config: ModelConfig,
    tokenizer_config: TokenizerConfig,
    seed: int,
    pixel_heads: bool = False,
) -> ModelParams:
    if tokenizer_config.model_dim != model_config.encoder.model_dim:
        raise ModelError("tokenizer and encoder disagree on model_dim")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x10)))
    dim = model_config.encoder.model_dim
    ratio = model_config.encoder.mlp_ratio
    p0 = tokenizer_config.base_patch_size
    learned: dict[str, Tensor] = {}

    for bs in registry.observation_bandsets():
        learned[f"tok.patch_w.{bs.id}"] = Tensor(
            rng.normal(0.0, 0.02, size=(p0 * p0 * bs.band_count, dim)), requires_grad=True
        )
        learned[f"tok.patch_b.{bs.id}"] = Tensor(np.zeros(dim), requires_grad=True)
    learned["tok.modality"] = Tensor(
        rng.normal(0.0, 0.02, size=(len(registry.bandsets()), dim)), requires_grad=True
    )

    for i in range(model_config.encoder.depth):
        _init_ln(learned, f"enc.{i}.ln1", dim)
        _init_attn(learned, f"enc.{i}.attn", dim, rng)
        _init_ln(learned, f"enc.{i}.ln2", dim)
        _init_mlp(learned, f"enc.{i}.mlp", dim, ratio, rng)
    _init_ln(learned, "enc.out_ln", dim)

    for i in range(model_config.decoder.depth):
        _init_ln(learned, f"dec.{i}.lnq", dim)
        if model_config.decoder_query_self_attention:
            _init_attn(learned, f"dec.{i}.self", dim, rng)
        _init_ln(learned, f"dec.{i}.lnx", dim)
        _init_attn(learned, f"dec.{i}.cross", dim, rng)
        _init_ln(learned, f"dec.{i}.ln2", dim)
        _init_mlp(learned, f"dec.{i}.mlp", dim, ratio, rng)
    _init_ln(learned, "dec.out_ln", dim)
    learned["mask_token"] = Tensor(rng.normal(0.0, 0.02, size=(1, dim)), requires_grad=True)

    if pixel_heads:
        # per-bandset linear readouts back to patch pixels, for the
        # reconstruction-target ablation; absent from the default model
        for bs in registry.bandsets():
            out_dim = p0 * p0 * bs.band_count
            learned[f"head.{bs.id}.w"] = Tensor(
                rng.normal(0.0, 0.02, size=(dim, out_dim)), requires_grad=True
            )
            learned[f"head.{bs.id}.b"] = Tensor(np.zeros(out_dim), requires_grad=True)

    tok = TokenizerParams(
        patch_w={bs.id: learned[f"tok.patch_w.{bs.id}"] for bs in registry.observation_bandsets()},
        patch_b={bs.id: learned[f"tok.patch_b.{bs.id}"] for bs in registry.observation_bandsets()},
        modality_table=learned["tok.modality"],
    )
    frozen = create_frozen_projection(registry, p0, dim, seed)
    return ModelParams(
        registry=registry,
        model_config=model_config,
        tokenizer_config=tokenizer_config,
        learned=learned,
        tok=tok,
        frozen=frozen,
        init_seed=seed,
        pixel_heads=pixel_heads,
    )


def closed_form_param_count(
    registry: Registry,
    model_config: ModelConfig,
    tokenizer_config: TokenizerConfig,
    pixel_heads: bool = False,
) -> int:
    d = model_config.encoder.model_dim
    h = int(d * model_config.encoder.mlp_ratio)
    p0 = tokenizer_config.base_patch_size
    attn = 4 * (d * d + d)
    ln = 2 * d
    mlp = d * h + h + h * d + d
    count = sum(p0 * p0 * bs.band_count * d + d for bs in registry.observation_bandsets())
    count += len(registry.bandsets()) * d
    count += model_config.encoder.depth * (attn + 2 * ln + mlp) + ln
    dec_block = 3 * ln + attn + mlp
    if model_config.decoder_query_self_attention:
        dec_block += attn
    count += model_config.decoder.depth * dec_block + ln
    count += d  # mask token
    if pixel_heads:
        count += sum(d * p0 * p0 * bs.band_count + p0 * p0 * bs.band_count for bs in registry.bandsets())
    return count


def param_count(params: ModelParams) -> int:
    return sum(t.data.size for _, t in params.named_parameters())


# ---------------------------------------------------------------------------
# forward passes

def _affine_ln(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    normed = ad.layer_norm(x)
    return ad.add(ad.multiply(normed, params.learned[f"{prefix}.g"]), params.learned[f"{prefix}.b"])


def _heads_split(x: Tensor, heads: int) -> Tensor:
    n, d = x.data.shape
    return ad.transpose(ad.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _attention(
    q_in: Tensor, kv_in: Tensor, mask: np.ndarray, params: ModelParams, prefix: str, heads: int
) -> Tensor:
    p = {name: params.learned[f"{prefix}.{name}"] for name in ATTN_NAMES}
    n, d = q_in.data.shape
    dh = d // heads
    q = _heads_split(ad.add(ad.matmul(q_in, p["wq"]), p["bq"]), heads)
    k = _heads_split(ad.add(ad.matmul(kv_in, p["wk"]), p["bk"]), heads)
    v = _heads_split(ad.add(ad.matmul(kv_in, p["wv"]), p["bv"]), heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), dh**-0.5)
    attn = ad.softmax(ad.add(scores, Tensor(mask)), axis=-1)
    mixed = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (n, d))
    return ad.add(ad.matmul(mixed, p["wo"]), p["bo"])


def _mlp(x: Tensor, params: ModelParams, prefix: str) -> Tensor:
    hidden = ad.gelu(
        ad.add(ad.matmul(x, params.learned[f"{prefix}.w1"]), params.learned[f"{prefix}.b1"])
    )
    return ad.add(ad.matmul(hidden, params.learned[f"{prefix}.w2"]), params.learned[f"{prefix}.b2"])


def _same_sample_mask(q_samples: np.ndarray, kv_samples: np.ndarray) -> np.ndarray:
    """Additive mask: 0 within a sample, a large negative across samples.

    The negative is far below the float64 exp underflow point, so masked
    attention weights are exactly zero and co-batched samples cannot leak
    into each other even at the last bit.
    """
    return np.where(q_samples[:, None] == kv_samples[None, :], 0.0, NEG_INF)


def encoder_forward(encoder_tokens: EncoderTokens, params: ModelParams) -> Tensor:
    """Latents for every visible token, isolated per sample."""
    if encoder_tokens.embeddings.data.shape[0] == 0:
        raise ModelError("encoder needs at least one token")
    cfg = params.model_config.encoder
    mask = _same_sample_mask(encoder_tokens.sample_index, encoder_tokens.sample_index)
    x = encoder_tokens.embeddings
    for i in range(cfg.depth):
        normed = _affine_ln(x, params, f"enc.{i}.ln1")
        x = ad.add(x, _attention(normed, normed, mask, params, f"enc.{i}.attn", cfg.heads))
        x = ad.add(x, _mlp(_affine_ln(x, params, f"enc.{i}.ln2"), params, f"enc.{i}.mlp"))
    return _affine_ln(x, params, "enc.out_ln")


def decoder_forward(
    latents: Tensor,
    latent_sample_index: np.ndarray,
    batch: TokenBatch,
    slots: TargetSlots,
    params: ModelParams,
) -> Tensor:
    """Predictions for every target slot.

    Queries start as the learned MASK token plus the slot's context
    embedding (positional + temporal + modality); content never enters.
    """
    if latents.data.shape[0] == 0:
        raise ModelError("decoder needs encoder latents to condition on")
    if len(slots.token_indices) == 0:
        raise ModelError("decoder needs at least one target slot")
    cfg = params.model_config.encoder
    depth = params.model_config.decoder.depth
    x = ad.add(params.learned["mask_token"], ad.gather_rows(batch.context, slots.token_indices))
    self_mask = _same_sample_mask(slots.sample_index, slots.sample_index)
    cross_mask = _same_sample_mask(slots.sample_index, latent_sample_index)
    for i in range(depth):
        if params.model_config.decoder_query_self_attention:
            q = _affine_ln(x, params, f"dec.{i}.lnq")
            x = ad.add(x, _attention(q, q, self_mask, params, f"dec.{i}.self", cfg.heads))
        x = ad.add(
            x,
            _attention(
                _affine_ln(x, params, f"dec.{i}.lnx"), latents, cross_mask, params, f"dec.{i}.cross", cfg.heads
            ),
        )
        x = ad.add(x, _mlp(_affine_ln(x, params, f"dec.{i}.ln2"), params, f"dec.{i}.mlp"))
    return _affine_ln(x, params, "dec.out_ln")


def pool_instance(latents: Tensor) -> Tensor:
    """Mean over tokens; the sample-level embedding."""
    if latents.data.shape[0] == 0:
        raise ModelError("cannot pool zero tokens")
    return ad.reduce_mean(latents, axis=0)


def pool_by_sample(latents: Tensor, sample_index: np.ndarray, n_samples: int) -> Tensor:
    """(n_samples x dim) matrix of per-sample mean latents."""
    if latents.data.shape[0] == 0:
        raise ModelError("cannot pool zero tokens")
    weights = np.zeros((n_samples, len(sample_index)))
    for si in range(n_samples):
        rows = sample_index == si
        count = rows.sum()
        if count == 0:
            raise ModelError(f"sample {si} has no tokens to pool")
        weights[si, rows] = 1.0 / count
    return ad.matmul(Tensor(weights), latents)


# ---------------------------------------------------------------------------
# checkpoints: magic + version + JSON header + named little-endian arrays

def _config_payload(params: ModelParams) -> dict:
    mc, tc = params.model_config, params.tokenizer_config
    return {
        "encoder": {
            "depth": mc.encoder.depth,
            "model_dim": mc.encoder.model_dim,
            "heads": mc.encoder.heads,
            "mlp_ratio": mc.encoder.mlp_ratio,
        },
        "decoder": {"depth": mc.decoder.depth},
        "decoder_query_self_attention": mc.decoder_query_self_attention,
        "tokenizer": {
            "base_patch_size": tc.base_patch_size,
            "p_eff_choices": list(tc.p_eff_choices),
            "crop_choices": list(tc.crop_choices),
            "model_dim": tc.model_dim,
        },
        "registry": registry_to_dict(params.registry),
        "init_seed": params.init_seed,
        "pixel_heads": params.pixel_heads,
    }


def save_checkpoint(path: str | Path, params: ModelParams, step: int, extra: dict | None = None) -> None:
    arrays: list[tuple[str, np.ndarray]] = [(name, t.data) for name, t in params.named_parameters()]
    for bid in sorted(params.frozen.weights):
        arrays.append((f"frozen.{bid}.w", params.frozen.weights[bid]))
        arrays.append((f"frozen.{bid}.b", params.frozen.biases[bid]))
    header = {
        "format_version": CHECKPOINT_VERSION,
        "step": step,
        "config": _config_payload(params),
        "frozen_seed": params.frozen.seed,
        "frozen_hash": params.frozen.content_hash,
        "arrays": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr).astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ModelError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"unsupported checkpoint version {version}")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + header_len].decode())

    offset = 16 + header_len
    values: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape)
        values[entry["name"]] = arr.astype(np.float64)
        offset += size * 8

    cfg = header["config"]
    registry = registry_from_dict(cfg["registry"])
    model_config = ModelConfig(
        encoder=EncoderConfig(**cfg["encoder"]),
        decoder=DecoderConfig(**cfg["decoder"]),
        decoder_query_self_attention=cfg["decoder_query_self_attention"],
    )
    tokenizer_config = TokenizerConfig(
        base_patch_size=cfg["tokenizer"]["base_patch_size"],
        p_eff_choices=tuple(cfg["tokenizer"]["p_eff_choices"]),
        crop_choices=tuple(cfg["tokenizer"]["crop_choices"]),
        model_dim=cfg["tokenizer"]["model_dim"],
    )

    params = init_model_params(
        registry, model_config, tokenizer_config, cfg["init_seed"],
        pixel_heads=cfg.get("pixel_heads", False),
    )
    for name, tensor in params.named_parameters():
        if name not in values:
            raise ModelError(f"checkpoint missing array {name!r}")
        if values[name].shape != tensor.data.shape:
            raise ModelError(f"checkpoint array {name!r} has wrong shape")
        tensor.data = values[name].copy()

    weights = {bid: values[f"frozen.{bid}.w"] for bid in params.frozen.weights}
    biases = {bid: values[f"frozen.{bid}.b"] for bid in params.frozen.biases}
    for arr in list(weights.values()) + list(biases.values()):
        arr.setflags(write=False)
    frozen = FrozenProjection(
        weights=weights,
        biases=biases,
        seed=header["frozen_seed"],
        content_hash=header["frozen_hash"],
    )
    if _hash_arrays(weights, biases) != header["frozen_hash"]:
        raise ModelError("frozen projection hash mismatch: targets were altered")
    params.frozen = frozen
    return params, header
