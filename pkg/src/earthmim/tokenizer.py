"""Samples to token sequences.

A token is one base-size patch of one bandset at one timestep. Effective
patch size is varied by resizing the cropped input rather than by changing
projection weights, so every learned projection has a fixed shape. Each
token's embedding is patch content (observations only) plus 2D sincos
positional, sinusoidal temporal, and learned per-bandset modality parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import MAP, Registry, Sample, bandset_raster

SINCOS_BASE = 10000.0

# months enter the temporal embedding; static tokens carry this sentinel
# and get a zero temporal component
NO_MONTH = -1


class TokenizerError(ValueError):
    """Raised for invalid shapes, unknown bandsets, or bad configs."""


@dataclass(frozen=True)
class TokenizerConfig:
    base_patch_size: int = 8
    p_eff_choices: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8)
    crop_choices: tuple[int, ...] = tuple(range(1, 13))
    model_dim: int = 64

    def __post_init__(self):
        if self.model_dim % 4:
            raise TokenizerError("model_dim must be divisible by 4 for 2D sincos")
        if min(self.p_eff_choices) < 1 or min(self.crop_choices) < 1:
            raise TokenizerError("patch sizes and crop sides must be positive")


@dataclass(frozen=True)
class TokenMeta:
    """Identity of one token; enough to rebuild its context embedding."""

    modality_id: str
    bandset_id: str
    t: int
    row: int
    col: int


@dataclass
class TokenizerParams:
    """Learned tokenizer state.

    Patch projections exist only for observation bandsets: map content never
    enters the encoder, so a map projection would be dead weight. The
    modality table covers every bandset because decoder queries need map
    rows too.
    """

    patch_w: dict[str, Tensor]
    patch_b: dict[str, Tensor]
    modality_table: Tensor


def init_tokenizer_params(registry: Registry, config: TokenizerConfig, rng: np.random.Generator) -> TokenizerParams:
    d = config.model_dim
    p0 = config.base_patch_size
    patch_w, patch_b = {}, {}
    for bs in registry.observation_bandsets():
        patch_w[bs.id] = Tensor(rng.normal(0.0, 0.02, size=(p0 * p0 * bs.band_count, d)), requires_grad=True)
        patch_b[bs.id] = Tensor(np.zeros(d), requires_grad=True)
    table = Tensor(rng.normal(0.0, 0.02, size=(len(registry.bandsets()), d)), requires_grad=True)
    return TokenizerParams(patch_w=patch_w, patch_b=patch_b, modality_table=table)


@dataclass
class TokenBatch:
    """Tokens for a list of samples, concatenated in canonical order.

    ``embeddings`` feed the encoder; ``context`` (positional + temporal +
    modality, no content) seeds decoder queries so masked content never
    leaks. Raw patches are grouped per bandset for target projection;
    ``token_rows`` maps each group row back to its token index.
    """

    embeddings: Tensor
    context: Tensor
    sample_index: np.ndarray
    bandset_index: np.ndarray
    timestep: np.ndarray
    month: np.ndarray
    row: np.ndarray
    col: np.ndarray
    raw_patches: dict[str, np.ndarray]
    token_rows: dict[str, np.ndarray]
    raw_row: np.ndarray
    boundaries: np.ndarray
    crop_side: np.ndarray
    p_eff: np.ndarray
    crop_clamped: np.ndarray
    registry: Registry = field(repr=False, default=None)

    def __len__(self) -> int:
        return int(self.embeddings.data.shape[0])

    def meta(self, i: int) -> TokenMeta:
        bs = self.registry.bandsets()[self.bandset_index[i]]
        return TokenMeta(
            modality_id=bs.modality_id,
            bandset_id=bs.id,
            t=int(self.timestep[i]),
            row=int(self.row[i]),
            col=int(self.col[i]),
        )


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with half-pixel centers and edge clamping.

    Constant inputs come back exactly constant, which downstream tests rely
    on.
    """
    h, w = image.shape[:2]
    if (out_h, out_w) == (h, w):
        return image.copy()

    def axis_weights(n_in: int, n_out: int):
        centers = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.clip(np.floor(centers).astype(np.intp), 0, n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = np.clip(centers - lo, 0.0, 1.0)
        return lo, hi, frac

    lo, hi, fy = axis_weights(h, out_h)
    rows = image[lo] * (1.0 - fy)[:, None, None] + image[hi] * fy[:, None, None]
    lo, hi, fx = axis_weights(w, out_w)
    return rows[:, lo] * (1.0 - fx)[None, :, None] + rows[:, hi] * fx[None, :, None]


def flexi_patchify(raster: np.ndarray, p_eff: int, p0: int) -> np.ndarray:
    """Resize by p0/p_eff, then cut non-overlapping p0-square patches.

    Returns (grid_h * grid_w, p0 * p0 * bands) in row-major grid order, where
    grid_h = H / p_eff.
    """
    h, w, c = raster.shape
    if h % p_eff or w % p_eff:
        raise TokenizerError(f"raster {h}x{w} not divisible by effective patch size {p_eff}")
    gh, gw = h // p_eff, w // p_eff
    resized = bilinear_resize(raster, gh * p0, gw * p0)
    patches = resized.reshape(gh, p0, gw, p0, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(patches).reshape(gh * gw, p0 * p0 * c)


def patch_project(patches: np.ndarray, bandset_id: str, params: TokenizerParams) -> np.ndarray:
    """Linear projection of raw patches into model space (numpy view)."""
    if bandset_id not in params.patch_w:
        raise TokenizerError(f"no learned projection for bandset {bandset_id!r}")
    w, b = params.patch_w[bandset_id], params.patch_b[bandset_id]
    if patches.shape[1] != w.data.shape[0]:
        raise TokenizerError(
            f"patch dim {patches.shape[1]} does not match projection input {w.data.shape[0]}"
        )
    return patches @ w.data + b.data


@lru_cache(maxsize=64)
def pos_embed_2d_sincos(dim: int, rows: int, cols: int) -> np.ndarray:
    """(rows*cols, dim) grid embedding: first half row identity, second half column."""
    if dim % 4:
        raise TokenizerError("positional embedding dim must be divisible by 4")
    half = dim // 2
    grid_r, grid_c = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    out = np.concatenate(
        [_sincos_1d(half, grid_r.ravel()), _sincos_1d(half, grid_c.ravel())], axis=1
    )
    out.setflags(write=False)
    return out


def _sincos_1d(dim: int, positions: np.ndarray) -> np.ndarray:
    omega = SINCOS_BASE ** (-np.arange(dim // 2) / (dim // 2))
    angles = positions[:, None].astype(np.float64) * omega[None]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def temporal_embed(dim: int, month_index: int) -> np.ndarray:
    """1D sinusoidal embedding of a month index; zeros for static tokens."""
    if dim % 2:
        raise TokenizerError("temporal embedding dim must be even")
    if month_index == NO_MONTH:
        return np.zeros(dim)
    return _sincos_1d(dim, np.asarray([month_index]))[0]


def _draw_geometry(sample: Sample, config: TokenizerConfig, rng: np.random.Generator):
    """Per-sample draws: effective patch size, crop side in tokens, crop origin."""
    h, w = next(iter(sample.rasters.values())).shape[1:3]
    p_eff = int(rng.choice(config.p_eff_choices))
    side = int(rng.choice(config.crop_choices))
    max_side = min(h, w) // p_eff
    if max_side < 1:
        raise TokenizerError(f"effective patch size {p_eff} exceeds raster side {min(h, w)}")
    clamped = side > max_side
    side = min(side, max_side)
    y0 = int(rng.integers(0, h - side * p_eff + 1))
    x0 = int(rng.integers(0, w - side * p_eff + 1))
    return p_eff, side, y0, x0, clamped


def assemble_batch(
    samples: list[Sample],
    registry: Registry,
    config: TokenizerConfig,
    params: TokenizerParams,
    rngs: list[np.random.Generator],
    num_classes: int,
) -> TokenBatch:
    """Tokenize a batch, sharing one crop and patch size within each sample.

    Content projection is one matrix product per observation bandset across
    the whole batch, which keeps the training step away from per-token
    Python loops.
    """
    if len(samples) != len(rngs):
        raise TokenizerError("one rng per sample required")
    bandsets = registry.bandsets()
    bs_order = {bs.id: i for i, bs in enumerate(bandsets)}
    d = config.model_dim

    sample_index, bandset_index, timestep, month, row, col = ([] for _ in range(6))
    context_rows: list[np.ndarray] = []
    raw_groups: dict[str, list[np.ndarray]] = {bs.id: [] for bs in bandsets}
    group_rows: dict[str, list[int]] = {bs.id: [] for bs in bandsets}
    boundaries = [0]
    crop_sides, p_effs, clamps = [], [], []

    n_tokens = 0
    for si, (sample, rng) in enumerate(zip(samples, rngs)):
        p_eff, side, y0, x0, clamped = _draw_geometry(sample, config, rng)
        crop_sides.append(side)
        p_effs.append(p_eff)
        clamps.append(clamped)
        extent = side * p_eff
        pos = pos_embed_2d_sincos(d, side, side)
        grid_r, grid_c = np.divmod(np.arange(side * side), side)

        for bs in bandsets:
            pres = sample.presence.get(bs.id)
            if pres is None or not pres.any():
                continue
            raster = bandset_raster(sample, registry, bs.id, num_classes)
            static = registry.is_static(bs.id)
            for t in np.nonzero(pres)[0]:
                crop = raster[t, y0 : y0 + extent, x0 : x0 + extent]
                patches = flexi_patchify(crop, p_eff, config.base_patch_size)
                k = patches.shape[0]
                raw_groups[bs.id].append(patches)
                group_rows[bs.id].extend(range(n_tokens, n_tokens + k))
                m = NO_MONTH if static else int(sample.timestamps[t])
                context_rows.append(pos + temporal_embed(d, m))
                sample_index.extend([si] * k)
                bandset_index.extend([bs_order[bs.id]] * k)
                timestep.extend([int(t)] * k)
                month.extend([m] * k)
                row.extend(grid_r)
                col.extend(grid_c)
                n_tokens += k
        boundaries.append(n_tokens)

    if n_tokens == 0:
        raise TokenizerError("batch produced no tokens")

    bandset_index = np.asarray(bandset_index, dtype=np.intp)
    const_context = np.concatenate(context_rows)
    context = ad.add(Tensor(const_context), ad.gather_rows(params.modality_table, bandset_index))

    # grouped content projection, then a permutation gather back to token order
    blocks: list[Tensor] = []
    source_row = np.full(n_tokens, -1, dtype=np.intp)
    offset = 0
    for bs in registry.observation_bandsets():
        rows_b = group_rows[bs.id]
        if not rows_b:
            continue
        stacked = np.concatenate(raw_groups[bs.id])
        blocks.append(ad.add(ad.matmul(Tensor(stacked), params.patch_w[bs.id]), params.patch_b[bs.id]))
        source_row[rows_b] = offset + np.arange(len(rows_b))
        offset += len(rows_b)
    blocks.append(Tensor(np.zeros((1, d))))  # content for map tokens
    source_row[source_row < 0] = offset
    content = ad.gather_rows(ad.concat(blocks, axis=0), source_row)

    raw_patches = {
        bid: np.concatenate(groups) for bid, groups in raw_groups.items() if groups
    }
    token_rows = {
        bid: np.asarray(rows_b, dtype=np.intp) for bid, rows_b in group_rows.items() if rows_b
    }
    raw_row = np.empty(n_tokens, dtype=np.intp)
    for rows_b in token_rows.values():
        raw_row[rows_b] = np.arange(len(rows_b))
    return TokenBatch(
        embeddings=ad.add(content, context),
        context=context,
        sample_index=np.asarray(sample_index, dtype=np.intp),
        bandset_index=bandset_index,
        timestep=np.asarray(timestep, dtype=np.int64),
        month=np.asarray(month, dtype=np.int64),
        row=np.asarray(row, dtype=np.int64),
        col=np.asarray(col, dtype=np.int64),
        raw_patches=raw_patches,
        token_rows=token_rows,
        raw_row=raw_row,
        boundaries=np.asarray(boundaries, dtype=np.intp),
        crop_side=np.asarray(crop_sides, dtype=np.int64),
        p_eff=np.asarray(p_effs, dtype=np.int64),
        crop_clamped=np.asarray(clamps, dtype=bool),
        registry=registry,
    )


def assemble_tokens(
    sample: Sample,
    registry: Registry,
    config: TokenizerConfig,
    params: TokenizerParams,
    rng: np.random.Generator,
    num_classes: int,
) -> TokenBatch:
    """Single-sample convenience wrapper around :func:`assemble_batch`."""
    return assemble_batch([sample], registry, config, params, [rng], num_classes)
