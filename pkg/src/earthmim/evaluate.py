"""Frozen-embedding evaluation and fine-tuning.

Embeddings come from a full-visibility encoder pass over observation tokens
(maps can never be encoder inputs, so they are excluded here too), pooled
over time and then space. Downstream protocols: cosine kNN, a linear probe
swept over a fixed learning-rate grid with best-validation test selection,
and freeze-then-unfreeze fine-tuning under a plateau scheduler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import OBSERVATION, NormStats, Registry, Sample, normalize
from .masking import EncoderTokens
from .model import ModelParams, encoder_forward
from .tokenizer import TokenizerConfig, assemble_tokens

MEAN_OVER_TIME = "mean_over_time"
MAX_OVER_TIME = "max_over_time"
POOLINGS = (MEAN_OVER_TIME, MAX_OVER_TIME)

# the probe's fixed sweep grid
LR_GRID = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 5e-1)

COSINE_EPS = 1e-12


class EvalError(ValueError):
    """Raised for malformed evaluation inputs."""


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (n, dim)
    labels: np.ndarray  # (n,)
    location_ids: np.ndarray  # (n,)
    split: str
    pooling: str
    norm: str = "none"

    def __len__(self) -> int:
        return len(self.vectors)


@dataclass
class SweepResult:
    """Grid of hyperparameter points with the best-validation selection."""

    grid: tuple[dict, ...]
    val_metrics: tuple[float, ...]
    test_metrics: tuple[float, ...]

    @property
    def selected_index(self) -> int:
        return int(np.argmax(self.val_metrics))  # argmax keeps first on ties

    @property
    def selected(self) -> dict:
        i = self.selected_index
        return {
            **self.grid[i],
            "val_metric": self.val_metrics[i],
            "test_metric": self.test_metrics[i],
        }


# ---------------------------------------------------------------------------
# embedding extraction

def _eval_tokenizer_config(sample: Sample, params: ModelParams) -> TokenizerConfig:
    """Deterministic geometry: native patch size, the largest whole-grid crop."""
    p0 = params.tokenizer_config.base_patch_size
    first = next(iter(sample.rasters.values()))
    side = min(first.shape[1], first.shape[2]) // p0
    if side < 1:
        raise EvalError(f"sample smaller than one {p0}px patch")
    return TokenizerConfig(
        base_patch_size=p0,
        p_eff_choices=(p0,),
        crop_choices=(side,),
        model_dim=params.tokenizer_config.model_dim,
    )


def _observation_rows(batch, registry: Registry) -> np.ndarray:
    kinds = [registry.kind_of(bs.id) for bs in registry.bandsets()]
    return np.nonzero([kinds[bi] == OBSERVATION for bi in batch.bandset_index])[0]


def _encode_all_visible(sample: Sample, params: ModelParams, num_classes: int):
    """Latents for every observation token of one sample, plus their metas."""
    config = _eval_tokenizer_config(sample, params)
    batch = assemble_tokens(
        sample, params.registry, config, params.tok, np.random.default_rng(0), num_classes
    )
    rows = _observation_rows(batch, params.registry)
    if len(rows) == 0:
        raise EvalError("sample has no observation tokens")
    tokens = EncoderTokens(
        embeddings=ad.gather_rows(batch.embeddings, rows),
        token_indices=rows,
        sample_index=batch.sample_index[rows],
    )
    latents = encoder_forward(tokens, params)
    meta = {
        "bandset": batch.bandset_index[rows],
        "row": batch.row[rows],
        "col": batch.col[rows],
    }
    return latents, meta, batch


def _spatial_groups(meta) -> np.ndarray:
    stacked = np.stack([meta["bandset"], meta["row"], meta["col"]])
    _, inverse = np.unique(stacked, axis=1, return_inverse=True)
    return inverse


def pool_tokens(latents: np.ndarray, meta, pooling: str) -> np.ndarray:
    """Pool over time within each (bandset, row, col) cell, then over cells."""
    if pooling not in POOLINGS:
        raise EvalError(f"unknown pooling {pooling!r}")
    inverse = _spatial_groups(meta)
    n_groups = inverse.max() + 1
    pooled = np.empty((n_groups, latents.shape[1]))
    for g in range(n_groups):
        block = latents[inverse == g]
        pooled[g] = block.mean(axis=0) if pooling == MEAN_OVER_TIME else block.max(axis=0)
    return pooled.mean(axis=0)


def embed(
    params: ModelParams,
    samples: list[Sample],
    stats: NormStats,
    split: str = "train",
    pooling: str = MEAN_OVER_TIME,
    norm: str = "none",
    num_classes: int = 5,
) -> EmbeddingSet:
    if norm not in ("none", "l2"):
        raise EvalError(f"unknown norm {norm!r}")
    dim = params.model_config.encoder.model_dim
    vectors = np.empty((len(samples), dim))
    labels = np.empty(len(samples), dtype=np.int64)
    locations = np.empty(len(samples), dtype=np.int64)
    for i, sample in enumerate(samples):
        if sample.label is None:
            raise EvalError(f"sample {i} has no label")
        normalized = normalize(sample, stats, params.registry)
        latents, meta, _ = _encode_all_visible(normalized, params, num_classes)
        vectors[i] = pool_tokens(latents.data, meta, pooling)
        labels[i] = sample.label
        locations[i] = sample.location_id
    if norm == "l2":
        vectors = vectors / np.maximum(np.linalg.norm(vectors, axis=1, keepdims=True), COSINE_EPS)
    return EmbeddingSet(
        vectors=vectors, labels=labels, location_ids=locations,
        split=split, pooling=pooling, norm=norm,
    )


# ---------------------------------------------------------------------------
# splits

def split_by_location(samples: list[Sample], seed: int, fractions=(0.6, 0.2, 0.2)):
    """Disjoint train/val/test index lists, grouped by location_id."""
    if not math.isclose(sum(fractions), 1.0):
        raise EvalError("split fractions must sum to 1")
    locations = sorted({s.location_id for s in samples})
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE5)))
    order = rng.permutation(len(locations))
    n_train = int(round(fractions[0] * len(locations)))
    n_val = int(round(fractions[1] * len(locations)))
    buckets = {
        locations[i]: ("train" if pos < n_train else "val" if pos < n_train + n_val else "test")
        for pos, i in enumerate(order)
    }
    splits = {"train": [], "val": [], "test": []}
    for idx, sample in enumerate(samples):
        splits[buckets[sample.location_id]].append(idx)
    return splits["train"], splits["val"], splits["test"]


def check_no_location_leakage(*sets: EmbeddingSet) -> None:
    seen: dict[int, str] = {}
    for es in sets:
        for loc in es.location_ids:
            if loc in seen and seen[loc] != es.split:
                raise EvalError(f"location {loc} appears in both {seen[loc]} and {es.split}")
            seen[int(loc)] = es.split


# ---------------------------------------------------------------------------
# kNN

def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), COSINE_EPS)


def knn_classify(train: EmbeddingSet, queries: np.ndarray, k: int = 20) -> np.ndarray:
    """Majority vote over the k nearest by cosine similarity.

    Vote ties break by higher summed similarity, then by lower class id;
    equal similarities rank by lower training index so results never depend
    on sort internals.
    """
    if len(train) == 0:
        raise EvalError("empty training set")
    if k > len(train):
        raise EvalError(f"k={k} exceeds {len(train)} training points")
    sims = _unit(np.asarray(queries, dtype=np.float64)) @ _unit(train.vectors).T
    out = np.empty(len(sims), dtype=np.int64)
    for qi, row in enumerate(sims):
        order = np.lexsort((np.arange(len(row)), -row))[:k]
        neighbor_labels = train.labels[order]
        neighbor_sims = row[order]
        classes = np.unique(neighbor_labels)
        counts = np.array([(neighbor_labels == c).sum() for c in classes])
        summed = np.array([neighbor_sims[neighbor_labels == c].sum() for c in classes])
        best = np.lexsort((classes, -summed, -counts))[0]
        out[qi] = classes[best]
    return out


# ---------------------------------------------------------------------------
# metrics

def accuracy(pred: np.ndarray, true: np.ndarray) -> float:
    if len(pred) != len(true):
        raise EvalError("prediction/label length mismatch")
    return float((np.asarray(pred) == np.asarray(true)).mean())


def micro_f1(pred: np.ndarray, true: np.ndarray) -> float:
    pred, true = np.asarray(pred).ravel(), np.asarray(true).ravel()
    classes = np.union1d(pred, true)
    tp = sum(((pred == c) & (true == c)).sum() for c in classes)
    fp = sum(((pred == c) & (true != c)).sum() for c in classes)
    fn = sum(((pred != c) & (true == c)).sum() for c in classes)
    denom = tp + 0.5 * (fp + fn)
    return float(tp / denom) if denom else 0.0


def miou(pred: np.ndarray, true: np.ndarray) -> float:
    """Mean IoU over classes present in prediction or truth."""
    pred, true = np.asarray(pred).ravel(), np.asarray(true).ravel()
    scores = []
    for c in np.union1d(pred, true):
        inter = ((pred == c) & (true == c)).sum()
        union = ((pred == c) | (true == c)).sum()
        scores.append(inter / union)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# linear probe

def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _probe_fit(x: np.ndarray, y: np.ndarray, n_classes: int, lr: float, epochs: int):
    """Full-batch Adam on a single linear layer; zero init so runs are exact."""
    w = np.zeros((x.shape[1], n_classes))
    b = np.zeros(n_classes)
    one_hot = np.eye(n_classes)[y]
    mw = np.zeros_like(w); vw = np.zeros_like(w)
    mb = np.zeros_like(b); vb = np.zeros_like(b)
    b1, b2, eps = 0.9, 0.999, 1e-8
    for t in range(1, epochs + 1):
        p = _softmax_np(x @ w + b)
        gz = (p - one_hot) / len(x)
        gw, gb = x.T @ gz, gz.sum(axis=0)
        mw = b1 * mw + (1 - b1) * gw; vw = b2 * vw + (1 - b2) * gw * gw
        mb = b1 * mb + (1 - b1) * gb; vb = b2 * vb + (1 - b2) * gb * gb
        w -= lr * (mw / (1 - b1**t)) / (np.sqrt(vw / (1 - b2**t)) + eps)
        b -= lr * (mb / (1 - b1**t)) / (np.sqrt(vb / (1 - b2**t)) + eps)
    return w, b


def linear_probe(
    train: EmbeddingSet,
    val: EmbeddingSet,
    test: EmbeddingSet,
    lr_grid: tuple[float, ...] = LR_GRID,
    epochs: int = 50,
) -> SweepResult:
    classes = np.unique(train.labels)
    if len(classes) < 2:
        raise EvalError("linear probe needs at least two classes in the training split")
    n_classes = int(train.labels.max()) + 1
    val_metrics, test_metrics = [], []
    for lr in lr_grid:
        w, b = _probe_fit(train.vectors, train.labels, n_classes, lr, epochs)
        val_metrics.append(accuracy((val.vectors @ w + b).argmax(axis=1), val.labels))
        test_metrics.append(accuracy((test.vectors @ w + b).argmax(axis=1), test.labels))
    return SweepResult(
        grid=tuple({"lr": lr} for lr in lr_grid),
        val_metrics=tuple(val_metrics),
        test_metrics=tuple(test_metrics),
    )


# ---------------------------------------------------------------------------
# fine-tuning

@dataclass(frozen=True)
class FinetuneRecipe:
    total_epochs: int
    freeze_fraction: float = 0.2
    plateau_factor: float = 0.2
    patience: int = 2
    cooldown: int = 10
    head: str = "linear"  # linear | mlp3 | seg

    def __post_init__(self):
        if not (0 <= self.freeze_fraction < 1):
            raise EvalError("freeze_fraction must be in [0, 1)")
        if self.head not in ("linear", "mlp3", "seg"):
            raise EvalError(f"unknown head kind {self.head!r}")

    @property
    def freeze_epochs(self) -> int:
        return math.ceil(self.freeze_fraction * self.total_epochs)


class PlateauScheduler:
    """Cut the lr by a fixed factor after `patience` stale epochs, then rest."""

    def __init__(self, lr: float, factor: float, patience: int, cooldown: int):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.cooldown = cooldown
        self.best = -math.inf
        self.bad = 0
        self.cooling = 0
        self.cuts: list[int] = []
        self.epoch = 0

    def step(self, metric: float) -> float:
        self.epoch += 1
        improved = metric > self.best
        if improved:
            self.best = metric
        if self.cooling > 0:
            self.cooling -= 1
            self.bad = 0
        elif improved:
            self.bad = 0
        else:
            self.bad += 1
            if self.bad >= self.patience:
                self.lr *= self.factor
                self.cuts.append(self.epoch)
                self.cooling = self.cooldown
                self.bad = 0
        return self.lr


def _cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    n, c = logits.data.shape
    shift = logits.data.max(axis=1, keepdims=True)
    lse = ad.add(
        ad.log(ad.reduce_sum(ad.exp(ad.add(logits, Tensor(-shift))), axis=1)),
        Tensor(shift[:, 0]),
    )
    pick = np.zeros((n, c))
    pick[np.arange(n), labels] = 1.0
    own = ad.reduce_sum(ad.multiply(logits, Tensor(pick)), axis=1)
    return ad.reduce_mean(ad.add(lse, ad.scale(own, -1.0)))


def _init_head(recipe: FinetuneRecipe, dim: int, n_classes: int, p0: int, rng) -> dict[str, Tensor]:
    def w(shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n), requires_grad=True)

    if recipe.head == "linear":
        return {"w": w((dim, n_classes)), "b": zeros(n_classes)}
    if recipe.head == "mlp3":
        return {
            "w1": w((dim, dim)), "b1": zeros(dim),
            "w2": w((dim, dim)), "b2": zeros(dim),
            "w3": w((dim, n_classes)), "b3": zeros(n_classes),
        }
    # seg: two stride-matched transposed convolutions, 4x then 2x back to pixels
    if p0 != 8:
        raise EvalError("segmentation head upsamples 8x; base patch size must be 8")
    hidden = 32
    return {
        "w1": w((dim, 4 * 4 * hidden)), "b1": zeros(4 * 4 * hidden),
        "w2": w((hidden, 2 * 2 * n_classes)), "b2": zeros(2 * 2 * n_classes),
    }


def _head_forward(recipe: FinetuneRecipe, head: dict[str, Tensor], pooled: Tensor) -> Tensor:
    if recipe.head == "linear":
        return ad.add(ad.matmul(pooled, head["w"]), head["b"])
    h = ad.gelu(ad.add(ad.matmul(pooled, head["w1"]), head["b1"]))
    h = ad.gelu(ad.add(ad.matmul(h, head["w2"]), head["b2"]))
    return ad.add(ad.matmul(h, head["w3"]), head["b3"])


def _depth_to_space(x: Tensor, gh: int, gw: int, k: int, c: int) -> Tensor:
    # (gh*gw, k*k*c) -> (gh*k*gw*k, c) in row-major pixel order
    x = ad.reshape(x, (gh, gw, k, k, c))
    x = ad.transpose(x, (0, 2, 1, 3, 4))
    return ad.reshape(x, (gh * k * gw * k, c))


def _seg_forward(head: dict[str, Tensor], cells: Tensor, gh: int, gw: int, n_classes: int) -> Tensor:
    hidden = head["w1"].data.shape[1] // 16
    x = _depth_to_space(ad.add(ad.matmul(cells, head["w1"]), head["b1"]), gh, gw, 4, hidden)
    x = ad.gelu(x)
    return _depth_to_space(ad.add(ad.matmul(x, head["w2"]), head["b2"]), gh * 4, gw * 4, 2, n_classes)


def _mean_pool_weights(meta) -> np.ndarray:
    """(1, N) weights realizing mean-over-time-then-space as one matmul."""
    inverse = _spatial_groups(meta)
    n_groups = inverse.max() + 1
    weights = np.zeros((1, len(inverse)))
    for g in range(n_groups):
        rows = inverse == g
        weights[0, rows] = 1.0 / (rows.sum() * n_groups)
    return weights


def _cell_pool_weights(meta) -> tuple[np.ndarray, int, int]:
    """(gh*gw, N) weights pooling each spatial cell over time and bandsets."""
    rows, cols = meta["row"], meta["col"]
    gh, gw = int(rows.max()) + 1, int(cols.max()) + 1
    weights = np.zeros((gh * gw, len(rows)))
    cell = rows * gw + cols
    for g in range(gh * gw):
        members = cell == g
        if not members.any():
            raise EvalError("spatial cell with no tokens")
        weights[g, members] = 1.0 / members.sum()
    return weights, gh, gw


def _finetune_forward(params, head, recipe, sample: Sample, num_classes: int):
    latents, meta, batch = _encode_all_visible(sample, params, num_classes)
    if recipe.head == "seg":
        weights, gh, gw = _cell_pool_weights(meta)
        cells = ad.matmul(Tensor(weights), latents)
        logits = _seg_forward(head, cells, gh, gw, num_classes)
        p0 = params.tokenizer_config.base_patch_size
        target = _seg_target(sample, params.registry, gh * p0, gw * p0)
        return logits, target
    pooled = ad.matmul(Tensor(_mean_pool_weights(meta)), latents)
    return _head_forward(recipe, head, pooled), None


def _seg_target(sample: Sample, registry: Registry, h: int, w: int) -> np.ndarray:
    maps = registry.map_bandsets()
    if not maps:
        raise EvalError("segmentation needs a map modality")
    raster = sample.rasters[maps[0].id]
    if raster.shape[1] != h or raster.shape[2] != w:
        raise EvalError("segmentation needs images that tile exactly into base patches")
    return raster[0, :, :, 0].ravel().astype(np.int64)


class _AdamDict:
    """Adam over a name->Tensor dict; decay and update only the active set."""

    def __init__(self, tensors: dict[str, Tensor], weight_decay: float = 0.0):
        self.tensors = tensors
        self.wd = weight_decay
        self.m = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in tensors.items()}
        self.t = 0

    def step(self, lr: float, active: set[str]) -> None:
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        for name in sorted(active):
            tensor = self.tensors[name]
            g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
            tensor.data = tensor.data * (1.0 - lr * self.wd)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def _finetune_metric(recipe, params, head, samples, stats, num_classes) -> float:
    correct_fn = miou if recipe.head == "seg" else accuracy
    preds, trues = [], []
    for sample in samples:
        normalized = normalize(sample, stats, params.registry)
        logits, target = _finetune_forward(params, head, recipe, normalized, num_classes)
        pred = logits.data.argmax(axis=-1)
        if recipe.head == "seg":
            preds.append(pred)
            trues.append(target)
        else:
            preds.append(int(pred[0]))
            trues.append(sample.label)
    return correct_fn(np.concatenate(preds) if recipe.head == "seg" else np.array(preds),
                      np.concatenate(trues) if recipe.head == "seg" else np.array(trues))


def finetune(
    params: ModelParams,
    train: list[Sample],
    val: list[Sample],
    test: list[Sample],
    recipe: FinetuneRecipe,
    lr: float,
    stats: NormStats,
    num_classes: int = 5,
    seed: int = 0,
    weight_decay: float = 0.0,
) -> dict:
    """Freeze-then-unfreeze training; returns history and the best-val test metric."""
    if not val:
        raise EvalError("fine-tuning needs a validation split")
    dim = params.model_config.encoder.model_dim
    p0 = params.tokenizer_config.base_patch_size
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF1)))
    head = _init_head(recipe, dim, num_classes, p0, rng)

    encoder_names = set(dict(params.named_parameters()))
    tensors = {**dict(params.named_parameters()), **{f"ft.{k}": t for k, t in head.items()}}
    head_names = set(tensors) - encoder_names
    opt = _AdamDict(tensors, weight_decay)
    sched = PlateauScheduler(lr, recipe.plateau_factor, recipe.patience, recipe.cooldown)

    normalized_train = [normalize(s, stats, params.registry) for s in train]
    best = {"val": -math.inf, "epoch": 0, "arrays": None}
    history = []
    for epoch in range(1, recipe.total_epochs + 1):
        frozen = epoch <= recipe.freeze_epochs
        for name in encoder_names:
            tensors[name].requires_grad = not frozen
        for t in tensors.values():
            t.grad = None

        total = None
        for sample in normalized_train:
            logits, target = _finetune_forward(params, head, recipe, sample, num_classes)
            labels = target if recipe.head == "seg" else np.array([sample.label])
            loss = _cross_entropy(logits, labels)
            total = loss if total is None else ad.add(total, loss)
        ad.backward(ad.scale(total, 1.0 / len(normalized_train)))

        encoder_grad_norm = math.sqrt(sum(
            float((tensors[n].grad ** 2).sum()) for n in encoder_names
            if tensors[n].grad is not None
        ))
        active = head_names if frozen else set(tensors)
        current_lr = sched.lr
        opt.step(current_lr, active)

        val_metric = _finetune_metric(recipe, params, head, val, stats, num_classes)
        sched.step(val_metric)
        history.append({
            "epoch": epoch, "lr": current_lr, "val_metric": val_metric,
            "frozen": frozen, "encoder_grad_norm": encoder_grad_norm,
        })
        if val_metric > best["val"]:
            best = {
                "val": val_metric, "epoch": epoch,
                "arrays": {k: t.data.copy() for k, t in tensors.items()},
            }

    if best["arrays"] is not None:
        for k, t in tensors.items():
            t.data = best["arrays"][k]
    for name in encoder_names:
        tensors[name].requires_grad = True
    test_metric = _finetune_metric(recipe, params, head, test, stats, num_classes) if test else None
    return {
        "history": history,
        "best_epoch": best["epoch"],
        "best_val": best["val"],
        "test_metric": test_metric,
        "lr_cuts": sched.cuts,
        "freeze_epochs": recipe.freeze_epochs,
        "head": head,
    }


# ---------------------------------------------------------------------------
# cross-model comparison

def rank_summary(metrics: dict[str, dict[str, float]]) -> dict:
    """Tie-averaged inverted ranks per task, averaged per model.

    `metrics` maps model -> task -> score (higher is better); a model simply
    missing a task is excluded from that task's ranking.
    """
    from scipy.stats import rankdata

    models = sorted(metrics)
    if len(models) < 2:
        raise EvalError("ranking needs at least two models")
    tasks = sorted({t for scores in metrics.values() for t in scores})
    if not tasks:
        raise EvalError("ranking needs at least one task")

    per_task: dict[str, dict[str, float]] = {}
    for task in tasks:
        present = [m for m in models if task in metrics[m]]
        scores = np.array([metrics[m][task] for m in present])
        ranks = rankdata(-scores, method="average")
        n = len(present)
        per_task[task] = {m: float((n - r + 1) / n) for m, r in zip(present, ranks)}

    averages = {}
    for m in models:
        values = [per_task[t][m] for t in tasks if m in per_task[t]]
        averages[m] = float(np.mean(values)) if values else None
    return {"tasks": per_task, "average": averages}
