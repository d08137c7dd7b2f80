"""Unsupervised triplet training on paired data.

The loop here is shared by the GEN-0 teacher (positives are the paired counterparts only)
and by the unsupervised student (positives also come from a distilled pair set).
Nothing in this module accepts labels.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .datamodel import PairedDataset
from .embednet import (
    MODALITIES,
    TrainConfig,
    TrainingDivergedError,
    TwoPathwayModel,
    _backward,
    _forward,
    init_model,
    sgd_step,
    triplet_loss,
    zero_grads,
)

log = logging.getLogger(__name__)

HARD_POOL = 64
STRATEGIES = ("uniform", "hard")


def other_modality(modality: str) -> str:
    return "text" if modality == "image" else "image"


class LinkIndex:
    """Undirected S-links of every instance, always including the instance itself (S_ii = 1).

    Stored as CSR rows plus a sorted key array ``i * N + j`` for fast membership tests.
    """

    def __init__(self, n: int, i=None, j=None):
        if n < 1:
            raise ValueError("empty dataset")
        diag = np.arange(n, dtype=np.int64)
        if i is None:
            ii = jj = diag
        else:
            i, j = np.asarray(i, np.int64), np.asarray(j, np.int64)
            if i.size and (max(i.max(), j.max()) >= n or min(i.min(), j.min()) < 0):
                raise IndexError("pair index out of range")
            ii = np.concatenate([diag, i, j])
            jj = np.concatenate([diag, j, i])
        keys = np.unique(ii * n + jj)
        self.n = n
        self.keys = keys
        rows = keys // n
        self.indices = keys % n
        self.indptr = np.searchsorted(rows, np.arange(n + 1))

    @classmethod
    def from_pairs(cls, n: int, pairs=None) -> LinkIndex:
        if pairs is None:
            return cls(n)
        return cls(n, pairs.i, pairs.j)

    def degree(self, i) -> np.ndarray:
        return self.indptr[np.asarray(i) + 1] - self.indptr[np.asarray(i)]

    def neighbors(self, i: int) -> np.ndarray:
        return self.indices[self.indptr[i]: self.indptr[i + 1]]

    def contains(self, i, j) -> np.ndarray:
        q = np.asarray(i, np.int64) * self.n + np.asarray(j, np.int64)
        pos = np.searchsorted(self.keys, q)
        pos = np.minimum(pos, len(self.keys) - 1)
        return self.keys[pos] == q

    def sample_positive(self, anchors: np.ndarray, rng) -> np.ndarray:
        deg = self.degree(anchors)
        offs = (rng.random(len(anchors)) * deg).astype(np.int64)
        return self.indices[self.indptr[anchors] + np.minimum(offs, deg - 1)]

    def sample_unlinked(self, anchors: np.ndarray, count: int, rng) -> np.ndarray:
        """``count`` uniform draws per anchor among instances not linked to it."""
        if (self.degree(anchors) >= self.n).any():
            raise ValueError("negative pool exhausted: an anchor is linked to every instance")
        anchors = np.repeat(np.asarray(anchors, np.int64)[:, None], count, axis=1)
        out = rng.integers(0, self.n, size=anchors.shape)
        bad = self.contains(anchors, out)
        while bad.any():
            out[bad] = rng.integers(0, self.n, size=int(bad.sum()))
            bad = self.contains(anchors, out)
        return out


@dataclass
class TripletBatch:
    """Cross-modal triplets: anchors come from ``anchor_modality``, positives and
    negatives from the other modality. ``negatives`` is B x neg_per_anchor."""

    anchors: np.ndarray
    anchor_modality: str
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def target_modality(self) -> str:
        return other_modality(self.anchor_modality)

    def __len__(self):
        return len(self.anchors)


def _draw_batch(
    dataset: PairedDataset,
    links: LinkIndex,
    anchors: np.ndarray,
    anchor_modality: str,
    neg_per_anchor: int,
    strategy: str,
    model: TwoPathwayModel | None,
    rng,
) -> TripletBatch:
    positives = links.sample_positive(anchors, rng)
    if strategy == "uniform":
        negatives = links.sample_unlinked(anchors, neg_per_anchor, rng)
    elif strategy == "hard":
        if model is None:
            raise ValueError("hard negative mining needs a model")
        pool_size = max(neg_per_anchor, min(HARD_POOL, dataset.n - 1))
        pool = links.sample_unlinked(anchors, pool_size, rng)
        target = other_modality(anchor_modality)
        fa, _, _ = _forward(model, dataset.features(anchor_modality)[anchors], anchor_modality)
        fc, _, _ = _forward(model, dataset.features(target)[pool.ravel()], target)
        fc = fc.reshape(len(anchors), pool_size, -1)
        sims = np.einsum("bk,bpk->bp", fa, fc)
        # highest similarity first; ties resolved by pool position
        order = np.argsort(-sims, axis=1, kind="stable")[:, :neg_per_anchor]
        negatives = np.take_along_axis(pool, order, axis=1)
    else:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    return TripletBatch(np.asarray(anchors, np.int64), anchor_modality, positives, negatives)


def sample_triplets(
    dataset: PairedDataset,
    pairs,
    batch: int,
    neg_per_anchor: int,
    strategy: str = "uniform",
    model: TwoPathwayModel | None = None,
    seed=None,
    anchor_modality: str = "image",
) -> TripletBatch:
    """Draw ``batch`` anchors uniformly (with replacement) and build triplets for them.

    ``pairs`` is a RelevantPairSet, a prebuilt LinkIndex, or None for paired-only positives.
    """
    if dataset.n < 2:
        raise ValueError("need at least two instances to draw negatives")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    if strategy == "hard" and model is None:
        raise ValueError("hard negative mining needs a model")
    links = pairs if isinstance(pairs, LinkIndex) else LinkIndex.from_pairs(dataset.n, pairs)
    rng = np.random.default_rng(seed)
    anchors = rng.integers(0, dataset.n, size=batch)
    return _draw_batch(dataset, links, anchors, anchor_modality, neg_per_anchor, strategy, model, rng)


def triplet_batch_loss(model: TwoPathwayModel, dataset: PairedDataset, batch: TripletBatch, margin: float):
    """Mean triplet loss over every (anchor, negative) combination and its parameter gradients."""
    am, tm = batch.anchor_modality, batch.target_modality
    b, n_neg = batch.negatives.shape
    fa, _, cache_a = _forward(model, dataset.features(am)[batch.anchors], am)
    target_rows = np.concatenate([batch.positives, batch.negatives.ravel()])
    ft, _, cache_t = _forward(model, dataset.features(tm)[target_rows], tm)
    fp, fn = ft[:b], ft[b:].reshape(b, n_neg, -1)

    losses, (ga, gp, gn) = triplet_loss(fa[:, None, :], fp[:, None, :], fn, margin)
    scale = 1.0 / (b * n_neg)
    grad_a = ga.sum(axis=1) * scale
    grad_t = np.concatenate([gp.sum(axis=1), gn.reshape(b * n_neg, -1)]) * scale
    grads = zero_grads(model)
    _backward(model, cache_a, grad_a, am, grads)
    _backward(model, cache_t, grad_t, tm, grads)
    return float(losses.mean()), grads


def train_triplets(
    dataset: PairedDataset,
    links: LinkIndex,
    config: TrainConfig,
    strategy: str = "uniform",
    k: int = 32,
    h: int | None = None,
) -> TwoPathwayModel:
    """Shared triplet loop. Batches alternate between image- and text-anchored triplets."""
    if dataset.n < 3:
        raise ValueError("training needs N >= 3")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    h = 4 * k if h is None else h
    model = init_model(dataset.d_image, dataset.d_text, h, k, config.seed)
    rng = np.random.default_rng([config.seed, 0x7EAC])
    n, bs = dataset.n, config.batch_size
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, bs)):
            anchors = perm[start: start + bs]
            modality = MODALITIES[(step + epoch) % 2]
            batch = _draw_batch(dataset, links, anchors, modality, config.negative_samples, strategy, model, rng)
            loss, grads = triplet_batch_loss(model, dataset, batch, config.margin)
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}", model.copy(), epoch, step)
            try:
                sgd_step(model, grads, config.learning_rate, config.weight_decay)
            except TrainingDivergedError as err:
                raise TrainingDivergedError(
                    f"epoch {epoch} step {step}: {err}", model.copy(), epoch, step
                ) from err
            losses.append(loss)
        model.loss_log.append(float(np.mean(losses)))
        log.debug("epoch %d mean triplet loss %.5f", epoch, model.loss_log[-1])
    return model


def train_teacher(
    dataset: PairedDataset,
    config: TrainConfig,
    strategy: str = "uniform",
    k: int = 32,
    h: int | None = None,
) -> TwoPathwayModel:
    """GEN-0 teacher: positives are only the paired counterparts (S = I)."""
    return train_triplets(dataset, LinkIndex(dataset.n), config, strategy, k, h)


def write_loss_log(model: TwoPathwayModel, path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss\n")
        for e, v in enumerate(model.loss_log):
            fh.write(f"{e},{v!r}\n")
