"""Students trained under a distilled pair set, and the generation chain.

Both students start from a fresh initialization and never see labels.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import LabelSet, PairedDataset, SplitSpec
from .distill import RelevantPairSet, build_relevant_pairs
from .embednet import (
    TrainConfig,
    TrainingDivergedError,
    TwoPathwayModel,
    _backward,
    _forward,
    init_model,
    pairwise_contrastive_loss,
    sgd_step,
    zero_grads,
)
from .retrieval import EvalReport, evaluate_cross_modal
from .teacher import LinkIndex, train_triplets

STUDENT_KINDS = ("us", "ss")


class SimilarPool:
    """Similar pairs for the supervised student: the distilled pairs in both orientations
    plus every paired (i, i)."""

    def __init__(self, n: int, pairs: RelevantPairSet):
        self.links = LinkIndex.from_pairs(n, pairs)
        keys = self.links.keys
        self.i = keys // n
        self.j = keys % n
        self.n = n

    def __len__(self):
        return self.i.size

    def sample_similar(self, count: int, rng):
        idx = rng.integers(0, len(self), size=count)
        return self.i[idx], self.j[idx]

    def sample_dissimilar(self, count: int, rng):
        if len(self) >= self.n * self.n:
            raise ValueError("no dissimilar pairs left to sample")
        i = rng.integers(0, self.n, size=count)
        j = rng.integers(0, self.n, size=count)
        bad = self.links.contains(i, j)
        while bad.any():
            m = int(bad.sum())
            i[bad] = rng.integers(0, self.n, size=m)
            j[bad] = rng.integers(0, self.n, size=m)
            bad = self.links.contains(i, j)
        return i, j


def contrastive_batch_loss(model, dataset, img_idx, txt_idx, similar, margin):
    fi, _, cache_i = _forward(model, dataset.image_features[img_idx], "image")
    ft, _, cache_t = _forward(model, dataset.text_features[txt_idx], "text")
    losses, (gi, gt) = pairwise_contrastive_loss(fi, ft, similar, margin)
    scale = 1.0 / len(img_idx)
    grads = zero_grads(model)
    _backward(model, cache_i, gi * scale, "image", grads)
    _backward(model, cache_t, gt * scale, "text", grads)
    return float(losses.mean()), grads


def train_student_supervised(
    dataset: PairedDataset,
    pairs: RelevantPairSet,
    config: TrainConfig,
    k: int = 16,
    h: int | None = None,
) -> TwoPathwayModel:
    """Contrastive student: each step takes B similar pairs from S and B uniform
    dissimilar pairs from its complement, all as (image i, text j)."""
    if pairs is None or len(pairs) == 0:
        raise ValueError("supervised student needs a non-empty pair set")
    if dataset.n < 3:
        raise ValueError("training needs N >= 3")
    h = 4 * k if h is None else h
    model = init_model(dataset.d_image, dataset.d_text, h, k, config.seed)
    pool = SimilarPool(dataset.n, pairs)
    rng = np.random.default_rng([config.seed, 0x55])
    bs = config.batch_size
    steps = -(-dataset.n // bs)
    similar = np.repeat([True, False], bs)
    for epoch in range(config.epochs):
        losses = []
        for step in range(steps):
            si, sj = pool.sample_similar(bs, rng)
            di, dj = pool.sample_dissimilar(bs, rng)
            loss, grads = contrastive_batch_loss(
                model, dataset, np.concatenate([si, di]), np.concatenate([sj, dj]), similar, config.contrastive_margin
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} step {step}", model.copy(), epoch, step)
            try:
                sgd_step(model, grads, config.learning_rate, config.weight_decay)
            except TrainingDivergedError as err:
                raise TrainingDivergedError(f"epoch {epoch} step {step}: {err}", model.copy(), epoch, step) from err
            losses.append(loss)
        model.loss_log.append(float(np.mean(losses)))
    return model


def train_student_unsupervised(
    dataset: PairedDataset,
    pairs: RelevantPairSet,
    config: TrainConfig,
    k: int = 16,
    h: int | None = None,
    strategy: str = "uniform",
) -> TwoPathwayModel:
    """The teacher's triplet loop with positives drawn from S (plus the paired counterpart)."""
    return train_triplets(dataset, LinkIndex.from_pairs(dataset.n, pairs), config, strategy, k, h)


def train_student(kind: str, dataset, pairs, config, k, h=None, strategy="uniform") -> TwoPathwayModel:
    if kind == "ss":
        return train_student_supervised(dataset, pairs, config, k, h)
    if kind == "us":
        return train_student_unsupervised(dataset, pairs, config, k, h, strategy)
    raise ValueError(f"student kind must be one of {STUDENT_KINDS}, got {kind!r}")


@dataclass
class DistillConfig:
    k_img: int = 20
    k_txt: int = 20
    budget: int | None = None
    per_instance_k: int = 20

    def for_kind(self, kind: str) -> dict:
        """Pair-set sizing. The supervised student uses the global budget when one is set;
        otherwise both students keep ``per_instance_k`` pairs per anchor."""
        if kind == "ss" and self.budget is not None:
            return {"total_budget": self.budget}
        return {"per_instance_k": self.per_instance_k}


@dataclass
class GenerationRecord:
    generation: int
    kind: str
    model: TwoPathwayModel
    pair_set: RelevantPairSet | None = None
    eval: dict[str, EvalReport] = field(default_factory=dict)
    parent: GenerationRecord | None = None


def distill_pairs(prev_model, train_set, distill: DistillConfig, kind: str) -> RelevantPairSet:
    return build_relevant_pairs(prev_model, train_set, distill.k_img, distill.k_txt, **distill.for_kind(kind))


def run_generation(
    prev: GenerationRecord,
    dataset: PairedDataset,
    labels: LabelSet | None,
    split: SplitSpec,
    config: TrainConfig,
    student_kind: str,
    distill: DistillConfig,
    k: int,
    h: int | None = None,
    k_list=(1, 10, 100, 500),
) -> GenerationRecord:
    """Distill from the previous generation, train a fresh student on the retrieval set,
    and evaluate it when labels are given."""
    train_set = dataset.subset(split.retrieval_indices)
    pairs = distill_pairs(prev.model, train_set, distill, student_kind)
    model = train_student(student_kind, train_set, pairs, config, k, h)
    rec = GenerationRecord(prev.generation + 1, student_kind, model, pairs, parent=prev)
    if labels is not None:
        rec.eval = {d: evaluate_cross_modal(model, dataset, labels, split, d, k_list) for d in ("i2t", "t2i")}
    return rec
