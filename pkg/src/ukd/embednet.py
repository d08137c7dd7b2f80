"""Two-pathway tanh MLPs into a shared unit-sphere space, their losses and an SGD optimizer.

Gradients are written out by hand; there is no autodiff engine. Parameters are kept in
float64 during training and written as float32 in checkpoints.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datamodel import BadMagicError, DimensionMismatchError, TruncatedPayloadError, UnsupportedVersionError

NORM_EPS = 1e-12
MODALITIES = ("image", "text")
LAYER_ORDER = ("W1", "b1", "W2", "b2")
MODEL_MAGIC = b"UKDM"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sIIIII")
_F32_MAX = float(np.finfo(np.float32).max)


class TrainingDivergedError(RuntimeError):
    """Raised when an update or loss turns non-finite.

    ``last_good`` holds a copy of the model from before the offending step.
    """

    def __init__(self, message, last_good=None, epoch=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch
        self.step = step


@dataclass
class TrainConfig:
    learning_rate: float = 0.05
    weight_decay: float = 0.01
    batch_size: int = 64
    epochs: int = 50
    margin: float = 0.3
    seed: int = 0
    negative_samples: int = 10
    contrastive_margin: float = 1.5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.margin > 0 or not self.contrastive_margin > 0:
            raise ValueError("margins must be > 0")
        if self.negative_samples < 1:
            raise ValueError("negative_samples must be >= 1")

    def replace(self, **changes) -> TrainConfig:
        return TrainConfig(**{**self.__dict__, **changes})


@dataclass
class TwoPathwayModel:
    """Image and text pathways, each ``x -> tanh(x W1 + b1) W2 + b2`` followed by L2 normalization.

    ``params`` maps ``"<modality>.<W1|b1|W2|b2>"`` to arrays.
    """

    d_image: int
    d_text: int
    h: int
    k: int
    params: dict[str, np.ndarray]
    loss_log: list[float] = field(default_factory=list)

    def input_dim(self, modality: str) -> int:
        if modality == "image":
            return self.d_image
        if modality == "text":
            return self.d_text
        raise ValueError(f"unknown modality {modality!r}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for m in MODALITIES:
            d = self.input_dim(m)
            shapes[f"{m}.W1"] = (d, self.h)
            shapes[f"{m}.b1"] = (self.h,)
            shapes[f"{m}.W2"] = (self.h, self.k)
            shapes[f"{m}.b2"] = (self.k,)
        return shapes

    def param_count(self, modality: str | None = None) -> int:
        return sum(
            int(np.prod(s))
            for name, s in self.param_shapes().items()
            if modality is None or name.startswith(modality + ".")
        )

    def copy(self) -> TwoPathwayModel:
        return copy.deepcopy(self)

    def same_params(self, other: TwoPathwayModel) -> bool:
        return self.params.keys() == other.params.keys() and all(
            np.array_equal(v, other.params[k]) for k, v in self.params.items()
        )


@dataclass
class EmbeddingBatch:
    rows: np.ndarray
    source_modality: str
    degenerate: np.ndarray | None = None

    def __len__(self):
        return self.rows.shape[0]


def init_model(d_image: int, d_text: int, h: int, k: int, seed: int) -> TwoPathwayModel:
    """Glorot-uniform weights, zero biases. Values are float32-representable so a
    freshly initialized model survives a checkpoint round trip unchanged."""
    for name, v in (("d_image", d_image), ("d_text", d_text), ("h", h), ("k", k)):
        if int(v) < 1:
            raise ValueError(f"{name} must be >= 1")
    rng = np.random.default_rng(seed)
    params = {}
    for m, d in (("image", d_image), ("text", d_text)):
        for wname, bname, fan_in, fan_out in (("W1", "b1", d, h), ("W2", "b2", h, k)):
            a = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-a, a, size=(fan_in, fan_out))
            params[f"{m}.{wname}"] = w.astype(np.float32).astype(np.float64)
            params[f"{m}.{bname}"] = np.zeros(fan_out)
    return TwoPathwayModel(int(d_image), int(d_text), int(h), int(k), params)


def l2_normalize(v, eps: float = NORM_EPS):
    """Row-wise unit normalization.

    Returns ``(normalized, degenerate)``. Rows with norm <= ``eps`` come back as zero
    vectors and are flagged in ``degenerate``. A 1-D input gives a scalar flag.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise ValueError("l2_normalize: non-finite input")
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    degenerate = norms <= eps
    safe = np.where(degenerate, 1.0, norms)
    out = np.where(degenerate, 0.0, v / safe)
    flag = degenerate[..., 0]
    if v.ndim == 1:
        flag = bool(flag)
    return out, flag


@dataclass
class _ForwardCache:
    x: np.ndarray
    hidden: np.ndarray
    norms: np.ndarray
    out: np.ndarray


def _forward(model: TwoPathwayModel, features, modality: str):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim(modality):
        raise ValueError(
            f"{modality} pathway expects width {model.input_dim(modality)}, got shape {x.shape}"
        )
    p = model.params
    x, _ = l2_normalize(x)
    hidden = np.tanh(x @ p[f"{modality}.W1"] + p[f"{modality}.b1"])
    z = hidden @ p[f"{modality}.W2"] + p[f"{modality}.b2"]
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    degenerate = norms[:, 0] <= NORM_EPS
    out = np.where(degenerate[:, None], 0.0, z / np.where(degenerate[:, None], 1.0, norms))
    return out, degenerate, _ForwardCache(x, hidden, norms, out)


def forward(model: TwoPathwayModel, features, modality: str) -> EmbeddingBatch:
    out, degenerate, _ = _forward(model, features, modality)
    return EmbeddingBatch(out, modality, degenerate)


def _backward(model: TwoPathwayModel, cache: _ForwardCache, grad_out: np.ndarray, modality: str, grads):
    """Accumulate parameter gradients of one pathway into ``grads``."""
    p = model.params
    f = cache.out
    norms = np.where(cache.norms <= NORM_EPS, np.inf, cache.norms)
    # d(z/|z|)/dz = (I - f f^T)/|z|; degenerate rows get zero gradient via the inf norm
    gz = (grad_out - f * np.sum(f * grad_out, axis=1, keepdims=True)) / norms
    grads[f"{modality}.W2"] += cache.hidden.T @ gz
    grads[f"{modality}.b2"] += gz.sum(axis=0)
    gh = (gz @ p[f"{modality}.W2"].T) * (1.0 - cache.hidden ** 2)
    grads[f"{modality}.W1"] += cache.x.T @ gh
    grads[f"{modality}.b1"] += gh.sum(axis=0)


def zero_grads(model: TwoPathwayModel) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v) for k, v in model.params.items()}


def _safe_unit(diff: np.ndarray):
    dist = np.linalg.norm(diff, axis=-1, keepdims=True)
    unit = np.divide(diff, dist, out=np.zeros_like(diff), where=dist > 0)
    return dist[..., 0], unit


def _check_finite(*arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise ValueError("non-finite loss input")


def triplet_loss(anchor, positive, negative, margin: float):
    """Hinge triplet loss on Euclidean distances, ``max(0, |a-p| - |a-n| + margin)``.

    Works on single vectors or row-batches (last axis is the embedding). Returns the
    loss (per row for batches) and the subgradients ``(d_anchor, d_positive, d_negative)``.
    At the hinge and at zero distances the zero subgradient is taken.
    """
    a, p, n = (np.asarray(x, dtype=np.float64) for x in (anchor, positive, negative))
    _check_finite(a, p, n)
    d_ap, u_ap = _safe_unit(a - p)
    d_an, u_an = _safe_unit(a - n)
    raw = d_ap - d_an + margin
    loss = np.maximum(raw, 0.0)
    active = (raw > 0)[..., None]
    ga = np.where(active, u_ap - u_an, 0.0)
    gp = np.where(active, -u_ap, 0.0)
    gn = np.where(active, u_an, 0.0)
    if np.ndim(loss) == 0:
        loss = float(loss)
    return loss, (ga, gp, gn)


def pairwise_contrastive_loss(f_img, f_txt, similar, margin: float):
    """Distance for similar pairs, ``max(0, margin - distance)`` for dissimilar ones.

    ``similar`` may be a bool or a per-row bool array. Returns loss and ``(d_img, d_txt)``.
    """
    a, b = np.asarray(f_img, dtype=np.float64), np.asarray(f_txt, dtype=np.float64)
    _check_finite(a, b)
    sim = np.asarray(similar, dtype=bool)
    dist, unit = _safe_unit(a - b)
    hinge = margin - dist
    loss = np.where(sim, dist, np.maximum(hinge, 0.0))
    coef = np.where(sim, 1.0, np.where(hinge > 0, -1.0, 0.0))[..., None]
    ga = coef * unit
    if np.ndim(loss) == 0:
        loss = float(loss)
    return loss, (ga, -ga)


def sgd_step(model: TwoPathwayModel, grads: dict[str, np.ndarray], lr: float, weight_decay: float) -> None:
    """In-place ``w <- w - lr * (g + weight_decay * w)`` on every parameter.

    Nothing is written if any updated value would be non-finite, counting values beyond
    float32 range as non-finite since checkpoints store float32.
    """
    if grads.keys() != model.params.keys():
        raise ValueError(f"gradient keys {sorted(grads)} do not match parameters")
    updated = {}
    for name, w in model.params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name}")
        with np.errstate(over="ignore", invalid="ignore"):
            new = w - lr * (g + weight_decay * w)
        ok = np.abs(new) <= _F32_MAX
        if not ok.all():
            bad = int((~ok).sum())
            raise TrainingDivergedError(
                f"non-finite update in {name}: {bad} entries "
                f"(max |g|={np.nanmax(np.abs(g)):.3g}, lr={lr})"
            )
        updated[name] = new
    model.params.update(updated)


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: TwoPathwayModel, path) -> None:
    for name, w in model.params.items():
        if not (np.abs(w) <= _F32_MAX).all():
            raise ValueError(f"parameter {name} is not float32-representable")
    header = _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, model.d_image, model.d_text, model.h, model.k)
    with open(path, "wb") as fh:
        fh.write(header)
        for m in MODALITIES:
            for layer in LAYER_ORDER:
                fh.write(model.params[f"{m}.{layer}"].astype("<f4").tobytes())


def load_model(path) -> TwoPathwayModel:
    raw = Path(path).read_bytes()
    if raw[:4] != MODEL_MAGIC:
        raise BadMagicError(f"{path}: not a UKDM file")
    if len(raw) < _MODEL_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, d_i, d_t, h, k = _MODEL_HEADER.unpack_from(raw)
    if version != MODEL_VERSION:
        raise UnsupportedVersionError(f"{path}: version {version}")
    model = TwoPathwayModel(d_i, d_t, h, k, {})
    shapes = model.param_shapes()
    offset = _MODEL_HEADER.size
    for m in MODALITIES:
        for layer in LAYER_ORDER:
            name = f"{m}.{layer}"
            count = int(np.prod(shapes[name]))
            chunk = raw[offset: offset + 4 * count]
            if len(chunk) < 4 * count:
                raise TruncatedPayloadError(f"{path}: parameters truncated at {name}")
            model.params[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float64).reshape(shapes[name])
            offset += 4 * count
    if offset != len(raw):
        raise DimensionMismatchError(f"{path}: {len(raw) - offset} trailing bytes")
    return model
