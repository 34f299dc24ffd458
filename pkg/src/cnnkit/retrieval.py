"""Embedding head for image retrieval: GeM pooling, additive angular margin logits, recall@k."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .nn.module import Linear, Module
from .nn.spec import ModelSpec
from .tensor import Parameter, Tensor, backward, clamp, no_grad, recording, sqrt

NORM_TOL = 1e-4
WEIGHT_NORM_TOL = 1e-6


def gem_pool(x: Tensor, p=3.0) -> Tensor:
    """``(mean over H, W of x^p)^(1/p)`` per channel -> (N, C)."""
    return F.gem(x, p)


# --------------------------------------------------------------------------
# margin logits
# --------------------------------------------------------------------------

@dataclass
class ArcFaceParams:
    """Margin (radians), scale, and the raw (D, K) class weight; columns are normalized on use."""

    weight: Parameter
    margin: float = 0.3
    scale: float = 30.0

    def __post_init__(self):
        if not 0.0 <= self.margin < math.pi / 2:
            raise ValueError(f"margin must lie in [0, pi/2), got {self.margin}")
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    @classmethod
    def create(cls, dim: int, num_classes: int, margin: float = 0.3, scale: float = 30.0, seed: int = 0,
               dtype=np.float32):
        w = np.random.default_rng([seed, 0xA2CF]).standard_normal((dim, num_classes))
        return cls(Parameter(w.astype(dtype), name="arcface.weight"), margin, scale)

    def normalized_weight(self) -> Tensor:
        return F.l2_normalize(self.weight, axis=0)


def _check_unit(x: np.ndarray, axis: int, tol: float, what: str) -> None:
    dev = np.abs(np.sqrt((x.astype(np.float64) ** 2).sum(axis=axis)) - 1.0)
    if dev.size and dev.max() > tol:
        raise ValueError(f"{what} must be L2-normalized (max norm deviation {dev.max():.3g} > {tol:g})")


def cosine_logits(features: Tensor, weight: Tensor, scale: float = 30.0) -> Tensor:
    """``s * cos(theta_j)`` for unit features (N, D) and unit class columns (D, K)."""
    _check_unit(features.data, 1, NORM_TOL, "features")
    _check_unit(weight.data, 0, WEIGHT_NORM_TOL, "class weight columns")
    return F.fully_connected(features, weight) * scale


def arcface_logits(features: Tensor, weight: Tensor, labels, margin: float = 0.3, scale: float = 30.0) -> Tensor:
    """Cosine logits with the true-class entry replaced by ``cos(theta + m)``, all scaled by ``s``."""
    _check_unit(features.data, 1, NORM_TOL, "features")
    _check_unit(weight.data, 0, WEIGHT_NORM_TOL, "class weight columns")
    labels = np.asarray(labels)
    k = weight.shape[1]
    if labels.shape != (features.shape[0],) or (labels.size and (labels.min() < 0 or labels.max() >= k)):
        raise ValueError(f"labels must be {features.shape[0]} class ids in [0, {k})")
    c = F.fully_connected(features, weight)
    sin = sqrt(clamp(1.0 - c * c, 1e-12, None))
    phi = c * math.cos(margin) - sin * math.sin(margin)
    onehot = np.zeros(c.shape, dtype=c.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return (c + (phi - c) * Tensor(onehot)) * scale


# --------------------------------------------------------------------------
# head and backbone wrapper
# --------------------------------------------------------------------------

class EmbeddingHead(Module):
    """GeM pool, linear projection to ``dim``, optional L2 normalization."""

    def __init__(self, in_channels: int, dim: int = 1536, p: float = 3.0, trainable_p: bool = False,
                 normalize: bool = True):
        super().__init__()
        if p < 1 or dim < 1:
            raise ValueError("GeM exponent must be >= 1 and the feature dim >= 1")
        self.dim, self.normalize = dim, normalize
        if trainable_p:
            self.p = Parameter(np.array([p], np.float32), kind="gem_p", init=f"const:{p}")
        else:
            self.p_value = float(p)
        self.trainable_p = trainable_p
        self.proj = Linear(in_channels, dim)

    def pool(self, x: Tensor) -> Tensor:
        return gem_pool(x, self.p if self.trainable_p else self.p_value)

    def forward(self, x: Tensor) -> Tensor:
        e = self.proj(self.pool(x))
        return F.l2_normalize(e, axis=1) if self.normalize else e


class RetrievalNet(Module):
    """Backbone features (no classifier) followed by an :class:`EmbeddingHead`."""

    def __init__(self, backbone, head: EmbeddingHead):
        super().__init__()
        self.backbone, self.head = backbone, head
        self.spec = backbone.spec

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.backbone.features(x))


def stage4_stride_off(spec: ModelSpec) -> ModelSpec:
    """Same network without downsampling in the last stage; parameters are unchanged."""
    return spec.replace(last_stage_stride=1)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------

def recall_at_k(query: np.ndarray, query_labels, gallery: np.ndarray | None = None, gallery_labels=None,
                k: int = 1) -> float:
    """Fraction of queries with a same-class item among their ``k`` cosine nearest neighbours.

    Without a gallery the queries are their own gallery and self-matches are excluded.
    """
    q = np.asarray(query, np.float64)
    ql = np.asarray(query_labels)
    self_gallery = gallery is None
    g = q if self_gallery else np.asarray(gallery, np.float64)
    gl = ql if self_gallery else np.asarray(gallery_labels)
    size = len(g) - (1 if self_gallery else 0)
    if k < 1 or k > size:
        raise ValueError(f"k must lie in [1, {size}], got {k}")
    qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    gn = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    sim = qn @ gn.T
    if self_gallery:
        np.fill_diagonal(sim, -np.inf)
    nn = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    hits = (gl[nn] == ql[:, None]).any(axis=1)
    return float(hits.mean())


def recall_report(query, query_labels, gallery=None, gallery_labels=None, ks=(1, 2, 4, 8)) -> dict:
    size = len(query if gallery is None else gallery) - (1 if gallery is None else 0)
    return {f"recall@{k}": recall_at_k(query, query_labels, gallery, gallery_labels, k) for k in ks if k <= size}


# --------------------------------------------------------------------------
# synthetic embedding task
# --------------------------------------------------------------------------

def synthetic_embedding_task(n_per_class: int = 64, num_classes: int = 8, in_dim: int = 32,
                             noise: float = 1.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian class clusters with random centres of norm ``sqrt(in_dim)`` plus a shared nuisance direction."""
    rng = np.random.default_rng([seed, 0xE3B])
    centres = rng.standard_normal((num_classes, in_dim))
    nuisance = rng.standard_normal(in_dim) * 2.0
    labels = np.repeat(np.arange(num_classes), n_per_class)
    x = centres[labels] + noise * rng.standard_normal((len(labels), in_dim))
    x = x + rng.standard_normal((len(labels), 1)) * nuisance
    order = rng.permutation(len(labels))
    return x[order].astype(np.float64), labels[order]


class LinearEmbedder(Module):
    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.proj = Linear(in_dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        return F.l2_normalize(self.proj(x), axis=1)


def fit_embedding(x: np.ndarray, labels: np.ndarray, dim: int = 16, loss: str = "arcface", margin: float = 0.3,
                  scale: float = 30.0, epochs: int = 60, batch: int = 64, lr: float = 0.1, seed: int = 0):
    """Train a linear embedder with the ArcFace or plain softmax loss; returns ``(embedder, params)``."""
    from .train.schedule import SGD

    k = int(labels.max()) + 1
    emb = LinearEmbedder(x.shape[1], dim)
    emb.initialize(seed)
    emb.to(np.float64)
    params = ArcFaceParams.create(dim, k, margin if loss == "arcface" else 0.0, scale, seed, np.float64)
    opt = SGD(list(emb.parameters()) + [params.weight], momentum=0.9, weight_decay=0.0)
    rng = np.random.default_rng([seed, 0xF17])
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(x), batch):
            idx = order[i:i + batch]
            opt.zero_grad()
            with recording() as tape:
                f = emb(Tensor(x[idx]))
                w = params.normalized_weight()
                logits = (arcface_logits(f, w, labels[idx], params.margin, params.scale) if loss == "arcface"
                          else cosine_logits(f, w, params.scale))
                target = np.eye(k)[labels[idx]]
                out = F.softmax_cross_entropy(logits, target)
                backward(out, tape)
            opt.step(lr)
    return emb, params


def embed(embedder: Module, x: np.ndarray) -> np.ndarray:
    with no_grad():
        return embedder(Tensor(x)).data
