"""Projection heads into the shared embedding space, and the training loss.

Queries (sketch or text features) pass through two affine layers with a
ReLU in between; pooled image features pass through a single affine layer
with a ReLU. Both heads end with L2 normalization, so every embedding is
a unit vector and distance reduces to 1 - dot.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import ParamStore, Tensor


@dataclass
class LossConfig:
    """Margin for the contrastive cosine loss; 0 <= margin < 1."""

    margin: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.margin < 1.0:
            raise ValueError(f"margin must be in [0, 1), got {self.margin}")


@dataclass
class QueryHead:
    """Two affine layers (raw query dim -> hidden -> embed dim)."""

    store: ParamStore
    prefix: str = "query."

    @property
    def w1(self) -> Tensor:
        return self.store[self.prefix + "w1"]

    @property
    def b1(self) -> Tensor:
        return self.store[self.prefix + "b1"]

    @property
    def w2(self) -> Tensor:
        return self.store[self.prefix + "w2"]

    @property
    def b2(self) -> Tensor:
        return self.store[self.prefix + "b2"]

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def output_dim(self) -> int:
        return self.w2.shape[0]


@dataclass
class ImageHead:
    """Single affine layer (grid channels -> embed dim)."""

    store: ParamStore
    prefix: str = "image."

    @property
    def w(self) -> Tensor:
        return self.store[self.prefix + "w"]

    @property
    def b(self) -> Tensor:
        return self.store[self.prefix + "b"]

    @property
    def input_dim(self) -> int:
        return self.w.shape[1]

    @property
    def output_dim(self) -> int:
        return self.w.shape[0]


def embed_query(raw: Tensor, head: QueryHead) -> Tensor:
    """Project a raw query feature vector to a unit-norm embedding."""
    hidden = ad.relu(ad.add(ad.matmul(head.w1, raw), head.b1))
    out = ad.add(ad.matmul(head.w2, hidden), head.b2)
    return ad.l2_normalize(out)


def embed_image(pooled: Tensor, head: ImageHead) -> Tensor:
    """Project a pooled image feature vector to a unit-norm embedding."""
    out = ad.relu(ad.add(ad.matmul(head.w, pooled), head.b))
    return ad.l2_normalize(out)


def cosine_embedding_loss(q: Tensor, f: Tensor, y: int, cfg: LossConfig) -> Tensor:
    """Pull positives to cosine 1, push negatives below the margin.

    y=+1 gives 1 - cos(q, f); y=-1 gives max(0, cos(q, f) - margin).
    """
    if y not in (1, -1):
        raise ValueError(f"pair label must be +1 or -1, got {y}")
    c = ad.cosine_similarity(q, f)
    if y == 1:
        return ad.affine(c, -1.0, 1.0)
    return ad.relu(ad.affine(c, 1.0, -cfg.margin))


def multi_query_loss(terms: list[tuple[Tensor, Tensor]], y: int,
                     cfg: LossConfig) -> Tensor:
    """Cumulative loss over the (query, image) embedding pairs of one
    multi-object example; the pair is positive or negative as a whole."""
    if not terms:
        raise ValueError("multi_query_loss needs at least one (q, f) term")
    total = cosine_embedding_loss(terms[0][0], terms[0][1], y, cfg)
    for q, f in terms[1:]:
        total = ad.add(total, cosine_embedding_loss(q, f, y, cfg))
    return total
