"""Sequential soft attention over an image's spatial feature grid.

An LSTM controller emits one attention map per step. Each map is a
probability distribution over the grid locations; pooling under it gives
one feature vector per step. Steps are chained: the pooled feature of
step i feeds the controller at step i+1, so the maps are sequentially
dependent. The controller sees only grid-derived inputs, which keeps
image embeddings computable without the query and lets retrieval
precompute them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .errors import DimensionError


@dataclass
class FeatureGrid:
    """Spatial CNN features: grid_h x grid_w locations, ``channels`` each.

    ``values`` is the (L, channels) location-major matrix with
    L = grid_h * grid_w.
    """

    grid_h: int
    grid_w: int
    channels: int
    values: Tensor

    def __post_init__(self):
        if self.grid_h <= 0 or self.grid_w <= 0 or self.channels <= 0:
            raise ValueError("grid dimensions must be positive")
        expected = (self.locations, self.channels)
        if self.values.shape != expected:
            raise DimensionError(
                f"grid values shape {self.values.shape} != declared {expected}")

    @property
    def locations(self) -> int:
        return self.grid_h * self.grid_w

    @classmethod
    def from_array(cls, arr: np.ndarray, grid_h: int, grid_w: int) -> "FeatureGrid":
        arr = np.asarray(arr, dtype=np.float64)
        channels = arr.shape[-1]
        values = Tensor(arr.reshape(grid_h * grid_w, channels))
        return cls(grid_h, grid_w, channels, values)


@dataclass
class AttentionParams:
    """Controller + scorer parameters, viewed over a ParamStore.

    The scorer is additive: e_l = w . tanh(W_h h + W_p p_l + b), with
    W_h: (attn_dim, hidden_dim), W_p: (attn_dim, channels), w and b
    vectors of length attn_dim. LSTM gate tensors live under
    ``prefix + "lstm."``.
    """

    store: ParamStore
    prefix: str = "attn."

    @property
    def w_h(self) -> Tensor:
        return self.store[self.prefix + "score.w_h"]

    @property
    def w_p(self) -> Tensor:
        return self.store[self.prefix + "score.w_p"]

    @property
    def w(self) -> Tensor:
        return self.store[self.prefix + "score.w"]

    @property
    def b(self) -> Tensor:
        return self.store[self.prefix + "score.b"]

    @property
    def hidden_dim(self) -> int:
        return self.w_h.shape[1]

    @property
    def lstm_prefix(self) -> str:
        return self.prefix + "lstm."


def score_locations(h: Tensor, grid: FeatureGrid, params: AttentionParams) -> Tensor:
    """One raw relevance score per grid location, given controller state h."""
    proj = ad.matmul_t(grid.values, params.w_p)            # (L, attn_dim)
    ctrl = ad.add(ad.matmul(params.w_h, h), params.b)      # (attn_dim,)
    return ad.matmul(ad.tanh(ad.add(proj, ctrl)), params.w)


def attention_weights(scores: Tensor) -> Tensor:
    """Normalize scores to a simplex-valued attention map."""
    return ad.softmax(scores)


def pool(grid: FeatureGrid, weights: Tensor) -> Tensor:
    """Attention-weighted average of the grid rows (a convex combination)."""
    if weights.shape != (grid.locations,):
        raise DimensionError(
            f"attention map length {weights.shape} != grid locations {grid.locations}")
    return ad.matmul(weights, grid.values)


def attend_sequence(grid: FeatureGrid, n: int, params: AttentionParams,
                    ) -> list[tuple[Tensor, Tensor]]:
    """Run n chained attention steps; returns [(weights, pooled), ...].

    The controller starts from zero states with the grid mean as its first
    input; afterwards each step consumes the previous pooled feature.
    """
    if n < 1:
        raise ValueError(f"attention step count must be >= 1, got {n}")
    d_h = params.hidden_dim
    h = Tensor(np.zeros(d_h))
    c = Tensor(np.zeros(d_h))
    uniform = Tensor(np.full(grid.locations, 1.0 / grid.locations))
    x = ad.matmul(uniform, grid.values)
    steps = []
    for _ in range(n):
        h, c = ad.lstm_step(x, h, c, params.store, prefix=params.lstm_prefix)
        weights = attention_weights(score_locations(h, grid, params))
        pooled = pool(grid, weights)
        steps.append((weights, pooled))
        x = pooled
    return steps
