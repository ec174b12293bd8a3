"""Deterministic mini-batch training of the attention controller and the
embedding heads under the (multi-)query cosine-embedding loss.

The optimizer is adaptive moment estimation with bias correction. Given
the same pairs, config and seed, training is bit-reproducible: pair order,
gradient reduction order and parameter iteration order are all fixed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AttentionParams, FeatureGrid, attend_sequence
from .autodiff import ParamStore, Tensor
from .dataio import DataRepo, read_named_tensors, write_named_tensors
from .errors import DivergedTrainingError, FormatError
from .heads import ImageHead, LossConfig, QueryHead, embed_image, embed_query
from .heads import multi_query_loss
from .pairs import TrainingPair

_SHUFFLE = 7


@dataclass
class ModelDims:
    """Widths of every trainable block."""

    channels: int          # grid feature channels (LSTM input width)
    query_dim: int         # raw query feature width
    hidden_dim: int = 512  # LSTM state width
    attn_dim: int = 256    # additive scorer width
    embed_dim: int = 512   # shared embedding width
    query_hidden: int = 1024

    def __post_init__(self):
        if min(self.channels, self.query_dim, self.hidden_dim, self.attn_dim,
               self.embed_dim, self.query_hidden) < 1:
            raise ValueError(f"all model dimensions must be positive: {self}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    margin: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_max: int = 2

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"learning rate must be nonnegative, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.n_max < 1:
            raise ValueError("epochs, batch_size and n_max must be >= 1")
        if not 0.0 <= self.margin < 1.0:
            raise ValueError(f"margin must be in [0, 1), got {self.margin}")


def _xavier(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-bound, bound, size=(out_dim, in_dim))


def init_params(dims: ModelDims, seed: int) -> ParamStore:
    """Fresh parameters: Xavier-uniform affine weights, zero biases, and a
    forget-gate bias of one. Draws happen in a fixed order, so equal seeds
    give identical stores."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    store = ParamStore()
    h, m, a = dims.hidden_dim, dims.channels, dims.attn_dim
    for tag in ("i", "f", "o", "g"):
        store.add(f"attn.lstm.wx_{tag}", Tensor(_xavier(rng, h, m)))
        store.add(f"attn.lstm.wh_{tag}", Tensor(_xavier(rng, h, h)))
        bias = np.ones(h) if tag == "f" else np.zeros(h)
        store.add(f"attn.lstm.b_{tag}", Tensor(bias))
    store.add("attn.score.w_h", Tensor(_xavier(rng, a, h)))
    store.add("attn.score.w_p", Tensor(_xavier(rng, a, m)))
    store.add("attn.score.w", Tensor(_xavier(rng, 1, a)[0]))
    store.add("attn.score.b", Tensor(np.zeros(a)))
    store.add("image.w", Tensor(_xavier(rng, dims.embed_dim, m)))
    store.add("image.b", Tensor(np.zeros(dims.embed_dim)))
    store.add("query.w1", Tensor(_xavier(rng, dims.query_hidden, dims.query_dim)))
    store.add("query.b1", Tensor(np.zeros(dims.query_hidden)))
    store.add("query.w2", Tensor(_xavier(rng, dims.embed_dim, dims.query_hidden)))
    store.add("query.b2", Tensor(np.zeros(dims.embed_dim)))
    return store


class PairEvaluator:
    """Computes the loss graph for one training pair, caching feature
    tensors so repeated epochs do not re-wrap the same arrays."""

    def __init__(self, store: ParamStore, repo: DataRepo, loss_cfg: LossConfig):
        self.repo = repo
        self.loss_cfg = loss_cfg
        self.attn = AttentionParams(store)
        self.query_head = QueryHead(store)
        self.image_head = ImageHead(store)
        self._grids: dict[str, FeatureGrid] = {}
        self._queries: dict[tuple[str, str], Tensor] = {}

    def grid(self, item_id: str) -> FeatureGrid:
        g = self._grids.get(item_id)
        if g is None:
            m = self.repo.manifest
            g = FeatureGrid(m.grid_h, m.grid_w, m.channels,
                            Tensor(self.repo.grid(item_id)))
            self._grids[item_id] = g
        return g

    def query_tensor(self, modality: str, key: str) -> Tensor:
        t = self._queries.get((modality, key))
        if t is None:
            t = Tensor(self.repo.query(modality, key))
            self._queries[(modality, key)] = t
        return t

    def loss(self, pair: TrainingPair) -> Tensor:
        n = len(pair.query_keys)
        steps = attend_sequence(self.grid(pair.item.id), n, self.attn)
        terms = []
        for (_, pooled), key in zip(steps, pair.query_keys):
            q = embed_query(self.query_tensor(pair.modality, key), self.query_head)
            f = embed_image(pooled, self.image_head)
            terms.append((q, f))
        return multi_query_loss(terms, pair.y, self.loss_cfg)


def train(pairs: list[TrainingPair], store: ParamStore, cfg: TrainConfig,
          repo: DataRepo) -> tuple[ParamStore, list[float]]:
    """Optimize the store in place; returns it with the per-epoch mean loss."""
    if not pairs:
        raise ValueError("no training pairs")
    for pair in pairs:
        if len(pair.query_keys) > cfg.n_max:
            raise ValueError(
                f"pair has {len(pair.query_keys)} queries, exceeding n_max={cfg.n_max}")
    evaluator = PairEvaluator(store, repo, LossConfig(cfg.margin))
    rng = np.random.default_rng(np.random.PCG64(np.random.SeedSequence([cfg.seed, _SHUFFLE])))
    m_state = {name: np.zeros_like(t.data) for name, t in store.items()}
    v_state = {name: np.zeros_like(t.data) for name, t in store.items()}
    step = 0
    curve: list[float] = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(pairs))
        epoch_loss = 0.0
        for batch_idx, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            sums: dict[str, np.ndarray] = {}
            for pair_idx in batch:
                loss = evaluator.loss(pairs[pair_idx])
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergedTrainingError(epoch, batch_idx)
                epoch_loss += value
                grads = ad.backward(loss)
                for name, tensor in store.items():
                    g = ad.grad_of(grads, tensor)
                    acc = sums.get(name)
                    if acc is None:
                        sums[name] = g.copy()
                    else:
                        np.add(acc, g, out=acc)
            step += 1
            scale = 1.0 / len(batch)
            bc1 = 1.0 - cfg.beta1 ** step
            bc2 = 1.0 - cfg.beta2 ** step
            for name, tensor in store.items():
                g = sums[name] * scale
                m = m_state[name]
                v = v_state[name]
                m *= cfg.beta1
                m += (1.0 - cfg.beta1) * g
                v *= cfg.beta2
                v += (1.0 - cfg.beta2) * g * g
                tensor.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        curve.append(epoch_loss / len(pairs))
    return store, curve


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    store: ParamStore
    dims: ModelDims
    config: TrainConfig
    modality: str
    epoch: int
    loss_history: list[float] = field(default_factory=list)


def save_checkpoint(cp: Checkpoint, path) -> None:
    meta = {
        "kind": "checkpoint",
        "version": 1,
        "modality": cp.modality,
        "epoch": cp.epoch,
        "loss_history": list(cp.loss_history),
        "dims": asdict(cp.dims),
        "train_config": asdict(cp.config),
    }
    write_named_tensors(path, {name: t.data for name, t in cp.store.items()}, meta)


def load_checkpoint(path) -> Checkpoint:
    tensors, meta = read_named_tensors(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"container is not a checkpoint (kind={meta.get('kind')!r})")
    store = ParamStore()
    for name, arr in tensors.items():
        store.add(name, Tensor(arr))
    return Checkpoint(
        store=store,
        dims=ModelDims(**meta["dims"]),
        config=TrainConfig(**meta["train_config"]),
        modality=meta["modality"],
        epoch=meta["epoch"],
        loss_history=list(meta["loss_history"]),
    )
