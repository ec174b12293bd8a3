"""Image index construction, distance ranking, and AP/mAP evaluation.

Per-step image embeddings are precomputed once; queries then rank the
whole index by cosine distance with an exhaustive linear scan. Ties break
by ascending item id so rankings are fully deterministic. Multi-object
queries score each image by the best injective query-to-step assignment
of summed distances.
"""

from __future__ import annotations

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionParams, FeatureGrid, attend_sequence
from .autodiff import ParamStore, no_grad
from .dataio import DataRepo, DatasetItem, read_named_tensors, write_named_tensors
from .errors import DegenerateVectorError, FormatError
from .heads import ImageHead, embed_image


@dataclass
class IndexEntry:
    item_id: str
    class_labels: tuple[str, ...]
    embeddings: np.ndarray  # (n_max, embed_dim), unit rows, step i at row i-1


@dataclass
class ImageIndex:
    n_max: int
    entries: list[IndexEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def ids(self) -> list[str]:
        return [e.item_id for e in self.entries]


def build_index(items: list[DatasetItem], store: ParamStore, repo: DataRepo,
                n_max: int = 2) -> ImageIndex:
    """Embed every item at attention steps 1..n_max."""
    attn = AttentionParams(store)
    head = ImageHead(store)
    m = repo.manifest
    index = ImageIndex(n_max=n_max)
    with no_grad():
        for item in items:
            grid = FeatureGrid.from_array(repo.grid(item.id), m.grid_h, m.grid_w)
            try:
                steps = attend_sequence(grid, n_max, attn)
                embs = np.stack([embed_image(pooled, head).data
                                 for _, pooled in steps])
            except DegenerateVectorError as e:
                raise DegenerateVectorError(f"item {item.id!r}: {e}") from e
            index.entries.append(IndexEntry(item.id, tuple(item.class_labels), embs))
    return index


def save_index(index: ImageIndex, path) -> None:
    meta = {
        "kind": "image_index",
        "version": 1,
        "n_max": index.n_max,
        "items": [{"id": e.item_id, "class_labels": list(e.class_labels)}
                  for e in index.entries],
    }
    tensors = {f"{i:06d}": e.embeddings for i, e in enumerate(index.entries)}
    write_named_tensors(path, tensors, meta)


def load_index(path) -> ImageIndex:
    tensors, meta = read_named_tensors(path)
    if meta.get("kind") != "image_index":
        raise FormatError(f"container is not an image index (kind={meta.get('kind')!r})")
    index = ImageIndex(n_max=meta["n_max"])
    for i, item in enumerate(meta["items"]):
        index.entries.append(IndexEntry(item["id"], tuple(item["class_labels"]),
                                        tensors[f"{i:06d}"]))
    return index


def rank_single(q: np.ndarray, index: ImageIndex) -> list[tuple[str, float]]:
    """Rank by 1 - cos(q, step-1 embedding), ascending; ties by id."""
    if not index.entries:
        raise ValueError("cannot rank against an empty index")
    q = np.asarray(q, dtype=np.float64)
    ranked = [(e.item_id, float(1.0 - q @ e.embeddings[0])) for e in index.entries]
    ranked.sort(key=lambda pair: (pair[1], pair[0]))
    return ranked


def rank_multi(queries: list[np.ndarray], index: ImageIndex,
               ) -> list[tuple[str, float]]:
    """Rank by the minimum, over injective query-to-step assignments, of
    the summed cosine distances. Uses the first n steps for n queries, so
    a one-query call matches :func:`rank_single`."""
    n = len(queries)
    if n < 1:
        raise ValueError("need at least one query")
    if n > index.n_max:
        raise ValueError(f"{n} queries exceed the index's n_max={index.n_max}")
    if not index.entries:
        raise ValueError("cannot rank against an empty index")
    qs = [np.asarray(q, dtype=np.float64) for q in queries]
    perms = list(itertools.permutations(range(n)))
    ranked = []
    for e in index.entries:
        dist = np.array([[1.0 - q @ e.embeddings[s] for s in range(n)] for q in qs])
        score = min(sum(dist[i][p[i]] for i in range(n)) for p in perms)
        ranked.append((e.item_id, float(score)))
    ranked.sort(key=lambda pair: (pair[1], pair[0]))
    return ranked


def average_precision(ranked: list[tuple[str, float]], relevant: set[str]) -> float:
    """Mean of precision at each relevant item's rank.

    An empty relevant set scores 0 (with a warning) so that mAP stays
    total while surfacing data problems.
    """
    ranked_ids = [item_id for item_id, _ in ranked]
    unknown = set(relevant) - set(ranked_ids)
    if unknown:
        raise ValueError(f"relevant ids missing from the ranking: {sorted(unknown)}")
    if not relevant:
        warnings.warn("average_precision of an empty relevant set is 0", stacklevel=2)
        return 0.0
    hits = 0
    total = 0.0
    for rank, item_id in enumerate(ranked_ids, start=1):
        if item_id in relevant:
            hits += 1
            total += hits / rank
    return total / len(relevant)


def relevant_ids(index: ImageIndex, class_labels) -> set[str]:
    """Ids of entries whose label multiset matches ``class_labels``."""
    key = tuple(sorted(class_labels))
    return {e.item_id for e in index.entries
            if tuple(sorted(e.class_labels)) == key}


@dataclass
class EvalQuery:
    query_id: str
    embeddings: list[np.ndarray]  # one unit vector per query object
    relevant: set[str]


@dataclass
class EvalReport:
    map: float
    per_query: dict[str, float]
    precision_at: dict[int, float]

    def to_json(self) -> str:
        doc = {
            "map": self.map,
            "per_query": self.per_query,
            "precision_at": {str(k): v for k, v in self.precision_at.items()},
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def evaluate(queries: list[EvalQuery], index: ImageIndex,
             ks: tuple[int, ...] = (1, 5, 10)) -> EvalReport:
    """mAP (mean of per-query APs) plus precision-at-k over all queries."""
    if not queries:
        raise ValueError("no evaluation queries")
    per_query: dict[str, float] = {}
    hit_counts = {k: 0.0 for k in ks}
    for q in queries:
        ranked = rank_multi(q.embeddings, index)
        per_query[q.query_id] = average_precision(ranked, q.relevant)
        for k in ks:
            top = [item_id for item_id, _ in ranked[:k]]
            hit_counts[k] += sum(1 for item_id in top if item_id in q.relevant) / k
    mean_ap = sum(per_query.values()) / len(queries)
    precision_at = {k: hit_counts[k] / len(queries) for k in ks}
    return EvalReport(map=mean_ap, per_query=per_query, precision_at=precision_at)
