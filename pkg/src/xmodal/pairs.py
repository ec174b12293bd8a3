"""Train/test splitting and positive/negative training-pair construction.

All randomness flows through PCG64 generators seeded from (seed, purpose)
pairs, so every generator is reproducible on any platform and independent
of the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataio import DatasetItem, Manifest
from .errors import ProtocolError

_SPLIT, _SKETCH, _TEXT, _MULTI = range(4)


@dataclass
class PairGenConfig:
    seed: int = 0
    n_m: int = 5               # sketch combinations per multi-object image
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must be in (0, 1), got {self.train_fraction}")
        if self.n_m < 1:
            raise ValueError(f"n_m must be >= 1, got {self.n_m}")


@dataclass(frozen=True)
class TrainingPair:
    query_keys: tuple[str, ...]
    query_classes: tuple[str, ...]
    item: DatasetItem
    y: int
    modality: str

    def __post_init__(self):
        same = sorted(self.query_classes) == sorted(self.item.class_labels)
        if (self.y == 1) != same:
            raise ValueError(
                f"label {self.y} inconsistent with classes {self.query_classes} "
                f"vs item labels {self.item.class_labels}")


def _rng(seed: int, purpose: int) -> np.random.Generator:
    return np.random.default_rng(np.random.PCG64(np.random.SeedSequence([seed, purpose])))


def _by_class(items: list[DatasetItem]) -> dict[tuple[str, ...], list[DatasetItem]]:
    grouped: dict[tuple[str, ...], list[DatasetItem]] = {}
    for item in items:
        grouped.setdefault(item.label_key, []).append(item)
    return {k: sorted(v, key=lambda it: it.id) for k, v in grouped.items()}


def split_dataset(items: list[DatasetItem], cfg: PairGenConfig,
                  ) -> tuple[list[DatasetItem], list[DatasetItem]]:
    """Per-class split at train_fraction; test gets the floored remainder,
    never less than one item."""
    grouped = _by_class(items)
    rng = _rng(cfg.seed, _SPLIT)
    train: list[DatasetItem] = []
    test: list[DatasetItem] = []
    for key in sorted(grouped):
        members = grouped[key]
        n = len(members)
        if n < 2:
            raise ProtocolError(f"class {'+'.join(key)} has {n} item(s); need >= 2 to split")
        n_train = min(int(math.floor(n * cfg.train_fraction + 1e-9)), n - 1)
        order = rng.permutation(n)
        train.extend(members[i] for i in order[:n_train])
        test.extend(members[i] for i in order[n_train:])
    return train, test


def _negative_lookup(items: list[DatasetItem]) -> dict[tuple[str, ...], list[DatasetItem]]:
    """For each class key, the sorted list of items of every other class."""
    grouped = _by_class(items)
    if len(grouped) < 2:
        only = "+".join(next(iter(grouped)))
        raise ProtocolError(f"only one class present ({only}); cannot draw negatives")
    out = {}
    for key in grouped:
        others = [it for k in sorted(grouped) if k != key for it in grouped[k]]
        out[key] = others
    return out


def gen_single_sketch_pairs(train_items: list[DatasetItem], cfg: PairGenConfig,
                            ) -> list[TrainingPair]:
    """One positive per linked sketch of each image, negatives pairing the
    same sketches with uniformly drawn out-of-class images."""
    _require_single(train_items)
    negatives_for = _negative_lookup(train_items)
    rng = _rng(cfg.seed, _SKETCH)
    positives, negatives = [], []
    for item in sorted(train_items, key=lambda it: it.id):
        label = item.class_labels[0]
        for key in item.sketch_keys:
            positives.append(TrainingPair((key,), (label,), item, 1, "sketch"))
            pool = negatives_for[item.label_key]
            other = pool[int(rng.integers(len(pool)))]
            negatives.append(TrainingPair((key,), (label,), other, -1, "sketch"))
    return positives + negatives


def gen_single_text_pairs(train_items: list[DatasetItem], cfg: PairGenConfig,
                          ) -> list[TrainingPair]:
    """One positive per training image (its class-label text feature) and
    an equal number of out-of-class negatives."""
    _require_single(train_items)
    negatives_for = _negative_lookup(train_items)
    rng = _rng(cfg.seed, _TEXT)
    positives, negatives = [], []
    for item in sorted(train_items, key=lambda it: it.id):
        label = item.class_labels[0]
        key = item.text_keys[0] if item.text_keys else label
        positives.append(TrainingPair((key,), (label,), item, 1, "text"))
        pool = negatives_for[item.label_key]
        other = pool[int(rng.integers(len(pool)))]
        negatives.append(TrainingPair((key,), (label,), other, -1, "text"))
    return positives + negatives


def gen_multi_pairs(train_items: list[DatasetItem], modality: str,
                    cfg: PairGenConfig, manifest: Manifest) -> list[TrainingPair]:
    """Pairs for combined-class (two-label) images.

    Sketch mode reframes each image n_m times with fresh per-class sketch
    draws; text mode attaches both class-label text features once. Each
    positive gets one negative whose image has a different combined class
    (sharing a single constituent class is allowed).
    """
    if modality not in ("sketch", "text"):
        raise ValueError(f"modality must be 'sketch' or 'text', got {modality!r}")
    for item in train_items:
        if len(item.class_labels) != 2:
            raise ProtocolError(
                f"item {item.id!r} carries {len(item.class_labels)} label(s); "
                "multi-object pairs need combined-class items")
    negatives_for = _negative_lookup(train_items)
    rng = _rng(cfg.seed, _MULTI)
    pools = manifest.sketch_pools() if modality == "sketch" else {}
    positives, negatives = [], []
    for item in sorted(train_items, key=lambda it: it.id):
        labels = item.label_key
        if modality == "sketch":
            for label in labels:
                if not pools.get(label):
                    raise ProtocolError(f"no sketch features available for class {label!r}")
            combos = []
            for _ in range(cfg.n_m):
                combos.append(tuple(pools[label][int(rng.integers(len(pools[label])))]
                                    for label in labels))
        else:
            combos = [tuple(labels)]
        for keys in combos:
            positives.append(TrainingPair(keys, labels, item, 1, modality))
            pool = negatives_for[labels]
            other = pool[int(rng.integers(len(pool)))]
            negatives.append(TrainingPair(keys, labels, other, -1, modality))
    return positives + negatives


def _require_single(items: list[DatasetItem]) -> None:
    for item in items:
        if len(item.class_labels) != 1:
            raise ProtocolError(
                f"item {item.id!r} carries {len(item.class_labels)} labels; "
                "single-object pairs need single-class items")
