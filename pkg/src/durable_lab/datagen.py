"""
Seeded synthetic fact dataset.

Each (entity, attribute) pair gets an independently drawn value token, so
the only way to predict a value is to have memorized it. Entities are split
into forget / retain / holdout groups; every fact of a forget entity is
forgotten together. Holdout entities are never trained and serve as the
non-member population of the membership attack.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, LabError

SPLIT_FORGET = "forget"
SPLIT_RETAIN = "retain"
SPLIT_HOLDOUT = "holdout"


class EmptySplitError(LabError, ValueError):
    """An operation that needs examples received an empty split or batch."""


@dataclass(frozen=True, slots=True)
class FactBatch:
    """Column view of a set of facts."""

    entities: np.ndarray
    attributes: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, slots=True)
class FactDataset:
    """
    Facts plus index splits.

    ``facts`` is an (N, 3) int64 array of (entity, attribute, value) rows in
    entity-major order. ``forget``, ``retain`` and ``holdout`` are sorted
    index arrays into ``facts``.
    """

    facts: np.ndarray
    forget: np.ndarray
    retain: np.ndarray
    holdout: np.ndarray
    n_entities: int
    n_attributes: int
    value_vocab: int
    entity_offset: int
    seed: int

    @property
    def trained(self) -> np.ndarray:
        return np.union1d(self.forget, self.retain)

    def split(self, name: str) -> np.ndarray:
        try:
            return {
                SPLIT_FORGET: self.forget,
                SPLIT_RETAIN: self.retain,
                SPLIT_HOLDOUT: self.holdout,
            }[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def batch(self, indices: np.ndarray) -> FactBatch:
        rows = self.facts[np.asarray(indices, dtype=np.int64)]
        return FactBatch(rows[:, 0].copy(), rows[:, 1].copy(), rows[:, 2].copy())

    def split_batch(self, name: str) -> FactBatch:
        return self.batch(self.split(name))

    def entities_of(self, name: str) -> np.ndarray:
        return np.unique(self.facts[self.split(name), 0])


def generate(
    n_entities: int = 220,
    n_attributes: int = 10,
    value_vocab: int = 64,
    forget_entities: int = 20,
    holdout_entities: int = 20,
    seed: int = 42,
    *,
    entity_offset: int = 0,
) -> FactDataset:
    """
    Build a dataset of ``n_entities * n_attributes`` facts.

    Entity ids run from ``entity_offset`` to ``entity_offset + n_entities - 1``.
    A seeded permutation picks the forget entities first, then the holdout
    entities; the rest form the retain split.
    """
    if n_entities <= 0 or n_attributes <= 0:
        raise ConfigError("dataset", "n_entities and n_attributes must be positive")
    if value_vocab < 2:
        raise ConfigError("dataset.value_vocab", "must be at least 2")
    if forget_entities < 0 or holdout_entities < 0:
        raise ConfigError("dataset", "split sizes must be non-negative")
    if forget_entities + holdout_entities >= n_entities:
        raise ConfigError(
            "dataset", "forget_entities + holdout_entities must be below n_entities"
        )

    rng = np.random.default_rng(seed)
    values = rng.integers(0, value_vocab, size=(n_entities, n_attributes))
    order = rng.permutation(n_entities)
    forget_ids = order[:forget_entities]
    holdout_ids = order[forget_entities : forget_entities + holdout_entities]

    ent = np.repeat(np.arange(n_entities), n_attributes)
    att = np.tile(np.arange(n_attributes), n_entities)
    facts = np.stack([ent + entity_offset, att, values.reshape(-1)], axis=1).astype(np.int64)

    in_forget = np.isin(ent, forget_ids)
    in_holdout = np.isin(ent, holdout_ids)
    idx = np.arange(facts.shape[0])
    return FactDataset(
        facts=facts,
        forget=idx[in_forget],
        retain=idx[~in_forget & ~in_holdout],
        holdout=idx[in_holdout],
        n_entities=n_entities,
        n_attributes=n_attributes,
        value_vocab=value_vocab,
        entity_offset=entity_offset,
        seed=seed,
    )


def generate_unrelated(base: FactDataset, n_entities: int, seed: int) -> FactDataset:
    """
    Corpus of fresh entities for the fine-tuning attack.

    Entities start right after ``base``'s range; every fact lands in the
    retain split (it is all "training" data for the attacker).
    """
    return generate(
        n_entities=n_entities,
        n_attributes=base.n_attributes,
        value_vocab=base.value_vocab,
        forget_entities=0,
        holdout_entities=0,
        seed=seed,
        entity_offset=base.entity_offset + base.n_entities,
    )


def batch_sampler(
    split: np.ndarray, batch_size: int = 4, seed: int = 42
) -> Iterator[np.ndarray]:
    """
    Endless stream of index batches over ``split``.

    Each pass is a fresh seeded permutation cut into ``batch_size`` chunks;
    the last chunk of a pass may be short.
    """
    items = np.asarray(split, dtype=np.int64)
    if items.size == 0:
        raise EmptySplitError("cannot sample batches from an empty split")
    if batch_size <= 0:
        raise ConfigError("batch_size", "must be positive")
    rng = np.random.default_rng(seed)
    while True:
        perm = items[rng.permutation(items.size)]
        for start in range(0, perm.size, batch_size):
            yield perm[start : start + batch_size]


def export_csv(dataset: FactDataset) -> str:
    """Render the dataset as ``entity,attribute,value,split`` rows in fact order."""
    labels = np.full(dataset.facts.shape[0], SPLIT_RETAIN, dtype=object)
    labels[dataset.forget] = SPLIT_FORGET
    labels[dataset.holdout] = SPLIT_HOLDOUT
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["entity", "attribute", "value", "split"])
    for (e, a, v), label in zip(dataset.facts.tolist(), labels):
        writer.writerow([e, a, v, label])
    return buf.getvalue()
