"""Multi-domain interaction corpora: ingestion, filtering, splitting, synthesis.

Raw per-domain files (item metadata + timestamped interactions) are turned
into chronologically ordered per-user sequences, filtered with iterative
k-core peeling, and split leave-one-out into train/valid/test pairs. A
synthetic generator produces small multi-domain datasets with a plantable
topic-transition pattern so learning can be verified end to end.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import DataError, ProtocolError
from .utils import read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

MIN_SEQUENCE_LEN = 3  # leave-one-out needs train/valid/test positions


@dataclass(frozen=True)
class Item:
    """One catalog entry. `domain` is a 0-based index into the domain list."""

    item_id: str
    domain: int
    title: str
    brand: str = ""
    categories: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.item_id:
            raise DataError("item_id must be non-empty")
        if not self.title:
            raise DataError(f"item {self.item_id!r} has an empty title")
        if self.domain < 0:
            raise DataError(f"item {self.item_id!r} has negative domain index")


class Interaction(NamedTuple):
    user_id: str
    item_id: str
    timestamp: float
    domain: int


@dataclass(frozen=True)
class InteractionSequence:
    """Chronologically ordered items of one user within one domain."""

    domain: int
    items: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class Pair:
    """One supervised example: predict `target` from `history`."""

    domain: int
    history: tuple[str, ...]
    target: str


@dataclass
class SplitDataset:
    train_pairs: list[Pair] = field(default_factory=list)
    valid_pairs: list[Pair] = field(default_factory=list)
    test_pairs: list[Pair] = field(default_factory=list)


class KCoreResult(NamedTuple):
    interactions: list[Interaction]
    emptied: bool  # warning flag: filtering removed everything


def k_core_filter(interactions: Sequence[Interaction], k: int) -> KCoreResult:
    """Iteratively drop interactions of users/items with fewer than k occurrences.

    Returns the maximal subset in which every user id and every item id occurs
    at least k times (the fixed point of iterative removal), preserving input
    order. Counts are taken over the given interactions as a whole; callers
    that want per-domain filtering pass one domain at a time.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if not interactions:
        raise DataError("k_core_filter requires a non-empty interaction list")

    kept = list(interactions)
    while True:
        user_counts: dict[str, int] = {}
        item_counts: dict[str, int] = {}
        for rec in kept:
            user_counts[rec.user_id] = user_counts.get(rec.user_id, 0) + 1
            item_counts[rec.item_id] = item_counts.get(rec.item_id, 0) + 1
        filtered = [
            rec
            for rec in kept
            if user_counts[rec.user_id] >= k and item_counts[rec.item_id] >= k
        ]
        if len(filtered) == len(kept):
            break
        kept = filtered

    emptied = not kept
    if emptied:
        logger.warning("k-core filtering with k=%d removed all interactions", k)
    return KCoreResult(kept, emptied)


def build_sequences(
    interactions: Sequence[Interaction], max_len: int = 20
) -> list[InteractionSequence]:
    """Group interactions into per-(user, domain) chronological sequences.

    Items are sorted ascending by timestamp (stable, so equal timestamps keep
    input order), truncated to the most recent `max_len`, and sequences
    shorter than three items are dropped.
    """
    if max_len < 1:
        raise DataError(f"max_len must be >= 1, got {max_len}")

    grouped: dict[tuple[str, int], list[Interaction]] = {}
    for rec in interactions:
        grouped.setdefault((rec.user_id, rec.domain), []).append(rec)

    sequences = []
    for (_, domain), recs in grouped.items():
        recs = sorted(recs, key=lambda r: r.timestamp)
        recs = recs[-max_len:]
        if len(recs) >= MIN_SEQUENCE_LEN:
            sequences.append(
                InteractionSequence(domain=domain, items=tuple(r.item_id for r in recs))
            )
    return sequences


def leave_one_out_split(
    sequences: Iterable[InteractionSequence],
    train_expansion: str = "all-prefixes",
) -> SplitDataset:
    """Split each sequence leave-one-out.

    The last item becomes the test target, the second-to-last the validation
    target. Training pairs come from the remaining prefix: either one pair per
    intermediate position ("all-prefixes") or the single final pair
    ("final-only"; skipped for length-3 sequences, whose final training pair
    would have an empty history).
    """
    if train_expansion not in ("all-prefixes", "final-only"):
        raise ProtocolError(f"unknown train_expansion {train_expansion!r}")

    split = SplitDataset()
    for seq in sequences:
        items = seq.items
        m = len(items)
        if m < MIN_SEQUENCE_LEN:
            raise ProtocolError(
                f"sequence of length {m} cannot be split leave-one-out (need >= 3)"
            )
        split.test_pairs.append(Pair(seq.domain, items[: m - 1], items[m - 1]))
        split.valid_pairs.append(Pair(seq.domain, items[: m - 2], items[m - 2]))
        if train_expansion == "all-prefixes":
            for j in range(1, m - 2):
                split.train_pairs.append(Pair(seq.domain, items[:j], items[j]))
        elif m >= 4:
            split.train_pairs.append(Pair(seq.domain, items[: m - 3], items[m - 3]))
    return split


def item_text(item: Item, separator: str = " ") -> str:
    """Concatenate title, brand and categories, skipping empty fields."""
    parts = [item.title]
    if item.brand:
        parts.append(item.brand)
    parts.extend(c for c in item.categories if c)
    return separator.join(parts)


# ---------------------------------------------------------------------------
# Synthetic multi-domain datasets


@dataclass
class SyntheticDomainSpec:
    """Controls one synthetic domain.

    `pattern_strength` is the probability that a sequence follows the planted
    topic cycle instead of jumping to a uniform-random topic; 0 gives fully
    uniform topic transitions. `shared_topic_fraction` is the fraction of
    topics whose wording is shared across domains, which makes those items
    close in text-embedding space regardless of domain.
    """

    name: str
    n_items: int = 200
    n_users: int = 250
    n_topics: int = 10
    pattern_strength: float = 0.9
    seq_len_min: int = 5
    seq_len_max: int = 15
    shared_topic_fraction: float = 0.0


def _word(rng: np.random.Generator, used: set[str]) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    while True:
        w = "".join(rng.choice(list(letters), size=7))
        if w not in used:
            used.add(w)
            return w


def synthesize_domains(
    specs: Sequence[SyntheticDomainSpec], seed: int
) -> tuple[list[Item], list[InteractionSequence]]:
    """Generate a reproducible multi-domain catalog with a plantable pattern.

    Item texts share tokens within a topic and within a domain, so the test
    embedder clusters them accordingly. Each user walks a topic-level Markov
    chain (next topic = current + 1 with probability `pattern_strength`, else
    uniform) and picks items within a topic by a Zipf popularity law, so a
    sequence model has signal to beat random guessing.
    """
    if len(specs) < 2:
        raise DataError("synthesize_domains needs at least two domains")
    for spec in specs:
        if spec.n_items < 1 or spec.n_users < 1 or spec.n_topics < 1:
            raise DataError(f"degenerate synthetic spec for domain {spec.name!r}")
        if spec.seq_len_min < MIN_SEQUENCE_LEN:
            raise DataError("seq_len_min must be >= 3 for leave-one-out")
        if spec.seq_len_max < spec.seq_len_min:
            raise DataError("seq_len_max must be >= seq_len_min")
        if not (0.0 <= spec.shared_topic_fraction <= 1.0):
            raise DataError("shared_topic_fraction must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    used_words: set[str] = set()
    shared_topic_words: dict[int, list[str]] = {}
    items: list[Item] = []
    sequences: list[InteractionSequence] = []

    for domain_idx, spec in enumerate(specs):
        domain_words = [_word(rng, used_words) for _ in range(2)]
        n_shared = round(spec.shared_topic_fraction * spec.n_topics)
        topic_words = []
        for t in range(spec.n_topics):
            if t < n_shared:
                if t not in shared_topic_words:
                    shared_topic_words[t] = [_word(rng, used_words) for _ in range(2)]
                topic_words.append(shared_topic_words[t])
            else:
                topic_words.append([_word(rng, used_words) for _ in range(2)])

        # Items round-robin over topics; rank within topic drives popularity.
        topic_of_item = np.arange(spec.n_items) % spec.n_topics
        domain_items: list[Item] = []
        for i in range(spec.n_items):
            t = int(topic_of_item[i])
            unique = _word(rng, used_words)
            domain_items.append(
                Item(
                    item_id=f"{spec.name}-{i:04d}",
                    domain=domain_idx,
                    title=f"{unique} {topic_words[t][0]} {topic_words[t][1]}",
                    brand=domain_words[0],
                    categories=(domain_words[1], topic_words[t][0]),
                )
            )
        items.extend(domain_items)

        # Zipf popularity over the items of each topic.
        items_by_topic: list[list[int]] = [[] for _ in range(spec.n_topics)]
        for i in range(spec.n_items):
            items_by_topic[int(topic_of_item[i])].append(i)
        probs_by_topic = []
        for members in items_by_topic:
            w = 1.0 / (1.0 + np.arange(len(members)))
            probs_by_topic.append(w / w.sum())

        for _ in range(spec.n_users):
            length = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
            topic = int(rng.integers(spec.n_topics))
            seq_items = []
            for _ in range(length):
                members = items_by_topic[topic]
                idx = members[int(rng.choice(len(members), p=probs_by_topic[topic]))]
                seq_items.append(domain_items[idx].item_id)
                if rng.random() < spec.pattern_strength:
                    topic = (topic + 1) % spec.n_topics
                else:
                    topic = int(rng.integers(spec.n_topics))
            sequences.append(InteractionSequence(domain=domain_idx, items=tuple(seq_items)))

    return items, sequences


# ---------------------------------------------------------------------------
# File interfaces (formats documented in docs/data_formats.md)


def load_metadata_file(path: str | Path, domain: int) -> list[Item]:
    items = []
    for row in read_jsonl(path):
        try:
            items.append(
                Item(
                    item_id=str(row["item_id"]),
                    domain=domain,
                    title=str(row["title"]),
                    brand=str(row.get("brand", "") or ""),
                    categories=tuple(str(c) for c in row.get("categories", []) or []),
                )
            )
        except KeyError as exc:
            raise DataError(f"metadata record in {path} missing field {exc}") from exc
    return items


def load_interaction_file(path: str | Path, domain: int) -> list[Interaction]:
    interactions = []
    for row in read_jsonl(path):
        try:
            interactions.append(
                Interaction(
                    user_id=str(row["user_id"]),
                    item_id=str(row["item_id"]),
                    timestamp=float(row["timestamp"]),
                    domain=domain,
                )
            )
        except KeyError as exc:
            raise DataError(f"interaction record in {path} missing field {exc}") from exc
    return interactions


def write_split_manifest(
    path: str | Path, split: SplitDataset, domain_names: Sequence[str]
) -> int:
    def rows():
        for label, pairs in (
            ("train", split.train_pairs),
            ("valid", split.valid_pairs),
            ("test", split.test_pairs),
        ):
            for p in pairs:
                yield {
                    "domain": domain_names[p.domain],
                    "history": list(p.history),
                    "target": p.target,
                    "split": label,
                }

    return write_jsonl(path, rows())


def read_split_manifest(
    path: str | Path, domain_names: Sequence[str]
) -> SplitDataset:
    index = {name: i for i, name in enumerate(domain_names)}
    split = SplitDataset()
    buckets = {
        "train": split.train_pairs,
        "valid": split.valid_pairs,
        "test": split.test_pairs,
    }
    for row in read_jsonl(path):
        if row["domain"] not in index:
            raise DataError(f"split manifest references unknown domain {row['domain']!r}")
        if row["split"] not in buckets:
            raise DataError(f"unknown split label {row['split']!r}")
        buckets[row["split"]].append(
            Pair(index[row["domain"]], tuple(row["history"]), row["target"])
        )
    return split
