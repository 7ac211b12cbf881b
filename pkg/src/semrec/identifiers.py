"""Semantic identifiers, their token vocabulary, and per-domain prefix trees.

Each item gets an identifier made of its L quantizer codes plus a small
disambiguation suffix that separates items whose codes collide. Tokens live in
level-disjoint id ranges so the same code value at different levels maps to
different tokens; a trie per domain constrains decoding to identifiers that
actually exist in that domain's catalog.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ConfigError, DataError, DecodeError
from .utils import read_json, read_jsonl, write_json, write_jsonl

PAD, BEGIN, END = 0, 1, 2
N_SPECIALS = 3
DEFAULT_DISAMB_CAP = 16


@dataclass(frozen=True)
class SemanticIdentifier:
    codes: tuple[int, ...]
    disamb: int = 0

    def __post_init__(self):
        if len(self.codes) < 1:
            raise DataError("identifier needs at least one code")
        if any(c < 0 for c in self.codes) or self.disamb < 0:
            raise DataError("identifier codes and suffix must be non-negative")


class TokenVocabulary:
    """Maps identifier parts to token ids and back.

    Layout: pad=0, begin=1, end=2, then L blocks of N code tokens (one block
    per level), then the disambiguation block. Total size is
    3 + levels * codebook_size + disamb_cap.
    """

    def __init__(self, levels: int, codebook_size: int, disamb_cap: int = DEFAULT_DISAMB_CAP):
        if levels < 1 or codebook_size < 1 or disamb_cap < 1:
            raise ConfigError("vocabulary dimensions must be positive")
        self.levels = levels
        self.codebook_size = codebook_size
        self.disamb_cap = disamb_cap

    @property
    def size(self) -> int:
        return N_SPECIALS + self.levels * self.codebook_size + self.disamb_cap

    @property
    def pad_id(self) -> int:
        return PAD

    @property
    def begin_id(self) -> int:
        return BEGIN

    @property
    def end_id(self) -> int:
        return END

    def code_token(self, level: int, code: int) -> int:
        if not (0 <= level < self.levels):
            raise DataError(f"level {level} outside [0, {self.levels})")
        if not (0 <= code < self.codebook_size):
            raise DataError(f"code {code} outside [0, {self.codebook_size})")
        return N_SPECIALS + level * self.codebook_size + code

    def disamb_token(self, suffix: int) -> int:
        if not (0 <= suffix < self.disamb_cap):
            raise DataError(
                f"disambiguation suffix {suffix} exceeds cap {self.disamb_cap}; "
                "raise disamb_cap"
            )
        return N_SPECIALS + self.levels * self.codebook_size + suffix

    def describe(self, token: int) -> dict:
        if token == PAD:
            return {"kind": "pad"}
        if token == BEGIN:
            return {"kind": "begin"}
        if token == END:
            return {"kind": "end"}
        body = token - N_SPECIALS
        if 0 <= body < self.levels * self.codebook_size:
            return {
                "kind": "code",
                "level": body // self.codebook_size,
                "code": body % self.codebook_size,
            }
        suffix = body - self.levels * self.codebook_size
        if 0 <= suffix < self.disamb_cap:
            return {"kind": "disamb", "suffix": suffix}
        raise DataError(f"token {token} outside vocabulary of size {self.size}")

    def identifier_tokens(self, ident: SemanticIdentifier) -> tuple[int, ...]:
        if len(ident.codes) != self.levels:
            raise DataError(
                f"identifier has {len(ident.codes)} codes, vocabulary expects {self.levels}"
            )
        toks = tuple(self.code_token(l, c) for l, c in enumerate(ident.codes))
        return toks + (self.disamb_token(ident.disamb),)

    def to_json(self) -> dict:
        return {
            "levels": self.levels,
            "codebook_size": self.codebook_size,
            "disamb_cap": self.disamb_cap,
            "size": self.size,
            "specials": {"pad": PAD, "begin": BEGIN, "end": END},
        }

    @classmethod
    def from_json(cls, blob: Mapping) -> "TokenVocabulary":
        vocab = cls(blob["levels"], blob["codebook_size"], blob["disamb_cap"])
        if "size" in blob and blob["size"] != vocab.size:
            raise DataError("vocabulary file size field is inconsistent")
        return vocab


@dataclass
class AssignmentResult:
    identifiers: dict[tuple[str, str], SemanticIdentifier]
    stats: dict


def assign_identifiers(
    keys: Sequence[tuple[str, str]],
    codes: np.ndarray,
) -> AssignmentResult:
    """Attach disambiguation suffixes to raw code tuples.

    `keys` are (domain, item_id) pairs aligned row-wise with the integer code
    matrix. Items sharing a full code tuple are ordered by (domain, item_id)
    and numbered 0..g-1; unique items get suffix 0.
    """
    if len(keys) != codes.shape[0]:
        raise DataError("one code row per item key required")
    if len(set(keys)) != len(keys):
        raise DataError("duplicate (domain, item_id) keys in assignment input")

    groups: dict[tuple[int, ...], list[tuple[str, str]]] = {}
    for key, row in zip(keys, codes):
        groups.setdefault(tuple(int(c) for c in row), []).append(key)

    identifiers: dict[tuple[str, str], SemanticIdentifier] = {}
    colliding = 0
    max_group = 0
    for code_tuple, members in groups.items():
        members.sort()
        max_group = max(max_group, len(members))
        if len(members) > 1:
            colliding += len(members)
        for suffix, key in enumerate(members):
            identifiers[key] = SemanticIdentifier(code_tuple, suffix)

    stats = {
        "n_items": len(keys),
        "n_code_groups": len(groups),
        "n_colliding_items": colliding,
        "max_group_size": max_group,
        "collision_rate": colliding / len(keys) if keys else 0.0,
    }
    return AssignmentResult(identifiers, stats)


class TrieNode:
    __slots__ = ("children", "item_id")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.item_id: str | None = None


class PrefixTree:
    """Trie over one domain's identifier token sequences.

    All identifiers have the same token length, so leaves sit at a single
    depth and every root-to-leaf path is exactly one item.
    """

    def __init__(self, vocab: TokenVocabulary):
        self.vocab = vocab
        self.root = TrieNode()
        self.n_items = 0

    def insert(self, tokens: Sequence[int], item_id: str) -> None:
        node = self.root
        if node.item_id is not None:
            raise DataError("cannot insert below a completed identifier")
        for tok in tokens:
            self.vocab.describe(tok)  # range check
            if node.item_id is not None:
                raise DataError(
                    f"identifier for {item_id} extends an existing identifier"
                )
            node = node.children.setdefault(tok, TrieNode())
        if node.item_id is not None:
            raise DataError(
                f"duplicate identifier: {item_id} collides with {node.item_id}"
            )
        if node.children:
            raise DataError(f"identifier for {item_id} is a prefix of an existing one")
        node.item_id = item_id
        self.n_items += 1

    def step(self, node: TrieNode, token: int) -> TrieNode | None:
        return node.children.get(token)

    def allowed(self, node: TrieNode) -> tuple[int, ...]:
        """Continuations permitted at this node; end-of-sequence at leaves."""
        if node.item_id is not None:
            return (self.vocab.end_id,)
        if not node.children:
            raise DataError("prefix tree node with no continuations")
        return tuple(sorted(node.children))

    def lookup(self, tokens: Sequence[int]) -> str:
        """Resolve a full identifier token path (no end token) to its item."""
        node = self.root
        for tok in tokens:
            nxt = self.step(node, tok)
            if nxt is None:
                raise DecodeError(f"token {tok} has no continuation in this domain")
            node = nxt
        if node.item_id is None:
            raise DecodeError("token sequence stops short of a full identifier")
        return node.item_id


def detokenize(tokens: Sequence[int], tree: PrefixTree) -> str:
    """Map a generated token sequence back to an item id.

    Accepts the identifier tokens with or without a trailing end token and
    raises DecodeError when the sequence does not name an item in this tree.
    """
    toks = list(tokens)
    if toks and toks[-1] == tree.vocab.end_id:
        toks = toks[:-1]
    if not toks:
        raise DecodeError("empty token sequence")
    return tree.lookup(toks)


def build_prefix_trees(
    identifiers: Mapping[tuple[str, str], SemanticIdentifier],
    vocab: TokenVocabulary,
) -> dict[str, PrefixTree]:
    trees: dict[str, PrefixTree] = {}
    for (domain, item_id), ident in sorted(identifiers.items()):
        tree = trees.setdefault(domain, PrefixTree(vocab))
        tree.insert(vocab.identifier_tokens(ident), item_id)
    return trees


def write_identifier_table(
    identifiers: Mapping[tuple[str, str], SemanticIdentifier],
    path: str | Path,
) -> None:
    rows = [
        {
            "domain": domain,
            "item_id": item_id,
            "codes": list(ident.codes),
            "disamb": ident.disamb,
        }
        for (domain, item_id), ident in sorted(identifiers.items())
    ]
    write_jsonl(path, rows)


def read_identifier_table(path: str | Path) -> dict[tuple[str, str], SemanticIdentifier]:
    table: dict[tuple[str, str], SemanticIdentifier] = {}
    for row in read_jsonl(path):
        key = (row["domain"], row["item_id"])
        if key in table:
            raise DataError(f"duplicate identifier row for {key}")
        table[key] = SemanticIdentifier(tuple(row["codes"]), row["disamb"])
    return table


def write_vocabulary(vocab: TokenVocabulary, path: str | Path) -> None:
    write_json(path, vocab.to_json())


def read_vocabulary(path: str | Path) -> TokenVocabulary:
    return TokenVocabulary.from_json(read_json(path))
