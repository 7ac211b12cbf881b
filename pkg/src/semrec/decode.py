"""Constrained beam search over per-domain identifier tries.

Scores are sums of full-vocabulary log-softmax terms; the trie only decides
which continuations survive, it never renormalizes the distribution. All
identifiers in a trie have the same token length, so hypotheses stay
length-synchronized and every survivor finishes on the end token in the same
step. Sources are right-padded to the model's full source width and targets
to the identifier width, never to a per-batch maximum: reduction widths in
the underlying matmuls then match the sequence scorer's bitwise, so scores
are independent of chunking and batch composition and a finished
hypothesis's score equals exactly what the sequence scorer assigns it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .identifiers import BEGIN, END, PAD, PrefixTree, TokenVocabulary, TrieNode
from .seq2seq import Seq2SeqModel


@dataclass
class RankedItem:
    item_id: str
    score: float
    tokens: tuple[int, ...]


def mask_invalid(logprobs: torch.Tensor, allowed: Sequence[int]) -> torch.Tensor:
    """Copy of a log-probability row with disallowed tokens set to -inf."""
    if len(allowed) == 0:
        raise DataError("empty allowed set during constrained decoding")
    masked = torch.full_like(logprobs, float("-inf"))
    idx = torch.as_tensor(list(allowed), dtype=torch.long)
    masked[idx] = logprobs[idx]
    return masked


@dataclass
class _Hyp:
    tokens: tuple[int, ...]
    score: float
    node: TrieNode
    item_id: str | None = None


def batch_constrained_beam_search(
    model: Seq2SeqModel,
    sources: Sequence[Sequence[int]],
    tree: PrefixTree,
    vocab: TokenVocabulary,
    beam_size: int,
    user_chunk: int = 64,
) -> list[list[RankedItem]]:
    """Beam decode many histories against one domain trie.

    Returns, per source, up to `beam_size` items ranked by descending score
    with ties broken by token sequence. Sources are processed in chunks; the
    decoder's batch invariance keeps results independent of the chunking.
    """
    if beam_size < 1:
        raise ConfigError("beam_size must be >= 1")
    if tree.n_items == 0:
        raise DataError("cannot decode against an empty prefix tree")
    if not sources:
        return []
    out: list[list[RankedItem]] = []
    for start in range(0, len(sources), user_chunk):
        out.extend(
            _decode_chunk(model, sources[start : start + user_chunk], tree, vocab, beam_size)
        )
    return out


def _decode_chunk(
    model: Seq2SeqModel,
    sources: Sequence[Sequence[int]],
    tree: PrefixTree,
    vocab: TokenVocabulary,
    beam_size: int,
) -> list[list[RankedItem]]:
    model.eval()
    n_users = len(sources)
    width = vocab.levels + 2  # identifier tokens + end token
    s_max = model.config.max_source_len
    src = torch.full((n_users, s_max), PAD, dtype=torch.long)
    for i, s in enumerate(sources):
        if len(s) == 0:
            raise DataError("empty decode source")
        if len(s) > s_max:
            raise DataError(
                f"decode source of {len(s)} tokens exceeds model width {s_max}"
            )
        src[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)

    with torch.no_grad():
        memory, memory_mask = model.encode_source(src)

        beams: list[list[_Hyp]] = [
            [_Hyp((), 0.0, tree.root)] for _ in range(n_users)
        ]
        for step in range(width):
            rows: list[tuple[int, _Hyp]] = [
                (u, hyp) for u in range(n_users) for hyp in beams[u]
            ]
            tgt_in = torch.full((len(rows), width), PAD, dtype=torch.long)
            owner = torch.empty(len(rows), dtype=torch.long)
            for r, (u, hyp) in enumerate(rows):
                tgt_in[r, 0] = BEGIN
                for j, tok in enumerate(hyp.tokens):
                    tgt_in[r, j + 1] = tok
                owner[r] = u
            logits = model.decode_logits(
                memory[owner], memory_mask[owner], tgt_in
            )[:, step, :]
            logprobs = F.log_softmax(logits, dim=-1)

            candidates: list[list[_Hyp]] = [[] for _ in range(n_users)]
            for r, (u, hyp) in enumerate(rows):
                allowed = tree.allowed(hyp.node)
                masked = mask_invalid(logprobs[r], allowed)
                for tok in allowed:
                    score = hyp.score + masked[tok].item()
                    if tok == END and hyp.node.item_id is not None:
                        candidates[u].append(
                            _Hyp(hyp.tokens + (tok,), score, hyp.node, hyp.node.item_id)
                        )
                    else:
                        nxt = tree.step(hyp.node, tok)
                        if nxt is None:
                            raise DataError("allowed token missing from the prefix tree")
                        candidates[u].append(_Hyp(hyp.tokens + (tok,), score, nxt))
            for u in range(n_users):
                candidates[u].sort(key=lambda h: (-h.score, h.tokens))
            beams = [candidates[u][:beam_size] for u in range(n_users)]

    results: list[list[RankedItem]] = []
    for u in range(n_users):
        ranked = []
        for hyp in beams[u]:
            if hyp.item_id is None:
                raise DataError("hypothesis survived decoding without completing")
            ranked.append(RankedItem(hyp.item_id, hyp.score, hyp.tokens))
        results.append(ranked)
    return results


def constrained_beam_search(
    model: Seq2SeqModel,
    src_tokens: Sequence[int],
    tree: PrefixTree,
    vocab: TokenVocabulary,
    beam_size: int,
) -> list[RankedItem]:
    return batch_constrained_beam_search(model, [src_tokens], tree, vocab, beam_size)[0]
