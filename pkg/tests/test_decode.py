"""Constrained beam search against a brute-force catalog scorer."""

import math

import numpy as np
import pytest
import torch

from semrec.corpus import Pair
from semrec.decode import (
    RankedItem,
    batch_constrained_beam_search,
    constrained_beam_search,
    mask_invalid,
)
from semrec.errors import ConfigError, DataError
from semrec.genrec import (
    RecTrainConfig,
    score_sequence,
    tokenize_pairs,
    train_recommender,
)
from semrec.identifiers import (
    END,
    PrefixTree,
    SemanticIdentifier,
    TokenVocabulary,
)
from semrec.seq2seq import Seq2SeqConfig, Seq2SeqModel

LEVELS, CODES = 2, 4


def make_catalog(n_items=30, seed=0):
    """Identifier table plus trie for one synthetic domain."""
    rng = np.random.default_rng(seed)
    vocab = TokenVocabulary(LEVELS, CODES, disamb_cap=16)
    table = {}
    counts = {}
    for i in range(n_items):
        codes = tuple(int(c) for c in rng.integers(0, CODES, size=LEVELS))
        suffix = counts.get(codes, 0)
        counts[codes] = suffix + 1
        table[(0, f"item-{i:03d}")] = SemanticIdentifier(codes, suffix)
    tree = PrefixTree(vocab)
    for (_, item_id), ident in sorted(table.items()):
        tree.insert(vocab.identifier_tokens(ident), item_id)
    return table, vocab, tree


def make_model(vocab, seed=0, trained_on=None):
    config = Seq2SeqConfig(
        vocab_size=vocab.size, width=16, heads=2, layers=1, ffn_width=32,
        dropout=0.0, max_source_len=24, max_target_len=LEVELS + 2, seed=seed,
    )
    if trained_on is None:
        return Seq2SeqModel(config).double()
    model, _ = train_recommender(
        config, trained_on, trained_on, RecTrainConfig(epochs=3, batch_size=16)
    )
    return model


def brute_force_rank(model, src, table, vocab, tree):
    """Score every catalog item exhaustively and sort like the decoder."""
    scored = []
    for (_, item_id), ident in table.items():
        tokens = (*vocab.identifier_tokens(ident), END)
        score = score_sequence(model, src, list(tokens))
        scored.append(RankedItem(item_id, score, tokens))
    scored.sort(key=lambda r: (-r.score, r.tokens))
    return scored


def sample_history(table, rng, hist_len=3):
    ids = sorted(item for (_, item) in table)
    vocab_items = [table[(0, i)] for i in ids]
    picks = rng.choice(len(ids), size=hist_len, replace=True)
    return [t for j in picks for t in
            TokenVocabulary(LEVELS, CODES, 16).identifier_tokens(vocab_items[j])]


class TestExhaustiveEquivalence:
    @pytest.mark.parametrize("trained", [False, True])
    def test_full_beam_matches_brute_force(self, trained):
        table, vocab, tree = make_catalog(n_items=30)
        tok = None
        if trained:
            ids = sorted(item for (_, item) in table)
            pairs = [
                Pair(0, (ids[i], ids[(i + 1) % len(ids)]), ids[(i + 2) % len(ids)])
                for i in range(len(ids))
            ]
            tok = tokenize_pairs(pairs, table, vocab, 24)
        model = make_model(vocab, trained_on=tok)
        rng = np.random.default_rng(7)
        for trial in range(4):
            src = sample_history(table, rng)
            expected = brute_force_rank(model, src, table, vocab, tree)
            got = constrained_beam_search(model, src, tree, vocab, beam_size=len(table))
            assert [r.item_id for r in got] == [r.item_id for r in expected]
            assert [r.score for r in got] == [r.score for r in expected]
            assert [r.tokens for r in got] == [r.tokens for r in expected]

    def test_scores_match_sequence_scorer_exactly(self):
        table, vocab, tree = make_catalog(n_items=12)
        model = make_model(vocab)
        src = [4, 5, 6, 7]
        for item in constrained_beam_search(model, src, tree, vocab, beam_size=12):
            assert item.score == score_sequence(model, src, list(item.tokens))

    def test_single_item_catalog(self):
        vocab = TokenVocabulary(LEVELS, CODES, disamb_cap=4)
        tree = PrefixTree(vocab)
        ident = SemanticIdentifier((1, 2), 0)
        tree.insert(vocab.identifier_tokens(ident), "only")
        model = make_model(vocab)
        got = constrained_beam_search(model, [4], tree, vocab, beam_size=5)
        assert [r.item_id for r in got] == ["only"]
        assert got[0].score == score_sequence(model, [4], list(got[0].tokens))


class TestBeamBehavior:
    def test_all_results_in_catalog_without_duplicates(self):
        table, vocab, tree = make_catalog(n_items=25)
        model = make_model(vocab)
        catalog = {item for (_, item) in table}
        for beam in (1, 3, 10, 25, 40):
            got = constrained_beam_search(model, [4, 5], tree, vocab, beam_size=beam)
            ids = [r.item_id for r in got]
            assert len(ids) == min(beam, len(table))
            assert len(set(ids)) == len(ids)
            assert set(ids) <= catalog

    def test_exhaustive_beam_never_scores_below_greedy(self):
        table, vocab, tree = make_catalog(n_items=20)
        model = make_model(vocab, seed=3)
        greedy = constrained_beam_search(model, [4, 5, 6], tree, vocab, beam_size=1)
        full = constrained_beam_search(model, [4, 5, 6], tree, vocab, beam_size=20)
        assert full[0].score >= greedy[0].score

    def test_results_sorted_by_score_then_tokens(self):
        table, vocab, tree = make_catalog(n_items=25)
        model = make_model(vocab)
        got = constrained_beam_search(model, [4], tree, vocab, beam_size=25)
        keys = [(-r.score, r.tokens) for r in got]
        assert keys == sorted(keys)


class TestBatching:
    def test_chunking_does_not_change_results(self):
        table, vocab, tree = make_catalog(n_items=15)
        model = make_model(vocab)
        rng = np.random.default_rng(11)
        sources = [sample_history(table, rng, hist_len=1 + (i % 3)) for i in range(7)]
        a = batch_constrained_beam_search(model, sources, tree, vocab, 5, user_chunk=64)
        b = batch_constrained_beam_search(model, sources, tree, vocab, 5, user_chunk=2)
        assert a == b

    def test_batched_equals_one_at_a_time(self):
        # Mixed-length sources share one padded batch; results must match
        # each source decoded alone.
        table, vocab, tree = make_catalog(n_items=15)
        model = make_model(vocab)
        rng = np.random.default_rng(13)
        sources = [sample_history(table, rng, hist_len=1 + (i % 3)) for i in range(5)]
        batched = batch_constrained_beam_search(model, sources, tree, vocab, 4)
        for src, rows in zip(sources, batched):
            alone = constrained_beam_search(model, src, tree, vocab, 4)
            assert rows == alone

    def test_empty_source_list(self):
        table, vocab, tree = make_catalog(n_items=5)
        model = make_model(vocab)
        assert batch_constrained_beam_search(model, [], tree, vocab, 3) == []


class TestMasking:
    def test_mask_keeps_allowed_and_blocks_rest(self):
        row = torch.log_softmax(torch.randn(10, dtype=torch.float64), dim=-1)
        masked = mask_invalid(row, [2, 5])
        assert masked[2] == row[2] and masked[5] == row[5]
        others = [i for i in range(10) if i not in (2, 5)]
        assert all(math.isinf(masked[i].item()) and masked[i] < 0 for i in others)

    def test_empty_allowed_set_rejected(self):
        row = torch.zeros(4, dtype=torch.float64)
        with pytest.raises(DataError):
            mask_invalid(row, [])


class TestErrors:
    def test_beam_size_must_be_positive(self):
        table, vocab, tree = make_catalog(n_items=5)
        model = make_model(vocab)
        with pytest.raises(ConfigError):
            constrained_beam_search(model, [4], tree, vocab, beam_size=0)

    def test_empty_tree_rejected(self):
        vocab = TokenVocabulary(LEVELS, CODES, disamb_cap=4)
        model = make_model(vocab)
        with pytest.raises(DataError):
            constrained_beam_search(model, [4], PrefixTree(vocab), vocab, beam_size=3)

    def test_empty_history_rejected(self):
        table, vocab, tree = make_catalog(n_items=5)
        model = make_model(vocab)
        with pytest.raises(DataError):
            constrained_beam_search(model, [], tree, vocab, beam_size=3)
