"""Training and scoring of the generative recommender.

Histories and targets are rendered as identifier token sequences; a single
encoder-decoder backbone is trained on next-item pairs pooled across domains,
then specialized per domain either through low-rank adapters on the frozen
backbone or by full-parameter fine-tuning of a copy. Scoring of a candidate
sequence is the left-to-right sum of full-vocabulary log-softmax terms, which
beam search reproduces exactly.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .corpus import Pair
from .errors import ConfigError, DataError, TrainingError
from .identifiers import PAD, BEGIN, END, SemanticIdentifier, TokenVocabulary
from .seq2seq import Seq2SeqConfig, Seq2SeqModel
from .utils import atomic_torch_save, pinned_default_dtype, seed_everything

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TokenizedPairs:
    """Fixed-width tensors for a set of next-item pairs.

    Targets all share one width (identifier length plus end token), so only
    sources carry padding. `domains` is kept for per-domain slicing.
    """

    src: torch.Tensor  # (B, S) long, right-padded with PAD
    tgt_in: torch.Tensor  # (B, T) long, BEGIN + target[:-1]
    labels: torch.Tensor  # (B, T) long, target tokens + END
    domains: tuple[int, ...]

    def __len__(self) -> int:
        return self.src.shape[0]

    def subset(self, indices: Sequence[int]) -> "TokenizedPairs":
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        return TokenizedPairs(
            self.src[idx],
            self.tgt_in[idx],
            self.labels[idx],
            tuple(self.domains[i] for i in indices),
        )

    def domain_subset(self, domain: int) -> "TokenizedPairs":
        return self.subset([i for i, d in enumerate(self.domains) if d == domain])


def pair_source_tokens(
    pair: Pair,
    table: Mapping[tuple[str, str], SemanticIdentifier],
    vocab: TokenVocabulary,
    max_source_len: int,
) -> list[int]:
    """History rendered as concatenated identifier tokens, most recent last.

    When the flat sequence would overflow, whole items are dropped from the
    oldest end so identifiers never get split.
    """
    per_item = vocab.levels + 1
    keep = max_source_len // per_item
    if keep < 1:
        raise ConfigError("max_source_len cannot fit a single identifier")
    toks: list[int] = []
    for item_id in pair.history[-keep:]:
        key = (pair.domain, item_id)
        if key not in table:
            raise DataError(f"history item {key} has no identifier")
        toks.extend(vocab.identifier_tokens(table[key]))
    if not toks:
        raise DataError("pair with empty history")
    return toks


def pair_target_tokens(
    pair: Pair,
    table: Mapping[tuple[str, str], SemanticIdentifier],
    vocab: TokenVocabulary,
) -> list[int]:
    key = (pair.domain, pair.target)
    if key not in table:
        raise DataError(f"target item {key} has no identifier")
    return [*vocab.identifier_tokens(table[key]), END]


def tokenize_pairs(
    pairs: Sequence[Pair],
    table: Mapping[tuple[str, str], SemanticIdentifier],
    vocab: TokenVocabulary,
    max_source_len: int,
) -> TokenizedPairs:
    if not pairs:
        raise DataError("no pairs to tokenize")
    width = vocab.levels + 2  # identifier tokens + end
    srcs, tgt_ins, labels = [], [], []
    for pair in pairs:
        src = pair_source_tokens(pair, table, vocab, max_source_len)
        tgt = pair_target_tokens(pair, table, vocab)
        srcs.append(src)
        tgt_ins.append([BEGIN, *tgt[:-1]])
        labels.append(tgt)
        assert len(tgt) == width
    s_max = max(len(s) for s in srcs)
    src_mat = torch.full((len(pairs), s_max), PAD, dtype=torch.long)
    for i, s in enumerate(srcs):
        src_mat[i, : len(s)] = torch.as_tensor(s, dtype=torch.long)
    return TokenizedPairs(
        src_mat,
        torch.as_tensor(tgt_ins, dtype=torch.long),
        torch.as_tensor(labels, dtype=torch.long),
        tuple(p.domain for p in pairs),
    )


@dataclass
class RecTrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    patience: int = 8
    seed: int = 0
    init_checkpoint: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


def _batch_ce(model: Seq2SeqModel, tok: TokenizedPairs, idx: np.ndarray) -> torch.Tensor:
    sl = torch.as_tensor(idx, dtype=torch.long)
    logits = model(tok.src[sl], tok.tgt_in[sl])
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), tok.labels[sl].reshape(-1)
    )


def _run_epoch(
    model: Seq2SeqModel,
    tok: TokenizedPairs,
    batch_size: int,
    optimizer: torch.optim.Optimizer | None,
    order: np.ndarray,
) -> float:
    total, count = 0.0, 0
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if optimizer is None:
            with torch.no_grad():
                loss = _batch_ce(model, tok, idx)
        else:
            loss = _batch_ce(model, tok, idx)
            if not torch.isfinite(loss):
                raise TrainingError("recommender training diverged (non-finite loss)")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        total += loss.item() * len(idx)
        count += len(idx)
    return total / count


def evaluate_ce(model: Seq2SeqModel, tok: TokenizedPairs, batch_size: int = 256) -> float:
    model.eval()
    return _run_epoch(model, tok, batch_size, None, np.arange(len(tok)))


def train_recommender(
    model_config: Seq2SeqConfig,
    train_tok: TokenizedPairs,
    valid_tok: TokenizedPairs,
    config: RecTrainConfig,
) -> tuple[Seq2SeqModel, list[dict]]:
    """Train one backbone on pooled pairs, keeping the best-validation state."""
    seed_everything(config.seed)
    with pinned_default_dtype(torch.float32):
        model = Seq2SeqModel(model_config)
    model = model.double()
    if config.init_checkpoint:
        warm, _ = load_recommender(config.init_checkpoint)
        if warm.config != model_config:
            raise ConfigError("init_checkpoint was trained with a different model config")
        model.load_state_dict(warm.backbone_state_dict())

    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed)
    best_val = float("inf")
    best_state = copy.deepcopy(model.state_dict())
    since_best = 0
    log: list[dict] = []

    for epoch in range(config.epochs):
        model.train()
        train_loss = _run_epoch(
            model, train_tok, config.batch_size, optimizer,
            rng.permutation(len(train_tok)),
        )
        valid_loss = evaluate_ce(model, valid_tok)
        improved = valid_loss < best_val
        if improved:
            best_val = valid_loss
            best_state = copy.deepcopy(model.state_dict())
            since_best = 0
        else:
            since_best += 1
        log.append(
            {
                "epoch": epoch,
                "train_loss": train_loss,
                "valid_loss": valid_loss,
                "best": improved,
            }
        )
        if epoch % max(1, config.epochs // 10) == 0:
            logger.info(
                "recommender epoch %d: train=%.4f valid=%.4f", epoch, train_loss, valid_loss
            )
        if since_best > config.patience:
            logger.info("early stop at epoch %d (no validation gain)", epoch)
            break

    model.load_state_dict(best_state)
    model.eval()
    return model, log


@dataclass
class FinetuneConfig:
    mode: str = "lora"  # "lora" | "full" | "none"
    rank: int = 4
    alpha: float = 8.0
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    patience: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("lora", "full", "none"):
            raise ConfigError(f"unknown finetune mode {self.mode!r}")
        if self.rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")


def finetune_lora(
    model: Seq2SeqModel,
    train_tok: TokenizedPairs,
    eval_fn: Callable[[Seq2SeqModel], float],
    config: FinetuneConfig,
) -> tuple[dict, list[dict]]:
    """Adapter fine-tuning for one domain with metric-based selection.

    The freshly attached zero adapter (identical to the bare backbone) is the
    first selection candidate, so the kept adapter can never score below the
    shared model on the domain validation metric. The backbone itself is
    frozen and never touched by the optimizer.
    """
    seed_everything(config.seed)
    if model.has_lora:
        model.remove_lora()
    model.add_lora(config.rank, config.alpha, config.seed)
    model.freeze_backbone()

    model.eval()
    best_metric = eval_fn(model)
    best_state = model.lora_state_dict()
    history = [{"epoch": -1, "train_loss": None, "metric": best_metric, "best": True}]

    optimizer = torch.optim.AdamW(
        model.lora_parameters(), lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )
    rng = np.random.default_rng(config.seed)
    since_best = 0
    for epoch in range(config.epochs):
        model.train()
        train_loss = _run_epoch(
            model, train_tok, config.batch_size, optimizer,
            rng.permutation(len(train_tok)),
        )
        model.eval()
        metric = eval_fn(model)
        improved = metric > best_metric
        if improved:
            best_metric = metric
            best_state = model.lora_state_dict()
            since_best = 0
        else:
            since_best += 1
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "metric": metric, "best": improved}
        )
        if since_best > config.patience:
            break

    model.load_lora_state(best_state)
    model.unfreeze()
    model.eval()
    return best_state, history


def finetune_full(
    model: Seq2SeqModel,
    train_tok: TokenizedPairs,
    eval_fn: Callable[[Seq2SeqModel], float],
    config: FinetuneConfig,
) -> tuple[Seq2SeqModel, list[dict]]:
    """Full-parameter fine-tuning of a copied backbone for one domain."""
    seed_everything(config.seed)
    tuned = copy.deepcopy(model)
    tuned.unfreeze()

    tuned.eval()
    best_metric = eval_fn(tuned)
    best_state = copy.deepcopy(tuned.state_dict())
    history = [{"epoch": -1, "train_loss": None, "metric": best_metric, "best": True}]

    optimizer = torch.optim.AdamW(
        tuned.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay
    )
    rng = np.random.default_rng(config.seed)
    since_best = 0
    for epoch in range(config.epochs):
        tuned.train()
        train_loss = _run_epoch(
            tuned, train_tok, config.batch_size, optimizer,
            rng.permutation(len(train_tok)),
        )
        tuned.eval()
        metric = eval_fn(tuned)
        improved = metric > best_metric
        if improved:
            best_metric = metric
            best_state = copy.deepcopy(tuned.state_dict())
            since_best = 0
        else:
            since_best += 1
        history.append(
            {"epoch": epoch, "train_loss": train_loss, "metric": metric, "best": improved}
        )
        if since_best > config.patience:
            break

    tuned.load_state_dict(best_state)
    tuned.eval()
    return tuned, history


def score_sequence(
    model: Seq2SeqModel,
    src_tokens: Sequence[int],
    tgt_tokens: Sequence[int],
) -> float:
    """Log-probability of a target token sequence given a source.

    Teacher-forced: each term is the full-vocabulary log-softmax probability
    of the next target token, accumulated left to right as native floats. An
    empty target scores 0.0 (probability one of generating nothing). The
    source is padded to the model's full width so the result is bitwise
    identical to what batched constrained decoding computes for the same
    sequence.
    """
    if not tgt_tokens:
        return 0.0
    model.eval()
    width = model.config.max_source_len
    if len(src_tokens) > width:
        raise DataError(
            f"source of {len(src_tokens)} tokens exceeds model width {width}"
        )
    src = torch.full((1, width), PAD, dtype=torch.long)
    src[0, : len(src_tokens)] = torch.as_tensor(list(src_tokens), dtype=torch.long)
    tgt_in = torch.as_tensor([[BEGIN, *tgt_tokens[:-1]]], dtype=torch.long)
    with torch.no_grad():
        logits = model(src, tgt_in)
        logprobs = F.log_softmax(logits, dim=-1)
    total = 0.0
    for t, token in enumerate(tgt_tokens):
        total = total + logprobs[0, t, int(token)].item()
    return total


def save_recommender(
    model: Seq2SeqModel,
    path: str | Path,
    adapters: Mapping[str, dict] | None = None,
) -> None:
    atomic_torch_save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "state_dict": model.backbone_state_dict(),
            "adapters": dict(adapters or {}),
        },
        path,
    )


def load_recommender(path: str | Path) -> tuple[Seq2SeqModel, dict[str, dict]]:
    blob = torch.load(path, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported recommender checkpoint version in {path}")
    model = Seq2SeqModel(Seq2SeqConfig(**blob["config"])).double()
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, blob.get("adapters", {})
