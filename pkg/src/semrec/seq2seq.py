"""Compact encoder-decoder transformer with low-rank adapters.

Pre-norm layers, learned positional embeddings, and a full-vocabulary softmax
head. Every attention projection (query, key, value, output) is a LoRALinear
so a small additive adapter can be trained per domain while the backbone stays
frozen; with no adapter attached the module is an ordinary linear layer.

The decoder is causal, so a forward pass over a right-padded fixed-width
prefix produces, at each real position, bitwise the same logits as a full
teacher-forced pass. Incremental scoring during beam search relies on this.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError
from .identifiers import PAD


@dataclass
class Seq2SeqConfig:
    vocab_size: int
    width: int = 64
    heads: int = 4
    layers: int = 2
    ffn_width: int = 128
    dropout: float = 0.1
    max_source_len: int = 96
    max_target_len: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the special tokens")
        if self.width % self.heads != 0:
            raise ConfigError("width must be divisible by heads")
        if min(self.layers, self.ffn_width, self.max_source_len, self.max_target_len) < 1:
            raise ConfigError("model dimensions must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")


class LoRALinear(nn.Module):
    """Linear layer with an optional rank-r additive adapter.

    y = W x + b + (alpha / r) * B (A x). A gets a small normal init and B is
    zero, so a freshly attached adapter leaves the output unchanged.
    """

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.register_parameter("lora_A", None)
        self.register_parameter("lora_B", None)
        self.rank = 0
        self.alpha = 0.0

    @property
    def has_adapter(self) -> bool:
        return self.lora_A is not None

    def add_adapter(self, rank: int, alpha: float, generator: torch.Generator) -> None:
        if rank < 1:
            raise ConfigError("adapter rank must be >= 1")
        if self.has_adapter:
            raise ConfigError("adapter already attached")
        dtype = self.base.weight.dtype
        a = torch.empty(rank, self.base.in_features, dtype=dtype)
        a.normal_(0.0, 0.02, generator=generator)
        self.lora_A = nn.Parameter(a)
        self.lora_B = nn.Parameter(
            torch.zeros(self.base.out_features, rank, dtype=dtype)
        )
        self.rank = rank
        self.alpha = alpha

    def remove_adapter(self) -> None:
        self.register_parameter("lora_A", None)
        self.register_parameter("lora_B", None)
        self.rank = 0
        self.alpha = 0.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.has_adapter:
            y = y + F.linear(F.linear(x, self.lora_A), self.lora_B) * (
                self.alpha / self.rank
            )
        return y


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = width // heads
        self.q_proj = LoRALinear(width, width)
        self.k_proj = LoRALinear(width, width)
        self.v_proj = LoRALinear(width, width)
        self.o_proj = LoRALinear(width, width)

    def forward(
        self,
        query: torch.Tensor,
        memory: torch.Tensor,
        mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        bsz, q_len, width = query.shape
        k_len = memory.shape[1]

        def split(t: torch.Tensor, length: int) -> torch.Tensor:
            return t.view(bsz, length, self.heads, self.head_dim).transpose(1, 2)

        q = split(self.q_proj(query), q_len)
        k = split(self.k_proj(memory), k_len)
        v = split(self.v_proj(memory), k_len)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, q_len, width)
        return self.o_proj(out)


class FeedForward(nn.Module):
    def __init__(self, width: int, ffn_width: int):
        super().__init__()
        self.inner = nn.Linear(width, ffn_width)
        self.outer = nn.Linear(ffn_width, width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(F.relu(self.inner(x)))


class EncoderLayer(nn.Module):
    def __init__(self, config: Seq2SeqConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.width)
        self.attn = MultiHeadAttention(config.width, config.heads)
        self.ln2 = nn.LayerNorm(config.width)
        self.ffn = FeedForward(config.width, config.ffn_width)
        self.drop = nn.Dropout(config.dropout)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor | None) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, pad_mask))
        x = x + self.drop(self.ffn(self.ln2(x)))
        return x


class DecoderLayer(nn.Module):
    def __init__(self, config: Seq2SeqConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(config.width)
        self.self_attn = MultiHeadAttention(config.width, config.heads)
        self.ln2 = nn.LayerNorm(config.width)
        self.cross_attn = MultiHeadAttention(config.width, config.heads)
        self.ln3 = nn.LayerNorm(config.width)
        self.ffn = FeedForward(config.width, config.ffn_width)
        self.drop = nn.Dropout(config.dropout)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        causal_mask: torch.Tensor,
        memory_mask: torch.Tensor | None,
    ) -> torch.Tensor:
        h = self.ln1(x)
        x = x + self.drop(self.self_attn(h, h, causal_mask))
        x = x + self.drop(self.cross_attn(self.ln2(x), memory, memory_mask))
        x = x + self.drop(self.ffn(self.ln3(x)))
        return x


class Seq2SeqModel(nn.Module):
    def __init__(self, config: Seq2SeqConfig):
        super().__init__()
        self.config = config
        self.tok_embed = nn.Embedding(config.vocab_size, config.width)
        self.enc_pos = nn.Embedding(config.max_source_len, config.width)
        self.dec_pos = nn.Embedding(config.max_target_len, config.width)
        self.enc_layers = nn.ModuleList(
            EncoderLayer(config) for _ in range(config.layers)
        )
        self.dec_layers = nn.ModuleList(
            DecoderLayer(config) for _ in range(config.layers)
        )
        self.enc_final_ln = nn.LayerNorm(config.width)
        self.dec_final_ln = nn.LayerNorm(config.width)
        self.lm_head = nn.Linear(config.width, config.vocab_size)
        for emb in (self.tok_embed, self.enc_pos, self.dec_pos):
            nn.init.normal_(emb.weight, std=0.02)
        nn.init.normal_(self.lm_head.weight, std=0.02)
        nn.init.zeros_(self.lm_head.bias)

    def _check_tokens(self, tokens: torch.Tensor, what: str) -> None:
        if tokens.numel() == 0:
            raise DataError(f"empty {what} token batch")
        if tokens.min().item() < 0 or tokens.max().item() >= self.config.vocab_size:
            raise DataError(f"{what} tokens outside vocabulary of size {self.config.vocab_size}")

    def encode_source(
        self, src: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (memory, pad mask). Mask is True at padded source slots."""
        self._check_tokens(src, "source")
        s_len = src.shape[1]
        if s_len > self.config.max_source_len:
            raise DataError(
                f"source length {s_len} exceeds max_source_len {self.config.max_source_len}"
            )
        pad_mask = (src == PAD)[:, None, None, :]
        positions = torch.arange(s_len, device=src.device)
        x = self.tok_embed(src) + self.enc_pos(positions)[None]
        for layer in self.enc_layers:
            x = layer(x, pad_mask)
        return self.enc_final_ln(x), pad_mask

    def decode_logits(
        self,
        memory: torch.Tensor,
        memory_mask: torch.Tensor,
        tgt_in: torch.Tensor,
    ) -> torch.Tensor:
        self._check_tokens(tgt_in, "target")
        t_len = tgt_in.shape[1]
        if t_len > self.config.max_target_len:
            raise DataError(
                f"target length {t_len} exceeds max_target_len {self.config.max_target_len}"
            )
        causal = torch.triu(
            torch.ones(t_len, t_len, dtype=torch.bool, device=tgt_in.device), diagonal=1
        )[None, None]
        positions = torch.arange(t_len, device=tgt_in.device)
        x = self.tok_embed(tgt_in) + self.dec_pos(positions)[None]
        for layer in self.dec_layers:
            x = layer(x, memory, causal, memory_mask)
        return self.lm_head(self.dec_final_ln(x))

    def forward(self, src: torch.Tensor, tgt_in: torch.Tensor) -> torch.Tensor:
        memory, memory_mask = self.encode_source(src)
        return self.decode_logits(memory, memory_mask, tgt_in)

    # ---- adapter management -------------------------------------------------

    def _adapter_sites(self) -> Iterator[LoRALinear]:
        for module in self.modules():
            if isinstance(module, MultiHeadAttention):
                yield module.q_proj
                yield module.k_proj
                yield module.v_proj
                yield module.o_proj

    def add_lora(self, rank: int, alpha: float, seed: int) -> None:
        generator = torch.Generator().manual_seed(seed)
        for site in self._adapter_sites():
            site.add_adapter(rank, alpha, generator)

    def remove_lora(self) -> None:
        for site in self._adapter_sites():
            if site.has_adapter:
                site.remove_adapter()

    @property
    def has_lora(self) -> bool:
        return any(site.has_adapter for site in self._adapter_sites())

    def lora_parameters(self) -> list[nn.Parameter]:
        return [p for n, p in self.named_parameters() if "lora_" in n]

    def backbone_state_dict(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.state_dict().items() if "lora_" not in k}

    def lora_state_dict(self) -> dict:
        sites = list(self._adapter_sites())
        if not sites or not sites[0].has_adapter:
            raise ConfigError("no adapter attached")
        return {
            "rank": sites[0].rank,
            "alpha": sites[0].alpha,
            "tensors": {
                k: v.detach().clone()
                for k, v in self.state_dict().items()
                if "lora_" in k
            },
        }

    def load_lora_state(self, state: dict) -> None:
        if self.has_lora:
            self.remove_lora()
        self.add_lora(state["rank"], state["alpha"], seed=0)
        own = dict(self.named_parameters())
        for key, value in state["tensors"].items():
            own[key].data.copy_(value)

    def freeze_backbone(self) -> None:
        for name, param in self.named_parameters():
            param.requires_grad = "lora_" in name

    def unfreeze(self) -> None:
        for param in self.parameters():
            param.requires_grad = True
