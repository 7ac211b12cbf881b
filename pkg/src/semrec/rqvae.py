"""Residual-quantization autoencoder over pooled multi-domain item embeddings.

An MLP encoder maps each item embedding to a latent vector, which an L-level
residual quantizer snaps to learnable codebook entries; an MLP decoder
reconstructs the embedding from the summed codewords. Training combines the
reconstruction loss, the two-sided quantization loss with stop-gradients, and
an optional domain-aware contrastive loss pulling quantized latents of
same-domain items together.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import KMeans

from .errors import ConfigError, DataError, TrainingError
from .utils import atomic_torch_save, pinned_default_dtype, seed_everything

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class QuantizerConfig:
    """Desk-scale defaults; production-scale values go through the same fields
    (input_dim=4096, latent_dim=32, codebook_size=256, batch_size=1024,
    epochs=10_000)."""

    input_dim: int = 64
    latent_dim: int = 16
    levels: int = 4
    codebook_size: int = 32
    beta: float = 0.25
    hidden_dims: tuple[int, ...] = (64,)
    dcl_enabled: bool = True
    dcl_warmup_epochs: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 256
    epochs: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if not (1 <= self.latent_dim <= self.input_dim):
            raise ConfigError("need 1 <= latent_dim <= input_dim")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.dcl_enabled and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when the contrastive loss is on")
        self.hidden_dims = tuple(self.hidden_dims)


@dataclass
class QuantizationResult:
    """Codes and residuals for a batch of latents.

    `quantized` is the fixed-order sum of the chosen codewords; `residuals`
    holds r_0 (the input latent) through r_L, with r_l = r_{l-1} minus the
    level-l codeword.
    """

    codes: torch.Tensor  # (B, L) long
    quantized: torch.Tensor  # (B, d)
    residuals: list[torch.Tensor]  # L + 1 tensors of shape (B, d)


def residual_quantize(z: torch.Tensor, codebooks: torch.Tensor) -> QuantizationResult:
    """Greedy level-by-level nearest-codeword assignment.

    At each level the codeword nearest (Euclidean) to the running residual is
    chosen, ties broken by lowest index. Pure value computation: no gradients.
    """
    single = z.dim() == 1
    with torch.no_grad():
        z = z.detach()
        if single:
            z = z[None]
        if z.shape[1] != codebooks.shape[2]:
            raise DataError(
                f"latent dim {z.shape[1]} does not match codebook dim {codebooks.shape[2]}"
            )
        levels = codebooks.shape[0]
        residual = z
        residuals = [residual]
        codes = []
        quantized = torch.zeros_like(z)
        for l in range(levels):
            dists = ((residual[:, None, :] - codebooks[l][None, :, :]) ** 2).sum(-1)
            idx = torch.min(dists, dim=1).indices  # first minimal index on ties
            chosen = codebooks[l][idx]
            residual = residual - chosen
            quantized = quantized + chosen
            residuals.append(residual)
            codes.append(idx)
        codes_t = torch.stack(codes, dim=1)
    if single:
        return QuantizationResult(
            codes_t[0], quantized[0], [r[0] for r in residuals]
        )
    return QuantizationResult(codes_t, quantized, residuals)


def _mlp(dims: Sequence[int]) -> nn.Sequential:
    layers: list[nn.Module] = []
    for i in range(len(dims) - 1):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class ResidualQuantizerAutoencoder(nn.Module):
    def __init__(self, config: QuantizerConfig):
        super().__init__()
        self.config = config
        enc_dims = [config.input_dim, *config.hidden_dims, config.latent_dim]
        dec_dims = [config.latent_dim, *reversed(config.hidden_dims), config.input_dim]
        self.encoder = _mlp(enc_dims)
        self.decoder = _mlp(dec_dims)
        self.codebooks = nn.Parameter(
            torch.randn(config.levels, config.codebook_size, config.latent_dim) * 0.1
        )

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.input_dim:
            raise DataError(
                f"input dim {x.shape[-1]} does not match config D={self.config.input_dim}"
            )
        if not torch.all(torch.isfinite(x)):
            raise DataError("non-finite values in encoder input")
        return self.encoder(x)

    def decode(self, z_hat: torch.Tensor) -> torch.Tensor:
        return self.decoder(z_hat)

    def quantize(self, x: torch.Tensor) -> QuantizationResult:
        """Codes for raw embedding(s): encode then residual-quantize."""
        with torch.no_grad():
            return residual_quantize(self.encode(x), self.codebooks)

    def losses(
        self,
        x: torch.Tensor,
        domains: torch.Tensor | None = None,
        with_dcl: bool = False,
    ) -> dict[str, torch.Tensor]:
        """Per-batch loss terms with the stop-gradient structure made explicit.

        The codebook pull term sees frozen residuals and differentiable
        codeword gathers; the commitment term sees the differentiable latent
        and frozen codewords; the decoder runs on the straight-through
        quantized latent (value of the codeword sum, gradient of the latent).
        """
        if x.dim() != 2 or x.shape[0] < 1:
            raise DataError("losses expect a non-empty (B, D) batch")
        z = self.encode(x)
        rq = residual_quantize(z, self.codebooks)
        codes = rq.codes

        # Frozen values of the chosen codewords and of the pre-level residuals.
        frozen_e = torch.stack(
            [self.codebooks[l][codes[:, l]] for l in range(self.config.levels)], dim=1
        ).detach()  # (B, L, d)
        frozen_pre = torch.stack(rq.residuals[:-1], dim=1)  # (B, L, d), r_0 .. r_{L-1}

        codebook_term = torch.zeros((), dtype=x.dtype)
        commit_term = torch.zeros((), dtype=x.dtype)
        frozen_prefix = torch.zeros_like(z)
        for l in range(self.config.levels):
            e_param = self.codebooks[l][codes[:, l]]
            codebook_term = codebook_term + (
                (frozen_pre[:, l] - e_param) ** 2
            ).sum(-1).mean()
            pre_residual = z - frozen_prefix  # value r_{l-1}, grad only via z
            commit_term = commit_term + (
                (pre_residual - frozen_e[:, l]) ** 2
            ).sum(-1).mean()
            frozen_prefix = frozen_prefix + frozen_e[:, l]

        loss_rq = codebook_term + self.config.beta * commit_term

        z_hat_st = z + (rq.quantized - z).detach()
        x_hat = self.decoder(z_hat_st)
        loss_recon = ((x - x_hat) ** 2).sum(-1).mean()

        out = {"recon": loss_recon, "rq": loss_rq}
        if with_dcl:
            if domains is None:
                raise DataError("domain labels required for the contrastive loss")
            out["dcl"] = dcl_loss(z_hat_st, domains)
        return out


def dcl_loss(z_hat: torch.Tensor, domains: torch.Tensor) -> torch.Tensor:
    """Domain-aware contrastive loss over a batch of quantized latents.

    For each item, minus the log of the fraction of total pairwise
    exp-inner-product mass that falls on items of the same domain (self pairs
    included on both sides), averaged over the batch. Computed with
    log-sum-exp for stability; inner products are used unnormalized.
    """
    if z_hat.dim() != 2:
        raise DataError("dcl_loss expects a (B, d) batch")
    batch = z_hat.shape[0]
    if batch < 2:
        raise DataError(f"contrastive loss needs a batch of >= 2, got {batch}")
    if domains.shape[0] != batch:
        raise DataError("domain labels must match the batch size")

    sims = z_hat @ z_hat.T  # (B, B)
    same = domains[:, None] == domains[None, :]
    neg_inf = torch.tensor(float("-inf"), dtype=sims.dtype)
    same_lse = torch.logsumexp(torch.where(same, sims, neg_inf), dim=1)
    all_lse = torch.logsumexp(sims, dim=1)
    return -(same_lse - all_lse).mean()


def _kmeans_codebook_init(
    model: ResidualQuantizerAutoencoder,
    embeddings: torch.Tensor,
    seed: int,
) -> None:
    """Initialize each level's codebook by k-means on that level's residuals.

    Uses the untrained encoder's latents; levels are filled greedily so each
    one clusters the residuals left by the previous. Falls back to jittered
    resampling when there are fewer distinct residuals than codewords.
    """
    cfg = model.config
    with torch.no_grad():
        residual = model.encode(embeddings).numpy()
        rng = np.random.default_rng(seed)
        for l in range(cfg.levels):
            if residual.shape[0] >= cfg.codebook_size:
                km = KMeans(
                    n_clusters=cfg.codebook_size,
                    n_init=2,
                    random_state=seed + l,
                ).fit(residual)
                centers = km.cluster_centers_
            else:
                picks = rng.integers(0, residual.shape[0], size=cfg.codebook_size)
                centers = residual[picks] + 1e-3 * rng.standard_normal(
                    (cfg.codebook_size, residual.shape[1])
                )
            model.codebooks.data[l] = torch.as_tensor(
                centers, dtype=model.codebooks.dtype
            )
            rq = residual_quantize(torch.as_tensor(residual, dtype=model.codebooks.dtype),
                                   model.codebooks.data[l][None])
            residual = rq.residuals[-1].numpy()


def train_quantizer(
    embeddings: np.ndarray,
    domains: np.ndarray,
    config: QuantizerConfig,
) -> tuple[ResidualQuantizerAutoencoder, list[dict]]:
    """Train the quantizer on all domains pooled; returns model and epoch log.

    Optimized with AdamW. Codes unused for a full epoch are re-seeded to a
    random residual from the last batch; per-level utilization is logged each
    epoch.
    """
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise DataError("embeddings must be a non-empty (n, D) matrix")
    if embeddings.shape[0] != domains.shape[0]:
        raise DataError("one domain label per embedding required")

    seed_everything(config.seed)
    with pinned_default_dtype(torch.float32):
        model = ResidualQuantizerAutoencoder(config)
    model = model.double()
    x_all = torch.as_tensor(embeddings, dtype=torch.float64)
    dom_all = torch.as_tensor(domains, dtype=torch.long)
    n = x_all.shape[0]

    init_count = min(n, max(config.batch_size, 4 * config.codebook_size))
    _kmeans_codebook_init(model, x_all[:init_count], config.seed)

    optimizer = torch.optim.AdamW(model.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(config.seed + 1)
    reseed_rng = np.random.default_rng(config.seed + 2)

    log: list[dict] = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        used = [set() for _ in range(config.levels)]
        last_residuals: list[torch.Tensor] | None = None
        sums = {"recon": 0.0, "rq": 0.0, "dcl": 0.0}
        n_batches = 0
        dcl_on = config.dcl_enabled and epoch >= config.dcl_warmup_epochs

        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = x_all[idx]
            dom = dom_all[idx]
            use_dcl = dcl_on and x.shape[0] >= 2
            terms = model.losses(x, dom, with_dcl=use_dcl)
            total = terms["recon"] + terms["rq"]
            if use_dcl:
                total = total + terms["dcl"]
            if not torch.isfinite(total):
                raise TrainingError(
                    f"quantizer training diverged at epoch {epoch} "
                    f"(recon={terms['recon'].item():.4g}, rq={terms['rq'].item():.4g})"
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            with torch.no_grad():
                rq = residual_quantize(model.encode(x), model.codebooks)
            for l in range(config.levels):
                used[l].update(rq.codes[:, l].tolist())
            last_residuals = rq.residuals
            sums["recon"] += terms["recon"].item()
            sums["rq"] += terms["rq"].item()
            sums["dcl"] += terms["dcl"].item() if use_dcl else 0.0
            n_batches += 1

        utilization = [len(used[l]) / config.codebook_size for l in range(config.levels)]
        reseeded = 0
        if last_residuals is not None:
            with torch.no_grad():
                for l in range(config.levels):
                    dead = [k for k in range(config.codebook_size) if k not in used[l]]
                    pool = last_residuals[l]  # residuals entering level l
                    for k in dead:
                        pick = int(reseed_rng.integers(0, pool.shape[0]))
                        model.codebooks.data[l, k] = pool[pick]
                        reseeded += 1

        record = {
            "epoch": epoch,
            "loss_recon": sums["recon"] / n_batches,
            "loss_rq": sums["rq"] / n_batches,
            "loss_dcl": sums["dcl"] / n_batches,
            "loss_total": (sums["recon"] + sums["rq"] + sums["dcl"]) / n_batches,
            "utilization": utilization,
            "reseeded": reseeded,
        }
        log.append(record)
        if epoch % max(1, config.epochs // 10) == 0:
            logger.info(
                "quantizer epoch %d: recon=%.4f rq=%.4f dcl=%.4f util=%s",
                epoch, record["loss_recon"], record["loss_rq"], record["loss_dcl"],
                [f"{u:.2f}" for u in utilization],
            )

    return model, log


def save_quantizer(model: ResidualQuantizerAutoencoder, path: str | Path) -> None:
    atomic_torch_save(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "state_dict": model.state_dict(),
        },
        path,
    )


def load_quantizer(path: str | Path) -> ResidualQuantizerAutoencoder:
    blob = torch.load(path, weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported quantizer checkpoint version in {path}")
    config = QuantizerConfig(**blob["config"])
    model = ResidualQuantizerAutoencoder(config).double()
    model.load_state_dict(blob["state_dict"])
    return model
