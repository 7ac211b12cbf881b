"""Ranking metrics, weighted aggregation, and code-space analyses.

Recall@K is a hit indicator on the top-K ranked items; NDCG@K with a single
relevant item is 1/log2(rank+1) for a hit and 0 otherwise. Domain metrics are
combined with user-count weights. The analyses inspect how quantizer codes
distribute over domains and how code agreement tracks embedding-space
neighborhoods.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ConfigError, DataError
from .identifiers import SemanticIdentifier


def recall_at_k(ranked_ids: Sequence[str], target: str, k: int) -> float:
    if k < 1:
        raise ConfigError("k must be >= 1")
    return 1.0 if target in list(ranked_ids)[:k] else 0.0


def ndcg_at_k(ranked_ids: Sequence[str], target: str, k: int) -> float:
    """With one relevant item the ideal DCG is 1, so NDCG is 1/log2(rank+1)."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    top = list(ranked_ids)[:k]
    for pos, item in enumerate(top):
        if item == target:
            return 1.0 / math.log2(pos + 2)
    return 0.0


def evaluate_rankings(
    rankings: Sequence[Sequence[str]],
    targets: Sequence[str],
    ks: Sequence[int],
) -> dict[str, float]:
    """Mean Recall@K and NDCG@K over one domain's users."""
    if len(rankings) != len(targets):
        raise DataError("one target per ranking required")
    if not rankings:
        raise DataError("no rankings to evaluate")
    out: dict[str, float] = {}
    for k in ks:
        out[f"recall@{k}"] = float(
            np.mean([recall_at_k(r, t, k) for r, t in zip(rankings, targets)])
        )
        out[f"ndcg@{k}"] = float(
            np.mean([ndcg_at_k(r, t, k) for r, t in zip(rankings, targets)])
        )
    return out


def aggregate_weighted(
    per_domain: Mapping[str, Mapping[str, float]],
    counts: Mapping[str, int],
) -> dict[str, float]:
    """User-count weighted mean of each metric across domains."""
    if not per_domain:
        raise DataError("nothing to aggregate")
    if set(per_domain) - set(counts):
        raise DataError("missing user counts for some domains")
    total = sum(counts[d] for d in per_domain)
    if total <= 0:
        raise DataError("aggregate weights must be positive")
    metrics = sorted({m for vals in per_domain.values() for m in vals})
    out: dict[str, float] = {}
    for metric in metrics:
        num = 0.0
        for domain, vals in per_domain.items():
            if metric not in vals:
                raise DataError(f"domain {domain} lacks metric {metric}")
            num += counts[domain] * vals[metric]
        out[metric] = num / total
    return out


@dataclass
class MetricReport:
    """Evaluation results for one run; serializes to stable, timestamp-free JSON."""

    config_hash: str
    beam_size: int
    per_domain: dict[str, dict[str, float]]
    counts: dict[str, int]
    aggregate: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not self.aggregate:
            self.aggregate = aggregate_weighted(self.per_domain, self.counts)

    def to_json(self) -> dict:
        return {
            "config_hash": self.config_hash,
            "beam_size": self.beam_size,
            "counts": dict(sorted(self.counts.items())),
            "per_domain": {
                d: dict(sorted(v.items())) for d, v in sorted(self.per_domain.items())
            },
            "aggregate": dict(sorted(self.aggregate.items())),
        }

    @classmethod
    def from_json(cls, blob: Mapping) -> "MetricReport":
        return cls(
            blob["config_hash"],
            blob["beam_size"],
            {d: dict(v) for d, v in blob["per_domain"].items()},
            dict(blob["counts"]),
            dict(blob["aggregate"]),
        )

    def render_table(self) -> str:
        metrics = sorted(self.aggregate)
        header = ["domain", "users", *metrics]
        lines = ["\t".join(header)]
        for domain in sorted(self.per_domain):
            vals = self.per_domain[domain]
            lines.append(
                "\t".join(
                    [domain, str(self.counts[domain])]
                    + [f"{vals[m]:.4f}" for m in metrics]
                )
            )
        lines.append(
            "\t".join(
                ["ALL", str(sum(self.counts.values()))]
                + [f"{self.aggregate[m]:.4f}" for m in metrics]
            )
        )
        return "\n".join(lines)


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    tmp.replace(path)


def code_domain_distribution(
    identifiers: Mapping[tuple[str, str], SemanticIdentifier],
    level: int = 0,
    purity_threshold: float = 0.95,
    top: int = 100,
) -> dict:
    """Per-code domain histogram at one quantizer level.

    Returns counts per (code, domain), the share of each code's items held by
    its majority domain, and the fraction of used codes whose majority share
    meets the threshold. `rows` holds the `top` most-populated codes.
    """
    if not identifiers:
        raise DataError("no identifiers to analyze")
    levels = len(next(iter(identifiers.values())).codes)
    if not (0 <= level < levels):
        raise DataError(f"level {level} outside [0, {levels})")

    hist: dict[int, dict[str, int]] = {}
    for (domain, _item), ident in identifiers.items():
        code = ident.codes[level]
        hist.setdefault(code, {}).setdefault(domain, 0)
        hist[code][domain] += 1

    rows = []
    pure = 0
    for code in sorted(hist):
        counts = hist[code]
        total = sum(counts.values())
        majority_domain = max(sorted(counts), key=lambda d: counts[d])
        share = counts[majority_domain] / total
        if share >= purity_threshold:
            pure += 1
        rows.append(
            {
                "code": code,
                "total": total,
                "counts": dict(sorted(counts.items())),
                "majority_domain": majority_domain,
                "majority_share": share,
            }
        )
    rows.sort(key=lambda r: (-r["total"], r["code"]))
    return {
        "level": level,
        "n_codes_used": len(hist),
        "purity_threshold": purity_threshold,
        "purity": pure / len(hist),
        "rows": rows[:top],
    }


def neighbor_code_overlap(
    keys: Sequence[tuple[str, str]],
    embeddings: np.ndarray,
    identifiers: Mapping[tuple[str, str], SemanticIdentifier],
    k: int = 10,
    metric: str = "euclidean",
) -> dict:
    """Mean count of code levels shared with embedding-space neighbors.

    For every item, its k nearest same-domain items by distance on the
    original embeddings are found (self excluded); the overlap with one
    neighbor is the number of quantizer levels on which the codes agree, so
    values lie in [0, L]. Averaged over neighbors then items, per domain. The
    disambiguation suffix is not compared.
    """
    if k < 1:
        raise ConfigError("k must be >= 1")
    if metric not in ("euclidean", "cosine"):
        raise ConfigError(f"unsupported neighbor metric {metric!r}")
    if len(keys) != embeddings.shape[0]:
        raise DataError("one embedding row per key required")
    if not keys:
        raise DataError("no items to analyze")
    levels = len(identifiers[tuple(keys[0])].codes)

    by_domain: dict[str, list[int]] = {}
    for i, (domain, _item) in enumerate(keys):
        by_domain.setdefault(domain, []).append(i)

    per_domain: dict[str, float] = {}
    all_scores: list[float] = []
    for domain in sorted(by_domain):
        idx = by_domain[domain]
        if len(idx) <= k:
            raise DataError(
                f"domain {domain} has {len(idx)} items; need more than k={k}"
            )
        emb = embeddings[idx]
        codes = np.array([identifiers[keys[i]].codes for i in idx])
        dists = cdist(emb, emb, metric=metric)
        np.fill_diagonal(dists, np.inf)
        scores = []
        for row in range(len(idx)):
            order = np.lexsort((np.arange(len(idx)), dists[row]))[:k]
            agree = (codes[order] == codes[row][None, :]).sum(axis=1)
            scores.append(float(agree.mean()))
        per_domain[domain] = float(np.mean(scores))
        all_scores.extend(scores)

    return {
        "k": k,
        "metric": metric,
        "levels": levels,
        "per_domain": per_domain,
        "overall": float(np.mean(all_scores)),
    }
