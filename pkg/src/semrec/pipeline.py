"""Stage orchestration with content-addressed artifacts.

Every stage writes into a directory named by a hash of the exact
configuration slice and upstream artifacts it depends on, so re-running with
an unchanged config is a no-op, a changed seed invalidates everything
downstream, and variant runs sharing an output root reuse expensive upstream
stages automatically. Builds happen in a temporary directory that is renamed
into place on success, so interrupted runs never leave corrupt artifacts.
"""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import corpus, decode, evaluation, genrec, identifiers, rqvae
from .config import EvalConfig, RunConfig, canonical_hash, config_hash
from .corpus import Interaction, Item, SplitDataset, item_text
from .embed import (
    EmbeddingCache,
    HashEmbedder,
    RemoteEmbedConfig,
    RemoteEmbedder,
    standardize,
)
from .errors import ConfigError, DataError
from .seq2seq import Seq2SeqConfig, Seq2SeqModel
from .utils import atomic_torch_save, read_json, read_jsonl, write_json, write_jsonl

logger = logging.getLogger(__name__)

STAGE_FORMAT = 1
STAGE_ORDER = (
    "dataset",
    "embed",
    "tokenize",
    "assign",
    "train",
    "finetune",
    "evaluate",
    "analyze",
)
STAGE_DEPS: dict[str, tuple[str, ...]] = {
    "dataset": (),
    "embed": ("dataset",),
    "tokenize": ("embed",),
    "assign": ("embed", "tokenize"),
    "train": ("dataset", "assign"),
    "finetune": ("dataset", "assign", "train"),
    "evaluate": ("dataset", "assign", "train", "finetune"),
    "analyze": ("embed", "assign"),
}


def _file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _parse_select_metric(spec: str) -> tuple[str, int]:
    kind, _, k = spec.partition("@")
    if kind not in ("recall", "ndcg") or not k.isdigit() or int(k) < 1:
        raise ConfigError(f"bad select_metric {spec!r}; expected e.g. ndcg@10")
    return kind, int(k)


class Pipeline:
    def __init__(self, config: RunConfig, out_root: str | Path | None = None):
        self.config = config
        self.hash = config_hash(config)
        self.out = Path(out_root if out_root is not None else config.out_dir)
        self.stage_root = self.out / "stages"
        self.run_dir = self.out / "runs" / f"run_{self.hash[:12]}"
        torch.set_num_threads(config.threads)
        self._effective_finetune_mode = (
            config.ablation.finetune if config.ablation.unified_recommender else "none"
        )

    # ---- content addressing -------------------------------------------------

    def stage_key(self, name: str) -> str:
        payload = {
            "format": STAGE_FORMAT,
            "stage": name,
            "config": self._stage_payload(name),
            "upstream": [self.stage_key(dep) for dep in STAGE_DEPS[name]],
        }
        return canonical_hash(payload)

    def _stage_payload(self, name: str) -> dict:
        cfg = self.config
        if name == "dataset":
            payload: dict = {"dataset": asdict(cfg.dataset), "seed": cfg.seed}
            if cfg.dataset.source == "files":
                payload["file_hashes"] = {
                    fd.name: {
                        "metadata": _file_sha256(fd.metadata),
                        "interactions": _file_sha256(fd.interactions),
                    }
                    for fd in cfg.dataset.files
                }
            return payload
        if name == "embed":
            # Transport knobs (batching, retries, cache location) do not
            # change the vectors, so they stay out of the hash.
            e = cfg.embedder
            return {
                "provider": e.provider,
                "dim": e.dim,
                "standardize": e.standardize,
                "provider_id": e.provider_id if e.provider == "remote" else "",
            }
        if name == "tokenize":
            return {
                "quantizer": asdict(cfg.quantizer),
                "shared_codebook": cfg.ablation.shared_codebook,
                "threads": cfg.threads,
            }
        if name == "assign":
            return {"identifier": asdict(cfg.identifier)}
        if name == "train":
            return {
                "model": asdict(cfg.model),
                "train": asdict(cfg.train),
                "unified": cfg.ablation.unified_recommender,
                "max_seq_len": cfg.dataset.max_seq_len,
                "threads": cfg.threads,
            }
        if name == "finetune":
            return {
                "finetune": asdict(cfg.finetune),
                "mode": self._effective_finetune_mode,
                "decode": asdict(cfg.decode),
                "select_metric": cfg.evaluation.select_metric,
                "seed": cfg.seed,
                "threads": cfg.threads,
            }
        if name == "evaluate":
            return {
                "decode": asdict(cfg.decode),
                "cutoffs": list(cfg.evaluation.cutoffs),
                "threads": cfg.threads,
            }
        if name == "analyze":
            ev = cfg.evaluation
            return {
                "levels": list(ev.analysis_levels),
                "neighbor_ks": list(ev.neighbor_ks),
                "neighbor_metric": ev.neighbor_metric,
                "purity_threshold": ev.purity_threshold,
                "top_codes": ev.top_codes,
            }
        raise ConfigError(f"unknown stage {name!r}")

    def stage_dir(self, name: str) -> Path:
        return self.stage_root / f"{name}_{self.stage_key(name)[:16]}"

    def stage_complete(self, name: str) -> bool:
        marker = self.stage_dir(name) / "complete.json"
        return marker.exists() and read_json(marker).get("key") == self.stage_key(name)

    # ---- execution ----------------------------------------------------------

    def ensure_stage(self, name: str, deps: bool = True) -> Path:
        """Run one stage (and, when `deps`, anything missing upstream).

        With `deps` false, missing upstream artifacts are an error, matching
        stage-at-a-time command usage.
        """
        if name not in STAGE_DEPS:
            raise ConfigError(f"unknown stage {name!r}")
        for dep in STAGE_DEPS[name]:
            if deps:
                self.ensure_stage(dep, deps=True)
            elif not self.stage_complete(dep):
                raise DataError(
                    f"stage {name!r} needs artifacts of {dep!r}; run that stage first"
                )

        key = self.stage_key(name)
        sdir = self.stage_dir(name)
        marker = sdir / "complete.json"
        start = time.perf_counter()
        if self.stage_complete(name):
            self._record(name, key, sdir, seconds=0.0, skipped=True)
            logger.debug("stage %s up to date (%s)", name, sdir.name)
            return sdir

        builders: dict[str, Callable[[Path], None]] = {
            "dataset": self._build_dataset,
            "embed": self._build_embed,
            "tokenize": self._build_tokenize,
            "assign": self._build_assign,
            "train": self._build_train,
            "finetune": self._build_finetune,
            "evaluate": self._build_evaluate,
            "analyze": self._build_analyze,
        }
        tmp = sdir.parent / (sdir.name + ".building")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        logger.info("stage %s building in %s", name, tmp.name)
        builders[name](tmp)
        write_json(
            tmp / "complete.json",
            {
                "stage": name,
                "key": key,
                "config_hash": self.hash,
                "config": self.config.to_dict(),
            },
        )
        if sdir.exists():
            shutil.rmtree(sdir)
        tmp.replace(sdir)
        self._record(name, key, sdir, seconds=time.perf_counter() - start, skipped=False)
        return sdir

    def run_all(self) -> dict[str, Path]:
        return {name: self.ensure_stage(name, deps=True) for name in STAGE_ORDER}

    def _record(self, name: str, key: str, sdir: Path, seconds: float, skipped: bool) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        manifest_path = self.run_dir / "manifest.json"
        manifest = (
            read_json(manifest_path)
            if manifest_path.exists()
            else {
                "config": self.config.to_dict(),
                "config_hash": self.hash,
                "stages": {},
            }
        )
        manifest["stages"][name] = {
            "key": key,
            "dir": str(sdir),
            "seconds": round(seconds, 3),
            "skipped": skipped,
        }
        write_json(manifest_path, manifest)

    # ---- shared loading helpers ---------------------------------------------

    @property
    def domain_names(self) -> list[str]:
        return self.config.dataset.domain_names

    def _load_split(self, dataset_dir: Path) -> SplitDataset:
        return corpus.read_split_manifest(dataset_dir / "splits.jsonl", self.domain_names)

    def _load_keys(self, embed_dir: Path) -> list[tuple[int, str]]:
        index = {n: i for i, n in enumerate(self.domain_names)}
        return [
            (index[row["domain"]], row["item_id"])
            for row in read_jsonl(embed_dir / "keys.jsonl")
        ]

    def _load_identifier_artifacts(self, assign_dir: Path):
        table = identifiers.read_identifier_table(assign_dir / "identifiers.jsonl")
        vocab = identifiers.read_vocabulary(assign_dir / "vocabulary.json")
        trees = identifiers.build_prefix_trees(table, vocab)
        return table, vocab, trees

    def _max_source_len(self, vocab: identifiers.TokenVocabulary) -> int:
        return (self.config.dataset.max_seq_len - 1) * (vocab.levels + 1)

    def _model_config(self, vocab: identifiers.TokenVocabulary) -> Seq2SeqConfig:
        m = self.config.model
        return Seq2SeqConfig(
            vocab_size=vocab.size,
            width=m.width,
            heads=m.heads,
            layers=m.layers,
            ffn_width=m.ffn_width,
            dropout=m.dropout,
            max_source_len=self._max_source_len(vocab),
            max_target_len=vocab.levels + 2,
            seed=self.config.train.seed,
        )

    def _model_for_domain(
        self, train_dir: Path, finetune_dir: Path, domain_idx: int
    ) -> Seq2SeqModel:
        name = self.domain_names[domain_idx]
        if not self.config.ablation.unified_recommender:
            model, _ = genrec.load_recommender(train_dir / f"recommender_{domain_idx}.pt")
            return model
        mode = read_json(finetune_dir / "finetune.json")["mode"]
        if mode == "full":
            model, _ = genrec.load_recommender(
                finetune_dir / f"recommender_ft_{domain_idx}.pt"
            )
            return model
        model, _ = genrec.load_recommender(train_dir / "recommender.pt")
        if mode == "lora":
            blob = torch.load(finetune_dir / "adapters.pt", weights_only=False)
            model.load_lora_state(blob["adapters"][name])
        model.eval()
        return model

    # ---- stage builders -----------------------------------------------------

    def _build_dataset(self, out: Path) -> None:
        cfg = self.config.dataset
        names = self.domain_names
        if cfg.source == "synthetic":
            items, raw_sequences = corpus.synthesize_domains(cfg.synthetic, self.config.seed)
            interactions = [
                Interaction(f"u{si:05d}", item_id, float(pos), seq.domain)
                for si, seq in enumerate(raw_sequences)
                for pos, item_id in enumerate(seq.items)
            ]
        else:
            items, interactions = [], []
            for idx, fd in enumerate(cfg.files):
                items.extend(corpus.load_metadata_file(fd.metadata, idx))
                interactions.extend(corpus.load_interaction_file(fd.interactions, idx))
        known = {(it.domain, it.item_id) for it in items}
        for rec in interactions:
            if (rec.domain, rec.item_id) not in known:
                raise DataError(
                    f"interaction references unknown item {rec.item_id!r} "
                    f"in domain {names[rec.domain]!r}"
                )

        kept: list[Interaction] = []
        emptied: dict[str, bool] = {}
        for idx, name in enumerate(names):
            dom = [r for r in interactions if r.domain == idx]
            if not dom:
                raise DataError(f"domain {name!r} has no interactions")
            result = corpus.k_core_filter(dom, cfg.k_core)
            emptied[name] = result.emptied
            kept.extend(result.interactions)

        sequences = corpus.build_sequences(kept, cfg.max_seq_len)
        if not sequences:
            raise DataError("no sequences of length >= 3 survived filtering")
        split = corpus.leave_one_out_split(sequences, cfg.train_expansion)

        items_sorted = sorted(items, key=lambda it: (it.domain, it.item_id))
        write_jsonl(
            out / "items.jsonl",
            (
                {
                    "item_id": it.item_id,
                    "domain": names[it.domain],
                    "title": it.title,
                    "brand": it.brand,
                    "categories": list(it.categories),
                }
                for it in items_sorted
            ),
        )
        corpus.write_split_manifest(out / "splits.jsonl", split, names)
        n_items = {name: 0 for name in names}
        for it in items_sorted:
            n_items[names[it.domain]] += 1
        write_json(
            out / "dataset_stats.json",
            {
                "domains": names,
                "n_items": n_items,
                "n_interactions_kept": len(kept),
                "n_sequences": len(sequences),
                "n_train_pairs": len(split.train_pairs),
                "n_valid_pairs": len(split.valid_pairs),
                "n_test_pairs": len(split.test_pairs),
                "kcore_emptied": emptied,
            },
        )

    def _build_embed(self, out: Path) -> None:
        dataset_dir = self.stage_dir("dataset")
        ecfg = self.config.embedder
        index = {n: i for i, n in enumerate(self.domain_names)}
        rows = list(read_jsonl(dataset_dir / "items.jsonl"))
        texts = [
            item_text(
                Item(
                    item_id=r["item_id"],
                    domain=index[r["domain"]],
                    title=r["title"],
                    brand=r.get("brand", ""),
                    categories=tuple(r.get("categories", [])),
                )
            )
            for r in rows
        ]
        if ecfg.provider == "hash":
            embedder = HashEmbedder(ecfg.dim)
        else:
            cache = EmbeddingCache(ecfg.cache) if ecfg.cache else None
            embedder = RemoteEmbedder(
                RemoteEmbedConfig(
                    provider_id=ecfg.provider_id,
                    dim=ecfg.dim,
                    batch_limit=ecfg.batch_limit,
                    max_attempts=ecfg.max_attempts,
                    backoff_base=ecfg.backoff_base,
                    parallelism=ecfg.parallelism,
                    timeout=ecfg.timeout,
                ),
                cache=cache,
            )
        matrix = np.asarray(embedder.embed(texts), dtype=np.float64)
        if ecfg.standardize:
            matrix = standardize(matrix)
        with open(out / "embeddings.npy", "wb") as fh:
            np.save(fh, matrix)
        write_jsonl(
            out / "keys.jsonl",
            ({"domain": r["domain"], "item_id": r["item_id"]} for r in rows),
        )
        write_json(
            out / "provider.json",
            {
                "provider_id": embedder.provider_id,
                "dim": ecfg.dim,
                "standardize": ecfg.standardize,
                "n_items": int(matrix.shape[0]),
            },
        )

    def _build_tokenize(self, out: Path) -> None:
        embed_dir = self.stage_dir("embed")
        matrix = np.load(embed_dir / "embeddings.npy")
        keys = self._load_keys(embed_dir)
        domains = np.array([d for d, _ in keys])
        qcfg = self.config.quantizer
        log_rows: list[dict] = []
        if self.config.ablation.shared_codebook:
            model, log = rqvae.train_quantizer(matrix, domains, qcfg)
            rqvae.save_quantizer(model, out / "quantizer.pt")
            log_rows.extend({"model": "shared", **row} for row in log)
        else:
            for idx, name in enumerate(self.domain_names):
                sub = domains == idx
                sub_cfg = dataclasses.replace(qcfg, seed=qcfg.seed + idx)
                model, log = rqvae.train_quantizer(matrix[sub], domains[sub], sub_cfg)
                rqvae.save_quantizer(model, out / f"quantizer_{idx}.pt")
                log_rows.extend({"model": name, **row} for row in log)
        write_jsonl(out / "train_log.jsonl", log_rows)

    def _build_assign(self, out: Path) -> None:
        embed_dir = self.stage_dir("embed")
        tokenize_dir = self.stage_dir("tokenize")
        matrix = np.load(embed_dir / "embeddings.npy")
        keys = self._load_keys(embed_dir)
        domains = np.array([d for d, _ in keys])
        levels = self.config.quantizer.levels
        base_n = self.config.quantizer.codebook_size
        shared = self.config.ablation.shared_codebook

        if shared:
            model = rqvae.load_quantizer(tokenize_dir / "quantizer.pt")
            codes = model.quantize(torch.as_tensor(matrix, dtype=torch.float64)).codes.numpy()
            effective_n = base_n
        else:
            # Per-domain codebooks: offset each domain's code range so token
            # ids stay disjoint across domains.
            codes = np.zeros((len(keys), levels), dtype=np.int64)
            for idx in range(len(self.domain_names)):
                sub = domains == idx
                model = rqvae.load_quantizer(tokenize_dir / f"quantizer_{idx}.pt")
                sub_codes = model.quantize(
                    torch.as_tensor(matrix[sub], dtype=torch.float64)
                ).codes.numpy()
                codes[sub] = sub_codes + idx * base_n
            effective_n = base_n * len(self.domain_names)

        result = identifiers.assign_identifiers(keys, codes)
        cap = self.config.identifier.disamb_cap
        if result.stats["max_group_size"] > cap:
            raise DataError(
                f"a code collision group of size {result.stats['max_group_size']} "
                f"exceeds disamb_cap={cap}; raise identifier.disamb_cap"
            )
        vocab = identifiers.TokenVocabulary(levels, effective_n, cap)
        identifiers.write_identifier_table(result.identifiers, out / "identifiers.jsonl")
        identifiers.write_vocabulary(vocab, out / "vocabulary.json")
        write_json(
            out / "assignment.json",
            {
                "stats": result.stats,
                "shared_codebook": shared,
                "codebook_size": base_n,
                "effective_codebook_size": effective_n,
                "vocab_size": vocab.size,
            },
        )

    def _build_train(self, out: Path) -> None:
        dataset_dir = self.stage_dir("dataset")
        assign_dir = self.stage_dir("assign")
        split = self._load_split(dataset_dir)
        table, vocab, _ = self._load_identifier_artifacts(assign_dir)
        max_src = self._max_source_len(vocab)
        model_cfg = self._model_config(vocab)
        log_rows: list[dict] = []

        if self.config.ablation.unified_recommender:
            train_tok = genrec.tokenize_pairs(split.train_pairs, table, vocab, max_src)
            valid_tok = genrec.tokenize_pairs(split.valid_pairs, table, vocab, max_src)
            model, log = genrec.train_recommender(
                model_cfg, train_tok, valid_tok, self.config.train
            )
            genrec.save_recommender(model, out / "recommender.pt")
            log_rows.extend({"model": "unified", **row} for row in log)
        else:
            for idx, name in enumerate(self.domain_names):
                train_pairs = [p for p in split.train_pairs if p.domain == idx]
                valid_pairs = [p for p in split.valid_pairs if p.domain == idx]
                if not train_pairs or not valid_pairs:
                    raise DataError(f"domain {name!r} has no training data after filtering")
                tcfg = dataclasses.replace(
                    self.config.train, seed=self.config.train.seed + idx
                )
                model, log = genrec.train_recommender(
                    dataclasses.replace(model_cfg, seed=tcfg.seed),
                    genrec.tokenize_pairs(train_pairs, table, vocab, max_src),
                    genrec.tokenize_pairs(valid_pairs, table, vocab, max_src),
                    tcfg,
                )
                genrec.save_recommender(model, out / f"recommender_{idx}.pt")
                log_rows.extend({"model": name, **row} for row in log)
        write_jsonl(out / "train_log.jsonl", log_rows)

    def _valid_metric_fn(
        self,
        split: SplitDataset,
        table,
        vocab,
        trees,
        domain_idx: int,
    ) -> Callable[[Seq2SeqModel], float]:
        kind, k = _parse_select_metric(self.config.evaluation.select_metric)
        pairs = [p for p in split.valid_pairs if p.domain == domain_idx]
        if not pairs:
            raise DataError(
                f"domain {self.domain_names[domain_idx]!r} has no validation pairs"
            )
        max_src = self._max_source_len(vocab)
        srcs = [genrec.pair_source_tokens(p, table, vocab, max_src) for p in pairs]
        targets = [p.target for p in pairs]
        beam = self.config.decode.beam_size
        chunk = self.config.decode.user_chunk

        def metric(model: Seq2SeqModel) -> float:
            results = decode.batch_constrained_beam_search(
                model, srcs, trees[domain_idx], vocab, beam, chunk
            )
            rankings = [[r.item_id for r in ranked] for ranked in results]
            return evaluation.evaluate_rankings(rankings, targets, ks=(k,))[f"{kind}@{k}"]

        return metric

    def _build_finetune(self, out: Path) -> None:
        mode = self._effective_finetune_mode
        meta: dict = {"mode": mode}
        if not self.config.ablation.unified_recommender:
            meta["reason"] = "per-domain backbones are already domain-specific"
        if mode == "none":
            write_json(out / "finetune.json", meta)
            write_jsonl(out / "finetune_log.jsonl", [])
            return

        dataset_dir = self.stage_dir("dataset")
        assign_dir = self.stage_dir("assign")
        train_dir = self.stage_dir("train")
        split = self._load_split(dataset_dir)
        table, vocab, trees = self._load_identifier_artifacts(assign_dir)
        max_src = self._max_source_len(vocab)
        model, _ = genrec.load_recommender(train_dir / "recommender.pt")

        log_rows: list[dict] = []
        adapters: dict[str, dict] = {}
        # Domains run sequentially: the training loops draw dropout noise from
        # the process-global generator, which parallel workers would race on.
        for idx, name in enumerate(self.domain_names):
            pairs = [p for p in split.train_pairs if p.domain == idx]
            if not pairs:
                raise DataError(f"domain {name!r} has no training pairs to finetune on")
            tok = genrec.tokenize_pairs(pairs, table, vocab, max_src)
            eval_fn = self._valid_metric_fn(split, table, vocab, trees, idx)
            ft_cfg = self.config.finetune.to_runtime(mode, self.config.seed + 100 + idx)
            if mode == "lora":
                state, history = genrec.finetune_lora(model, tok, eval_fn, ft_cfg)
                adapters[name] = state
                model.remove_lora()
            else:
                tuned, history = genrec.finetune_full(model, tok, eval_fn, ft_cfg)
                genrec.save_recommender(tuned, out / f"recommender_ft_{idx}.pt")
            log_rows.extend({"domain": name, **row} for row in history)

        if mode == "lora":
            atomic_torch_save(
                {"format_version": 1, "mode": mode, "adapters": adapters},
                out / "adapters.pt",
            )
            adapter_params = sum(
                int(t.numel()) for t in next(iter(adapters.values()))["tensors"].values()
            )
            backbone_params = sum(int(v.numel()) for v in model.backbone_state_dict().values())
            meta["adapter_params"] = adapter_params
            meta["backbone_params"] = backbone_params
            meta["adapter_ratio"] = adapter_params / backbone_params
        write_json(out / "finetune.json", meta)
        write_jsonl(out / "finetune_log.jsonl", log_rows)

    def _build_evaluate(self, out: Path) -> None:
        dataset_dir = self.stage_dir("dataset")
        assign_dir = self.stage_dir("assign")
        train_dir = self.stage_dir("train")
        finetune_dir = self.stage_dir("finetune")
        split = self._load_split(dataset_dir)
        table, vocab, trees = self._load_identifier_artifacts(assign_dir)
        max_src = self._max_source_len(vocab)
        ks = self.config.evaluation.cutoffs
        beam = self.config.decode.beam_size
        chunk = self.config.decode.user_chunk

        def eval_domain(idx: int) -> tuple[str, dict[str, float], int]:
            name = self.domain_names[idx]
            pairs = [p for p in split.test_pairs if p.domain == idx]
            if not pairs:
                raise DataError(f"domain {name!r} has no test pairs")
            model = self._model_for_domain(train_dir, finetune_dir, idx)
            srcs = [genrec.pair_source_tokens(p, table, vocab, max_src) for p in pairs]
            results = decode.batch_constrained_beam_search(
                model, srcs, trees[idx], vocab, beam, chunk
            )
            catalog = {key[1] for key in table if key[0] == idx}
            rankings = []
            for ranked in results:
                ids = [r.item_id for r in ranked]
                stray = set(ids) - catalog
                if stray:
                    raise DataError(f"decoded items outside domain catalog: {stray}")
                rankings.append(ids)
            metrics = evaluation.evaluate_rankings(rankings, [p.target for p in pairs], ks)
            return name, metrics, len(pairs)

        indices = range(len(self.domain_names))
        if self.config.workers > 1:
            with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
                rows = list(pool.map(eval_domain, indices))
        else:
            rows = [eval_domain(i) for i in indices]

        per_domain = {name: metrics for name, metrics, _ in rows}
        counts = {name: n for name, _, n in rows}
        report = evaluation.MetricReport(self.hash, beam, per_domain, counts)
        write_json(out / "report.json", report.to_json())
        metric_names = sorted(report.aggregate)
        write_jsonl(
            out / "metrics.jsonl",
            [
                {"domain": name, "n_users": counts[name], **per_domain[name]}
                for name in sorted(per_domain)
            ]
            + [{"domain": "__aggregate__", "n_users": sum(counts.values()), **report.aggregate}],
        )
        evaluation.write_csv(
            out / "report.csv",
            ["domain", "n_users", *metric_names],
            [
                [name, counts[name], *[per_domain[name][m] for m in metric_names]]
                for name in sorted(per_domain)
            ]
            + [["__aggregate__", sum(counts.values()), *[report.aggregate[m] for m in metric_names]]],
        )
        (out / "report.txt").write_text(report.render_table() + "\n")

    def _build_analyze(self, out: Path) -> None:
        embed_dir = self.stage_dir("embed")
        assign_dir = self.stage_dir("assign")
        matrix = np.load(embed_dir / "embeddings.npy")
        table, _, _ = self._load_identifier_artifacts(assign_dir)
        names = self.domain_names
        keys_named = []
        table_named = {}
        for (idx, item_id), ident in sorted(table.items()):
            keys_named.append((names[idx], item_id))
            table_named[(names[idx], item_id)] = ident
        ev: EvalConfig = self.config.evaluation

        summary: dict = {"config_hash": self.hash, "purity": {}, "neighbor_overlap": {}}
        for level in ev.analysis_levels:
            dist = evaluation.code_domain_distribution(
                table_named, level, ev.purity_threshold, ev.top_codes
            )
            summary["purity"][str(level)] = dist["purity"]
            evaluation.write_csv(
                out / f"code_distribution_l{level}.csv",
                ["code", "total", "majority_domain", "majority_share", *names],
                [
                    [
                        r["code"],
                        r["total"],
                        r["majority_domain"],
                        r["majority_share"],
                        *[r["counts"].get(n, 0) for n in names],
                    ]
                    for r in dist["rows"]
                ],
            )
            write_json(out / f"code_distribution_l{level}.json", dist)

        overlap_rows = []
        for k in ev.neighbor_ks:
            overlap = evaluation.neighbor_code_overlap(
                keys_named, matrix, table_named, k, ev.neighbor_metric
            )
            summary["neighbor_overlap"][str(k)] = overlap
            overlap_rows.extend(
                [k, domain, value] for domain, value in sorted(overlap["per_domain"].items())
            )
            overlap_rows.append([k, "__overall__", overlap["overall"]])
        evaluation.write_csv(
            out / "neighbor_overlap.csv", ["k", "domain", "mean_overlap"], overlap_rows
        )
        write_json(out / "analysis.json", summary)

    # ---- file-mode decoding -------------------------------------------------

    def decode_file(self, input_path: str | Path, output_path: str | Path, deps: bool = False) -> int:
        """Batch inference: line-delimited histories in, ranked lists out."""
        if not Path(input_path).is_file():
            raise DataError(f"decode input file {input_path} does not exist")
        for stage in ("assign", "train", "finetune"):
            self.ensure_stage(stage, deps=deps)
        assign_dir = self.stage_dir("assign")
        train_dir = self.stage_dir("train")
        finetune_dir = self.stage_dir("finetune")
        table, vocab, trees = self._load_identifier_artifacts(assign_dir)
        max_src = self._max_source_len(vocab)
        index = {n: i for i, n in enumerate(self.domain_names)}

        rows = list(read_jsonl(input_path))
        for pos, row in enumerate(rows):
            if "domain" not in row or "history" not in row:
                raise DataError(f"decode input line {pos + 1} needs domain and history")
            if row["domain"] not in index:
                raise DataError(f"decode input line {pos + 1}: unknown domain {row['domain']!r}")
            if not row["history"]:
                raise DataError(f"decode input line {pos + 1}: empty history")

        outputs: list[dict | None] = [None] * len(rows)
        for name in sorted({row["domain"] for row in rows}):
            idx = index[name]
            positions = [i for i, row in enumerate(rows) if row["domain"] == name]
            model = self._model_for_domain(train_dir, finetune_dir, idx)
            srcs = []
            for i in positions:
                pair = corpus.Pair(idx, tuple(rows[i]["history"]), rows[i]["history"][-1])
                srcs.append(genrec.pair_source_tokens(pair, table, vocab, max_src))
            results = decode.batch_constrained_beam_search(
                model, srcs, trees[idx], vocab,
                self.config.decode.beam_size, self.config.decode.user_chunk,
            )
            for i, ranked in zip(positions, results):
                outputs[i] = {
                    "domain": name,
                    "history": rows[i]["history"],
                    "items": [
                        {"item_id": r.item_id, "score": r.score} for r in ranked
                    ],
                }
        return write_jsonl(output_path, (o for o in outputs if o is not None))


# ---------------------------------------------------------------------------
# Ablation comparison


def run_ablation(
    base_data: dict,
    preset: str,
    out_root: str | Path | None = None,
) -> dict:
    """Run the default config and one named variant, compare aggregates.

    Both runs share one output root, so content-addressed stages they agree on
    (dataset, embeddings, sometimes more) are computed once.
    """
    from .config import apply_preset, build_run_config

    base_cfg = build_run_config(base_data)
    variant_cfg = build_run_config(apply_preset(base_data, preset))
    root = Path(out_root if out_root is not None else base_cfg.out_dir)

    reports = {}
    for label, cfg in (("default", base_cfg), (preset, variant_cfg)):
        pipe = Pipeline(cfg, root)
        pipe.run_all()
        reports[label] = read_json(pipe.stage_dir("evaluate") / "report.json")

    base_agg = reports["default"]["aggregate"]
    var_agg = reports[preset]["aggregate"]
    relative = {
        m: (var_agg[m] - base_agg[m]) / base_agg[m] if base_agg[m] else float("nan")
        for m in sorted(base_agg)
    }
    comparison = {
        "preset": preset,
        "default": reports["default"],
        "variant": reports[preset],
        "relative_change": relative,
    }
    write_json(root / f"ablation_{preset}.json", comparison)
    return comparison
