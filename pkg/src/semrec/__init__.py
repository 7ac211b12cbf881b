"""Cross-domain generative recommendation over shared semantic item identifiers.

Items from several catalogs are embedded, quantized into short discrete code
sequences by a residual-quantization autoencoder trained jointly over all
domains, and recommended by a sequence-to-sequence model that generates the
next item's code sequence under a prefix-tree constraint.
"""

from .config import (
    ABLATION_PRESETS,
    RunConfig,
    apply_overrides,
    apply_preset,
    build_run_config,
    config_hash,
    load_config_file,
)
from .decode import batch_constrained_beam_search, constrained_beam_search, mask_invalid
from .errors import (
    ConfigError,
    DataError,
    DecodeError,
    ProtocolError,
    ProviderError,
    SemrecError,
    TrainingError,
)
from .evaluation import MetricReport, evaluate_rankings, ndcg_at_k, recall_at_k
from .genrec import score_sequence, train_recommender
from .identifiers import PrefixTree, SemanticIdentifier, TokenVocabulary, assign_identifiers
from .pipeline import Pipeline, run_ablation
from .rqvae import QuantizerConfig, ResidualQuantizerAutoencoder, train_quantizer
from .seq2seq import Seq2SeqConfig, Seq2SeqModel

__version__ = "0.1.0"

__all__ = [
    "ABLATION_PRESETS",
    "ConfigError",
    "DataError",
    "DecodeError",
    "MetricReport",
    "Pipeline",
    "PrefixTree",
    "ProtocolError",
    "ProviderError",
    "QuantizerConfig",
    "ResidualQuantizerAutoencoder",
    "RunConfig",
    "SemanticIdentifier",
    "SemrecError",
    "Seq2SeqConfig",
    "Seq2SeqModel",
    "TokenVocabulary",
    "TrainingError",
    "apply_overrides",
    "apply_preset",
    "assign_identifiers",
    "batch_constrained_beam_search",
    "build_run_config",
    "config_hash",
    "constrained_beam_search",
    "evaluate_rankings",
    "load_config_file",
    "mask_invalid",
    "ndcg_at_k",
    "recall_at_k",
    "run_ablation",
    "score_sequence",
    "train_quantizer",
    "train_recommender",
]
