"""Meta-learned gradient scaling for few-shot learners.

A REINFORCE policy learns per-parameter-group gradient scaling
coefficients and hyperparameter choices while an inner learner trains on
few-shot episodes; includes LETOR ingestion, pseudo-domain clustering,
and a deterministic experiment harness.
"""
from .autodiff import (Graph, NumericOverflowError, ShapeMismatchError, backward,
                       forward_eval, grad_check)
from .clustering import (DomainPartition, DomainRejectionError, build_domains,
                         kmeans, silhouette_score)
from .episodes import (DomainSplitSpec, EpisodeCounts, MetaSet, RecordSet,
                       SyntheticFamilySpec, build_letor_domains, letor_record_set,
                       make_meta_set, synth_tasks)
from .harness import (ConfigError, ExperimentConfig, RunArtifactError, eval_run,
                      grid_search_pexplore, load_config, parse_config, report, run)
from .learners import (AffinityDecoderSpec, DualAffinityModel, DualEncoderSpec,
                       MlpModel, MlpSpec, load_checkpoint, save_checkpoint)
from .letor import (LetorParseError, LetorRecord, generate_letor_fixture,
                    parse_letor, serialize_letor)
from .objectives import (MetricSummary, RankedList, confidence_interval,
                         cross_entropy, ndcg_at_k, pairwise_rank_loss,
                         top1_accuracy)
from .policy import (DEFAULT_LAMBDA_GRID, EpochRecord, MetaPolicyConfig, RunRecord,
                     meta_train)
from .seeding import substream

__version__ = "0.1.0"

__all__ = [
    "AffinityDecoderSpec", "ConfigError", "DEFAULT_LAMBDA_GRID", "DomainPartition",
    "DomainRejectionError", "DomainSplitSpec", "DualAffinityModel",
    "DualEncoderSpec", "EpisodeCounts", "EpochRecord", "ExperimentConfig", "Graph",
    "LetorParseError", "LetorRecord", "MetaPolicyConfig", "MetaSet",
    "MetricSummary", "MlpModel", "MlpSpec", "NumericOverflowError", "RankedList",
    "RecordSet", "RunArtifactError", "RunRecord", "ShapeMismatchError",
    "SyntheticFamilySpec", "backward", "build_domains", "build_letor_domains",
    "confidence_interval", "cross_entropy", "eval_run", "forward_eval",
    "generate_letor_fixture", "grad_check", "grid_search_pexplore", "kmeans",
    "letor_record_set", "load_checkpoint", "load_config", "make_meta_set",
    "meta_train", "ndcg_at_k", "pairwise_rank_loss", "parse_config", "parse_letor",
    "report", "run", "save_checkpoint", "serialize_letor", "silhouette_score",
    "substream", "synth_tasks", "top1_accuracy",
]
