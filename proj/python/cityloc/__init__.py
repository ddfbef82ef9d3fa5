"""Text-to-point-cloud localization on synthetic city scenes."""

from ._cityloc import (
    IoError,
    PipelineError,
    default_config,
    evaluate,
    fnv1a64,
    gen,
    l2_normalize_rows,
    localization_recall,
    recall_at_k,
    report,
    resolve_config,
    retrieve_topk,
    token_vector,
    tokenize,
    train,
    version,
)

__version__ = version()

__all__ = [
    "IoError",
    "PipelineError",
    "default_config",
    "evaluate",
    "fnv1a64",
    "gen",
    "l2_normalize_rows",
    "localization_recall",
    "recall_at_k",
    "report",
    "resolve_config",
    "retrieve_topk",
    "token_vector",
    "tokenize",
    "train",
    "version",
]
