"""Keyword spotting with a shared speech-embedding trunk and small per-task heads."""

from kwsembed.frontend import FrontendConfig, extract_log_mel
from kwsembed.model import EmbeddingModel, HeadModel, build_embedding, build_head

__all__ = [
    "FrontendConfig",
    "extract_log_mel",
    "EmbeddingModel",
    "HeadModel",
    "build_embedding",
    "build_head",
]

__version__ = "0.1.0"
