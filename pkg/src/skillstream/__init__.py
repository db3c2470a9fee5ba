"""Streaming skill curation toolkit.

Core pieces: a file-backed skill repository, tool-call curation semantics,
BM25 retrieval, the composite curation reward, group-relative policy math,
related-task grouping, pluggable model clients, and the rollout harness.
"""

__version__ = "0.1.0"
