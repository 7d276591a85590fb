"""Cost-efficient graph retrieval: a knowledge-graph skeleton over PageRank-selected
core chunks plus a keyword bipartite graph over every sub-chunk."""
from .corpus import ChunkingConfig, chunk_corpus, load_corpus, split_subchunks
from .embedding import EmbeddingStore, HashEmbedder, get_provider
from .estimator import KetRAG
from .evalkit import coverage, exact_match, f1, run_eval
from .exceptions import (
    ConfigError,
    GatewayError,
    IndexCorruptError,
    KetRagError,
    TokenizerUnavailableError,
    UnsupportedVersionError,
)
from .gateway import Gateway, GatewayConfig
from .graph import KnnConfig, build_knn_graph, pagerank, select_core_chunks
from .indexer import CostModel, CorpusStats, IndexConfig, KetIndex, estimate_cost, ket_index, load_index, save_index
from .retrieval import Context, RetrievalConfig, keyword_retrieve, kg_retrieve, ket_retrieve

__version__ = "0.1.0"

__all__ = [
    "ChunkingConfig", "chunk_corpus", "load_corpus", "split_subchunks",
    "EmbeddingStore", "HashEmbedder", "get_provider",
    "KetRAG",
    "coverage", "exact_match", "f1", "run_eval",
    "ConfigError", "GatewayError", "IndexCorruptError", "KetRagError",
    "TokenizerUnavailableError", "UnsupportedVersionError",
    "Gateway", "GatewayConfig",
    "KnnConfig", "build_knn_graph", "pagerank", "select_core_chunks",
    "CostModel", "CorpusStats", "IndexConfig", "KetIndex", "estimate_cost", "ket_index", "load_index", "save_index",
    "Context", "RetrievalConfig", "keyword_retrieve", "kg_retrieve", "ket_retrieve",
]
