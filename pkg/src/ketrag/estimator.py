"""scikit-learn style wrapper: ``fit`` builds an index, ``transform`` retrieves contexts."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_documents, check_questions
from .corpus import ChunkingConfig
from .evalkit import coverage
from .graph import KnnConfig
from .indexer import IndexConfig, ket_index
from .retrieval import RetrievalConfig, ket_retrieve


class KetRAG(BaseEstimator):
    """Skeleton + keyword graph retriever.

    ``fit(X)`` takes documents (strings or ``(doc_id, text)`` pairs) and
    builds the index; ``transform(questions)`` returns one context per
    question; ``predict`` returns the context texts; ``score`` is the mean
    Coverage against gold answer lists.
    """

    def __init__(
        self,
        chunk_size=1200,
        tau=3,
        k=2,
        alpha=0.15,
        beta=0.8,
        core_mode="pagerank",
        extractor="mock",
        embedder="hash",
        embedding_dim=64,
        context_limit=12000,
        theta=0.4,
        k_seed=10,
        seed=0,
        gateway=None,
    ):
        self.chunk_size = chunk_size
        self.tau = tau
        self.k = k
        self.alpha = alpha
        self.beta = beta
        self.core_mode = core_mode
        self.extractor = extractor
        self.embedder = embedder
        self.embedding_dim = embedding_dim
        self.context_limit = context_limit
        self.theta = theta
        self.k_seed = k_seed
        self.seed = seed
        self.gateway = gateway

    def _index_config(self) -> IndexConfig:
        return IndexConfig(
            chunking=ChunkingConfig(chunk_tokens=self.chunk_size, splits=self.tau),
            knn=KnnConfig(k=self.k, alpha=self.alpha),
            beta=self.beta,
            core_mode=self.core_mode,
            extractor=self.extractor,
            embedder=self.embedder,
            embedding_dim=self.embedding_dim,
            seed=self.seed,
        )

    def _retrieval_config(self) -> RetrievalConfig:
        return RetrievalConfig(context_limit=self.context_limit, theta=self.theta, k_seed=self.k_seed)

    def fit(self, X, y=None):
        docs = check_documents(X)
        self._retrieval_config()  # fail early on bad retrieval params
        self.index_ = ket_index(docs, self._index_config(), gateway=self.gateway)
        self.n_documents_ = len(docs)
        self.provider_ = self.index_.provider(self.gateway)
        return self

    def transform(self, X):
        check_is_fitted(self, "index_")
        cfg = self._retrieval_config()
        return [ket_retrieve(self.index_, q, cfg, self.provider_) for q in check_questions(X)]

    def predict(self, X):
        return np.array([c.text for c in self.transform(X)], dtype=object)

    def score(self, X, y):
        """Mean Coverage of the retrieved contexts; ``y`` holds gold answer lists."""
        golds = [[a] if isinstance(a, str) else list(a) for a in y]
        texts = self.predict(X)
        if len(golds) != len(texts):
            raise ValueError(f"got {len(texts)} questions but {len(golds)} answer lists")
        return float(np.mean([coverage(t, g) for t, g in zip(texts, golds)])) if golds else float("nan")
