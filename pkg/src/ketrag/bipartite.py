"""Text-keyword bipartite graph over sub-chunks."""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .corpus import KeywordVocabulary, Sentence, SubChunk, default_stopwords, keyword_set
from .embedding import EmbeddingProvider, EmbeddingStore, embed_batch

logger = logging.getLogger(__name__)


@dataclass
class KeywordNode:
    keyword: str
    description: str
    sentence_count: int
    embedding_key: str

    def to_dict(self) -> dict:
        return {
            "keyword": self.keyword,
            "description": self.description,
            "sentence_count": self.sentence_count,
            "embedding_key": self.embedding_key,
        }


@dataclass
class BipartiteGraph:
    keywords: dict[str, KeywordNode] = field(default_factory=dict)
    sub_ids: list[int] = field(default_factory=list)
    # keyword -> sorted sub-chunk ids whose text contains the keyword
    edges: dict[str, tuple] = field(default_factory=dict)

    def __len__(self):
        return len(self.keywords)

    @property
    def is_empty(self) -> bool:
        return not self.keywords

    def edge_set(self) -> set[tuple[str, int]]:
        return {(kw, s) for kw, subs in self.edges.items() for s in subs}

    def neighbors(self, keywords: Iterable[str]) -> set[int]:
        """Union of the sub-chunk neighbours of ``keywords``; unknown keywords are skipped."""
        out: set[int] = set()
        for kw in keywords:
            subs = self.edges.get(kw)
            if subs is None:
                logger.warning("unknown keyword %r ignored", kw)
                continue
            out.update(subs)
        return out


def build_bipartite(
    sub_chunks: Sequence[SubChunk],
    sentences: Sequence[Sentence],
    vocabulary: KeywordVocabulary,
    provider: EmbeddingProvider | None,
    store: EmbeddingStore,
    stopwords=None,
) -> BipartiteGraph:
    """One keyword node per vocabulary keyword with at least one sentence.

    A node's description concatenates its sentences and its embedding is the
    plain mean of their (normalized) sentence embeddings. Edge ``(k, s)``
    exists iff ``k`` is one of sub-chunk ``s``'s normalized words; raw
    substrings never match (``cat`` is not in ``catalog``).
    """
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    missing = [s for s in sentences if f"sentence:{s.sentence_id}" not in store]
    if missing:
        if provider is None:
            raise ValueError("sentence embeddings missing and no provider given")
        vecs = embed_batch(provider, [s.text for s in missing])
        store.add_many([f"sentence:{s.sentence_id}" for s in missing], vecs)

    by_id = {s.sentence_id: s for s in sentences}
    graph = BipartiteGraph(sub_ids=[s.sub_id for s in sub_chunks])
    for kw in sorted(vocabulary.keywords):
        sent_ids = sorted({p[2] for p in vocabulary.postings.get(kw, ()) if p[2] in by_id})
        if not sent_ids:
            continue
        vecs = store.matrix([f"sentence:{i}" for i in sent_ids]).astype(np.float64)
        key = f"keyword:{kw}"
        store.add(key, vecs.mean(axis=0), normalize=False)
        graph.keywords[kw] = KeywordNode(
            keyword=kw,
            description=" ".join(by_id[i].text for i in sent_ids),
            sentence_count=len(sent_ids),
            embedding_key=key,
        )

    adj: dict[str, list[int]] = defaultdict(list)
    for sub in sub_chunks:
        for kw in sorted(keyword_set(sub.text, stop)):
            if kw in graph.keywords:
                adj[kw].append(sub.sub_id)
    graph.edges = {kw: tuple(sorted(adj.get(kw, ()))) for kw in graph.keywords}
    return graph
