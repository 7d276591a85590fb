"""Dual-channel, token-budgeted context retrieval.

The entity channel runs knowledge-graph local search over the skeleton
(seed entities, then relations, then linked sub-chunks); the keyword channel
grows a seed keyword set on the bipartite graph and ranks the neighbouring
sub-chunks. Both channels fill their budgets greedily in rank order and stop
at the first item that would overflow.
"""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .bipartite import BipartiteGraph
from .corpus import SubChunk
from .embedding import EmbeddingStore, l2_normalize
from .exceptions import ConfigError
from .extraction import SkeletonGraph
from .tokenizer import Tokenizer, WordTokenizer

logger = logging.getLogger(__name__)

ENTITY, RELATION, CHUNK, KEYWORD_CHUNK = "entity", "relation", "chunk", "keyword-chunk"
CHANNEL_ORDER = (ENTITY, RELATION, CHUNK, KEYWORD_CHUNK)


@dataclass(frozen=True)
class RetrievalConfig:
    """Context limit ``context_limit`` (tokens), entity-channel share ``theta``
    and the number of seed entities ``k_seed``."""

    context_limit: int = 12000
    theta: float = 0.4
    k_seed: int = 10

    def __post_init__(self):
        if self.context_limit <= 0:
            raise ConfigError("context_limit must be positive")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta!r}")
        if self.k_seed < 1:
            raise ConfigError("k_seed must be >= 1")


@dataclass(frozen=True)
class Segment:
    channel: str
    source_id: str
    text: str
    token_count: int

    def to_dict(self) -> dict:
        return {"channel": self.channel, "source_id": self.source_id, "tokens": self.token_count, "text": self.text}


@dataclass
class Context:
    segments: list[Segment] = field(default_factory=list)
    # seed sets and flags for inspection; not part of the serialized context
    seed_entities: list[str] = field(default_factory=list)
    seed_keywords: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def total_tokens(self) -> int:
        return sum(s.token_count for s in self.segments)

    def tokens_in(self, *channels: str) -> int:
        return sum(s.token_count for s in self.segments if s.channel in channels)

    @property
    def text(self) -> str:
        return "\n".join(s.text for s in self.segments)

    def __add__(self, other: "Context") -> "Context":
        return Context(
            segments=self.segments + other.segments,
            seed_entities=self.seed_entities + other.seed_entities,
            seed_keywords=self.seed_keywords + other.seed_keywords,
            flags=self.flags + other.flags,
        )

    def to_dict(self) -> dict:
        return {"segments": [s.to_dict() for s in self.segments], "total_tokens": self.total_tokens}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, **kw)


def _cosines(matrix: np.ndarray, q: np.ndarray) -> np.ndarray:
    m = matrix.astype(np.float64)
    norms = np.linalg.norm(m, axis=1) * np.linalg.norm(q)
    norms[norms == 0] = 1.0
    return (m @ q) / norms


def entity_text(name: str, description: str) -> str:
    return f"{name}: {description}"


def relation_text(source: str, target: str, description: str) -> str:
    return f"{source} -> {target}: {description}"


def kg_retrieve(
    skeleton: SkeletonGraph,
    sub_chunks: Mapping[int, SubChunk],
    store: EmbeddingStore,
    query_vector,
    budget: float,
    k_seed: int = 10,
    tokenizer: Tokenizer | None = None,
) -> Context:
    """Knowledge-graph local search within ``budget`` tokens.

    * Seeds: the ``k_seed`` entities nearest the query (Euclidean; ties by
      entity order), kept while entity tokens fit in ``budget / 2``.
    * Relations touching a kept seed: those joining two seeds first, then by
      the summed query cosine of their seed endpoints, then relation order;
      added while entity + relation tokens fit in ``budget / 2``.
    * Sub-chunks linked to the kept entities and relations, ranked by link
      count, then query cosine, then sub-chunk id, within their own
      ``budget / 2``.

    Every stage stops at the first item that does not fit; an entity that
    does not fit also ends the relation stage.
    """
    tok = tokenizer or WordTokenizer()
    ctx = Context()
    if skeleton.is_empty or budget <= 0:
        return ctx
    q = np.asarray(query_vector, dtype=np.float64)
    half = budget / 2.0
    names = {e.entity_id: e.name for e in skeleton.entities}

    ent_mat = store.matrix([e.embedding_key for e in skeleton.entities]).astype(np.float64)
    dist = np.linalg.norm(ent_mat - q, axis=1)
    order = np.lexsort((np.arange(len(dist)), dist))[:k_seed]
    ent_cos = _cosines(ent_mat, q)

    used = 0
    overflow = False
    seeds: dict[str, float] = {}
    for i in order:
        e = skeleton.entities[int(i)]
        text = entity_text(e.name, e.description)
        t = tok.count(text)
        if used + t > half:
            overflow = True
            break
        ctx.segments.append(Segment(ENTITY, e.entity_id, text, t))
        seeds[e.entity_id] = float(ent_cos[int(i)])
        used += t
    ctx.seed_entities = list(seeds)

    chosen_rel = []
    if not overflow and seeds:
        ranked = []
        for pos, r in enumerate(skeleton.relations):
            inside = (r.source in seeds) + (r.target in seeds)
            if inside == 0:
                continue
            both = r.source in seeds and r.target in seeds
            score = seeds.get(r.source, 0.0) + seeds.get(r.target, 0.0)
            ranked.append((-int(both), -score, pos, r))
        ranked.sort(key=lambda x: x[:3])
        for *_, r in ranked:
            text = relation_text(names[r.source], names[r.target], r.description)
            t = tok.count(text)
            if used + t > half:
                break
            ctx.segments.append(Segment(RELATION, r.relation_id, text, t))
            chosen_rel.append(r.relation_id)
            used += t

    counts: Counter = Counter()
    for eid in seeds:
        counts.update(skeleton.entity_links.get(eid, ()))
    for rid in chosen_rel:
        counts.update(skeleton.relation_links.get(rid, ()))
    cand = [s for s in counts if s in sub_chunks]
    if cand:
        sub_cos = _cosines(store.matrix([f"subchunk:{s}" for s in cand]), q)
        ranked_subs = sorted(zip(cand, sub_cos), key=lambda x: (-counts[x[0]], -x[1], x[0]))
        chunk_used = 0
        for s, _ in ranked_subs:
            sub = sub_chunks[s]
            if chunk_used + sub.token_count > half:
                break
            ctx.segments.append(Segment(CHUNK, f"s{s}", sub.text, sub.token_count))
            chunk_used += sub.token_count
    return ctx


def keyword_retrieve(
    bipartite: BipartiteGraph,
    sub_chunks: Mapping[int, SubChunk],
    store: EmbeddingStore,
    query_vector,
    budget: float,
) -> Context:
    """Keyword-channel retrieval within ``budget`` tokens.

    Seed keywords are taken by descending query cosine (ties by keyword)
    until their neighbouring sub-chunks first hold at least ``2 * budget``
    tokens or keywords run out. The neighbours are then ranked by query
    cosine (ties by sub-chunk id) and added while they fit.
    """
    ctx = Context()
    if budget <= 0:
        return ctx
    if bipartite.is_empty:
        logger.warning("keyword channel has no keywords")
        ctx.flags.append("no-keywords")
        return ctx
    q = np.asarray(query_vector, dtype=np.float64)
    kws = sorted(bipartite.keywords)
    kw_cos = _cosines(store.matrix([bipartite.keywords[k].embedding_key for k in kws]), q)
    order = np.lexsort((np.arange(len(kws)), -kw_cos))

    seeds: list[str] = []
    pool: set[int] = set()
    pool_tokens = 0
    for j in order:
        kw = kws[int(j)]
        seeds.append(kw)
        for s in bipartite.edges.get(kw, ()):
            if s not in pool and s in sub_chunks:
                pool.add(s)
                pool_tokens += sub_chunks[s].token_count
        if pool_tokens >= 2 * budget:
            break
    ctx.seed_keywords = seeds

    cand = sorted(pool)
    if not cand:
        return ctx
    sub_cos = _cosines(store.matrix([f"subchunk:{s}" for s in cand]), q)
    used = 0
    for s, _ in sorted(zip(cand, sub_cos), key=lambda x: (-x[1], x[0])):
        sub = sub_chunks[s]
        if used + sub.token_count > budget:
            break
        ctx.segments.append(Segment(KEYWORD_CHUNK, f"s{s}", sub.text, sub.token_count))
        used += sub.token_count
    return ctx


def embed_query(provider, query: str) -> np.ndarray:
    return l2_normalize(np.asarray(provider.embed([query]), dtype=np.float64)[0])


def ket_retrieve(index, query: str | None, cfg: RetrievalConfig, provider=None, query_vector=None) -> Context:
    """Blend both channels: ``theta * limit`` tokens for the entity channel,
    the rest for the keyword channel, concatenated in that order."""
    if query_vector is None:
        if provider is None:
            provider = index.provider()
        query_vector = embed_query(provider, query)
    lam = float(cfg.context_limit)
    theta = cfg.theta
    subs = index.sub_chunk_map
    c_s = kg_retrieve(index.skeleton, subs, index.store, query_vector, theta * lam, cfg.k_seed, index.tokenizer)
    c_k = keyword_retrieve(index.bipartite, subs, index.store, query_vector, (1.0 - theta) * lam)
    ctx = c_s + c_k
    if not ctx.segments:
        ctx.flags.append("empty-context")
    return ctx


SECTION_TITLES = {
    ENTITY: "-----Entities-----",
    RELATION: "-----Relationships-----",
    CHUNK: "-----Sources-----",
    KEYWORD_CHUNK: "-----Keyword Sources-----",
}


def serialize_context(context: Context) -> str:
    """Channel-labelled sections in the context's stored order, one record per line."""
    lines: list[str] = []
    current = None
    for seg in context.segments:
        if seg.channel != current:
            if lines:
                lines.append("")
            lines.append(SECTION_TITLES.get(seg.channel, f"-----{seg.channel}-----"))
            current = seg.channel
        lines.append(f"[{seg.source_id}] " + " ".join(seg.text.split()))
    return "\n".join(lines)


def assemble_prompt(context: Context, question: str, template: str | None = None) -> str:
    if template is None:
        from .extraction import load_prompt

        template = load_prompt("answer")
    if "{context}" not in template or "{question}" not in template:
        raise ConfigError("prompt template needs {context} and {question} slots")
    values = {"context": serialize_context(context), "question": question}
    return re.sub(r"\{(context|question)\}", lambda m: values[m.group(1)], template)
