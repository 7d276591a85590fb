"""End-to-end index construction, skeleton rewiring, persistence and the
indexing cost estimator."""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .bipartite import BipartiteGraph, KeywordNode, build_bipartite
from .corpus import (
    ChunkingConfig,
    SubChunk,
    build_vocabulary,
    chunk_corpus,
    normalize_words,
    segment_sentences,
    split_subchunks,
)
from .embedding import EmbeddingStore, embed_batch, get_provider
from .exceptions import ConfigError, IndexCorruptError, KetRagError, UnsupportedVersionError
from .extraction import Entity, Relation, SkeletonGraph, get_extractor, kg_index, load_prompt, template_tokens
from .graph import KnnConfig, build_knn_graph, degree_histogram, pagerank, select_core_chunks
from .tokenizer import get_tokenizer

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
REWIRE_RULE = "name-containment-with-fallback-v1"

MANIFEST = "manifest.json"
SUBCHUNKS = "subchunks.jsonl"
SKELETON_NODES = "skeleton_nodes.jsonl"
SKELETON_EDGES = "skeleton_edges.jsonl"
BIPARTITE_EDGES = "bipartite_edges.jsonl"
KEYWORDS = "keywords.jsonl"
EMBEDDINGS_BIN = "embeddings.bin"
EMBEDDINGS_META = "embeddings.json"
PAYLOAD_FILES = (SUBCHUNKS, SKELETON_NODES, SKELETON_EDGES, BIPARTITE_EDGES, KEYWORDS, EMBEDDINGS_BIN, EMBEDDINGS_META)

CORE_MODES = ("pagerank", "uniform")


@dataclass(frozen=True)
class IndexConfig:
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    beta: float = 0.8
    core_mode: str = "pagerank"
    extractor: str = "mock"
    embedder: str = "hash"
    embedding_dim: int = 64
    tokenizer: str = "word-v1"
    seed: int = 0
    pagerank_tol: float = 1e-8
    pagerank_max_iter: int = 200
    max_workers: int = 1

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta!r}")
        if self.core_mode not in CORE_MODES:
            raise ConfigError(f"core_mode must be one of {CORE_MODES}, got {self.core_mode!r}")
        if self.embedding_dim < 1 or self.max_workers < 1:
            raise ConfigError("embedding_dim and max_workers must be positive")

    def to_dict(self) -> dict:
        return {
            "chunk_tokens": self.chunking.chunk_tokens,
            "splits": self.chunking.splits,
            "stopwords": sorted(self.chunking.stopwords),
            "k": self.knn.k,
            "alpha": self.knn.alpha,
            "beta": self.beta,
            "core_mode": self.core_mode,
            "extractor": self.extractor,
            "embedder": self.embedder,
            "embedding_dim": self.embedding_dim,
            "tokenizer": self.tokenizer,
            "seed": self.seed,
            "pagerank_tol": self.pagerank_tol,
            "pagerank_max_iter": self.pagerank_max_iter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IndexConfig":
        return cls(
            chunking=ChunkingConfig(d["chunk_tokens"], d["splits"], frozenset(d["stopwords"])),
            knn=KnnConfig(d["k"], d["alpha"]),
            beta=d["beta"],
            core_mode=d["core_mode"],
            extractor=d["extractor"],
            embedder=d["embedder"],
            embedding_dim=d["embedding_dim"],
            tokenizer=d["tokenizer"],
            seed=d["seed"],
            pagerank_tol=d["pagerank_tol"],
            pagerank_max_iter=d["pagerank_max_iter"],
        )


@dataclass
class KetIndex:
    skeleton: SkeletonGraph
    bipartite: BipartiteGraph
    sub_chunks: list[SubChunk]
    store: EmbeddingStore
    manifest: dict
    tokenizer: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.tokenizer is None:
            self.tokenizer = get_tokenizer(self.manifest.get("tokenizer", "word-v1"))
        self._sub_map = None

    @property
    def sub_chunk_map(self) -> dict[int, SubChunk]:
        if self._sub_map is None:
            self._sub_map = {s.sub_id: s for s in self.sub_chunks}
        return self._sub_map

    def provider(self, gateway=None):
        """Query-embedding provider matching the one the index was built with."""
        info = self.manifest["provider"]
        return get_provider(info["name"], info["dim"], gateway=gateway)

    def structurally_equal(self, other: "KetIndex") -> bool:
        strip = lambda m: {k: v for k, v in m.items() if k != "files"}  # noqa: E731
        return (
            self.skeleton == other.skeleton
            and self.bipartite == other.bipartite
            and self.sub_chunks == other.sub_chunks
            and self.store == other.store
            and strip(self.manifest) == strip(other.manifest)
        )


def _contains_run(words: list[str], run: list[str]) -> bool:
    if not run:
        return False
    n = len(run)
    return any(words[i : i + n] == run for i in range(len(words) - n + 1))


def rewire_skeleton(skeleton: SkeletonGraph, sub_chunks: Sequence[SubChunk]) -> SkeletonGraph:
    """Move chunk links onto sub-chunks.

    A link from an entity to chunk ``c`` becomes links to the sub-chunks of
    ``c`` whose normalized words contain the entity name as a contiguous run;
    a relation keeps the sub-chunks containing either endpoint name. When no
    sub-chunk of ``c`` matches, the item links to all of them.
    """
    by_parent: dict[int, list[SubChunk]] = {}
    for s in sub_chunks:
        by_parent.setdefault(s.parent, []).append(s)
    words = {s.sub_id: normalize_words(s.text) for s in sub_chunks}
    names = {e.entity_id: normalize_words(e.name) for e in skeleton.entities}

    def relink(links, runs):
        out = []
        for c in links:
            subs = sorted(by_parent.get(c, ()), key=lambda s: s.split_index)
            hits = [s.sub_id for s in subs if any(_contains_run(words[s.sub_id], r) for r in runs)]
            for sid in hits or [s.sub_id for s in subs]:
                if sid not in out:
                    out.append(sid)
        return tuple(sorted(out))

    entity_links = {
        eid: relink(links, [names.get(eid, [])]) for eid, links in skeleton.entity_links.items()
    }
    rel_ends = {r.relation_id: (r.source, r.target) for r in skeleton.relations}
    relation_links = {
        rid: relink(links, [names.get(rel_ends[rid][0], []), names.get(rel_ends[rid][1], [])])
        for rid, links in skeleton.relation_links.items()
    }
    return SkeletonGraph(
        entities=list(skeleton.entities),
        relations=list(skeleton.relations),
        entity_links=entity_links,
        relation_links=relation_links,
        granularity="subchunk",
    )


def ket_index(
    documents: Sequence[tuple[str, str]],
    cfg: IndexConfig | None = None,
    extractor=None,
    provider=None,
    tokenizer=None,
    gateway=None,
) -> KetIndex:
    """Build the combined index: KNN graph, PageRank core chunks, skeleton
    over the core chunks, bipartite graph over all sub-chunks, rewiring."""
    cfg = cfg or IndexConfig()
    tok = tokenizer or get_tokenizer(cfg.tokenizer)
    provider = provider or get_provider(cfg.embedder, cfg.embedding_dim, gateway=gateway)
    extractor = extractor or get_extractor(cfg.extractor, gateway=gateway, stopwords=cfg.chunking.stopwords)
    stop = cfg.chunking.stopwords
    diagnostics: list = []
    timings: dict[str, float] = {}
    t0 = time.perf_counter()

    def lap(name):
        nonlocal t0
        now = time.perf_counter()
        timings[name] = now - t0
        t0 = now

    chunks = chunk_corpus(documents, cfg.chunking, tok, diagnostics)
    subs = split_subchunks(chunks, cfg.chunking.splits, diagnostics)
    sentences = segment_sentences(subs, chunks, stop)
    vocab = build_vocabulary(sentences, cfg.chunking)
    lap("corpus")
    if not chunks:
        raise KetRagError("corpus produced no chunks; nothing to index")

    chunk_vecs = embed_batch(provider, [c.text for c in chunks])
    store = EmbeddingStore(chunk_vecs.shape[1])
    store.add_many([f"chunk:{c.chunk_id}" for c in chunks], chunk_vecs)
    knn = build_knn_graph(chunks, vocab, store, cfg.knn)
    scores = pagerank(knn, cfg.knn, cfg.pagerank_tol, cfg.pagerank_max_iter)
    core = select_core_chunks(scores, cfg.beta, cfg.core_mode, cfg.seed)
    lap("knn_pagerank")

    core_set = set(core)
    skeleton = kg_index(
        [c for c in chunks if c.chunk_id in core_set],
        extractor,
        provider,
        store,
        tok,
        max_workers=cfg.max_workers,
        diagnostics=diagnostics,
    )
    lap("extraction")

    store.add_many([f"subchunk:{s.sub_id}" for s in subs], embed_batch(provider, [s.text for s in subs]))
    store.add_many(
        [f"sentence:{s.sentence_id}" for s in sentences], embed_batch(provider, [s.text for s in sentences])
    )
    bip = build_bipartite(subs, sentences, vocab, provider, store, stop)
    skeleton = rewire_skeleton(skeleton, subs)
    lap("bipartite_rewire")

    if skeleton.is_empty and bip.is_empty:
        raise KetRagError("both the skeleton and the keyword graph are empty")

    entity_template = load_prompt("entity_extraction")
    relation_template = load_prompt("relation_extraction")
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "tokenizer": tok.id,
        "provider": {"name": provider.name, "dim": store.dim, "deterministic": bool(provider.deterministic)},
        "extractor": extractor.name,
        "rewire_rule": REWIRE_RULE,
        "prompt_tokens": {
            "entity": template_tokens(entity_template, tok),
            "relation": template_tokens(relation_template, tok),
        },
        "stats": {
            "documents": len(documents),
            "chunks": len(chunks),
            "sub_chunks": len(subs),
            "sentences": len(sentences),
            "keywords": len(bip.keywords),
            "entities": len(skeleton.entities),
            "relations": len(skeleton.relations),
            "core_chunks": list(core),
            "knn_edges": len(knn.edges()),
            "degree_histogram": {str(k): v for k, v in degree_histogram(knn).items()},
            "pagerank": {
                "iterations": scores.iterations,
                "residual": scores.residual,
                "converged": scores.converged,
            },
        },
        "diagnostics": diagnostics,
    }
    logger.info("index built: %s", {k: round(v, 3) for k, v in timings.items()})
    return KetIndex(skeleton, bip, subs, store, manifest, tokenizer=tok)


# --------------------------------------------------------------------------
# persistence


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False)


def _write_jsonl(path: Path, records) -> None:
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(_dumps(rec) + "\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_index(index: KetIndex, path) -> dict:
    """Write the index directory; returns the manifest with payload hashes."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    _write_jsonl(root / SUBCHUNKS, (s.to_dict() for s in index.sub_chunks))
    sk = index.skeleton
    _write_jsonl(root / SKELETON_NODES, [e.to_dict() for e in sk.entities] + [r.to_dict() for r in sk.relations])
    edges = [{"kind": "entity", "id": eid, "sub_id": s} for eid, links in sk.entity_links.items() for s in links]
    edges += [{"kind": "relation", "id": rid, "sub_id": s} for rid, links in sk.relation_links.items() for s in links]
    _write_jsonl(root / SKELETON_EDGES, edges)
    bip = index.bipartite
    _write_jsonl(root / KEYWORDS, (bip.keywords[k].to_dict() for k in sorted(bip.keywords)))
    _write_jsonl(
        root / BIPARTITE_EDGES,
        ({"keyword": k, "sub_id": s} for k in sorted(bip.edges) for s in bip.edges[k]),
    )
    index.store.save(root / EMBEDDINGS_BIN, root / EMBEDDINGS_META)

    manifest = {k: v for k, v in index.manifest.items() if k != "files"}
    manifest["skeleton_granularity"] = sk.granularity
    manifest["files"] = {name: _sha256(root / name) for name in PAYLOAD_FILES}
    (root / MANIFEST).write_text(json.dumps(manifest, sort_keys=True, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    index.manifest = manifest
    return manifest


def _read_jsonl(path: Path) -> list[dict]:
    out = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


def load_index(path, verify: bool = True) -> KetIndex:
    """Load an index directory, checking format version, payload hashes and
    tokenizer availability before anything is parsed."""
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise IndexCorruptError(f"{root}: missing {MANIFEST}") from exc
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IndexCorruptError(f"{root}: unreadable manifest ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"index format version {version!r} is not supported (expected {FORMAT_VERSION})")
    files = manifest.get("files") or {}
    for name in PAYLOAD_FILES:
        p = root / name
        if not p.exists():
            raise IndexCorruptError(f"{root}: missing payload file {name}")
        if verify and _sha256(p) != files.get(name):
            raise IndexCorruptError(f"{root}: checksum mismatch for {name}")
    tokenizer = get_tokenizer(manifest["tokenizer"])

    try:
        subs = [SubChunk.from_dict(d) for d in _read_jsonl(root / SUBCHUNKS)]
        entities, relations = [], []
        for d in _read_jsonl(root / SKELETON_NODES):
            if d["kind"] == "entity":
                entities.append(
                    Entity(d["id"], d["name"], d["type"], d["description"], d["description_tokens"], d["embedding_key"])
                )
            else:
                relations.append(
                    Relation(
                        d["id"], d["source"], d["target"], d["description"], d["description_tokens"],
                        d["embedding_key"], d["self_loop"],
                    )
                )
        ent_links: dict[str, list] = {e.entity_id: [] for e in entities}
        rel_links: dict[str, list] = {r.relation_id: [] for r in relations}
        for d in _read_jsonl(root / SKELETON_EDGES):
            (ent_links if d["kind"] == "entity" else rel_links)[d["id"]].append(d["sub_id"])
        skeleton = SkeletonGraph(
            entities=entities,
            relations=relations,
            entity_links={k: tuple(v) for k, v in ent_links.items()},
            relation_links={k: tuple(v) for k, v in rel_links.items()},
            granularity=manifest.get("skeleton_granularity", "subchunk"),
        )
        keywords = {}
        for d in _read_jsonl(root / KEYWORDS):
            keywords[d["keyword"]] = KeywordNode(d["keyword"], d["description"], d["sentence_count"], d["embedding_key"])
        kw_edges: dict[str, list] = {k: [] for k in keywords}
        for d in _read_jsonl(root / BIPARTITE_EDGES):
            kw_edges[d["keyword"]].append(d["sub_id"])
        bip = BipartiteGraph(
            keywords=keywords,
            sub_ids=[s.sub_id for s in subs],
            edges={k: tuple(v) for k, v in kw_edges.items()},
        )
        store = EmbeddingStore.load(root / EMBEDDINGS_BIN, root / EMBEDDINGS_META)
    except (KeyError, TypeError, ValueError) as exc:
        raise IndexCorruptError(f"{root}: malformed payload ({exc})") from exc
    return KetIndex(skeleton, bip, subs, store, manifest, tokenizer=tokenizer)


# --------------------------------------------------------------------------
# cost estimation


@dataclass(frozen=True)
class CorpusStats:
    num_chunks: int
    chunk_tokens: int


@dataclass(frozen=True)
class CostModel:
    """Prompt template sizes, unit prices and priors for description tokens.

    ``items_per_chunk * tokens_per_item`` estimates the description tokens
    one chunk contributes, which are only known after extraction.
    """

    entity_prompt_tokens: float = 0.0
    relation_prompt_tokens: float = 0.0
    price_input: float = 0.0
    price_embedding: float = 0.0
    items_per_chunk: float = 15.0
    tokens_per_item: float = 30.0
    beta: float = 0.8

    def __post_init__(self):
        values = asdict(self)
        negative = [k for k, v in values.items() if v < 0]
        if negative:
            raise ConfigError(f"cost model values must be non-negative: {negative}")
        if self.beta > 1:
            raise ConfigError("beta must lie in [0, 1]")


@dataclass(frozen=True)
class CostEstimate:
    variant: str
    llm_tokens: float
    embed_tokens: float
    currency: float


def estimate_cost(stats: CorpusStats, model: CostModel, variant: str = "ket") -> CostEstimate:
    """Closed-form indexing input-token cost.

    Full knowledge-graph indexing over ``n`` chunks of ``l`` tokens::

        llm   = (2 + (lambda_e + lambda_r) / l) * l * n
        embed = l * n + sum of description tokens
        cost  = llm * c_i + embed * c_e

    The skeleton + keyword variant pays ``beta`` of that plus ``3 * l * n``
    embedding tokens for chunk, sub-chunk and sentence embeddings.
    """
    if stats.num_chunks < 0 or stats.chunk_tokens < 0:
        raise ConfigError("corpus statistics must be non-negative")
    n, ell = stats.num_chunks, stats.chunk_tokens
    # (2 + (le + lr)/l) * l, written without the division so l = 0 is defined
    llm = (2 * ell + model.entity_prompt_tokens + model.relation_prompt_tokens) * n
    desc = model.items_per_chunk * model.tokens_per_item * n
    embed = ell * n + desc
    currency = llm * model.price_input + embed * model.price_embedding
    if variant == "kg":
        return CostEstimate("kg", llm, embed, currency)
    if variant == "ket":
        extra = 3 * ell * n
        return CostEstimate(
            "ket",
            model.beta * llm,
            model.beta * embed + extra,
            model.beta * currency + extra * model.price_embedding,
        )
    raise ConfigError(f"unknown cost variant {variant!r}")
