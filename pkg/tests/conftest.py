import numpy as np
import pytest

from ketrag.bipartite import BipartiteGraph, KeywordNode
from ketrag.corpus import ChunkingConfig, SubChunk
from ketrag.embedding import EmbeddingStore
from ketrag.extraction import Entity, Relation, SkeletonGraph
from ketrag.graph import KnnConfig
from ketrag.indexer import IndexConfig, KetIndex, ket_index
from ketrag.tokenizer import WordTokenizer

from synth import filler_corpus


@pytest.fixture(scope="session")
def small_docs():
    return filler_corpus(n_docs=12, sentences_per_doc=60, seed=3)


@pytest.fixture(scope="session")
def fixture_cfg():
    return IndexConfig(chunking=ChunkingConfig(chunk_tokens=200, splits=2), knn=KnnConfig(k=2), beta=0.8)


@pytest.fixture(scope="session")
def fixture_index(small_docs, fixture_cfg):
    return ket_index(small_docs, fixture_cfg)


def _unit(rng, dim):
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def build_tiny():
    """Hand-built index: 4 entities, 3 relations, 5 keywords, 5 sub-chunks."""
    rng = np.random.default_rng(42)
    dim = 8
    tok = WordTokenizer()
    store = EmbeddingStore(dim)
    texts = [
        "Acme Corp hired Alice Smith in Oslo.",
        "Alice Smith moved to Lima for the river project.",
        "Bob Jones audits Acme Corp every spring near the harbor.",
        "The harbor of Oslo froze; Bob Jones stayed home with a lantern and a long book.",
        "Lima river markets trade copper.",
    ]
    subs = [
        SubChunk(i, i // 2, i % 2, t, tok.count(t), 0, len(t)) for i, t in enumerate(texts)
    ]
    for s in subs:
        store.add(f"subchunk:{s.sub_id}", _unit(rng, dim))
    ents = [
        ("e0", "ALICE SMITH", "An engineer at Acme."),
        ("e1", "ACME CORP", "A manufacturing company based in Oslo with many plants."),
        ("e2", "BOB JONES", "Auditor."),
        ("e3", "LIMA", "City on a river."),
    ]
    entities = []
    for eid, name, desc in ents:
        key = f"entity:{eid}"
        store.add(key, _unit(rng, dim))
        entities.append(Entity(eid, name, "MOCK", desc, tok.count(desc), key))
    rels = [
        ("r0", "e1", "e0", "Acme Corp hired Alice Smith."),
        ("r1", "e0", "e3", "Alice Smith moved to Lima."),
        ("r2", "e2", "e1", "Bob Jones audits Acme Corp every spring."),
    ]
    relations = []
    for rid, a, b, desc in rels:
        key = f"relation:{rid}"
        store.add(key, _unit(rng, dim))
        relations.append(Relation(rid, a, b, desc, tok.count(desc), key, False))
    skeleton = SkeletonGraph(
        entities=entities,
        relations=relations,
        entity_links={"e0": (0, 1), "e1": (0, 2), "e2": (2, 3), "e3": (1, 4)},
        relation_links={"r0": (0,), "r1": (1,), "r2": (2,)},
        granularity="subchunk",
    )
    kw_edges = {
        "acme": (0, 2),
        "harbor": (2, 3),
        "lima": (1, 4),
        "oslo": (0, 3),
        "river": (1, 4),
    }
    keywords = {}
    for kw in kw_edges:
        key = f"keyword:{kw}"
        store.add(key, _unit(rng, dim), normalize=False)
        keywords[kw] = KeywordNode(kw, f"sentences about {kw}", 1, key)
    bip = BipartiteGraph(keywords=keywords, sub_ids=[s.sub_id for s in subs], edges=kw_edges)
    manifest = {"tokenizer": "word-v1", "provider": {"name": "hash-v1:8", "dim": dim, "deterministic": True}}
    return KetIndex(skeleton, bip, subs, store, manifest, tokenizer=tok)


@pytest.fixture
def tiny():
    return build_tiny()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted((k for k in results if isinstance(k, int))):
        terminalreporter.write_line(results[key])
    if "11-detail" in results:
        terminalreporter.write_line("      " + results["11-detail"])
