import json
import math

import pytest

from ketrag.corpus import ChunkingConfig, SubChunk
from ketrag.exceptions import ConfigError, IndexCorruptError, KetRagError, TokenizerUnavailableError, UnsupportedVersionError
from ketrag.extraction import Entity, MeteredExtractor, MockExtractor, Relation, SkeletonGraph
from ketrag.graph import KnnConfig
from ketrag.indexer import (
    PAYLOAD_FILES,
    CorpusStats,
    CostModel,
    IndexConfig,
    estimate_cost,
    ket_index,
    load_index,
    rewire_skeleton,
    save_index,
)

from oracles import itc_kg, itc_ket, words


def cfg(**kw):
    base = dict(chunking=ChunkingConfig(chunk_tokens=200, splits=2), knn=KnnConfig(k=2))
    base.update(kw)
    return IndexConfig(**base)


# ---------------------------------------------------------------- ket_index


def test_beta_zero_is_keyword_only(small_docs):
    ix = ket_index(small_docs, cfg(beta=0.0))
    assert ix.skeleton.is_empty
    assert not ix.bipartite.is_empty
    assert ix.manifest["stats"]["core_chunks"] == []


def test_beta_one_tau_zero_covers_all_chunks(small_docs):
    ix = ket_index(small_docs, cfg(beta=1.0, chunking=ChunkingConfig(chunk_tokens=200, splits=0)))
    n = ix.manifest["stats"]["chunks"]
    assert len(ix.sub_chunks) == n
    assert sorted(ix.manifest["stats"]["core_chunks"]) == list(range(n))
    assert ix.skeleton.granularity == "subchunk"


def test_shared_subchunk_universe(fixture_index):
    live = {s.sub_id for s in fixture_index.sub_chunks}
    assert fixture_index.skeleton.linked_units() <= live
    assert set(fixture_index.bipartite.sub_ids) == live
    for s in fixture_index.sub_chunks:
        assert f"subchunk:{s.sub_id}" in fixture_index.store


def test_skeleton_chunks_nest_across_beta(small_docs):
    def core(beta):
        return set(ket_index(small_docs, cfg(beta=beta)).manifest["stats"]["core_chunks"])

    assert core(0.2) <= core(0.5) <= core(0.9)


def test_empty_corpus_fails():
    with pytest.raises(KetRagError):
        ket_index([("d", "   ")], cfg())


def test_config_round_trip():
    c = cfg(beta=0.3, core_mode="uniform", seed=5)
    assert IndexConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        cfg(beta=1.5)
    with pytest.raises(ConfigError):
        cfg(core_mode="random")


# ---------------------------------------------------------------- rewiring


def _subs(texts, parent=0):
    return [SubChunk(i, parent, i, t, len(t.split()), 0, 0) for i, t in enumerate(texts)]


def _skeleton(names, links, rels=()):
    ents = [Entity(f"e{i}", n, "MOCK", "", 0, f"entity:e{i}") for i, n in enumerate(names)]
    relations = [Relation(f"r{i}", a, b, "", 0, f"relation:r{i}", a == b) for i, (a, b) in enumerate(rels)]
    return SkeletonGraph(
        entities=ents,
        relations=relations,
        entity_links={f"e{i}": tuple(l) for i, l in enumerate(links)},
        relation_links={f"r{i}": (0,) for i in range(len(relations))},
    )


def test_rewire_identity_for_tau_zero():
    sk = _skeleton(["ACME"], [(0,)])
    subs = [SubChunk(0, 0, 0, "Acme rules.", 2, 0, 11)]
    out = rewire_skeleton(sk, subs)
    assert out.entity_links == {"e0": (0,)}


def test_rewire_by_containment():
    texts = ["filler words here"] * 8
    texts[2] = "then ACME Corp signed"
    sk = _skeleton(["ACME CORP"], [(0,)])
    out = rewire_skeleton(sk, _subs(texts))
    assert out.entity_links["e0"] == (2,)


def test_rewire_fallback_and_relations():
    texts = ["alpha beta", "gamma delta", "Oslo fjord", "Lima river"]
    sk = _skeleton(["PARAPHRASED NAME", "OSLO", "LIMA"], [(0,), (0,), (0,)], rels=[("e1", "e2")])
    out = rewire_skeleton(sk, _subs(texts))
    assert out.entity_links["e0"] == (0, 1, 2, 3)
    assert out.relation_links["r0"] == (2, 3)


def test_rewire_matches_scan_oracle(fixture_index, small_docs):
    # rebuild the chunk-level skeleton, then compare with a direct word scan
    from ketrag.corpus import chunk_corpus, split_subchunks
    from ketrag.extraction import kg_index

    c = cfg()
    chunks = chunk_corpus(small_docs, c.chunking)
    subs = split_subchunks(chunks, c.chunking.splits)
    core = set(fixture_index.manifest["stats"]["core_chunks"])
    sk = kg_index([ch for ch in chunks if ch.chunk_id in core], MockExtractor())
    names = {e.entity_id: words(e.name) for e in sk.entities}

    def has(text, run):
        w = words(text)
        return any(w[i : i + len(run)] == run for i in range(len(w) - len(run) + 1))

    for eid, links in sk.entity_links.items():
        expected = set()
        for ch in links:
            mine = [s for s in subs if s.parent == ch]
            hit = {s.sub_id for s in mine if has(s.text, names[eid])}
            expected |= hit or {s.sub_id for s in mine}
        assert set(fixture_index.skeleton.entity_links[eid]) == expected


# ---------------------------------------------------------------- persistence


def test_save_load_round_trip(fixture_index, tmp_path):
    save_index(fixture_index, tmp_path / "ix")
    loaded = load_index(tmp_path / "ix")
    assert loaded.structurally_equal(fixture_index)
    assert loaded.store.matrix().tobytes() == fixture_index.store.matrix().tobytes()
    assert {p.name for p in (tmp_path / "ix").iterdir()} == set(PAYLOAD_FILES) | {"manifest.json"}


def test_deterministic_bytes(small_docs, tmp_path):
    for name in ("a", "b"):
        save_index(ket_index(small_docs, cfg(seed=1)), tmp_path / name)
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name


@pytest.mark.parametrize("victim", ["subchunks.jsonl", "embeddings.bin", "keywords.jsonl"])
def test_truncated_file_is_rejected(fixture_index, tmp_path, victim):
    save_index(fixture_index, tmp_path / "ix")
    p = tmp_path / "ix" / victim
    p.write_bytes(p.read_bytes()[:-7])
    with pytest.raises(IndexCorruptError):
        load_index(tmp_path / "ix")


def test_missing_manifest_and_version(fixture_index, tmp_path):
    with pytest.raises(IndexCorruptError):
        load_index(tmp_path)
    save_index(fixture_index, tmp_path / "ix")
    m = tmp_path / "ix" / "manifest.json"
    data = json.loads(m.read_text())
    data["format_version"] = 99
    m.write_text(json.dumps(data))
    with pytest.raises(UnsupportedVersionError):
        load_index(tmp_path / "ix")


def test_wrong_tokenizer_is_named(fixture_index, tmp_path):
    save_index(fixture_index, tmp_path / "ix")
    m = tmp_path / "ix" / "manifest.json"
    data = json.loads(m.read_text())
    data["tokenizer"] = "sentencepiece:xx"
    m.write_text(json.dumps(data))
    with pytest.raises(TokenizerUnavailableError, match="sentencepiece:xx"):
        load_index(tmp_path / "ix")


def test_manifest_records_config(fixture_index, fixture_cfg):
    m = fixture_index.manifest
    assert m["config"] == fixture_cfg.to_dict()
    assert m["tokenizer"] == "word-v1" and m["provider"]["name"] == "hash-v1:64"
    assert m["rewire_rule"]


# ---------------------------------------------------------------- cost


def test_estimate_cost_hand_example():
    stats = CorpusStats(num_chunks=100, chunk_tokens=1200)
    model = CostModel(600, 600, price_input=1, price_embedding=0, items_per_chunk=0)
    assert estimate_cost(stats, model, "kg").llm_tokens == 360000


@pytest.mark.parametrize("beta", [0.0, 0.3, 0.8, 1.0])
def test_estimate_cost_matches_closed_form(beta):
    n, ell, le, lr, ci, ce = 37, 1200, 812, 640, 2.5e-6, 1.3e-7
    model = CostModel(le, lr, ci, ce, 15, 30, beta)
    stats = CorpusStats(n, ell)
    kg = estimate_cost(stats, model, "kg")
    ket = estimate_cost(stats, model, "ket")
    assert kg.currency == pytest.approx(itc_kg(n, ell, le, lr, ci, ce, 15, 30), rel=1e-12)
    assert ket.currency == pytest.approx(itc_ket(beta, n, ell, le, lr, ci, ce, 15, 30), rel=1e-12)
    if beta == 0:
        assert ket.currency == pytest.approx(3 * ell * n * ce, rel=1e-15)
    if beta == 1:
        assert ket.currency - 3 * ell * n * ce == pytest.approx(kg.currency, rel=1e-12)


def test_estimate_cost_validation():
    with pytest.raises(ConfigError):
        CostModel(price_input=-1)
    with pytest.raises(ConfigError):
        estimate_cost(CorpusStats(-1, 10), CostModel())
    with pytest.raises(ConfigError):
        estimate_cost(CorpusStats(1, 10), CostModel(), "full")
    zero = estimate_cost(CorpusStats(0, 1200), CostModel(1, 1, 1, 1))
    assert (zero.llm_tokens, zero.embed_tokens, zero.currency) == (0, 0, 0)


def test_metered_tokens_scale_with_beta(small_docs):
    def measured(beta):
        m = MeteredExtractor(MockExtractor())
        ket_index(small_docs, cfg(beta=beta), extractor=m)
        return m.input_tokens, m.calls

    full, n = measured(1.0)
    for beta in (0.25, 0.5):
        tokens, calls = measured(beta)
        assert calls == math.ceil(beta * n)
        # per-chunk contribution is at most two prompts over a full chunk
        one_chunk = full / n * 1.5
        assert abs(tokens / full - beta) <= one_chunk / full
