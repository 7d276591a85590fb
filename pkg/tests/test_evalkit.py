import json
import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from ketrag.corpus import ChunkingConfig
from ketrag.exceptions import ConfigError, KetRagError
from ketrag.evalkit import (
    EvalReport,
    QaInstance,
    coverage,
    exact_match,
    f1,
    from_hotpotqa,
    from_musique,
    load_qa_jsonl,
    normalize_answer,
    run_eval,
)
from ketrag.gateway import Gateway, GatewayConfig
from ketrag.graph import KnnConfig
from ketrag.indexer import IndexConfig, ket_index
from ketrag.retrieval import RetrievalConfig, ket_retrieve

from scripted import ScriptedTransport, chat_body
from synth import planted_corpus


def covers(context, answers):
    """Independent check: word-sequence search over lowercased alphanumeric tokens."""
    def toks(s):
        return [w for w in re.findall(r"[a-z0-9]+", s.lower().replace("'", "")) if w not in ("a", "an", "the")]

    ctx = toks(context)
    for a in answers:
        g = toks(a)
        if g and any(ctx[i : i + len(g)] == g for i in range(len(ctx) - len(g) + 1)):
            return 1
    return 0


# ---------------------------------------------------------------- metrics


@pytest.mark.parametrize(
    "context,answers,expected",
    [
        ("The capital is Paris.", ["paris"], 1),
        ("Parisian cafes", ["Paris"], 0),
        ("born in New  York City", ["new york"], 1),
        ("nothing here", ["Oslo", "Lima"], 0),
        ("Lima, Peru", ["Oslo", "Lima"], 1),
        ("the answer", [""], 0),
    ],
)
def test_coverage_cases(context, answers, expected):
    assert coverage(context, answers) == expected


def test_exact_match_and_f1_cases():
    assert normalize_answer("The  Eiffel-Tower!") == "eiffeltower"
    assert exact_match("The Paris", ["paris"]) == 1
    assert exact_match("Paris, France", ["Paris"]) == 0
    assert f1("Paris France", ["Paris"]) == pytest.approx(2 / 3)
    assert f1("the", ["a"]) == 1.0
    assert f1("", ["Paris"]) == 0.0
    assert f1("red blue", ["blue red green", "red"]) == pytest.approx(max(0.8, 2 / 3))


text_st = st.text(alphabet=st.sampled_from(list("abc XYZ.,'-")), max_size=30)


@given(s=text_st)
def test_normalization_is_idempotent(s):
    assert normalize_answer(normalize_answer(s)) == normalize_answer(s)


@given(pred=text_st, gold=st.lists(text_st, min_size=1, max_size=3))
def test_exact_match_implies_full_f1(pred, gold):
    if exact_match(pred, gold):
        assert f1(pred, gold) == 1.0
    assert 0.0 <= f1(pred, gold) <= 1.0


@given(ctx=text_st, extra=text_st, gold=st.lists(text_st, min_size=1, max_size=3))
def test_coverage_grows_with_context(ctx, extra, gold):
    assert coverage(ctx + " " + extra, gold) >= coverage(ctx, gold)


plain_st = st.text(alphabet=st.sampled_from(list("abAB ")), max_size=30)


@given(ctx=plain_st, gold=st.lists(plain_st, min_size=1, max_size=3))
def test_coverage_matches_independent_check(ctx, gold):
    assert coverage(ctx, gold) == covers(ctx, gold)


# ---------------------------------------------------------------- records and loaders


def test_instance_needs_answers():
    with pytest.raises(ConfigError):
        QaInstance("q", "why?", ())
    with pytest.raises(ConfigError):
        QaInstance("q", "why?", ("",))


def test_load_qa_jsonl(tmp_path):
    p = tmp_path / "qa.jsonl"
    p.write_text('{"id": 1, "question": "q?", "answers": "a"}\n\n{"id": "2", "question": "r?", "answers": ["b", "c"]}\n')
    assert load_qa_jsonl(p) == [QaInstance("1", "q?", ("a",)), QaInstance("2", "r?", ("b", "c"))]
    p.write_text('{"id": 1}\n')
    with pytest.raises(ConfigError, match=":1:"):
        load_qa_jsonl(p)


def test_dataset_adapters():
    mus = [
        {
            "id": "m1",
            "question": "q?",
            "answer": "Oslo",
            "answer_aliases": ["Christiania"],
            "paragraphs": [{"title": "T", "paragraph_text": "Body."}, {"title": "T", "paragraph_text": "Body."}],
        }
    ]
    inst, docs = from_musique(mus)
    assert inst[0].gold_answers == ("Oslo", "Christiania") and docs == [("p0", "T\nBody.")]
    hot = [{"_id": "h1", "question": "q?", "answer": "Lima", "context": [["Peru", ["Lima is ", "a city."]]]}]
    inst, docs = from_hotpotqa(hot)
    assert inst[0].instance_id == "h1" and docs == [("p0", "Peru\nLima is a city.")]


# ---------------------------------------------------------------- run_eval


@pytest.fixture(scope="module")
def planted():
    docs, qa = planted_corpus(n_docs=6, filler_per_doc=30, seed=11)
    cfg = IndexConfig(chunking=ChunkingConfig(chunk_tokens=150, splits=1), knn=KnnConfig(k=2), beta=0.5)
    dataset = [QaInstance(r["id"], r["question"], tuple(r["answers"])) for r in qa]
    return ket_index(docs, cfg), dataset


def test_empty_dataset_reports_nulls(planted):
    ix, _ = planted
    rep = run_eval(ix, [], RetrievalConfig())
    assert rep.aggregates == {"coverage": None, "em": None, "f1": None, "context_tokens": None}


def test_retrieval_only_rerun_is_identical(planted):
    ix, data = planted
    a = run_eval(ix, data, RetrievalConfig(context_limit=400, theta=0.0)).to_dict(include_latency=False)
    b = run_eval(ix, data, RetrievalConfig(context_limit=400, theta=0.0)).to_dict(include_latency=False)
    assert a == b
    assert all(r["em"] is None and r["f1"] is None for r in a["per_instance"])


def test_keyword_only_coverage_matches_independent_check(planted):
    ix, data = planted
    cfg = RetrievalConfig(context_limit=400, theta=0.0)
    rep = run_eval(ix, data, cfg)
    expected = [covers(ket_retrieve(ix, q.question, cfg).text, q.gold_answers) for q in data]
    assert [r["coverage"] for r in rep.per_instance] == expected
    assert rep.aggregates["coverage"] == pytest.approx(sum(expected) / len(expected))


def test_generation_scores_and_isolates_failures(planted):
    ix, data = planted
    gold = data[0].gold_answers[0]
    t = ScriptedTransport([(200, chat_body(f"The {gold}")), (400, "bad request")])
    gw = Gateway(GatewayConfig(), transport=t, api_key="k", sleep=lambda s: None)
    rep = run_eval(ix, data[:2], RetrievalConfig(context_limit=300), generate=True, gateway=gw, template="{context}|{question}")
    first, second = rep.per_instance
    assert (first["em"], first["f1"]) == (1, 1.0)
    assert "GatewayError" in second["error"] and second["em"] is None
    assert rep.aggregates["em"] == 1.0
    assert t.requests[0][1]["messages"][-1]["content"].endswith("|" + data[0].question)
    with pytest.raises(KetRagError):
        run_eval(ix, data, RetrievalConfig(), generate=True)


def test_report_save(planted, tmp_path):
    ix, data = planted
    rep = run_eval(ix, data[:1], RetrievalConfig(context_limit=200))
    rep.save(tmp_path / "r.json")
    saved = json.loads((tmp_path / "r.json").read_text())
    assert saved["config"]["context_limit"] == 200 and saved["aggregates"] == rep.aggregates
    assert isinstance(EvalReport({}).to_dict(), dict)
