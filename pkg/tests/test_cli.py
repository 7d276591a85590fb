import json

import pytest

from ketrag.cli import build_parser, main

from oracles import itc_kg, itc_ket
from synth import filler_corpus, planted_corpus


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    for doc_id, text in filler_corpus(6, 40, seed=9):
        (d / f"{doc_id}.txt").write_text(text, encoding="utf-8")
    return d


@pytest.fixture(scope="module")
def built(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ix") / "index"
    assert main(["index", str(corpus_dir), str(out), "--chunk-size", "150", "--tau", "1"]) == 0
    return out


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_defaults():
    args = build_parser().parse_args(["index", "c", "o"])
    assert (args.chunk_size, args.tau, args.k, args.alpha, args.beta) == (1200, 3, 2, 0.15, 0.8)
    assert (args.core_mode, args.extractor, args.embedder) == ("pagerank", "mock", "hash")
    q = build_parser().parse_args(["query", "i", "q"])
    assert (q.context_limit, q.theta, q.k_seed) == (12000, 0.4, 10)


def test_index_summary_and_refuses_overwrite(capsys, corpus_dir, tmp_path):
    out = tmp_path / "ix"
    code, stdout, _ = run(capsys, "index", str(corpus_dir), str(out), "--chunk-size", "150", "--tau", "1", "--json")
    summary = json.loads(stdout)
    assert code == 0 and summary["chunks"] > 0 and summary["extraction_calls"] == summary["core_chunks"]
    assert (out / "manifest.json").exists()
    assert not [p for p in tmp_path.iterdir() if p.name.startswith(".ix.")]
    code, _, err = run(capsys, "index", str(corpus_dir), str(out))
    assert code == 2 and "--overwrite" in err
    assert run(capsys, "index", str(corpus_dir), str(out), "--overwrite", "--chunk-size", "150")[0] == 0


def test_index_is_reproducible(capsys, corpus_dir, tmp_path):
    for name in ("a", "b"):
        assert run(capsys, "index", str(corpus_dir), str(tmp_path / name), "--chunk-size", "150")[0] == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_beta_zero_with_llm_extractor_makes_no_calls(capsys, corpus_dir, tmp_path, monkeypatch):
    monkeypatch.delenv("OPENAI_API_KEY", raising=False)
    code, stdout, _ = run(
        capsys, "index", str(corpus_dir), str(tmp_path / "ix"), "--beta", "0", "--extractor", "llm", "--json"
    )
    summary = json.loads(stdout)
    assert code == 0 and summary["extraction_calls"] == 0 and summary["entities"] == 0
    assert summary["usage"] == {}


@pytest.mark.parametrize(
    "argv",
    [
        ["index", "CORPUS", "OUT", "--chunk-size", "149", "--tau", "8"],
        ["index", "CORPUS", "OUT", "--k", "3"],
        ["index", "CORPUS", "OUT", "--beta", "1.5"],
        ["index", "/nonexistent/corpus", "OUT"],
        ["query"],
        ["query", "/nonexistent/index", "q"],
        ["estimate"],
        ["estimate", "--num-chunks", "-1"],
        ["estimate", "--num-chunks", "10", "--price-in", "-0.1"],
        ["frobnicate"],
    ],
)
def test_usage_errors_exit_2(capsys, corpus_dir, tmp_path, argv):
    argv = [str(corpus_dir) if a == "CORPUS" else str(tmp_path / "o") if a == "OUT" else a for a in argv]
    assert run(capsys, *argv)[0] == 2


def test_corrupt_index_exits_1(capsys, built, tmp_path):
    import shutil

    bad = tmp_path / "bad"
    shutil.copytree(built, bad)
    (bad / "subchunks.jsonl").write_text("oops\n")
    code, _, err = run(capsys, "query", str(bad), "anything")
    assert code == 1 and "failed" in err


def test_query_json(capsys, built):
    code, stdout, _ = run(capsys, "query", str(built), "where is the harbor", "--lambda", "300", "--json")
    payload = json.loads(stdout)
    assert code == 0 and payload["total_tokens"] <= 300
    assert payload["entity_channel_tokens"] + payload["keyword_channel_tokens"] == payload["total_tokens"]
    assert payload["context"]["total_tokens"] == payload["total_tokens"]


def test_eval_retrieval_only(capsys, tmp_path):
    docs, qa = planted_corpus(n_docs=4, filler_per_doc=20, seed=2)
    src = tmp_path / "docs.jsonl"
    src.write_text("".join(json.dumps({"id": d, "text": t}) + "\n" for d, t in docs))
    data = tmp_path / "qa.jsonl"
    data.write_text("".join(json.dumps(r) + "\n" for r in qa))
    assert run(capsys, "index", str(src), str(tmp_path / "ix"), "--chunk-size", "150", "--tau", "1")[0] == 0
    report = tmp_path / "report.json"
    code, stdout, _ = run(
        capsys, "eval", str(tmp_path / "ix"), str(data), "--retrieval-only", "--lambda", "400", "--out", str(report), "--json"
    )
    payload = json.loads(stdout)
    assert code == 0 and payload["instances"] == len(qa)
    assert 0.0 <= payload["aggregates"]["coverage"] <= 1.0 and payload["aggregates"]["em"] is None
    assert json.loads(report.read_text())["aggregates"] == payload["aggregates"]
    assert run(capsys, "eval", str(tmp_path / "ix"), str(tmp_path / "missing.jsonl"), "--retrieval-only")[0] == 2


def test_estimate_matches_closed_form(capsys):
    code, stdout, _ = run(
        capsys,
        "estimate",
        "--num-chunks", "100",
        "--chunk-size", "1200",
        "--prompt-tokens", "600", "600",
        "--price-in", "1e-6",
        "--price-embed", "2e-8",
        "--beta", "0.8",
        "--json",
    )
    payload = json.loads(stdout)
    assert code == 0
    assert payload["kg"]["llm_tokens"] == 360000
    assert payload["ratio"]["llm_tokens"] == pytest.approx(0.8)
    assert payload["kg"]["currency"] == pytest.approx(itc_kg(100, 1200, 600, 600, 1e-6, 2e-8, 15, 30))
    assert payload["ket"]["currency"] == pytest.approx(itc_ket(0.8, 100, 1200, 600, 600, 1e-6, 2e-8, 15, 30))


def test_estimate_default_prompt_tokens(capsys):
    code, stdout, _ = run(capsys, "estimate", "--num-chunks", "10")
    assert code == 0 and "ratio" in stdout
    code, stdout, _ = run(capsys, "estimate", "--num-chunks", "0", "--json")
    assert code == 0 and json.loads(stdout)["ratio"]["llm_tokens"] is None


def test_graph_stats_csv(capsys, corpus_dir):
    code, stdout, _ = run(capsys, "graph-stats", str(corpus_dir), "--chunk-size", "150")
    lines = stdout.strip().splitlines()
    assert code == 0 and lines[0] == "degree,count"
    rows = [tuple(map(int, line.split(","))) for line in lines[1:]]
    assert all(d >= 1 for d, _ in rows)
    code, stdout, _ = run(capsys, "graph-stats", str(corpus_dir), "--chunk-size", "150", "--json")
    payload = json.loads(stdout)
    assert sum(rows_c for _, rows_c in rows) == payload["nodes"]
    assert len(payload["pagerank_top"]) == min(10, payload["nodes"])
