"""``ketrag`` command line: index, query, eval, estimate, graph-stats.

Exit codes: 0 success, 1 runtime failure, 2 bad usage or configuration.
Machine-readable output goes to stdout (JSON with ``--json``); logs go to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from pathlib import Path

from .corpus import ChunkingConfig, build_vocabulary, chunk_corpus, load_corpus, segment_sentences, split_subchunks
from .embedding import EmbeddingStore, embed_batch, get_provider
from .evalkit import from_hotpotqa, from_musique, load_qa_jsonl, run_eval
from .exceptions import ConfigError, KetRagError
from .extraction import MeteredExtractor, get_extractor, load_prompt, template_tokens
from .gateway import Gateway, GatewayConfig
from .graph import KnnConfig, build_knn_graph, degree_histogram, pagerank
from .indexer import CorpusStats, CostModel, IndexConfig, estimate_cost, ket_index, load_index, save_index
from .retrieval import RetrievalConfig, assemble_prompt, ket_retrieve
from .tokenizer import get_tokenizer

logger = logging.getLogger("ketrag")


class UsageError(KetRagError):
    """Bad invocation detected after argument parsing."""


def _emit(args, payload: dict, text: str | None = None) -> None:
    if args.json or text is None:
        print(json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False))
    else:
        print(text)


def _gateway(args) -> Gateway:
    # constructing a gateway touches neither the network nor the API key
    cfg = GatewayConfig.from_json(args.gateway_config) if args.gateway_config else GatewayConfig()
    return Gateway(cfg)


def _index_config(args) -> IndexConfig:
    return IndexConfig(
        chunking=ChunkingConfig(chunk_tokens=args.chunk_size, splits=args.tau),
        knn=KnnConfig(k=args.k, alpha=args.alpha),
        beta=args.beta,
        core_mode=args.core_mode,
        extractor=args.extractor,
        embedder=args.embedder,
        embedding_dim=args.dim,
        tokenizer=args.tokenizer,
        seed=args.seed,
        max_workers=args.workers,
    )


def cmd_index(args) -> int:
    cfg = _index_config(args)
    corpus = Path(args.corpus)
    if not corpus.exists():
        raise UsageError(f"corpus not found: {corpus}")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise UsageError(f"{out} exists and is not empty (pass --overwrite)")
    tok = get_tokenizer(cfg.tokenizer)
    needs_gateway = cfg.extractor == "llm" or cfg.embedder == "remote"
    gateway = _gateway(args) if needs_gateway else None
    extractor = MeteredExtractor(
        get_extractor(cfg.extractor, gateway=gateway, stopwords=cfg.chunking.stopwords), tokenizer=tok
    )
    documents = load_corpus(corpus)

    out.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        index = ket_index(documents, cfg, extractor=extractor, tokenizer=tok, gateway=gateway)
        save_index(index, staging)
        if out.exists():
            shutil.rmtree(out)
        staging.rename(out)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    stats = index.manifest["stats"]
    summary = {
        "out": str(out),
        "chunks": stats["chunks"],
        "core_chunks": len(stats["core_chunks"]),
        "sub_chunks": stats["sub_chunks"],
        "entities": stats["entities"],
        "relations": stats["relations"],
        "keywords": stats["keywords"],
        "extraction_calls": extractor.calls,
        "extraction_input_tokens": extractor.input_tokens,
    }
    if gateway is not None:
        summary["usage"] = gateway.meter.snapshot()
    text = "\n".join(f"{k:24s} {v}" for k, v in summary.items() if k != "usage")
    _emit(args, summary, text)
    return 0


def _load(path: str):
    if not Path(path).is_dir():
        raise UsageError(f"index directory not found: {path}")
    return load_index(path)


def _query_provider(index, args):
    name = index.manifest["provider"]["name"]
    gateway = _gateway(args) if name.startswith("remote") or getattr(args, "generate", False) else None
    return index.provider(gateway), gateway


def cmd_query(args) -> int:
    cfg = RetrievalConfig(context_limit=args.context_limit, theta=args.theta, k_seed=args.k_seed)
    index = _load(args.index)
    provider, gateway = _query_provider(index, args)
    ctx = ket_retrieve(index, args.question, cfg, provider)
    payload = {
        "question": args.question,
        "total_tokens": ctx.total_tokens,
        "entity_channel_tokens": ctx.tokens_in("entity", "relation", "chunk"),
        "keyword_channel_tokens": ctx.tokens_in("keyword-chunk"),
        "flags": ctx.flags,
    }
    if args.emit_context or not args.generate:
        payload["context"] = ctx.to_dict()
    if args.generate:
        answer, usage = gateway.chat_complete(None, assemble_prompt(ctx, args.question), args.max_output_tokens)
        payload["answer"] = answer
        payload["usage"] = usage
    lines = [f"context tokens: {ctx.total_tokens} (limit {cfg.context_limit})"]
    if "answer" in payload:
        lines.append(payload["answer"])
    if "context" in payload and not args.json:
        lines.insert(0, ctx.to_json(indent=2))
    _emit(args, payload, "\n".join(lines))
    return 0


def _load_dataset(path: str, fmt: str):
    if fmt == "jsonl":
        return load_qa_jsonl(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        records = json.loads(text)
    except json.JSONDecodeError:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
    instances, _ = (from_musique if fmt == "musique" else from_hotpotqa)(records)
    return instances


def cmd_eval(args) -> int:
    cfg = RetrievalConfig(context_limit=args.context_limit, theta=args.theta, k_seed=args.k_seed)
    if not Path(args.dataset).is_file():
        raise UsageError(f"dataset not found: {args.dataset}")
    index = _load(args.index)
    dataset = _load_dataset(args.dataset, args.format)
    if args.limit is not None:
        dataset = dataset[: args.limit]
    args.generate = not args.retrieval_only
    provider, gateway = _query_provider(index, args)
    report = run_eval(index, dataset, cfg, provider, generate=args.generate, gateway=gateway)
    if args.out:
        report.save(args.out)
    agg = report.aggregates
    payload = {"instances": len(report.per_instance), "aggregates": agg, "out": args.out}
    text = "\n".join(
        [f"instances {len(report.per_instance)}"]
        + [f"{k:15s} {'n/a' if v is None else f'{v:.4f}'}" for k, v in agg.items()]
    )
    _emit(args, payload, text)
    return 0


def cmd_estimate(args) -> int:
    values = {
        "num_chunks": args.num_chunks,
        "chunk_size": args.chunk_size,
        "prompt_tokens": min(args.prompt_tokens),
        "price_in": args.price_in,
        "price_embed": args.price_embed,
        "items_per_chunk": args.items_per_chunk,
        "tokens_per_item": args.tokens_per_item,
        "beta": args.beta,
    }
    negative = sorted(k for k, v in values.items() if v < 0)
    if negative:
        raise ConfigError(f"negative values not allowed: {', '.join(negative)}")
    entity_prompt, relation_prompt = args.prompt_tokens
    stats = CorpusStats(args.num_chunks, args.chunk_size)
    model = CostModel(
        entity_prompt_tokens=entity_prompt,
        relation_prompt_tokens=relation_prompt,
        price_input=args.price_in,
        price_embedding=args.price_embed,
        items_per_chunk=args.items_per_chunk,
        tokens_per_item=args.tokens_per_item,
        beta=args.beta,
    )
    kg = estimate_cost(stats, model, "kg")
    ket = estimate_cost(stats, model, "ket")

    def ratio(a, b):
        return a / b if b else None

    payload = {
        "kg": vars(kg),
        "ket": vars(ket),
        "ratio": {
            "llm_tokens": ratio(ket.llm_tokens, kg.llm_tokens),
            "embed_tokens": ratio(ket.embed_tokens, kg.embed_tokens),
            "currency": ratio(ket.currency, kg.currency),
        },
    }
    rows = [f"{'':8s}{'llm_tokens':>16s}{'embed_tokens':>16s}{'currency':>14s}"]
    for est in (kg, ket):
        rows.append(f"{est.variant:8s}{est.llm_tokens:16.0f}{est.embed_tokens:16.0f}{est.currency:14.4f}")
    r = payload["ratio"]
    rows.append(
        "ratio   " + "".join(f"{'n/a' if v is None else f'{v:.4f}':>16s}" for v in (r["llm_tokens"], r["embed_tokens"]))
        + f"{'n/a' if r['currency'] is None else format(r['currency'], '.4f'):>14s}"
    )
    _emit(args, payload, "\n".join(rows))
    return 0


def cmd_graph_stats(args) -> int:
    corpus = Path(args.corpus)
    if not corpus.exists():
        raise UsageError(f"corpus not found: {corpus}")
    chunking = ChunkingConfig(chunk_tokens=args.chunk_size, splits=0)
    knn_cfg = KnnConfig(k=args.k, alpha=args.alpha)
    tok = get_tokenizer(args.tokenizer)
    chunks = chunk_corpus(load_corpus(corpus), chunking, tok)
    if not chunks:
        raise KetRagError("corpus produced no chunks")
    subs = split_subchunks(chunks, 0)
    vocab = build_vocabulary(segment_sentences(subs, chunks, chunking.stopwords), chunking)
    provider = get_provider(args.embedder, args.dim)
    vecs = embed_batch(provider, [c.text for c in chunks])
    store = EmbeddingStore(vecs.shape[1])
    store.add_many([f"chunk:{c.chunk_id}" for c in chunks], vecs)
    graph = build_knn_graph(chunks, vocab, store, knn_cfg)
    hist = degree_histogram(graph)
    if args.json:
        pr = pagerank(graph, knn_cfg)
        top = sorted(pr.scores.items(), key=lambda kv: (-kv[1], kv[0]))[:10]
        payload = {
            "nodes": len(graph),
            "edges": len(graph.edges()),
            "degree_histogram": {str(d): c for d, c in hist.items()},
            "pagerank_top": [{"chunk_id": c, "score": s} for c, s in top],
        }
        _emit(args, payload)
    else:
        print("degree,count")
        for d, c in hist.items():
            print(f"{d},{c}")
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--json", action="store_true", help="print machine-readable JSON on stdout")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _add_retrieval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lambda", dest="context_limit", type=int, default=12000, help="context token limit")
    p.add_argument("--theta", type=float, default=0.4, help="entity-channel share of the budget")
    p.add_argument("--k-seed", type=int, default=10, help="seed entities for the entity channel")
    p.add_argument("--gateway-config", help="JSON file with gateway settings")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ketrag", description="Skeleton + keyword graph retrieval toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("index", help="build an index from a corpus")
    p.add_argument("corpus", help="directory of .txt files or a JSONL file of {id, text}")
    p.add_argument("out", help="output index directory")
    p.add_argument("--chunk-size", type=int, default=1200)
    p.add_argument("--tau", type=int, default=3, help="recursive split count (2**tau sub-chunks)")
    p.add_argument("--k", type=int, default=2, help="KNN degree parameter (even)")
    p.add_argument("--alpha", type=float, default=0.15, help="PageRank teleport probability")
    p.add_argument("--beta", type=float, default=0.8, help="fraction of chunks sent to extraction")
    p.add_argument("--core-mode", choices=("pagerank", "uniform"), default="pagerank")
    p.add_argument("--extractor", choices=("mock", "llm"), default="mock")
    p.add_argument("--embedder", choices=("hash", "hash-bow", "remote"), default="hash")
    p.add_argument("--dim", type=int, default=64, help="embedding width for offline embedders")
    p.add_argument("--tokenizer", default="word-v1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="extraction threads")
    p.add_argument("--gateway-config", help="JSON file with gateway settings")
    p.add_argument("--overwrite", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="retrieve context (and optionally answer) for one question")
    p.add_argument("index")
    p.add_argument("question")
    _add_retrieval(p)
    p.add_argument("--emit-context", action="store_true", help="include the context when generating")
    p.add_argument("--generate", action="store_true", help="answer through the chat endpoint")
    p.add_argument("--max-output-tokens", type=int, default=200)
    _add_common(p)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score retrieval (and answers) on a QA dataset")
    p.add_argument("index")
    p.add_argument("dataset")
    _add_retrieval(p)
    p.add_argument("--format", choices=("jsonl", "musique", "hotpotqa"), default="jsonl")
    p.add_argument("--retrieval-only", action="store_true", help="Coverage only, no network")
    p.add_argument("--limit", type=int, help="evaluate only the first N instances")
    p.add_argument("--out", help="write the report JSON here")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("estimate", help="closed-form indexing cost, full graph vs skeleton + keywords")
    p.add_argument("--num-chunks", type=int, required=True)
    p.add_argument("--chunk-size", type=int, default=1200)
    p.add_argument(
        "--prompt-tokens", type=float, nargs=2, metavar=("ENTITY", "RELATION"), default=None,
        help="prompt template token counts (default: the bundled templates)",
    )
    p.add_argument("--price-in", type=float, default=0.0, help="currency per LLM input token")
    p.add_argument("--price-embed", type=float, default=0.0, help="currency per embedding token")
    p.add_argument("--beta", type=float, default=0.8)
    p.add_argument("--items-per-chunk", type=float, default=15.0)
    p.add_argument("--tokens-per-item", type=float, default=30.0)
    _add_common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("graph-stats", help="KNN degree histogram as CSV")
    p.add_argument("corpus")
    p.add_argument("--chunk-size", type=int, default=1200)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--alpha", type=float, default=0.15)
    p.add_argument("--embedder", choices=("hash", "hash-bow"), default="hash")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--tokenizer", default="word-v1")
    _add_common(p)
    p.set_defaults(func=cmd_graph_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "estimate" and args.prompt_tokens is None:
        tok = get_tokenizer("word-v1")
        args.prompt_tokens = [
            template_tokens(load_prompt("entity_extraction"), tok),
            template_tokens(load_prompt("relation_extraction"), tok),
        ]
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        parser.print_usage(sys.stderr)
        print(f"ketrag {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except KetRagError as exc:
        print(f"ketrag {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
