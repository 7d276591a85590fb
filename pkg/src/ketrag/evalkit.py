"""QA evaluation: Coverage, Exact Match and token F1, plus dataset loaders."""
from __future__ import annotations

import json
import logging
import re
import string
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .exceptions import ConfigError, KetRagError
from .retrieval import RetrievalConfig, assemble_prompt, ket_retrieve

logger = logging.getLogger(__name__)

_PUNCT = set(string.punctuation) | set("“”‘’–—")
_ARTICLES = re.compile(r"\b(a|an|the)\b")


def normalize_answer(s: str) -> str:
    """Lowercase, drop punctuation and the articles a/an/the, collapse whitespace."""
    s = s.lower()
    s = "".join(ch for ch in s if ch not in _PUNCT)
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def coverage(context: str, gold_answers: Sequence[str]) -> int:
    """1 iff some normalized gold answer occurs in the normalized context
    on word boundaries."""
    haystack = f" {normalize_answer(context)} "
    for g in gold_answers:
        ng = normalize_answer(g)
        if ng and f" {ng} " in haystack:
            return 1
    return 0


def exact_match(prediction: str, gold_answers: Sequence[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in gold_answers))


def _f1(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1(prediction: str, gold_answers: Sequence[str]) -> float:
    """Best word-bag F1 of the prediction against any gold answer."""
    pred = normalize_answer(prediction).split()
    return max((_f1(pred, normalize_answer(g).split()) for g in gold_answers), default=0.0)


@dataclass(frozen=True)
class QaInstance:
    instance_id: str
    question: str
    gold_answers: tuple

    def __post_init__(self):
        if not self.gold_answers or not all(isinstance(a, str) and a for a in self.gold_answers):
            raise ConfigError(f"instance {self.instance_id!r} needs non-empty gold answers")


@dataclass
class EvalReport:
    config: dict
    per_instance: list[dict] = field(default_factory=list)

    @property
    def aggregates(self) -> dict:
        out = {}
        for metric in ("coverage", "em", "f1", "context_tokens"):
            vals = [r[metric] for r in self.per_instance if r.get(metric) is not None]
            out[metric] = sum(vals) / len(vals) if vals else None
        return out

    def to_dict(self, include_latency: bool = True) -> dict:
        rows = self.per_instance
        if not include_latency:
            rows = [{k: v for k, v in r.items() if k != "latency"} for r in rows]
        return {"config": self.config, "per_instance": rows, "aggregates": self.aggregates}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_qa_jsonl(path) -> list[QaInstance]:
    """Read ``{"id", "question", "answers": [...]}`` lines."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                answers = rec["answers"]
                if isinstance(answers, str):
                    answers = [answers]
                out.append(QaInstance(str(rec["id"]), rec["question"], tuple(answers)))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: bad QA record ({exc})") from exc
    return out


def from_musique(records: Sequence[dict]) -> tuple[list[QaInstance], list[tuple[str, str]]]:
    """MuSiQue records (``paragraphs[{title, paragraph_text}]``, ``answer``,
    ``answer_aliases``) to QA instances plus a deduplicated paragraph corpus."""
    instances, docs, seen = [], [], set()
    for rec in records:
        answers = [rec["answer"]] + list(rec.get("answer_aliases") or [])
        instances.append(QaInstance(str(rec["id"]), rec["question"], tuple(a for a in answers if a)))
        for p in rec.get("paragraphs", []):
            text = f"{p.get('title', '')}\n{p['paragraph_text']}".strip()
            if text not in seen:
                seen.add(text)
                docs.append((f"p{len(docs)}", text))
    return instances, docs


def from_hotpotqa(records: Sequence[dict]) -> tuple[list[QaInstance], list[tuple[str, str]]]:
    """HotpotQA records (``context: [[title, [sentences]]]``) to the same shape."""
    instances, docs, seen = [], [], set()
    for rec in records:
        instances.append(QaInstance(str(rec.get("_id", rec.get("id"))), rec["question"], (rec["answer"],)))
        for title, sents in rec.get("context", []):
            text = f"{title}\n{''.join(sents)}".strip()
            if text not in seen:
                seen.add(text)
                docs.append((f"p{len(docs)}", text))
    return instances, docs


def run_eval(
    index,
    dataset: Sequence[QaInstance],
    cfg: RetrievalConfig,
    provider=None,
    generate: bool = False,
    gateway=None,
    template: str | None = None,
    max_output_tokens: int = 200,
) -> EvalReport:
    """Retrieve for every instance and score it.

    Retrieval-only mode computes Coverage. With ``generate`` each instance's
    prompt goes to the gateway once and EM/F1 are scored as well. Failures
    are recorded per instance and never abort the run.
    """
    if generate and gateway is None:
        raise KetRagError("generation mode needs a gateway")
    provider = provider or index.provider(gateway)
    report = EvalReport(
        config={
            "context_limit": cfg.context_limit,
            "theta": cfg.theta,
            "k_seed": cfg.k_seed,
            "generate": generate,
            "index": {k: index.manifest.get(k) for k in ("config", "tokenizer", "provider", "extractor")},
        }
    )
    for inst in dataset:
        row = {"id": inst.instance_id, "coverage": None, "em": None, "f1": None, "context_tokens": None}
        t0 = time.perf_counter()
        try:
            ctx = ket_retrieve(index, inst.question, cfg, provider)
            row["context_tokens"] = ctx.total_tokens
            row["coverage"] = coverage(ctx.text, inst.gold_answers)
            if generate:
                answer, _ = gateway.chat_complete(
                    None, assemble_prompt(ctx, inst.question, template), max_output_tokens, stage="generation"
                )
                row["prediction"] = answer
                row["em"] = exact_match(answer, inst.gold_answers)
                row["f1"] = f1(answer, inst.gold_answers)
        except Exception as exc:  # recorded, the batch continues
            logger.warning("instance %s failed: %s", inst.instance_id, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        row["latency"] = time.perf_counter() - t0
        report.per_instance.append(row)
    return report
