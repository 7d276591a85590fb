"""Corpus ingestion: chunking, recursive sub-chunk splitting, sentence
segmentation and the keyword vocabulary."""
from __future__ import annotations

import json
import logging
import re
from bisect import bisect_right
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .exceptions import ConfigError
from .tokenizer import Tokenizer, WordTokenizer

logger = logging.getLogger(__name__)

_KEYWORD_RE = re.compile(r"\w+(?:[.'’\-]\w+)*")


@lru_cache(maxsize=None)
def default_stopwords() -> frozenset:
    """The shipped English stopword list."""
    text = resources.files("ketrag").joinpath("data/stopwords_en.txt").read_text(encoding="utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip())


def load_stopwords(path) -> frozenset:
    """Read a stopword file: one word per line, UTF-8."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return frozenset(w.strip().lower() for w in lines if w.strip())


def normalize_words(text: str, stopwords: Iterable[str] | None = None) -> list[str]:
    """Lowercased word tokens of ``text`` in order of appearance.

    A word is a run of word characters, possibly joined by ``.``, ``'``,
    ``-``; surrounding punctuation is never part of it. No stemming.
    """
    words = [m.group().lower() for m in _KEYWORD_RE.finditer(text)]
    if stopwords:
        words = [w for w in words if w not in stopwords]
    return words


def keyword_set(text: str, stopwords: Iterable[str]) -> frozenset:
    return frozenset(normalize_words(text, stopwords))


@dataclass(frozen=True)
class ChunkingConfig:
    """Chunk length ``chunk_tokens`` and the number of recursive halvings ``splits``."""

    chunk_tokens: int = 1200
    splits: int = 3
    stopwords: frozenset = field(default_factory=default_stopwords, repr=False)

    def __post_init__(self):
        if not isinstance(self.chunk_tokens, int) or self.chunk_tokens < 1:
            raise ConfigError(f"chunk_tokens must be a positive integer, got {self.chunk_tokens!r}")
        if not isinstance(self.splits, int) or self.splits < 0:
            raise ConfigError(f"splits must be a non-negative integer, got {self.splits!r}")
        if self.chunk_tokens < 2**self.splits:
            raise ConfigError(
                f"chunk_tokens={self.chunk_tokens} is smaller than 2**splits={2 ** self.splits}; "
                "every sub-chunk needs at least one token"
            )
        if not self.stopwords:
            raise ConfigError("stopword set must be non-empty")
        object.__setattr__(self, "stopwords", frozenset(w.lower() for w in self.stopwords))


@dataclass(frozen=True)
class Chunk:
    chunk_id: int
    doc_id: str
    text: str
    token_count: int
    token_ids: tuple
    # (start, end) character offsets of each token inside ``text``
    spans: tuple = field(default=(), repr=False, compare=False)


@dataclass(frozen=True)
class SubChunk:
    sub_id: int
    parent: int
    split_index: int
    text: str
    token_count: int
    # character offsets inside the parent chunk text
    start: int = 0
    end: int = 0

    def to_dict(self) -> dict:
        return {
            "sub_id": self.sub_id,
            "parent": self.parent,
            "split_index": self.split_index,
            "text": self.text,
            "token_count": self.token_count,
            "start": self.start,
            "end": self.end,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SubChunk":
        return cls(**{k: d[k] for k in ("sub_id", "parent", "split_index", "text", "token_count", "start", "end")})


@dataclass(frozen=True)
class Sentence:
    sentence_id: int
    sub_id: int
    chunk_id: int
    text: str
    keyword_set: frozenset


@dataclass
class KeywordVocabulary:
    """Keyword set plus postings ``keyword -> sorted (chunk_id, sub_id, sentence_id)``."""

    keywords: set = field(default_factory=set)
    postings: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.keywords)

    def __contains__(self, keyword):
        return keyword in self.keywords

    def chunk_keywords(self) -> dict[int, set]:
        """Keyword set of each chunk, derived from the postings."""
        out: dict[int, set] = defaultdict(set)
        for kw, posts in self.postings.items():
            for chunk_id, _, _ in posts:
                out[chunk_id].add(kw)
        return dict(out)


def chunk_corpus(
    documents: Sequence[tuple[str, str]],
    cfg: ChunkingConfig,
    tokenizer: Tokenizer | None = None,
    diagnostics: list | None = None,
) -> list[Chunk]:
    """Cut each document into contiguous windows of ``cfg.chunk_tokens`` tokens.

    The last window of a document may be shorter. Documents without tokens
    are skipped and reported through ``diagnostics``.
    """
    tok = tokenizer or WordTokenizer()
    size = cfg.chunk_tokens
    chunks: list[Chunk] = []
    for doc_id, text in documents:
        tokens = tok.tokenize(text)
        if not tokens:
            logger.warning("document %r has no tokens; skipped", doc_id)
            if diagnostics is not None:
                diagnostics.append({"stage": "chunking", "doc_id": doc_id, "warning": "empty document skipped"})
            continue
        for a in range(0, len(tokens), size):
            window = tokens[a : a + size]
            lo, hi = window[0][1], window[-1][2]
            chunks.append(
                Chunk(
                    chunk_id=len(chunks),
                    doc_id=str(doc_id),
                    text=text[lo:hi],
                    token_count=len(window),
                    token_ids=tuple(t[0] for t in window),
                    spans=tuple((s - lo, e - lo) for _, s, e in window),
                )
            )
    return chunks


def _halve(lo: int, hi: int, depth: int) -> list[tuple[int, int]]:
    if depth == 0:
        return [(lo, hi)]
    mid = lo + -(-(hi - lo) // 2)
    return _halve(lo, mid, depth - 1) + _halve(mid, hi, depth - 1)


def split_subchunks(
    chunks: Sequence[Chunk],
    splits: int,
    diagnostics: list | None = None,
) -> list[SubChunk]:
    """Split every chunk into ``2**splits`` sub-chunks by recursive halving.

    Each level cuts a token range at ``ceil(len / 2)``. Chunks shorter than
    ``2**splits`` tokens yield only their non-empty pieces.
    """
    if splits < 0:
        raise ConfigError("splits must be non-negative")
    out: list[SubChunk] = []
    for chunk in chunks:
        spans = chunk.spans
        pieces = _halve(0, chunk.token_count, splits)
        if chunk.token_count < len(pieces):
            logger.warning("chunk %d has %d tokens; fewer than %d sub-chunks", chunk.chunk_id, chunk.token_count, len(pieces))
            if diagnostics is not None:
                diagnostics.append(
                    {"stage": "splitting", "chunk_id": chunk.chunk_id, "warning": "chunk shorter than 2**splits"}
                )
        for index, (a, b) in enumerate(pieces):
            if a == b:
                continue
            if spans:
                start, end = spans[a][0], spans[b - 1][1]
            else:
                start, end = 0, len(chunk.text)
            out.append(
                SubChunk(
                    sub_id=len(out),
                    parent=chunk.chunk_id,
                    split_index=index,
                    text=chunk.text[start:end],
                    token_count=b - a,
                    start=start,
                    end=end,
                )
            )
    return out


# A lone "." after a title never ends a sentence ("Dr. Smith").
TITLES = frozenset("mr mrs ms dr prof st mt gen col lt sgt capt rev hon".split())
# After these (and after dotted words such as "U.S") a lone "." ends the
# sentence only when the next word is capitalized.
ABBREVIATIONS = frozenset(
    "sr jr vs etc inc ltd co corp no fig jan feb mar apr jun jul aug sep sept oct nov dec approx dept est".split()
)
_TERMINAL_RE = re.compile(r"[.!?]+[\"'”’)\]]*(?=\s|$)")
_NEXT_WORD_RE = re.compile(r"\s*[\"'“‘(\[]*(\w)")


def _sentence_spans(text: str) -> list[tuple[int, int]]:
    """Character spans of the sentences in ``text``.

    A boundary is terminal punctuation followed by whitespace or end of text.
    A single ``.`` after a title (``Dr.``) never splits. After another known
    abbreviation (``Inc.``) or a dotted word (``U.S.``) it splits only if the
    next word starts with an uppercase letter. Single-letter words do split
    (``"A. B."`` is two sentences).
    """
    spans = []
    start = 0
    for m in _TERMINAL_RE.finditer(text):
        punct = m.group().rstrip("\"'”’)]")
        if punct == ".":
            word_m = re.search(r"(\w+(?:\.\w+)*)$", text[start : m.start()])
            if word_m:
                word = word_m.group(1).lower()
                if word in TITLES:
                    continue
                if word in ABBREVIATIONS or "." in word:
                    nxt = _NEXT_WORD_RE.match(text, m.end())
                    if nxt and not nxt.group(1).isupper():
                        continue
        end = m.end()
        seg = text[start:end]
        if seg.strip():
            lead = len(seg) - len(seg.lstrip())
            spans.append((start + lead, end))
        start = end
    tail = text[start:]
    if tail.strip():
        lead = len(tail) - len(tail.lstrip())
        spans.append((start + lead, start + len(tail.rstrip())))
    return spans


def split_sentences(text: str) -> list[str]:
    """Sentences of ``text`` under the segmentation rule of :func:`segment_sentences`."""
    return [text[a:b] for a, b in _sentence_spans(text)]


def segment_sentences(
    sub_chunks: Sequence[SubChunk],
    chunks: Sequence[Chunk] | None = None,
    stopwords: Iterable[str] | None = None,
) -> list[Sentence]:
    """Segment sentences per chunk and attribute each to a sub-chunk.

    Segmentation runs over the parent chunk text so sentences crossing a
    sub-chunk boundary stay whole; such a sentence belongs to the sub-chunk
    holding its first token. Without ``chunks`` the parent text is rebuilt
    from the sub-chunks (inter-token gaps become spaces).
    """
    stop = default_stopwords() if stopwords is None else frozenset(stopwords)
    by_parent: dict[int, list[SubChunk]] = defaultdict(list)
    for s in sub_chunks:
        by_parent[s.parent].append(s)
    chunk_text = {c.chunk_id: c.text for c in chunks} if chunks is not None else {}

    out: list[Sentence] = []
    for parent in sorted(by_parent):
        subs = sorted(by_parent[parent], key=lambda s: s.split_index)
        text = chunk_text.get(parent)
        if text is None:
            parts = []
            pos = 0
            for s in subs:
                parts.append(" " * (s.start - pos))
                parts.append(s.text)
                pos = s.end
            text = "".join(parts)
        starts = [s.start for s in subs]
        for a, b in _sentence_spans(text):
            i = max(bisect_right(starts, a) - 1, 0)
            if a >= subs[i].end and i + 1 < len(subs):
                i += 1
            sent = text[a:b]
            out.append(
                Sentence(
                    sentence_id=len(out),
                    sub_id=subs[i].sub_id,
                    chunk_id=parent,
                    text=sent,
                    keyword_set=keyword_set(sent, stop),
                )
            )
    return out


def build_vocabulary(sentences: Sequence[Sentence], cfg: ChunkingConfig | None = None) -> KeywordVocabulary:
    """Collect non-stopword keywords and their sentence postings."""
    stop = cfg.stopwords if cfg is not None else default_stopwords()
    postings: dict[str, set] = defaultdict(set)
    for s in sentences:
        for kw in s.keyword_set:
            if kw not in stop:
                postings[kw].add((s.chunk_id, s.sub_id, s.sentence_id))
    return KeywordVocabulary(
        keywords=set(postings),
        postings={kw: sorted(p) for kw, p in sorted(postings.items())},
    )


def load_corpus(path) -> list[tuple[str, str]]:
    """Read documents from a directory of ``.txt`` files or a JSON-lines file.

    JSON lines carry ``{"id": ..., "text": ...}``. Directory documents are
    read in sorted path order and keyed by their path relative to the root.
    """
    path = Path(path)
    if path.is_dir():
        docs = []
        for p in sorted(path.rglob("*.txt")):
            docs.append((p.relative_to(path).as_posix(), p.read_text(encoding="utf-8")))
        return docs
    docs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append((str(rec["id"]), rec["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigError(f"{path}:{lineno}: expected {{'id', 'text'}} record ({exc})") from exc
    return docs
