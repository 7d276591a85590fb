"""Pluggable tokenizers.

Two implementations are provided:

* :class:`WordTokenizer` (id ``"word-v1"``) -- offline default. A token is a
  run of word characters, optionally joined by ``.``, ``'``, ``-`` or a right
  single quote (``U.S``, ``don't``, ``state-of-the-art``), or a single
  non-space, non-word character. Token ids are the token strings themselves.
* :class:`TiktokenTokenizer` (id ``"tiktoken:<encoding>"``) -- BPE counts
  compatible with hosted chat models. Requires the optional ``tiktoken``
  package and a locally cached encoding file.

Every tokenizer reports character spans so chunk and sub-chunk texts are
exact slices of the source text.
"""
from __future__ import annotations

import re
from typing import Protocol, Sequence

from .exceptions import TokenizerUnavailableError

Token = tuple  # (token_id, start, end)

_WORD_RE = re.compile(r"\w+(?:[.'’\-]\w+)*|[^\w\s]")


class Tokenizer(Protocol):
    id: str

    def tokenize(self, text: str) -> list[Token]: ...

    def count(self, text: str) -> int: ...


class WordTokenizer:
    """Whitespace + punctuation tokenizer; fully deterministic."""

    id = "word-v1"

    def tokenize(self, text: str) -> list[Token]:
        return [(m.group(), m.start(), m.end()) for m in _WORD_RE.finditer(text)]

    def count(self, text: str) -> int:
        return sum(1 for _ in _WORD_RE.finditer(text))

    def __repr__(self):
        return "WordTokenizer()"


class TiktokenTokenizer:
    """BPE tokenizer backed by ``tiktoken``."""

    def __init__(self, encoding: str = "cl100k_base"):
        self.id = f"tiktoken:{encoding}"
        try:
            import tiktoken
        except ImportError as exc:
            raise TokenizerUnavailableError(self.id, "the 'tiktoken' package is not installed") from exc
        try:
            self._enc = tiktoken.get_encoding(encoding)
        except Exception as exc:  # network fetch of the BPE file, missing cache, ...
            raise TokenizerUnavailableError(self.id, str(exc)) from exc

    def tokenize(self, text: str) -> list[Token]:
        ids = self._enc.encode(text, disallowed_special=())
        if not ids:
            return []
        _, starts = self._enc.decode_with_offsets(ids)
        ends = list(starts[1:]) + [len(text)]
        return list(zip(ids, starts, ends))

    def count(self, text: str) -> int:
        return len(self._enc.encode(text, disallowed_special=()))

    def __repr__(self):
        return f"TiktokenTokenizer({self.id.split(':', 1)[1]!r})"


def get_tokenizer(tokenizer_id: str = "word-v1") -> Tokenizer:
    """Construct a tokenizer from its persisted id."""
    if tokenizer_id in ("word", "word-v1"):
        return WordTokenizer()
    if tokenizer_id.startswith("tiktoken:"):
        return TiktokenTokenizer(tokenizer_id.split(":", 1)[1])
    if tokenizer_id in ("bpe", "cl100k_base"):
        return TiktokenTokenizer("cl100k_base")
    raise TokenizerUnavailableError(tokenizer_id, "unknown tokenizer id")


def count_tokens(texts: Sequence[str], tokenizer: Tokenizer | None = None) -> int:
    """Total token count of ``texts``.

    Counts are additive by definition: the count of a concatenation is the
    sum of the parts, with no per-boundary correction.
    """
    tok = tokenizer or WordTokenizer()
    return sum(tok.count(t) for t in texts)
