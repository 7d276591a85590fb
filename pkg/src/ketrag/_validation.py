"""Input checks for the estimator API."""
from __future__ import annotations

from collections.abc import Iterable


def check_documents(X) -> list[tuple[str, str]]:
    """Accept strings or ``(doc_id, text)`` pairs; strings get ids ``d0, d1, ...``."""
    if isinstance(X, (str, bytes)) or not isinstance(X, Iterable):
        raise TypeError("X must be an iterable of documents, not a single string")
    docs = []
    for i, item in enumerate(X):
        if isinstance(item, str):
            docs.append((f"d{i}", item))
        elif isinstance(item, (tuple, list)) and len(item) == 2 and isinstance(item[1], str):
            docs.append((str(item[0]), item[1]))
        else:
            raise TypeError(f"document {i} must be a string or a (doc_id, text) pair, got {type(item).__name__}")
    if not docs:
        raise ValueError("X contains no documents")
    ids = [d for d, _ in docs]
    if len(set(ids)) != len(ids):
        raise ValueError("document ids must be unique")
    return docs


def check_questions(X) -> list[str]:
    if isinstance(X, str):
        return [X]
    out = list(X)
    bad = [i for i, q in enumerate(out) if not isinstance(q, str)]
    if bad:
        raise TypeError(f"questions must be strings (bad positions: {bad[:5]})")
    return out
