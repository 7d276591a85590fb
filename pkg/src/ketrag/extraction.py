"""Knowledge-graph skeleton construction from chunks.

Extractors turn a chunk into raw entity and relationship records; the
``kg_index`` reduction deduplicates them, links every item to the chunks it
came from and embeds the descriptions.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import string
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

from .corpus import Chunk, default_stopwords, split_sentences
from .embedding import EmbeddingProvider, EmbeddingStore, embed_batch
from .exceptions import ExtractionParseError, KetRagError
from .tokenizer import Tokenizer, WordTokenizer

logger = logging.getLogger(__name__)

PLACEHOLDER = "{input_text}"


class RawEntity(NamedTuple):
    name: str
    type_label: str
    description: str


class RawRelation(NamedTuple):
    source: str
    target: str
    description: str


@dataclass
class Entity:
    entity_id: str
    name: str
    type_label: str
    description: str
    description_tokens: int
    embedding_key: str

    def to_dict(self) -> dict:
        return {
            "kind": "entity",
            "id": self.entity_id,
            "name": self.name,
            "type": self.type_label,
            "description": self.description,
            "description_tokens": self.description_tokens,
            "embedding_key": self.embedding_key,
        }


@dataclass
class Relation:
    relation_id: str
    source: str
    target: str
    description: str
    description_tokens: int
    embedding_key: str
    self_loop: bool = False

    def to_dict(self) -> dict:
        return {
            "kind": "relation",
            "id": self.relation_id,
            "source": self.source,
            "target": self.target,
            "description": self.description,
            "description_tokens": self.description_tokens,
            "embedding_key": self.embedding_key,
            "self_loop": self.self_loop,
        }


@dataclass
class SkeletonGraph:
    """Entities and relations plus their links to text units.

    Links point at chunk ids until :func:`ketrag.indexer.rewire_skeleton`
    moves them to sub-chunk ids (``granularity`` records which).
    """

    entities: list[Entity] = field(default_factory=list)
    relations: list[Relation] = field(default_factory=list)
    entity_links: dict[str, tuple] = field(default_factory=dict)
    relation_links: dict[str, tuple] = field(default_factory=dict)
    granularity: str = "chunk"

    def __len__(self):
        return len(self.entities)

    @property
    def is_empty(self) -> bool:
        return not self.entities

    def entity(self, entity_id: str) -> Entity:
        return self._entity_map()[entity_id]

    def _entity_map(self) -> dict[str, Entity]:
        return {e.entity_id: e for e in self.entities}

    def linked_units(self) -> set:
        units = set()
        for links in list(self.entity_links.values()) + list(self.relation_links.values()):
            units.update(links)
        return units


def normalize_entity_name(name: str) -> str:
    """Uppercase and collapse whitespace; the dedup key for entity names."""
    return " ".join(name.upper().split())


# --------------------------------------------------------------------------
# record format

_RECORD_RE = re.compile(r'^\(\s*"?(entity|relationship)"?\s*\|(.*)\)$', re.IGNORECASE)
_IGNORED_LINES = {"NONE", "<|COMPLETE|>", "OUTPUT:"}


def parse_records(text: str) -> tuple[list[RawEntity], list[RawRelation]]:
    """Parse ``("entity"|name|type|desc)`` and
    ``("relationship"|source|target|desc)`` records, one per line (``##`` also
    separates records). Any other non-blank line raises
    :class:`ExtractionParseError`."""
    entities: list[RawEntity] = []
    relations: list[RawRelation] = []
    for piece in re.split(r"\n|##", text):
        line = piece.strip().rstrip(",")
        if not line or line.upper() in _IGNORED_LINES:
            continue
        m = _RECORD_RE.match(line)
        if not m:
            raise ExtractionParseError(f"unparseable extractor line: {line[:80]!r}")
        fields = [f.strip().strip('"').strip() for f in m.group(2).split("|")]
        if len(fields) < 3 or not fields[0]:
            raise ExtractionParseError(f"record with missing fields: {line[:80]!r}")
        if m.group(1).lower() == "entity":
            entities.append(RawEntity(fields[0], fields[1], fields[2]))
        else:
            if not fields[1]:
                raise ExtractionParseError(f"relationship without target: {line[:80]!r}")
            relations.append(RawRelation(fields[0], fields[1], fields[2]))
    return entities, relations


def format_records(entities: Sequence[RawEntity], relations: Sequence[RawRelation]) -> str:
    lines = [f'("entity"|{e.name}|{e.type_label}|{e.description})' for e in entities]
    lines += [f'("relationship"|{r.source}|{r.target}|{r.description})' for r in relations]
    return "\n".join(lines)


# --------------------------------------------------------------------------
# extractors


class TripletExtractor(Protocol):
    name: str
    deterministic: bool

    def extract(self, text: str) -> tuple[list[RawEntity], list[RawRelation]]: ...


_STRIP = string.punctuation + "“”‘’"


class MockExtractor:
    """Offline extractor driven by capitalization.

    Entities are maximal runs of capitalized words inside a sentence
    (punctuation attached to a word closes the run), with leading stopwords
    dropped, uppercased and typed ``MOCK``. An entity's description is the
    sentences mentioning it. Every pair of distinct entities co-occurring in a
    sentence yields one relation in order of appearance, described by that
    sentence.
    """

    name = "mock-v1"
    deterministic = True

    def __init__(self, stopwords=None):
        self.stopwords = frozenset(stopwords) if stopwords is not None else default_stopwords()

    def _mentions(self, sentence: str) -> list[str]:
        groups: list[list[str]] = []
        current: list[str] = []
        for token in sentence.split():
            core = token.strip(_STRIP)
            leading = token[: len(token) - len(token.lstrip(_STRIP))]
            trailing = token[len(token.rstrip(_STRIP)) :]
            if leading and current:
                groups.append(current)
                current = []
            if core and core[0].isupper():
                current.append(core)
                if trailing:
                    groups.append(current)
                    current = []
            elif current:
                groups.append(current)
                current = []
        if current:
            groups.append(current)
        names = []
        for g in groups:
            while g and g[0].lower() in self.stopwords:
                g = g[1:]
            if g:
                name = normalize_entity_name(" ".join(g))
                if name not in names:
                    names.append(name)
        return names

    def extract(self, text: str) -> tuple[list[RawEntity], list[RawRelation]]:
        descriptions: dict[str, list[str]] = {}
        pair_desc: dict[tuple[str, str], list[str]] = {}
        for sentence in split_sentences(text):
            names = self._mentions(sentence)
            for name in names:
                descriptions.setdefault(name, [])
                if sentence not in descriptions[name]:
                    descriptions[name].append(sentence)
            for i, a in enumerate(names):
                for b in names[i + 1 :]:
                    pair_desc.setdefault((a, b), []).append(sentence)
        entities = [RawEntity(n, "MOCK", " ".join(d)) for n, d in descriptions.items()]
        relations = [RawRelation(a, b, " ".join(d)) for (a, b), d in pair_desc.items()]
        return entities, relations

    def __repr__(self):
        return "MockExtractor()"


def load_prompt(name: str) -> str:
    """A shipped prompt template: ``entity_extraction``, ``relation_extraction`` or ``answer``."""
    return resources.files("ketrag").joinpath(f"data/prompts/{name}.txt").read_text(encoding="utf-8")


def template_tokens(template: str, tokenizer: Tokenizer | None = None) -> int:
    """Token count of a template without its input placeholder."""
    return (tokenizer or WordTokenizer()).count(template.replace(PLACEHOLDER, ""))


def fill(template: str, text: str) -> str:
    return template.replace(PLACEHOLDER, text)


class ExtractionCache:
    """Raw extractor output keyed by (extractor name, chunk content hash), as JSON lines."""

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self._data: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with self.path.open(encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        self._data[rec["key"]] = rec["output"]

    @staticmethod
    def key(extractor_name: str, text: str) -> str:
        digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
        return f"{extractor_name}:{digest}"

    def get(self, extractor_name: str, text: str):
        return self._data.get(self.key(extractor_name, text))

    def put(self, extractor_name: str, text: str, output: dict) -> None:
        k = self.key(extractor_name, text)
        with self._lock:
            self._data[k] = output
            if self.path:
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"key": k, "output": output}, sort_keys=True) + "\n")

    def __len__(self):
        return len(self._data)


class LLMExtractor:
    """Two-pass (entities, then relationships) extraction through the gateway."""

    deterministic = False

    def __init__(self, gateway, entity_template=None, relation_template=None, cache=None, max_output_tokens=2000):
        self.gateway = gateway
        self.entity_template = entity_template or load_prompt("entity_extraction")
        self.relation_template = relation_template or load_prompt("relation_extraction")
        self.cache = cache
        self.max_output_tokens = max_output_tokens
        self.name = f"llm:{gateway.config.chat_model}"

    def raw_outputs(self, text: str) -> dict:
        if self.cache is not None:
            hit = self.cache.get(self.name, text)
            if hit is not None:
                return hit
        ent, _ = self.gateway.chat_complete(
            None, fill(self.entity_template, text), self.max_output_tokens, stage="extraction"
        )
        rel, _ = self.gateway.chat_complete(
            None, fill(self.relation_template, text), self.max_output_tokens, stage="extraction"
        )
        out = {"entity": ent, "relation": rel}
        return out

    def extract(self, text: str):
        raw = self.raw_outputs(text)
        entities, _ = parse_records(raw["entity"])
        _, relations = parse_records(raw["relation"])
        if self.cache is not None and self.cache.get(self.name, text) is None:
            self.cache.put(self.name, text, raw)
        return entities, relations


class MeteredExtractor:
    """Wraps an extractor and meters the input tokens the two real prompts
    would consume for every chunk it sees."""

    def __init__(self, inner, tokenizer=None, entity_template=None, relation_template=None):
        self.inner = inner
        self.tokenizer = tokenizer or WordTokenizer()
        self.entity_template = entity_template or load_prompt("entity_extraction")
        self.relation_template = relation_template or load_prompt("relation_extraction")
        self.name = inner.name
        self.deterministic = inner.deterministic
        self.input_tokens = 0
        self.calls = 0
        self._lock = threading.Lock()

    def extract(self, text: str):
        used = self.tokenizer.count(fill(self.entity_template, text)) + self.tokenizer.count(
            fill(self.relation_template, text)
        )
        with self._lock:
            self.input_tokens += used
            self.calls += 1
        return self.inner.extract(text)


def get_extractor(name: str, gateway=None, cache=None, stopwords=None) -> TripletExtractor:
    if name in ("mock", "mock-v1"):
        return MockExtractor(stopwords)
    if name == "llm" or name.startswith("llm:"):
        if gateway is None:
            raise KetRagError("the llm extractor needs a configured gateway")
        return LLMExtractor(gateway, cache=cache)
    raise KetRagError(f"unknown extractor {name!r}")


# --------------------------------------------------------------------------
# KG-Index


def extract_chunk(extractor: TripletExtractor, chunk: Chunk, diagnostics: list | None = None):
    """Run the extractor on one chunk, retrying once on unparseable output.

    A second failure yields an empty extraction plus a diagnostics record.
    """
    last = None
    for _ in range(2):
        try:
            return extractor.extract(chunk.text)
        except ExtractionParseError as exc:
            last = exc
            logger.info("chunk %d: unparseable extraction, retrying", chunk.chunk_id)
    logger.warning("chunk %d: extraction failed twice: %s", chunk.chunk_id, last)
    if diagnostics is not None:
        diagnostics.append({"stage": "extraction", "chunk_id": chunk.chunk_id, "error": str(last)})
    return [], []


def _join_unique(parts: list[str]) -> str:
    seen = []
    for p in parts:
        p = p.strip()
        if p and p not in seen:
            seen.append(p)
    return "\n".join(seen)


def kg_index(
    chunks: Sequence[Chunk],
    extractor: TripletExtractor,
    provider: EmbeddingProvider | None = None,
    store: EmbeddingStore | None = None,
    tokenizer: Tokenizer | None = None,
    max_workers: int = 1,
    diagnostics: list | None = None,
) -> SkeletonGraph:
    """Extract, deduplicate and link entities and relations over ``chunks``.

    Entities merge on (normalized name, type); relations merge on their
    endpoint entity ids. Merged descriptions are the distinct source
    descriptions joined by newlines, in chunk order. Extraction may run on
    ``max_workers`` threads; the merge is a single ordered reduction.
    """
    tok = tokenizer or WordTokenizer()
    chunks = list(chunks)
    if max_workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(lambda c: extract_chunk(extractor, c, diagnostics), chunks))
    else:
        results = [extract_chunk(extractor, c, diagnostics) for c in chunks]

    ent_ids: dict[tuple[str, str], str] = {}
    ent_name: dict[str, str] = {}
    ent_type: dict[str, str] = {}
    ent_desc: dict[str, list[str]] = {}
    ent_links: dict[str, list[int]] = {}
    rel_ids: dict[tuple[str, str], str] = {}
    rel_desc: dict[str, list[str]] = {}
    rel_links: dict[str, list[int]] = {}
    rel_ends: dict[str, tuple[str, str]] = {}

    for chunk, (raw_entities, raw_relations) in zip(chunks, results):
        local: dict[str, str] = {}
        for e in raw_entities:
            name = normalize_entity_name(e.name)
            if not name:
                continue
            key = (name, e.type_label.strip().upper())
            eid = ent_ids.get(key)
            if eid is None:
                eid = ent_ids[key] = f"e{len(ent_ids)}"
                ent_name[eid], ent_type[eid] = key
                ent_desc[eid], ent_links[eid] = [], []
            ent_desc[eid].append(e.description)
            if chunk.chunk_id not in ent_links[eid]:
                ent_links[eid].append(chunk.chunk_id)
            local.setdefault(name, eid)
        for r in raw_relations:
            src = local.get(normalize_entity_name(r.source))
            tgt = local.get(normalize_entity_name(r.target))
            if src is None or tgt is None:
                if diagnostics is not None:
                    diagnostics.append(
                        {
                            "stage": "extraction",
                            "chunk_id": chunk.chunk_id,
                            "warning": f"relation {r.source!r}->{r.target!r} names an unextracted entity; dropped",
                        }
                    )
                continue
            rid = rel_ids.get((src, tgt))
            if rid is None:
                rid = rel_ids[(src, tgt)] = f"r{len(rel_ids)}"
                rel_ends[rid] = (src, tgt)
                rel_desc[rid], rel_links[rid] = [], []
            rel_desc[rid].append(r.description)
            if chunk.chunk_id not in rel_links[rid]:
                rel_links[rid].append(chunk.chunk_id)

    entities = []
    for eid in ent_ids.values():
        desc = _join_unique(ent_desc[eid])
        entities.append(Entity(eid, ent_name[eid], ent_type[eid], desc, tok.count(desc), f"entity:{eid}"))
    relations = []
    for rid, (src, tgt) in rel_ends.items():
        desc = _join_unique(rel_desc[rid])
        relations.append(Relation(rid, src, tgt, desc, tok.count(desc), f"relation:{rid}", self_loop=src == tgt))

    if provider is not None and store is not None:
        texts = [e.description or e.name for e in entities]
        texts += [r.description or f"{ent_name[r.source]} {ent_name[r.target]}" for r in relations]
        keys = [e.embedding_key for e in entities] + [r.embedding_key for r in relations]
        if texts:
            store.add_many(keys, embed_batch(provider, texts))

    return SkeletonGraph(
        entities=entities,
        relations=relations,
        entity_links={eid: tuple(v) for eid, v in ent_links.items()},
        relation_links={rid: tuple(v) for rid, v in rel_links.items()},
        granularity="chunk",
    )
