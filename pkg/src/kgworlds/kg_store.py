"""Knowledge-graph model, JSON-lines ingestion, entity filtering and type labels.

Entities file (one JSON object per line)::

    {"id": "Q24639", "label": "Vancouver", "aliases": [], "instance_of": ["Q1"], "flags": []}

Facts file::

    {"subject": "Q24639", "property": "P17", "property_label": "country",
     "object": {"entity": "Q16"}, "qualifiers": []}
    {"subject": "Q5", "property": "P569", "property_label": "date of birth",
     "object": {"literal": {"kind": "timestamp", "value": "1935-01-15"}}, "qualifiers": []}

Qualifiers are ``{"property", "property_label", "value": {"kind", "value"}}``.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

LITERAL_KINDS = ("timestamp", "quantity", "string")
TYPE_DEPTH_CAP = 5


class KGError(ValueError):
    pass


class IngestError(KGError):
    def __init__(self, source: str, line_no: int, message: str):
        self.source = source
        self.line_no = line_no
        super().__init__(f"{source}:{line_no}: {message}")


class DanglingReferenceError(KGError):
    def __init__(self, missing: Iterable[str]):
        self.missing = sorted(set(missing))
        super().__init__(f"facts reference unknown entities: {', '.join(self.missing)}")


class UnresolvedTypeError(KGError):
    def __init__(self, entity: str, partial: str):
        self.entity = entity
        self.partial = partial
        super().__init__(f"type label of {entity} did not resolve within depth cap: {partial!r}")


@dataclass(frozen=True, order=True)
class Literal:
    kind: str
    value: str

    def __post_init__(self):
        if self.kind not in LITERAL_KINDS:
            raise KGError(f"unknown literal kind {self.kind!r}")

    def to_record(self) -> dict:
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class Qualifier:
    relation: str
    relation_label: str
    value: Literal

    def to_record(self) -> dict:
        return {
            "property": self.relation,
            "property_label": self.relation_label,
            "value": self.value.to_record(),
        }


@dataclass(frozen=True)
class Entity:
    id: str
    label: str
    type_ids: tuple[str, ...] = ()
    aliases: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()

    @property
    def is_named(self) -> bool:
        return bool(self.label) and is_named_entity(self.label)

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "label": self.label,
            "aliases": list(self.aliases),
            "instance_of": list(self.type_ids),
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class Fact:
    """A directed (subject, relation, object) triple with optional qualifiers.

    ``fid`` is a content hash of the fact as first ingested.  Perturbations
    that rewrite literal values keep it, so a fact can be followed from the
    real-mapped universe into the synth-mapped one.
    """

    subject: str
    relation: str
    relation_label: str
    object: str | Literal
    qualifiers: tuple[Qualifier, ...] = ()
    fid: str = ""

    def __post_init__(self):
        if not self.fid:
            digest = hashlib.sha1(self.canonical_json().encode()).hexdigest()[:16]
            object.__setattr__(self, "fid", "F" + digest)

    @property
    def is_entity_fact(self) -> bool:
        return isinstance(self.object, str)

    def endpoints(self) -> tuple[str, ...]:
        if isinstance(self.object, str):
            return (self.subject, self.object)
        return (self.subject,)

    def other(self, node: str) -> str:
        assert isinstance(self.object, str)
        return self.object if node == self.subject else self.subject

    def to_record(self) -> dict:
        if isinstance(self.object, str):
            obj = {"entity": self.object}
        else:
            obj = {"literal": self.object.to_record()}
        return {
            "subject": self.subject,
            "property": self.relation,
            "property_label": self.relation_label,
            "object": obj,
            "qualifiers": [q.to_record() for q in self.qualifiers],
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, ensure_ascii=False)

    def timestamps(self) -> list[Literal]:
        out = [q.value for q in self.qualifiers if q.value.kind == "timestamp"]
        if isinstance(self.object, Literal) and self.object.kind == "timestamp":
            out.insert(0, self.object)
        return out


def _fact_sort_key(f: Fact):
    return (f.subject, f.relation, f.canonical_json())


@dataclass(frozen=True)
class KnowledgeGraph:
    """Immutable entity/fact store.  Build with :meth:`build`, never mutate."""

    entities: Mapping[str, Entity]
    facts: tuple[Fact, ...]
    relation_defs: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def build(cls, entities: Iterable[Entity], facts: Iterable[Fact],
              relation_defs: Mapping[str, str] | None = None) -> "KnowledgeGraph":
        ents: dict[str, Entity] = {}
        for e in sorted(entities, key=lambda e: e.id):
            if not e.id:
                raise KGError("entity with empty id")
            if e.id in ents:
                raise KGError(f"duplicate entity id {e.id}")
            ents[e.id] = e
        missing = [x for f in facts for x in f.endpoints() if x not in ents]
        if missing:
            raise DanglingReferenceError(missing)
        unique = {f.canonical_json(): f for f in facts}
        ordered = tuple(sorted(unique.values(), key=_fact_sort_key))
        defs = dict(sorted((relation_defs or {}).items()))
        return cls(ents, ordered, defs)

    def __len__(self):
        return len(self.entities)

    def label(self, eid: str) -> str:
        return self.entities[eid].label

    @cached_property
    def fact_index(self) -> dict[str, Fact]:
        return {f.fid: f for f in self.facts}

    @cached_property
    def incident(self) -> dict[str, tuple[Fact, ...]]:
        """Entity-object facts touching each entity, either direction."""
        acc: dict[str, list[Fact]] = {eid: [] for eid in self.entities}
        for f in self.facts:
            if f.is_entity_fact:
                acc[f.subject].append(f)
                if f.object != f.subject:
                    acc[f.object].append(f)
        return {k: tuple(v) for k, v in acc.items()}

    @cached_property
    def literal_facts(self) -> dict[str, tuple[Fact, ...]]:
        acc: dict[str, list[Fact]] = {}
        for f in self.facts:
            if not f.is_entity_fact:
                acc.setdefault(f.subject, []).append(f)
        return {k: tuple(v) for k, v in acc.items()}

    @cached_property
    def adjacency(self) -> dict[str, frozenset[str]]:
        """Undirected neighbor sets; parallel facts collapse, self-loops drop."""
        adj: dict[str, set[str]] = {eid: set() for eid in self.entities}
        for f in self.facts:
            if f.is_entity_fact and f.object != f.subject:
                adj[f.subject].add(f.object)
                adj[f.object].add(f.subject)
        return {k: frozenset(v) for k, v in adj.items()}

    @cached_property
    def named_label_index(self) -> dict[str, str]:
        """Label of each named entity -> smallest id carrying it."""
        out: dict[str, str] = {}
        for eid, e in self.entities.items():
            if e.is_named and e.label not in out:
                out[e.label] = eid
        return out

    def subgraph(self, entity_ids: Iterable[str], facts: Iterable[Fact] | None = None) -> "KnowledgeGraph":
        keep = set(entity_ids)
        if facts is None:
            facts = [f for f in self.facts if all(x in keep for x in f.endpoints())]
        else:
            facts = [f for f in facts if all(x in keep for x in f.endpoints())]
        return KnowledgeGraph.build((self.entities[e] for e in keep), facts, self.relation_defs)

    def with_literal_facts(self, parent: "KnowledgeGraph") -> "KnowledgeGraph":
        """Add every literal-object fact the parent holds for entities in this graph."""
        extra = [f for eid in self.entities for f in parent.literal_facts.get(eid, ())]
        return KnowledgeGraph.build(self.entities.values(), list(self.facts) + extra, self.relation_defs)

    def entity_lines(self) -> list[str]:
        return [json.dumps(e.to_record(), ensure_ascii=False, sort_keys=True) for e in self.entities.values()]

    def fact_lines(self) -> list[str]:
        # the id is stored because it survives edits (date shifts) that change the content
        return [json.dumps({**f.to_record(), "id": f.fid}, sort_keys=True, ensure_ascii=False) for f in self.facts]

    def dumps(self) -> str:
        parts = self.entity_lines() + ["--"] + self.fact_lines() + ["--",
                json.dumps(dict(self.relation_defs), sort_keys=True, ensure_ascii=False)]
        return "\n".join(parts) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "entities.jsonl").write_text("".join(x + "\n" for x in self.entity_lines()), encoding="utf-8")
        (d / "facts.jsonl").write_text("".join(x + "\n" for x in self.fact_lines()), encoding="utf-8")
        (d / "relations.json").write_text(
            json.dumps(dict(self.relation_defs), indent=1, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8")


# --- ingestion -------------------------------------------------------------

def _literal(obj, where) -> Literal:
    if not isinstance(obj, dict) or set(obj) - {"kind", "value"} or "kind" not in obj or "value" not in obj:
        raise where("literal must be {kind, value}")
    if obj["kind"] not in LITERAL_KINDS:
        raise where(f"unknown literal kind {obj['kind']!r}")
    return Literal(obj["kind"], str(obj["value"]))


def _parse_entity(rec, where) -> Entity:
    if not isinstance(rec, dict):
        raise where("expected a JSON object")
    for key in ("id", "label"):
        if key not in rec:
            raise where(f"missing key {key!r}")
    if not isinstance(rec["id"], str) or not rec["id"]:
        raise where("id must be a non-empty string")
    lists = {}
    for key in ("aliases", "instance_of", "flags"):
        val = rec.get(key, [])
        if not isinstance(val, list) or not all(isinstance(x, str) for x in val):
            raise where(f"{key} must be a list of strings")
        lists[key] = tuple(val)
    return Entity(rec["id"], rec["label"] or "", lists["instance_of"], lists["aliases"], lists["flags"])


def _parse_fact(rec, where) -> Fact:
    if not isinstance(rec, dict):
        raise where("expected a JSON object")
    for key in ("subject", "property", "object"):
        if key not in rec:
            raise where(f"missing key {key!r}")
    obj = rec["object"]
    if isinstance(obj, dict) and set(obj) == {"entity"} and isinstance(obj["entity"], str):
        target: str | Literal = obj["entity"]
    elif isinstance(obj, dict) and set(obj) == {"literal"}:
        target = _literal(obj["literal"], where)
    else:
        raise where("object must be {entity: id} or {literal: {kind, value}}")
    quals = []
    for q in rec.get("qualifiers", []) or []:
        if not isinstance(q, dict) or "property" not in q or "value" not in q:
            raise where("qualifier must carry property and value")
        quals.append(Qualifier(q["property"], q.get("property_label", q["property"]), _literal(q["value"], where)))
    fid = rec.get("id") or ""
    if not isinstance(fid, str):
        raise where("fact id must be a string")
    return Fact(rec["subject"], rec["property"], rec.get("property_label", rec["property"]),
                target, tuple(sorted(quals, key=lambda q: (q.relation, q.value))), fid)


def _records(lines: Iterable[str], source: str):
    for no, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        def where(msg, _no=no):
            return IngestError(source, _no, msg)
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise IngestError(source, no, f"invalid JSON ({exc.msg})") from None
        yield rec, where


def ingest_kg(entities_stream: Iterable[str], facts_stream: Iterable[str],
              relation_defs: Mapping[str, str] | None = None) -> KnowledgeGraph:
    """Parse line-delimited entity and fact records into a graph.

    Raises :class:`IngestError` (with line number) on malformed records and
    :class:`DanglingReferenceError` when a fact names an unknown entity.
    """
    entities = [_parse_entity(rec, where) for rec, where in _records(entities_stream, "entities")]
    facts = [_parse_fact(rec, where) for rec, where in _records(facts_stream, "facts")]
    return KnowledgeGraph.build(entities, facts, relation_defs)


def load_kg(directory: str | Path) -> KnowledgeGraph:
    d = Path(directory)
    defs = {}
    if (d / "relations.json").exists():
        defs = json.loads((d / "relations.json").read_text(encoding="utf-8"))
    with open(d / "entities.jsonl", encoding="utf-8") as ef, open(d / "facts.jsonl", encoding="utf-8") as ff:
        return ingest_kg(ef, ff, defs)


# --- naming, filtering, types ---------------------------------------------

def is_named_entity(label: str, type_labels: Iterable[str] = ()) -> bool:
    """True iff the first alphabetic character of ``label`` is uppercase."""
    for ch in label:
        if ch.isalpha():
            return ch.isupper()
    return False


def default_denylists() -> dict[str, list[str]]:
    text = resources.files("kgworlds").joinpath("data/denylists.json").read_text(encoding="utf-8")
    return json.loads(text)


_DIGIT = re.compile(r"[0-9]")


def _type_closure(eid: str, kg: KnowledgeGraph, depth: int = TYPE_DEPTH_CAP) -> set[str]:
    seen: set[str] = set()
    frontier = list(kg.entities[eid].type_ids)
    for _ in range(depth):
        nxt = []
        for t in frontier:
            if t in seen:
                continue
            seen.add(t)
            if t in kg.entities:
                nxt.extend(kg.entities[t].type_ids)
        frontier = nxt
    return seen


def filter_entities(kg: KnowledgeGraph, denylists: Mapping[str, Iterable[str]] | None = None) -> KnowledgeGraph:
    """Drop time terms, bookkeeping entities, unlabeled entities and labels with digits."""
    deny = denylists if denylists is not None else default_denylists()
    time_types = set(deny.get("time_types", ()))
    bookkeeping = set(deny.get("bookkeeping_types", ()))
    drop_flags = set(deny.get("flags", ("time_term", "bookkeeping")))
    keep = []
    for eid, e in kg.entities.items():
        if not e.label.strip() or _DIGIT.search(e.label) or drop_flags & set(e.flags):
            continue
        closure = _type_closure(eid, kg)
        if closure & time_types or closure & bookkeeping:
            continue
        keep.append(eid)
    return kg.subgraph(keep)


_TOKEN = re.compile(r"\S+")


def _named_mentions(text: str, kg: KnowledgeGraph, max_words: int = 8) -> list[tuple[int, int, str]]:
    """Leftmost-longest, non-overlapping mentions of named-entity labels in ``text``."""
    index = kg.named_label_index
    tokens = [(m.start(), m.end()) for m in _TOKEN.finditer(text)]
    out = []
    i = 0
    while i < len(tokens):
        hit = None
        for j in range(min(len(tokens), i + max_words), i, -1):
            start, end = tokens[i][0], tokens[j - 1][1]
            span = text[start:end]
            stripped = span.rstrip(",.;:)")
            if stripped in index:
                hit = (start, start + len(stripped), index[stripped], j)
                break
        if hit:
            out.append(hit[:3])
            i = hit[3]
        else:
            i += 1
    return out


def _join_labels(labels: list[str]) -> str:
    labels = [x for x in dict.fromkeys(labels) if x]
    if len(labels) <= 1:
        return labels[0] if labels else ""
    return ", ".join(labels[:-1]) + " and " + labels[-1]


def resolve_type_label(entity: str, kg: KnowledgeGraph, depth_cap: int = TYPE_DEPTH_CAP) -> str:
    """Instance-of label of ``entity`` with named entities replaced by their own types.

    ``city in British Columbia`` becomes ``city in province of country`` when
    British Columbia is a ``province of Canada`` and Canada is a ``country``.
    """

    def type_of(eid: str, depth: int) -> str:
        labels = [kg.entities[t].label for t in kg.entities[eid].type_ids if t in kg.entities]
        return _join_labels([resolve_text(lbl, depth) for lbl in labels])

    def resolve_text(text: str, depth: int) -> str:
        mentions = _named_mentions(text, kg)
        if not mentions:
            return text
        if depth >= depth_cap:
            raise UnresolvedTypeError(entity, text)
        out = text
        for start, end, eid in reversed(mentions):
            out = out[:start] + type_of(eid, depth + 1) + out[end:]
        return out

    if entity not in kg.entities:
        raise KGError(f"unknown entity {entity}")
    return type_of(entity, 0)
