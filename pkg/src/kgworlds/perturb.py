"""Surface-form perturbation: name-dependency DAG, level-order renaming, date shift."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .kg_store import Fact, KGError, KnowledgeGraph, Literal, Qualifier
from .ports import NameGenerator, TransportError
from .sampler import Universe
from .timestamps import TimestampError, shift_year

DEFAULT_DELTA = 39
RETRY_CAP = 5


class PerturbationError(KGError):
    pass


class RenameError(PerturbationError):
    def __init__(self, entity: str, message: str):
        self.entity = entity
        super().__init__(f"{entity}: {message}")


class PlanCompletenessError(PerturbationError):
    pass


def contains_word(haystack: str, needle: str) -> bool:
    """``needle`` occurs in ``haystack`` starting at a word boundary (case-sensitive)."""
    return bool(needle) and re.search(r"(?<!\w)" + re.escape(needle), haystack) is not None


def contains_whole(haystack: str, needle: str, flags: int = 0) -> bool:
    return bool(needle) and re.search(r"(?<!\w)" + re.escape(needle) + r"(?!\w)", haystack, flags) is not None


def word_spans(text: str) -> set[str]:
    """Every substring of ``text`` that starts and ends on a word boundary."""
    starts = [m.start() for m in re.finditer(r"(?<!\w)\w", text)]
    ends = [m.end() for m in re.finditer(r"\w(?!\w)", text)]
    return {text[a:b] for a in starts for b in ends if b > a}


@dataclass(frozen=True)
class DependencyGraph:
    """Edges ``(u, r, v)``: u's label contains v's label and a fact links them.

    v must be renamed before u, so u's new name can reuse v's.
    """

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str, str], ...]

    def parents(self, u: str) -> list[tuple[str, str]]:
        return [(v, r) for (x, r, v) in self.edges if x == u]

    def levels(self) -> list[list[str]]:
        """Longest-path layering: level 0 depends on nothing, level d+1 on level <= d."""
        deps: dict[str, set[str]] = {n: set() for n in self.nodes}
        for u, _, v in self.edges:
            deps[u].add(v)
        level: dict[str, int] = {}
        state: dict[str, int] = {}

        def visit(n: str) -> int:
            if n in level:
                return level[n]
            if state.get(n) == 1:
                raise PerturbationError(f"dependency cycle through {n}")
            state[n] = 1
            lvl = 1 + max((visit(v) for v in deps[n]), default=-1)
            level[n] = lvl
            return lvl

        for n in self.nodes:
            visit(n)
        out: list[list[str]] = [[] for _ in range(1 + max(level.values(), default=-1))]
        for n in sorted(self.nodes):
            out[level[n]].append(n)
        return out


def build_dependency_graph(universe: Universe) -> DependencyGraph:
    graph = universe.graph
    named = sorted(universe.named)
    named_set = set(named)
    label = {e: graph.entities[e].label for e in named}
    relation: dict[tuple[str, str], str] = {}
    for f in graph.facts:
        if not f.is_entity_fact or f.subject == f.object:
            continue
        a, b = f.subject, f.object
        if a in named_set and b in named_set:
            for key in ((a, b), (b, a)):
                if key not in relation or f.relation_label < relation[key]:
                    relation[key] = f.relation_label
    edges = []
    for (u, v), rel in sorted(relation.items()):
        lu, lv = label[u], label[v]
        if not contains_word(lu, lv):
            continue
        if lu == lv and u > v:
            continue  # equal labels: keep only smaller id -> larger id
        edges.append((u, rel, v))
    return DependencyGraph(tuple(named), tuple(edges))


@dataclass(frozen=True)
class RenamePlan:
    order: tuple[tuple[str, ...], ...]
    mapping: Mapping[str, str]
    delta: int = DEFAULT_DELTA
    real_labels: Mapping[str, str] = field(default_factory=dict)
    retries: Mapping[str, int] = field(default_factory=dict)

    def level_of(self) -> dict[str, int]:
        return {e: i for i, lvl in enumerate(self.order) for e in lvl}

    def synth_to_real(self) -> dict[str, str]:
        return {s: self.real_labels[e] for e, s in self.mapping.items()}

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"id": e, "real_label": self.real_labels[e], "synth_label": s},
                            ensure_ascii=False, sort_keys=True) for e, s in sorted(self.mapping.items())]
        (d / "mapping.jsonl").write_text("".join(x + "\n" for x in lines), encoding="utf-8")
        meta = {"order": [list(x) for x in self.order], "delta": self.delta,
                "retries": dict(sorted(self.retries.items()))}
        (d / "plan.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "RenamePlan":
        d = Path(directory)
        rows = [json.loads(x) for x in (d / "mapping.jsonl").read_text(encoding="utf-8").splitlines() if x]
        meta = json.loads((d / "plan.json").read_text())
        return cls(tuple(tuple(x) for x in meta["order"]), {r["id"]: r["synth_label"] for r in rows},
                   meta["delta"], {r["id"]: r["real_label"] for r in rows}, meta.get("retries", {}))


class _LabelGuard:
    """Rejects candidates that clash with real labels or earlier synthetic ones."""

    def __init__(self, universe: Universe, proper: list[str]):
        g = universe.graph
        self.real_all = sorted({e.label for e in g.entities.values() if e.label})
        self.real_lower = {x.casefold() for x in self.real_all}
        self.proper_real = {g.entities[e].label for e in proper}
        self.taken: set[str] = set()
        self.real_spans = set().union(*(word_spans(x) for x in self.real_all)) if self.real_all else set()

    def problem(self, cand: str, parents: list[dict]) -> str | None:
        if not cand or not cand.strip() or "\n" in cand:
            return "empty candidate"
        key = cand.casefold()
        if key in self.real_lower:
            return "collides with a real label"
        if key in self.taken:
            return "collides with a synthetic label"
        for p in parents:
            if not contains_word(cand, p["new_label"]):
                return f"does not contain parent name {p['new_label']!r}"
        if cand in self.real_spans:
            return "occurs inside a real label"
        inside = sorted(word_spans(cand) & self.proper_real)
        if inside:
            return f"contains real name {inside[0]!r}"
        return None

    def take(self, cand: str) -> None:
        self.taken.add(cand.casefold())


def plan_renames(dep: DependencyGraph, universe: Universe, name_gen: NameGenerator,
                 delta: int = DEFAULT_DELTA, retry_cap: int = RETRY_CAP,
                 n_candidates: int = 1) -> RenamePlan:
    """Assign synthetic names level by level; parents are always named first."""
    if delta < 0:
        raise PerturbationError("delta must be non-negative")
    g = universe.graph
    levels = dep.levels()
    guard = _LabelGuard(universe, list(dep.nodes))
    mapping: dict[str, str] = {}
    retries: dict[str, int] = {}
    for level in levels:
        for eid in level:
            parents = [{"new_label": mapping[v], "type_label": universe.type_labels.get(v, ""),
                        "relation": r} for v, r in dep.parents(eid)]
            type_label = universe.type_labels.get(eid, "")
            chosen = None
            reasons = []
            for attempt in range(retry_cap + 1):
                try:
                    cands = name_gen.propose(type_label, parents, n_candidates, attempt, eid)
                except TransportError as exc:
                    raise TransportError(f"name generation for {eid}: {exc}") from exc
                for cand in cands:
                    cand = cand.strip()
                    why = guard.problem(cand, parents)
                    if why is None:
                        chosen = cand
                        break
                    reasons.append(f"{cand!r}: {why}")
                if chosen is not None:
                    retries[eid] = attempt
                    break
            if chosen is None:
                raise RenameError(eid, f"no acceptable name after {retry_cap} retries ({'; '.join(reasons[-3:])})")
            guard.take(chosen)
            mapping[eid] = chosen
    real = {e: g.entities[e].label for e in mapping}
    return RenamePlan(tuple(tuple(x) for x in levels), mapping, delta, real, retries)


def _shift_literal(lit: Literal, delta: int, fact: Fact) -> Literal:
    if lit.kind != "timestamp":
        return lit
    try:
        return Literal("timestamp", shift_year(lit.value, delta))
    except TimestampError as exc:
        raise PerturbationError(f"fact {fact.fid} ({fact.subject} {fact.relation}): {exc}") from None


def shift_fact(f: Fact, delta: int) -> Fact:
    obj = f.object if isinstance(f.object, str) else _shift_literal(f.object, delta, f)
    quals = tuple(Qualifier(q.relation, q.relation_label, _shift_literal(q.value, delta, f)) for q in f.qualifiers)
    return dataclasses.replace(f, object=obj, qualifiers=quals)


def shift_graph(graph: KnowledgeGraph, delta: int) -> KnowledgeGraph:
    if delta < 0:
        raise PerturbationError("delta must be non-negative")
    if delta == 0:
        return graph
    return KnowledgeGraph.build(graph.entities.values(), [shift_fact(f, delta) for f in graph.facts],
                                graph.relation_defs)


def shift_timestamps(universe: Universe, delta_years: int) -> Universe:
    """Add ``delta_years`` to the year of every timestamp; facts keep their ids."""
    return dataclasses.replace(universe, graph=shift_graph(universe.graph, delta_years))


def make_synth_universe(universe: Universe, plan: RenamePlan) -> Universe:
    missing = [e for e in universe.named if e not in plan.mapping]
    if missing:
        raise PlanCompletenessError(f"rename plan misses named entities: {missing[:10]}")
    labeling = {e: plan.mapping.get(e, ent.label) for e, ent in universe.graph.entities.items()}
    shifted = shift_timestamps(universe, plan.delta)
    prov = dict(universe.provenance)
    prov["perturbation"] = {"delta": plan.delta, "renamed": len(plan.mapping)}
    return Universe(shifted.graph, labeling, universe.type_labels, prov)
