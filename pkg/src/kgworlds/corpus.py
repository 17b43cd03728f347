"""Parallel page generation (synth-mapped first, then real-mapped) and its gates."""

from __future__ import annotations

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from rapidfuzz.distance import OSA

from .evaluate import answer_key
from .kg_store import Fact, Literal
from .perturb import RenamePlan, contains_whole
from .ports import LINK, EntityGuesser, PageWriter, TransportError, strip_links
from .sampler import Universe, largest_component
from .timestamps import render_timestamp

DRAFT_THRESHOLD = 0.95
PAIR_THRESHOLD = 0.85
QUARANTINE_RETRIES = 2


class GateError(RuntimeError):
    """A page failed a validation gate; ``reason`` is the short drop code."""

    def __init__(self, reason: str, detail: str = "", similarity: float | None = None):
        self.reason = reason
        self.similarity = similarity
        super().__init__(f"{reason}: {detail}" if detail else reason)


def dl_similarity(a: str, b: str) -> float:
    """1 - OSA(a, b) / max(|a|, |b|), with two empty strings counting as identical.

    Computed as one integer division so the result is the correctly rounded ratio.
    """
    n = max(len(a), len(b))
    if n == 0:
        return 1.0
    return (n - OSA.distance(a, b)) / n


# --- pages ------------------------------------------------------------------

@dataclass(frozen=True)
class SymbolicPage:
    entity: str
    text: str
    refs: tuple[tuple[str, str, tuple[int, int]], ...] = ()

    @classmethod
    def parse(cls, entity: str, text: str) -> "SymbolicPage":
        refs = tuple((m.group(2), m.group(1), (m.start(), m.end())) for m in LINK.finditer(text))
        return cls(entity, text, refs)

    @property
    def ref_ids(self) -> list[str]:
        return [r[0] for r in self.refs]

    @property
    def plain(self) -> str:
        return strip_links(self.text)


@dataclass
class PagePair:
    entity: str
    synth: SymbolicPage | None
    real: SymbolicPage | None
    draft_similarity: float | None = None
    pair_similarity: float | None = None
    pair_similarity_normalized: float | None = None
    status: str = "retained"
    reason: str = ""
    fact_ids: tuple[str, ...] = ()
    attempts: int = 1

    @property
    def retained(self) -> bool:
        return self.status == "retained"

    def drop(self, reason: str) -> None:
        self.status, self.reason = "dropped", reason

    def record(self) -> dict:
        return {"entity": self.entity, "status": self.status, "reason": self.reason,
                "draft_similarity": self.draft_similarity, "pair_similarity": self.pair_similarity,
                "pair_similarity_normalized": self.pair_similarity_normalized,
                "fact_ids": list(self.fact_ids), "attempts": self.attempts,
                "refs": sorted(set(self.synth.ref_ids)) if self.synth else []}


@dataclass
class Corpus:
    pages: dict[str, PagePair]
    titles: dict[str, dict[str, str]] = field(default_factory=dict)  # variant -> id -> title
    config: dict = field(default_factory=dict)

    @property
    def retained(self) -> list[str]:
        return sorted(e for e, p in self.pages.items() if p.retained)

    def view(self, variant: str) -> dict[str, SymbolicPage]:
        attr = {"rm": "real", "sm": "synth"}[variant]
        return {e: getattr(self.pages[e], attr) for e in self.retained}

    def hyperlink_edges(self, variant: str) -> set[tuple[str, str]]:
        keep = set(self.retained)
        edges = set()
        for e, page in self.view(variant).items():
            for ref in page.ref_ids:
                if ref in keep and ref != e:
                    edges.add((e, ref))
        return edges

    def drop_reasons(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for p in self.pages.values():
            if not p.retained:
                out[p.reason] = out.get(p.reason, 0) + 1
        return dict(sorted(out.items()))

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        for variant in ("rm", "sm"):
            vd = d / "pages" / variant
            vd.mkdir(parents=True, exist_ok=True)
            for old in vd.glob("*.md"):
                old.unlink()
            for e, page in self.view(variant).items():
                (vd / f"{e}.md").write_text(page.text + "\n", encoding="utf-8")
        manifest = {
            "thresholds": {"draft": DRAFT_THRESHOLD, "pair": PAIR_THRESHOLD},
            "counts": {"candidates": len(self.pages), "retained": len(self.retained)},
            "drop_reasons": self.drop_reasons(),
            "config": self.config,
            "titles": self.titles,
            "pages": [self.pages[e].record() for e in sorted(self.pages)],
        }
        (d / "corpus.json").write_text(json.dumps(manifest, indent=1, sort_keys=True, ensure_ascii=False) + "\n",
                                       encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "Corpus":
        d = Path(directory)
        manifest = json.loads((d / "corpus.json").read_text(encoding="utf-8"))
        pages = {}
        for rec in manifest["pages"]:
            e = rec["entity"]
            synth = real = None
            if rec["status"] == "retained":
                synth = SymbolicPage.parse(e, (d / "pages/sm" / f"{e}.md").read_text(encoding="utf-8")[:-1])
                real = SymbolicPage.parse(e, (d / "pages/rm" / f"{e}.md").read_text(encoding="utf-8")[:-1])
            pages[e] = PagePair(e, synth, real, rec["draft_similarity"], rec["pair_similarity"],
                                rec["pair_similarity_normalized"], rec["status"], rec["reason"],
                                tuple(rec["fact_ids"]), rec.get("attempts", 1))
        return cls(pages, manifest.get("titles", {}), manifest.get("config", {}))


# --- fact selection and rendering ---------------------------------------------

def select_fact_orientation(entity: str, universe: Universe) -> list[Fact]:
    """Majority orientation of the entity's facts; ties go to outgoing.

    Literal-valued facts count as outgoing.
    """
    g = universe.graph
    out = [f for f in g.incident.get(entity, ()) if f.subject == entity]
    out += list(g.literal_facts.get(entity, ()))
    inc = [f for f in g.incident.get(entity, ()) if f.subject != entity]
    chosen = out if len(out) >= len(inc) else inc
    return sorted(chosen, key=lambda f: f.fid)


def render_literal(lit: Literal) -> dict:
    return {"kind": lit.kind, "value": lit.value}


def render_fact(f: Fact, label: Callable[[str], str]) -> dict:
    obj = {"kind": "entity", "label": label(f.object), "id": f.object} if isinstance(f.object, str) \
        else render_literal(f.object)
    return {"fid": f.fid, "subject": label(f.subject), "relation": f.relation_label, "object": obj,
            "qualifiers": [{"relation": q.relation_label, **render_literal(q.value)} for q in f.qualifiers]}


def literal_text(lit: Literal) -> str:
    return render_timestamp(lit.value) if lit.kind == "timestamp" else lit.value


def generate_page(entity: str, facts: list[Fact], universe: Universe, writer: PageWriter) -> str:
    if not facts:
        raise ValueError(f"{entity}: no facts to write about")
    g = universe.graph
    related = sorted({x for f in facts for x in f.endpoints() if x != entity})
    try:
        return writer.write_page(universe.label(entity), universe.type_labels.get(entity, ""),
                                 [render_fact(f, universe.label) for f in facts],
                                 {f.relation_label: g.relation_defs.get(f.relation, "") for f in facts},
                                 {universe.label(x): universe.type_labels.get(x, "") for x in related})
    except TransportError as exc:
        raise TransportError(f"page {entity}: {exc}") from exc


def insert_symbolic_refs(entity: str, draft: str, id_to_label: Mapping[str, str],
                         writer: PageWriter) -> tuple[SymbolicPage, float]:
    text = writer.link_references(draft, id_to_label)
    page = SymbolicPage.parse(entity, text)
    foreign = sorted({r for r in page.ref_ids if r not in id_to_label})
    if foreign:
        raise GateError("invented reference", ", ".join(foreign))
    sim = dl_similarity(page.plain, draft)
    if not sim > DRAFT_THRESHOLD:
        raise GateError("draft drift", f"similarity {sim:.4f}", sim)
    return page, sim


def label_regex(labels: Iterable[str]) -> re.Pattern | None:
    labels = sorted({x for x in labels if x}, key=lambda x: (-len(x), x))
    if not labels:
        return None
    return re.compile(r"(?<!\w)(?:" + "|".join(re.escape(x) for x in labels) + r")(?!\w)")


def realize_real_mapped(synth: SymbolicPage, plan: RenamePlan, writer: PageWriter,
                        synth_title: str, real_title: str, mapping: Mapping[str, str],
                        synth_pattern: re.Pattern | None = None,
                        shifted_dates: Iterable[str] = ()) -> tuple[SymbolicPage, float]:
    """Restore real names and dates into a synth page, then run the pair gates."""
    text = writer.restore(synth.text, synth_title, real_title, mapping)
    real = SymbolicPage.parse(synth.entity, text)
    pattern = synth_pattern or label_regex(plan.mapping.values())
    if pattern is not None:
        m = pattern.search(real.plain)
        if m:
            raise GateError("leakage", f"synthetic name {m.group(0)!r} in real page")
    for date in shifted_dates:
        if contains_whole(real.plain, date):
            raise GateError("leakage", f"shifted date {date!r} in real page")
    if sorted(real.ref_ids) != sorted(synth.ref_ids):
        raise GateError("structure drift", "reference sets differ")
    sim = dl_similarity(synth.text, real.text)
    if not sim > PAIR_THRESHOLD:
        raise GateError("pair drift", f"similarity {sim:.4f}", sim)
    return real, sim


def normalize_links(page: SymbolicPage) -> str:
    return LINK.sub(lambda m: f"[{m.group(2)}]", page.text)


def novelty_filter(synth: SymbolicPage, judge: EntityGuesser, real_names: Iterable[str]) -> bool:
    """True to keep.  Drops the page when the judge's guess names the real entity."""
    guess = judge.guess(synth.plain)
    key = answer_key(guess)
    return not any(key and key == answer_key(n) for n in real_names if n)


def name_leaks(universe: Universe, plan: RenamePlan, min_len: int = 4) -> dict[str, str]:
    """Unrenamed entities whose label embeds a word from a linked renamed entity's real name.

    Returns entity id -> offending word.  A lowercase element named after a
    person gives the person's identity away even after renaming.
    """
    g = universe.graph
    out = {}
    for eid, ent in g.entities.items():
        if eid in plan.mapping or not ent.label:
            continue
        low = ent.label.casefold()
        for nb in sorted(g.adjacency.get(eid, ())):
            if nb not in plan.mapping:
                continue
            words = [w.casefold() for w in re.findall(r"\w+", plan.real_labels[nb]) if len(w) >= min_len]
            hit = next((w for w in words if w in low), None)
            if hit:
                out[eid] = hit
                break
    return out


def prune_to_lcc(corpus: Corpus) -> Corpus:
    keep = corpus.retained
    adj: dict[str, set[str]] = {e: set() for e in keep}
    for a, b in corpus.hyperlink_edges("sm") | corpus.hyperlink_edges("rm"):
        adj[a].add(b)
        adj[b].add(a)
    lcc = largest_component(adj)
    for e in keep:
        if e not in lcc:
            corpus.pages[e].drop("outside largest component")
    return corpus


# --- driver -------------------------------------------------------------------

@dataclass
class CorpusContext:
    real: Universe
    synth: Universe
    plan: RenamePlan
    writer: PageWriter
    judge: EntityGuesser
    synth_pattern: re.Pattern | None
    real_pattern: re.Pattern | None


def _page_pipeline(ctx: CorpusContext, entity: str) -> PagePair:
    real_u, synth_u, plan = ctx.real, ctx.synth, ctx.plan
    facts = select_fact_orientation(entity, synth_u)
    pair = PagePair(entity, None, None, fact_ids=tuple(f.fid for f in facts))
    draft = generate_page(entity, facts, synth_u, ctx.writer)
    linkable = {x: synth_u.label(x) for f in facts for x in f.endpoints()
                if x != entity and synth_u.graph.entities[x].is_named}
    try:
        synth, pair.draft_similarity = insert_symbolic_refs(entity, draft, linkable, ctx.writer)
        pair.synth = synth
        if ctx.real_pattern is not None:
            m = ctx.real_pattern.search(synth.plain)
            if m:
                raise GateError("leakage", f"real name {m.group(0)!r} in synth page")
        if entity in plan.mapping:
            names = [plan.real_labels[entity], *real_u.graph.entities[entity].aliases]
            if not novelty_filter(synth, ctx.judge, names):
                raise GateError("novelty", "judge recognised the entity")
        mapping = {synth_u.label(x): real_u.label(x) for f in facts for x in f.endpoints() if x in plan.mapping}
        real_dates, shifted = set(), set()
        for f in facts:
            real_fact = real_u.graph.fact_index[f.fid]
            for s_lit, r_lit in zip(f.timestamps(), real_fact.timestamps()):
                s_txt, r_txt = render_timestamp(s_lit.value), render_timestamp(r_lit.value)
                mapping[s_txt] = r_txt
                shifted.add(s_txt)
                real_dates.add(r_txt)
        real, pair.pair_similarity = realize_real_mapped(
            synth, plan, ctx.writer, synth_u.label(entity), real_u.label(entity), mapping,
            ctx.synth_pattern, sorted(shifted - real_dates))
        pair.real = real
        pair.pair_similarity_normalized = dl_similarity(normalize_links(synth), normalize_links(real))
    except GateError as exc:
        if exc.reason == "pair drift":
            pair.pair_similarity = exc.similarity
        elif exc.reason == "draft drift":
            pair.draft_similarity = exc.similarity
        pair.drop(exc.reason)
    return pair


def _run_with_quarantine(ctx: CorpusContext, entity: str) -> PagePair:
    for attempt in range(1, QUARANTINE_RETRIES + 2):
        try:
            pair = _page_pipeline(ctx, entity)
            pair.attempts = attempt
            return pair
        except TransportError:
            continue
    pair = PagePair(entity, None, None, attempts=QUARANTINE_RETRIES + 1)
    pair.drop("transport failure")
    return pair


def build_corpus(real: Universe, synth: Universe, plan: RenamePlan, writer: PageWriter,
                 judge: EntityGuesser, in_flight: int = 1) -> Corpus:
    """Generate, gate and prune the parallel corpus.

    Pages are attempted for every entity with facts, in id order.  Dropped
    pages stay in the corpus record with their reason.
    """
    g = synth.graph
    candidates = sorted(e for e in g.entities if g.incident.get(e) or g.literal_facts.get(e))
    leaks = name_leaks(real, plan)
    renamed_real = [plan.real_labels[e] for e in plan.mapping]
    ctx = CorpusContext(real, synth, plan, writer, judge, label_regex(plan.mapping.values()),
                        label_regex(renamed_real))
    todo = [e for e in candidates if e not in leaks]
    if in_flight > 1:
        with ThreadPoolExecutor(in_flight) as pool:
            results = dict(zip(todo, pool.map(lambda e: _run_with_quarantine(ctx, e), todo)))
    else:
        results = {e: _run_with_quarantine(ctx, e) for e in todo}
    pages: dict[str, PagePair] = {}
    for e in candidates:
        if e in leaks:
            pair = PagePair(e, None, None)
            pair.drop("name leak")
            pages[e] = pair
        else:
            pages[e] = results[e]
    titles = {"rm": {e: real.label(e) for e in candidates}, "sm": {e: synth.label(e) for e in candidates}}
    corpus = Corpus(pages, titles, {"in_flight": in_flight, "delta": plan.delta})
    return prune_to_lcc(corpus)
