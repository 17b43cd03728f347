"""Multi-hop QA: fact validation, global fact graph, motif sampling, composition."""

from __future__ import annotations

import json
import random
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from .corpus import Corpus, SymbolicPage, label_regex, literal_text
from .evaluate import answer_key
from .kg_store import Fact
from .perturb import RenamePlan, contains_whole
from .ports import FactExtractor, QuestionWriter, TransportError, substitute_labels
from .sampler import Universe
from .timestamps import render_timestamp, timestamp_variants

REUSE_CAP = 5
QUESTION_RETRIES = 2
EXPANSION_LIMIT = 4000


class QaError(RuntimeError):
    pass


class RemapError(QaError):
    pass


# --- fact validation ----------------------------------------------------------

def _template_parts(f: Fact, universe: Universe) -> tuple[str, str | None]:
    """(plain template, qualified template or None) in the universe's labels."""
    subj = universe.label(f.subject)
    plain = f"{subj} -> {f.relation_label} -> <ANS>"
    qualified = None
    for q in f.qualifiers:
        if q.value.kind == "timestamp":
            qualified = f"{subj} -> {f.relation_label} -> <ANS1> AND <ANS1> -> {q.relation_label} -> <ANS2>"
            break
    return plain, qualified


def _object_forms(f: Fact, universe: Universe) -> set[str]:
    if isinstance(f.object, str):
        return {answer_key(universe.label(f.object))}
    if f.object.kind == "timestamp":
        return {answer_key(x) for x in timestamp_variants(f.object.value)}
    return {answer_key(f.object.value)}


def _qualifier_forms(f: Fact) -> set[str]:
    for q in f.qualifiers:
        if q.value.kind == "timestamp":
            return {answer_key(x) for x in timestamp_variants(q.value.value)}
    return set()


def extract_present_facts(page: SymbolicPage, facts: list[Fact], universe: Universe,
                          extractor: FactExtractor) -> dict[str, dict[str, bool]]:
    """Ask the extractor which of the page's source facts the text states.

    Facts sharing a (subject, relation) share one template; each fact is
    validated when its own object appears among the extracted answers.
    Returns fid -> {"plain": bool, "qualified": bool}.
    """
    templates: dict[str, str] = {}
    slot: dict[str, tuple[str, str | None]] = {}
    for f in facts:
        plain, qual = _template_parts(f, universe)
        ids = []
        for t in (plain, qual):
            if t is None:
                ids.append(None)
                continue
            tid = next((k for k, v in templates.items() if v == t), None)
            if tid is None:
                tid = f"T{len(templates) + 1}"
                templates[tid] = t
            ids.append(tid)
        slot[f.fid] = (ids[0], ids[1])
    defs = {f.relation_label: universe.graph.relation_defs.get(f.relation, "") for f in facts}
    found = extractor.extract(page.plain, templates, defs)
    out = {}
    for f in facts:
        plain_id, qual_id = slot[f.fid]
        objs = _object_forms(f, universe)
        answers = {answer_key(a) for a in found.get(plain_id, []) if isinstance(a, str)}
        ok_plain = bool(objs & answers)
        ok_qual = False
        if qual_id is not None:
            quals = _qualifier_forms(f)
            for pair in found.get(qual_id, []):
                if isinstance(pair, list) and len(pair) == 2:
                    if answer_key(str(pair[0])) in objs and answer_key(str(pair[1])) in quals:
                        ok_qual = True
        out[f.fid] = {"plain": ok_plain, "qualified": ok_qual}
    return out


# --- fact graph ----------------------------------------------------------------

@dataclass(frozen=True, order=True)
class FactEdge:
    head: str
    relation: str
    tail: str
    page: str
    fid: str
    kind: str  # entity | literal | qualified

    def to_record(self) -> dict:
        return {"head": self.head, "relation": self.relation, "tail": self.tail, "page": self.page,
                "fid": self.fid, "kind": self.kind}


@dataclass
class FactGraph:
    edges: tuple[FactEdge, ...]
    out_edges: dict[str, list[int]] = field(default_factory=dict)
    in_edges: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.edges = tuple(sorted(set(self.edges)))
        out, inc = defaultdict(list), defaultdict(list)
        for i, e in enumerate(self.edges):
            out[e.head].append(i)
            inc[e.tail].append(i)
        self.out_edges, self.in_edges = dict(out), dict(inc)

    @property
    def nodes(self) -> set[str]:
        return {x for e in self.edges for x in (e.head, e.tail)}

    def dumps(self) -> str:
        return "\n".join(json.dumps(e.to_record(), sort_keys=True) for e in self.edges) + "\n"


def literal_node(fid: str) -> str:
    return f"lit:{fid}"


def qualifier_node(fid: str, qrel: str) -> str:
    return f"qual:{fid}:{qrel}"


def build_fact_graph(corpus: Corpus, validated: Mapping[str, Mapping[str, Mapping[str, bool]]],
                     universe: Universe) -> FactGraph:
    """One edge per validated (fact, page).  Ids only, so both variants share it."""
    g = universe.graph
    edges = []
    for page in corpus.retained:
        for fid, ok in sorted(validated.get(page, {}).items()):
            f = g.fact_index[fid]
            if ok.get("plain"):
                if isinstance(f.object, str):
                    edges.append(FactEdge(f.subject, f.relation_label, f.object, page, fid, "entity"))
                else:
                    edges.append(FactEdge(f.subject, f.relation_label, literal_node(fid), page, fid, "literal"))
            if ok.get("qualified") and isinstance(f.object, str):
                for q in f.qualifiers:
                    if q.value.kind == "timestamp":
                        edges.append(FactEdge(f.subject, f"{f.relation_label} / {q.relation_label}",
                                              qualifier_node(fid, q.relation), page, fid, "qualified"))
    return FactGraph(tuple(edges))


# --- motifs ----------------------------------------------------------------------

@dataclass(frozen=True)
class Motif:
    name: str
    pattern: tuple[tuple[str, str], ...]

    def __post_init__(self):
        heads = {h for h, _ in self.pattern}
        sinks = {t for _, t in self.pattern} - heads
        if len(sinks) != 1:
            raise QaError(f"motif {self.name} needs exactly one answer node, found {sorted(sinks)}")
        # weak connectivity
        nodes = heads | {t for _, t in self.pattern}
        adj = defaultdict(set)
        for h, t in self.pattern:
            adj[h].add(t)
            adj[t].add(h)
        seen, stack = set(), [next(iter(sorted(nodes)))]
        while stack:
            v = stack.pop()
            if v not in seen:
                seen.add(v)
                stack.extend(adj[v])
        if seen != nodes:
            raise QaError(f"motif {self.name} is not connected")

    @property
    def hop_count(self) -> int:
        return len(self.pattern)

    @property
    def variables(self) -> list[str]:
        return sorted({v for e in self.pattern for v in e})

    @property
    def answer(self) -> str:
        heads = {h for h, _ in self.pattern}
        return next(t for _, t in self.pattern if t not in heads)

    @property
    def roots(self) -> list[str]:
        tails = {t for _, t in self.pattern}
        return sorted({h for h, _ in self.pattern if h not in tails})

    @property
    def bridges(self) -> list[str]:
        return sorted(set(self.variables) - set(self.roots) - {self.answer})

    def role(self, var: str) -> str:
        if var == self.answer:
            return "leaf"
        return "root" if var in self.roots else "bridge"

    def topo_order(self) -> list[int]:
        """Pattern edge indices, every edge after the edges producing its head."""
        depth: dict[str, int] = {r: 0 for r in self.roots}
        changed = True
        while changed:
            changed = False
            for h, t in self.pattern:
                if h in depth and depth.get(t, -1) < depth[h] + 1:
                    depth[t] = depth[h] + 1
                    changed = True
        return sorted(range(len(self.pattern)), key=lambda i: (depth[self.pattern[i][0]], i))


def load_motifs(path: str | Path | None = None) -> dict[str, Motif]:
    if path is None:
        text = resources.files("kgworlds").joinpath("data/motifs.json").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    raw = json.loads(text)
    return {k: Motif(k, tuple(tuple(e) for e in v)) for k, v in sorted(raw.items()) if not k.startswith("_")}


@dataclass
class MotifMatch:
    motif: Motif
    binding: dict[str, str]
    edges: tuple[FactEdge, ...]  # in pattern order

    def key(self) -> tuple:
        return (tuple(self.binding[r] for r in self.motif.roots), tuple(e.relation for e in self.edges))


def _search_order(motif: Motif) -> list[int]:
    order = [0]
    bound = set(motif.pattern[0])
    while len(order) < len(motif.pattern):
        for i, (h, t) in enumerate(motif.pattern):
            if i not in order and (h in bound or t in bound):
                order.append(i)
                bound |= {h, t}
                break
    return order


def sample_motifs(fg: FactGraph, motif: Motif, budget: int, rng_seed: int = 0) -> tuple[list[MotifMatch], dict]:
    """Sample up to ``budget`` concrete matches of ``motif``.

    Constraints: distinct entities, one page per edge, one match per
    (roots, relation sequence), each fact and each bridge entity reused at
    most five times.  Returns (matches, shortfall report).
    """
    rng = random.Random(f"{rng_seed}:{motif.name}")
    order = _search_order(motif)
    fact_use: Counter = Counter()
    bridge_use: Counter = Counter()
    keys: set[tuple] = set()
    matches: list[MotifMatch] = []
    bridges = set(motif.bridges)
    starts = list(range(len(fg.edges)))
    rng.shuffle(starts)
    dup_keys = 0

    def fits(var: str, node: str, binding: dict) -> bool:
        if var in binding:
            return binding[var] == node
        if node in binding.values():
            return False
        if var in bridges and bridge_use[node] >= REUSE_CAP:
            return False
        # only the answer may be a literal value
        return var == motif.answer or not node.startswith(("lit:", "qual:"))

    for start in starts:
        if len(matches) >= budget:
            break
        expansions = 0
        found: list[MotifMatch] = []

        def dfs(step: int, binding: dict, chosen: dict[int, FactEdge]):
            nonlocal expansions
            expansions += 1
            if found or expansions > EXPANSION_LIMIT:
                return
            if step == len(order):
                m = MotifMatch(motif, dict(binding), tuple(chosen[i] for i in range(len(motif.pattern))))
                if m.key() not in keys:
                    found.append(m)
                return
            pi = order[step]
            h, t = motif.pattern[pi]
            if step == 0:
                cands = [start]
            elif h in binding:
                cands = list(fg.out_edges.get(binding[h], ()))
                rng.shuffle(cands)
            else:
                cands = list(fg.in_edges.get(binding[t], ()))
                rng.shuffle(cands)
            pages = {e.page for e in chosen.values()}
            fids = {e.fid for e in chosen.values()}
            for ci in cands:
                e = fg.edges[ci]
                if e.page in pages or e.fid in fids or fact_use[e.fid] >= REUSE_CAP:
                    continue
                if e.head == e.tail or not fits(h, e.head, binding) or not fits(t, e.tail, binding):
                    continue
                new = dict(binding)
                new[h], new[t] = e.head, e.tail
                if len(set(new.values())) != len(new):
                    continue
                chosen[pi] = e
                dfs(step + 1, new, chosen)
                del chosen[pi]
                if found:
                    return

        dfs(0, {}, {})
        if not found:
            continue
        m = found[0]
        if m.key() in keys:
            dup_keys += 1
            continue
        keys.add(m.key())
        matches.append(m)
        for e in m.edges:
            fact_use[e.fid] += 1
        for b in motif.bridges:
            bridge_use[m.binding[b]] += 1
    report = {"motif": motif.name, "requested": budget, "sampled": len(matches),
              "shortfall": max(0, budget - len(matches))}
    return matches, report


def fact_signature(m: MotifMatch) -> frozenset:
    return frozenset((e.fid, e.kind, e.tail if e.kind == "qualified" else "") for e in m.edges)


def dedupe_submotifs(matches: Mapping[str, list[MotifMatch]]) -> dict[str, list[MotifMatch]]:
    """Drop every match whose fact set sits inside a match with more hops."""
    allm = [(m.motif.hop_count, fact_signature(m)) for ms in matches.values() for m in ms]
    out = {}
    for name, ms in matches.items():
        keep = []
        for m in ms:
            sig, n = fact_signature(m), m.motif.hop_count
            if any(k > n and sig <= other for k, other in allm):
                continue
            keep.append(m)
        out[name] = keep
    return out


# --- questions -------------------------------------------------------------------

def node_label(node: str, universe: Universe) -> str:
    """Surface text of a fact-graph node in the given universe."""
    if node.startswith("lit:"):
        return literal_text(universe.graph.fact_index[node[4:]].object)
    if node.startswith("qual:"):
        _, fid, qrel = node.split(":", 2)
        f = universe.graph.fact_index[fid]
        q = next(q for q in f.qualifiers if q.relation == qrel)
        return literal_text(q.value)
    return universe.label(node)


def _mentions(text: str, label: str, named: Iterable[str] = ()) -> bool:
    """Whole-word mention of ``label`` outside any mention of the ``named`` labels.

    "Radford" inside "Radford Rovers Academy" is part of the root's name and
    does not give the answer away.
    """
    t, low = text.casefold(), label.casefold()
    for n in sorted({x.casefold() for x in named}, key=len, reverse=True):
        if n != low and contains_whole(n, low):
            t = re.sub(r"(?<!\w)" + re.escape(n) + r"(?!\w)", " ", t)
    return contains_whole(t, low)


def hop_request(edge: FactEdge, universe: Universe) -> dict:
    hop = {"subject": universe.label(edge.head), "relation": edge.relation}
    if edge.kind == "qualified":
        _, fid, qrel = edge.tail.split(":", 2)
        f = universe.graph.fact_index[fid]
        q = next(q for q in f.qualifiers if q.relation == qrel)
        hop = {"subject": universe.label(edge.head), "relation": f.relation_label,
               "via": universe.label(f.object), "qualifier": q.relation_label}
    return hop


def compose_single_hop(edge: FactEdge, qgen: QuestionWriter, universe: Universe) -> str | None:
    """Question for one edge that names its subject and hides its answer."""
    subject, answer = universe.label(edge.head), node_label(edge.tail, universe)
    hop = hop_request(edge, universe)
    for attempt in range(QUESTION_RETRIES + 1):
        q = qgen.single_hop([dict(hop, attempt=attempt)], universe.graph.relation_defs).get("Q1", "")
        if q and _mentions(q, subject) and not _mentions(q, answer, [subject]):
            return q
    return None


def compose_multi_hop(match: MotifMatch, single_hops: list[tuple[str, str]], qgen: QuestionWriter,
                      universe: Universe) -> str | None:
    """Fold the single hops into one question naming all roots and no bridge."""
    motif = match.motif
    roots = [universe.label(match.binding[v]) for v in motif.roots]
    bridges = [node_label(match.binding[v], universe) for v in motif.bridges]
    answer = node_label(match.binding[motif.answer], universe)
    decomposed = []
    for i in motif.topo_order():
        h, _ = motif.pattern[i]
        q, a = single_hops[i]
        decomposed.append({"question": q, "answer": a,
                           "bridges": [universe.label(match.binding[h])] if h in motif.bridges else []})
    for _ in range(QUESTION_RETRIES + 1):
        q = qgen.compose(decomposed)
        if q is None:
            return None
        if all(_mentions(q, r) for r in roots) and not any(_mentions(q, b, roots) for b in bridges) \
                and not _mentions(q, answer, roots):
            return q
    return None


@dataclass
class QaInstance:
    pair_id: str
    motif: str
    variant: str
    question: str
    answer: str
    single_hops: list[tuple[str, str]]
    subgraph: list[dict]  # edges with page ids and pattern variables
    roots: list[str]
    bridges: list[str]
    answer_node: str

    @property
    def gold_page_ids(self) -> list[str]:
        return sorted({e["page"] for e in self.subgraph})

    def to_record(self) -> dict:
        return {"pair_id": self.pair_id, "motif": self.motif, "variant": self.variant,
                "question": self.question, "answer": self.answer,
                "single_hops": [{"question": q, "answer": a} for q, a in self.single_hops],
                "gold_page_ids": self.gold_page_ids, "subgraph": self.subgraph,
                "roots": self.roots, "bridges": self.bridges, "answer_node": self.answer_node}


def _subgraph_record(m: MotifMatch) -> list[dict]:
    out = []
    for (h, t), e in zip(m.motif.pattern, m.edges):
        out.append({**e.to_record(), "head_var": h, "tail_var": t})
    return out


def remap_question(inst: QaInstance, plan: RenamePlan, real: Universe, synth: Universe,
                   synth_pattern: re.Pattern | None = None) -> QaInstance:
    """Real-mapped twin of a synth-mapped instance: same ids, real names and dates."""
    pattern = synth_pattern if synth_pattern is not None else label_regex(plan.mapping.values())
    mapping = dict(plan.synth_to_real())
    for e in inst.subgraph:
        f = synth.graph.fact_index[e["fid"]]
        rf = real.graph.fact_index[e["fid"]]
        for s_lit, r_lit in zip(f.timestamps(), rf.timestamps()):
            mapping[render_timestamp(s_lit.value)] = render_timestamp(r_lit.value)

    def remap(text: str) -> str:
        out = substitute_labels(text, mapping)
        m = pattern.search(out) if pattern is not None else None
        if m:
            raise RemapError(f"{inst.pair_id}: synthetic name {m.group(0)!r} survived remapping")
        return out

    answer = node_label(inst.answer_node, real)
    if remap(inst.answer) != answer:
        raise RemapError(f"{inst.pair_id}: answer remaps to {remap(inst.answer)!r}, expected {answer!r}")
    return QaInstance(inst.pair_id, inst.motif, "rm", remap(inst.question), answer,
                      [(remap(q), remap(a)) for q, a in inst.single_hops], inst.subgraph,
                      inst.roots, inst.bridges, inst.answer_node)


@dataclass
class QaDataset:
    sm: list[QaInstance]
    rm: list[QaInstance]
    report: dict

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for variant, items in (("sm", self.sm), ("rm", self.rm)):
            lines = [json.dumps(x.to_record(), ensure_ascii=False, sort_keys=True) for x in items]
            (d / f"qa_{variant}.jsonl").write_text("".join(x + "\n" for x in lines), encoding="utf-8")
        (d / "qa_report.json").write_text(json.dumps(self.report, indent=1, sort_keys=True) + "\n")


def validate_corpus_facts(corpus: Corpus, synth: Universe, extractor: FactExtractor) -> dict:
    validated = {}
    failed = []
    for e in corpus.retained:
        pair = corpus.pages[e]
        facts = [synth.graph.fact_index[fid] for fid in pair.fact_ids]
        try:
            validated[e] = extract_present_facts(pair.synth, facts, synth, extractor)
        except TransportError:
            failed.append(e)
    return {"validated": validated, "unvalidated_pages": failed}


def build_qa(corpus: Corpus, real: Universe, synth: Universe, plan: RenamePlan,
             extractor: FactExtractor, qgen: QuestionWriter, budget: int = 50, rng_seed: int = 0,
             motifs: Mapping[str, Motif] | None = None) -> QaDataset:
    motifs = motifs or load_motifs()
    v = validate_corpus_facts(corpus, synth, extractor)
    fg = build_fact_graph(corpus, v["validated"], synth)
    sampled, reports = {}, {}
    for name, motif in motifs.items():
        sampled[name], reports[name] = sample_motifs(fg, motif, budget, rng_seed)
    kept = dedupe_submotifs(sampled)
    synth_pattern = label_regex(plan.mapping.values())
    sm_items, rm_items = [], []
    for name in sorted(kept):
        rep = reports[name]
        rep["removed_as_submotif"] = len(sampled[name]) - len(kept[name])
        rep["discarded_single_hop"] = rep["no_composition"] = rep["remap_failed"] = 0
        for m in kept[name]:
            hops = []
            for e in m.edges:
                q = compose_single_hop(e, qgen, synth)
                if q is None:
                    break
                hops.append((q, node_label(e.tail, synth)))
            if len(hops) != len(m.edges):
                rep["discarded_single_hop"] += 1
                continue
            composed = compose_multi_hop(m, hops, qgen, synth)
            if composed is None:
                rep["no_composition"] += 1
                continue
            pair_id = f"{name}-{len([x for x in sm_items if x.motif == name]) + 1:04d}"
            inst = QaInstance(pair_id, name, "sm", composed, node_label(m.binding[m.motif.answer], synth),
                              hops, _subgraph_record(m), [m.binding[r] for r in m.motif.roots],
                              [m.binding[b] for b in m.motif.bridges], m.binding[m.motif.answer])
            try:
                twin = remap_question(inst, plan, real, synth, synth_pattern)
            except RemapError:
                rep["remap_failed"] += 1
                continue
            sm_items.append(inst)
            rm_items.append(twin)
        rep["emitted"] = len([x for x in sm_items if x.motif == name])
        rep["shortfall"] = max(0, budget - rep["emitted"])
    report = {"motifs": reports, "fact_graph_edges": len(fg.edges),
              "unvalidated_pages": v["unvalidated_pages"], "budget": budget, "rng_seed": rng_seed}
    return QaDataset(sm_items, rm_items, report)
