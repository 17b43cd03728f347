"""Universe sampling: uniformity-weighted frontier expansion, k-core, largest component."""

from __future__ import annotations

import hashlib
import json
import random
from collections import defaultdict, deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sized

from .kg_store import (
    Entity,
    Fact,
    KGError,
    KnowledgeGraph,
    UnresolvedTypeError,
    ingest_kg,
    resolve_type_label,
)


class ConfigError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    seeds: tuple[str, ...]
    iterations: int = 11
    uniformity: float = 0.6
    k: int = 19
    per_node_cap: int | None = 32
    rng_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not 0.0 <= self.uniformity <= 1.0:
            raise ConfigError("uniformity must lie in [0, 1]")
        if self.per_node_cap is not None and self.per_node_cap < 1:
            raise ConfigError("per_node_cap must be >= 1")
        if not 0 <= self.rng_seed < 2**64:
            raise ConfigError("rng_seed must be a 64-bit unsigned integer")

    @classmethod
    def from_mapping(cls, data: Mapping) -> "SamplerConfig":
        known = {"seeds", "iterations", "uniformity", "k", "per_node_cap", "rng_seed", "workers"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown sampler keys: {sorted(unknown)}")
        return cls(**dict(data))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d.pop("workers")
        return d


def relation_distribution(groups: Mapping[str, int | Sized], uniformity: float) -> dict[str, float]:
    """P(r) = |G(r)|^a / sum_k |G(k)|^a with a = 1 - uniformity.

    Empty groups are ignored; if every group is empty the result is ``{}``
    and the caller should skip the node.
    """
    alpha = 1.0 - uniformity
    sizes = {}
    for r, g in groups.items():
        n = g if isinstance(g, int) else len(g)
        if n > 0:
            sizes[r] = n
    if not sizes:
        return {}
    weights = {r: float(n) ** alpha for r, n in sizes.items()}
    total = sum(weights[r] for r in sorted(weights))
    return {r: weights[r] / total for r in sorted(weights)}


def _node_rng(rng_seed: int, node: str, iteration: int) -> random.Random:
    digest = hashlib.sha256(f"{rng_seed}:{node}:{iteration}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _sample_node(node: str, candidates: list[Fact], config: SamplerConfig, iteration: int) -> list[Fact]:
    rng = _node_rng(config.rng_seed, node, iteration)
    groups: dict[str, list[Fact]] = defaultdict(list)
    for f in candidates:
        groups[f.relation].append(f)
    cap = len(candidates) if config.per_node_cap is None else config.per_node_cap
    chosen = []
    while len(chosen) < cap:
        probs = relation_distribution(groups, config.uniformity)
        if not probs:
            break
        rels = list(probs)
        r = rng.choices(rels, weights=[probs[x] for x in rels])[0]
        pool = groups[r]
        chosen.append(pool.pop(rng.randrange(len(pool))))
    return chosen


def expand_frontier(kg: KnowledgeGraph, config: SamplerConfig) -> KnowledgeGraph:
    """Run ``config.iterations`` rounds of frontier expansion from the seeds.

    Each frontier node draws a relation from :func:`relation_distribution`
    over its not-yet-sampled incident facts, then a fact uniformly (without
    replacement) inside that relation, up to ``per_node_cap`` facts.
    Candidates are fixed at the start of an iteration and every node has its
    own RNG stream, so the worker count does not change the result.
    """
    missing = [s for s in config.seeds if s not in kg.entities]
    if missing:
        raise ConfigError(f"seed(s) not in knowledge graph: {', '.join(missing)}")
    nodes: set[str] = set(config.seeds)
    sampled: dict[str, Fact] = {}
    expanded: set[str] = set()
    frontier = sorted(set(config.seeds))
    for t in range(1, config.iterations + 1):
        todo = [v for v in frontier if v not in expanded]
        expanded.update(todo)
        snapshot = set(sampled)
        jobs = [(v, [f for f in kg.incident[v] if f.fid not in snapshot]) for v in todo]
        if config.workers > 1:
            with ThreadPoolExecutor(config.workers) as pool:
                results = list(pool.map(lambda job: _sample_node(job[0], job[1], config, t), jobs))
        else:
            results = [_sample_node(v, cands, config, t) for v, cands in jobs]
        reached: set[str] = set()
        for chosen in results:
            for f in chosen:
                sampled.setdefault(f.fid, f)
                for x in f.endpoints():
                    if x not in nodes:
                        reached.add(x)
        nodes |= reached
        frontier = sorted(reached)
        if not frontier:
            break
    return kg.subgraph(nodes, sampled.values())


def k_core(graph: KnowledgeGraph, k: int) -> KnowledgeGraph:
    """Maximal subgraph whose nodes all have at least ``k`` distinct neighbors."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    adj = graph.adjacency
    degree = {v: len(ns) for v, ns in adj.items()}
    removed: set[str] = set()
    queue = deque(sorted(v for v, d in degree.items() if d < k))
    queued = set(queue)
    while queue:
        v = queue.popleft()
        removed.add(v)
        for w in adj[v]:
            if w in removed or w in queued:
                continue
            degree[w] -= 1
            if degree[w] < k:
                queue.append(w)
                queued.add(w)
    return graph.subgraph(v for v in adj if v not in removed)


def connected_components(adj: Mapping[str, Iterable[str]]) -> list[set[str]]:
    seen: set[str] = set()
    comps = []
    for start in sorted(adj):
        if start in seen:
            continue
        comp = {start}
        stack = [start]
        seen.add(start)
        while stack:
            v = stack.pop()
            for w in adj[v]:
                if w not in seen:
                    seen.add(w)
                    comp.add(w)
                    stack.append(w)
        comps.append(comp)
    return comps


def largest_component(adj: Mapping[str, Iterable[str]]) -> set[str]:
    """Largest component by size; ties go to the one with the smallest minimum id."""
    comps = connected_components(adj)
    if not comps:
        return set()
    return min(comps, key=lambda c: (-len(c), min(c)))


def largest_connected_component(graph: KnowledgeGraph) -> KnowledgeGraph:
    return graph.subgraph(largest_component(graph.adjacency))


@dataclass(frozen=True)
class Universe:
    """A connected subgraph plus the labeling in force (real or synthetic)."""

    graph: KnowledgeGraph
    labeling: Mapping[str, str]
    type_labels: Mapping[str, str] = field(default_factory=dict)
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        stray = [e for e in self.labeling if e not in self.graph.entities]
        if stray:
            raise KGError(f"labeling mentions ids outside the universe: {stray[:5]}")

    def label(self, eid: str) -> str:
        return self.labeling.get(eid, self.graph.entities[eid].label)

    @property
    def named(self) -> list[str]:
        return [eid for eid, e in self.graph.entities.items() if e.is_named]

    def entity_lines(self) -> list[str]:
        lines = []
        for eid, e in self.graph.entities.items():
            rec = e.to_record()
            rec["label"] = self.label(eid)
            lines.append(json.dumps(rec, ensure_ascii=False, sort_keys=True))
        return lines

    def dumps(self) -> str:
        body = self.entity_lines() + ["--"] + self.graph.fact_lines() + ["--",
                json.dumps(dict(self.type_labels), sort_keys=True, ensure_ascii=False),
                json.dumps(dict(self.provenance), sort_keys=True)]
        return "\n".join(body) + "\n"

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "entities.jsonl").write_text("".join(x + "\n" for x in self.entity_lines()), encoding="utf-8")
        (d / "facts.jsonl").write_text("".join(x + "\n" for x in self.graph.fact_lines()), encoding="utf-8")
        (d / "relations.json").write_text(
            json.dumps(dict(self.graph.relation_defs), indent=1, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8")
        (d / "type_labels.json").write_text(
            json.dumps(dict(self.type_labels), indent=1, sort_keys=True, ensure_ascii=False) + "\n",
            encoding="utf-8")
        (d / "provenance.json").write_text(json.dumps(dict(self.provenance), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path, real_labels: Mapping[str, str] | None = None) -> "Universe":
        """Load a saved universe.

        Entity files carry the labeling in force.  For a synth-mapped
        universe pass ``real_labels`` so the graph keeps the real labels.
        """
        d = Path(directory)
        defs = json.loads((d / "relations.json").read_text(encoding="utf-8"))
        with open(d / "entities.jsonl", encoding="utf-8") as ef, open(d / "facts.jsonl", encoding="utf-8") as ff:
            kg = ingest_kg(ef, ff, defs)
        labeling = {eid: e.label for eid, e in kg.entities.items()}
        if real_labels is not None:
            ents = [Entity(e.id, real_labels[e.id], e.type_ids, e.aliases, e.flags) for e in kg.entities.values()]
            kg = KnowledgeGraph.build(ents, kg.facts, defs)
        type_labels = json.loads((d / "type_labels.json").read_text(encoding="utf-8"))
        provenance = json.loads((d / "provenance.json").read_text())
        return cls(kg, labeling, type_labels, provenance)


def compute_type_labels(kg: KnowledgeGraph, ids: Iterable[str]) -> dict[str, str]:
    out = {}
    for eid in sorted(ids):
        try:
            out[eid] = resolve_type_label(eid, kg)
        except UnresolvedTypeError as exc:
            out[eid] = exc.partial
    return out


def sample_universe(kg: KnowledgeGraph, config: SamplerConfig) -> Universe:
    """Expand, peel to the k-core, keep the largest component, attach literals."""
    expansion = expand_frontier(kg, config)
    core = k_core(expansion, config.k)
    lcc = largest_connected_component(core)
    if not lcc.entities:
        raise SamplingError(
            f"empty universe after {config.k}-core; try a smaller k or more iterations")
    graph = lcc.with_literal_facts(kg)
    provenance = {
        "sampler": config.to_dict(),
        "parent_fingerprint": kg.fingerprint(),
        "expansion_size": len(expansion.entities),
        "core_size": len(core.entities),
    }
    labeling = {eid: e.label for eid, e in graph.entities.items()}
    return Universe(graph, labeling, compute_type_labels(kg, graph.entities), provenance)
