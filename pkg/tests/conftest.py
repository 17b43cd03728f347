import socket
import time
from pathlib import Path

import pytest

from kgworlds.cli import main
from kgworlds.kg_store import Entity, Fact, KnowledgeGraph, Literal

PIPELINE = ("sample-universe", "perturb", "build-corpus", "build-qa", "build-nav")


def ent(eid, label, types=(), aliases=(), flags=()):
    return Entity(eid, label, tuple(types), tuple(aliases), tuple(flags))


def fact(s, p, o, label=None, quals=()):
    return Fact(s, p, label or p, o, tuple(quals))


def lit_fact(s, p, kind, value, label=None):
    return Fact(s, p, label or p, Literal(kind, value))


def graph_from_edges(edges, labels=None, prefix="Q"):
    """Entities named after ids; one "link" fact per undirected edge."""
    nodes = sorted({x for e in edges for x in e} | set(labels or {}))
    labels = labels or {}
    ents = [ent(n, labels.get(n, f"Node {n}")) for n in nodes]
    return KnowledgeGraph.build(ents, [fact(a, "link", b) for a, b in edges])


class NetworkBlocked(RuntimeError):
    pass


@pytest.fixture
def no_network(monkeypatch):
    """Fail loudly on any attempt to open an outbound connection."""
    calls = []

    def guard(self, *args, **kwargs):
        calls.append(args)
        raise NetworkBlocked(f"network access attempted: {args}")

    monkeypatch.setattr(socket.socket, "connect", guard)
    monkeypatch.setattr(socket.socket, "connect_ex", guard)
    monkeypatch.setattr(socket, "create_connection", lambda *a, **k: guard(None, *a))
    return calls


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    """One mock end-to-end run on the bundled fixture, shared by the suite.

    Sockets are blocked for the whole run so any network use fails it.
    """
    out = tmp_path_factory.mktemp("run")
    mp = pytest.MonkeyPatch()
    attempts = []

    def guard(self, *args, **kwargs):
        attempts.append(args)
        raise NetworkBlocked(str(args))

    mp.setattr(socket.socket, "connect", guard)
    codes = {}
    start = time.perf_counter()
    try:
        for stage in PIPELINE:
            codes[stage] = main([stage, "--mock", "--out", str(out)])
        build_time = time.perf_counter() - start
        for variant in ("rm", "sm"):
            codes[f"run-nav {variant}"] = main(["run-nav", "--mock", "--out", str(out), "--variant", variant])
        codes["evaluate"] = main(["evaluate", "--out", str(out)])
    finally:
        mp.undo()
    return {"out": Path(out), "codes": codes, "seconds": build_time, "network_attempts": attempts}


@pytest.fixture(scope="session")
def artifacts(pipeline_run):
    from kgworlds.corpus import Corpus
    from kgworlds.perturb import RenamePlan
    from kgworlds.sampler import Universe

    out = pipeline_run["out"]
    real = Universe.load(out / "universe")
    plan = RenamePlan.load(out / "perturb")
    synth = Universe.load(out / "perturb" / "synth",
                          real_labels={e: x.label for e, x in real.graph.entities.items()})
    return {"out": out, "real": real, "synth": synth, "plan": plan, "corpus": Corpus.load(out / "corpus")}


def make_universe(ents, facts, type_labels=None, relation_defs=None):
    from kgworlds.sampler import Universe

    g = KnowledgeGraph.build(ents, facts, relation_defs)
    return Universe(g, {e.id: e.label for e in ents}, type_labels or {e.id: "thing" for e in ents})


def chain_universe(n_chains=4):
    """Cities, clubs named after them, academies named after the clubs.

    Each chain gives a three-level name dependency: academy -> club -> city.
    A country and a person hang off each city so there is unrelated text too.
    """
    ents = [ent("Q1", "Norland"), ent("Q2", "sports club"), ent("Q3", "city")]
    facts = []
    bases = ["Radford", "Elmbury", "Cornwick", "Hartley", "Glenmore", "Ashby"][:n_chains]
    n = 10
    types = {"Q1": "country", "Q2": "class", "Q3": "class"}
    for base in bases:
        city, club, acad, person = (f"Q{n}", f"Q{n + 1}", f"Q{n + 2}", f"Q{n + 3}")
        n += 4
        ents += [ent(city, base, ["Q3"]), ent(club, f"{base} Rovers", ["Q2"]),
                 ent(acad, f"{base} Rovers Academy"), ent(person, f"Mira {base}field")]
        facts += [fact(city, "P17", "Q1", "country"), fact(club, "P131", city, "located in"),
                  fact(acad, "P127", club, "owned by"), fact(person, "P19", city, "place of birth"),
                  fact(person, "P54", club, "member of sports team"),
                  lit_fact(person, "P569", "timestamp", "1935-01-15", "date of birth")]
        types.update({city: "city", club: "sports club", acad: "youth academy", person: "human"})
    tail = ", as recorded by the editors of the reference work and checked against the original sources"
    defs = {p: d + tail for p, d in {
        "P17": "sovereign state that this item is in", "P131": "administrative area where the item sits",
        "P127": "owner of the subject, a person or an organization", "P19": "most specific known birth location",
        "P54": "sports teams or clubs the subject represents or represented",
        "P569": "date on which the subject was born"}.items()}
    return make_universe(ents, facts, types, defs)


def qa_violations(sm, rm, patterns, cap=5):
    """Independent check of saved QA records; returns a list of problems.

    ``sm``/``rm`` are the JSONL records, ``patterns`` maps motif name to its
    list of [head, tail] variable pairs.  Nothing from the qa module is used.
    """
    from collections import Counter

    problems = []
    by_motif = {}
    for r in sm:
        edges = r["subgraph"]
        pattern = [[e["head_var"], e["tail_var"]] for e in edges]
        if pattern != [list(p) for p in patterns[r["motif"]]]:
            problems.append(f"{r['pair_id']}: subgraph does not follow motif {r['motif']}")
        bind = {}
        for e in edges:
            for var, node in ((e["head_var"], e["head"]), (e["tail_var"], e["tail"])):
                if bind.setdefault(var, node) != node:
                    problems.append(f"{r['pair_id']}: variable {var} bound twice")
        if len(set(bind.values())) != len(bind):
            problems.append(f"{r['pair_id']}: repeated entity")
        pages = [e["page"] for e in edges]
        if len(set(pages)) != len(pages):
            problems.append(f"{r['pair_id']}: repeated page")
        by_motif.setdefault(r["motif"], []).append((r, bind))

    sigs = [(len(r["subgraph"]), frozenset((e["fid"], e["tail"]) for e in r["subgraph"]), r["pair_id"]) for r in sm]
    for n, sig, pid in sigs:
        for m, other, opid in sigs:
            if m > n and sig <= other:
                problems.append(f"{pid}: contained in {opid}")
                break

    for motif, items in by_motif.items():
        keys = Counter()
        facts, bridges = Counter(), Counter()
        for r, bind in items:
            keys[(tuple(r["roots"]), tuple(e["relation"] for e in r["subgraph"]))] += 1
            facts.update({e["fid"] for e in r["subgraph"]})
            bridges.update(r["bridges"])
        problems += [f"{motif}: key {k} used {c} times" for k, c in keys.items() if c > 1]
        problems += [f"{motif}: fact {k} used {c} times" for k, c in facts.items() if c > cap]
        problems += [f"{motif}: bridge {k} used {c} times" for k, c in bridges.items() if c > cap]

    sm_ids = [r["pair_id"] for r in sm]
    rm_ids = [r["pair_id"] for r in rm]
    if len(set(sm_ids)) != len(sm_ids) or sorted(sm_ids) != sorted(rm_ids):
        problems.append("pair ids do not form a bijection")
    if Counter(r["motif"] for r in sm) != Counter(r["motif"] for r in rm):
        problems.append("motif histograms differ")
    rm_by = {r["pair_id"]: r for r in rm}
    for r in sm:
        twin = rm_by.get(r["pair_id"])
        if twin and (twin["subgraph"] != r["subgraph"] or twin["motif"] != r["motif"]):
            problems.append(f"{r['pair_id']}: twin has a different subgraph")
    return problems


def read_jsonl(path):
    import json

    return [json.loads(x) for x in Path(path).read_text(encoding="utf-8").splitlines() if x.strip()]


def mc_hitting_time(adj, source, target, walks=100_000, seed=0):
    """Mean steps of ``walks`` simulated random walks from source to target."""
    import numpy as np

    nodes = sorted(adj)
    index = {n: i for i, n in enumerate(nodes)}
    nbrs = [sorted({index[w] for w in adj[n]}) for n in nodes]
    indptr = np.cumsum([0] + [len(x) for x in nbrs])
    flat = np.array([w for x in nbrs for w in x])
    deg = np.diff(indptr)
    rng = np.random.default_rng(seed)
    pos = np.full(walks, index[source])
    steps = np.zeros(walks, dtype=np.int64)
    active = np.arange(walks)
    t = index[target]
    while active.size:
        p = pos[active]
        pick = indptr[p] + (rng.random(active.size) * deg[p]).astype(np.int64)
        pos[active] = flat[pick]
        steps[active] += 1
        active = active[pos[active] != t]
    return float(steps.mean())


def random_connected_graph(rng, n, extra):
    """Random spanning tree plus ``extra`` random edges, as an adjacency dict."""
    adj = {i: set() for i in range(n)}
    for v in range(1, n):
        u = rng.randrange(v)
        adj[u].add(v)
        adj[v].add(u)
    for _ in range(extra):
        a, b = rng.sample(range(n), 2)
        adj[a].add(b)
        adj[b].add(a)
    return {f"P{k}": [f"P{w}" for w in sorted(v)] for k, v in adj.items()}


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[n]
        terminalreporter.write_line(f"AC{n:<2} {'PASS' if ok else 'FAIL'}  {text}")
