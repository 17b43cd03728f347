"""Hyperlink document graph, random-walk hitting times, navigation pair sampling."""

from __future__ import annotations

import json
import math
import random
from collections import deque
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from .corpus import Corpus

BUCKETS = ((50.0, 1e3), (1e3, 1e4), (1e4, 1e5), (1e5, 1e6), (1e6, 1e7))
BUCKET_NAMES = ("50-1K", "1K-10K", "10K-100K", "100K-1M", "1M-10M")
RESIDUAL_TOL = 1e-8
ATTEMPTS_PER_TASK = 200


class NavError(RuntimeError):
    pass


class SolverError(NavError):
    pass


def bucket_of(distance: float) -> str | None:
    """Bucket name for a distance; ranges are half-open except the last."""
    for (lo, hi), name in zip(BUCKETS, BUCKET_NAMES):
        if lo <= distance < hi or (name == BUCKET_NAMES[-1] and distance == hi):
            return name
    return None


@dataclass(frozen=True)
class DocGraph:
    nodes: tuple[str, ...]
    edges: frozenset[tuple[str, str]]

    @classmethod
    def from_edges(cls, nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> "DocGraph":
        nodes = tuple(sorted(set(nodes)))
        keep = set(nodes)
        return cls(nodes, frozenset((a, b) for a, b in edges if a != b and a in keep and b in keep))

    def out_links(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for a, b in sorted(self.edges):
            out[a].append(b)
        return out

    def undirected(self) -> dict[str, list[str]]:
        adj: dict[str, set[str]] = {n: set() for n in self.nodes}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return {n: sorted(v) for n, v in adj.items()}


def build_doc_graph(corpus: Corpus, variant: str = "sm") -> DocGraph:
    return DocGraph.from_edges(corpus.retained, corpus.hyperlink_edges(variant))


def bfs_distances(adj: dict[str, list[str]], source: str) -> dict[str, int]:
    dist = {source: 0}
    q = deque([source])
    while q:
        v = q.popleft()
        for w in adj[v]:
            if w not in dist:
                dist[w] = dist[v] + 1
                q.append(w)
    return dist


class HittingTimes:
    """Expected steps of a simple random walk to reach each target.

    For target t: h(t) = 0 and h(u) = 1 + mean over neighbors w of h(w).
    One sparse direct solve per target gives h(., t) for every source;
    results are cached.  A source whose walk can stray into a region that
    never reaches t gets ``inf``.
    """

    def __init__(self, adj: dict[str, list[str]]):
        self.adj = adj
        self.nodes = sorted(adj)
        self.index = {n: i for i, n in enumerate(self.nodes)}
        n = len(self.nodes)
        rows = [self.index[u] for u in self.nodes for _ in adj[u]]
        cols = [self.index[w] for u in self.nodes for w in adj[u]]
        self.a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        self.a.data[:] = 1.0  # collapse duplicate links
        deg = np.asarray(self.a.sum(axis=1)).ravel()
        self.deg = deg
        inv = np.divide(1.0, deg, out=np.zeros(n), where=deg > 0)
        self.p = sp.diags(inv) @ self.a
        self._cache: dict[str, dict[str, float]] = {}

    def _bad_mask(self, t: int) -> np.ndarray:
        n = len(self.nodes)
        # nodes that cannot reach t at all
        reach = np.zeros(n, dtype=bool)
        reach[t] = True
        frontier = reach.copy()
        at = self.a.T.tocsr()
        while frontier.any():
            nxt = (at @ frontier.astype(float)) > 0
            nxt &= ~reach
            reach |= nxt
            frontier = nxt
        bad = ~reach | (self.deg == 0)
        bad[t] = False
        # anything that can step into a bad node also has infinite expectation
        while True:
            spread = (self.a @ bad.astype(float)) > 0
            spread[t] = False
            new = bad | spread
            if (new == bad).all():
                return bad
            bad = new

    def to_target(self, target: str) -> dict[str, float]:
        if target in self._cache:
            return self._cache[target]
        if target not in self.index:
            raise NavError(f"unknown page {target}")
        t = self.index[target]
        bad = self._bad_mask(t)
        keep = ~bad
        keep[t] = False
        idx = np.flatnonzero(keep)
        h = np.full(len(self.nodes), math.inf)
        h[t] = 0.0
        if len(idx):
            sub = self.p[idx][:, idx]
            m = (sp.identity(len(idx), format="csc") - sub).tocsc()
            b = np.ones(len(idx))
            # the pattern is (nearly) symmetric, so minimum degree on A+A^T fills in least
            x = np.atleast_1d(spsolve(m, b, permc_spec="MMD_AT_PLUS_A"))
            resid = np.max(np.abs(m @ x - b)) / max(1.0, np.max(np.abs(x)))
            if not np.all(np.isfinite(x)) or resid > RESIDUAL_TOL:
                raise SolverError(f"hitting-time solve for {target} did not converge (residual {resid:.2e})")
            h[idx] = x
        out = {u: float(h[i]) for i, u in enumerate(self.nodes)}
        self._cache[target] = out
        return out

    def __call__(self, source: str, target: str) -> float:
        if source == target:
            raise NavError("source and target must differ")
        return self.to_target(target)[source]


def expected_hitting_time(graph: DocGraph, source: str, target: str, directed: bool = False) -> float:
    adj = graph.out_links() if directed else graph.undirected()
    return HittingTimes(adj)(source, target)


@dataclass(frozen=True)
class NavTask:
    pair_id: str
    source: str
    target: str
    expected_rw_distance: float
    bucket: str
    shortest_path_len: int
    directed_rw_distance: float | None = None

    def to_record(self) -> dict:
        d = asdict(self)
        d["diagnostics"] = {"directed_rw_distance": d.pop("directed_rw_distance")}
        if d["diagnostics"]["directed_rw_distance"] == math.inf:
            d["diagnostics"]["directed_rw_distance"] = "inf"
        return d

    @classmethod
    def from_record(cls, rec: dict) -> "NavTask":
        diag = rec.get("diagnostics", {}).get("directed_rw_distance")
        diag = math.inf if diag == "inf" else diag
        return cls(rec["pair_id"], rec["source"], rec["target"], rec["expected_rw_distance"],
                   rec["bucket"], rec["shortest_path_len"], diag)


def sample_nav_pairs(graph: DocGraph, per_bucket: int, rng_seed: int = 0,
                     attempts_per_task: int = ATTEMPTS_PER_TASK) -> tuple[list[NavTask], dict]:
    """Rejection-sample source/target pairs into the five difficulty buckets.

    Difficulty is the undirected hitting time; each kept pair must also be
    reachable along directed links.  Returns (tasks, shortfall report).
    """
    if len(graph.nodes) < 2:
        return [], {name: {"requested": per_bucket, "sampled": 0, "shortfall": per_bucket}
                    for name in BUCKET_NAMES}
    rng = random.Random(rng_seed)
    undirected = HittingTimes(graph.undirected())
    out_links = graph.out_links()
    directed = HittingTimes(out_links)
    filled: dict[str, list[NavTask]] = {name: [] for name in BUCKET_NAMES}
    attempts = {name: 0 for name in BUCKET_NAMES}
    budget = attempts_per_task * per_bucket
    seen: set[tuple[str, str]] = set()
    nodes = list(graph.nodes)
    bfs_cache: dict[str, dict[str, int]] = {}
    total_budget = budget * len(BUCKET_NAMES)
    tries = 0
    while tries < total_budget and any(len(v) < per_bucket for v in filled.values()):
        tries += 1
        s, t = rng.sample(nodes, 2)
        if (s, t) in seen:
            continue
        seen.add((s, t))
        d = undirected(s, t)
        name = bucket_of(d)
        if name is None or len(filled[name]) >= per_bucket:
            continue
        attempts[name] += 1
        if attempts[name] > budget:
            continue
        if s not in bfs_cache:
            bfs_cache[s] = bfs_distances(out_links, s)
        sp_len = bfs_cache[s].get(t)
        if sp_len is None:
            continue
        filled[name].append(NavTask("", s, t, d, name, sp_len, directed(s, t)))
    tasks = []
    report = {}
    for name in BUCKET_NAMES:
        for i, task in enumerate(filled[name], start=1):
            tasks.append(NavTask(f"nav-{BUCKET_NAMES.index(name)}-{i:04d}", task.source, task.target,
                                 task.expected_rw_distance, name, task.shortest_path_len,
                                 task.directed_rw_distance))
        report[name] = {"requested": per_bucket, "sampled": len(filled[name]),
                        "shortfall": per_bucket - len(filled[name])}
    return tasks, report


def save_tasks(tasks: list[NavTask], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(json.dumps(t.to_record(), sort_keys=True) + "\n" for t in tasks))


def load_tasks(path: str | Path) -> list[NavTask]:
    return [NavTask.from_record(json.loads(x)) for x in Path(path).read_text().splitlines() if x.strip()]
