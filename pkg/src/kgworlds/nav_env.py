"""Page-navigation environment with click and backtrack tools and a step cap."""

from __future__ import annotations

import hashlib
import json
import random
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol

from .corpus import Corpus
from .nav import DocGraph, NavTask, build_doc_graph
from .ports import TransportError

STEP_CAP = 30
MODES = ("links_only", "content_links")


class EnvError(RuntimeError):
    pass


class InvalidActionError(EnvError):
    pass


class EpisodeOverError(EnvError):
    pass


@dataclass(frozen=True)
class Observation:
    page: str
    title: str
    links: tuple[tuple[str, str], ...]
    content: str | None
    steps_remaining: int
    target: str
    target_title: str
    target_content: str | None
    history: tuple[str, ...]

    def digest(self) -> str:
        body = json.dumps(asdict(self), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(body.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Action:
    tool: str  # click_link_to_page | backtrack_to_page_in_history
    page_id: str
    agent_text: str = ""


def click(page_id: str, text: str = "") -> Action:
    return Action("click_link_to_page", page_id, text)


def backtrack(page_id: str, text: str = "") -> Action:
    return Action("backtrack_to_page_in_history", page_id, text)


class NavEnvironment:
    """One variant's pages and links; episodes are created from it."""

    def __init__(self, graph: DocGraph, pages: Mapping[str, str], titles: Mapping[str, str],
                 displays: Mapping[tuple[str, str], str] | None = None, step_cap: int = STEP_CAP,
                 invalid_costs_step: bool = True):
        self.graph = graph
        self.out = graph.out_links()
        self.pages = dict(pages)
        self.titles = dict(titles)
        self.displays = dict(displays or {})
        self.step_cap = step_cap
        self.invalid_costs_step = invalid_costs_step

    @classmethod
    def from_corpus(cls, corpus: Corpus, variant: str, **kw) -> "NavEnvironment":
        view = corpus.view(variant)
        displays = {}
        for pid, page in view.items():
            for ref, shown, _ in page.refs:
                displays.setdefault((pid, ref), shown)
        titles = {pid: corpus.titles[variant][pid] for pid in view}
        return cls(build_doc_graph(corpus, variant), {p: v.text for p, v in view.items()}, titles, displays, **kw)

    def link_labels(self, page: str) -> set[str]:
        """Everything an agent can read off a page without opening its neighbors."""
        out = {self.titles[page]}
        out |= {self.displays.get((page, w), self.titles[w]) for w in self.out[page]}
        out |= {self.titles[w] for w in self.out[page]}
        return out

    def start_episode(self, task: NavTask, variant: str, mode: str) -> "Episode":
        if mode not in MODES:
            raise EnvError(f"unknown mode {mode!r}")
        for pid in (task.source, task.target):
            if pid not in self.pages:
                raise EnvError(f"page {pid} is not in the {variant} corpus")
        return Episode(self, task, variant, mode)

    def policy(self) -> dict:
        return {"step_cap": self.step_cap, "invalid_action_costs_step": self.invalid_costs_step,
                "history": "append_only"}


@dataclass
class Episode:
    env: NavEnvironment
    task: NavTask
    variant: str
    mode: str
    current: str = ""
    history: list[str] = field(default_factory=list)
    steps_used: int = 0
    status: str = "ongoing"
    reason: str = ""

    def __post_init__(self):
        self.current = self.task.source
        self.history = [self.task.source]
        if self.current == self.task.target:
            self.status = "success"

    def observe(self) -> Observation:
        env, pid = self.env, self.current
        links = tuple((w, env.displays.get((pid, w), env.titles[w])) for w in env.out[pid])
        with_content = self.mode == "content_links"
        return Observation(pid, env.titles[pid], links, env.pages[pid] if with_content else None,
                           env.step_cap - self.steps_used, self.task.target, env.titles[self.task.target],
                           env.pages[self.task.target] if with_content else None, tuple(self.history))

    def _charge(self) -> None:
        if self.status != "ongoing":
            raise EpisodeOverError(f"episode already ended ({self.status})")
        self.steps_used += 1

    def _settle(self) -> None:
        if self.current == self.task.target:
            self.status = "success"
        elif self.steps_used >= self.env.step_cap:
            self.status, self.reason = "failure", "step_cap"

    def _invalid(self, message: str) -> None:
        if not self.env.invalid_costs_step:
            self.steps_used -= 1
        self._settle()
        raise InvalidActionError(message)

    def click_link(self, page_id: str) -> Observation:
        self._charge()
        if page_id not in self.env.out[self.current]:
            self._invalid(f"{page_id} is not linked from {self.current}")
        self.current = page_id
        self.history.append(page_id)
        self._settle()
        return self.observe()

    def backtrack(self, page_id: str) -> Observation:
        self._charge()
        if page_id not in self.history:
            self._invalid(f"{page_id} has not been visited")
        self.current = page_id
        self.history.append(page_id)
        self._settle()
        return self.observe()

    def apply(self, action: Action) -> Observation:
        if action.tool == "click_link_to_page":
            return self.click_link(action.page_id)
        if action.tool == "backtrack_to_page_in_history":
            return self.backtrack(action.page_id)
        self._charge()
        self._invalid(f"unknown tool {action.tool!r}")
        raise AssertionError("unreachable")


# --- agents -------------------------------------------------------------------

class Agent(Protocol):
    name: str

    def decide(self, obs: Observation, scratch: dict) -> Action: ...


class BFSOracleAgent:
    """Follows a directed shortest path; a test harness, not a model."""

    name = "bfs_oracle"

    def __init__(self, graph: DocGraph):
        self.out = graph.out_links()

    def decide(self, obs: Observation, scratch: dict) -> Action:
        parent = {obs.page: None}
        q = deque([obs.page])
        while q:
            v = q.popleft()
            if v == obs.target:
                break
            for w in self.out[v]:
                if w not in parent:
                    parent[w] = v
                    q.append(w)
        if obs.target not in parent:
            return click(obs.page, "No route to the target.")
        step = obs.target
        while parent[step] != obs.page:
            step = parent[step]
        shown = dict(obs.links)[step]
        return click(step, f"Opening {shown}, which is on the shortest route.")


class RandomClickAgent:
    name = "random_click"

    def __init__(self, seed: int = 0):
        self.seed = seed

    def decide(self, obs: Observation, scratch: dict) -> Action:
        rng = scratch.setdefault("rng", random.Random(f"{self.seed}:{obs.target}:{obs.history[0]}"))
        if not obs.links:
            return backtrack(obs.history[0], "Dead end, going back to the start.")
        pid, shown = obs.links[rng.randrange(len(obs.links))]
        return click(pid, f"Trying {shown}.")


class ScriptedAgent:
    name = "scripted"

    def __init__(self, actions: Iterable[Action]):
        self.actions = list(actions)

    def decide(self, obs: Observation, scratch: dict) -> Action:
        i = scratch.get("i", 0)
        scratch["i"] = i + 1
        if i >= len(self.actions):
            raise TransportError("script exhausted")
        return self.actions[i]


class RecallAgent:
    """Stands in for a model with world knowledge of the real entities.

    ``knowledge`` maps a real label to labels it associates with it.  When
    a page title or link text is familiar, the agent talks about what it
    recalls and prefers links it believes lead towards the target.  Under
    synthetic names nothing is familiar, so it falls back to random clicks.
    """

    name = "recall"

    def __init__(self, knowledge: Mapping[str, Iterable[str]], seed: int = 0):
        self.knowledge = {k: sorted(set(v)) for k, v in knowledge.items()}
        self.seed = seed

    def decide(self, obs: Observation, scratch: dict) -> Action:
        rng = scratch.setdefault("rng", random.Random(f"{self.seed}:{obs.target}:{obs.history[0]}"))
        near_target = set(self.knowledge.get(obs.target_title, ()))
        notes = []
        for label in (obs.title, obs.target_title):
            if label in self.knowledge and self.knowledge[label]:
                notes.append(f"{label} brings {self.knowledge[label][0]} to mind.")
        visited = set(obs.history)
        choices = [(p, s) for p, s in obs.links if p not in visited] or list(obs.links)
        if not choices:
            return backtrack(obs.history[0], " ".join(notes + ["Dead end."]))
        for pid, shown in choices:
            if pid == obs.target or shown in near_target:
                return click(pid, " ".join(notes + [f"{shown} should be close to the target."]))
        pid, shown = choices[rng.randrange(len(choices))]
        return click(pid, " ".join(notes + [f"Trying {shown}."]))


# --- runner -------------------------------------------------------------------

@dataclass
class Transcript:
    header: dict
    steps: list[dict]
    terminal: dict

    def lines(self) -> list[str]:
        recs = [{"type": "header", **self.header}]
        recs += [{"type": "step", **s} for s in self.steps]
        recs.append({"type": "terminal", **self.terminal})
        return [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in recs]

    def as_mention_input(self) -> dict:
        return {"source": self.header["source"], "target": self.header["target"],
                "source_title": self.header["source_title"], "target_title": self.header["target_title"],
                "steps": self.steps}

    @classmethod
    def from_lines(cls, lines: list[str]) -> list["Transcript"]:
        out, cur = [], None
        for line in lines:
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "header":
                cur = cls(rec, [], {})
            elif kind == "step":
                cur.steps.append(rec)
            else:
                cur.terminal = rec
                out.append(cur)
        return out


def run_episode(env: NavEnvironment, task: NavTask, agent: Agent, variant: str, mode: str) -> Transcript:
    ep = env.start_episode(task, variant, mode)
    header = {"pair_id": task.pair_id, "variant": variant, "mode": mode, "agent": agent.name,
              "source": task.source, "target": task.target, "source_title": env.titles[task.source],
              "target_title": env.titles[task.target], "policy": env.policy()}
    steps = []
    scratch: dict = {}
    obs = ep.observe()
    while ep.status == "ongoing":
        try:
            action = agent.decide(obs, scratch)
        except TransportError as exc:
            ep.status, ep.reason = "failure", "agent_error"
            steps.append({"step": ep.steps_used, "page": ep.current, "observation": obs.digest(),
                          "action": None, "agent_text": "", "valid": False, "error": str(exc)})
            break
        page = ep.current
        record = {"step": ep.steps_used + 1, "page": page, "observation": obs.digest(),
                  "action": {"tool": action.tool, "page_id": action.page_id},
                  "agent_text": action.agent_text}
        try:
            obs = ep.apply(action)
            record["valid"] = True
        except InvalidActionError as exc:
            record["valid"] = False
            record["error"] = str(exc)
            obs = ep.observe()
        record["page_after"] = ep.current
        steps.append(record)
    terminal = {"status": ep.status, "reason": ep.reason, "steps": ep.steps_used, "path": list(ep.history)}
    return Transcript(header, steps, terminal)


def run_agent(tasks: Iterable[NavTask], agent_factory: Callable[[], Agent], env: NavEnvironment,
              variant: str, mode: str) -> list[Transcript]:
    return [run_episode(env, t, agent_factory(), variant, mode) for t in tasks]


def save_transcripts(transcripts: list[Transcript], path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("".join(x + "\n" for t in transcripts for x in t.lines()), encoding="utf-8")


def load_transcripts(path: str | Path) -> list[Transcript]:
    return Transcript.from_lines([x for x in Path(path).read_text(encoding="utf-8").splitlines() if x.strip()])
