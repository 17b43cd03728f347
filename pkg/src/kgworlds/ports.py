"""Text-generation ports: request contract, call log / cassette, retries, backends.

Every LM capability the pipeline needs goes through :class:`GenerationClient`
as a :class:`GenerationRequest` naming a prompt template and its variables.
Backends turn a request into response text:

* :class:`MockBackend` answers from the structured variables alone and is
  fully deterministic, so whole pipeline runs work offline.
* :class:`ChatBackend` renders the template and posts a chat-completion
  request to an HTTP endpoint configured through the environment.

The call log records one entry per logical call (request hash, attempts,
response) and doubles as a cassette: a client in ``replay`` mode serves
responses from a recorded log and never touches its backend.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Protocol

import jinja2
import jinja2.meta

from .timestamps import render_timestamp


class TransportError(RuntimeError):
    """The backend could not produce a response (network, quota, timeout)."""


class RequestError(ValueError):
    """A request names an unknown template or leaves template variables unbound."""


class ReplayMissError(TransportError):
    pass


# --- templates --------------------------------------------------------------

_ENV = jinja2.Environment(undefined=jinja2.StrictUndefined, keep_trailing_newline=True,
                          autoescape=False)
_ROLE = re.compile(r"^### (system|user)\s*$", re.M)


@lru_cache(maxsize=None)
def template_source(template_id: str) -> str:
    path = resources.files("kgworlds").joinpath(f"data/prompts/{template_id}.j2")
    if not path.is_file():
        raise RequestError(f"unknown prompt template {template_id!r}")
    return path.read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def template_variables(template_id: str) -> frozenset[str]:
    return frozenset(jinja2.meta.find_undeclared_variables(_ENV.parse(template_source(template_id))))


def render_messages(template_id: str, variables: Mapping[str, Any]) -> list[dict[str, str]]:
    """Render a template into chat messages split on ``### system`` / ``### user`` markers."""
    text = _ENV.from_string(template_source(template_id)).render(**variables)
    parts = _ROLE.split(text)
    messages = []
    for role, body in zip(parts[1::2], parts[2::2]):
        messages.append({"role": role, "content": body.strip()})
    return messages or [{"role": "user", "content": text.strip()}]


@dataclass(frozen=True)
class GenerationRequest:
    template_id: str
    variables: Mapping[str, Any]
    max_tokens: int | None = None

    def validate(self) -> None:
        missing = template_variables(self.template_id) - set(self.variables)
        if missing:
            raise RequestError(f"{self.template_id}: unbound template variables {sorted(missing)}")

    def digest(self) -> str:
        body = json.dumps({"template": self.template_id, "variables": self.variables,
                           "max_tokens": self.max_tokens}, sort_keys=True, ensure_ascii=False, default=str)
        return hashlib.sha256(body.encode()).hexdigest()


class Backend(Protocol):
    def complete(self, request: GenerationRequest) -> str: ...


# --- call log / cassette ----------------------------------------------------

class CallLog:
    """Append-only record of logical calls; safe to share between threads."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.entries: list[dict] = []
        self._lock = threading.Lock()
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, entry: dict) -> None:
        with self._lock:
            entry = {"seq": len(self.entries) + 1, **entry}
            self.entries.append(entry)
            if self.path:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(entry, ensure_ascii=False, sort_keys=True) + "\n")

    @staticmethod
    def read(path: str | Path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]

    def retries(self) -> int:
        return sum(e["attempts"] - 1 for e in self.entries)


class GenerationClient:
    """Validates requests, retries transport failures, logs, and replays cassettes."""

    def __init__(self, backend: Backend | None, log: CallLog | None = None, max_retries: int = 2,
                 in_flight: int = 4, cassette: list[dict] | None = None):
        self.backend = backend
        self.log = log if log is not None else CallLog()
        self.max_retries = max_retries
        self._slots = threading.BoundedSemaphore(max(1, in_flight))
        self._replay = None
        if cassette is not None:
            self._replay = {e["hash"]: e["response"] for e in cassette}

    def call(self, request: GenerationRequest) -> str:
        request.validate()
        digest = request.digest()
        if self._replay is not None:
            if digest not in self._replay:
                raise ReplayMissError(f"no recorded response for {request.template_id} call {digest[:12]}")
            response = self._replay[digest]
            self.log.append({"template": request.template_id, "hash": digest, "attempts": 1,
                             "response": response, "replayed": True})
            return response
        if self.backend is None:
            raise TransportError("no backend configured")
        attempts = 0
        with self._slots:
            while True:
                attempts += 1
                try:
                    response = self.backend.complete(request)
                    break
                except TransportError as exc:
                    if attempts > self.max_retries:
                        self.log.append({"template": request.template_id, "hash": digest,
                                         "attempts": attempts, "response": None, "error": str(exc)})
                        raise
        self.log.append({"template": request.template_id, "hash": digest, "attempts": attempts,
                         "response": response})
        return response


# --- response parsing helpers ----------------------------------------------

def _strip_fences(text: str) -> str:
    text = text.strip()
    m = re.match(r"^```(?:json)?\s*(.*?)\s*```$", text, re.S)
    return m.group(1) if m else text


def parse_json_object(text: str) -> dict:
    body = _strip_fences(text)
    start, end = body.find("{"), body.rfind("}")
    if start < 0 or end < start:
        raise TransportError("response carried no JSON object")
    try:
        return json.loads(body[start:end + 1])
    except json.JSONDecodeError as exc:
        raise TransportError(f"malformed JSON response: {exc.msg}") from None


def parse_prefixed(text: str, prefix: str) -> str:
    """Return what follows the last ``prefix`` line, e.g. ``Answer:`` or ``Question:``."""
    found = None
    for line in text.splitlines():
        s = line.strip()
        if s.startswith(prefix):
            found = s[len(prefix):].strip()
    if found is None:
        return text.strip().splitlines()[-1].strip() if text.strip() else ""
    return found


# --- port adapters ------------------------------------------------------------

class NameGenerator:
    """Proposes synthetic names for an entity type, optionally derived from parents."""

    def __init__(self, client: GenerationClient):
        self.client = client

    def propose(self, entity_type_label: str, parents: list[dict], n_candidates: int = 1,
                attempt: int = 0, entity_id: str = "") -> list[str]:
        template = "synthetic_name_related" if parents else "synthetic_names"
        text = self.client.call(GenerationRequest(template, {
            "entity_type_label": entity_type_label, "parents": parents,
            "n_candidates": n_candidates, "attempt": attempt, "entity_id": entity_id}))
        if parents:
            return [line.strip() for line in text.splitlines() if line.strip()][:1]
        return [x.strip().strip("`'\"") for x in text.split(",") if x.strip()]


class PageWriter:
    """Drafting, reference insertion and real-mapped restoration of pages."""

    def __init__(self, client: GenerationClient):
        self.client = client

    def write_page(self, title: str, type_label: str, facts: list[dict],
                   relation_defs: Mapping[str, str], related_types: Mapping[str, str]) -> str:
        return self.client.call(GenerationRequest("page", {
            "title": title, "type_label": type_label, "facts": facts,
            "relation_defs": dict(relation_defs), "related_types": dict(related_types)})).strip("\n")

    def link_references(self, draft: str, id_to_label: Mapping[str, str]) -> str:
        return self.client.call(GenerationRequest("symbolic_refs", {
            "draft": draft, "entities": dict(id_to_label)})).strip("\n")

    def restore(self, text: str, synth_title: str, real_title: str, mapping: Mapping[str, str]) -> str:
        return self.client.call(GenerationRequest("restore", {
            "text": text, "synth_title": synth_title, "real_title": real_title,
            "mapping": dict(mapping)})).strip("\n")


class EntityGuesser:
    def __init__(self, client: GenerationClient):
        self.client = client

    def guess(self, page_text: str) -> str:
        return parse_prefixed(self.client.call(GenerationRequest("novelty_guess", {"page": page_text})), "Answer:")


class FactExtractor:
    def __init__(self, client: GenerationClient):
        self.client = client

    def extract(self, page_text: str, templates: Mapping[str, str],
                relation_defs: Mapping[str, str]) -> dict[str, list]:
        text = self.client.call(GenerationRequest("page_facts", {
            "page": page_text, "templates": dict(templates), "relation_defs": dict(relation_defs)}))
        out = parse_json_object(text)
        return {k: v for k, v in out.items() if isinstance(v, list)}


class QuestionWriter:
    def __init__(self, client: GenerationClient):
        self.client = client

    def single_hop(self, hops: list[dict], relation_defs: Mapping[str, str]) -> dict[str, str]:
        text = self.client.call(GenerationRequest("single_hop", {
            "hops": hops, "relation_defs": dict(relation_defs)}))
        return {k: str(v) for k, v in parse_json_object(text).items()}

    def compose(self, decomposed: list[dict]) -> str | None:
        text = self.client.call(GenerationRequest("compose", {"decomposed": decomposed}))
        q = parse_prefixed(text, "Question:")
        if not q or q.strip().rstrip(".").lower() == "no composition":
            return None
        return q


# --- deterministic mock -----------------------------------------------------

_SYLLABLES = ("ka", "lor", "vem", "tha", "ri", "sol", "mar", "quen", "dra", "el", "yor", "bel",
              "zan", "tir", "ost", "wen", "cal", "ny", "pha", "rou", "sen", "gal", "ith", "mon")
LINK = re.compile(r"\[([^\]]+)\]\(<ref:([^>]+)>\)")


def _seeded(*parts: Any) -> random.Random:
    digest = hashlib.sha256(json.dumps(parts, sort_keys=True, default=str).encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _word(rng: random.Random, lo: int = 2, hi: int = 3) -> str:
    return "".join(rng.choice(_SYLLABLES) for _ in range(rng.randint(lo, hi))).capitalize()


def render_value(obj: Mapping[str, Any]) -> str:
    """Prose for a rendered fact object: entity label or literal value."""
    if obj.get("kind") == "timestamp":
        return render_timestamp(obj["value"])
    return str(obj.get("label", obj.get("value", "")))


def mock_sentence(fact: Mapping[str, Any]) -> str:
    """``<Subject> <relation> <Object>[, in <time>].`` for one rendered fact."""
    s = f"{fact['subject']} {fact['relation']} {render_value(fact['object'])}"
    for q in fact.get("qualifiers", []):
        if q.get("kind") == "timestamp":
            s += f", in {render_timestamp(q['value'])}"
    return s + "."


def link_first_mentions(text: str, id_to_label: Mapping[str, str]) -> str:
    """Wrap the first whole-word mention of each label in a reference link."""
    taken: list[tuple[int, int]] = [(m.start(), m.end()) for m in LINK.finditer(text)]
    inserts = []
    for eid, label in sorted(id_to_label.items(), key=lambda kv: (-len(kv[1]), kv[0])):
        if not label:
            continue
        for m in re.finditer(r"(?<!\w)" + re.escape(label) + r"(?!\w)", text):
            if any(m.start() < e and s < m.end() for s, e in taken):
                continue
            taken.append((m.start(), m.end()))
            inserts.append((m.start(), m.end(), eid))
            break
    for start, end, eid in sorted(inserts, reverse=True):
        text = text[:start] + f"[{text[start:end]}](<ref:{eid}>)" + text[end:]
    return text


def substitute_labels(text: str, mapping: Mapping[str, str]) -> str:
    """Single-pass, longest-first, whole-word replacement of mapping keys."""
    keys = sorted((k for k in mapping if k), key=lambda k: (-len(k), k))
    if not keys:
        return text
    pattern = re.compile(r"(?<!\w)(" + "|".join(re.escape(k) for k in keys) + r")(?!\w)")
    return pattern.sub(lambda m: mapping[m.group(1)], text)


def strip_links(text: str) -> str:
    return LINK.sub(lambda m: m.group(1), text)


@dataclass
class MockProfile:
    """Behavior switches for :class:`MockBackend`.

    ``fail_schedule`` maps a 1-based logical call number to how many times
    that call fails with :class:`TransportError` before succeeding.
    """

    page_style: str = "plain"  # plain | glossed
    guess_strategy: str = "always_wrong"  # always_wrong | table
    guess_table: dict[str, str] = field(default_factory=dict)
    no_composition: bool = False
    fail_schedule: dict[int, int] = field(default_factory=dict)
    ref_drift: bool = False
    invented_reference: str | None = None


class MockBackend:
    def __init__(self, profile: MockProfile | None = None):
        self.profile = profile or MockProfile()
        self._calls = 0
        self._failed = 0
        self._lock = threading.Lock()
        self.handlers = {
            "synthetic_names": self._names,
            "synthetic_name_related": self._related_name,
            "page": self._page,
            "symbolic_refs": self._refs,
            "restore": self._restore,
            "novelty_guess": self._guess,
            "page_facts": self._facts,
            "single_hop": self._single_hop,
            "compose": self._compose,
        }

    def complete(self, request: GenerationRequest) -> str:
        with self._lock:
            call_no = self._calls + 1
            if self.profile.fail_schedule.get(call_no, 0) > self._failed:
                self._failed += 1
                raise TransportError(f"injected failure on call {call_no}")
            self._calls += 1
            self._failed = 0
        handler = self.handlers.get(request.template_id)
        if handler is None:
            raise RequestError(f"mock has no handler for {request.template_id}")
        return handler(request.variables)

    # names
    def _names(self, v):
        rng = _seeded("names", v["entity_type_label"], v.get("entity_id", ""), v["attempt"])
        person = any(w in v["entity_type_label"].lower() for w in ("human", "person"))
        names = []
        for _ in range(max(1, v["n_candidates"])):
            names.append(f"{_word(rng, 1, 2)} {_word(rng)}" if person else _word(rng))
        return ", ".join(names)

    def _related_name(self, v):
        rng = _seeded("related", v["entity_type_label"], v["parents"], v.get("entity_id", ""), v["attempt"])
        parent_part = " ".join(dict.fromkeys(p["new_label"] for p in v["parents"]))
        return f"{_word(rng, 1, 2)} {parent_part}"

    # pages
    def _page(self, v):
        lines = []
        for fact in v["facts"]:
            line = mock_sentence(fact)
            if self.profile.page_style == "glossed":
                gloss = v["relation_defs"].get(fact["relation"])
                if gloss:
                    line = line[:-1] + f" (the relation {fact['relation']} means {gloss})."
            lines.append(line)
        return "\n".join(lines)

    def _refs(self, v):
        out = link_first_mentions(v["draft"], v["entities"])
        if self.profile.invented_reference:
            out += f" See also [Elsewhere](<ref:{self.profile.invented_reference}>)."
        if self.profile.ref_drift:
            out = out.replace(" ", "  ")
        return out

    def _restore(self, v):
        mapping = dict(v["mapping"])
        mapping.setdefault(v["synth_title"], v["real_title"])
        return substitute_labels(v["text"], mapping)

    def _guess(self, v):
        answer = "Unknown"
        if self.profile.guess_strategy == "table":
            for needle, guess in sorted(self.profile.guess_table.items()):
                if needle in v["page"]:
                    answer = guess
                    break
        return f"Thought: the page gives too few clues.\nAnswer: {answer}"

    def _facts(self, v):
        lines = [strip_links(line).strip() for line in v["page"].splitlines()]
        if self.profile.page_style == "glossed":
            lines = [re.sub(r" \(the relation .*\)\.$", ".", line) for line in lines]
        out: dict[str, list] = {}
        for tid, template in v["templates"].items():
            parts = [p.strip() for p in template.split("->")]
            answers: list = []
            if len(parts) == 3:
                prefix = f"{parts[0]} {parts[1]} "
                for line in lines:
                    if line.startswith(prefix) and line.endswith("."):
                        answers.append(line[len(prefix):-1].split(", in ")[0])
            elif len(parts) == 5:
                # S -> r -> <ANS1> AND <ANS1> -> q -> <ANS2>
                prefix = f"{parts[0]} {parts[1]} "
                for line in lines:
                    if line.startswith(prefix) and ", in " in line:
                        body = line[len(prefix):-1]
                        obj, when = body.split(", in ", 1)
                        answers.append([obj, when.split(", in ")[0]])
            out[tid] = answers
        return json.dumps(out, ensure_ascii=False)

    # questions
    def _single_hop(self, v):
        out = {}
        for i, hop in enumerate(v["hops"], start=1):
            if hop.get("qualifier"):
                out[f"Q{i}"] = (f"What is the {hop['qualifier']} of {hop['relation']} "
                                f"{hop['via']} for {hop['subject']}?")
            else:
                out[f"Q{i}"] = f"What is the {hop['relation']} of {hop['subject']}?"
        return json.dumps(out, ensure_ascii=False)

    def _compose(self, v):
        if self.profile.no_composition:
            return "Thought: the chain does not read naturally.\nQuestion: No composition"
        phrases: dict[str, list[str]] = {}
        order = []
        for item in v["decomposed"]:
            m = re.match(r"^What is (.+)\?$", item["question"])
            if not m:
                return "Thought: unsupported question shape.\nQuestion: No composition"
            np_ = m.group(1)
            for bridge in item.get("bridges", []):
                if bridge in phrases:
                    np_ = re.sub(r"(?<!\w)" + re.escape(bridge) + r"(?!\w)",
                                 lambda _m, b=bridge: " and ".join(phrases[b]), np_, count=1)
            phrases.setdefault(item["answer"], []).append(np_)
            order.append(item["answer"])
        leaf = order[-1]
        return f"Thought: substitute each bridge by its description.\nQuestion: What is {' and '.join(phrases[leaf])}?"


# --- live backend -----------------------------------------------------------

class ChatBackend:
    """Minimal chat-completion client (OpenAI-compatible wire shape)."""

    def __init__(self, endpoint: str, model: str, api_key: str = "", timeout: float = 120.0):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout = timeout

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None) -> "ChatBackend":
        env = os.environ if environ is None else environ
        try:
            return cls(env["KGW_ENDPOINT"], env["KGW_MODEL"], env.get("KGW_API_KEY", ""))
        except KeyError as exc:
            raise RequestError(f"missing environment variable {exc.args[0]}") from None

    def complete(self, request: GenerationRequest) -> str:
        body = {"model": self.model, "messages": render_messages(request.template_id, request.variables)}
        if request.max_tokens:
            body["max_tokens"] = request.max_tokens
        req = urllib.request.Request(self.endpoint + "/chat/completions", data=json.dumps(body).encode(),
                                     headers={"Content-Type": "application/json",
                                              "Authorization": f"Bearer {self.api_key}"})
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                payload = json.loads(resp.read().decode())
        except (urllib.error.URLError, TimeoutError, OSError, json.JSONDecodeError) as exc:
            raise TransportError(str(exc)) from exc
        try:
            return payload["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError):
            raise TransportError("unexpected response shape") from None


def in_flight_from_env(default: int = 4) -> int:
    try:
        return int(os.environ.get("KGW_IN_FLIGHT", default))
    except ValueError:
        return default
