"""Scoring: answer normalization, token F1, recall@k, navigation success, KA."""

from __future__ import annotations

import csv
import io
import json
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class EvalInputError(ValueError):
    pass


class AlignmentError(EvalInputError):
    pass


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = str.maketrans("", "", string.punctuation)


def normalize_answer(text: str) -> list[str]:
    """Lowercase, drop punctuation and articles, split on whitespace."""
    text = text.lower().translate(_PUNCT)
    return _ARTICLES.sub(" ", text).split()


def answer_key(text: str) -> str:
    return " ".join(normalize_answer(text))


def token_f1(prediction: str, gold: str) -> float:
    pred, ref = normalize_answer(prediction), normalize_answer(gold)
    if not pred and not ref:
        return 1.0
    if not pred or not ref:
        return 0.0
    common = sum((Counter(pred) & Counter(ref)).values())
    if common == 0:
        return 0.0
    p, r = common / len(pred), common / len(ref)
    return 2 * p * r / (p + r)


def recall_at_k(retrieved: Sequence[str], gold: Iterable[str], k: int = 5) -> float:
    gold = set(gold)
    if not gold:
        raise EvalInputError("recall@k needs at least one gold page")
    if k < 1:
        raise EvalInputError("k must be >= 1")
    return len(gold & set(retrieved[:k])) / len(gold)


def nav_success_rate(statuses: Iterable[str]) -> float:
    """Fraction of terminal episodes with status ``success``."""
    statuses = list(statuses)
    if not statuses:
        raise EvalInputError("no transcripts to score")
    return sum(s == "success" for s in statuses) / len(statuses)


@dataclass
class EvalReport:
    variant: str
    condition: str
    scores: dict[str, float]  # pair_id -> score in [0, 1]
    metric: str = "f1"

    @property
    def aggregate(self) -> float:
        if not self.scores:
            raise EvalInputError("empty report")
        return 100.0 * sum(self.scores.values()) / len(self.scores)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "condition": self.condition, "metric": self.metric,
                "aggregate": round(self.aggregate, 10), "n": len(self.scores),
                "scores": dict(sorted(self.scores.items()))}

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalReport":
        report = cls(data["variant"], data["condition"], dict(data["scores"]), data.get("metric", "f1"))
        if "aggregate" in data and abs(report.aggregate - data["aggregate"]) > 1e-9:
            raise EvalInputError("stored aggregate disagrees with per-task scores")
        return report


@dataclass
class KaSummary:
    condition: str
    p_real: float
    p_synth: float
    ka: float

    def to_dict(self) -> dict:
        return {"condition": self.condition, "p_real": self.p_real, "p_synth": self.p_synth, "ka": self.ka}


def knowledge_advantage(report_r: EvalReport, report_s: EvalReport, check_pairs: bool = True) -> KaSummary:
    if report_r.condition != report_s.condition:
        raise AlignmentError(f"conditions differ: {report_r.condition} vs {report_s.condition}")
    if check_pairs and set(report_r.scores) != set(report_s.scores):
        diff = sorted(set(report_r.scores) ^ set(report_s.scores))
        raise AlignmentError(f"pair ids differ between variants, e.g. {diff[:5]}")
    p_r, p_s = report_r.aggregate, report_s.aggregate
    return KaSummary(report_r.condition, p_r, p_s, p_r - p_s)


def ka_from_aggregates(condition: str, p_real: float, p_synth: float) -> KaSummary:
    return KaSummary(condition, p_real, p_synth, p_real - p_synth)


def ka_delta(base: KaSummary, other: KaSummary) -> float:
    """How much of the base gap a richer condition closes."""
    return base.ka - other.ka


def _label_pattern(labels: Iterable[str]) -> re.Pattern | None:
    labels = sorted({x for x in labels if x}, key=lambda x: (-len(x), x))
    if not labels:
        return None
    return re.compile(r"(?<!\w)(?:" + "|".join(re.escape(x) for x in labels) + r")(?!\w)")


def external_mention_rate(transcripts: Iterable[Mapping], labels: Iterable[str],
                          page_labels: Mapping[str, Iterable[str]]) -> float:
    """Share of agent steps naming a corpus entity not yet seen in the episode.

    ``page_labels`` maps page id -> labels visible on that page (title and
    link texts).  Source and target titles count as seen from the start.
    """
    pattern = _label_pattern(labels)
    steps = mentioned = 0
    for tr in transcripts:
        seen: set[str] = set()
        for pid in (tr["source"], tr["target"]):
            seen |= set(page_labels.get(pid, ()))
        seen.add(tr.get("source_title", ""))
        seen.add(tr.get("target_title", ""))
        for step in tr["steps"]:
            seen |= set(page_labels.get(step["page"], ()))
            steps += 1
            text = step.get("agent_text", "") or ""
            if pattern is not None and any(m.group(0) not in seen for m in pattern.finditer(text)):
                mentioned += 1
    if steps == 0:
        return 0.0
    return mentioned / steps


def render_table(rows: Sequence[KaSummary]) -> tuple[str, str]:
    """(csv, plain text) with one row per condition: RM, SM and KA, one decimal."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["condition", "RM", "SM", "KA"])
    lines = [f"{'condition':<16}{'RM':>8}{'SM':>8}{'KA':>8}"]
    for r in rows:
        w.writerow([r.condition, f"{r.p_real:.1f}", f"{r.p_synth:.1f}", f"{r.ka:.1f}"])
        lines.append(f"{r.condition:<16}{r.p_real:>8.1f}{r.p_synth:>8.1f}{r.ka:>8.1f}")
    return buf.getvalue(), "\n".join(lines) + "\n"


def score_qa(predictions: Mapping[str, str], gold: Mapping[str, str], variant: str,
             condition: str) -> EvalReport:
    missing = sorted(set(gold) - set(predictions))
    if missing:
        raise AlignmentError(f"predictions missing for {missing[:5]}")
    return EvalReport(variant, condition, {pid: token_f1(predictions[pid], gold[pid]) for pid in gold})


def read_jsonl(path: str | Path) -> list[dict]:
    return [json.loads(x) for x in Path(path).read_text(encoding="utf-8").splitlines() if x.strip()]
