"""Reward signals for recorded GRPO generation groups.

Each generation gets a binary format reward and an accuracy reward (option
matching for multiple choice, an LLM judge for open answers); totals are then
normalized within the group into advantages.
"""

from __future__ import annotations

import logging
import re
import string
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Sequence

import numpy as np

from .gateway import ChatRequest, GatewayError, LlmGateway

logger = logging.getLogger(__name__)

MCQ_TASKS = ("mcq", "video-mcq")
LETTERS = "ABCDE"

_THINK_OPEN = re.compile(r"<think>", re.IGNORECASE)
_THINK_CLOSE = re.compile(r"</think>", re.IGNORECASE)
_ANSWER_DELIM = re.compile(r"\banswer\s*[:：]", re.IGNORECASE)

# "Answer: B", "Answer: (b)", "Answer: **C**"
_EXPLICIT = re.compile(r"\banswer\s*[:：]\s*[\(\[\*]*\s*([A-Ea-e])(?![A-Za-z0-9])", re.IGNORECASE)
# "the answer is B", "correct option is (C)", "answer would be D"
_ASSERTED = re.compile(
    r"\b(?:answer|option|choice)\s+(?:is|would\s+be|should\s+be|must\s+be)\s*:?\s*"
    r"(?:option\s+|choice\s+)?[\(\[\*]*\s*([A-Ea-e])(?![A-Za-z0-9])",
    re.IGNORECASE,
)
# "option C is correct", "choice (B) is the best"
_OPTION_IS_RIGHT = re.compile(
    r"\b(?:option|choice)\s+[\(\[]?([A-E])[\)\]]?\s+is\s+(?:the\s+)?(?:correct|right|best)",
    re.IGNORECASE,
)
_ISOLATED = re.compile(r"(?<![A-Za-z0-9])([A-E])(?![A-Za-z0-9]|-[A-Za-z]|'[a-z])")
_NOT_BEFORE = re.compile(r"\bnot\s*[\(\[]?$", re.IGNORECASE)
_NEGATED_AFTER = re.compile(r"^[\)\]]?\s+(?:is|was)\s+(?:wrong|incorrect|not)\b", re.IGNORECASE)
# a letter followed by one of these words is still an option letter
_LETTER_VERBS = {"is", "was", "would", "seems", "appears", "and", "or", "because", "since"}


@dataclass(frozen=True)
class FormatSpec:
    """Structural template a generation must follow.

    With ``require_think`` the generation must hold exactly one
    ``<think>...</think>`` block followed by the answer; in all cases the
    answer delimiter appears exactly once with non-empty text after it.
    """

    require_think: bool = True


def answer_region(generation: str) -> str:
    """Text after the last ``</think>``, or the whole generation."""
    parts = _THINK_CLOSE.split(generation)
    return parts[-1]


def format_reward(generation: str, spec: FormatSpec = FormatSpec()) -> int:
    text = generation.strip()
    if not text:
        return 0
    opens, closes = list(_THINK_OPEN.finditer(text)), list(_THINK_CLOSE.finditer(text))
    if spec.require_think:
        if len(opens) != 1 or len(closes) != 1:
            return 0
        start, end = opens[0], closes[0]
        if text[: start.start()].strip() or end.start() < start.end():
            return 0
        if not text[start.end(): end.start()].strip():
            return 0
    elif len(opens) > 1 or len(opens) != len(closes):
        return 0
    tail = answer_region(text)
    delims = list(_ANSWER_DELIM.finditer(tail))
    if len(delims) != 1:
        return 0
    return int(bool(tail[delims[0].end():].strip()))


def _is_prose(region: str, m: re.Match) -> bool:
    before, after = region[: m.start()], region[m.end():]
    if _NOT_BEFORE.search(before) or _NEGATED_AFTER.match(after):
        return True
    # "A large mass", "vitamin D deficiency", "B cells": a letter used as a word
    nxt = re.match(r"\s+([a-z]+)", after)
    return bool(nxt and nxt.group(1) not in _LETTER_VERBS)


def extract_option(generation: str) -> str | None:
    """The final asserted option letter in the answer region, if any.

    Precedence: an explicit ``Answer: X``; then phrases such as "the answer
    is X" or "option X is correct"; then the last standalone capital A-E that
    is not used as a word ("A large mass", "B cells") or negated ("not B", "B is wrong").
    Within a rule the last occurrence wins.
    """
    region = answer_region(generation)
    hits = list(_EXPLICIT.finditer(region))
    if hits:
        return hits[-1].group(1).upper()
    hits = sorted([*_ASSERTED.finditer(region), *_OPTION_IS_RIGHT.finditer(region)], key=lambda m: m.start())
    if hits:
        return hits[-1].group(1).upper()
    for m in reversed(list(_ISOLATED.finditer(region))):
        if not _is_prose(region, m):
            return m.group(1)
    return None


def match_option(generation: str, gold_letter: str) -> int:
    gold = gold_letter.strip().upper()
    if len(gold) != 1 or gold not in LETTERS:
        raise ValueError(f"gold letter must be one of {LETTERS}, got {gold_letter!r}")
    return int(extract_option(generation) == gold)


def _judge_template() -> str:
    return resources.files("medcurate.data").joinpath("prompts/judge.txt").read_text(encoding="utf-8")


_VERDICT_LINE = re.compile(r"verdict\s*[:：]\s*\**\s*(correct|incorrect)\b", re.IGNORECASE)
_VERDICT_ONLY = re.compile(r"^\W*(correct|incorrect)\W*$", re.IGNORECASE)


def parse_verdict(text: str) -> str | None:
    """``"CORRECT"``, ``"INCORRECT"``, or None when the reply has no verdict."""
    m = _VERDICT_LINE.search(text)
    if m:
        return m.group(1).upper()
    m = _VERDICT_ONLY.match(text.strip())
    return m.group(1).upper() if m else None


def final_answer(generation: str) -> str:
    """The answer text a judge should see: after the delimiter when present."""
    region = answer_region(generation)
    delims = list(_ANSWER_DELIM.finditer(region))
    return region[delims[-1].end():].strip() if delims else region.strip()


def judge_request(generation: str, gold: str, question: str = "", template: str | None = None) -> ChatRequest:
    prompt = string.Template(template or _judge_template()).safe_substitute(
        question=question or "(not provided)", reference=gold, candidate=final_answer(generation)
    )
    return ChatRequest(prompt, system="You are a strict medical answer grader.")


@dataclass(frozen=True)
class JudgeResult:
    score: int
    verdict: str | None
    response_id: str
    raw: str

    @property
    def parsed(self) -> bool:
        return self.verdict is not None

    def audit(self) -> dict[str, Any]:
        return {"verdict": self.verdict, "response_id": self.response_id, "parsed": self.parsed}


def _to_judge_result(text: str, key: str) -> JudgeResult:
    verdict = parse_verdict(text)
    if verdict is None:
        logger.warning("unparseable judge verdict for response %s: %r", key, text[:200])
    return JudgeResult(int(verdict == "CORRECT"), verdict, key, text)


def judge_open_answer(
    generation: str, gold: str, gw: LlmGateway, question: str = "", template: str | None = None
) -> JudgeResult:
    resp = gw.complete(judge_request(generation, gold, question, template))
    return _to_judge_result(resp.text, resp.key)


def group_advantages(rewards: Sequence[float], eps: float = 1e-6) -> np.ndarray:
    """(r - mean) / max(std, eps) with the population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    return (r - r.mean()) / max(float(r.std()), eps)


@dataclass(frozen=True)
class GrpoConfig:
    num_generations: int = 8
    temperature: float = 0.9
    beta: float = 0.04
    num_groups: int = 4
    eps: float = 1e-6
    format_weight: float = 0.5
    accuracy_weight: float = 0.5

    def __post_init__(self) -> None:
        if self.num_generations < 2:
            raise ValueError("num_generations must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not self.eps > 0:
            raise ValueError("eps must be > 0")


@dataclass(frozen=True)
class GenerationGroup:
    prompt_id: str
    gold: str
    task: str
    generations: tuple[str, ...]
    question: str = ""

    def __post_init__(self) -> None:
        if len(self.generations) < 2:
            raise ValueError(f"{self.prompt_id}: a group needs at least two generations")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> GenerationGroup:
        return cls(str(d["prompt_id"]), str(d["gold"]), str(d["task"]), tuple(d["generations"]), d.get("question", ""))


@dataclass(frozen=True)
class RewardBreakdown:
    format_reward: int
    accuracy_reward: float
    total: float
    judge: JudgeResult | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"format": self.format_reward, "accuracy": self.accuracy_reward, "total": self.total}


def gold_letter(gold: str) -> str:
    """Accept ``"B"`` or ``"B. pneumothorax"`` style gold answers."""
    g = gold.strip()
    if g and g[0].upper() in LETTERS and (len(g) == 1 or not g[1].isalnum()):
        return g[0].upper()
    raise ValueError(f"cannot read an option letter from gold answer {gold!r}")


@dataclass
class GroupScore:
    prompt_id: str
    breakdowns: list[RewardBreakdown]
    advantages: np.ndarray = field(repr=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "rewards": [b.total for b in self.breakdowns],
            "advantages": [round(float(a), 12) for a in self.advantages],
            "breakdown": [b.to_dict() for b in self.breakdowns],
            "judge_audit": [b.judge.audit() for b in self.breakdowns if b.judge is not None],
        }


def score_group(
    group: GenerationGroup,
    cfg: GrpoConfig = GrpoConfig(),
    gw: LlmGateway | None = None,
    fmt: FormatSpec = FormatSpec(),
) -> GroupScore:
    formats = [format_reward(g, fmt) for g in group.generations]
    judges: list[JudgeResult | None]
    if group.task in MCQ_TASKS:
        letter = gold_letter(group.gold)
        accuracy = [float(match_option(g, letter)) for g in group.generations]
        judges = [None] * len(accuracy)
    else:
        if gw is None:
            raise GatewayError(f"{group.prompt_id}: open-ended group needs a judge gateway")
        reqs = [judge_request(g, group.gold, group.question) for g in group.generations]
        results = gw.complete_batch(reqs)
        for res in results:
            if isinstance(res, Exception):
                raise res
        judges = [_to_judge_result(r.text, r.key) for r in results]
        accuracy = [float(j.score) for j in judges]
    breakdowns = [
        RewardBreakdown(f, a, cfg.format_weight * f + cfg.accuracy_weight * a, j)
        for f, a, j in zip(formats, accuracy, judges)
    ]
    adv = group_advantages([b.total for b in breakdowns], cfg.eps)
    return GroupScore(group.prompt_id, breakdowns, adv)
