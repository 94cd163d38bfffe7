"""Preparing an RL corpus: seeded draw, MCQ reformulation, yes/no downsampling."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from ..ingest import Reject
from ..schema import MCQ_TASKS, Turn, VqaSample
from .templates import SynthesisError

OPTION_LINE_RE = re.compile(r"^\s*([A-E])[.)]\s+(.*\S)\s*$")
OPTION_REFERENCE_RE = re.compile(r"\b(?:options?|choices?)\s*\(?[A-E]\b", re.IGNORECASE)
_NORMALIZE_RE = re.compile(r"[^\w\s]")


class ReformulationError(SynthesisError):
    pass


class NeedsReview(ReformulationError):
    """The stem cannot stand without its options and needs a human look."""


def normalize_answer(text: str) -> str:
    return " ".join(_NORMALIZE_RE.sub(" ", text.lower()).split())


def is_yes_no(sample: VqaSample) -> bool:
    if sample.task not in ("open-qa", "mcq"):
        return False
    if sample.task == "mcq":
        opt = sample.correct_option
        gold = opt.text if opt else ""
    else:
        gold = sample.answer
    return normalize_answer(gold) in ("yes", "no")


def mcq_to_open(sample: VqaSample) -> VqaSample:
    """Drop the option block and answer with the correct option's text."""
    if sample.task not in MCQ_TASKS or not sample.answer_space:
        raise ReformulationError(f"{sample.id}: not a multiple-choice sample (task={sample.task})")
    correct = sample.correct_option
    if correct is None:
        raise ReformulationError(f"{sample.id}: no single correct option")
    idx = next(i for i, t in enumerate(sample.turns) if t.speaker == "human")
    lines = sample.turns[idx].text.split("\n")
    stem_lines, option_lines = [], []
    for line in lines:
        m = OPTION_LINE_RE.match(line)
        if m:
            option_lines.append((m.group(1), m.group(2)))
        elif option_lines:
            raise ReformulationError(f"{sample.id}: text after the option block")
        else:
            stem_lines.append(line)
    expected = [(o.label, o.text) for o in sample.answer_space]
    if option_lines != expected:
        raise ReformulationError(f"{sample.id}: option block does not match answer space")
    stem = "\n".join(stem_lines).rstrip()
    if OPTION_REFERENCE_RE.search(stem):
        raise NeedsReview(f"{sample.id}: stem refers to a lettered option")
    turns = list(sample.turns)
    turns[idx] = Turn("human", stem)
    turns[idx + 1] = Turn("assistant", correct.text)
    return replace(sample, task="open-qa", answer_space=None, turns=tuple(turns))


def yes_no_keep_count(n_yes_no: int, n_other: int, target_frac: float) -> int:
    """Solve k / (n_other + k) = target_frac, round half up, cap at n_yes_no."""
    if not 0 < target_frac < 1:
        raise ValueError(f"target fraction must be in (0, 1), got {target_frac}")
    exact = Decimal(repr(target_frac)) * n_other / (1 - Decimal(repr(target_frac)))
    k = int(exact.quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return min(k, n_yes_no)


def downsample_yes_no(samples: Iterable[VqaSample], target_frac: float, seed: int) -> list[VqaSample]:
    """Keep a seeded uniform subset of yes/no samples so they make up ``target_frac``.

    Non-yes/no samples pass through untouched and in order. If yes/no samples
    are already at or below the target, nothing is dropped.
    """
    items = list(samples)
    yn = [i for i, s in enumerate(items) if is_yes_no(s)]
    if not yn:
        return items
    keep_n = yes_no_keep_count(len(yn), len(items) - len(yn), target_frac)
    if keep_n >= len(yn):
        return items
    kept = set(random.Random(seed).sample(yn, keep_n))
    drop = set(yn) - kept
    return [s for i, s in enumerate(items) if i not in drop]


STRATIFY_FIELDS = ("modality", "task")


def _allocate(sizes: dict[str, int], n: int) -> dict[str, int]:
    """Largest-remainder split of n proportional to group sizes (ties by name)."""
    total = sum(sizes.values())
    quotas = {k: n * v / total for k, v in sizes.items()}
    alloc = {k: int(q) for k, q in quotas.items()}
    order = sorted(sizes, key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in order[: n - sum(alloc.values())]:
        alloc[k] += 1
    return alloc


def draw(samples: Sequence[VqaSample], n: int, seed: int, stratify: str | None = None) -> list[VqaSample]:
    """Seeded draw of ``n`` samples, returned in corpus order.

    Uniform by default; with ``stratify`` ("modality" or "task") each group
    contributes in proportion to its share of the corpus.
    """
    if n > len(samples):
        raise ValueError(f"cannot draw {n} samples from a corpus of {len(samples)}")
    rng = random.Random(seed)
    if stratify is None:
        return [samples[i] for i in sorted(rng.sample(range(len(samples)), n))]
    if stratify not in STRATIFY_FIELDS:
        raise ValueError(f"stratify must be one of {STRATIFY_FIELDS}, got {stratify!r}")
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(getattr(s, stratify), []).append(i)
    alloc = _allocate({k: len(v) for k, v in groups.items()}, n)
    picked: list[int] = []
    for k in sorted(groups):
        picked += rng.sample(groups[k], alloc[k])
    return [samples[i] for i in sorted(picked)]


@dataclass
class GrpoPrep:
    samples: list[VqaSample]
    rejects: list[Reject] = field(default_factory=list)
    drawn: int = 0
    reformulated: int = 0
    yes_no_before: int = 0
    yes_no_after: int = 0


def prepare_grpo(
    corpus: Sequence[VqaSample], n: int | None, target_frac: float, seed: int, stratify: str | None = None
) -> GrpoPrep:
    drawn = draw(corpus, len(corpus) if n is None else n, seed, stratify)
    rejects: list[Reject] = []
    converted = []
    reformulated = 0
    for s in drawn:
        if s.task in MCQ_TASKS:
            try:
                s = mcq_to_open(s)
            except ReformulationError as e:
                rejects.append(Reject(s.id, str(e)))
                continue
            reformulated += 1
        converted.append(s)
    before = sum(map(is_yes_no, converted))
    final = downsample_yes_no(converted, target_frac, seed)
    return GrpoPrep(
        samples=final,
        rejects=rejects,
        drawn=len(drawn),
        reformulated=reformulated,
        yes_no_before=before,
        yes_no_after=sum(map(is_yes_no, final)),
    )
