"""Template-driven conversion of ingest records into VQA samples."""

from __future__ import annotations

import json
import random
import string
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from ..ingest import Caption, ClassLabel, IngestRecord, MaskRegion, VolumeAnnotation
from ..schema import OPTION_LABELS, MAX_OPTIONS, Option, SourceRef, Turn, VqaSample, placeholder

PLACEHOLDERS = frozenset({"modality", "target"})

MODALITY_NAMES = {
    "xray": "X-ray",
    "ct": "CT",
    "mri": "MRI",
    "ultrasound": "ultrasound",
    "dermoscopy": "dermoscopy",
    "ophthalmology": "fundus",
    "pathology": "pathology",
    "endoscopy": "endoscopy",
    "video": "video",
    "multimodal": "medical",
}


class SynthesisError(ValueError):
    pass


class InsufficientDistractorsError(SynthesisError):
    pass


def record_rng(seed: int, *parts: str) -> random.Random:
    """Per-record RNG that depends only on the seed and the record identity."""
    return random.Random("|".join([str(seed), *parts]))


@dataclass(frozen=True)
class SynonymPool:
    templates: dict[str, tuple[str, ...]]

    def __post_init__(self) -> None:
        for task, items in self.templates.items():
            if not items:
                raise SynthesisError(f"synonym pool for {task!r} is empty")
            for t in items:
                fields = {f for _, f, _, _ in string.Formatter().parse(t) if f is not None}
                extra = fields - PLACEHOLDERS
                if extra:
                    raise SynthesisError(f"template {t!r} uses undeclared placeholders {sorted(extra)}")

    @classmethod
    def from_dict(cls, d: dict[str, Sequence[str]]) -> SynonymPool:
        return cls({k: tuple(v) for k, v in d.items()})

    @classmethod
    def load(cls, path: str | Path | None = None) -> SynonymPool:
        if path is None:
            text = resources.files("medcurate.data").joinpath("pools.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    def draw(self, task: str, rng: random.Random, **slots: str) -> str:
        items = self.templates.get(task)
        if not items:
            raise SynthesisError(f"synonym pool has no templates for {task!r}")
        return rng.choice(items).format(**{k: slots.get(k, "") for k in PLACEHOLDERS})


@dataclass(frozen=True)
class RegionGrid:
    rows: tuple[str, ...] = ("upper", "center", "lower")
    cols: tuple[str, ...] = ("left", "center", "right")

    @classmethod
    def load(cls, path: str | Path | None = None) -> RegionGrid:
        if path is None:
            text = resources.files("medcurate.data").joinpath("region_grid.json").read_text(encoding="utf-8")
        else:
            text = Path(path).read_text(encoding="utf-8")
        d = json.loads(text)
        return cls(tuple(d["rows"]), tuple(d["cols"]))

    def name(self, x: float, y: float, width: float, height: float) -> str:
        if not (0 <= x <= width and 0 <= y <= height):
            raise SynthesisError(f"point ({x}, {y}) outside {width}x{height} image")
        col = min(int(x * len(self.cols) / width), len(self.cols) - 1)
        row = min(int(y * len(self.rows) / height), len(self.rows) - 1)
        r, c = self.rows[row], self.cols[col]
        if r == c:
            return r
        return f"{r} {c}"


def _sample(
    rec: IngestRecord,
    suffix: str,
    question: str,
    answer: str,
    task: str,
    strategy: str,
    answer_space: tuple[Option, ...] | None = None,
) -> VqaSample:
    return VqaSample(
        id=f"{rec.dataset}/{rec.key}/{suffix}",
        media=(rec.media,),
        turns=(Turn("human", f"{placeholder(0)}\n{question}"), Turn("assistant", answer)),
        task=task,
        modality=rec.modality,
        provenance=SourceRef(rec.dataset, rec.key, strategy),
        answer_space=answer_space,
    )


def caption_to_qa(rec: IngestRecord, pool: SynonymPool, seed: int) -> VqaSample:
    """Caption record -> caption-task sample; the caption is the answer verbatim."""
    assert isinstance(rec.annotation, Caption)
    if not rec.annotation.text.strip():
        raise SynthesisError(f"{rec.dataset}/{rec.key}: empty caption")
    rng = record_rng(seed, "caption", rec.dataset, rec.key)
    q = pool.draw("caption", rng, modality=MODALITY_NAMES[rec.modality])
    return _sample(rec, "caption", q, rec.annotation.text, "caption", "vqa-conversion")


def mask_to_localization(
    rec: IngestRecord, grid: RegionGrid, pool: SynonymPool | None = None, seed: int = 0
) -> VqaSample:
    ann = rec.annotation
    assert isinstance(ann, MaskRegion)
    w, h = rec.media.width, rec.media.height
    if not w or not h:
        raise SynthesisError(f"{rec.dataset}/{rec.key}: mask record without image size")
    cx, cy = (ann.x0 + ann.x1) / 2, (ann.y0 + ann.y1) / 2
    region = grid.name(cx, cy, w, h)
    answer = ann.region or region
    target = ann.target or "lesion"
    if pool is None:
        q = f"Where is the {target}?"
    else:
        rng = record_rng(seed, "localization", rec.dataset, rec.key)
        q = pool.draw("localization", rng, modality=MODALITY_NAMES[rec.modality], target=target)
    return _sample(rec, "loc", q, answer, "localization", "vqa-conversion")


@dataclass(frozen=True)
class McqSpec:
    correct: str
    distractors: int
    vocabulary: tuple[str, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        if self.distractors < 1:
            raise SynthesisError("need at least one distractor")
        if self.distractors + 1 > MAX_OPTIONS:
            raise SynthesisError(f"at most {MAX_OPTIONS} options are supported")
        if len(set(self.vocabulary)) != len(self.vocabulary):
            raise SynthesisError("vocabulary has duplicates")
        if self.correct not in self.vocabulary:
            raise SynthesisError(f"correct label {self.correct!r} not in vocabulary")

    @classmethod
    def for_record(cls, rec: IngestRecord, distractors: int = 3, seed: int = 0) -> McqSpec:
        assert isinstance(rec.annotation, ClassLabel)
        return cls(rec.annotation.label, distractors, rec.annotation.vocabulary, seed)


def format_mcq(stem: str, options: Sequence[Option]) -> str:
    lines = [stem] + [f"{o.label}. {o.text}" for o in options]
    return "\n".join(lines)


def build_options(correct: str, distractors: Sequence[str], rng: random.Random) -> tuple[Option, ...]:
    texts = [correct, *distractors]
    rng.shuffle(texts)
    return tuple(Option(OPTION_LABELS[i], t, t == correct) for i, t in enumerate(texts))


def mcq_answer(options: Sequence[Option]) -> str:
    o = next(o for o in options if o.correct)
    return f"{o.label}. {o.text}"


def label_to_mcq(rec: IngestRecord, spec: McqSpec, pool: SynonymPool | None = None) -> VqaSample:
    """Label record -> MCQ with the true label and ``spec.distractors`` random others."""
    others = [v for v in spec.vocabulary if v != spec.correct]
    if len(others) < spec.distractors:
        raise InsufficientDistractorsError(
            f"{rec.dataset}/{rec.key}: need {spec.distractors} distractors, vocabulary offers {len(others)}"
        )
    rng = record_rng(spec.seed, "mcq", rec.dataset, rec.key)
    picked = rng.sample(others, spec.distractors)
    options = build_options(spec.correct, picked, rng)
    modality = MODALITY_NAMES[rec.modality]
    if pool is None:
        stem = f"Which of the following is the most likely diagnosis for this {modality} image?"
    else:
        stem = pool.draw("mcq", rng, modality=modality)
    return _sample(rec, "mcq", format_mcq(stem, options), mcq_answer(options), "mcq", "template", options)


def label_to_open_qa(rec: IngestRecord, pool: SynonymPool, seed: int) -> VqaSample:
    ann = rec.annotation
    assert isinstance(ann, ClassLabel)
    if not ann.label.strip():
        raise SynthesisError(f"{rec.dataset}/{rec.key}: empty label")
    rng = record_rng(seed, "open", rec.dataset, rec.key)
    q = pool.draw("open-qa", rng, modality=MODALITY_NAMES[rec.modality])
    return _sample(rec, "open", q, ann.label, "open-qa", "template")


def volume_to_qa(rec: IngestRecord, pool: SynonymPool, seed: int) -> VqaSample:
    """Volume annotation -> sample over the serialized slice series.

    Records with a question become open-qa; bare findings become a report task.
    """
    ann = rec.annotation
    assert isinstance(ann, VolumeAnnotation)
    if ann.question:
        return _sample(rec, "vol", ann.question, ann.answer, "open-qa", "volumetric")
    rng = record_rng(seed, "report", rec.dataset, rec.key)
    q = pool.draw("report", rng, modality=MODALITY_NAMES[rec.modality])
    return _sample(rec, "vol", q, ann.answer, "report", "volumetric")
