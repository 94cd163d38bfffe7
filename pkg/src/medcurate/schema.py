"""Unified VQA sample schema, structural validation, and the JSONL corpus format."""

from __future__ import annotations

import hashlib
import json
import os
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Collection, Iterable, Iterator

TASKS = ("caption", "open-qa", "mcq", "report", "localization", "video-summary", "video-mcq")
MCQ_TASKS = ("mcq", "video-mcq")
MODALITIES = (
    "xray", "ct", "mri", "ultrasound", "dermoscopy", "ophthalmology",
    "pathology", "endoscopy", "video", "multimodal",
)
LANGUAGES = ("en", "zh")
STRATEGIES = ("vqa-conversion", "template", "llm-assisted", "volumetric", "video", "passthrough")
MEDIA_KINDS = ("image", "slice-series", "video")
SPEAKERS = ("human", "assistant")
OPTION_LABELS = "ABCDE"
MIN_OPTIONS, MAX_OPTIONS = 2, 5

PLACEHOLDER_RE = re.compile(r"<media:(\d+)>")


def placeholder(index: int) -> str:
    return f"<media:{index}>"


class CorpusError(Exception):
    """Raised for unreadable or malformed corpus files."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class InvalidSampleError(ValueError):
    def __init__(self, sample_id: str, violations: list[Violation]):
        self.sample_id = sample_id
        self.violations = violations
        codes = ", ".join(v.code for v in violations)
        super().__init__(f"sample {sample_id!r} failed validation: {codes}")


@dataclass(frozen=True)
class MediaRef:
    kind: str
    uri: str
    slices: tuple[str, ...] = ()
    depth: int | None = None
    frame_count: int | None = None
    fps: float | None = None
    frames: tuple[int, ...] = ()
    width: int | None = None
    height: int | None = None

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind, "uri": self.uri}
        if self.kind == "slice-series":
            d["slices"] = list(self.slices)
            d["depth"] = self.depth
        elif self.kind == "video":
            d["frame_count"] = self.frame_count
            d["fps"] = self.fps
            d["frames"] = list(self.frames)
        if self.width is not None:
            d["width"] = self.width
            d["height"] = self.height
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> MediaRef:
        return cls(
            kind=d["kind"],
            uri=d["uri"],
            slices=tuple(d.get("slices", ())),
            depth=d.get("depth"),
            frame_count=d.get("frame_count"),
            fps=d.get("fps"),
            frames=tuple(d.get("frames", ())),
            width=d.get("width"),
            height=d.get("height"),
        )


@dataclass(frozen=True)
class Turn:
    speaker: str
    text: str


@dataclass(frozen=True)
class SourceRef:
    dataset: str
    key: str
    strategy: str


@dataclass(frozen=True)
class Option:
    label: str
    text: str
    correct: bool = False


@dataclass(frozen=True)
class VqaSample:
    id: str
    media: tuple[MediaRef, ...]
    turns: tuple[Turn, ...]
    task: str
    modality: str
    provenance: SourceRef
    language: str = "en"
    answer_space: tuple[Option, ...] | None = None

    @property
    def question(self) -> str:
        return next(t.text for t in self.turns if t.speaker == "human")

    @property
    def answer(self) -> str:
        """Text of the final assistant turn (the gold answer)."""
        for t in reversed(self.turns):
            if t.speaker == "assistant":
                return t.text
        return ""

    @property
    def correct_option(self) -> Option | None:
        if not self.answer_space:
            return None
        hits = [o for o in self.answer_space if o.correct]
        return hits[0] if len(hits) == 1 else None

    def to_dict(self) -> dict[str, Any]:
        # key order here is the on-disk order
        return {
            "id": self.id,
            "task": self.task,
            "modality": self.modality,
            "language": self.language,
            "media": [m.to_dict() for m in self.media],
            "turns": [{"speaker": t.speaker, "text": t.text} for t in self.turns],
            "answer_space": None if self.answer_space is None else [
                {"label": o.label, "text": o.text, "correct": o.correct} for o in self.answer_space
            ],
            "provenance": {
                "dataset": self.provenance.dataset,
                "key": self.provenance.key,
                "strategy": self.provenance.strategy,
            },
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> VqaSample:
        space = d.get("answer_space")
        prov = d["provenance"]
        return cls(
            id=d["id"],
            media=tuple(MediaRef.from_dict(m) for m in d["media"]),
            turns=tuple(Turn(t["speaker"], t["text"]) for t in d["turns"]),
            task=d["task"],
            modality=d["modality"],
            language=d.get("language", "en"),
            provenance=SourceRef(prov["dataset"], prov["key"], prov["strategy"]),
            answer_space=None if space is None else tuple(
                Option(o["label"], o["text"], bool(o["correct"])) for o in space
            ),
        )


@dataclass(frozen=True)
class Violation:
    code: str
    detail: str = ""


@dataclass
class ValidationResult:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def codes(self) -> list[str]:
        return [v.code for v in self.violations]

    def __bool__(self) -> bool:
        return self.ok


def _validate_media(m: MediaRef, i: int, out: list[Violation]) -> None:
    if m.kind not in MEDIA_KINDS:
        out.append(Violation("unknown-media-kind", f"media[{i}].kind={m.kind!r}"))
        return
    if not m.uri:
        out.append(Violation("empty-media-uri", f"media[{i}]"))
    if m.kind == "slice-series":
        if not m.slices:
            out.append(Violation("empty-slice-series", f"media[{i}]"))
        if m.depth is None or m.depth < 1:
            out.append(Violation("missing-volume-depth", f"media[{i}]"))
        elif len(m.slices) > m.depth:
            out.append(Violation("slice-series-exceeds-depth", f"media[{i}]: {len(m.slices)} > {m.depth}"))
        if len(set(m.slices)) != len(m.slices):
            out.append(Violation("duplicate-slice-path", f"media[{i}]"))
    elif m.kind == "video":
        if m.frame_count is None or m.frame_count < 1:
            out.append(Violation("missing-frame-count", f"media[{i}]"))
        if m.fps is None or not m.fps > 0:
            out.append(Violation("invalid-fps", f"media[{i}]"))
        frames = m.frames
        if any(b <= a for a, b in zip(frames, frames[1:])):
            out.append(Violation("frame-indices-not-increasing", f"media[{i}]"))
        if frames and (frames[0] < 0 or (m.frame_count is not None and frames[-1] >= m.frame_count)):
            out.append(Violation("frame-index-out-of-range", f"media[{i}]"))


def _validate_answer_space(s: VqaSample, out: list[Violation]) -> None:
    space = s.answer_space
    if s.task not in MCQ_TASKS:
        if space is not None:
            out.append(Violation("answer-space-on-non-mcq", s.task))
        return
    if not space:
        out.append(Violation("missing-answer-space"))
        return
    if len(space) < MIN_OPTIONS:
        out.append(Violation("too-few-options", str(len(space))))
    if len(space) > MAX_OPTIONS:
        out.append(Violation("too-many-options", str(len(space))))
    labels = [o.label for o in space]
    if labels != list(OPTION_LABELS[: len(labels)]):
        out.append(Violation("non-canonical-option-labels", "".join(labels)))
    texts = [o.text.strip().lower() for o in space]
    if any(not t for t in texts):
        out.append(Violation("empty-option-text"))
    if len(set(texts)) != len(texts):
        out.append(Violation("duplicate-option-text"))
    n_correct = sum(o.correct for o in space)
    if n_correct == 0:
        out.append(Violation("no-correct-option"))
    elif n_correct > 1:
        out.append(Violation("multiple-correct-options", str(n_correct)))


def validate(sample: VqaSample, datasets: Collection[str] | None = None) -> ValidationResult:
    """Check every structural invariant of a sample.

    ``datasets`` is the set of registered dataset names; when omitted the
    built-in catalog is used. Failures are returned, never raised.
    """
    from .ingest import CATALOG

    known = CATALOG.keys() if datasets is None else datasets
    out: list[Violation] = []
    if not sample.id:
        out.append(Violation("empty-id"))
    if sample.task not in TASKS:
        out.append(Violation("unknown-task", sample.task))
    if sample.modality not in MODALITIES:
        out.append(Violation("unknown-modality", sample.modality))
    if sample.language not in LANGUAGES:
        out.append(Violation("unknown-language", sample.language))

    prov = sample.provenance
    if prov.strategy not in STRATEGIES:
        out.append(Violation("unknown-strategy", prov.strategy))
    if prov.dataset != "synthetic" and prov.dataset not in known:
        out.append(Violation("unregistered-dataset", prov.dataset))
    if not prov.key:
        out.append(Violation("empty-source-key"))

    for i, m in enumerate(sample.media):
        _validate_media(m, i, out)

    turns = sample.turns
    if not turns:
        out.append(Violation("empty-turns"))
    else:
        if turns[0].speaker != "human":
            out.append(Violation("first-turn-not-human", turns[0].speaker))
        if any(t.speaker not in SPEAKERS for t in turns):
            out.append(Violation("unknown-speaker"))
        elif any(a.speaker == b.speaker for a, b in zip(turns, turns[1:])):
            out.append(Violation("non-alternating-turns"))
        if any(not t.text.strip() for t in turns):
            out.append(Violation("empty-turn-text"))
        n_media = len(sample.media)
        for t in turns:
            for m in PLACEHOLDER_RE.finditer(t.text):
                if int(m.group(1)) >= n_media:
                    out.append(Violation("dangling-media-placeholder", m.group(0)))

    _validate_answer_space(sample, out)
    return ValidationResult(out)


def _dumps(sample: VqaSample) -> str:
    return json.dumps(sample.to_dict(), ensure_ascii=False, separators=(",", ":"))


@dataclass
class CorpusManifest:
    path: str
    count: int
    modalities: dict[str, int]
    tasks: dict[str, int]
    strategies: dict[str, int]
    sha256: str
    meta: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "path": self.path,
            "count": self.count,
            "modalities": self.modalities,
            "tasks": self.tasks,
            "strategies": self.strategies,
            "sha256": self.sha256,
            "meta": self.meta,
        }


def manifest_path(corpus: str | os.PathLike) -> Path:
    p = Path(corpus)
    return p.with_name(p.name + ".manifest.json")


def write_json(path: str | os.PathLike, obj: Any) -> None:
    """Write sorted, indented JSON atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        json.dump(obj, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")
    os.replace(tmp, path)


def write_corpus(
    samples: Iterable[VqaSample],
    dest: str | os.PathLike,
    meta: dict[str, Any] | None = None,
    datasets: Collection[str] | None = None,
) -> CorpusManifest:
    """Stream samples to ``dest`` as JSONL and write the manifest sidecar.

    Every sample is validated first; the first invalid one aborts the write
    (nothing is left at ``dest``) with its id in the exception.
    """
    dest = Path(dest)
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_name(dest.name + ".tmp")
    digest = hashlib.sha256()
    modalities: Counter[str] = Counter()
    tasks: Counter[str] = Counter()
    strategies: Counter[str] = Counter()
    seen: set[str] = set()
    count = 0
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            for s in samples:
                result = validate(s, datasets)
                if s.id in seen:
                    result.violations.append(Violation("duplicate-id", s.id))
                if not result.ok:
                    raise InvalidSampleError(s.id, result.violations)
                seen.add(s.id)
                line = _dumps(s) + "\n"
                f.write(line)
                digest.update(line.encode("utf-8"))
                modalities[s.modality] += 1
                tasks[s.task] += 1
                strategies[s.provenance.strategy] += 1
                count += 1
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    os.replace(tmp, dest)
    manifest = CorpusManifest(
        path=dest.name,
        count=count,
        modalities=dict(sorted(modalities.items())),
        tasks=dict(sorted(tasks.items())),
        strategies=dict(sorted(strategies.items())),
        sha256=digest.hexdigest(),
        meta=dict(meta or {}),
    )
    write_json(manifest_path(dest), manifest.to_dict())
    return manifest


def iter_jsonl(src: str | os.PathLike) -> Iterator[tuple[int, Any]]:
    """Yield ``(line_number, object)`` pairs; blank lines are skipped."""
    src = Path(src)
    if not src.is_file():
        raise CorpusError(f"no such file: {src}")
    with open(src, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"malformed JSON ({e.msg})", lineno) from None


def read_corpus(src: str | os.PathLike) -> Iterator[VqaSample]:
    for lineno, obj in iter_jsonl(src):
        try:
            yield VqaSample.from_dict(obj)
        except (KeyError, TypeError, AttributeError) as e:
            raise CorpusError(f"not a sample record ({type(e).__name__}: {e})", lineno) from None


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
