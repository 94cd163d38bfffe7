"""LLM-assisted synthesis: enriched QA pairs, video MCQs, and translation."""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Any

from ..gateway import ChatRequest, LlmGateway
from ..ingest import ClassLabel, IngestRecord, MaskRegion, Reject, VideoCaption
from ..schema import PLACEHOLDER_RE, Option, SourceRef, Turn, VqaSample, placeholder
from .templates import SynonymPool, SynthesisError, build_options, format_mcq, mcq_answer, record_rng

BLOCK_RE = re.compile(r"```[ \t]*(\w+)[ \t]*\n(.*?)```", re.DOTALL)
FIELD_RE = re.compile(r"^\s*(QUESTION|ANSWER|DISTRACTORS)\s*:\s*(.*)$", re.IGNORECASE)


class PromptError(SynthesisError):
    pass


def _resource(name: str) -> str:
    return resources.files("medcurate.data").joinpath(name).read_text(encoding="utf-8")


def _formats() -> dict[str, str]:
    return json.loads(_resource("prompts/formats.json"))


@dataclass(frozen=True)
class SynthesisPrompt:
    """A prompt template plus the fixed clauses every request must carry.

    ``template`` uses ``$name`` placeholders; ``$constraint`` and
    ``$response_format`` are mandatory.
    """

    template: str
    constraint: str
    response_format: str
    system: str = "You are a careful medical imaging expert who writes training data."
    few_shot: str = ""
    lesion: str = ""
    patient: str = ""
    temperature: float = 0.0

    def check(self) -> None:
        if not self.constraint.strip() or "$constraint" not in self.template:
            raise PromptError("prompt has no constraint clause")
        if not self.response_format.strip() or "$response_format" not in self.template:
            raise PromptError("prompt has no response-format template")

    def render(self, **fields: str) -> str:
        self.check()
        values = {
            "constraint": self.constraint,
            "response_format": self.response_format,
            "few_shot": self.few_shot,
            "lesion": self.lesion or "not provided",
            "patient": self.patient or "not provided",
            **fields,
        }
        return string.Template(self.template).safe_substitute(values).strip() + "\n"

    @classmethod
    def load(cls, path: str | Path, **kw: Any) -> SynthesisPrompt:
        f = _formats()
        kw.setdefault("constraint", f["constraint"])
        kw.setdefault("response_format", f["qa_format"])
        return cls(Path(path).read_text(encoding="utf-8"), **kw)


def default_qa_prompt() -> SynthesisPrompt:
    f = _formats()
    return SynthesisPrompt(_resource("prompts/synthesis.txt"), f["constraint"], f["qa_format"], few_shot=f["qa_few_shot"])


def default_video_prompt() -> SynthesisPrompt:
    f = _formats()
    return SynthesisPrompt(_resource("prompts/video_mcq.txt"), f["constraint"], f["mcq_format"], few_shot=f["mcq_few_shot"])


def parse_blocks(text: str) -> list[tuple[str, dict[str, Any]]]:
    """Parse fenced ``qa``/``mcq`` blocks into ``(kind, fields)`` pairs.

    QUESTION and ANSWER may span lines; DISTRACTORS is a list of ``- item``
    lines. Missing fields are simply absent from the dict.
    """
    out = []
    for m in BLOCK_RE.finditer(text):
        kind = m.group(1).lower()
        fields: dict[str, Any] = {}
        current: str | None = None
        for line in m.group(2).splitlines():
            fm = FIELD_RE.match(line)
            if fm:
                current = fm.group(1).upper()
                if current == "DISTRACTORS":
                    fields[current] = [fm.group(2).strip()] if fm.group(2).strip() else []
                else:
                    fields[current] = fm.group(2).strip()
                continue
            if current is None or not line.strip():
                continue
            if current == "DISTRACTORS":
                fields[current].append(line.strip().lstrip("-*").strip())
            else:
                fields[current] = f"{fields[current]} {line.strip()}".strip()
        out.append((kind, fields))
    return out


def _record_request(rec: IngestRecord, prompt: SynthesisPrompt) -> ChatRequest:
    ann = rec.annotation
    labels = ""
    if isinstance(ann, ClassLabel):
        labels = ann.label
    elif isinstance(ann, MaskRegion) and ann.target:
        labels = ann.target
    media = rec.media.slices if rec.media.kind == "slice-series" else (rec.media.uri,)
    text = prompt.render(image=rec.media.uri, labels=labels or "not provided", caption=getattr(ann, "text", ""))
    return ChatRequest(text, system=prompt.system, media=tuple(media), temperature=prompt.temperature)


def llm_assisted_synthesize(
    rec: IngestRecord,
    prompt: SynthesisPrompt,
    gw: LlmGateway,
    rejects: list[Reject] | None = None,
) -> list[VqaSample]:
    """Ask the gateway for QA pairs about ``rec``; unparseable blocks become rejects."""
    prompt.check()
    sink = rejects if rejects is not None else []
    resp = gw.complete(_record_request(rec, prompt))
    base = f"{rec.dataset}/{rec.key}"
    blocks = parse_blocks(resp.text)
    if not blocks:
        sink.append(Reject(base, "no parseable blocks in response"))
        return []
    out = []
    for i, (kind, fields) in enumerate(blocks):
        where = f"{base}#block{i}"
        if kind != "qa":
            sink.append(Reject(where, f"unexpected block kind {kind!r}"))
            continue
        q, a = fields.get("QUESTION", ""), fields.get("ANSWER", "")
        if not q:
            sink.append(Reject(where, "missing QUESTION"))
            continue
        if not a:
            sink.append(Reject(where, "missing ANSWER"))
            continue
        out.append(VqaSample(
            id=f"{base}/llm{i}",
            media=(rec.media,),
            turns=(Turn("human", f"{placeholder(0)}\n{q}"), Turn("assistant", a)),
            task="open-qa",
            modality=rec.modality,
            provenance=SourceRef(rec.dataset, rec.key, "llm-assisted"),
        ))
    return out


def video_caption_to_tasks(
    rec: IngestRecord,
    prompt: SynthesisPrompt | None,
    gw: LlmGateway | None,
    rejects: list[Reject] | None = None,
    pool: SynonymPool | None = None,
    seed: int = 0,
) -> list[VqaSample]:
    """One summary sample from the caption, plus MCQs from the gateway when enabled."""
    ann = rec.annotation
    assert isinstance(ann, VideoCaption)
    if not ann.text.strip():
        raise SynthesisError(f"{rec.dataset}/{rec.key}: empty caption")
    sink = rejects if rejects is not None else []
    base = f"{rec.dataset}/{rec.key}"
    if pool is None:
        question = "Describe this medical procedure."
    else:
        question = pool.draw("video-summary", record_rng(seed, "summary", rec.dataset, rec.key))
    summary = VqaSample(
        id=f"{base}/summary",
        media=(rec.media,),
        turns=(Turn("human", f"{placeholder(0)}\n{question}"), Turn("assistant", ann.text)),
        task="video-summary",
        modality=rec.modality,
        provenance=SourceRef(rec.dataset, rec.key, "video"),
    )
    if gw is None or prompt is None:
        return [summary]
    prompt.check()
    req = ChatRequest(
        prompt.render(caption=ann.text, image=rec.media.uri, labels="not provided"),
        system=prompt.system,
        temperature=prompt.temperature,
    )
    resp = gw.complete(req)
    out = [summary]
    blocks = parse_blocks(resp.text)
    if not blocks:
        sink.append(Reject(base, "no parseable blocks in response"))
    for i, (kind, fields) in enumerate(blocks):
        where = f"{base}#block{i}"
        q, a = fields.get("QUESTION", ""), fields.get("ANSWER", "")
        distractors = [d for d in fields.get("DISTRACTORS", []) if d]
        problem = None
        if kind != "mcq":
            problem = f"unexpected block kind {kind!r}"
        elif not q:
            problem = "missing QUESTION"
        elif not a:
            problem = "missing ANSWER"
        elif not 1 <= len(distractors) <= 3:
            problem = f"expected 1-3 distractors, got {len(distractors)}"
        else:
            lowered = [d.lower() for d in distractors]
            if len(set(lowered)) != len(lowered):
                problem = "duplicate distractors"
            elif a.lower() in lowered:
                problem = "answer repeated among distractors"
        if problem:
            sink.append(Reject(where, problem))
            continue
        options = build_options(a, distractors, record_rng(seed, "vmcq", rec.dataset, rec.key, str(i)))
        out.append(VqaSample(
            id=f"{base}/vmcq{i}",
            media=(rec.media,),
            turns=(Turn("human", f"{placeholder(0)}\n{format_mcq(q, options)}"), Turn("assistant", mcq_answer(options))),
            task="video-mcq",
            modality=rec.modality,
            provenance=SourceRef(rec.dataset, rec.key, "video"),
            answer_space=options,
        ))
    return out


def _split_placeholders(text: str) -> tuple[str, str]:
    """Separate leading media placeholder lines from the prose."""
    lines = text.split("\n")
    i = 0
    while i < len(lines) and PLACEHOLDER_RE.fullmatch(lines[i].strip()):
        i += 1
    return "\n".join(lines[:i]), "\n".join(lines[i:])


def translate_text(text: str, gw: LlmGateway) -> str:
    prompt = string.Template(_resource("prompts/translate.txt")).substitute(text=text)
    return gw.complete(ChatRequest(prompt)).text.strip()


def translate_sample(sample: VqaSample, gw: LlmGateway) -> VqaSample:
    """Chinese copy of ``sample`` with placeholders and option letters preserved."""
    if sample.answer_space:
        head, body = _split_placeholders(sample.question)
        stem = body.split("\n")[0]
        options = tuple(Option(o.label, translate_text(o.text, gw), o.correct) for o in sample.answer_space)
        human = "\n".join(p for p in (head, format_mcq(translate_text(stem, gw), options)) if p)
        turns = (Turn("human", human), Turn("assistant", mcq_answer(options)))
        return replace(sample, id=f"{sample.id}/zh", language="zh", turns=turns, answer_space=options)
    turns = []
    for t in sample.turns:
        head, body = _split_placeholders(t.text)
        translated = translate_text(body, gw)
        turns.append(Turn(t.speaker, "\n".join(p for p in (head, translated) if p)))
    return replace(sample, id=f"{sample.id}/zh", language="zh", turns=tuple(turns))
