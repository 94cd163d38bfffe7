"""Benchmark scoring: predictions against reference samples, reported on a 0-100 scale."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .metrics import cider_scores, rouge_l
from .rewards import final_answer, gold_letter, match_option
from .schema import CorpusError, VqaSample, iter_jsonl
from .synthesis.grpo_data import normalize_answer

METRICS = ("accuracy", "rouge_l", "cider")
UNSUPPORTED = ("rate", "semb", "radcliq")
ACCURACY_TASKS = frozenset({"mcq", "video-mcq", "open-qa"})
TEXT_TASKS = frozenset({"caption", "report", "video-summary", "open-qa", "localization"})
COMPATIBLE = {"accuracy": ACCURACY_TASKS, "rouge_l": TEXT_TASKS, "cider": TEXT_TASKS}


class EvalError(ValueError):
    pass


class IdMismatchError(EvalError):
    def __init__(self, missing: Sequence[str] = (), unexpected: Sequence[str] = ()):
        self.missing = list(missing)
        self.unexpected = list(unexpected)
        parts = []
        if self.missing:
            parts.append(f"missing predictions for {len(self.missing)} id(s): {', '.join(self.missing[:10])}")
        if self.unexpected:
            parts.append(f"predictions for unknown id(s): {', '.join(self.unexpected[:10])}")
        super().__init__("; ".join(parts))


class MetricTaskError(EvalError):
    pass


def read_predictions(path: str | os.PathLike) -> dict[str, str]:
    """Load ``{id, prediction}`` JSONL; malformed lines and duplicate ids raise."""
    preds: dict[str, str] = {}
    for lineno, obj in iter_jsonl(path):
        if not isinstance(obj, dict) or "id" not in obj or "prediction" not in obj:
            raise CorpusError("expected an object with 'id' and 'prediction'", lineno)
        sid = str(obj["id"])
        if sid in preds:
            raise CorpusError(f"duplicate prediction id {sid!r}", lineno)
        preds[sid] = str(obj["prediction"])
    return preds


def sample_accuracy(pred: str, ref: VqaSample) -> float:
    if ref.task in ("mcq", "video-mcq"):
        opt = ref.correct_option
        letter = opt.label if opt is not None else gold_letter(ref.answer)
        return float(match_option(pred, letter))
    return float(normalize_answer(final_answer(pred)) == normalize_answer(ref.answer))


def accuracy(preds: Mapping[str, str], refs: Sequence[VqaSample]) -> float:
    _check_ids(preds, refs)
    return 100.0 * float(np.mean([sample_accuracy(preds[r.id], r) for r in refs]))


def _check_ids(preds: Mapping[str, str], refs: Sequence[VqaSample]) -> None:
    ref_ids = [r.id for r in refs]
    if len(set(ref_ids)) != len(ref_ids):
        raise EvalError("duplicate ids in reference corpus")
    missing = [i for i in ref_ids if i not in preds]
    known = set(ref_ids)
    unexpected = sorted(i for i in preds if i not in known)
    if missing or unexpected:
        raise IdMismatchError(missing, unexpected)


@dataclass
class EvalReport:
    benchmark: str
    metrics: dict[str, float]
    rows: list[dict[str, Any]]
    corpus_hash: str
    config: dict[str, Any]
    unsupported: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "benchmark": self.benchmark,
            "metrics": self.metrics,
            "unsupported": self.unsupported,
            "corpus_hash": self.corpus_hash,
            "config": self.config,
            "rows": self.rows,
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def table(self) -> str:
        name_w = max([len("metric"), *(len(m) for m in self.metrics), *(len(m) for m in self.unsupported)])
        lines = [f"{self.benchmark} (n={len(self.rows)}, scores x100)", f"{'metric':<{name_w}}  value"]
        lines.append("-" * (name_w + 9))
        for m, v in self.metrics.items():
            lines.append(f"{m:<{name_w}}  {v:7.2f}")
        for m in self.unsupported:
            lines.append(f"{m:<{name_w}}  unsupported")
        return "\n".join(lines)


def corpus_digest(refs: Iterable[VqaSample]) -> str:
    h = hashlib.sha256()
    for r in refs:
        h.update(json.dumps(r.to_dict(), ensure_ascii=False, separators=(",", ":")).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def run_benchmark(
    refs: Sequence[VqaSample],
    preds: Mapping[str, str],
    metrics: Iterable[str],
    benchmark: str = "benchmark",
    cider_variant: str = "cider",
    cider_sigma: float = 6.0,
    corpus_hash: str | None = None,
) -> EvalReport:
    requested = list(dict.fromkeys(m.lower().replace("-", "_") for m in metrics))
    unsupported = [m for m in requested if m in UNSUPPORTED]
    wanted = [m for m in requested if m not in UNSUPPORTED]
    unknown = [m for m in wanted if m not in METRICS]
    if unknown:
        raise EvalError(f"unknown metric(s): {', '.join(unknown)}")
    if not wanted:
        raise EvalError("no supported metric requested")
    if not refs:
        raise EvalError("empty reference corpus")
    tasks = {r.task for r in refs}
    for m in wanted:
        bad = tasks - COMPATIBLE[m]
        if bad:
            raise MetricTaskError(f"metric {m} is not defined for task(s) {', '.join(sorted(bad))}")
    _check_ids(preds, refs)

    rows: list[dict[str, Any]] = [{"id": r.id, "task": r.task} for r in refs]
    values: dict[str, float] = {}
    if "accuracy" in wanted:
        acc = [sample_accuracy(preds[r.id], r) for r in refs]
        for row, a in zip(rows, acc):
            row["accuracy"] = 100.0 * a
        values["accuracy"] = 100.0 * float(np.mean(acc))
    if "rouge_l" in wanted:
        rl = [rouge_l(preds[r.id], r.answer) for r in refs]
        for row, v in zip(rows, rl):
            row["rouge_l"] = 100.0 * v
        values["rouge_l"] = 100.0 * float(np.mean(rl))
    if "cider" in wanted:
        cs = cider_scores([(preds[r.id], [r.answer]) for r in refs], variant=cider_variant, sigma=cider_sigma)
        for row, v in zip(rows, cs):
            row["cider"] = 100.0 * float(v)
        values["cider"] = 100.0 * float(np.mean(cs))
    metrics_out = {m: values[m] for m in wanted}
    config = {
        "tokenizer": "lowercase, punctuation->space, whitespace split",
        "rouge_l_beta": 1.0,
        "cider_variant": cider_variant,
        "cider_n": 4,
    }
    if cider_variant == "cider-d":
        config["cider_sigma"] = cider_sigma
    return EvalReport(
        benchmark=benchmark,
        metrics=metrics_out,
        rows=rows,
        corpus_hash=corpus_hash or corpus_digest(refs),
        config=config,
        unsupported=unsupported,
    )
