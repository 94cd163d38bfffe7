"""``medcurate`` command line: ingest -> synthesize -> prepare-grpo -> budget -> score-groups -> evaluate.

Exit codes: 0 success, 1 data errors, 2 config errors, 3 gateway errors.
Logs go to stderr; results go to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Iterable

from . import __version__
from .config import ConfigError, PipelineConfig, load_config
from .evaluate import EvalError, read_predictions, run_benchmark
from .gateway import GatewayError, LlmGateway
from .geometry import MediaSizer, PositionConfig, TileConfig, UnresolvableMediaError, budget_check
from .ingest import (
    CATALOG,
    IngestOptions,
    IngestRecord,
    ManifestSchemaError,
    RegistrationError,
    Registry,
    Reject,
    ingest,
    safe_name,
)
from .rewards import MCQ_TASKS, FormatSpec, GenerationGroup, GrpoConfig, score_group
from .schema import (
    CorpusError,
    InvalidSampleError,
    VqaSample,
    file_sha256,
    iter_jsonl,
    read_corpus,
    validate,
    write_corpus,
    write_json,
)
from .synthesis import (
    McqSpec,
    RegionGrid,
    SynonymPool,
    SynthesisError,
    caption_to_qa,
    default_qa_prompt,
    default_video_prompt,
    label_to_mcq,
    label_to_open_qa,
    llm_assisted_synthesize,
    mask_to_localization,
    prepare_grpo,
    translate_sample,
    video_caption_to_tasks,
    volume_to_qa,
)
from .training import training_manifest

logger = logging.getLogger("medcurate")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_GATEWAY = 0, 1, 2, 3


class StageError(ValueError):
    """A stage's data could not be processed."""


def write_jsonl(path: Path, rows: Iterable[dict[str, Any]]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    n = 0
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")
            n += 1
    os.replace(tmp, path)
    return n


def stage_manifest(stage_dir: Path, stage: str, cfg: PipelineConfig, outputs: list[Path], counts: dict[str, Any]) -> None:
    write_json(stage_dir / "manifest.json", {
        "stage": stage,
        "tool_version": __version__,
        "seed": cfg.seed,
        "config": cfg.snapshot(),
        "outputs": {p.relative_to(stage_dir).as_posix(): file_sha256(p) for p in sorted(outputs)},
        "counts": counts,
    })


def _known_datasets(cfg: PipelineConfig) -> set[str]:
    return set(CATALOG) | {r.name for r in cfg.registrations()}


def _selected_datasets(cfg: PipelineConfig) -> list[str]:
    registered = [r.name for r in cfg.registrations()]
    chosen = cfg.get("ingest", "datasets", registered)
    for name in chosen:
        if name not in registered:
            raise ConfigError(f"unknown dataset {name!r} (not in [[datasets]])")
    return list(chosen)


def cmd_ingest(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    stage = cfg.out / "ingest"
    stage.mkdir(parents=True, exist_ok=True)
    registry = Registry(stage / "registry.json")
    for reg in cfg.registrations():
        registry.register(reg)
    opts = IngestOptions(
        slices=int(cfg.get("ingest", "slices", 8)),
        frames=int(cfg.get("ingest", "frames", 8)),
        media_dir=stage / "media",
        relative_to=cfg.out,
    )
    outputs = [stage / "registry.json"]
    counts: dict[str, Any] = {}
    for name in _selected_datasets(cfg):
        handle = registry.handle(name)
        rejects: list[Reject] = []
        records = list(ingest(handle, rejects, opts))
        base = safe_name(name)
        rec_path, rej_path = stage / f"{base}.records.jsonl", stage / f"{base}.rejects.jsonl"
        write_jsonl(rec_path, (r.to_dict() for r in records))
        write_jsonl(rej_path, (r.to_dict() for r in rejects))
        summary = {
            "dataset": name,
            "style": handle.registration.style,
            "modality": handle.registration.modality,
            "rows": len(records) + len(rejects),
            "records": len(records),
            "rejects": len(rejects),
            "sha256": file_sha256(rec_path),
        }
        write_json(stage / f"{base}.records.jsonl.manifest.json", summary)
        outputs += [rec_path, rej_path, stage / f"{base}.records.jsonl.manifest.json"]
        counts[name] = {k: summary[k] for k in ("rows", "records", "rejects")}
        logger.info("ingested %s: %d records, %d rejects", name, len(records), len(rejects))
    outputs += sorted(p for p in (stage / "media").rglob("*") if p.is_file()) if (stage / "media").exists() else []
    stage_manifest(stage, "ingest", cfg, outputs, counts)
    return EXIT_OK


def _load_records(cfg: PipelineConfig, name: str) -> list[IngestRecord]:
    path = cfg.out / "ingest" / f"{safe_name(name)}.records.jsonl"
    if not path.is_file():
        raise StageError(f"ingest output for {name!r} not found at {path}; run `medcurate ingest` first")
    return [IngestRecord.from_dict(obj) for _, obj in iter_jsonl(path)]


class _Synthesizer:
    def __init__(self, cfg: PipelineConfig, strategies: set[str], gw: LlmGateway | None):
        self.seed = cfg.seed
        self.strategies = strategies
        self.gw = gw
        pools = cfg.get("synthesize", "pools")
        grid = cfg.get("synthesize", "grid")
        self.pool = SynonymPool.load(cfg.path(pools) if pools else None)
        self.grid = RegionGrid.load(cfg.path(grid) if grid else None)
        self.distractors = int(cfg.get("synthesize", "distractors", 3))
        self.llm_styles = set(cfg.get("synthesize", "llm_styles", ["label"]))
        self.qa_prompt = default_qa_prompt()
        self.video_prompt = default_video_prompt()

    def __call__(self, rec: IngestRecord) -> tuple[list[tuple[str, VqaSample]], list[Reject]]:
        on = self.strategies
        out: list[tuple[str, VqaSample]] = []
        rejects: list[Reject] = []
        where = f"{rec.dataset}/{rec.key}"

        def attempt(strategy: str, fn: Callable[[], VqaSample | list[VqaSample]]) -> None:
            try:
                made = fn()
            except SynthesisError as e:
                rejects.append(Reject(where, f"{strategy}: {e}"))
                return
            except GatewayError as e:
                raise GatewayError(f"{strategy} failed for {where}: {e}") from e
            out.extend((strategy, s) for s in (made if isinstance(made, list) else [made]))

        style = rec.style
        if style == "caption" and "caption" in on:
            attempt("caption", lambda: caption_to_qa(rec, self.pool, self.seed))
        elif style == "mask" and "localization" in on:
            attempt("localization", lambda: mask_to_localization(rec, self.grid, self.pool, self.seed))
        elif style == "label":
            if "label-mcq" in on:
                attempt("label-mcq", lambda: label_to_mcq(
                    rec, McqSpec.for_record(rec, self.distractors, self.seed), self.pool))
            if "label-open" in on:
                attempt("label-open", lambda: label_to_open_qa(rec, self.pool, self.seed))
        elif style == "volume" and "volume" in on:
            attempt("volume", lambda: volume_to_qa(rec, self.pool, self.seed))
        elif style == "video" and "video" in on:
            use_gw = "video-mcq" in on
            attempt("video", lambda: video_caption_to_tasks(
                rec, self.video_prompt if use_gw else None, self.gw if use_gw else None, rejects, self.pool, self.seed))
        if "llm-assisted" in on and style in self.llm_styles:
            attempt("llm-assisted", lambda: llm_assisted_synthesize(rec, self.qa_prompt, self.gw, rejects))
        if "bilingual" in on:
            for strategy, s in list(out):
                try:
                    out.append((f"{strategy}+bilingual", translate_sample(s, self.gw)))
                except GatewayError as e:
                    raise GatewayError(f"bilingual failed for {s.id}: {e}") from e
        return out, rejects


def _gateway_counts(gw: LlmGateway | None) -> dict[str, int]:
    if gw is None:
        return {"network_calls": 0, "cache_hits": 0}
    return {"network_calls": gw.network_calls, "cache_hits": gw.cache_hits}


def cmd_synthesize(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    stage = cfg.out / "synthesize"
    stage.mkdir(parents=True, exist_ok=True)
    strategies = cfg.strategies()
    needs_gw = strategies & {"llm-assisted", "video-mcq", "bilingual"}
    gw = None
    if needs_gw:
        gcfg = cfg.gateway()
        if gcfg is None:
            raise ConfigError(f"strategies {sorted(needs_gw)} need a [gateway] section")
        gw = LlmGateway(gcfg)
    if not strategies:
        logger.warning("all synthesis strategies are disabled; writing an empty corpus")
    synth = _Synthesizer(cfg, strategies, gw)
    known = _known_datasets(cfg)
    records = [r for name in _selected_datasets(cfg) for r in _load_records(cfg, name)] if strategies else []
    if gw is not None:
        with ThreadPoolExecutor(max_workers=gw.config.max_concurrency) as pool:
            results = list(pool.map(synth, records))
    else:
        results = [synth(r) for r in records]
    samples: list[VqaSample] = []
    rejects: list[Reject] = []
    for made, rej in results:
        rejects.extend(rej)
        for strategy, s in made:
            check = validate(s, known)
            if not check.ok:
                raise InvalidSampleError(
                    f"{s.id} (strategy {strategy}, source {s.provenance.dataset}/{s.provenance.key})", check.violations)
            samples.append(s)
    corpus = stage / "corpus.jsonl"
    manifest = write_corpus(samples, corpus, meta={"seed": cfg.seed, "strategies": sorted(strategies)}, datasets=known)
    rej_path = stage / "rejects.jsonl"
    write_jsonl(rej_path, (r.to_dict() for r in rejects))
    stage_manifest(stage, "synthesize", cfg, [corpus, corpus.with_name(corpus.name + ".manifest.json"), rej_path], {
        "samples": manifest.count,
        "rejects": len(rejects),
        "strategies": manifest.strategies,
        "tasks": manifest.tasks,
        "gateway": _gateway_counts(gw),
    })
    logger.info("synthesized %d samples (%d rejects)", manifest.count, len(rejects))
    return EXIT_OK


def _grpo_config(cfg: PipelineConfig) -> GrpoConfig:
    try:
        return GrpoConfig(**cfg.section("grpo"))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"[grpo]: {e}") from None


def cmd_prepare_grpo(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    stage = cfg.out / "grpo"
    stage.mkdir(parents=True, exist_ok=True)
    src = cfg.get("prepare_grpo", "corpus")
    src = cfg.path(src) if src else cfg.out / "synthesize" / "corpus.jsonl"
    corpus = list(read_corpus(src))
    n = args.draw if getattr(args, "draw", None) is not None else int(cfg.get("prepare_grpo", "draw", 100_000))
    frac = float(cfg.get("prepare_grpo", "yes_no_fraction", 0.05))
    if not 0 < frac < 1:
        raise ConfigError("[prepare_grpo] yes_no_fraction must be in (0, 1)")
    if n > len(corpus):
        raise StageError(f"requested draw of {n} exceeds corpus size {len(corpus)}")
    stratify = cfg.get("prepare_grpo", "stratify")
    try:
        prep = prepare_grpo(corpus, n, frac, cfg.seed, stratify)
    except ValueError as e:
        raise ConfigError(f"[prepare_grpo]: {e}") from None
    known = _known_datasets(cfg)
    out = stage / "grpo.jsonl"
    write_corpus(prep.samples, out, meta={"seed": cfg.seed, "draw": n, "yes_no_fraction": frac, "stratify": stratify}, datasets=known)
    rej_path = stage / "rejects.jsonl"
    write_jsonl(rej_path, (r.to_dict() for r in prep.rejects))
    tm_path = stage / "training_manifest.json"
    write_json(tm_path, training_manifest(_grpo_config(cfg)))
    outputs = [out, out.with_name(out.name + ".manifest.json"), rej_path, tm_path]
    if not args.no_figures:
        from .figures import composition_bars
        from .synthesis import draw

        drawn = Counter(s.task for s in draw(corpus, n, cfg.seed, stratify))
        final = Counter(s.task for s in prep.samples)
        outputs.append(composition_bars(drawn, final, stage / "composition.png"))
    total = len(prep.samples)
    stage_manifest(stage, "prepare-grpo", cfg, outputs, {
        "drawn": prep.drawn,
        "reformulated": prep.reformulated,
        "rejects": len(prep.rejects),
        "yes_no_before": prep.yes_no_before,
        "yes_no_after": prep.yes_no_after,
        "final": total,
        "yes_no_fraction": prep.yes_no_after / total if total else 0.0,
    })
    logger.info("GRPO corpus: %d samples, yes/no %d", total, prep.yes_no_after)
    return EXIT_OK


def cmd_budget(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    stage = cfg.out / "budget"
    stage.mkdir(parents=True, exist_ok=True)
    src = args.corpus or cfg.get("budget", "corpus")
    src = cfg.path(src) if src else cfg.out / "synthesize" / "corpus.jsonl"
    max_extent = args.max_extent if args.max_extent is not None else cfg.get("budget", "max_extent")
    if max_extent is None:
        raise ConfigError("[budget] max_extent is required (or pass --max-extent)")
    delta = args.delta if args.delta is not None else float(cfg.get("budget", "delta", 0.25))
    try:
        positions = PositionConfig(delta)
        tiles = TileConfig(
            tile_size=int(cfg.get("budget", "tile_size", 448)),
            max_tiles=cfg.get("budget", "max_tiles"),
            dynamic=bool(cfg.get("budget", "dynamic_image_size", True)),
        )
    except ValueError as e:
        raise ConfigError(f"[budget]: {e}") from None
    roots = [cfg.path(r) for r in cfg.get("budget", "media_roots", [])]
    roots += [cfg.out, Path(src).parent, cfg.base]
    roots += [Path(r.manifest).parent for r in cfg.registrations()]
    sizer = MediaSizer(roots)
    reports, rejects = [], []
    for s in read_corpus(src):
        try:
            reports.append(budget_check(s, float(max_extent), tiles=tiles, positions=positions, sizer=sizer))
        except UnresolvableMediaError as e:
            rejects.append(Reject(s.id, str(e)))
    out = stage / "budget.jsonl"
    write_jsonl(out, (r.to_dict() for r in reports))
    rej_path = stage / "rejects.jsonl"
    write_jsonl(rej_path, (r.to_dict() for r in rejects))
    outputs = [out, rej_path]
    if not args.no_figures and reports:
        from .figures import extent_histogram

        outputs.append(extent_histogram([r.extent for r in reports], float(max_extent), stage / "extent.png"))
    failed = [r.id for r in reports if not r.passed]
    stage_manifest(stage, "budget", cfg, outputs, {
        "samples": len(reports),
        "over_budget": len(failed),
        "over_budget_ids": failed,
        "unresolvable": len(rejects),
        "delta": delta,
        "max_extent": max_extent,
    })
    logger.info("budget: %d samples, %d over %s, %d unresolvable", len(reports), len(failed), max_extent, len(rejects))
    return EXIT_DATA if rejects else EXIT_OK


def cmd_score_groups(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    stage = cfg.out / "score"
    stage.mkdir(parents=True, exist_ok=True)
    src = args.input or cfg.get("score_groups", "input")
    if not src:
        raise ConfigError("[score_groups] input is required (or pass --input)")
    src = cfg.path(src)
    groups = []
    for lineno, obj in iter_jsonl(src):
        try:
            groups.append(GenerationGroup.from_dict(obj))
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusError(f"bad generation group ({e})", lineno) from None
    gcfg = _grpo_config(cfg)
    fmt = FormatSpec(require_think=bool(cfg.get("score_groups", "require_think", True)))
    gw = None
    if any(g.task not in MCQ_TASKS for g in groups):
        gw_cfg = cfg.gateway()
        if gw_cfg is None:
            raise ConfigError("open-ended groups need a [gateway] section for the judge")
        gw = LlmGateway(gw_cfg)
    for g in groups:
        if len(g.generations) != gcfg.num_generations:
            logger.warning("group %s has %d generations, config says %d", g.prompt_id, len(g.generations), gcfg.num_generations)
    scores = [score_group(g, gcfg, gw, fmt).to_dict() for g in groups]
    out = stage / "scores.jsonl"
    write_jsonl(out, scores)
    stage_manifest(stage, "score-groups", cfg, [out], {
        "groups": len(scores),
        "generations": sum(len(s["rewards"]) for s in scores),
        "judged": sum(len(s["judge_audit"]) for s in scores),
        "unparsed_verdicts": sum(not a["parsed"] for s in scores for a in s["judge_audit"]),
        "gateway": _gateway_counts(gw),
    })
    return EXIT_OK


def _default_metrics(refs: list[VqaSample]) -> list[str]:
    tasks = {r.task for r in refs}
    if tasks <= {"mcq", "video-mcq"}:
        return ["accuracy"]
    return ["rouge_l", "cider"]


def cmd_evaluate(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    stage = cfg.out / "evaluate"
    refs_path = args.refs or cfg.get("evaluate", "refs")
    preds_path = args.preds or cfg.get("evaluate", "preds")
    if not refs_path or not preds_path:
        raise ConfigError("evaluate needs refs and preds (config [evaluate] or --refs/--preds)")
    refs_path, preds_path = cfg.path(refs_path), cfg.path(preds_path)
    for p in (refs_path, preds_path):
        if not p.is_file():
            raise ConfigError(f"{p} does not exist")
    refs = list(read_corpus(refs_path))
    preds = read_predictions(preds_path)
    metrics = args.metrics or cfg.get("evaluate", "metrics") or _default_metrics(refs)
    benchmark = args.benchmark or cfg.get("evaluate", "benchmark") or refs_path.stem
    variant = args.cider_variant or cfg.get("evaluate", "cider_variant", "cider")
    report = run_benchmark(refs, preds, metrics, benchmark, cider_variant=variant, corpus_hash=file_sha256(refs_path))
    stage.mkdir(parents=True, exist_ok=True)
    report_path = stage / "report.json"
    write_json(report_path, report.to_dict())
    table_path = stage / "report.txt"
    table_path.write_text(report.table() + "\n", encoding="utf-8")
    outputs = [report_path, table_path]
    if not args.no_figures:
        from .figures import metric_histograms

        outputs.append(metric_histograms(report.rows, list(report.metrics), stage / "metrics.png", benchmark))
    stage_manifest(stage, "evaluate", cfg, outputs, {"samples": len(refs), "report_sha256": report.digest()})
    print(report.table())
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "synthesize": cmd_synthesize,
    "prepare-grpo": cmd_prepare_grpo,
    "budget": cmd_budget,
    "score-groups": cmd_score_groups,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline TOML file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output root (default: config 'out' or ./out)")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="medcurate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse registered dataset manifests")
    sub.add_parser("synthesize", parents=[common], help="turn ingest records into a VQA corpus")
    p = sub.add_parser("prepare-grpo", parents=[common], help="draw and rebalance an RL corpus")
    p.add_argument("--draw", type=int, help="number of samples to draw")
    p = sub.add_parser("budget", parents=[common], help="token and position budget per sample")
    p.add_argument("--corpus")
    p.add_argument("--max-extent", type=float)
    p.add_argument("--delta", type=float)
    p = sub.add_parser("score-groups", parents=[common], help="rewards and advantages for generation groups")
    p.add_argument("--input")
    p = sub.add_parser("evaluate", parents=[common], help="score predictions against references")
    p.add_argument("--refs")
    p.add_argument("--preds")
    p.add_argument("--metrics", nargs="+", help="accuracy, rouge_l, cider")
    p.add_argument("--benchmark")
    p.add_argument("--cider-variant", choices=["cider", "cider-d"])
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, RegistrationError) as e:
        logger.error("config error: %s", e)
        return EXIT_CONFIG
    except GatewayError as e:
        logger.error("gateway error: %s", e)
        return EXIT_GATEWAY
    except (CorpusError, InvalidSampleError, ManifestSchemaError, EvalError, StageError,
            SynthesisError, UnresolvableMediaError, OSError) as e:
        logger.error("data error: %s", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
