import json


from medcurate.cli import main
from medcurate.schema import read_corpus
from conftest import build_workspace

STAGES = ["ingest", "synthesize", "prepare-grpo", "budget", "score-groups"]


def run(cfg, out, *cmd):
    return main([cmd[0], "--config", str(cfg), "--out", str(out), *cmd[1:]])


def write_eval_inputs(root, out):
    refs = [s for s in read_corpus(out / "synthesize" / "corpus.jsonl") if s.task == "caption"]
    with open(root / "refs.jsonl", "w") as f:
        for s in refs:
            f.write(json.dumps(s.to_dict(), ensure_ascii=False) + "\n")
    with open(root / "preds.jsonl", "w") as f:
        for i, s in enumerate(refs):
            f.write(json.dumps({"id": s.id, "prediction": s.answer if i % 2 else "a chest radiograph"}, ensure_ascii=False) + "\n")


def full_run(root, cfg, out):
    for stage in STAGES:
        assert run(cfg, out, stage) == 0, stage
    write_eval_inputs(root, out)
    assert run(cfg, out, "evaluate", "--refs", str(root / "refs.jsonl"), "--preds", str(root / "preds.jsonl")) == 0


def snapshot(out):
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}


def test_replay_pipeline_is_byte_identical(recorded_workspace, forbid_network, capsys):
    root, cfg = recorded_workspace
    full_run(root, cfg, root / "run-a")
    full_run(root, cfg, root / "run-b")
    a, b = snapshot(root / "run-a"), snapshot(root / "run-b")
    assert a.keys() == b.keys()
    assert [k for k in a if a[k] != b[k]] == []
    for stage in ("ingest", "synthesize", "grpo", "budget", "score", "evaluate"):
        assert f"{stage}/manifest.json" in a
    assert "evaluate/metrics.png" in a and "grpo/composition.png" in a and "budget/extent.png" in a
    assert "rouge_l" in capsys.readouterr().out


def test_stage_manifest_contents(recorded_workspace, forbid_network):
    root, cfg = recorded_workspace
    out = root / "run-m"
    assert run(cfg, out, "ingest") == 0
    assert run(cfg, out, "synthesize") == 0
    m = json.loads((out / "synthesize" / "manifest.json").read_text())
    assert m["stage"] == "synthesize" and m["seed"] == 7
    assert "out" not in m["config"]
    assert m["counts"]["gateway"] == {"network_calls": 0, "cache_hits": 0}
    assert set(m["outputs"]) >= {"corpus.jsonl", "rejects.jsonl"}
    tasks = m["counts"]["tasks"]
    assert {"caption", "localization", "mcq", "open-qa", "report", "video-summary", "video-mcq"} <= set(tasks)
    ingest = json.loads((out / "ingest" / "manifest.json").read_text())["counts"]
    assert ingest["AbdomenUS"] == {"rows": 4, "records": 2, "rejects": 2}


def test_seed_changes_output(tmp_path):
    cfg = build_workspace(tmp_path, strategies=["caption", "label-mcq", "label-open"])
    corpora = {}
    for name, seed in (("a", "1"), ("b", "2"), ("c", "1")):
        out = tmp_path / name
        assert run(cfg, out, "ingest", "--seed", seed) == 0
        assert run(cfg, out, "synthesize", "--seed", seed) == 0
        corpora[name] = (out / "synthesize" / "corpus.jsonl").read_bytes()
    assert corpora["a"] == corpora["c"]
    assert corpora["a"] != corpora["b"]


def test_missing_config_is_config_error(tmp_path):
    assert run(tmp_path / "nope.toml", tmp_path / "o", "ingest") == 2


def test_unknown_dataset_is_config_error(tmp_path):
    cfg = build_workspace(tmp_path)
    cfg.write_text(cfg.read_text().replace("[ingest]", '[ingest]\ndatasets = ["Nope"]'))
    assert run(cfg, tmp_path / "o", "ingest") == 2


def test_label_dataset_without_vocabulary(tmp_path):
    cfg = build_workspace(tmp_path)
    cfg.write_text(cfg.read_text().replace('labels = ["melanoma", "nevus", "basal cell carcinoma", "actinic keratosis"]\n', ""))
    assert run(cfg, tmp_path / "o", "ingest") == 2


def test_synthesize_before_ingest_is_data_error(tmp_path):
    cfg = build_workspace(tmp_path, strategies=["caption"])
    assert run(cfg, tmp_path / "o", "synthesize") == 1


def test_replay_miss_is_gateway_error(tmp_path, forbid_network):
    cfg = build_workspace(tmp_path, mode="replay")
    assert run(cfg, tmp_path / "o", "ingest") == 0
    assert run(cfg, tmp_path / "o", "synthesize") == 3


def test_template_only_run_needs_no_gateway(tmp_path):
    cfg = build_workspace(tmp_path, strategies=["caption", "label-mcq"])
    cfg.write_text(cfg.read_text().replace("[gateway]", "[unused]"))
    out = tmp_path / "o"
    assert run(cfg, out, "ingest") == 0
    assert run(cfg, out, "synthesize") == 0
    tasks = {s.task for s in read_corpus(out / "synthesize" / "corpus.jsonl")}
    assert tasks == {"caption", "mcq"}


def test_all_strategies_disabled_gives_empty_corpus(tmp_path, caplog):
    cfg = build_workspace(tmp_path)
    cfg.write_text(cfg.read_text().replace("strategies = [", "strategies = []\nold = ["))
    out = tmp_path / "o"
    assert run(cfg, out, "synthesize") == 0
    assert (out / "synthesize" / "corpus.jsonl").read_bytes() == b""
    assert "disabled" in caplog.text


def test_draw_larger_than_corpus(tmp_path):
    cfg = build_workspace(tmp_path, strategies=["caption"])
    out = tmp_path / "o"
    assert run(cfg, out, "ingest") == 0
    assert run(cfg, out, "synthesize") == 0
    assert run(cfg, out, "prepare-grpo", "--draw", "1000") == 1


def test_budget_requires_max_extent(tmp_path):
    cfg = build_workspace(tmp_path, strategies=["caption"])
    cfg.write_text(cfg.read_text().replace("max_extent = 1200\n", ""))
    assert run(cfg, tmp_path / "o", "budget") == 2


def test_evaluate_errors(recorded_workspace, tmp_path, forbid_network):
    root, cfg = recorded_workspace
    out = tmp_path / "o"
    assert run(cfg, out, "ingest") == 0
    assert run(cfg, out, "synthesize") == 0
    write_eval_inputs(tmp_path, out)
    refs, preds = tmp_path / "refs.jsonl", tmp_path / "preds.jsonl"
    lines = preds.read_text().splitlines()
    preds.write_text("\n".join(lines[1:]) + "\n")
    assert run(cfg, out, "evaluate", "--refs", str(refs), "--preds", str(preds)) == 1
    preds.write_text("\n".join(lines[:1] + ["{broken"]) + "\n")
    assert run(cfg, out, "evaluate", "--refs", str(refs), "--preds", str(preds)) == 1
    assert not (out / "evaluate" / "report.json").exists()
    assert run(cfg, out, "evaluate", "--refs", str(refs), "--preds", str(tmp_path / "missing.jsonl")) == 2


def test_score_groups_output(recorded_workspace, tmp_path, forbid_network):
    root, cfg = recorded_workspace
    out = tmp_path / "o"
    assert run(cfg, out, "score-groups") == 0
    rows = [json.loads(line) for line in (out / "score" / "scores.jsonl").read_text().splitlines()]
    assert [r["prompt_id"] for r in rows] == ["g-mcq", "g-open"]
    assert rows[0]["rewards"] == [1.0, 0.5, 0.5, 1.0]
    assert [a["verdict"] for a in rows[1]["judge_audit"]] == ["CORRECT", "INCORRECT", "CORRECT", "INCORRECT"]
    for r in rows:
        assert abs(sum(r["advantages"])) < 1e-9
