import csv
import json
import threading
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

DATA = Path(__file__).parent / "data"

LESIONS = ["melanoma", "nevus", "basal cell carcinoma", "actinic keratosis"]


def fake_reply(prompt: str) -> str:
    """Deterministic stand-in for a chat model, keyed on the prompt shape."""
    if prompt.startswith("Translate"):
        return "译文: " + prompt.rsplit("\n\n", 1)[-1].strip()
    if prompt.startswith("You are grading"):
        cand = prompt.split("Candidate answer:", 1)[1].split("\n", 1)[0]
        ref = prompt.split("Reference answer:", 1)[1].split("\n", 1)[0]
        ok = ref.strip().lower() in cand.lower()
        return "VERDICT: CORRECT" if ok else "VERDICT: INCORRECT"
    if "multiple-choice" in prompt:
        return (
            "```mcq\nQUESTION: Which instrument appears first?\nANSWER: The endoscope\n"
            "DISTRACTORS:\n- The stapler\n- The clip applier\n```\n"
            "```mcq\nQUESTION: Broken block without an answer\n```"
        )
    label = prompt.split("Diagnostic labels:", 1)[1].split("\n", 1)[0].strip()
    return (
        f"```qa\nQUESTION: Which finding supports the diagnosis?\nANSWER: Features consistent with {label}.\n```\n"
        "```qa\nQUESTION: Is the lesion symmetric?\nANSWER: no\n```"
    )


class FakeTransport:
    """Replaces HttpTransport; counts calls and tracks peak concurrency."""

    calls = 0
    peak = 0
    _active = 0
    _lock = threading.Lock()

    def __init__(self, endpoint=None, api_key=None, timeout=None):
        pass

    def __call__(self, payload):
        cls = FakeTransport
        with cls._lock:
            cls.calls += 1
            cls._active += 1
            cls.peak = max(cls.peak, cls._active)
        try:
            text = payload["messages"][-1]["content"][0]["text"]
            return {"choices": [{"message": {"content": fake_reply(text)}}], "usage": {"total_tokens": len(text.split())}}
        finally:
            with cls._lock:
                cls._active -= 1

    @classmethod
    def reset(cls):
        cls.calls = cls.peak = cls._active = 0


class ForbiddenTransport:
    def __init__(self, *a, **kw):
        pass

    def __call__(self, payload):
        raise AssertionError("network access in replay mode")


def _png(path: Path, w: int, h: int, value: int = 128, mode: str = "L") -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (np.arange(w * h).reshape(h, w) % 251 + value) % 256
    if mode == "I;16":
        Image.fromarray((arr * 200).astype(np.uint16)).save(path)
    else:
        Image.fromarray(arr.astype(np.uint8), mode="L").save(path)


def _volume(d: Path, depth: int, declared: int | None = None) -> None:
    d.mkdir(parents=True, exist_ok=True)
    for i in range(depth):
        _png(d / f"{i:03d}.png", 24, 20, value=i * 7, mode="I;16")
    (d / "volume.json").write_text(json.dumps({"depth": declared or depth, "spacing": [1, 1, 2]}))


def build_workspace(root: Path, mode: str = "replay", strategies=None) -> Path:
    """Source datasets, a config file and an empty fixture dir under ``root``."""
    src = root / "sources"
    for i in range(4):
        _png(src / "roco" / f"r{i}.png", 64, 48, value=i)
        _png(src / "pad" / f"p{i}.png", 900, 500, value=i)
        _png(src / "abd" / f"a{i}.png", 100, 80, value=i)
    with open(src / "roco.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "image", "caption"])
        w.writerow(["r0", "roco/r0.png", "Axial CT showing a hypodense liver lesion."])
        w.writerow(["r1", "roco/r1.png", "Chest radiograph with right pleural effusion."])
        w.writerow(["r2", "roco/r2.png", ""])
        w.writerow(["r3", "roco/r3.png", "yes"])
    with open(src / "pad.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["key", "image", "label"])
        for i, lab in enumerate(["melanoma", "nevus", "basal cell carcinoma", "psoriasis"]):
            w.writerow([f"p{i}", f"pad/p{i}.png", lab])
    rows = [
        {"key": "a0", "image": "abd/a0.png", "width": 100, "height": 80, "x0": 5, "y0": 5, "x1": 30, "y1": 20, "target": "kidney"},
        {"key": "a1", "image": "abd/a1.png", "width": 100, "height": 80, "x0": 40, "y0": 30, "x1": 60, "y1": 50, "target": "liver"},
        {"key": "a2", "image": "abd/a2.png", "width": 100, "height": 80, "x0": 40, "y0": 30, "x1": 160, "y1": 50},
    ]
    lines = [json.dumps(r) for r in rows] + ["{not json"]
    (src / "abd.jsonl").write_text("\n".join(lines) + "\n")
    _volume(src / "m3d" / "v0", 12)
    _volume(src / "m3d" / "v1", 9)
    _volume(src / "m3d" / "v2", 5, declared=6)
    vols = [
        {"key": "v0", "volume": "m3d/v0", "answer": "A 2 cm lesion in the left lobe.", "question": "Where is the lesion?"},
        {"key": "v1", "volume": "m3d/v1", "answer": "No acute abnormality."},
        {"key": "v2", "volume": "m3d/v2", "answer": "Broken volume."},
    ]
    (src / "m3d.jsonl").write_text("\n".join(json.dumps(v) for v in vols) + "\n")
    vids = [
        {"key": "c0", "video": "vid/c0.mp4", "caption": "Laparoscopic cholecystectomy with clipping of the cystic duct.",
         "frame_count": 300, "fps": 30, "width": 640, "height": 360},
        {"key": "c1", "video": "vid/c1.mp4", "caption": "Colonoscopy withdrawal showing a small polyp.",
         "frame_count": 0, "fps": 25},
    ]
    (src / "vid.jsonl").write_text("\n".join(json.dumps(v) for v in vids) + "\n")
    groups = [
        {"prompt_id": "g-mcq", "gold": "B", "task": "mcq", "generations": [
            "<think>round opacity</think>Answer: B", "<think>maybe</think>Answer: C",
            "Answer: B", "<think>x</think>Answer: B"]},
        {"prompt_id": "g-open", "gold": "pleural effusion", "task": "open-qa", "question": "What is seen?",
         "generations": ["<think>fluid</think>Answer: left pleural effusion", "<think>air</think>Answer: pneumothorax",
                         "Answer: pleural effusion", "<think>unsure</think>Answer: nothing"]},
    ]
    (root / "groups.jsonl").write_text("".join(json.dumps(g) + "\n" for g in groups))
    (root / "fixtures").mkdir(exist_ok=True)
    strategies = strategies or ["caption", "localization", "label-mcq", "label-open", "volume",
                                "video", "video-mcq", "llm-assisted", "bilingual"]
    cfg = f"""
seed = 7

[[datasets]]
name = "ROCOv2"
modality = "multimodal"
style = "caption"
manifest = "sources/roco.csv"

[[datasets]]
name = "PAD-UFES-20"
modality = "dermoscopy"
style = "label"
manifest = "sources/pad.csv"
labels = {json.dumps(LESIONS)}

[[datasets]]
name = "AbdomenUS"
modality = "ultrasound"
style = "mask"
manifest = "sources/abd.jsonl"

[[datasets]]
name = "M3D"
modality = "ct"
style = "volume"
manifest = "sources/m3d.jsonl"

[[datasets]]
name = "MedVideoCap"
modality = "video"
style = "video"
manifest = "sources/vid.jsonl"

[ingest]
slices = 4
frames = 4

[synthesize]
strategies = {json.dumps(strategies)}

[gateway]
mode = "{mode}"
model = "fake-model"
fixtures = "fixtures"
media_root = "sources"
max_concurrency = 3
requests_per_minute = 100000

[prepare_grpo]
draw = 12
yes_no_fraction = 0.05

[grpo]
num_generations = 4

[score_groups]
input = "groups.jsonl"

[budget]
max_extent = 1200
delta = 0.25
media_roots = ["sources"]
"""
    path = root / "pipeline.toml"
    path.write_text(cfg)
    return path


@pytest.fixture
def fake_transport(monkeypatch):
    import medcurate.gateway as gateway

    FakeTransport.reset()
    monkeypatch.setattr(gateway, "HttpTransport", FakeTransport)
    return FakeTransport


@pytest.fixture
def forbid_network(monkeypatch):
    import medcurate.gateway as gateway

    monkeypatch.setattr(gateway, "HttpTransport", ForbiddenTransport)


@pytest.fixture(scope="session")
def recorded_workspace(tmp_path_factory):
    """Workspace whose fixture dir has been filled by one record-mode run."""
    import medcurate.gateway as gateway
    from medcurate.cli import main

    root = tmp_path_factory.mktemp("ws")
    cfg = build_workspace(root, mode="record")
    saved = gateway.HttpTransport
    gateway.HttpTransport = FakeTransport
    try:
        out = root / "record-out"
        assert main(["ingest", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["synthesize", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["score-groups", "--config", str(cfg), "--out", str(out)]) == 0
    finally:
        gateway.HttpTransport = saved
    cfg.write_text(cfg.read_text().replace('mode = "record"', 'mode = "replay"'))
    return root, cfg
