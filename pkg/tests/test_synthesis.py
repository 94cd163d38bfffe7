import time
from collections import Counter
from dataclasses import replace

import pytest
from hypothesis import given, settings, strategies as st

from medcurate.gateway import GatewayConfig, LlmGateway
from medcurate.schema import Option, validate
from medcurate.synthesis import (
    InsufficientDistractorsError,
    McqSpec,
    NeedsReview,
    PromptError,
    ReformulationError,
    RegionGrid,
    SynonymPool,
    SynthesisError,
    caption_to_qa,
    default_qa_prompt,
    default_video_prompt,
    downsample_yes_no,
    draw,
    is_yes_no,
    label_to_mcq,
    label_to_open_qa,
    llm_assisted_synthesize,
    mask_to_localization,
    mcq_to_open,
    parse_blocks,
    prepare_grpo,
    translate_sample,
    video_caption_to_tasks,
    volume_to_qa,
    yes_no_keep_count,
)
from conftest import FakeTransport
from factories import VOCAB, caption_record, label_record, mask_record, open_sample, video_record, volume_record, yes_no_corpus

POOL = SynonymPool.load()


def test_caption_answer_is_verbatim_and_deterministic():
    rec = caption_record(0)
    a, b = caption_to_qa(rec, POOL, 3), caption_to_qa(rec, POOL, 3)
    assert a == b
    assert a.answer == rec.annotation.text
    assert a.question.startswith("<media:0>\n")
    assert validate(a).ok


def test_caption_empty_rejected():
    with pytest.raises(SynthesisError):
        caption_to_qa(caption_record(0, text="  "), POOL, 0)


def test_synonym_pool_validates():
    with pytest.raises(SynthesisError):
        SynonymPool.from_dict({"caption": []})
    with pytest.raises(SynthesisError):
        SynonymPool.from_dict({"caption": ["Describe the {organ}."]})


@pytest.mark.parametrize("x,y,name", [
    (10, 10, "upper left"), (50, 40, "center"), (95, 75, "lower right"), (50, 5, "upper center"), (5, 40, "center left"),
])
def test_region_grid(x, y, name):
    assert RegionGrid.load().name(x, y, 100, 80) == name


def test_localization_uses_explicit_region_first():
    assert mask_to_localization(mask_record(0), RegionGrid()).answer == "upper left"
    assert mask_to_localization(mask_record(0, region="left kidney"), RegionGrid()).answer == "left kidney"


def test_mcq_has_one_correct_option():
    rec = label_record(1)
    s = label_to_mcq(rec, McqSpec.for_record(rec, 3, seed=5))
    assert validate(s).ok
    assert len(s.answer_space) == 4
    assert [o.label for o in s.answer_space] == list("ABCD")
    assert sum(o.correct for o in s.answer_space) == 1
    assert s.correct_option.text == "nevus"
    assert s.answer == f"{s.correct_option.label}. nevus"
    assert s == label_to_mcq(rec, McqSpec.for_record(rec, 3, seed=5))


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(1, 4))
def test_mcq_distractors_come_from_vocabulary(seed, d):
    rec = label_record(seed)
    s = label_to_mcq(rec, McqSpec.for_record(rec, d, seed))
    texts = [o.text for o in s.answer_space]
    assert len(set(texts)) == d + 1
    assert set(texts) <= set(VOCAB)


def test_mcq_insufficient_vocabulary():
    rec = label_record(0, vocab=("melanoma", "nevus"))
    with pytest.raises(InsufficientDistractorsError):
        label_to_mcq(rec, McqSpec.for_record(rec, 3))


@pytest.mark.parametrize("kw", [{"distractors": 0}, {"distractors": 5}, {"correct": "psoriasis"}, {"vocabulary": ("a", "a", "nevus")}])
def test_mcq_spec_validation(kw):
    args = dict(correct="nevus", distractors=2, vocabulary=VOCAB)
    args.update(kw)
    with pytest.raises(SynthesisError):
        McqSpec(**args)


def test_label_open_and_volume():
    assert label_to_open_qa(label_record(0), POOL, 0).answer == "melanoma"
    assert volume_to_qa(volume_record(0), POOL, 0).task == "report"
    s = volume_to_qa(volume_record(0, question="Is there a bleed?"), POOL, 0)
    assert s.task == "open-qa" and s.question.endswith("Is there a bleed?")
    assert s.provenance.strategy == "volumetric"


def test_order_independent_output():
    recs = [label_record(i) for i in range(20)]
    fwd = [label_to_mcq(r, McqSpec.for_record(r, 3, 9)) for r in recs]
    rev = [label_to_mcq(r, McqSpec.for_record(r, 3, 9)) for r in reversed(recs)]
    assert fwd == list(reversed(rev))


def test_prompt_requires_constraint_and_format():
    p = default_qa_prompt()
    p.check()
    with pytest.raises(PromptError):
        replace(p, constraint="").check()
    with pytest.raises(PromptError):
        replace(p, template=p.template.replace("$response_format", "")).check()


def test_parse_blocks():
    text = "intro\n```qa\nQUESTION: What?\nANSWER: That.\n```\n```mcq\nQUESTION: Which?\nANSWER: X\nDISTRACTORS:\n- Y\n- Z\n```"
    blocks = parse_blocks(text)
    assert blocks[0] == ("qa", {"QUESTION": "What?", "ANSWER": "That."})
    assert blocks[1][1]["DISTRACTORS"] == ["Y", "Z"]


def _gateway(tmp_path, mode="record"):
    return LlmGateway(GatewayConfig(mode=mode, fixtures=tmp_path / "fx", requests_per_minute=10_000), transport=FakeTransport())


def test_llm_assisted_and_rejects(tmp_path):
    rejects = []
    out = llm_assisted_synthesize(label_record(0), default_qa_prompt(), _gateway(tmp_path), rejects)
    assert [s.id for s in out] == ["PAD-UFES-20/p0/llm0", "PAD-UFES-20/p0/llm1"]
    assert "melanoma" in out[0].answer
    assert all(validate(s).ok for s in out)
    assert rejects == []


def test_video_tasks(tmp_path):
    rejects = []
    out = video_caption_to_tasks(video_record(0), default_video_prompt(), _gateway(tmp_path), rejects)
    assert [s.task for s in out] == ["video-summary", "video-mcq"]
    assert out[0].answer == video_record(0).annotation.text
    assert len(rejects) == 1 and rejects[0].key.endswith("#block1")
    assert all(validate(s).ok for s in out)
    assert len(video_caption_to_tasks(video_record(0), None, None)) == 1


def test_translation_preserves_structure(tmp_path):
    gw = _gateway(tmp_path)
    rec = label_record(2)
    s = label_to_mcq(rec, McqSpec.for_record(rec, 2))
    zh = translate_sample(s, gw)
    assert zh.language == "zh" and zh.id == s.id + "/zh"
    assert zh.question.startswith("<media:0>\n")
    assert [o.label for o in zh.answer_space] == [o.label for o in s.answer_space]
    assert zh.correct_option.label == s.correct_option.label
    assert validate(zh).ok


def test_mcq_to_open():
    rec = label_record(3)
    s = label_to_mcq(rec, McqSpec.for_record(rec, 3))
    o = mcq_to_open(s)
    assert o.id == s.id and o.task == "open-qa" and o.answer_space is None
    assert o.answer == "actinic keratosis"
    assert "A." not in o.question
    assert validate(o).ok


def test_mcq_to_open_refuses():
    rec = label_record(3)
    s = label_to_mcq(rec, McqSpec.for_record(rec, 3))
    with pytest.raises(ReformulationError):
        mcq_to_open(open_sample(0, "yes"))
    stem = s.turns[0].text.replace("\nA.", " Ignore option A.\nA.", 1)
    with pytest.raises(NeedsReview):
        mcq_to_open(replace(s, turns=(replace(s.turns[0], text=stem), s.turns[1])))
    shuffled = tuple(reversed(s.answer_space))
    with pytest.raises(ReformulationError):
        mcq_to_open(replace(s, answer_space=tuple(Option(o.label, t.text, t.correct) for o, t in zip(s.answer_space, shuffled))))


def test_yes_no_detection():
    assert is_yes_no(open_sample(0, "Yes."))
    assert is_yes_no(open_sample(0, " NO "))
    assert not is_yes_no(open_sample(0, "yes, a fracture"))


def test_keep_count_reference():
    assert yes_no_keep_count(1000, 9000, 0.05) == 474
    assert yes_no_keep_count(10, 9000, 0.05) == 10


def test_downsample_keeps_others_in_order():
    corpus = yes_no_corpus(200, 1800)
    out = downsample_yes_no(corpus, 0.05, 1)
    others = [s for s in corpus if not is_yes_no(s)]
    assert [s for s in out if not is_yes_no(s)] == others
    assert downsample_yes_no(corpus, 0.05, 1) == out
    assert downsample_yes_no(corpus, 0.5, 1) == corpus


def test_draw():
    corpus = [open_sample(i, "x") for i in range(100)]
    d = draw(corpus, 10, 4)
    assert len(d) == 10 and d == draw(corpus, 10, 4)
    assert [corpus.index(s) for s in d] == sorted(corpus.index(s) for s in d)
    with pytest.raises(ValueError):
        draw(corpus, 101, 0)


def test_stratified_draw_is_proportional():
    from dataclasses import replace as dc_replace

    corpus = [open_sample(i, "x") for i in range(90)]
    corpus = [dc_replace(s, modality="ct" if i < 60 else "ultrasound") for i, s in enumerate(corpus)]
    d = draw(corpus, 30, 1, stratify="modality")
    assert Counter(s.modality for s in d) == {"ct": 20, "ultrasound": 10}
    assert d == draw(corpus, 30, 1, stratify="modality")
    assert len(draw(corpus, 7, 1, stratify="modality")) == 7
    with pytest.raises(ValueError):
        draw(corpus, 5, 1, stratify="language")


def test_prepare_grpo_reformulates_everything():
    recs = [label_record(i) for i in range(30)]
    corpus = [label_to_mcq(r, McqSpec.for_record(r, 3)) for r in recs] + [open_sample(i, "no") for i in range(30)]
    prep = prepare_grpo(corpus, 40, 0.05, 2)
    assert prep.drawn == 40
    assert not any(s.task == "mcq" for s in prep.samples)
    assert prep.yes_no_after < prep.yes_no_before


def test_template_throughput_smoke():
    recs = [caption_record(i) for i in range(5000)] + [label_record(i) for i in range(5000)]
    t = time.perf_counter()
    for r in recs:
        if r.style == "caption":
            caption_to_qa(r, POOL, 0)
        else:
            label_to_mcq(r, McqSpec.for_record(r, 3))
    assert len(recs) / (time.perf_counter() - t) > 2000
