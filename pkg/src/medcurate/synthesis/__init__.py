from .grpo_data import (
    NeedsReview,
    ReformulationError,
    downsample_yes_no,
    draw,
    is_yes_no,
    mcq_to_open,
    prepare_grpo,
    yes_no_keep_count,
)
from .llm import (
    PromptError,
    SynthesisPrompt,
    default_qa_prompt,
    default_video_prompt,
    llm_assisted_synthesize,
    parse_blocks,
    translate_sample,
    video_caption_to_tasks,
)
from .templates import (
    InsufficientDistractorsError,
    McqSpec,
    RegionGrid,
    SynonymPool,
    SynthesisError,
    caption_to_qa,
    label_to_mcq,
    label_to_open_qa,
    mask_to_localization,
    volume_to_qa,
)

__all__ = [
    "InsufficientDistractorsError",
    "McqSpec",
    "NeedsReview",
    "PromptError",
    "ReformulationError",
    "RegionGrid",
    "SynonymPool",
    "SynthesisError",
    "SynthesisPrompt",
    "caption_to_qa",
    "default_qa_prompt",
    "default_video_prompt",
    "downsample_yes_no",
    "draw",
    "is_yes_no",
    "label_to_mcq",
    "label_to_open_qa",
    "llm_assisted_synthesize",
    "mask_to_localization",
    "mcq_to_open",
    "parse_blocks",
    "prepare_grpo",
    "translate_sample",
    "video_caption_to_tasks",
    "volume_to_qa",
    "yes_no_keep_count",
]
