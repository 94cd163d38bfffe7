"""Emit-only record of the four-stage training hyperparameters.

Nothing in this package trains a model; downstream trainers read this file.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Any

from .rewards import GrpoConfig


@dataclass(frozen=True)
class Optimizer:
    name: str = "AdamW"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8


@dataclass(frozen=True)
class Stage:
    name: str
    learning_rate: float
    weight_decay: float = 0.05
    lr_scheduler: str = "cosine"
    warmup_ratio: float = 0.03
    dynamic_image_size: bool = True
    max_image_size: int | None = 448
    bf16: bool = True
    epochs: int = 1
    trainable: tuple[str, ...] = ("vision_encoder", "projector", "language_model")
    optimizer: Optimizer | None = field(default_factory=Optimizer)
    effective_batch_size: int | None = 128
    num_gpus: int | None = 8
    gradient_accumulation_steps: int | None = 2
    max_grad_norm: float | None = None
    grpo: dict[str, Any] | None = None


def default_stages(grpo: GrpoConfig = GrpoConfig()) -> list[Stage]:
    pretrain = Stage("interleaved_pretraining", learning_rate=1e-5)
    knowledge = replace(pretrain, name="medical_knowledge_injection", trainable=("vision_encoder", "projector"))
    sft = replace(pretrain, name="instruction_tuning", learning_rate=2e-5)
    # stage 4 settings not stated for RL (optimizer, batch layout) are left unset
    rl = Stage(
        "medical_oriented_rl",
        learning_rate=1e-6,
        weight_decay=0.0,
        warmup_ratio=0.1,
        dynamic_image_size=False,
        max_image_size=None,
        optimizer=None,
        effective_batch_size=None,
        num_gpus=None,
        gradient_accumulation_steps=None,
        max_grad_norm=1.0,
        grpo={
            "num_generations": grpo.num_generations,
            "temperature": grpo.temperature,
            "beta": grpo.beta,
            "num_groups": grpo.num_groups,
        },
    )
    return [pretrain, knowledge, sft, rl]


def _clean(d: Any) -> Any:
    if isinstance(d, dict):
        return {k: _clean(v) for k, v in d.items() if v is not None}
    if isinstance(d, (list, tuple)):
        return [_clean(v) for v in d]
    return d


def training_manifest(grpo: GrpoConfig = GrpoConfig()) -> dict[str, Any]:
    stages = default_stages(grpo)
    return {
        "kind": "training-manifest",
        "emit_only": True,
        "stages": [{"stage": i + 1, **_clean(asdict(s))} for i, s in enumerate(stages)],
    }
