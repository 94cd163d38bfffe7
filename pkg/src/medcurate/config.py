"""Pipeline configuration: one TOML file with a section per subcommand."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .gateway import GatewayConfig
from .ingest import DatasetRegistration

STRATEGIES = (
    "caption", "localization", "label-mcq", "label-open", "volume",
    "video", "video-mcq", "llm-assisted", "bilingual",
)
DEFAULT_STRATEGIES = ("caption", "localization", "label-mcq", "label-open", "volume", "video")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    raw: dict[str, Any]
    base: Path
    seed: int = 0
    out: Path = Path("out")

    def section(self, name: str) -> dict[str, Any]:
        sec = self.raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        return sec

    def path(self, value: str | os.PathLike) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def get(self, section: str, key: str, default: Any = None) -> Any:
        return self.section(section).get(key, default)

    def required_path(self, section: str, key: str) -> Path:
        value = self.get(section, key)
        if value is None:
            raise ConfigError(f"[{section}] {key} is required")
        p = self.path(value)
        if not p.exists():
            raise ConfigError(f"[{section}] {key}: {p} does not exist")
        return p

    def snapshot(self) -> dict[str, Any]:
        """Config as written, minus the output root, plus the effective seed."""
        snap = copy.deepcopy(self.raw)
        snap.pop("out", None)
        snap["seed"] = self.seed
        return snap

    def registrations(self) -> list[DatasetRegistration]:
        entries = self.raw.get("datasets", [])
        if not isinstance(entries, list):
            raise ConfigError("[[datasets]] must be an array of tables")
        regs = []
        for i, d in enumerate(entries):
            missing = [k for k in ("name", "modality", "style", "manifest") if k not in d]
            if missing:
                raise ConfigError(f"datasets[{i}] is missing {', '.join(missing)}")
            manifest = self.path(d["manifest"])
            regs.append(DatasetRegistration(d["name"], d["modality"], d["style"], str(manifest), tuple(d.get("labels", ()))))
        return regs

    def strategies(self) -> set[str]:
        chosen = self.get("synthesize", "strategies", list(DEFAULT_STRATEGIES))
        unknown = sorted(set(chosen) - set(STRATEGIES))
        if unknown:
            raise ConfigError(f"unknown strategies: {', '.join(unknown)}")
        return set(chosen)

    def gateway(self) -> GatewayConfig | None:
        sec = self.section("gateway")
        if not sec:
            return None
        kw = dict(sec)
        for key in ("fixtures", "media_root"):
            if key in kw:
                kw[key] = self.path(kw[key])
        try:
            return GatewayConfig(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[gateway]: {e}") from None


def load_config(path: str | os.PathLike | None, seed: int | None = None, out: str | os.PathLike | None = None) -> PipelineConfig:
    if path is None:
        raw: dict[str, Any] = {}
        base = Path.cwd()
    else:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            raw = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
        base = path.resolve().parent
    cfg = PipelineConfig(raw, base)
    cfg.seed = int(seed if seed is not None else raw.get("seed", 0))
    cfg.out = Path(out) if out is not None else cfg.path(raw.get("out", "out"))
    return cfg
