"""Visual-token accounting (tiling + pixel unshuffle) and variable position indexing."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .schema import PLACEHOLDER_RE, MediaRef, VqaSample


class UnresolvableMediaError(ValueError):
    pass


@dataclass(frozen=True)
class TileConfig:
    tile_size: int = 448
    patch_size: int = 14
    unshuffle: int = 2
    max_tiles: int | None = None
    dynamic: bool = True

    @property
    def tokens_per_tile(self) -> int:
        side = self.tile_size // self.patch_size
        return side * side // (self.unshuffle * self.unshuffle)


@dataclass(frozen=True)
class TilePlan:
    width: int
    height: int
    cols: int
    rows: int
    tile_size: int
    tokens_per_tile: int

    @property
    def tiles(self) -> int:
        return self.cols * self.rows

    @property
    def tokens(self) -> int:
        return self.tiles * self.tokens_per_tile


def _fit_grid(w: int, h: int, ts: int, max_tiles: int) -> tuple[int, int]:
    # largest aspect-preserving scale whose ceiling grid stays within max_tiles
    best_key, best = (0.0, 0), (1, 1)
    for c in range(1, max_tiles + 1):
        for r in range(1, max_tiles // c + 1):
            s = min(c * ts / w, r * ts / h)
            cols, rows = math.ceil(s * w / ts - 1e-9), math.ceil(s * h / ts - 1e-9)
            key = (s, -cols * rows)
            if key > best_key:
                best_key, best = key, (cols, rows)
    return best


def plan_tiles(w: int, h: int, cfg: TileConfig = TileConfig()) -> TilePlan:
    """Tile grid for a ``w`` x ``h`` image.

    Without a cap this is ``ceil(w/tile) * ceil(h/tile)``; with ``max_tiles``
    the image is shrunk (aspect preserved) to the largest size that fits.
    """
    if w <= 0 or h <= 0:
        raise ValueError(f"image size must be positive, got {w}x{h}")
    ts = cfg.tile_size
    if not cfg.dynamic:
        cols = rows = 1
    else:
        cols, rows = -(-w // ts), -(-h // ts)
        if cfg.max_tiles is not None and cols * rows > cfg.max_tiles:
            cols, rows = _fit_grid(w, h, ts, cfg.max_tiles)
    return TilePlan(w, h, cols, rows, ts, cfg.tokens_per_tile)


@dataclass(frozen=True)
class PositionConfig:
    delta: float = 0.25

    def __post_init__(self) -> None:
        if not 0 < self.delta <= 1:
            raise ValueError(f"delta must be in (0, 1], got {self.delta}")


@dataclass(frozen=True)
class PositionPlan:
    positions: np.ndarray
    types: tuple[str, ...]
    extent: float

    @property
    def last(self) -> float:
        return float(self.positions[-1])


_VISUAL = {"visual", "v", "V", "image"}
_TEXT = {"text", "t", "T"}


def _is_visual(types: Sequence[str]) -> np.ndarray:
    flags = np.empty(len(types), dtype=bool)
    for i, t in enumerate(types):
        if t in _VISUAL:
            flags[i] = True
        elif t in _TEXT:
            flags[i] = False
        else:
            raise ValueError(f"unknown token type {t!r}")
    return flags


def assign_positions(types: Sequence[str], cfg: PositionConfig = PositionConfig()) -> PositionPlan:
    """Position of token i is the sum of increments of tokens 1..i (text 1, visual delta).

    ``extent`` is the span the whole sequence occupies, i.e. the sum of every
    token's increment, so extents of concatenated sequences add.
    """
    if not len(types):
        raise ValueError("empty token sequence")
    vis = _is_visual(types)
    n_vis = np.cumsum(vis)
    n_text = np.arange(1, len(vis) + 1) - n_vis
    # the first token anchors at 0, so its own increment is excluded;
    # integer counts keep positions free of accumulated rounding
    v0 = int(vis[0])
    positions = (n_text - (1 - v0)) + cfg.delta * (n_vis - v0)
    extent = float(n_text[-1]) + cfg.delta * float(n_vis[-1])
    return PositionPlan(positions, tuple(types), extent)


def extent_of(text_tokens: int, visual_tokens: int, cfg: PositionConfig = PositionConfig()) -> float:
    return text_tokens + cfg.delta * visual_tokens


@dataclass(frozen=True)
class BudgetReport:
    id: str
    text_tokens: int
    visual_tokens: int
    extent: float
    passed: bool

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "text_tokens": self.text_tokens,
            "visual_tokens": self.visual_tokens,
            "extent": self.extent,
            "pass": self.passed,
        }


def whitespace_tokens(text: str) -> int:
    return len(text.split())


class MediaSizer:
    """Resolves (width, height) for media: recorded size first, then the file header."""

    def __init__(self, roots: Sequence[str | os.PathLike] | str | os.PathLike | None = None):
        if roots is None:
            roots = []
        elif isinstance(roots, (str, os.PathLike)):
            roots = [roots]
        self.roots = [Path(r) for r in roots]

    def locate(self, uri: str) -> Path:
        p = Path(uri)
        if p.is_absolute():
            return p
        for root in self.roots:
            if (root / p).exists():
                return root / p
        return p

    def image_size(self, uri: str) -> tuple[int, int]:
        from PIL import Image

        try:
            with Image.open(self.locate(uri)) as img:
                return img.size
        except OSError as e:
            raise UnresolvableMediaError(f"cannot read size of {uri}: {e}") from None

    def frame_sizes(self, m: MediaRef) -> list[tuple[int, int]]:
        """One (w, h) per visual unit: image, sampled slice, or sampled frame."""
        if m.kind == "image":
            return [(m.width, m.height) if m.width and m.height else self.image_size(m.uri)]
        if m.kind == "slice-series":
            if m.width and m.height:
                return [(m.width, m.height)] * len(m.slices)
            return [self.image_size(s) for s in m.slices]
        if m.kind == "video":
            if not (m.width and m.height):
                raise UnresolvableMediaError(f"video {m.uri} has no recorded frame size")
            if not m.frames:
                raise UnresolvableMediaError(f"video {m.uri} has no sampled frames")
            return [(m.width, m.height)] * len(m.frames)
        raise UnresolvableMediaError(f"unknown media kind {m.kind!r}")


def budget_check(
    sample: VqaSample,
    max_extent: float,
    tokenizer_len: Callable[[str], int] = whitespace_tokens,
    tiles: TileConfig = TileConfig(),
    positions: PositionConfig = PositionConfig(),
    sizer: MediaSizer | None = None,
) -> BudgetReport:
    sizer = sizer or MediaSizer()
    text = sum(tokenizer_len(PLACEHOLDER_RE.sub(" ", t.text)) for t in sample.turns)
    visual = 0
    for m in sample.media:
        for w, h in sizer.frame_sizes(m):
            visual += plan_tiles(w, h, tiles).tokens
    extent = extent_of(text, visual, positions)
    return BudgetReport(sample.id, text, visual, extent, extent <= max_extent)
