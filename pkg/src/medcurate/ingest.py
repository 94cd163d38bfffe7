"""Source-dataset adapters: registration, manifest parsing, and volume slicing."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Union

import numpy as np
from PIL import Image

from .schema import MODALITIES, MediaRef, write_json

STYLES = ("caption", "mask", "label", "volume", "video")

# Collected source datasets: name -> (modality, annotation style)
CATALOG: dict[str, tuple[str, str]] = {
    "Digital Knee X-ray": ("xray", "label"),
    "M3D": ("ct", "volume"),
    "Brain-Tumor-MRI": ("mri", "caption"),
    "AbdomenUS": ("ultrasound", "mask"),
    "Breast Ultrasound Images": ("ultrasound", "label"),
    "Annotated Ultrasound Liver images": ("ultrasound", "mask"),
    "PAD-UFES-20": ("dermoscopy", "label"),
    "EyePACS": ("ophthalmology", "label"),
    "ROCOv2": ("multimodal", "caption"),
    "Harvard-FairVLMed": ("multimodal", "caption"),
    "MedICaT": ("multimodal", "caption"),
    "MedPix-2.0": ("multimodal", "caption"),
    "MedVideoCap": ("video", "video"),
}

REQUIRED_COLUMNS = {
    "caption": ("key", "image", "caption"),
    "mask": ("key", "image", "width", "height", "x0", "y0", "x1", "y1"),
    "label": ("key", "image", "label"),
    "volume": ("key", "volume", "answer"),
    "video": ("key", "video", "caption", "frame_count", "fps"),
}

SLICE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class RegistrationError(ValueError):
    pass


class ManifestSchemaError(ValueError):
    def __init__(self, dataset: str, column: str, line: int | None = None):
        self.dataset = dataset
        self.column = column
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{dataset}: manifest missing required column {column!r}{where}")


class VolumeError(ValueError):
    pass


class RowError(ValueError):
    """A single manifest row could not be turned into a record."""


@dataclass(frozen=True)
class Caption:
    text: str


@dataclass(frozen=True)
class MaskRegion:
    x0: float
    y0: float
    x1: float
    y1: float
    region: str | None = None
    target: str | None = None


@dataclass(frozen=True)
class ClassLabel:
    label: str
    vocabulary: tuple[str, ...]


@dataclass(frozen=True)
class VolumeAnnotation:
    answer: str
    question: str | None = None


@dataclass(frozen=True)
class VideoCaption:
    text: str


Annotation = Union[Caption, MaskRegion, ClassLabel, VolumeAnnotation, VideoCaption]

_ANNOTATION_TYPES: dict[str, type] = {
    "caption": Caption,
    "mask": MaskRegion,
    "label": ClassLabel,
    "volume": VolumeAnnotation,
    "video": VideoCaption,
}
_STYLE_OF = {cls: style for style, cls in _ANNOTATION_TYPES.items()}


@dataclass(frozen=True)
class IngestRecord:
    dataset: str
    key: str
    media: MediaRef
    annotation: Annotation
    modality: str = "multimodal"

    @property
    def style(self) -> str:
        return _STYLE_OF[type(self.annotation)]

    def to_dict(self) -> dict[str, Any]:
        ann = asdict(self.annotation)
        if "vocabulary" in ann:
            ann["vocabulary"] = list(ann["vocabulary"])
        return {
            "dataset": self.dataset,
            "key": self.key,
            "modality": self.modality,
            "media": self.media.to_dict(),
            "annotation": {"type": self.style, **ann},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> IngestRecord:
        ann = dict(d["annotation"])
        kind = _ANNOTATION_TYPES[ann.pop("type")]
        if kind is ClassLabel:
            ann["vocabulary"] = tuple(ann["vocabulary"])
        return cls(d["dataset"], d["key"], MediaRef.from_dict(d["media"]), kind(**ann), d.get("modality", "multimodal"))


@dataclass(frozen=True)
class Reject:
    key: str
    reason: str

    def to_dict(self) -> dict[str, str]:
        return {"key": self.key, "reason": self.reason}


@dataclass(frozen=True)
class DatasetRegistration:
    name: str
    modality: str
    style: str
    manifest: str
    labels: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["labels"] = list(self.labels)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> DatasetRegistration:
        return cls(d["name"], d["modality"], d["style"], str(d["manifest"]), tuple(d.get("labels", ())))


@dataclass(frozen=True)
class RegistryHandle:
    name: str
    registration: DatasetRegistration


@dataclass
class Registry:
    """Named dataset registrations, optionally persisted to a JSON file."""

    path: Path | None = None
    entries: dict[str, DatasetRegistration] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | os.PathLike) -> Registry:
        path = Path(path)
        reg = cls(path)
        if path.exists():
            for d in json.loads(path.read_text(encoding="utf-8"))["datasets"]:
                r = DatasetRegistration.from_dict(d)
                reg.entries[r.name] = r
        return reg

    def save(self) -> None:
        if self.path is not None:
            write_json(self.path, {"datasets": [r.to_dict() for r in self.entries.values()]})

    def register(self, reg: DatasetRegistration) -> RegistryHandle:
        if reg.name in self.entries:
            raise RegistrationError(f"dataset {reg.name!r} is already registered")
        if reg.name == "synthetic":
            raise RegistrationError("'synthetic' is reserved")
        if reg.modality not in MODALITIES:
            raise RegistrationError(f"{reg.name}: unknown modality {reg.modality!r}")
        if reg.style not in STYLES:
            raise RegistrationError(f"{reg.name}: unknown annotation style {reg.style!r}")
        if reg.name in CATALOG and CATALOG[reg.name] != (reg.modality, reg.style):
            modality, style = CATALOG[reg.name]
            raise RegistrationError(f"{reg.name}: catalog says {{{modality}, {style}}}, got {{{reg.modality}, {reg.style}}}")
        if reg.style == "label":
            if not reg.labels:
                raise RegistrationError(f"{reg.name}: label datasets need a label vocabulary")
            if len(set(reg.labels)) != len(reg.labels):
                raise RegistrationError(f"{reg.name}: label vocabulary has duplicates")
        manifest = Path(reg.manifest)
        if not manifest.is_file() or not os.access(manifest, os.R_OK):
            raise RegistrationError(f"{reg.name}: manifest {reg.manifest} is not readable")
        self.entries[reg.name] = reg
        self.save()
        return RegistryHandle(reg.name, reg)

    def handle(self, name: str) -> RegistryHandle:
        try:
            return RegistryHandle(name, self.entries[name])
        except KeyError:
            raise RegistrationError(f"unknown dataset {name!r}") from None

    def names(self) -> set[str]:
        return set(self.entries)


def sample_slice_indices(k: int, depth: int) -> list[int]:
    """Evenly spaced indices over ``range(depth)``, always including both ends.

    Index j is round-half-up(j * (depth - 1) / (k - 1)), computed in integers.
    """
    if k < 2 or k > depth:
        raise ValueError(f"need 2 <= k <= depth, got k={k}, depth={depth}")
    span, steps = depth - 1, k - 1
    return [(2 * j * span + steps) // (2 * steps) for j in range(k)]


def _to_rgb(img: Image.Image) -> Image.Image:
    if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
        arr = np.asarray(img, dtype=np.float64)
        lo, hi = float(arr.min()), float(arr.max())
        scaled = np.zeros_like(arr) if hi == lo else (arr - lo) * (255.0 / (hi - lo))
        img = Image.fromarray(np.round(scaled).astype(np.uint8), mode="L")
    return img.convert("RGB")


def volume_slices(volume_dir: str | os.PathLike) -> tuple[dict[str, Any], list[Path]]:
    """Read ``volume.json`` and the ordered slice files of a volume directory."""
    volume_dir = Path(volume_dir)
    header_path = volume_dir / "volume.json"
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
        depth = int(header["depth"])
    except (OSError, ValueError, KeyError, TypeError) as e:
        raise VolumeError(f"{volume_dir}: unreadable volume header ({e})") from None
    slices = sorted(p for p in volume_dir.iterdir() if p.suffix.lower() in SLICE_SUFFIXES)
    if len(slices) != depth:
        raise VolumeError(f"{volume_dir}: depth mismatch, header says {depth} but {len(slices)} slices present")
    return header, slices


def serialize_volume(
    volume_dir: str | os.PathLike,
    k: int,
    dest_dir: str | os.PathLike,
    relative_to: str | os.PathLike | None = None,
    uri: str | None = None,
) -> MediaRef:
    """Export k evenly spaced slices as RGB PNGs and return the slice-series ref.

    Output files are named by source depth index, so lexical order equals
    depth order. Paths in the result are relative to ``relative_to`` when given.
    """
    header, slices = volume_slices(volume_dir)
    depth = len(slices)
    indices = sample_slice_indices(k, depth)
    dest_dir = Path(dest_dir)
    dest_dir.mkdir(parents=True, exist_ok=True)
    out: list[str] = []
    size: tuple[int, int] | None = None
    for idx in indices:
        try:
            with Image.open(slices[idx]) as img:
                rgb = _to_rgb(img)
        except OSError as e:
            raise VolumeError(f"{slices[idx]}: undecodable slice ({e})") from None
        size = size or rgb.size
        target = dest_dir / f"slice_{idx:04d}.png"
        rgb.save(target, format="PNG")
        out.append(os.path.relpath(target, relative_to) if relative_to is not None else str(target))
    return MediaRef(
        kind="slice-series",
        uri=uri if uri is not None else str(volume_dir),
        slices=tuple(out),
        depth=depth,
        width=size[0] if size else None,
        height=size[1] if size else None,
    )


def _read_rows(reg: DatasetRegistration) -> Iterator[tuple[int, dict[str, Any] | None, str | None]]:
    """Yield (line, row, parse_error) for each manifest row."""
    path = Path(reg.manifest)
    required = REQUIRED_COLUMNS[reg.style]
    if path.suffix.lower() == ".csv":
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            header = reader.fieldnames or []
            for col in required:
                if col not in header:
                    raise ManifestSchemaError(reg.name, col)
            for row in reader:
                yield reader.line_num, row, None
    else:
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as e:
                    yield lineno, None, f"malformed JSON ({e.msg})"
                    continue
                if not isinstance(obj, dict):
                    yield lineno, None, "row is not a JSON object"
                    continue
                for col in required:
                    if col not in obj:
                        raise ManifestSchemaError(reg.name, col, lineno)
                yield lineno, obj, None


def _opt(row: dict[str, Any], name: str) -> str | None:
    v = row.get(name)
    if v is None:
        return None
    v = str(v).strip()
    return v or None


def _int(row: dict[str, Any], name: str) -> int:
    try:
        return int(float(row[name]))
    except (TypeError, ValueError):
        raise RowError(f"{name} is not a number: {row[name]!r}") from None


def _float(row: dict[str, Any], name: str) -> float:
    try:
        return float(row[name])
    except (TypeError, ValueError):
        raise RowError(f"{name} is not a number: {row[name]!r}") from None


def _size(row: dict[str, Any]) -> tuple[int | None, int | None]:
    if _opt(row, "width") is None or _opt(row, "height") is None:
        return None, None
    return _int(row, "width"), _int(row, "height")


def _text(row: dict[str, Any], name: str) -> str:
    v = _opt(row, name)
    if v is None:
        raise RowError(f"empty {name}")
    return v


@dataclass
class IngestOptions:
    slices: int = 8
    frames: int = 8
    media_dir: Path | None = None
    relative_to: Path | None = None


def _parse_row(reg: DatasetRegistration, row: dict[str, Any], opts: IngestOptions) -> IngestRecord:
    key = _text(row, "key")
    style = reg.style
    if style == "caption":
        w, h = _size(row)
        media = MediaRef("image", _text(row, "image"), width=w, height=h)
        return IngestRecord(reg.name, key, media, Caption(_text(row, "caption")), reg.modality)
    if style == "label":
        label = _text(row, "label")
        if label not in reg.labels:
            raise RowError(f"label {label!r} not in registered vocabulary")
        w, h = _size(row)
        media = MediaRef("image", _text(row, "image"), width=w, height=h)
        return IngestRecord(reg.name, key, media, ClassLabel(label, reg.labels), reg.modality)
    if style == "mask":
        w, h = _int(row, "width"), _int(row, "height")
        x0, y0, x1, y1 = (_float(row, c) for c in ("x0", "y0", "x1", "y1"))
        if w <= 0 or h <= 0:
            raise RowError(f"non-positive image size {w}x{h}")
        if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
            raise RowError(f"bounding box ({x0},{y0})-({x1},{y1}) outside {w}x{h} image")
        media = MediaRef("image", _text(row, "image"), width=w, height=h)
        return IngestRecord(reg.name, key, media, MaskRegion(x0, y0, x1, y1, _opt(row, "region"), _opt(row, "target")), reg.modality)
    if style == "volume":
        rel = _text(row, "volume")
        src = Path(rel) if Path(rel).is_absolute() else Path(reg.manifest).parent / rel
        try:
            _, slices = volume_slices(src)
            k = min(opts.slices, len(slices))
            if k < 2:
                raise RowError(f"volume depth {len(slices)} too small to sample")
            dest = (opts.media_dir or Path(reg.manifest).parent / "slices") / safe_name(reg.name) / safe_name(key)
            media = serialize_volume(src, k, dest, opts.relative_to, uri=rel)
        except VolumeError as e:
            raise RowError(str(e)) from None
        return IngestRecord(reg.name, key, media, VolumeAnnotation(_text(row, "answer"), _opt(row, "question")), reg.modality)
    if style == "video":
        n = _int(row, "frame_count")
        fps = _float(row, "fps")
        if n < 1 or not fps > 0:
            raise RowError(f"invalid frame_count/fps: {n}/{fps}")
        frames = (0,) if n < 2 else tuple(sample_slice_indices(min(opts.frames, n), n))
        w, h = _size(row)
        media = MediaRef("video", _text(row, "video"), frame_count=n, fps=fps, frames=frames, width=w, height=h)
        return IngestRecord(reg.name, key, media, VideoCaption(_text(row, "caption")), reg.modality)
    raise RegistrationError(f"unknown style {style!r}")


def safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def ingest(
    handle: RegistryHandle | DatasetRegistration,
    rejects: list[Reject] | None = None,
    options: IngestOptions | None = None,
) -> Iterator[IngestRecord]:
    """Parse a registered dataset's manifest into records, in source order.

    Rows that fail to parse are appended to ``rejects`` (never dropped
    silently); a missing required column raises ManifestSchemaError.
    """
    reg = handle.registration if isinstance(handle, RegistryHandle) else handle
    opts = options or IngestOptions()
    sink = rejects if rejects is not None else []
    seen: set[str] = set()
    for lineno, row, err in _read_rows(reg):
        key = str(row.get("key", "")).strip() if row else ""
        key = key or f"line:{lineno}"
        if err is not None:
            sink.append(Reject(key, err))
            continue
        try:
            rec = _parse_row(reg, row, opts)
        except RowError as e:
            sink.append(Reject(key, str(e)))
            continue
        if rec.key in seen:
            sink.append(Reject(key, "duplicate key"))
            continue
        seen.add(rec.key)
        yield rec
