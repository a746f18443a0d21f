"""Image and label I/O plus the frame-sampling / relabel / split procedure.

Images are ``(H, W, 3)`` float arrays in [0, 1], RGB order. Labels are YOLO
text lines ``class cx cy w h`` with normalised coordinates.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

SPLITS = ("train", "test", "val")


class DataError(Exception):
    """Raised for malformed or missing dataset inputs."""


class PPMError(DataError):
    pass


class UnsupportedFormatError(PPMError):
    pass


class UnsupportedMaxvalError(PPMError):
    pass


class TruncatedPayloadError(PPMError):
    pass


class AnnotationParseError(DataError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


# --------------------------------------------------------------------- PPM


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedPayloadError("PPM header ends early")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P6":
        raise UnsupportedFormatError(f"{path}: unsupported image format {buf[:2]!r}, expected binary PPM 'P6'")
    (magic, w, h, maxval), offset = _header_tokens(buf, 4)
    try:
        width, height, maxv = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PPMError(f"{path}: malformed PPM header") from exc
    if maxv != 255:
        raise UnsupportedMaxvalError(f"{path}: maxval {maxv} unsupported, expected 255")
    if width < 1 or height < 1:
        raise PPMError(f"{path}: invalid dimensions {width}x{height}")
    need = width * height * 3
    raster = buf[offset : offset + need]
    if len(raster) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(raster)} bytes, expected {need}")
    pix = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return pix.astype(np.float32) / np.float32(255.0)


def to_bytes(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(image: np.ndarray, path) -> None:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_bytes(image).tobytes())


# ------------------------------------------------------------- annotations


@dataclass(frozen=True)
class Annotation:
    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def clipped(self) -> "Annotation":
        x0 = min(max(self.cx - self.w / 2, 0.0), 1.0)
        x1 = min(max(self.cx + self.w / 2, 0.0), 1.0)
        y0 = min(max(self.cy - self.h / 2, 0.0), 1.0)
        y1 = min(max(self.cy + self.h / 2, 0.0), 1.0)
        if (x0, x1, y0, y1) == (self.cx - self.w / 2, self.cx + self.w / 2, self.cy - self.h / 2, self.cy + self.h / 2):
            return self
        return Annotation(self.class_id, (x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def parse_annotations(text: str, source="<string>") -> list[Annotation]:
    out = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise AnnotationParseError(source, line_no, f"expected 5 fields, got {len(fields)}")
        try:
            cls = int(fields[0])
            vals = [float(v) for v in fields[1:]]
        except ValueError:
            raise AnnotationParseError(source, line_no, f"non-numeric field in {line.strip()!r}") from None
        if cls < 0:
            raise AnnotationParseError(source, line_no, f"negative class id {cls}")
        for v in vals:
            if not (-0.5 <= v <= 1.5):
                raise AnnotationParseError(source, line_no, f"value {v} outside [-0.5, 1.5]")
        if vals[2] < 0 or vals[3] < 0:
            raise AnnotationParseError(source, line_no, "negative box size")
        out.append(Annotation(cls, *vals).clipped())
    return out


def read_annotations(path) -> list[Annotation]:
    return parse_annotations(Path(path).read_text(), source=path)


def format_annotations(anns: Iterable[Annotation]) -> str:
    return "".join(f"{a.class_id} {a.cx:.6f} {a.cy:.6f} {a.w:.6f} {a.h:.6f}\n" for a in anns)


def write_annotations(anns: Iterable[Annotation], path) -> None:
    Path(path).write_text(format_annotations(anns))


def unify_labels(anns: Sequence[Annotation]) -> list[Annotation]:
    """Collapse every class to 0 (single "fish" class)."""
    return [replace(a, class_id=0) for a in anns]


# ----------------------------------------------------------------- manifest


@dataclass(frozen=True)
class Record:
    image_path: str
    ann_path: str
    frame: int
    split: str | None = None

    @property
    def video(self) -> str:
        # frames of one source video share a directory
        return os.path.dirname(self.image_path)


def read_manifest(path) -> list[Record]:
    records = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise DataError(f"{path}:{line_no}: expected 3 or 4 tab-separated fields, got {len(parts)}")
        try:
            frame = int(parts[2])
        except ValueError:
            raise DataError(f"{path}:{line_no}: frame number {parts[2]!r} is not an integer") from None
        split = parts[3].strip() if len(parts) == 4 and parts[3].strip() else None
        if split is not None and split not in SPLITS:
            raise DataError(f"{path}:{line_no}: unknown split {split!r}")
        records.append(Record(parts[0], parts[1], frame, split))
    return records


def write_manifest(records: Iterable[Record], path) -> None:
    with open(path, "w") as f:
        for r in records:
            f.write(f"{r.image_path}\t{r.ann_path}\t{r.frame}\t{r.split or ''}\n")


def resolve(base, p: str) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def group_by_video(records: Sequence[Record]) -> dict[str, list[Record]]:
    groups: dict[str, list[Record]] = {}
    for r in records:
        groups.setdefault(r.video, []).append(r)
    return groups


def sample_frames(records: Sequence[Record], stride: int = 30) -> list[Record]:
    """Keep one annotated frame every ``stride`` frames, per source video.

    Within a video, a frame is kept when it is congruent to the video's first
    annotated frame modulo ``stride``. Input order is preserved.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    first: dict[str, int] = {}
    for r in records:
        first[r.video] = min(first.get(r.video, r.frame), r.frame)
    return [r for r in records if (r.frame - first[r.video]) % stride == 0]


def split_counts(total: int, fractions: Sequence[float]) -> tuple[int, int, int]:
    """Floor each share; the leftover goes to train."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {fractions}")
    counts = [math.floor(total * f) for f in fractions]
    counts[0] += total - sum(counts)
    return tuple(counts)


def split_dataset(records: Sequence[Record], fractions=(0.7, 0.2, 0.1), seed: int = 0) -> list[Record]:
    """Seeded random train/test/val assignment; returned in input order."""
    n_train, n_test, _ = split_counts(len(records), fractions)
    order = np.random.default_rng(seed).permutation(len(records))
    tags = [""] * len(records)
    for rank, idx in enumerate(order):
        tags[idx] = "train" if rank < n_train else "test" if rank < n_train + n_test else "val"
    return [replace(r, split=t) for r, t in zip(records, tags)]


def missing_files(records: Sequence[Record], base) -> list[Path]:
    missing = []
    for r in records:
        for p in (r.image_path, r.ann_path):
            full = resolve(base, p)
            if not full.is_file():
                missing.append(full)
    return missing


def image_to_tensor(image: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) image -> (1, 3, H, W) array."""
    return np.ascontiguousarray(image.transpose(2, 0, 1)[None].astype(dtype))


def tensor_to_image(arr: np.ndarray, index: int = 0) -> np.ndarray:
    return np.ascontiguousarray(arr[index].transpose(1, 2, 0))
