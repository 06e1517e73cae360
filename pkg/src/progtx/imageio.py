"""Binary PPM (P6) I/O and the calibration/evaluation corpus manifest."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_ENV = "PROGTX_DATA"
SPLITS = ("calibration", "evaluation")


class PPMError(ValueError):
    pass


@dataclass(frozen=True)
class ImageBuffer:
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise ValueError(f"expected uint8 samples, got {px.dtype}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def filled(cls, width: int, height: int, value: int = 128) -> "ImageBuffer":
        return cls(np.full((height, width, 3), value, dtype=np.uint8))


def _tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out, i = [], 0
    while len(out) < count:
        while i < len(raw) and raw[i:i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i:i + 1] == b"#":
            while i < len(raw) and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < len(raw) and not raw[i:i + 1].isspace() and raw[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise PPMError("truncated PPM header")
        out.append(raw[start:i])
    return out, i


def load_ppm(path) -> ImageBuffer:
    raw = Path(path).read_bytes()
    if raw[:2] != b"P6":
        raise PPMError(f"{path}: not a binary PPM (magic {raw[:2]!r})")
    (w, h, maxval), end = _tokens(raw[2:], 3)
    end += 2
    try:
        width, height, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise PPMError(f"{path}: malformed header ({exc})") from None
    if width <= 0 or height <= 0:
        raise PPMError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise PPMError(f"{path}: unsupported maxval {maxval} (only 255)")
    if end >= len(raw) or not raw[end:end + 1].isspace():
        raise PPMError(f"{path}: missing whitespace after header")
    data = raw[end + 1:]
    need = width * height * 3
    if len(data) < need:
        raise PPMError(f"{path}: truncated payload ({len(data)} of {need} bytes)")
    px = np.frombuffer(data[:need], dtype=np.uint8).reshape(height, width, 3).copy()
    return ImageBuffer(px)


def save_ppm(image: ImageBuffer, path) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(header + image.pixels.tobytes())
    os.replace(tmp, path)


@dataclass(frozen=True)
class CorpusEntry:
    name: str
    path: Path
    split: str


@dataclass(frozen=True)
class Corpus:
    entries: tuple[CorpusEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("corpus names must be unique")
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValueError(f"{e.name}: unknown split {e.split!r}")
        ordered = tuple(sorted(self.entries, key=lambda e: e.name))
        object.__setattr__(self, "entries", ordered)

    def split(self, which: str) -> list[CorpusEntry]:
        return [e for e in self.entries if e.split == which]

    def load(self, which: str | None = None) -> list[tuple[str, ImageBuffer]]:
        chosen = self.entries if which is None else self.split(which)
        return [(e.name, load_ppm(e.path)) for e in chosen]

    def to_manifest(self, root: Path | None = None) -> list[dict]:
        rows = []
        for e in self.entries:
            p = Path(e.path)
            if root is not None:
                try:
                    p = p.relative_to(root)
                except ValueError:
                    pass
            rows.append({"name": e.name, "path": str(p), "split": e.split})
        return rows


def load_manifest(path) -> Corpus:
    """Read ``[{name, path, split}, ...]``; relative paths resolve against the manifest."""
    path = Path(path)
    rows = json.loads(path.read_text())
    entries = []
    for row in rows:
        p = Path(row["path"])
        if not p.is_absolute():
            p = path.parent / p
        entries.append(CorpusEntry(row["name"], p, row["split"]))
    return Corpus(tuple(entries))


def write_manifest(corpus: Corpus, path) -> None:
    path = Path(path)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(json.dumps(corpus.to_manifest(path.parent), indent=1) + "\n")
    os.replace(tmp, path)


def default_data_root() -> Path:
    return Path(os.environ.get(DATA_ENV, "data"))
