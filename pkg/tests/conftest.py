"""Shared fixtures: synthetic images and manifest builders."""

from __future__ import annotations

import csv
import io
import struct
import zlib
from pathlib import Path
from typing import Optional, Sequence

import pytest

from pustage.domain import STAGE_ORDER, StageLabel


def tiny_png(r: int = 0, g: int = 0, b: int = 0) -> bytes:
    """Minimal valid 1x1 RGB PNG."""

    def chunk(kind: bytes, data: bytes) -> bytes:
        return (
            struct.pack(">I", len(data))
            + kind
            + data
            + struct.pack(">I", zlib.crc32(kind + data))
        )

    ihdr = struct.pack(">IIBBBBB", 1, 1, 8, 2, 0, 0, 0)
    idat = zlib.compress(b"\x00" + bytes((r, g, b)))
    return b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr) + chunk(b"IDAT", idat) + chunk(b"IEND", b"")


@pytest.fixture
def stage_images(tmp_path: Path) -> dict[StageLabel, Path]:
    """One tiny PNG per stage, reusable across manifest rows."""
    out = {}
    for index, stage in enumerate(STAGE_ORDER):
        path = tmp_path / f"stage_{stage.name.lower()}.png"
        path.write_bytes(tiny_png(60 * index, 10, 10))
        out[stage] = path
    return out


def write_manifest_csv(
    path: Path,
    rows: Sequence[tuple[str, Path, str, Optional[str]]],
) -> Path:
    """rows: (case_id, image_path, stage_token, note)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["case_id", "image_path", "stage", "note"])
    for case_id, image_path, stage, note in rows:
        writer.writerow([case_id, str(image_path), stage, note or ""])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def make_counted_manifest(
    tmp_path: Path,
    images: dict[StageLabel, Path],
    counts: dict[StageLabel, int],
    name: str = "manifest.csv",
    notes: bool = False,
) -> Path:
    """Manifest with the given per-stage case counts, images shared."""
    rows = []
    index = 0
    for stage in STAGE_ORDER:
        for _ in range(counts.get(stage, 0)):
            index += 1
            note = f"synthetic-case-{index:04d}" if notes else None
            rows.append((f"case-{index:04d}", images[stage], stage.name, note))
    return write_manifest_csv(tmp_path / name, rows)


PIID_COUNTS = {
    StageLabel.I: 230,
    StageLabel.II: 313,
    StageLabel.III: 275,
    StageLabel.IV: 273,
}
