"""Per-minute load traces as CSV."""
from __future__ import annotations

import csv
import io
from pathlib import Path

from farm.sim.model import LoadSample

HEADER = ("t_min", "normal_cores", "fillin_cores", "capacity")


class ParseError(ValueError):
    def __init__(self, row: int, message: str):
        super().__init__(f"row {row}: {message}")
        self.row = row


def format_trace(samples: list[LoadSample]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(HEADER)
    prev = None
    for s in samples:
        if prev is not None and s.t < prev:
            raise ValueError("samples must be time-sorted")
        prev = s.t
        w.writerow((int(s.t), int(s.normal_cores), int(s.fillin_cores), int(s.capacity)))
    return out.getvalue()


def write_trace(samples: list[LoadSample], path) -> None:
    text = format_trace(samples)
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write trace {path}: {exc.strerror or exc}") from exc


def parse_trace(text: str) -> list[LoadSample]:
    rows = csv.reader(io.StringIO(text))
    header = next(rows, None)
    if header is None or tuple(h.strip() for h in header) != HEADER:
        raise ParseError(1, f"expected header {','.join(HEADER)}")
    samples = []
    for n, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise ParseError(n, f"expected 4 fields, got {len(row)}")
        try:
            vals = [int(v) for v in row]
        except ValueError:
            raise ParseError(n, "fields must be integers") from None
        if min(vals) < 0:
            raise ParseError(n, "negative value")
        samples.append(LoadSample(*vals))
    return samples


def read_trace(path) -> list[LoadSample]:
    return parse_trace(Path(path).read_text())
