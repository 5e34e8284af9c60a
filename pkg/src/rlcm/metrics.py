"""Comma-delimited metrics files with a header row."""
from __future__ import annotations

import csv
import dataclasses
import math
from pathlib import Path
from typing import Iterable, Sequence

from .trainer import MetricsRow

METRICS_FIELDS = [f.name for f in dataclasses.fields(MetricsRow)]
TIMING_FIELDS = {"wall_clock_s", "inference_s", "seconds"}


class MetricsParseError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_rows(path, fields: Sequence[str], rows: Iterable[dict], append: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(fields)
        for row in rows:
            w.writerow([_fmt(row[f]) for f in fields])
    return path


def append_metrics(path, row: MetricsRow) -> Path:
    return write_rows(path, METRICS_FIELDS, [dataclasses.asdict(row)], append=True)


def read_rows(path) -> tuple[list[str], list[dict]]:
    """Parse a metrics file into (header, rows); numeric cells become int or float."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MetricsParseError(f"{path}: line 1: file is empty") from None
        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if len(cells) != len(header):
                raise MetricsParseError(
                    f"{path}: line {lineno}: expected {len(header)} fields, got {len(cells)}")
            row = {}
            for key, cell in zip(header, cells):
                try:
                    row[key] = int(cell)
                except ValueError:
                    try:
                        row[key] = float(cell)
                    except ValueError:
                        if key in ("task", "arm", "kind"):
                            row[key] = cell
                        else:
                            raise MetricsParseError(
                                f"{path}: line {lineno}: field {key!r} is not numeric: {cell!r}") from None
            rows.append(row)
    return header, rows


def read_metrics(path) -> list[dict]:
    header, rows = read_rows(path)
    missing = [f for f in METRICS_FIELDS if f not in header]
    if missing:
        raise MetricsParseError(f"{path}: line 1: missing columns {missing}")
    return rows
