"""Wide-format CSV ingestion and emission.

Expected layout: header ``id,y1,...,yJ,t1,...,tJ``, one complete row per
individual, UTF-8, comma separators, decimal points.  Floats are written with
``repr`` so files round-trip bit-exactly through a strict reader.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DataFormatError
from .estimation import Dataset


def _expected_header(n_waves: int):
    return (
        ["id"]
        + [f"y{j}" for j in range(1, n_waves + 1)]
        + [f"t{j}" for j in range(1, n_waves + 1)]
    )


def _parse_header(header):
    if not header or header[0].strip().lower() != "id" or len(header) % 2 == 0:
        raise DataFormatError(
            "header must be 'id,y1..yJ,t1..tJ'; got %r" % ",".join(header or [])
        )
    n_waves = (len(header) - 1) // 2
    expected = _expected_header(n_waves)
    cleaned = [h.strip().lower() for h in header]
    if cleaned != expected:
        raise DataFormatError(
            "header must be %r; got %r" % (",".join(expected), ",".join(header))
        )
    return n_waves


def ingest_csv(path) -> Dataset:
    """Read and validate a wide-format dataset; errors name the file line."""
    path = Path(path)
    ids = []
    y_rows = []
    t_rows = []
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty file") from None
        n_waves = _parse_header(header)
        width = 1 + 2 * n_waves
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataFormatError(
                    f"{path}: row {line_no}: expected {width} fields, got {len(row)}"
                )
            values = []
            for col, cell in zip(_expected_header(n_waves)[1:], row[1:]):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataFormatError(
                        f"{path}: row {line_no}: non-numeric value {cell!r} "
                        f"in column {col}"
                    ) from None
            if not all(np.isfinite(values)):
                raise DataFormatError(
                    f"{path}: row {line_no}: non-finite value (complete cases only)"
                )
            times = values[n_waves:]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise DataFormatError(
                    f"{path}: row {line_no}: times must be strictly increasing"
                )
            ids.append(row[0])
            y_rows.append(values[:n_waves])
            t_rows.append(times)
    if not y_rows:
        raise DataFormatError(f"{path}: no data rows")
    return Dataset(y=np.array(y_rows), times=np.array(t_rows), ids=tuple(ids))


def fmt(x) -> str:
    """Shortest exact decimal representation of a float."""
    return repr(float(x))


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def write_dataset_csv(path, dataset: Dataset) -> None:
    n_waves = dataset.n_waves
    ids = dataset.ids or tuple(str(i + 1) for i in range(dataset.n))
    rows = [
        [ids[i]]
        + [fmt(v) for v in dataset.y[i]]
        + [fmt(v) for v in dataset.times[i]]
        for i in range(dataset.n)
    ]
    write_csv(path, _expected_header(n_waves), rows)


def write_json(path, payload) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
