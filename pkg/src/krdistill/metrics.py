"""Training metrics rows and their CSV form.

The file starts with a version comment, then a fixed header, then one row
per logging interval. Rows are appended and flushed as they arrive.
"""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields

from .errors import FormatError

METRICS_VERSION = 1
VERSION_LINE = f"# krdistill-metrics v{METRICS_VERSION}"


@dataclass
class MetricsRow:
    iter: int
    stage1_loss: float
    prior_loss: float
    kd_loss: float
    train_acc: float
    test_acc: float | None
    mean_epsilon: float
    weight_sparsity_fraction: float
    stage1_steps: int = 0
    stage2_steps: int = 0


HEADER = [f.name for f in fields(MetricsRow)]
_INT_FIELDS = {"iter", "stage1_steps", "stage2_steps"}


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


class MetricsWriter:
    """Append-only CSV sink; the header is written once when the file is created."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._fh.write(VERSION_LINE + "\n")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(HEADER)
        self._fh.flush()
        self._last_iter = None

    def append(self, row):
        if self._last_iter is not None and row.iter <= self._last_iter:
            raise ValueError(f"metrics rows must have increasing iter ({row.iter} after {self._last_iter})")
        self._last_iter = row.iter
        self._writer.writerow([_fmt(v) for v in astuple(row)])
        self._fh.flush()

    __call__ = append

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    with open(path, newline="") as fh:
        text = fh.read()
    return parse_metrics(text)


def parse_metrics(text):
    lines = text.splitlines()
    if not lines or lines[0].strip() != VERSION_LINE:
        raise FormatError(f"missing or unsupported metrics version line (expected {VERSION_LINE!r})")
    reader = csv.reader(io.StringIO("\n".join(lines[1:])))
    header = next(reader, None)
    if header != HEADER:
        raise FormatError(f"unexpected metrics header {header}")
    rows = []
    for lineno, rec in enumerate(reader, start=3):
        if len(rec) != len(HEADER):
            raise FormatError(f"line {lineno}: expected {len(HEADER)} fields, got {len(rec)}")
        values = {}
        try:
            for name, raw in zip(HEADER, rec):
                if raw == "":
                    values[name] = None
                elif name in _INT_FIELDS:
                    values[name] = int(raw)
                else:
                    values[name] = float(raw)
        except ValueError as exc:
            raise FormatError(f"line {lineno}: {exc}") from None
        rows.append(MetricsRow(**values))
    return rows


def render_table(rows):
    cols = ["iter", "stage1_loss", "prior_loss", "kd_loss", "train_acc", "test_acc",
            "mean_epsilon", "weight_sparsity_fraction"]
    out = ["  ".join(f"{c:>12}" for c in cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = getattr(r, c)
            cells.append(f"{'-':>12}" if v is None else
                         f"{v:>12d}" if isinstance(v, int) else f"{v:>12.5g}")
        out.append("  ".join(cells))
    return "\n".join(out)
