"""Plain-text exchange format for an external model's outputs.

::

    scod-logits v1 L=<n> E=<m>
    origin,label-or-dash,logit_1,...,logit_n,ood-or-dash,emb_1,...,emb_m

Origins are ``in`` (labeled test inliers), ``out`` (test outliers), ``wild``
(unlabeled mixture) and ``strict_in`` (certified inliers). Floats are written
with ``repr`` so a round trip is bit-exact.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .metrics import EvaluationSet

HEADER_RE = re.compile(r"^scod-logits v1 L=(\d+) E=(\d+)$")
ORIGINS = ("in", "out", "wild", "strict_in")


@dataclass(frozen=True)
class LogitsData:
    """Parsed logits file. ``ood`` is NaN where the record had no OOD logit."""

    num_classes: int
    embed_dim: int
    origin: np.ndarray
    labels: np.ndarray
    logits: np.ndarray
    ood: np.ndarray
    embedding: np.ndarray

    def __len__(self) -> int:
        return self.origin.size

    @property
    def has_ood(self) -> bool:
        return bool(len(self)) and not np.isnan(self.ood).any()

    def subset(self, *origins: str) -> "LogitsData":
        m = np.isin(self.origin, origins)
        return LogitsData(
            self.num_classes,
            self.embed_dim,
            self.origin[m],
            self.labels[m],
            self.logits[m],
            self.ood[m],
            self.embedding[m],
        )

    def evaluation(self) -> tuple["LogitsData", EvaluationSet]:
        """Test records (in, then out, in file order) and their evaluation set."""
        test = self.subset("in", "out")
        order = np.argsort(test.origin != "in", kind="stable")
        test = LogitsData(
            test.num_classes,
            test.embed_dim,
            test.origin[order],
            test.labels[order],
            test.logits[order],
            test.ood[order],
            test.embedding[order],
        )
        if not (test.origin == "in").any() or not (test.origin == "out").any():
            raise DataError("logits file needs both 'in' and 'out' records for evaluation")
        return test, EvaluationSet(test.labels, test.origin == "out")


def _bad(line_no: int, record: int | None, msg: str) -> DataError:
    where = f"line {line_no}" if record is None else f"line {line_no} (record {record})"
    return DataError(f"{where}: {msg}")


def parse_logits(text: str) -> LogitsData:
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise DataError("empty logits file")
    m = HEADER_RE.match(lines[0].strip())
    if not m:
        raise _bad(1, None, "expected header 'scod-logits v1 L=<n> E=<m>'")
    L, E = int(m.group(1)), int(m.group(2))
    if L < 1:
        raise _bad(1, None, "L must be at least 1")
    width = 3 + L + E
    origin, labels, logits, ood, emb = [], [], [], [], []
    record = 0
    for line_no, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        record += 1
        fields = [f.strip() for f in raw.split(",")]
        if len(fields) != width:
            got = len(fields) - 3 - E
            raise _bad(
                line_no, record, f"expected {width} fields for L={L}, E={E}, got {len(fields)} (L={got}?)"
            )
        o, lab = fields[0], fields[1]
        if o not in ORIGINS:
            raise _bad(line_no, record, f"unknown origin {o!r}")
        if lab == "-":
            y = -1
            if o == "in":
                raise _bad(line_no, record, "'in' records need a label")
        else:
            if o in ("out", "wild"):
                raise _bad(line_no, record, f"'{o}' records must not carry a label")
            try:
                y = int(lab)
            except ValueError:
                raise _bad(line_no, record, f"bad label {lab!r}") from None
            if not 0 <= y < L:
                raise _bad(line_no, record, f"label {y} out of range for L={L}")
        try:
            z = [float(v) for v in fields[2 : 2 + L]]
            s = np.nan if fields[2 + L] == "-" else float(fields[2 + L])
            e = [float(v) for v in fields[3 + L :]]
        except ValueError as exc:
            raise _bad(line_no, record, f"bad number ({exc})") from None
        if any(np.isnan(z)) or any(np.isnan(e)):
            raise _bad(line_no, record, "NaN value")
        origin.append(o)
        labels.append(y)
        logits.append(z)
        ood.append(s)
        emb.append(e)
    if record == 0:
        raise DataError("logits file has a header but no records")
    return LogitsData(
        L,
        E,
        np.array(origin),
        np.array(labels, dtype=int),
        np.array(logits, dtype=float).reshape(-1, L),
        np.array(ood, dtype=float),
        np.array(emb, dtype=float).reshape(-1, E),
    )


def read_logits(path: str | Path) -> LogitsData:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read logits file {path}: {exc.strerror}") from None
    try:
        return parse_logits(text)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def format_logits(data: LogitsData) -> str:
    out = [f"scod-logits v1 L={data.num_classes} E={data.embed_dim}"]
    for i in range(len(data)):
        lab = "-" if data.labels[i] < 0 else str(int(data.labels[i]))
        s = "-" if np.isnan(data.ood[i]) else repr(float(data.ood[i]))
        row = [str(data.origin[i]), lab]
        row += [repr(float(v)) for v in data.logits[i]]
        row.append(s)
        row += [repr(float(v)) for v in data.embedding[i]]
        out.append(",".join(row))
    return "\n".join(out) + "\n"


def write_logits(path: str | Path, data: LogitsData) -> None:
    Path(path).write_text(format_logits(data))


def make_logits_data(parts: list[tuple[str, np.ndarray, np.ndarray, np.ndarray | None, np.ndarray]]) -> LogitsData:
    """Assemble from (origin, labels, logits, ood-or-None, embedding) blocks."""
    origin, labels, logits, ood, emb = [], [], [], [], []
    for o, y, z, s, e in parts:
        n = len(z)
        origin.append(np.full(n, o))
        labels.append(np.asarray(y, dtype=int))
        logits.append(np.asarray(z, dtype=float))
        ood.append(np.full(n, np.nan) if s is None else np.asarray(s, dtype=float))
        emb.append(np.asarray(e, dtype=float).reshape(n, -1))
    L = logits[0].shape[1]
    E = emb[0].shape[1]
    return LogitsData(
        L,
        E,
        np.concatenate(origin),
        np.concatenate(labels),
        np.concatenate(logits),
        np.concatenate(ood),
        np.concatenate(emb),
    )
