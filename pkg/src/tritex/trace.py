"""Loss traces written by optimization runs.

One CSV row per step: ``step,loss,exact,triplets``. ``loss`` is the value
the optimizer saw, ``exact`` the independently enumerated n-channel loss
when it was evaluated that step (blank otherwise), and ``triplets`` the
sampled views as ``c0-c1-c2`` terms joined by ``+`` (blank when none were
sampled).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .loss import TripletIndex

__all__ = ["TraceRecord", "read_trace", "write_trace"]


@dataclass(frozen=True)
class TraceRecord:
    step: int
    loss: float
    exact: float | None = None
    triplets: tuple[TripletIndex, ...] = ()


def _format_triplets(triplets: tuple[TripletIndex, ...]) -> str:
    return "+".join(f"{t.c0}-{t.c1}-{t.c2}" for t in triplets)


def _parse_triplets(text: str) -> tuple[TripletIndex, ...]:
    if not text:
        return ()
    out = []
    for term in text.split("+"):
        c0, c1, c2 = (int(v) for v in term.split("-"))
        out.append(TripletIndex(c0, c1, c2))
    return tuple(out)


def write_trace(records: list[TraceRecord], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["step", "loss", "exact", "triplets"])
        for rec in records:
            writer.writerow(
                [
                    rec.step,
                    repr(rec.loss),
                    "" if rec.exact is None else repr(rec.exact),
                    _format_triplets(rec.triplets),
                ]
            )


def read_trace(path: str | Path) -> list[TraceRecord]:
    with open(path, newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader)
        if header[:2] != ["step", "loss"]:
            raise ValueError(f"{path} is not a loss trace (header {header})")
        out = []
        for row in reader:
            out.append(
                TraceRecord(
                    step=int(row[0]),
                    loss=float(row[1]),
                    exact=float(row[2]) if row[2] else None,
                    triplets=_parse_triplets(row[3]) if len(row) > 3 else (),
                )
            )
    return out
