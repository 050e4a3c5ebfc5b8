"""Append-only grade ledger plus score export.

Two files per run: an identified ledger (restricted access, carries sid) and
an anonymized twin. Workers never write directly; completed entries funnel
through a single writer. Corrections are new entries, never edits: the
original's late penalty and extra credit are copied forward verbatim.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
from datetime import datetime
from pathlib import Path
from typing import Iterable, Literal, Mapping, Optional

from pydantic import BaseModel, ConfigDict, Field
from pydantic import ValidationError as PydanticValidationError

from .config import Config
from .errors import CorruptRecordError, MissingOriginalError, RangeError

logger = logging.getLogger(__name__)


class GradeLedgerEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    anon_id: str
    sid: Optional[str] = None  # only in the identified, access-controlled file
    assignment_id: str
    pass_kind: Literal["original", "correction"] = "original"
    problem_raw_points: dict[str, float]
    extra_credit: float = Field(ge=0.0)
    late_fraction: float = Field(ge=0.0, le=1.0)
    final_score: float
    graded_at: datetime
    audit_ref: str


def compute_final(
    raws: Iterable[float], extra_credit: float, late_fraction: float
) -> float:
    """final = sum(raws) * (1 - late_fraction) + extra_credit, clamped at 0."""
    raws = list(raws)
    if any(r < 0 for r in raws):
        raise RangeError("raw points must be non-negative")
    if extra_credit < 0:
        raise RangeError("extra_credit must be non-negative")
    if not 0.0 <= late_fraction <= 1.0:
        raise RangeError("late_fraction must be within [0, 1]")
    return max(0.0, sum(raws) * (1.0 - late_fraction) + extra_credit)


def make_entry(
    *,
    anon_id: str,
    sid: Optional[str],
    assignment_id: str,
    problem_raw_points: Mapping[str, float],
    extra_credit: float,
    late_fraction: float,
    graded_at: datetime,
    audit_ref: str,
    pass_kind: Literal["original", "correction"] = "original",
) -> GradeLedgerEntry:
    return GradeLedgerEntry(
        anon_id=anon_id,
        sid=sid,
        assignment_id=assignment_id,
        pass_kind=pass_kind,
        problem_raw_points=dict(sorted(problem_raw_points.items())),
        extra_credit=extra_credit,
        late_fraction=late_fraction,
        final_score=compute_final(problem_raw_points.values(), extra_credit, late_fraction),
        graded_at=graded_at,
        audit_ref=audit_ref,
    )


def apply_regrade(
    original: Optional[GradeLedgerEntry],
    new_raws: Mapping[str, float],
    config: Config,
    *,
    anon_id: str,
    graded_at: datetime,
    audit_ref: str,
) -> GradeLedgerEntry:
    """Blend corrected raw points into a new correction entry.

    Per problem: blended = original + fraction * max(0, corrected - original),
    so a lower corrected score never reduces credit and fraction 1 recovers
    full regrading. Late fraction and extra credit are copied unchanged.
    """
    if original is None:
        raise MissingOriginalError("no original ledger entry for this student")
    if original.pass_kind != "original":
        raise MissingOriginalError("corrections may only be applied to an original entry")
    fraction = config.correction_credit_fraction
    blended: dict[str, float] = {}
    for pid, orig_points in original.problem_raw_points.items():
        corrected = new_raws.get(pid, orig_points)
        blended[pid] = orig_points + fraction * max(0.0, corrected - orig_points)
    return make_entry(
        anon_id=anon_id,
        sid=original.sid,
        assignment_id=original.assignment_id,
        pass_kind="correction",
        problem_raw_points=blended,
        extra_credit=original.extra_credit,
        late_fraction=original.late_fraction,
        graded_at=graded_at,
        audit_ref=audit_ref,
    )


def _entry_line(entry: GradeLedgerEntry) -> str:
    return json.dumps(entry.model_dump(mode="json"), sort_keys=True, ensure_ascii=False)


class LedgerWriter:
    """Single-writer funnel appending to the identified and anonymized files."""

    def __init__(self, identified_path: str | Path, anonymized_path: str | Path):
        self.identified_path = Path(identified_path)
        self.anonymized_path = Path(anonymized_path)
        self._lock = threading.Lock()
        for path in (self.identified_path, self.anonymized_path):
            path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, entry: GradeLedgerEntry) -> None:
        anon_entry = entry.model_copy(update={"sid": None})
        with self._lock:
            with self.identified_path.open("a", encoding="utf-8") as fh:
                fh.write(_entry_line(entry) + "\n")
            with self.anonymized_path.open("a", encoding="utf-8") as fh:
                fh.write(_entry_line(anon_entry) + "\n")


def persist(entries: Iterable[GradeLedgerEntry], path: str | Path) -> None:
    """Append entries to a single ledger file (identified form)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(_entry_line(entry) + "\n")


def load(path: str | Path) -> tuple[list[GradeLedgerEntry], list[CorruptRecordError]]:
    """Read a ledger file back, keeping the latest entry per
    (sid-or-anon_id, assignment_id, pass_kind). Corrupt lines are reported,
    never silently dropped and never fatal."""
    path = Path(path)
    latest: dict[tuple[str, str, str], GradeLedgerEntry] = {}
    problems: list[CorruptRecordError] = []
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = GradeLedgerEntry.model_validate(json.loads(line))
        except (ValueError, PydanticValidationError) as exc:
            err = CorruptRecordError(line_number, str(exc).splitlines()[0])
            problems.append(err)
            logger.warning("ledger %s: %s", path, err)
            continue
        key = (entry.sid or entry.anon_id, entry.assignment_id, entry.pass_kind)
        latest[key] = entry
    return list(latest.values()), problems


def effective_entries(entries: Iterable[GradeLedgerEntry]) -> list[GradeLedgerEntry]:
    """One entry per (student, assignment); a correction supersedes its original."""
    chosen: dict[tuple[str, str], GradeLedgerEntry] = {}
    for entry in entries:
        key = (entry.sid or entry.anon_id, entry.assignment_id)
        current = chosen.get(key)
        if current is None or (entry.pass_kind == "correction" and current.pass_kind == "original"):
            chosen[key] = entry
    return sorted(chosen.values(), key=lambda e: (e.sid or e.anon_id, e.assignment_id))


def export_scores(entries: Iterable[GradeLedgerEntry], path: str | Path) -> None:
    """Write the upload CSV: one row per student, correction scores winning.

    The export is instructor-side and sits outside the LLM boundary, so it
    carries sid even for anonymized runs.
    """
    rows = effective_entries(entries)
    problem_ids = sorted({pid for e in rows for pid in e.problem_raw_points})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sid", "assignment_id", "final_score", *problem_ids])
        for entry in rows:
            writer.writerow(
                [
                    entry.sid or entry.anon_id,
                    entry.assignment_id,
                    f"{entry.final_score:g}",
                    *(
                        f"{entry.problem_raw_points[pid]:g}"
                        if pid in entry.problem_raw_points
                        else ""
                        for pid in problem_ids
                    ),
                ]
            )
