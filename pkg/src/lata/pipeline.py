"""Stage orchestration: ingest, segment, grade, report.

Each stage reads the previous stage's per-submission JSON files and writes its
own, so a full run is literally the composition of the four stage functions
and any stage can be rerun or inspected in isolation. All artifacts embed only
run-relative paths and fixture-derived values; the only wall-clock values are
the designated graded_at and timing fields.
"""

from __future__ import annotations

import json
import logging
import shutil
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional

from pydantic import BaseModel, Field, model_validator

from .config import Config
from .errors import (
    CompilerMissingError,
    CompileTimeoutError,
    IdentityLeakError,
    LataError,
    MockMissError,
    SchemaCoercionError,
    TransportError,
)
from .grade import AssignmentPackage, GradeAudit, ProblemGrade, grade_problem
from .ingest import IngestResult, LlmView, StudentSubmission, llm_view, load_export
from .ledger import (
    GradeLedgerEntry,
    LedgerWriter,
    apply_regrade,
    effective_entries,
    export_scores,
    load,
    make_entry,
)
from .llm import LlmEndpoint
from .report import (
    CompileOutcome,
    FeedbackDocument,
    compile_pdf,
    fallback_feedback_text,
    render_feedback,
    self_heal_compile,
)
from .segment import (
    MANUAL_ENDPOINT_UNAVAILABLE,
    SegmentationResult,
    segment,
)
from .texparse import SanitizeReport, extract_body, extract_macros, sanitize_for_llm, tokenize

logger = logging.getLogger(__name__)

STAGE_NAMES = ("ingest", "segment", "grade", "report")

FLAG_NO_ORIGINAL = "no original ledger entry; resubmission skipped"


class StageDependencyError(LataError):
    """A stage was invoked before the stage it depends on."""


class SummaryCounts(BaseModel):
    submissions: int = 0
    graded: int = 0
    flagged_manual: int = 0
    llm_fallback_segmentations: int = 0
    repairs_attempted: int = 0
    repairs_succeeded: int = 0
    leak_events: int = 0
    suspicious_sanitize: int = 0


class StatusRow(BaseModel):
    internal_id: str
    sid: str
    anon_id: str
    status: str  # "graded" | "flagged_manual"
    reasons: list[str] = Field(default_factory=list)


class RunSummary(BaseModel):
    counts: SummaryCounts
    timings: dict[str, float] = Field(default_factory=dict)
    statuses: list[StatusRow] = Field(default_factory=list)

    @model_validator(mode="after")
    def _reconciles(self) -> "RunSummary":
        if self.counts.graded + self.counts.flagged_manual != self.counts.submissions:
            raise ValueError("summary counts do not reconcile")
        return self


def render_summary_text(summary: RunSummary) -> str:
    c = summary.counts
    lines = [
        "run summary",
        f"  submissions:               {c.submissions}",
        f"  graded:                    {c.graded}",
        f"  flagged for manual review: {c.flagged_manual}",
        f"  llm fallback segmentations:{c.llm_fallback_segmentations}",
        f"  repairs attempted:         {c.repairs_attempted}",
        f"  repairs succeeded:         {c.repairs_succeeded}",
        f"  hint leak events:          {c.leak_events}",
        f"  suspicious sanitize:       {c.suspicious_sanitize}",
        "",
        "submissions:",
    ]
    for row in summary.statuses:
        reasons = f" ({'; '.join(row.reasons)})" if row.reasons else ""
        lines.append(f"  {row.internal_id}  sid={row.sid}  {row.status}{reasons}")
    return "\n".join(lines) + "\n"


# --- file plumbing ----------------------------------------------------------


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(data, sort_keys=True, ensure_ascii=False, indent=2) + "\n",
        encoding="utf-8",
    )


def _stage_dir(out_dir: Path, stage: str) -> Path:
    return out_dir / "stages" / stage


def _read_stage(out_dir: Path, stage: str, required_by: str) -> dict[str, dict]:
    stage_dir = _stage_dir(out_dir, stage)
    if not stage_dir.is_dir():
        raise StageDependencyError(
            f"stage '{required_by}' needs '{stage}' artifacts; run the {stage} stage first "
            f"(missing {stage_dir})"
        )
    records = {}
    for path in sorted(stage_dir.glob("*.json")):
        records[path.stem] = json.loads(path.read_text(encoding="utf-8"))
    return records


def _parallel(worker_count: int, fn: Callable[[Any], None], items: list) -> None:
    if worker_count <= 1 or len(items) <= 1:
        for item in items:
            fn(item)
        return
    with ThreadPoolExecutor(max_workers=worker_count) as pool:
        for future in [pool.submit(fn, item) for item in items]:
            future.result()


# --- stage 1: ingest --------------------------------------------------------


def stage_ingest(config: Config, export_dir: Path, out_dir: Path) -> IngestResult:
    result = load_export(export_dir, config)
    for sub in result.submissions:
        reason = result.ungradeable.get(sub.internal_id)
        _write_json(
            _stage_dir(out_dir, "ingest") / f"{sub.internal_id}.json",
            {
                "submission": sub.model_dump(mode="json"),
                "status": "ungradeable" if reason else "ok",
                "reason": reason,
            },
        )
    _write_json(
        out_dir / "ingest_report.json",
        {
            "submissions": len(result.submissions),
            "ungradeable": result.ungradeable,
            "warnings": result.warnings,
        },
    )
    return result


# --- stage 2: segment ---------------------------------------------------------


def _segment_one(
    config: Config,
    package: AssignmentPackage,
    endpoint: Optional[LlmEndpoint],
    out_dir: Path,
    record: dict,
    restrict_sids: Optional[set[str]],
) -> None:
    sub = StudentSubmission.model_validate(record["submission"])
    flags: list[str] = []
    data: dict[str, Any] = {
        "anon_id": sub.anon_id,
        "view": None,
        "sanitize_report": None,
        "segmentation": None,
        "parse_warnings": [],
        "flags": flags,
        "endpoint_down": False,
    }
    if record["status"] == "ungradeable":
        flags.append(record["reason"])
    elif restrict_sids is not None and sub.sid not in restrict_sids:
        flags.append(FLAG_NO_ORIGINAL)
    else:
        stream = tokenize(sub.tex_source)
        macros, macro_warnings = extract_macros(stream)
        body, body_warnings = extract_body(stream)
        data["parse_warnings"] = macro_warnings + body_warnings
        macro_block = "\n".join(m.raw_text for m in macros)
        san_macro, san_body, san_report = sanitize_for_llm(macro_block, body.text, config)
        data["sanitize_report"] = san_report.model_dump(mode="json")
        try:
            view = llm_view(sub, san_macro, san_body, config)
        except IdentityLeakError as exc:
            flags.append(f"identity leak: {len(exc.matched)} fragment(s) in LLM-facing text")
        else:
            data["view"] = view.model_dump(mode="json")
            seg_result = segment(body.text, package.segmentation_spec, endpoint, config)
            data["segmentation"] = seg_result.model_dump(mode="json")
            if seg_result.manual_reason:
                flags.append(seg_result.manual_reason)
                data["endpoint_down"] = seg_result.manual_reason == MANUAL_ENDPOINT_UNAVAILABLE
            elif seg_result.missing and package.segmentation_spec.require_all:
                flags.append(
                    "needs manual segmentation: unrecovered problems "
                    + ", ".join(seg_result.missing)
                )
    _write_json(_stage_dir(out_dir, "segment") / f"{sub.internal_id}.json", data)


def stage_segment(
    config: Config,
    package: AssignmentPackage,
    out_dir: Path,
    endpoint: Optional[LlmEndpoint],
    *,
    restrict_sids: Optional[set[str]] = None,
) -> None:
    records = _read_stage(out_dir, "ingest", required_by="segment")
    _parallel(
        config.worker_count,
        lambda rec: _segment_one(config, package, endpoint, out_dir, rec, restrict_sids),
        [records[k] for k in sorted(records)],
    )


# --- stage 3: grade -----------------------------------------------------------


def _grade_one(
    config: Config,
    package: AssignmentPackage,
    endpoint: Optional[LlmEndpoint],
    out_dir: Path,
    internal_id: str,
    seg_record: dict,
) -> None:
    flags = list(seg_record["flags"])
    grades: list[dict] = []
    audits: list[dict] = []
    endpoint_down = False
    if not flags and seg_record["view"] is not None:
        view = LlmView.model_validate(seg_record["view"])
        seg_result = SegmentationResult.model_validate(seg_record["segmentation"])
        san_report = SanitizeReport.model_validate(seg_record["sanitize_report"])
        segments = {s.problem_id: s for s in seg_result.segments}
        subject_id = view.sid if view.sid is not None else view.anon_id
        for problem in package.problems:
            if endpoint is None:
                flags.append(f"needs human grading: {problem.problem_id} (no endpoint)")
                continue
            try:
                grade, audit = grade_problem(
                    segments.get(problem.problem_id),
                    view.macro_block,
                    problem,
                    endpoint,
                    config,
                    subject_id=subject_id,
                    sanitize_report=san_report,
                )
            except SchemaCoercionError as exc:
                flags.append(
                    f"needs human grading: {problem.problem_id} (schema coercion failed)"
                )
                audits.append(
                    GradeAudit(
                        problem_id=problem.problem_id,
                        attempt_log=exc.attempt_log,
                        model=config.grader_model,
                    ).model_dump(mode="json")
                )
                continue
            except (TransportError, MockMissError) as exc:
                logger.warning("grading endpoint unavailable: %s", exc)
                flags.append(
                    f"needs human grading: {problem.problem_id} (endpoint unavailable)"
                )
                endpoint_down = True
                continue
            grades.append(grade.model_dump(mode="json", by_alias=True))
            audits.append(audit.model_dump(mode="json"))
    _write_json(
        _stage_dir(out_dir, "grade") / f"{internal_id}.json",
        {"flags": flags, "grades": grades, "audits": audits, "endpoint_down": endpoint_down},
    )


def stage_grade(
    config: Config,
    package: AssignmentPackage,
    out_dir: Path,
    endpoint: Optional[LlmEndpoint],
) -> None:
    records = _read_stage(out_dir, "segment", required_by="grade")
    _parallel(
        config.worker_count,
        lambda item: _grade_one(config, package, endpoint, out_dir, item[0], item[1]),
        sorted(records.items()),
    )


# --- stage 4: report ------------------------------------------------------------


def _now_utc() -> datetime:
    return datetime.now(timezone.utc)


class _ReportItem:
    """Work unit for one submission in the report stage."""

    def __init__(self, internal_id: str, ingest_rec: dict, seg_rec: dict, grade_rec: dict):
        self.internal_id = internal_id
        self.sub = StudentSubmission.model_validate(ingest_rec["submission"])
        self.seg_rec = seg_rec
        self.grade_rec = grade_rec
        self.flags: list[str] = list(grade_rec["flags"])
        self.grades = [ProblemGrade.model_validate(g) for g in grade_rec["grades"]]
        self.audits = [GradeAudit.model_validate(a) for a in grade_rec["audits"]]
        self.entry: Optional[GradeLedgerEntry] = None
        self.notes: list[str] = []
        self.skip_report = False  # unknown resubmissions get no new artifact

    @property
    def flagged_problems(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for flag in self.flags:
            if flag.startswith("needs human grading: "):
                rest = flag[len("needs human grading: ") :]
                pid = rest.split(" ", 1)[0]
                out[pid] = rest
        return out


def _recomputed_raws(item: _ReportItem, package: AssignmentPackage) -> dict[str, float]:
    """Raw points per problem, recomputed from verdicts so hand-edited grade
    files flow through coherently."""
    raws: dict[str, float] = {}
    for grade in item.grades:
        problem = package.problem(grade.problem_id)
        points = {i.item_id: i.points for i in problem.rubric.items}
        raws[grade.problem_id] = sum(points[v.item_id] for v in grade.verdicts if v.passed)
    return raws


def _write_audit_bundle(out_dir: Path, item: _ReportItem, feedback: dict) -> str:
    audit_dir = out_dir / "audit" / item.sub.sid
    audit_dir.mkdir(parents=True, exist_ok=True)
    problems = {}
    grades_by_pid = {g.problem_id: g for g in item.grades}
    for audit in item.audits:
        grade = grades_by_pid.get(audit.problem_id)
        problems[audit.problem_id] = {
            "prompt_digest": audit.prompt_digest,
            "attempt_log": audit.attempt_log,
            "think_trace": audit.think_trace,
            "model": audit.model,
            "leak_events": [e.model_dump(mode="json") for e in audit.leak_events],
            "verdicts": (
                [v.model_dump(mode="json", by_alias=True) for v in grade.verdicts]
                if grade
                else []
            ),
            "raw_points": grade.raw_points if grade else None,
            "segment_method": grade.segment_method if grade else None,
        }
    bundle = {
        "anon_id": item.sub.anon_id,
        "internal_id": item.internal_id,
        "flags": item.flags,
        "parse_warnings": item.seg_rec.get("parse_warnings", []),
        "sanitize_report": item.seg_rec.get("sanitize_report"),
        "segmentation": item.seg_rec.get("segmentation"),
        "problems": problems,
        "ledger": item.entry.model_dump(mode="json") if item.entry else None,
        "feedback": feedback,
    }
    _write_json(audit_dir / "audit.json", bundle)
    return f"audit/{item.sub.sid}"


def _emit_artifact(
    config: Config,
    package: AssignmentPackage,
    endpoint: Optional[LlmEndpoint],
    out_dir: Path,
    item: _ReportItem,
) -> dict:
    """Produce exactly one student artifact (PDF or plain-text fallback)."""
    reports_dir = out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    pdf_target = reports_dir / f"{item.sub.sid}.pdf"
    txt_target = reports_dir / f"{item.sub.sid}.txt"
    feedback_meta: dict[str, Any] = {"artifact": None, "repair_attempts": [], "compile_attempts": 0}

    def _write_txt(note: str) -> None:
        txt_target.write_text(
            fallback_feedback_text(
                item.sub.anon_id,
                item.grades,
                item.entry,
                package,
                item.flagged_problems,
                note=note,
            ),
            encoding="utf-8",
        )
        pdf_target.unlink(missing_ok=True)
        feedback_meta["artifact"] = "txt"

    if not item.grades and item.flags:
        # flagged before grading: a notice, not a scored report
        _write_txt("This submission is under human review; no automated grades were produced.")
        return feedback_meta

    doc = render_feedback(
        item.sub.anon_id,
        item.sub.sid,
        item.grades,
        item.entry,
        package,
        item.flagged_problems,
    )
    audit_dir = out_dir / "audit" / item.sub.sid
    audit_dir.mkdir(parents=True, exist_ok=True)
    (audit_dir / "feedback.tex").write_text(doc.tex_source, encoding="utf-8")

    workdir = Path(tempfile.mkdtemp(prefix=f"lata-{item.sub.anon_id}-"))
    try:
        try:
            outcome = compile_pdf(doc, workdir, config)
        except CompilerMissingError:
            _write_txt("PDF generation pending: no LaTeX compiler on this host.")
            item.notes.append("pdf pending: compiler unavailable")
            return feedback_meta
        except CompileTimeoutError:
            outcome = CompileOutcome("failure", None, "compile timed out", 1)

        repair_attempts = []
        if outcome.status == "failure" and endpoint is not None and config.repair_max_attempts > 0:
            outcome, repair_attempts = self_heal_compile(doc, endpoint, config, workdir, outcome)
            feedback_meta["repair_attempts"] = [
                {"attempt": a.attempt, "accepted": a.accepted, "reason": a.reason}
                for a in repair_attempts
            ]
            item.notes.append(
                "feedback repaired after compile failure"
                if outcome.status == "success"
                else "feedback compile failed; plain-text fallback emitted"
            )
        feedback_meta["compile_attempts"] = outcome.attempts

        if outcome.status == "success":
            shutil.copyfile(outcome.pdf_path, pdf_target)
            txt_target.unlink(missing_ok=True)
            feedback_meta["artifact"] = "pdf"
        else:
            _write_txt("PDF generation failed; this plain-text copy carries all feedback.")
    finally:
        shutil.rmtree(workdir, ignore_errors=True)
    return feedback_meta


def stage_report(
    config: Config,
    package: AssignmentPackage,
    out_dir: Path,
    endpoint: Optional[LlmEndpoint],
    *,
    pass_kind: str = "original",
    originals: Optional[dict[str, GradeLedgerEntry]] = None,
    timings: Optional[dict[str, float]] = None,
    clock: Callable[[], datetime] = _now_utc,
) -> RunSummary:
    ingest_recs = _read_stage(out_dir, "ingest", required_by="report")
    seg_recs = _read_stage(out_dir, "segment", required_by="report")
    grade_recs = _read_stage(out_dir, "grade", required_by="report")

    items = [
        _ReportItem(internal_id, ingest_recs[internal_id], seg_recs[internal_id], grade_recs[internal_id])
        for internal_id in sorted(ingest_recs)
    ]

    # ledger entries for cleanly graded submissions
    graded_at = clock()
    for item in items:
        if item.flags:
            continue
        raws = _recomputed_raws(item, package)
        if pass_kind == "correction":
            original = (originals or {}).get(item.sub.sid)
            if original is None:
                item.flags.append(FLAG_NO_ORIGINAL)
                item.skip_report = True
                continue
            item.entry = apply_regrade(
                original,
                raws,
                config,
                anon_id=item.sub.anon_id,
                graded_at=graded_at,
                audit_ref=f"audit/{item.sub.sid}",
            )
        else:
            late = config.late_policy.penalty_fraction(
                item.sub.metadata.submitted_at, item.sub.metadata.due_at
            )
            item.entry = make_entry(
                anon_id=item.sub.anon_id,
                sid=item.sub.sid,
                assignment_id=package.assignment_id,
                problem_raw_points=raws,
                extra_credit=item.sub.metadata.extra_credit,
                late_fraction=late,
                graded_at=graded_at,
                audit_ref=f"audit/{item.sub.sid}",
            )

    def _report_one(item: _ReportItem) -> None:
        if item.skip_report:
            _write_audit_bundle(out_dir, item, {"artifact": None, "skipped": True})
            return
        feedback_meta = _emit_artifact(config, package, endpoint, out_dir, item)
        _write_audit_bundle(out_dir, item, feedback_meta)

    _parallel(config.worker_count, _report_one, items)

    # single-writer ledger appends, deterministic order
    writer = LedgerWriter(out_dir / "ledger.ndjson", out_dir / "ledger_anon.ndjson")
    entries = []
    for item in items:
        if item.entry is not None:
            writer.append(item.entry)
            entries.append(item.entry)

    scores = entries if pass_kind == "original" else list((originals or {}).values()) + entries
    export_scores(scores, out_dir / "scores.csv")

    counts = SummaryCounts(submissions=len(items))
    statuses = []
    for item in items:
        seg_data = item.seg_rec.get("segmentation") or {}
        san_data = item.seg_rec.get("sanitize_report") or {}
        if seg_data.get("fallback_used"):
            counts.llm_fallback_segmentations += 1
        if san_data.get("suspicious"):
            counts.suspicious_sanitize += 1
        counts.leak_events += sum(len(a.leak_events) for a in item.audits)
        repair_attempts = []
        for rec in (item.grade_rec, ):
            pass
        status = "flagged_manual" if item.flags else "graded"
        if item.flags:
            counts.flagged_manual += 1
        else:
            counts.graded += 1
        statuses.append(
            StatusRow(
                internal_id=item.internal_id,
                sid=item.sub.sid,
                anon_id=item.sub.anon_id,
                status=status,
                reasons=item.flags + item.notes,
            )
        )

    # repair counters come from the audit bundles written above
    for item in items:
        bundle_path = out_dir / "audit" / item.sub.sid / "audit.json"
        if bundle_path.exists():
            feedback = json.loads(bundle_path.read_text(encoding="utf-8")).get("feedback", {})
            attempts = feedback.get("repair_attempts") or []
            if attempts:
                counts.repairs_attempted += 1
                if any(a.get("accepted") for a in attempts):
                    counts.repairs_succeeded += 1

    summary = RunSummary(counts=counts, timings=timings or {}, statuses=statuses)
    _write_json(out_dir / "summary.json", summary.model_dump(mode="json"))
    (out_dir / "summary.txt").write_text(render_summary_text(summary), encoding="utf-8")
    return summary


def _endpoint_down(out_dir: Path) -> bool:
    for stage in ("segment", "grade"):
        stage_dir = _stage_dir(out_dir, stage)
        if not stage_dir.is_dir():
            continue
        for path in stage_dir.glob("*.json"):
            if json.loads(path.read_text(encoding="utf-8")).get("endpoint_down"):
                return True
    return False


def run_pipeline(
    config: Config,
    package: AssignmentPackage,
    export_dir: Path,
    out_dir: Path,
    endpoint: Optional[LlmEndpoint],
    *,
    clock: Callable[[], datetime] = _now_utc,
) -> tuple[RunSummary, int]:
    """Full original-pass run; returns (summary, exit_code)."""
    timings: dict[str, float] = {}
    t0 = time.monotonic()
    stage_ingest(config, export_dir, out_dir)
    timings["ingest"] = time.monotonic() - t0

    t0 = time.monotonic()
    stage_segment(config, package, out_dir, endpoint)
    timings["segment"] = time.monotonic() - t0

    t0 = time.monotonic()
    stage_grade(config, package, out_dir, endpoint)
    timings["grade"] = time.monotonic() - t0

    t0 = time.monotonic()
    summary = stage_report(config, package, out_dir, endpoint, timings=timings, clock=clock)
    summary.timings["report"] = time.monotonic() - t0

    exit_code = 2 if _endpoint_down(out_dir) else 0
    return summary, exit_code


def run_regrade(
    config: Config,
    package: AssignmentPackage,
    corrections_export: Path,
    out_root: Path,
    original_ledger: Path,
    endpoint: Optional[LlmEndpoint],
    *,
    clock: Callable[[], datetime] = _now_utc,
) -> tuple[RunSummary, int]:
    """Corrections pass: regrade resubmissions, preserving original late
    penalties and extra credit; artifacts land under ``out_root/corrections``."""
    entries, problems = load(original_ledger)
    for problem in problems:
        logger.warning("original ledger: %s", problem)
    originals = {
        e.sid: e for e in entries if e.pass_kind == "original" and e.sid is not None
    }
    out_dir = out_root / "corrections"

    timings: dict[str, float] = {}
    t0 = time.monotonic()
    stage_ingest(config, corrections_export, out_dir)
    timings["ingest"] = time.monotonic() - t0

    t0 = time.monotonic()
    stage_segment(config, package, out_dir, endpoint, restrict_sids=set(originals))
    timings["segment"] = time.monotonic() - t0

    t0 = time.monotonic()
    stage_grade(config, package, out_dir, endpoint)
    timings["grade"] = time.monotonic() - t0

    t0 = time.monotonic()
    summary = stage_report(
        config,
        package,
        out_dir,
        endpoint,
        pass_kind="correction",
        originals=originals,
        timings=timings,
        clock=clock,
    )
    summary.timings["report"] = time.monotonic() - t0

    exit_code = 2 if _endpoint_down(out_dir) else 0
    return summary, exit_code
