"""Per-student feedback rendering and PDF compilation.

The rendered document carries the student-hint channel only: no audit
reasoning, no chain-of-thought, no reference-solution text. Hint and score
content lives in named template blocks so the self-heal path can prove a
model-repaired source did not alter what the student sees.
"""

from __future__ import annotations

import logging
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

from .config import Config
from .errors import CompilerMissingError, CompileTimeoutError, LlmError
from .grade import AssignmentPackage, ProblemGrade
from .ledger import GradeLedgerEntry
from .llm import ChatRequest, LlmEndpoint, SchemaField, complete_structured, obj, string

logger = logging.getLogger(__name__)

_LATEX_ESCAPES = {
    "\\": r"\textbackslash{}",
    "#": r"\#",
    "$": r"\$",
    "%": r"\%",
    "&": r"\&",
    "_": r"\_",
    "{": r"\{",
    "}": r"\}",
    "~": r"\textasciitilde{}",
    "^": r"\textasciicircum{}",
}


def escape_latex(text: str) -> str:
    """Render LaTeX-active characters inert in one pass."""
    return "".join(_LATEX_ESCAPES.get(ch, ch) for ch in text)


_BLOCK_RE = re.compile(
    r"^% <<block:(?P<name>[^>]+)>>\n(?P<body>.*?)^% <<endblock>>$", re.MULTILINE | re.DOTALL
)


def extract_blocks(tex_source: str) -> dict[str, str]:
    """Named template blocks and their text, used by the repair-invariance check."""
    return {m.group("name"): m.group("body") for m in _BLOCK_RE.finditer(tex_source)}


def _block(name: str, body: str) -> str:
    return f"% <<block:{name}>>\n{body}\n% <<endblock>>"


@dataclass(frozen=True)
class FeedbackDocument:
    tex_source: str
    anon_id: str
    sid: str
    blocks: dict[str, str] = field(default_factory=dict)


@dataclass
class CompileOutcome:
    status: Literal["success", "failure"]
    pdf_path: Optional[Path]
    log_excerpt: str
    attempts: int


@dataclass
class RepairAttempt:
    attempt: int
    accepted: bool
    reason: str


def render_feedback(
    anon_id: str,
    sid: str,
    grades: list[ProblemGrade],
    entry: Optional[GradeLedgerEntry],
    package: AssignmentPackage,
    flagged_problems: Optional[dict[str, str]] = None,
) -> FeedbackDocument:
    """Deterministic feedback document from a fixed template.

    ``flagged_problems`` maps problem ids awaiting human grading to a reason;
    they render as under-review blocks. ``entry`` is None when the whole
    submission is pending review, in which case totals render as pending.
    """
    flagged_problems = flagged_problems or {}
    graded = {g.problem_id: g for g in grades}
    lines: list[str] = [
        r"\documentclass{article}",
        r"\setlength{\parindent}{0pt}",
        r"\begin{document}",
        _block(
            "header",
            f"\\section*{{Feedback: {escape_latex(package.assignment_id)} "
            f"(submission {escape_latex(anon_id)})}}",
        ),
    ]
    for problem in package.problems:
        pid = problem.problem_id
        lines.append(f"\\subsection*{{Problem {escape_latex(pid)}}}")
        if pid in flagged_problems:
            lines.append(_block(f"score:{pid}", "This problem is under human review."))
            continue
        grade = graded.get(pid)
        if grade is None:
            lines.append(_block(f"score:{pid}", "This problem is under human review."))
            continue
        lines.append(
            _block(
                f"score:{pid}",
                f"Score: {grade.raw_points:g} / {problem.rubric.total_points:g}",
            )
        )
        lines.append(r"\begin{itemize}")
        verdicts = {v.item_id: v for v in grade.verdicts}
        for item in problem.rubric.items:
            verdict = verdicts[item.item_id]
            mark = "[PASS]" if verdict.passed else "[MISS]"
            lines.append(
                f"\\item {mark} ({item.points:g} pts) {escape_latex(item.criterion)}"
            )
            lines.append(
                _block(f"hint:{pid}:{item.item_id}", escape_latex(verdict.student_hint))
            )
        lines.append(r"\end{itemize}")

    if entry is not None:
        total = sum(entry.problem_raw_points.values())
        totals = (
            f"Raw total: {total:g} / {package.total_points:g}. "
            f"Late penalty: {entry.late_fraction * 100:g}\\%. "
            f"Extra credit: {entry.extra_credit:g}. "
            f"Final score: {entry.final_score:g}."
        )
    else:
        totals = "Final score pending human review."
    lines.append(_block("totals", r"\subsection*{Totals}" + "\n" + totals))
    lines.append(r"\end{document}")
    tex_source = "\n".join(lines) + "\n"
    return FeedbackDocument(
        tex_source=tex_source, anon_id=anon_id, sid=sid, blocks=extract_blocks(tex_source)
    )


def _log_excerpt(log_text: str, context: int = 3) -> str:
    lines = log_text.splitlines()
    for i, line in enumerate(lines):
        if line.startswith("! "):
            lo = max(0, i - context)
            return "\n".join(lines[lo : i + context + 1])
    return "\n".join(lines[-(2 * context + 1) :])


def compile_pdf(doc: FeedbackDocument, workdir: str | Path, config: Config) -> CompileOutcome:
    """Run the configured compiler in nonstop mode inside ``workdir``."""
    compiler = config.report.compiler
    if shutil.which(compiler) is None:
        raise CompilerMissingError(f"compiler {compiler!r} not found on PATH")
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    tex_path = workdir / "feedback.tex"
    tex_path.write_text(doc.tex_source, encoding="utf-8")
    try:
        proc = subprocess.run(
            [compiler, "-interaction=nonstopmode", "-halt-on-error", tex_path.name],
            cwd=workdir,
            capture_output=True,
            text=True,
            timeout=config.report.compile_timeout_seconds,
        )
    except subprocess.TimeoutExpired as exc:
        raise CompileTimeoutError(
            f"compile exceeded {config.report.compile_timeout_seconds:g}s"
        ) from exc
    log_path = tex_path.with_suffix(".log")
    log_text = (
        log_path.read_text(encoding="utf-8", errors="replace")
        if log_path.exists()
        else proc.stdout + proc.stderr
    )
    pdf_path = tex_path.with_suffix(".pdf")
    ok = proc.returncode == 0 and pdf_path.exists() and pdf_path.stat().st_size > 0
    return CompileOutcome(
        status="success" if ok else "failure",
        pdf_path=pdf_path if ok else None,
        log_excerpt="" if ok else _log_excerpt(log_text),
        attempts=1,
    )


_REPAIR_SYSTEM = """\
A LaTeX feedback document failed to compile. Return a corrected version of
the COMPLETE source that compiles cleanly.

Hard constraints:
- Fix only what blocks compilation (environments, braces, malformed commands).
- Never change any text inside the '% <<block:...>>' ... '% <<endblock>>'
  regions: hints and scores must read exactly as before.
- Keep the block marker comment lines themselves intact."""

_repair_schema = obj(SchemaField("fixed_source", string()))


def self_heal_compile(
    doc: FeedbackDocument,
    llm: LlmEndpoint,
    config: Config,
    workdir: str | Path,
    first_failure: CompileOutcome,
) -> tuple[CompileOutcome, list[RepairAttempt]]:
    """Bounded repair loop after a failed compile.

    A repaired source is accepted only if its hint/score blocks are textually
    identical to the original's and it actually compiles; anything else is
    rejected. The caller falls back to plain text when attempts run out.
    """
    attempts: list[RepairAttempt] = []
    outcome = first_failure
    log_excerpt = first_failure.log_excerpt
    source = doc.tex_source
    for attempt in range(1, config.repair_max_attempts + 1):
        request = ChatRequest(
            model=config.grader_model,
            system_text=_REPAIR_SYSTEM,
            user_text=(
                f"Compiler log excerpt:\n{log_excerpt}\n\nFull source:\n{source}"
            ),
            response_schema=_repair_schema,
        )
        try:
            coerced = complete_structured(llm, request, max_attempts=config.llm_max_retries)
        except LlmError as exc:
            attempts.append(RepairAttempt(attempt, False, f"endpoint error: {exc}"))
            break
        candidate = coerced.value["fixed_source"]
        if extract_blocks(candidate) != doc.blocks:
            attempts.append(
                RepairAttempt(attempt, False, "repair altered hint/score blocks; rejected")
            )
            continue
        repaired = FeedbackDocument(
            tex_source=candidate, anon_id=doc.anon_id, sid=doc.sid, blocks=doc.blocks
        )
        result = compile_pdf(repaired, workdir, config)
        if result.status == "success":
            attempts.append(RepairAttempt(attempt, True, "compiled with blocks intact"))
            result.attempts = attempt + 1
            return result, attempts
        attempts.append(RepairAttempt(attempt, False, "repaired source still fails to compile"))
        log_excerpt = result.log_excerpt
        source = candidate
    outcome.attempts = 1 + len(attempts)
    return outcome, attempts


def fallback_feedback_text(
    anon_id: str,
    grades: list[ProblemGrade],
    entry: Optional[GradeLedgerEntry],
    package: AssignmentPackage,
    flagged_problems: Optional[dict[str, str]] = None,
    note: str = "",
) -> str:
    """Plain-text feedback used when no PDF could be produced.

    Contains every hint the PDF would have carried, so a compile failure never
    costs a student their feedback.
    """
    flagged_problems = flagged_problems or {}
    graded = {g.problem_id: g for g in grades}
    lines = [f"Feedback: {package.assignment_id} (submission {anon_id})", ""]
    if note:
        lines += [note, ""]
    for problem in package.problems:
        pid = problem.problem_id
        lines.append(f"Problem {pid}")
        grade = graded.get(pid)
        if pid in flagged_problems or grade is None:
            lines += ["  This problem is under human review.", ""]
            continue
        lines.append(f"  Score: {grade.raw_points:g} / {problem.rubric.total_points:g}")
        verdicts = {v.item_id: v for v in grade.verdicts}
        for item in problem.rubric.items:
            verdict = verdicts[item.item_id]
            mark = "PASS" if verdict.passed else "MISS"
            lines.append(f"  [{mark}] ({item.points:g} pts) {item.criterion}")
            lines.append(f"         hint: {verdict.student_hint}")
        lines.append("")
    if entry is not None:
        total = sum(entry.problem_raw_points.values())
        lines.append(
            f"Raw total: {total:g} / {package.total_points:g}. "
            f"Late penalty: {entry.late_fraction * 100:g}%. "
            f"Extra credit: {entry.extra_credit:g}. "
            f"Final score: {entry.final_score:g}."
        )
    else:
        lines.append("Final score pending human review.")
    return "\n".join(lines) + "\n"
