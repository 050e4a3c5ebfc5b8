"""Load a submission export into typed submissions.

Identity (sid, name, email) is separated from LLM-facing content at the type
boundary: LlmView is the only shape the model-facing stages accept, and when
anonymization is on it carries nothing but the anonymized id and sanitized
text. A content-level scan backs the type boundary up, because students write
their names inside documents.
"""

from __future__ import annotations

import hashlib
import logging
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic import ValidationError as PydanticValidationError

from .config import Config
from .errors import (
    EmptyExportError,
    IdentityLeakError,
    MissingMetadataError,
    ParseError,
    ValidationError,
)

logger = logging.getLogger(__name__)

METADATA_FILENAME = "submission_metadata.yml"

UNGRADEABLE_NO_SOURCE = "ungradeable: no source"


def anonymize_id(sid: str, internal_id: str) -> str:
    """First 8 lowercase hex chars of SHA-256 over the concatenated UTF-8 bytes."""
    digest = hashlib.sha256(sid.encode("utf-8") + internal_id.encode("utf-8"))
    return digest.hexdigest()[:8]


class SubmissionMetadata(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    submitted_at: datetime
    due_at: datetime
    assignment_id: str
    submission_count: int = Field(default=1, ge=1)
    extra_credit: float = Field(default=0.0, ge=0.0)

    @field_validator("submitted_at", "due_at")
    @classmethod
    def _tz_aware(cls, value: datetime) -> datetime:
        if value.tzinfo is None:
            raise ValueError("timestamp must be timezone-aware")
        return value

    @property
    def lateness(self) -> timedelta:
        return max(timedelta(0), self.submitted_at - self.due_at)


class StudentSubmission(BaseModel):
    model_config = ConfigDict(frozen=True)

    internal_id: str
    sid: str
    name: str
    email: str
    tex_source: str
    metadata: SubmissionMetadata
    anon_id: str = Field(pattern=r"^[0-9a-f]{8}$")


class LlmView(BaseModel):
    """The only submission shape model-facing code accepts."""

    model_config = ConfigDict(frozen=True)

    anon_id: str
    macro_block: str
    body: str
    sid: Optional[str] = None  # populated only when anonymization is off


class IngestResult(BaseModel):
    submissions: list[StudentSubmission]
    ungradeable: dict[str, str] = Field(default_factory=dict)  # internal_id -> reason
    warnings: list[str] = Field(default_factory=list)


def _load_metadata(export_dir: Path) -> dict:
    meta_path = export_dir / METADATA_FILENAME
    if not meta_path.is_file():
        raise MissingMetadataError(f"{meta_path} not found")
    try:
        data = yaml.safe_load(meta_path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed YAML in {meta_path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ValidationError(f"{METADATA_FILENAME}: root must be a mapping")
    return data


def _pick_tex_file(student_dir: Path) -> tuple[Optional[Path], Optional[str]]:
    """Choose the submission source; largest file wins, name breaks ties."""
    candidates = sorted(
        (p for p in student_dir.iterdir() if p.is_file() and p.suffix == ".tex"),
        key=lambda p: (-p.stat().st_size, p.name),
    )
    if not candidates:
        return None, None
    warning = None
    if len(candidates) > 1:
        warning = (
            f"{student_dir.name}: {len(candidates)} .tex files; "
            f"using largest ({candidates[0].name})"
        )
    return candidates[0], warning


def _read_tex(path: Path, warnings: list[str], student_dir: str) -> str:
    data = path.read_bytes()
    try:
        return data.decode("utf-8")
    except UnicodeDecodeError:
        warnings.append(f"{student_dir}: invalid UTF-8 in {path.name}; bytes replaced")
        return data.decode("utf-8", errors="replace")


def load_export(export_dir: str | Path, config: Config) -> IngestResult:
    """Read one export directory into submissions sorted by internal_id.

    A student directory with no .tex source does not abort the batch; the
    submission is flagged ungradeable and carries an empty source.
    """
    export_dir = Path(export_dir)
    meta = _load_metadata(export_dir)

    try:
        assignment_id = str(meta["assignment_id"])
        due_at = meta["due_at"]
        listed = meta["submissions"]
    except KeyError as exc:
        raise ValidationError(f"{METADATA_FILENAME}: missing key {exc.args[0]}") from exc
    if not isinstance(listed, dict) or not listed:
        raise EmptyExportError(f"{METADATA_FILENAME}: no submissions listed")

    warnings: list[str] = []
    ungradeable: dict[str, str] = {}
    submissions: list[StudentSubmission] = []

    for dir_name in sorted(listed):
        entry = listed[dir_name]
        if not isinstance(entry, dict):
            raise ValidationError(f"{METADATA_FILENAME}: submissions.{dir_name} must be a mapping")
        internal_id = str(entry.get("internal_id", dir_name))
        try:
            metadata = SubmissionMetadata(
                submitted_at=entry["submitted_at"],
                due_at=due_at,
                assignment_id=assignment_id,
                submission_count=entry.get("submission_count", 1),
                extra_credit=entry.get("extra_credit", 0.0),
            )
            sid = str(entry["sid"])
            name = str(entry["name"])
            email = str(entry["email"])
        except (KeyError, PydanticValidationError) as exc:
            raise ValidationError(f"{METADATA_FILENAME}: submissions.{dir_name}: {exc}") from exc

        student_dir = export_dir / dir_name
        tex_source = ""
        if not student_dir.is_dir():
            reason = "ungradeable: submission directory missing"
            ungradeable[internal_id] = reason
            warnings.append(f"{dir_name}: directory missing from export")
        else:
            tex_path, pick_warning = _pick_tex_file(student_dir)
            if pick_warning:
                warnings.append(pick_warning)
            if tex_path is None:
                ungradeable[internal_id] = UNGRADEABLE_NO_SOURCE
                warnings.append(f"{dir_name}: no .tex file at top level")
            else:
                tex_source = _read_tex(tex_path, warnings, dir_name)

        submissions.append(
            StudentSubmission(
                internal_id=internal_id,
                sid=sid,
                name=name,
                email=email,
                tex_source=tex_source,
                metadata=metadata,
                anon_id=anonymize_id(sid, internal_id),
            )
        )

    unlisted = sorted(
        p.name
        for p in export_dir.iterdir()
        if p.is_dir() and p.name not in listed
    )
    for name in unlisted:
        warnings.append(f"{name}: directory not listed in {METADATA_FILENAME}; skipped")

    submissions.sort(key=lambda s: s.internal_id)
    return IngestResult(submissions=submissions, ungradeable=ungradeable, warnings=warnings)


def _identity_tokens(sub: StudentSubmission) -> set[str]:
    """Case-folded identity fragments worth scanning for (length >= 4)."""
    tokens = {sub.sid, sub.email, sub.name}
    tokens.update(sub.name.split())
    local_part = sub.email.split("@", 1)[0]
    tokens.add(local_part)
    return {t.casefold() for t in tokens if len(t) >= 4}


def llm_view(
    sub: StudentSubmission, macro_block: str, body: str, config: Config
) -> LlmView:
    """Build the model-facing view of a submission.

    With anonymization on, raises IdentityLeakError if any identity fragment
    of the student appears in the sanitized content; the submission is then
    flagged for manual handling rather than sent to the model.
    """
    if not config.anonymize:
        return LlmView(anon_id=sub.anon_id, sid=sub.sid, macro_block=macro_block, body=body)
    haystack = (macro_block + "\n" + body).casefold()
    matched = sorted(t for t in _identity_tokens(sub) if t in haystack)
    if matched:
        raise IdentityLeakError(sub.anon_id, matched)
    return LlmView(anon_id=sub.anon_id, macro_block=macro_block, body=body)
