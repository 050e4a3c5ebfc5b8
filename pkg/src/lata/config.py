"""Run configuration: one YAML file, validated strictly, immutable afterwards.

Unknown keys are rejected rather than ignored so a misspelled privacy flag
(e.g. ``anonymise``) fails loudly instead of silently disabling anonymization.
"""

from __future__ import annotations

import math
from datetime import datetime
from pathlib import Path
from typing import Any
from urllib.parse import urlsplit

import yaml
from pydantic import BaseModel, ConfigDict, Field, StrictBool, field_validator
from pydantic import ValidationError as PydanticValidationError

from .errors import ParseError, UnknownKeyError, ValidationError

CONFIG_ENV_VAR = "LATA_CONFIG"


class _StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LatePolicy(_StrictModel):
    """Linear per-day late penalty with a grace window and a cap.

    penalty = min(cap_fraction, per_day_fraction * ceil(days late beyond grace))
    """

    per_day_fraction: float = Field(default=0.1, ge=0.0, le=1.0)
    grace_minutes: float = Field(default=0.0, ge=0.0)
    cap_fraction: float = Field(default=1.0, ge=0.0, le=1.0)

    def penalty_fraction(self, submitted_at: datetime, due_at: datetime) -> float:
        late_seconds = (submitted_at - due_at).total_seconds() - self.grace_minutes * 60.0
        if late_seconds <= 0:
            return 0.0
        late_days = math.ceil(late_seconds / 86400.0)
        return min(self.cap_fraction, self.per_day_fraction * late_days)


class GradingSection(_StrictModel):
    anonymize: StrictBool = True
    grader_model: str = Field(default="gpt-oss:120b", min_length=1)
    segmenter_model: str = Field(default="gpt-oss:20b", min_length=1)
    correction_credit_fraction: float = Field(default=1.0, ge=0.0, le=1.0)
    hint_leak_min_run: int = Field(default=24, ge=8)


class LlmSection(_StrictModel):
    endpoint_url: str = "http://127.0.0.1:11434/v1/chat/completions"
    max_retries: int = Field(default=3, ge=0)
    timeout_seconds: float = Field(default=120.0, gt=0.0)
    in_flight_limit: int = Field(default=2, ge=1)

    @field_validator("endpoint_url")
    @classmethod
    def _url_has_host(cls, value: str) -> str:
        parts = urlsplit(value)
        if parts.scheme not in ("http", "https") or not parts.netloc:
            raise ValueError(f"not an http(s) URL with a host: {value!r}")
        return value


class ReportSection(_StrictModel):
    repair_max_attempts: int = Field(default=3, ge=0)
    compiler: str = Field(default="pdflatex", min_length=1)
    compile_timeout_seconds: float = Field(default=120.0, gt=0.0)


class RunSection(_StrictModel):
    worker_count: int = Field(default=2, ge=1)


class PathsSection(_StrictModel):
    export_dir: str = "export"
    assignment_dir: str = "assignment"
    output_dir: str = "out"


class Config(_StrictModel):
    """Validated run configuration; loaded once, shared read-only by workers."""

    grading: GradingSection = GradingSection()
    llm: LlmSection = LlmSection()
    report: ReportSection = ReportSection()
    run: RunSection = RunSection()
    late_policy: LatePolicy = LatePolicy()
    paths: PathsSection = PathsSection()

    # Flat accessors for the knobs the pipeline reads constantly.
    @property
    def anonymize(self) -> bool:
        return self.grading.anonymize

    @property
    def grader_model(self) -> str:
        return self.grading.grader_model

    @property
    def segmenter_model(self) -> str:
        return self.grading.segmenter_model

    @property
    def correction_credit_fraction(self) -> float:
        return self.grading.correction_credit_fraction

    @property
    def hint_leak_min_run(self) -> int:
        return self.grading.hint_leak_min_run

    @property
    def endpoint_url(self) -> str:
        return self.llm.endpoint_url

    @property
    def llm_max_retries(self) -> int:
        return self.llm.max_retries

    @property
    def llm_timeout(self) -> float:
        return self.llm.timeout_seconds

    @property
    def repair_max_attempts(self) -> int:
        return self.report.repair_max_attempts

    @property
    def worker_count(self) -> int:
        return self.run.worker_count

    def to_mapping(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_mapping(), sort_keys=True)


def _dotted(loc: tuple[Any, ...]) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def build_config(data: Any) -> Config:
    """Validate an already-parsed mapping into a Config."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ValidationError("config root must be a mapping")
    try:
        return Config.model_validate(data)
    except PydanticValidationError as exc:
        first = exc.errors()[0]
        key = _dotted(tuple(first["loc"]))
        if first["type"] == "extra_forbidden":
            raise UnknownKeyError(f"unknown config key: {key}") from exc
        raise ValidationError(f"invalid config value at {key}: {first['msg']}") from exc


def load_config(path: str | Path) -> Config:
    """Load and validate the YAML config file at ``path``."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"malformed YAML in {path}: {exc}") from exc
    return build_config(data)
