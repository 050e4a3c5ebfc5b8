"""Exception hierarchy shared across the pipeline.

Errors that abort an operation are raised; errors a batch run must survive
(a student directory with no source, a corrupt ledger line) are recorded in
reports instead and never raised mid-batch.
"""

from __future__ import annotations


class LataError(Exception):
    """Base class for all pipeline errors."""


# --- config ---------------------------------------------------------------


class ConfigError(LataError):
    pass


class ParseError(ConfigError):
    """The config file is not valid YAML."""


class ValidationError(ConfigError):
    """A config or assignment value violates its constraints.

    The message names the offending key (dotted path).
    """


class UnknownKeyError(ValidationError):
    """Strict mode: a key not in the schema, usually a typo."""


class DuplicateIdError(ValidationError):
    """A problem or rubric item id occurs more than once."""


# --- ingest ---------------------------------------------------------------


class MissingMetadataError(LataError):
    """The export has no submission_metadata.yml."""


class EmptyExportError(LataError):
    """The export contains no student submissions."""


class NoTexFileError(LataError):
    """A student directory holds no .tex file (recorded, not raised mid-batch)."""

    def __init__(self, student_dir: str):
        super().__init__(f"no .tex file in student directory {student_dir!r}")
        self.student_dir = student_dir


class IdentityLeakError(LataError):
    """Identity text was found in content headed for the LLM."""

    def __init__(self, anon_id: str, matched: list[str]):
        super().__init__(
            f"submission {anon_id}: identity text found in LLM-facing content "
            f"({len(matched)} match(es)); flagged for manual handling"
        )
        self.anon_id = anon_id
        self.matched = matched


# --- llm ------------------------------------------------------------------


class LlmError(LataError):
    pass


class TransportError(LlmError):
    """The endpoint could not be reached or returned a malformed reply."""


class MockMissError(LlmError):
    """Replay mock has no recorded response for this request digest."""

    def __init__(self, digest: str, preview: str):
        super().__init__(f"no transcript entry for request digest {digest} ({preview})")
        self.digest = digest


class SchemaCoercionError(LlmError):
    """All coercion attempts failed; carries every raw reply for audit."""

    def __init__(self, message: str, attempt_log: list[str]):
        super().__init__(message)
        self.attempt_log = attempt_log


# --- ledger ---------------------------------------------------------------


class RangeError(LataError):
    """A score component is outside its allowed range."""


class MissingOriginalError(LataError):
    """A correction arrived for a student with no original ledger entry."""


class CorruptRecordError(LataError):
    """A ledger line failed to parse (reported per line, never raised mid-load)."""

    def __init__(self, line_number: int, message: str):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


# --- report ---------------------------------------------------------------


class CompilerMissingError(LataError):
    """The configured LaTeX compiler is not on the host."""


class CompileTimeoutError(LataError):
    """A single document exceeded the per-document compile wall limit."""
