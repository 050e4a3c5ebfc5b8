"""Minimal structural LaTeX tokenizer plus the extractions the grader needs.

This is deliberately not a TeX implementation: tokenization is lossless
(concatenating lexemes reproduces the input), macros are harvested verbatim
for context, and nothing is ever expanded or evaluated.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from string import ascii_letters
from typing import Optional

from pydantic import BaseModel, Field

from .config import Config

CONTROL = "control_sequence"
GROUP_OPEN = "group_open"
GROUP_CLOSE = "group_close"
COMMENT = "comment"
TEXT = "text"
MATH_SHIFT = "math_shift"

_SPECIALS = "\\{}$%"

# Defining control sequences we harvest, mapped to the MacroDef kind tag.
_MACRO_KINDS = {
    "\\newcommand": "newcommand",
    "\\renewcommand": "renewcommand",
    "\\def": "def",
    "\\DeclareMathOperator": "declare_math_operator",
    "\\providecommand": "providecommand",
}


@dataclass(frozen=True)
class Token:
    kind: str
    lexeme: str
    span: tuple[int, int]


@dataclass(frozen=True)
class TokenStream:
    tokens: tuple[Token, ...]
    source: str

    def __iter__(self):
        return iter(self.tokens)

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class MacroDef:
    kind: str
    name: str
    arity: int
    has_default: bool
    raw_text: str
    span: tuple[int, int]


@dataclass(frozen=True)
class DocumentBody:
    text: str
    span: tuple[int, int]


class SanitizeReport(BaseModel):
    suspicious: bool = False
    matched_phrases: list[str] = Field(default_factory=list)
    comments_removed: int = 0
    control_chars_removed: int = 0


def tokenize(source: str) -> TokenStream:
    """Lossless tokenization; malformed input degrades to text tokens."""
    tokens: list[Token] = []
    n = len(source)
    i = 0
    while i < n:
        ch = source[i]
        if ch == "\\":
            j = i + 1
            if j < n and source[j] in ascii_letters:
                while j < n and source[j] in ascii_letters:
                    j += 1
                tokens.append(Token(CONTROL, source[i:j], (i, j)))
            elif j < n:
                # control symbol, e.g. \% \\ \$
                tokens.append(Token(CONTROL, source[i : j + 1], (i, j + 1)))
                j += 1
            else:
                # lone backslash at end of input
                tokens.append(Token(TEXT, "\\", (i, n)))
                j = n
            i = j
        elif ch == "{":
            tokens.append(Token(GROUP_OPEN, "{", (i, i + 1)))
            i += 1
        elif ch == "}":
            tokens.append(Token(GROUP_CLOSE, "}", (i, i + 1)))
            i += 1
        elif ch == "$":
            tokens.append(Token(MATH_SHIFT, "$", (i, i + 1)))
            i += 1
        elif ch == "%":
            j = source.find("\n", i)
            if j == -1:
                j = n
            tokens.append(Token(COMMENT, source[i:j], (i, j)))
            i = j
        else:
            j = i
            while j < n and source[j] not in _SPECIALS:
                j += 1
            tokens.append(Token(TEXT, source[i:j], (i, j)))
            i = j
    return TokenStream(tuple(tokens), source)


class _Cursor:
    """Character-level cursor over a token stream.

    Braces stay visible as group tokens; everything else is consumed
    character by character so bracketed optional arguments, which live
    inside text tokens, can be parsed too. Comments are skipped.
    """

    def __init__(self, stream: TokenStream, token_index: int):
        self.tokens = stream.tokens
        self.ti = token_index
        self.ci = 0  # char offset within the current token's lexeme

    def _current(self) -> Optional[Token]:
        while self.ti < len(self.tokens):
            tok = self.tokens[self.ti]
            if tok.kind == COMMENT:
                self.ti += 1
                self.ci = 0
                continue
            if tok.kind == TEXT and self.ci >= len(tok.lexeme):
                self.ti += 1
                self.ci = 0
                continue
            return tok
        return None

    def skip_ws(self) -> None:
        while True:
            tok = self._current()
            if tok is None or tok.kind != TEXT:
                return
            while self.ci < len(tok.lexeme) and tok.lexeme[self.ci].isspace():
                self.ci += 1
            if self.ci < len(tok.lexeme):
                return

    def peek_kind(self) -> Optional[str]:
        tok = self._current()
        return tok.kind if tok else None

    def peek_char(self) -> Optional[str]:
        tok = self._current()
        if tok is None:
            return None
        if tok.kind == TEXT:
            return tok.lexeme[self.ci]
        return tok.lexeme[0]

    def take_token(self) -> Optional[Token]:
        tok = self._current()
        if tok is None:
            return None
        self.ti += 1
        self.ci = 0
        return tok

    def take_char(self) -> Optional[str]:
        tok = self._current()
        if tok is None:
            return None
        if tok.kind == TEXT:
            ch = tok.lexeme[self.ci]
            self.ci += 1
            return ch
        self.ti += 1
        self.ci = 0
        return tok.lexeme

    def end_offset(self) -> int:
        tok = self._current()
        if tok is None:
            return self.tokens[-1].span[1] if self.tokens else 0
        return tok.span[0] + (self.ci if tok.kind == TEXT else 0)

    def take_group(self) -> Optional[int]:
        """Consume a balanced {...} group; returns its end offset or None."""
        self.skip_ws()
        tok = self._current()
        if tok is None or tok.kind != GROUP_OPEN:
            return None
        depth = 0
        while True:
            tok = self.take_token()
            if tok is None:
                return None
            if tok.kind == GROUP_OPEN:
                depth += 1
            elif tok.kind == GROUP_CLOSE:
                depth -= 1
                if depth == 0:
                    return tok.span[1]

    def take_optional_bracket(self) -> Optional[str]:
        """Consume a [...] block if present; returns its content text."""
        self.skip_ws()
        if self.peek_kind() != TEXT or self.peek_char() != "[":
            return None
        self.take_char()
        content: list[str] = []
        depth = 0
        while True:
            tok = self._current()
            if tok is None:
                return "".join(content)  # unterminated bracket: best effort
            if tok.kind == TEXT:
                ch = tok.lexeme[self.ci]
                if ch == "]" and depth == 0:
                    self.take_char()
                    return "".join(content)
                content.append(ch)
                self.take_char()
            else:
                if tok.kind == GROUP_OPEN:
                    depth += 1
                elif tok.kind == GROUP_CLOSE:
                    depth = max(0, depth - 1)
                content.append(tok.lexeme)
                self.take_token()


def _parse_macro_at(stream: TokenStream, index: int) -> tuple[Optional[MacroDef], Optional[str]]:
    """Parse one definition starting at token ``index`` (a defining control seq).

    Returns (macro, warning); exactly one of the two is set.
    """
    head = stream.tokens[index]
    kind = _MACRO_KINDS[head.lexeme]
    start = head.span[0]
    cur = _Cursor(stream, index + 1)

    # starred variants: \newcommand*, \DeclareMathOperator*
    cur.skip_ws()
    if cur.peek_kind() == TEXT and cur.peek_char() == "*":
        cur.take_char()

    # the defined name: either {\name} or \name directly
    cur.skip_ws()
    name: Optional[str] = None
    if cur.peek_kind() == GROUP_OPEN:
        cur.take_token()
        cur.skip_ws()
        tok = cur.take_token()
        if tok is not None and tok.kind == CONTROL:
            name = tok.lexeme.lstrip("\\")
        cur.skip_ws()
        if cur.peek_kind() == GROUP_CLOSE:
            cur.take_token()
        else:
            return None, f"malformed definition at offset {start}: unclosed name group"
    elif cur.peek_kind() == CONTROL:
        tok = cur.take_token()
        assert tok is not None
        name = tok.lexeme.lstrip("\\")
    if not name:
        return None, f"malformed definition at offset {start}: no control-sequence name"

    arity = 0
    has_default = False
    if kind == "def":
        # parameter text up to the body group, e.g. #1#2
        while True:
            cur.skip_ws()
            pk = cur.peek_kind()
            if pk is None:
                return None, f"unterminated group at offset {start}"
            if pk == GROUP_OPEN:
                break
            ch = cur.take_char()
            if ch == "#":
                nxt = cur.peek_char()
                if nxt is not None and nxt.isdigit():
                    arity = max(arity, int(nxt))
                    cur.take_char()
    elif kind in ("newcommand", "renewcommand", "providecommand"):
        argc = cur.take_optional_bracket()
        if argc is not None:
            digits = argc.strip()
            arity = int(digits) if digits.isdigit() else 0
            default = cur.take_optional_bracket()
            if default is not None:
                has_default = True

    end = cur.take_group()
    if end is None:
        return None, f"unterminated group at offset {start}"
    return (
        MacroDef(
            kind=kind,
            name=name,
            arity=arity,
            has_default=has_default,
            raw_text=stream.source[start:end],
            span=(start, end),
        ),
        None,
    )


def extract_macros(stream: TokenStream) -> tuple[list[MacroDef], list[str]]:
    """Collect every top-level (group depth 0) macro definition, in source order."""
    macros: list[MacroDef] = []
    warnings: list[str] = []
    depth = 0
    i = 0
    tokens = stream.tokens
    while i < len(tokens):
        tok = tokens[i]
        if tok.kind == GROUP_OPEN:
            depth += 1
        elif tok.kind == GROUP_CLOSE:
            depth = max(0, depth - 1)
        elif tok.kind == CONTROL and depth == 0 and tok.lexeme in _MACRO_KINDS:
            macro, warning = _parse_macro_at(stream, i)
            if macro is not None:
                macros.append(macro)
                # resume after the definition so its body is not rescanned
                while i < len(tokens) and tokens[i].span[1] <= macro.span[1]:
                    i += 1
                continue
            warnings.append(warning or f"malformed definition at offset {tok.span[0]}")
        i += 1
    return macros, warnings


def _find_env_marker(stream: TokenStream, control: str, env: str, last: bool) -> Optional[tuple[int, int]]:
    """Locate ``\\begin{env}`` / ``\\end{env}``; returns (start, end) offsets."""
    found: Optional[tuple[int, int]] = None
    tokens = stream.tokens
    for i, tok in enumerate(tokens):
        if tok.kind != CONTROL or tok.lexeme != control:
            continue
        j = i + 1
        while j < len(tokens) and tokens[j].kind == TEXT and not tokens[j].lexeme.strip():
            j += 1
        if (
            j + 2 < len(tokens)
            and tokens[j].kind == GROUP_OPEN
            and tokens[j + 1].kind == TEXT
            and tokens[j + 1].lexeme.strip() == env
            and tokens[j + 2].kind == GROUP_CLOSE
        ):
            marker = (tok.span[0], tokens[j + 2].span[1])
            if not last:
                return marker
            found = marker
    return found


def extract_body(stream: TokenStream) -> tuple[DocumentBody, list[str]]:
    """Slice between the first ``\\begin{document}`` and the last ``\\end{document}``.

    Missing or out-of-order markers degrade to the whole source with a warning;
    student templates are messy and must still flow through the pipeline.
    """
    begin = _find_env_marker(stream, "\\begin", "document", last=False)
    end = _find_env_marker(stream, "\\end", "document", last=True)
    if begin is None or end is None or end[0] < begin[1]:
        return (
            DocumentBody(text=stream.source, span=(0, len(stream.source))),
            ["missing document environment; using whole source as body"],
        )
    return DocumentBody(text=stream.source[begin[1] : end[0]], span=(begin[1], end[0])), []


# Injection-shaped phrases; matches are flagged, never silently deleted.
INJECTION_BLOCKLIST = (
    "ignore previous",
    "ignore all prior",
    "system prompt",
    "you are the grader",
    "award full credit",
    "give full marks",
)

_C0_EXCEPT_NL_TAB = re.compile(r"[\x00-\x08\x0b-\x1f]")


def _strip_comments(text: str) -> tuple[str, int]:
    stream = tokenize(text)
    kept: list[str] = []
    removed = 0
    for tok in stream:
        if tok.kind == COMMENT:
            removed += 1
        else:
            kept.append(tok.lexeme)
    return "".join(kept), removed


def sanitize_for_llm(
    macro_block: str, body: str, config: Config
) -> tuple[str, str, SanitizeReport]:
    """Prepare student text for an LLM prompt: strip comments and control
    characters, and flag injection-shaped phrases.

    Flagging never blocks grading; the prompt builder fences flagged text
    with a heightened untrusted-data instruction instead.
    """
    matched = sorted(
        phrase
        for phrase in INJECTION_BLOCKLIST
        if phrase in macro_block.lower() or phrase in body.lower()
    )
    clean_parts: list[str] = []
    comments_removed = 0
    control_removed = 0
    for part in (macro_block, body):
        stripped, n_comments = _strip_comments(part)
        comments_removed += n_comments
        without_ctl = _C0_EXCEPT_NL_TAB.sub("", stripped)
        control_removed += len(stripped) - len(without_ctl)
        clean_parts.append(without_ctl)
    report = SanitizeReport(
        suspicious=bool(matched),
        matched_phrases=matched,
        comments_removed=comments_removed,
        control_chars_removed=control_removed,
    )
    return clean_parts[0], clean_parts[1], report
