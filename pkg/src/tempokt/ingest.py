"""Parsing and grouping of RIIID-schema interaction logs.

Two CSV inputs are supported: the interactions log (one row per user event)
and the question metadata table. Parsing is streaming: memory stays bounded
by a constant number of rows regardless of file size.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Iterator

INTERACTIONS_HEADER = (
    "row_id,timestamp,user_id,content_id,content_type_id,task_container_id,"
    "user_answer,answered_correctly,prior_question_elapsed_time,"
    "prior_question_had_explanation"
)
QUESTIONS_HEADER = "question_id,bundle_id,correct_answer,part,tags"


class ParseError(ValueError):
    """Malformed CSV input; carries the 1-based line number of the offending row."""

    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class ContentType(enum.Enum):
    QUESTION = 0
    LECTURE = 1


class Correctness(enum.Enum):
    INCORRECT = 0
    CORRECT = 1
    NOT_APPLICABLE = -1


@dataclass(frozen=True)
class InteractionRecord:
    """One raw log row. Timestamps are milliseconds since the user's first event."""

    row_id: int
    timestamp_ms: int
    user_id: int
    content_id: int
    content_type: ContentType
    task_container_id: int
    answered_correctly: Correctness
    prior_elapsed_ms: int | None = None
    prior_had_explanation: bool | None = None


@dataclass(frozen=True)
class QuestionMeta:
    """Static metadata for one question: which of the seven test parts it belongs to."""

    question_id: int
    part: int


@dataclass(frozen=True)
class UserHistory:
    """One user's question events in (timestamp, row_id) order; lecture rows excluded."""

    user_id: int
    events: tuple[InteractionRecord, ...]


def _open_text(source: str | Path | IO[str] | io.IOBase) -> tuple[IO[str], bool]:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline=""), True
    return source, False  # type: ignore[return-value]


def _parse_int(value: str, line: int, column: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ParseError(line, f"column '{column}': expected integer, got {value!r}") from None


def _parse_optional_ms(value: str, line: int, column: str) -> int | None:
    if value == "":
        return None
    try:
        ms = float(value)
    except ValueError:
        raise ParseError(line, f"column '{column}': expected number, got {value!r}") from None
    if not math.isfinite(ms) or ms < 0:
        raise ParseError(line, f"column '{column}': must be finite and >= 0, got {value!r}")
    return int(ms)


def _parse_optional_bool(value: str, line: int, column: str) -> bool | None:
    if value == "":
        return None
    if value == "True":
        return True
    if value == "False":
        return False
    raise ParseError(line, f"column '{column}': expected True/False/empty, got {value!r}")


def iter_interactions(source: str | Path | IO[str]) -> Iterator[InteractionRecord]:
    """Stream records from an interactions CSV, validating each row.

    Raises ParseError (with line number) on a malformed row, wrong column
    count, unknown content_type code, or a header mismatch.
    """
    handle, owned = _open_text(source)
    try:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "missing header row") from None
        expected = INTERACTIONS_HEADER.split(",")
        if header != expected:
            raise ParseError(1, f"header mismatch: expected {expected}, got {header}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(line, f"expected {len(expected)} columns, got {len(row)}")
            (raw_row_id, raw_ts, raw_user, raw_content, raw_ctype, raw_task,
             raw_answer, raw_correct, raw_elapsed, raw_expl) = row
            ts = _parse_int(raw_ts, line, "timestamp")
            if ts < 0:
                raise ParseError(line, f"column 'timestamp': must be >= 0, got {ts}")
            ctype_code = _parse_int(raw_ctype, line, "content_type_id")
            try:
                ctype = ContentType(ctype_code)
            except ValueError:
                raise ParseError(line, f"unknown content_type_id code {ctype_code}") from None
            correct_code = _parse_int(raw_correct, line, "answered_correctly")
            try:
                correct = Correctness(correct_code)
            except ValueError:
                raise ParseError(line, f"unknown answered_correctly code {correct_code}") from None
            if (correct is Correctness.NOT_APPLICABLE) != (ctype is ContentType.LECTURE):
                raise ParseError(
                    line,
                    "answered_correctly must be -1 exactly for lecture rows "
                    f"(content_type_id={ctype_code}, answered_correctly={correct_code})",
                )
            # user_answer is validated but intentionally discarded: no model
            # input uses the chosen option.
            if raw_answer != "":
                _parse_int(raw_answer, line, "user_answer")
            yield InteractionRecord(
                row_id=_parse_int(raw_row_id, line, "row_id"),
                timestamp_ms=ts,
                user_id=_parse_int(raw_user, line, "user_id"),
                content_id=_parse_int(raw_content, line, "content_id"),
                content_type=ctype,
                task_container_id=_parse_int(raw_task, line, "task_container_id"),
                answered_correctly=correct,
                prior_elapsed_ms=_parse_optional_ms(raw_elapsed, line, "prior_question_elapsed_time"),
                prior_had_explanation=_parse_optional_bool(raw_expl, line, "prior_question_had_explanation"),
            )
    finally:
        if owned:
            handle.close()


def parse_interactions(source: str | Path | IO[str]) -> list[InteractionRecord]:
    """Parse an interactions CSV into a list of records, preserving file order."""
    return list(iter_interactions(source))


def serialize_interaction(record: InteractionRecord) -> str:
    """Render one record as a CSV data row in the canonical column order."""
    elapsed = "" if record.prior_elapsed_ms is None else str(record.prior_elapsed_ms)
    expl = "" if record.prior_had_explanation is None else str(record.prior_had_explanation)
    return (
        f"{record.row_id},{record.timestamp_ms},{record.user_id},{record.content_id},"
        f"{record.content_type.value},{record.task_container_id},,"
        f"{record.answered_correctly.value},{elapsed},{expl}"
    )


def parse_questions(source: str | Path | IO[str]) -> dict[int, QuestionMeta]:
    """Parse the questions CSV into a question_id -> QuestionMeta map.

    Raises ParseError on duplicate question ids or a part outside [1, 7].
    """
    handle, owned = _open_text(source)
    try:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "missing header row") from None
        expected = QUESTIONS_HEADER.split(",")
        if header != expected:
            raise ParseError(1, f"header mismatch: expected {expected}, got {header}")
        table: dict[int, QuestionMeta] = {}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise ParseError(line, f"expected {len(expected)} columns, got {len(row)}")
            qid = _parse_int(row[0], line, "question_id")
            part = _parse_int(row[3], line, "part")
            if not 1 <= part <= 7:
                raise ParseError(line, f"part must be within [1, 7], got {part}")
            if qid in table:
                raise ParseError(line, f"duplicate question_id {qid}")
            table[qid] = QuestionMeta(question_id=qid, part=part)
        return table
    finally:
        if owned:
            handle.close()


def filter_and_group(records: Iterable[InteractionRecord]) -> list[UserHistory]:
    """Drop lecture rows and group the rest by user, chronologically.

    Within a user, events are ordered by (timestamp_ms, row_id); users are
    emitted in ascending user_id order so the result is deterministic.
    """
    per_user: dict[int, list[InteractionRecord]] = defaultdict(list)
    for record in records:
        if record.content_type is ContentType.LECTURE:
            continue
        per_user[record.user_id].append(record)
    histories = []
    for user_id in sorted(per_user):
        events = sorted(per_user[user_id], key=lambda r: (r.timestamp_ms, r.row_id))
        histories.append(UserHistory(user_id=user_id, events=tuple(events)))
    return histories
