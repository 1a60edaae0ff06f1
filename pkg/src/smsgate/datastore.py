"""Read-only education datastore answering the five query codes.

Six ``|``-delimited UTF-8 files, no header line, one row per line:

=======================  ==================================================
``credentials.txt``      user_id | password | role (student / teacher)
``scores.txt``           student_id | course_code | score (0-100)
``credits.txt``          student_id | credits
``exams.txt``            student_id | course_code | room_code | datetime
``teacher_info.txt``     teacher_id | class_count | quality_rating (0-5)
``teacher_schedule.txt`` teacher_id | course_code | room_code | datetime
=======================  ==================================================

Blank lines are ignored.
"""
from __future__ import annotations

import hmac
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .codec import (
    ALPHABET,
    BODY_ALPHABET,
    MAX_BODY_LEN,
    PASSWORD_LEN,
    USER_ID_LEN,
    QueryCode,
)

STUDENT = "student"
TEACHER = "teacher"
ROLES = (STUDENT, TEACHER)

FILES = {
    "credentials": "credentials.txt",
    "scores": "scores.txt",
    "credits": "credits.txt",
    "exams": "exams.txt",
    "teacher_info": "teacher_info.txt",
    "teacher_schedule": "teacher_schedule.txt",
}

# codes 001/002/005 serve students, 003/004 serve teachers
CODE_ROLE = {
    QueryCode.STUDENT_SCORE: STUDENT,
    QueryCode.STUDENT_CREDIT: STUDENT,
    QueryCode.TEACHER_QUANTITY: TEACHER,
    QueryCode.TEACHER_QUALITY: TEACHER,
    QueryCode.EXAM_SCHEDULE: STUDENT,
}

# text fields are joined with ';', '=' and '@' in results
_RESERVED = frozenset(";=@")


class DatastoreError(Exception):
    """A data file is missing or holds an invalid row."""


class DispatchError(Exception):
    pass


class RoleMismatch(DispatchError):
    """The requested code is not available to the requester's role."""


class NoRecords(DispatchError):
    pass


@dataclass(frozen=True)
class Credential:
    user_id: str
    password: str
    role: str


@dataclass(frozen=True)
class ScoreRow:
    student_id: str
    course_code: str
    score: int


@dataclass(frozen=True)
class CreditRow:
    student_id: str
    credits: int


@dataclass(frozen=True)
class ExamRow:
    student_id: str
    course_code: str
    room_code: str
    datetime: str


@dataclass(frozen=True)
class TeacherInfoRow:
    teacher_id: str
    class_count: int
    quality_rating: float


@dataclass(frozen=True)
class TeacherScheduleRow:
    teacher_id: str
    course_code: str
    room_code: str
    datetime: str


@dataclass
class Datastore:
    credentials: dict[str, Credential] = field(default_factory=dict)
    scores: list[ScoreRow] = field(default_factory=list)
    credits: list[CreditRow] = field(default_factory=list)
    exams: list[ExamRow] = field(default_factory=list)
    teacher_info: list[TeacherInfoRow] = field(default_factory=list)
    teacher_schedule: list[TeacherScheduleRow] = field(default_factory=list)

    def role_of(self, user_id: str) -> Optional[str]:
        cred = self.credentials.get(user_id)
        return cred.role if cred else None

    def authenticate(self, user_id: str, password: str) -> Optional[str]:
        return authenticate(self, user_id, password)

    def dispatch(self, code, user_id: str) -> str:
        return dispatch(self, code, user_id)


# --- Loading ----------------------------------------------------------------


def _text(value: str, what: str) -> str:
    if not value or not BODY_ALPHABET.issuperset(value) or _RESERVED & set(value):
        raise ValueError(f"{what} {value!r} must be non-empty printable ASCII without ';', '=', '@'")
    return value


def _ident(value: str, length: int, what: str) -> str:
    if len(value) != length or not ALPHABET.issuperset(value):
        raise ValueError(f"{what} {value!r} must be {length} characters of [0-9A-Za-z]")
    return value


def _int_in(value: str, what: str, lo: int, hi: Optional[int] = None) -> int:
    n = int(value)
    if n < lo or (hi is not None and n > hi):
        raise ValueError(f"{what} {n} out of range")
    return n


def _parse_credential(f):
    if f[2] not in ROLES:
        raise ValueError(f"role {f[2]!r} must be one of {ROLES}")
    return Credential(_ident(f[0], USER_ID_LEN, "user_id"), _ident(f[1], PASSWORD_LEN, "password"), f[2])


def _parse_score(f):
    return ScoreRow(_ident(f[0], USER_ID_LEN, "student_id"), _text(f[1], "course_code"),
                    _int_in(f[2], "score", 0, 100))


def _parse_credit(f):
    return CreditRow(_ident(f[0], USER_ID_LEN, "student_id"), _int_in(f[1], "credits", 0))


def _parse_exam(f):
    return ExamRow(_ident(f[0], USER_ID_LEN, "student_id"), _text(f[1], "course_code"),
                   _text(f[2], "room_code"), _text(f[3], "datetime"))


def _parse_teacher_info(f):
    rating = float(f[2])
    if not 0.0 <= rating <= 5.0:
        raise ValueError(f"quality_rating {rating} outside 0.0-5.0")
    return TeacherInfoRow(_ident(f[0], USER_ID_LEN, "teacher_id"), _int_in(f[1], "class_count", 0), rating)


def _parse_teacher_schedule(f):
    return TeacherScheduleRow(_ident(f[0], USER_ID_LEN, "teacher_id"), _text(f[1], "course_code"),
                              _text(f[2], "room_code"), _text(f[3], "datetime"))


_PARSERS = {
    "credentials": (3, _parse_credential),
    "scores": (3, _parse_score),
    "credits": (2, _parse_credit),
    "exams": (4, _parse_exam),
    "teacher_info": (3, _parse_teacher_info),
    "teacher_schedule": (4, _parse_teacher_schedule),
}


def _read_rows(path: Path, table: str):
    width, parse = _PARSERS[table]
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DatastoreError(f"missing data file {path}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("|")
        try:
            if len(fields) != width:
                raise ValueError(f"expected {width} fields, got {len(fields)}")
            yield lineno, parse(fields)
        except ValueError as exc:
            raise DatastoreError(f"{path}:{lineno}: {exc}") from None


def load(directory) -> Datastore:
    """Parse and validate the six data files in *directory*."""
    directory = Path(directory)
    ds = Datastore()
    path = directory / FILES["credentials"]
    for lineno, cred in _read_rows(path, "credentials"):
        if cred.user_id in ds.credentials:
            raise DatastoreError(f"{path}:{lineno}: duplicate user_id {cred.user_id}")
        ds.credentials[cred.user_id] = cred
    for table in ("scores", "credits", "exams", "teacher_info", "teacher_schedule"):
        rows = getattr(ds, table)
        rows.extend(row for _, row in _read_rows(directory / FILES[table], table))
    return ds


# --- Queries ----------------------------------------------------------------

_DUMMY_PASSWORD = "\0" * PASSWORD_LEN


def authenticate(ds: Datastore, user_id: str, password: str) -> Optional[str]:
    """Role of the matching credential, or None.

    Unknown user and wrong password are indistinguishable, and the password
    comparison runs even when the user id is unknown.
    """
    cred = ds.credentials.get(user_id)
    id_ok = cred is not None and hmac.compare_digest(cred.user_id.encode(), user_id.encode())
    expected = cred.password if cred is not None else _DUMMY_PASSWORD
    pw_ok = hmac.compare_digest(expected.encode(), password.encode())
    if id_ok & pw_ok:
        return cred.role
    return None


def truncate(text: str, limit: int = MAX_BODY_LEN) -> str:
    if len(text) <= limit:
        return text
    return text[: limit - 3] + "..."


def dispatch(ds: Datastore, code, user_id: str) -> str:
    """Formatted result text of query *code* for the requester's own records.

    Raises :class:`RoleMismatch` when the code belongs to the other role and
    :class:`NoRecords` when nothing matches.
    """
    code = QueryCode(code)
    if ds.role_of(user_id) != CODE_ROLE[code]:
        raise RoleMismatch(f"code {code.value} is not available to this user")

    if code is QueryCode.STUDENT_SCORE:
        items = [f"{r.course_code}={r.score}" for r in ds.scores if r.student_id == user_id]
        text = ";".join(items)
    elif code is QueryCode.STUDENT_CREDIT:
        rows = [r for r in ds.credits if r.student_id == user_id]
        text = f"CREDITS:{rows[0].credits}" if rows else ""
    elif code is QueryCode.TEACHER_QUANTITY:
        rows = [r for r in ds.teacher_info if r.teacher_id == user_id]
        text = f"CLASSES:{rows[0].class_count}" if rows else ""
    elif code is QueryCode.TEACHER_QUALITY:
        rows = [r for r in ds.teacher_info if r.teacher_id == user_id]
        text = f"QUALITY:{rows[0].quality_rating}" if rows else ""
    else:
        items = [f"{r.course_code}@{r.room_code}@{r.datetime}" for r in ds.exams if r.student_id == user_id]
        text = ";".join(items)

    if not text:
        raise NoRecords(f"no records for code {code.value}")
    return truncate(text)
