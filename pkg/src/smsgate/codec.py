"""Wire codec for query and response short messages.

A query is a fixed-width 27 character string::

    positions  1-3   query code        (001..005)
    positions  4-15  user id           (12 chars)
    positions 16-17  reserved          ("00" on encode, ignored on decode)
    positions 18-27  password          (10 chars)

All query characters come from ``[0-9A-Za-z]``.  A response is one status
character followed by at most 159 printable ASCII characters, never
containing the frame delimiter ``|``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

# --- Constants --------------------------------------------------------------

CODE_LEN = 3
USER_ID_LEN = 12
RESERVED_LEN = 2
PASSWORD_LEN = 10
QUERY_LEN = CODE_LEN + USER_ID_LEN + RESERVED_LEN + PASSWORD_LEN  # 27

RESERVED_FILL = "0" * RESERVED_LEN

MAX_RESPONSE_LEN = 160
MAX_BODY_LEN = MAX_RESPONSE_LEN - 1

FRAME_DELIMITER = "|"

ALPHABET = frozenset("0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz")
BODY_ALPHABET = frozenset(chr(c) for c in range(0x20, 0x7F)) - {FRAME_DELIMITER}

_ID_SLICE = slice(CODE_LEN, CODE_LEN + USER_ID_LEN)
_PW_SLICE = slice(CODE_LEN + USER_ID_LEN + RESERVED_LEN, QUERY_LEN)


# --- Errors -----------------------------------------------------------------


class CodecError(ValueError):
    """Base class for every classified codec failure."""


class InvalidFieldError(CodecError):
    """A QueryMessage field breaks its length or alphabet rule."""


class LengthError(CodecError):
    """Encoded query is not exactly 27 characters."""


class UnknownCodeError(CodecError):
    """Positions 1-3 are not one of the five known query codes."""


class AlphabetError(CodecError):
    """A character outside the message alphabet was found."""


class EmptyResponseError(CodecError):
    pass


class OversizeError(CodecError):
    pass


class StatusError(CodecError):
    """Unknown response status character."""


class NonSevenBitError(CodecError):
    pass


# --- Domain types -----------------------------------------------------------


class QueryCode(str, enum.Enum):
    STUDENT_SCORE = "001"
    STUDENT_CREDIT = "002"
    TEACHER_QUANTITY = "003"
    TEACHER_QUALITY = "004"
    EXAM_SCHEDULE = "005"

    @property
    def label(self) -> str:
        return _LABELS[self]

    def __str__(self) -> str:
        return self.value


_LABELS = {
    QueryCode.STUDENT_SCORE: "Student's score",
    QueryCode.STUDENT_CREDIT: "Student's credit",
    QueryCode.TEACHER_QUANTITY: "Teacher's Quantity",
    QueryCode.TEACHER_QUALITY: "Teacher's class Quality",
    QueryCode.EXAM_SCHEDULE: "Exam schedule",
}


class Status(str, enum.Enum):
    OK = "0"
    AUTH_FAILED = "1"
    INVALID_QUERY = "2"
    NO_RECORDS = "3"
    INTERNAL_ERROR = "4"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class QueryMessage:
    code: QueryCode
    user_id: str
    password: str


@dataclass(frozen=True)
class ResponseMessage:
    status: Status
    body: str = ""


# --- Query ------------------------------------------------------------------


def check_field(name: str, value: object, length: int) -> None:
    if not isinstance(value, str) or len(value) != length:
        raise InvalidFieldError(f"{name} must be exactly {length} characters")
    if not ALPHABET.issuperset(value):
        raise InvalidFieldError(f"{name} contains characters outside [0-9A-Za-z]")


def encode_query(m: QueryMessage) -> str:
    """Pack a query into its 27 character wire form."""
    try:
        code = QueryCode(m.code)
    except ValueError:
        raise InvalidFieldError(f"unknown query code {m.code!r}") from None
    check_field("user_id", m.user_id, USER_ID_LEN)
    check_field("password", m.password, PASSWORD_LEN)
    return code.value + m.user_id + RESERVED_FILL + m.password


def decode_query(s: str) -> QueryMessage:
    """Parse a 27 character query.

    Raises a :class:`CodecError` subclass for every malformed input:
    :class:`LengthError`, :class:`UnknownCodeError` or :class:`AlphabetError`.
    The reserved positions 16-17 are not inspected.
    """
    if not isinstance(s, str) or len(s) != QUERY_LEN:
        raise LengthError(f"query must be {QUERY_LEN} characters")
    try:
        code = QueryCode(s[:CODE_LEN])
    except ValueError:
        raise UnknownCodeError(f"unknown query code {s[:CODE_LEN]!r}") from None
    user_id, password = s[_ID_SLICE], s[_PW_SLICE]
    if not (ALPHABET.issuperset(user_id) and ALPHABET.issuperset(password)):
        raise AlphabetError("user id or password contains characters outside [0-9A-Za-z]")
    return QueryMessage(code, user_id, password)


# --- Response ---------------------------------------------------------------


def encode_response(r: ResponseMessage) -> str:
    try:
        status = Status(r.status)
    except ValueError:
        raise StatusError(f"invalid status {r.status!r}") from None
    if len(r.body) > MAX_BODY_LEN:
        raise OversizeError(f"response body exceeds {MAX_BODY_LEN} characters")
    if not BODY_ALPHABET.issuperset(r.body):
        raise AlphabetError("response body contains a non-printable character or '|'")
    return status.value + r.body


def decode_response(s: str) -> ResponseMessage:
    if not s:
        raise EmptyResponseError("empty response")
    if len(s) > MAX_RESPONSE_LEN:
        raise OversizeError(f"response exceeds {MAX_RESPONSE_LEN} characters")
    try:
        status = Status(s[0])
    except ValueError:
        raise StatusError(f"invalid status {s[0]!r}") from None
    body = s[1:]
    if not BODY_ALPHABET.issuperset(body):
        raise AlphabetError("response body contains a non-printable character or '|'")
    return ResponseMessage(status, body)


# --- PDU comparison ---------------------------------------------------------


def pdu_length_estimate(text: str) -> int:
    """Octets needed to carry *text* as packed 7-bit septets.

    Only the length arithmetic is modelled, no actual packing is done.
    """
    if any(ord(c) > 0x7F for c in text):
        raise NonSevenBitError("text contains characters outside the 7-bit range")
    return (7 * len(text) + 7) // 8
