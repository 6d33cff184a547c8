"""Typed wire messages with a canonical JSON encoding and transcripts.

Every message is one JSON object with sorted keys and no insignificant
whitespace, so identical messages are identical bytes. Floats are written in
Python's shortest round-trip decimal form, which makes decode(encode(m))
bit-identical on 64-bit values -- repeated stats requests at the same beta
return the same bytes, and no precision is lost in flight.

Transcripts record the full request/response flow of a run so privacy
claims can be asserted on what actually crossed the wire rather than on
what the code intends.
"""

from __future__ import annotations

import json
import threading as _threading
import time as _time
from dataclasses import dataclass, field
from typing import Iterable, Union

from .errors import ProtocolVersionError, SchemaViolationError

PROTOCOL_VERSION = 1

KIND_UPLOAD = "UploadComputation"
KIND_EXECUTE_REQUEST = "ExecuteRequest"
KIND_EXECUTE_RESPONSE = "ExecuteResponse"
KIND_ERROR = "ErrorResponse"

METHOD_COX_LOCAL_STATS = "CoxLocalStats"
METHOD_SVD_INIT = "SvdInit"
METHOD_SVD_V_STEP = "SvdVStep"
METHOD_SVD_U_STEP = "SvdUStep"
METHOD_SVD_FINALIZE = "SvdFinalizeComponent"

EXECUTE_METHODS = (
    METHOD_COX_LOCAL_STATS,
    METHOD_SVD_INIT,
    METHOD_SVD_V_STEP,
    METHOD_SVD_U_STEP,
    METHOD_SVD_FINALIZE,
)

# Response-only pseudo-methods for the non-execute endpoints.
RESPONSE_METHODS = EXECUTE_METHODS + ("Upload", "Withdraw", "LogQuery")


@dataclass(frozen=True)
class UploadComputation:
    definition: dict
    data_name: str
    data_kind: str  # "survival" or "matrix"
    data_csv: str


@dataclass(frozen=True)
class ExecuteRequest:
    defn_id: str
    method: str
    params: dict


@dataclass(frozen=True)
class ExecuteResponse:
    defn_id: str
    method: str
    result: dict


@dataclass(frozen=True)
class ErrorResponse:
    defn_id: str
    code: str
    message: str
    details: dict = field(default_factory=dict)


WireMessage = Union[UploadComputation, ExecuteRequest, ExecuteResponse, ErrorResponse]


def encode(msg: WireMessage) -> bytes:
    """Canonical JSON bytes for a wire message."""
    if isinstance(msg, UploadComputation):
        body = {
            "kind": KIND_UPLOAD,
            "definition": msg.definition,
            "dataName": msg.data_name,
            "dataKind": msg.data_kind,
            "dataCsv": msg.data_csv,
        }
    elif isinstance(msg, ExecuteRequest):
        body = {
            "kind": KIND_EXECUTE_REQUEST,
            "defnId": msg.defn_id,
            "method": msg.method,
            "params": msg.params,
        }
    elif isinstance(msg, ExecuteResponse):
        body = {
            "kind": KIND_EXECUTE_RESPONSE,
            "defnId": msg.defn_id,
            "method": msg.method,
            "result": msg.result,
        }
    elif isinstance(msg, ErrorResponse):
        body = {
            "kind": KIND_ERROR,
            "defnId": msg.defn_id,
            "code": msg.code,
            "message": msg.message,
        }
        if msg.details:
            body["details"] = msg.details
    else:
        raise SchemaViolationError(f"not a wire message: {type(msg).__name__}", "/")
    body["protocolVersion"] = PROTOCOL_VERSION
    return json.dumps(
        body, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")


def _require(obj: dict, key: str, types, pointer: str):
    if key not in obj:
        raise SchemaViolationError(f"missing field '{key}'", f"{pointer}/{key}")
    value = obj[key]
    if not isinstance(value, types):
        raise SchemaViolationError(
            f"field '{key}' has type {type(value).__name__}", f"{pointer}/{key}"
        )
    return value


def decode(data: bytes) -> WireMessage:
    """Parse and schema-check canonical message bytes."""
    try:
        obj = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaViolationError(f"not valid JSON: {exc}", "/") from exc
    if not isinstance(obj, dict):
        raise SchemaViolationError("message must be a JSON object", "/")

    version = _require(obj, "protocolVersion", int, "")
    if version != PROTOCOL_VERSION:
        raise ProtocolVersionError(
            f"unsupported protocolVersion {version}", "/protocolVersion"
        )
    kind = _require(obj, "kind", str, "")

    if kind == KIND_UPLOAD:
        return UploadComputation(
            definition=_require(obj, "definition", dict, ""),
            data_name=_require(obj, "dataName", str, ""),
            data_kind=_require(obj, "dataKind", str, ""),
            data_csv=_require(obj, "dataCsv", str, ""),
        )
    if kind == KIND_EXECUTE_REQUEST:
        method = _require(obj, "method", str, "")
        if method not in EXECUTE_METHODS:
            raise SchemaViolationError(f"unknown method '{method}'", "/method")
        return ExecuteRequest(
            defn_id=_require(obj, "defnId", str, ""),
            method=method,
            params=_require(obj, "params", dict, ""),
        )
    if kind == KIND_EXECUTE_RESPONSE:
        method = _require(obj, "method", str, "")
        if method not in RESPONSE_METHODS:
            raise SchemaViolationError(f"unknown method '{method}'", "/method")
        return ExecuteResponse(
            defn_id=_require(obj, "defnId", str, ""),
            method=method,
            result=_require(obj, "result", dict, ""),
        )
    if kind == KIND_ERROR:
        details = obj.get("details", {})
        if not isinstance(details, dict):
            raise SchemaViolationError("field 'details' has wrong type", "/details")
        return ErrorResponse(
            defn_id=_require(obj, "defnId", str, ""),
            code=_require(obj, "code", str, ""),
            message=_require(obj, "message", str, ""),
            details=details,
        )
    raise SchemaViolationError(f"unknown kind '{kind}'", "/kind")


TO_SITE = "to_site"
FROM_SITE = "from_site"


@dataclass(frozen=True)
class TranscriptEntry:
    direction: str
    site: str
    timestamp: float
    n_bytes: int
    message: WireMessage


class Transcript:
    """Append-only record of every message a run sent or received."""

    def __init__(self):
        self._entries: list[TranscriptEntry] = []
        self._lock = _threading.Lock()

    def record(self, direction: str, site: str, data: bytes) -> None:
        entry = TranscriptEntry(
            direction=direction,
            site=site,
            timestamp=_time.time(),
            n_bytes=len(data),
            message=decode(data),
        )
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> tuple[TranscriptEntry, ...]:
        return tuple(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)


# Field names that would indicate raw per-subject data in a payload.
RAW_DATA_FIELD_NAMES = frozenset(
    {
        "time", "times", "event", "events", "status", "covariates", "x",
        "matrix", "data", "dataCsv", "records", "rows", "subjects",
    }
)


def _walk(value, path: str) -> Iterable[tuple[str, object]]:
    yield path, value
    if isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(item, f"{path}/{key}")
    elif isinstance(value, list):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}/{i}")


def _numeric_array_len(value) -> int:
    """Total count of numbers in a (possibly nested) list, else 0."""
    if not isinstance(value, list):
        return 0
    total = 0
    for item in value:
        if isinstance(item, bool):
            return 0
        if isinstance(item, (int, float)):
            total += 1
        elif isinstance(item, list):
            inner = _numeric_array_len(item)
            if inner == 0:
                return 0
            total += inner
        else:
            return 0
    return total


def transcript_assert_private(transcript: Transcript, p: int) -> bool:
    """True iff nothing site-shaped ever flowed from a slave to the master.

    Checks every slave-to-master payload: no numeric array longer than
    max(p, p^2), and no field named like a raw data column. The one-time
    site row count n_j is fine because it is a scalar.
    """
    limit = max(p, p * p)
    for entry in transcript:
        if entry.direction != FROM_SITE:
            continue
        msg = entry.message
        if isinstance(msg, ExecuteResponse):
            payload = msg.result
        elif isinstance(msg, ErrorResponse):
            payload = {"message": msg.message, **msg.details}
        else:
            payload = {}
        for path, value in _walk(payload, ""):
            key = path.rsplit("/", 1)[-1]
            if key in RAW_DATA_FIELD_NAMES:
                return False
            # Nested arrays count in total, so a p x p matrix is p^2 numbers.
            if isinstance(value, list) and _numeric_array_len(value) > limit:
                return False
    return True
