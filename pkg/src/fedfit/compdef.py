"""Computation definitions, the survival-formula parser, and dataset ingestion.

A computation definition ("compdef") is the shareable artifact that names a
computation: a random 128-bit identifier, the computation type, and for Cox
models the survival formula. It never contains subject-level data, so it can
be passed freely between collaborators. Definitions persist as canonical
JSON -- sorted keys, no insignificant whitespace, one trailing newline -- so
identical definitions are byte-identical files.
"""

from __future__ import annotations

import csv
import json
import re
import secrets
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import cox, linalg
from .cox import FitOptions, SurvivalDataset
from .errors import (
    DataFormatError,
    FormulaError,
    NumericError,
    ValidationError,
)

SCHEMA_VERSION = 1

COX_MODEL = "StratifiedCoxModel"
RANK_K_SVD = "RankKSVD"

_DISPLAY_NAMES = {
    COX_MODEL: "Stratified Cox Model",
    RANK_K_SVD: "Rank K SVD",
}

_NAME_RE = re.compile(r"[A-Za-z][A-Za-z0-9._]*")
_MISSING_TOKENS = {"", "NA", "N/A", "NaN", "nan", "na"}
_TRUE_TOKENS = {"TRUE", "True", "true", "T"}
_FALSE_TOKENS = {"FALSE", "False", "false", "F"}


def available_computations() -> list[tuple[str, str]]:
    """The supported computation types with their display names."""
    return [(COX_MODEL, _DISPLAY_NAMES[COX_MODEL]), (RANK_K_SVD, _DISPLAY_NAMES[RANK_K_SVD])]


def new_computation_id() -> str:
    """Fresh 128-bit identifier as 32 lowercase hex characters."""
    return secrets.token_hex(16)


@dataclass(frozen=True)
class ModelFormula:
    """Parsed survival formula: Surv(time, event) ~ covariates.

    strata(...) terms are accepted for fidelity with existing model code and
    then dropped: in this framework the site membership is the stratum.
    """

    time_var: str
    event_var: str
    covariates: tuple[str, ...]
    source_text: str = field(compare=False, default="")

    def render(self) -> str:
        return (
            f"Surv({self.time_var}, {self.event_var}) ~ "
            + " + ".join(self.covariates)
        )


class _Tokenizer:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip_ws(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def peek(self) -> str:
        self.skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        self.skip_ws()
        if self.pos >= len(self.text) or self.text[self.pos] != ch:
            raise FormulaError(f"expected '{ch}'", offset=self.pos)
        self.pos += 1

    def name(self) -> str:
        self.skip_ws()
        m = _NAME_RE.match(self.text, self.pos)
        if not m:
            raise FormulaError("expected an identifier", offset=self.pos)
        self.pos = m.end()
        return m.group(0)

    def at_end(self) -> bool:
        self.skip_ws()
        return self.pos >= len(self.text)


def parse_formula(text: str) -> ModelFormula:
    """Parse ``Surv(time, event) ~ term (+ term)*``.

    Terms are covariate names or ``strata(name)``; strata terms are recorded
    during parsing and then discarded. Duplicate covariates and reuse of the
    time/event names are rejected.
    """
    tok = _Tokenizer(text)
    head = tok.name()
    if head != "Surv":
        raise FormulaError("formula must start with Surv(...)", offset=0)
    tok.expect("(")
    time_var = tok.name()
    tok.expect(",")
    event_var = tok.name()
    tok.expect(")")
    tok.expect("~")

    covariates: list[str] = []
    strata: list[str] = []
    while True:
        tok.skip_ws()
        offset = tok.pos
        term = tok.name()
        if term == "strata":
            tok.expect("(")
            strata.append(tok.name())
            tok.expect(")")
        else:
            if term in covariates:
                raise FormulaError(f"duplicate term '{term}'", offset=offset)
            if term in (time_var, event_var):
                raise FormulaError(
                    f"'{term}' is already the time or event variable", offset=offset
                )
            covariates.append(term)
        if tok.at_end():
            break
        tok.expect("+")

    if time_var == event_var:
        raise FormulaError("time and event variables must differ", offset=0)
    if not covariates:
        raise FormulaError("formula needs at least one covariate", offset=len(text))
    return ModelFormula(
        time_var=time_var,
        event_var=event_var,
        covariates=tuple(covariates),
        source_text=text,
    )


@dataclass(frozen=True)
class ComputationDefinition:
    id: str
    comp_type: str
    formula: ModelFormula | None
    name: str = ""
    title: str = ""
    created_at: str = ""

    def __post_init__(self):
        if not re.fullmatch(r"[0-9a-f]{32}", self.id):
            raise ValidationError("id must be 32 lowercase hex characters")
        if self.comp_type not in _DISPLAY_NAMES:
            raise ValidationError(f"unknown computation type '{self.comp_type}'")
        if (self.comp_type == COX_MODEL) != (self.formula is not None):
            raise ValidationError(
                "a formula is required for Cox definitions and forbidden otherwise"
            )
        if not self.created_at:
            object.__setattr__(
                self,
                "created_at",
                datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
            )

    def to_json_dict(self) -> dict:
        return {
            "schemaVersion": SCHEMA_VERSION,
            "id": self.id,
            "compType": self.comp_type,
            "formula": self.formula.render() if self.formula else None,
            "name": self.name,
            "title": self.title,
            "createdAt": self.created_at,
        }

    def canonical_bytes(self) -> bytes:
        return canonical_json(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ComputationDefinition":
        if not isinstance(obj, dict):
            raise ValidationError("definition must be a JSON object")
        if obj.get("schemaVersion") != SCHEMA_VERSION:
            raise ValidationError(
                f"unsupported definition schemaVersion {obj.get('schemaVersion')!r}"
            )
        formula_text = obj.get("formula")
        formula = parse_formula(formula_text) if formula_text else None
        return cls(
            id=obj.get("id", ""),
            comp_type=obj.get("compType", ""),
            formula=formula,
            name=obj.get("name", ""),
            title=obj.get("title", ""),
            created_at=obj.get("createdAt", ""),
        )


def canonical_json(obj) -> bytes:
    """Canonical JSON bytes: sorted keys, compact, UTF-8, one LF at the end."""
    return (
        json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                   allow_nan=False) + "\n"
    ).encode("utf-8")


def write_compdef(defn: ComputationDefinition, path: str | Path) -> None:
    Path(path).write_bytes(defn.canonical_bytes())


def read_compdef(path: str | Path) -> ComputationDefinition:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"not a JSON definition file: {exc}") from exc
    return ComputationDefinition.from_json_dict(obj)


@dataclass(frozen=True)
class CsvLoadResult:
    dataset: SurvivalDataset
    n_used: int
    n_dropped_missing: int


def _parse_cell(raw: str, row: int, col: str) -> float | None:
    """None for a missing value; otherwise a float. Booleans map to 0/1."""
    token = raw.strip()
    if token in _MISSING_TOKENS:
        return None
    if token in _TRUE_TOKENS:
        return 1.0
    if token in _FALSE_TOKENS:
        return 0.0
    try:
        return float(token)
    except ValueError:
        raise DataFormatError(
            f"non-numeric value {raw!r} in column '{col}', data row {row}; "
            "factor/categorical covariates are not supported — recode them numerically"
        ) from None


def _read_csv_rows(source) -> tuple[list[str], list[list[str]]]:
    """Header and data rows from a path or an open text stream."""
    if hasattr(source, "read"):
        reader = csv.reader(source)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("file is empty (no header row)") from None
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    else:
        with open(source, newline="", encoding="utf-8") as fh:
            return _read_csv_rows(fh)
    return [h.strip() for h in header], rows


def load_csv_survival(source, formula: ModelFormula) -> CsvLoadResult:
    """Read exactly the formula's columns from a CSV with a header row.

    ``source`` may be a path or an open text stream. Rows with any missing
    value among the selected columns are dropped and counted (complete-case
    analysis). Event values must be 0/1 or TRUE/FALSE; boolean covariates
    map onto {0, 1}.
    """
    header, rows = _read_csv_rows(source)
    wanted = [formula.time_var, formula.event_var, *formula.covariates]
    col_index: dict[str, int] = {}
    for name in wanted:
        if name not in header:
            raise DataFormatError(f"column '{name}' not found in the data file")
        col_index[name] = header.index(name)

    times: list[float] = []
    events: list[int] = []
    covs: list[list[float]] = []
    n_dropped = 0
    for r, row in enumerate(rows, start=1):
        if max(col_index.values()) >= len(row):
            raise DataFormatError(f"data row {r} has too few fields")
        values = [_parse_cell(row[col_index[name]], r, name) for name in wanted]
        if any(v is None for v in values):
            n_dropped += 1
            continue
        t, e = values[0], values[1]
        if t < 0:
            raise DataFormatError(
                f"negative time {t} in column '{formula.time_var}', data row {r}"
            )
        if e not in (0.0, 1.0):
            raise DataFormatError(
                f"event value {e} in column '{formula.event_var}', data row {r} "
                "is not 0/1"
            )
        times.append(t)
        events.append(int(e))
        covs.append(values[2:])

    if not times:
        raise DataFormatError("no usable rows after dropping missing values")
    dataset = SurvivalDataset(
        time=np.asarray(times),
        event=np.asarray(events),
        covariates=np.asarray(covs),
        covariate_names=formula.covariates,
    )
    return CsvLoadResult(dataset=dataset, n_used=len(times), n_dropped_missing=n_dropped)


def load_csv_matrix(source) -> np.ndarray:
    """Read a numeric matrix from a CSV with a header row; no missing cells."""
    header, rows = _read_csv_rows(source)
    if not rows:
        raise DataFormatError("no data rows")
    width = len(header)
    out = []
    for r, row in enumerate(rows, start=1):
        if len(row) < width:
            raise DataFormatError(f"data row {r} has too few fields")
        parsed = []
        for name, cell in zip(header, row):
            value = _parse_cell(cell, r, name)
            if value is None:
                raise DataFormatError(
                    f"missing value in column '{name}', data row {r}; "
                    "matrix data must be complete"
                )
            parsed.append(value)
        out.append(parsed)
    return linalg.matrix(np.asarray(out))


@dataclass(frozen=True)
class DatasetValidationReport:
    ok: bool
    n_used: int
    n_dropped_missing: int
    messages: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "ok": self.ok,
            "nUsed": self.n_used,
            "nDroppedMissing": self.n_dropped_missing,
            "messages": list(self.messages),
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "DatasetValidationReport":
        return cls(
            ok=bool(obj.get("ok")),
            n_used=int(obj.get("nUsed", 0)),
            n_dropped_missing=int(obj.get("nDroppedMissing", 0)),
            messages=tuple(obj.get("messages", ())),
        )


def validate_dataset(
    defn: ComputationDefinition,
    data: SurvivalDataset | np.ndarray,
    n_dropped_missing: int = 0,
) -> DatasetValidationReport:
    """Dry-run check that the definition's computation can run on this data.

    For Cox definitions this attempts an actual short fit (the process is
    not complete until a fit proceeds without error); for SVD it checks
    shape and finiteness. Failures are reported, never raised.
    """
    messages: list[str] = []
    if defn.comp_type == COX_MODEL:
        if not isinstance(data, SurvivalDataset):
            return DatasetValidationReport(
                False, 0, n_dropped_missing, ("expected survival data",)
            )
        n_used = data.n
        if data.covariate_names != defn.formula.covariates:
            messages.append("dataset columns do not match the formula")
        elif data.n_events == 0:
            messages.append("no events: every subject is censored")
        else:
            try:
                cox.cox_fit_pooled([data], FitOptions(max_iter=5, tol=1e-9))
            except NumericError as exc:
                messages.append(f"dry-run fit failed: {exc}")
            except ValidationError as exc:
                messages.append(str(exc))
        return DatasetValidationReport(
            ok=not messages,
            n_used=n_used,
            n_dropped_missing=n_dropped_missing,
            messages=tuple(messages),
        )

    if not isinstance(data, np.ndarray):
        return DatasetValidationReport(False, 0, 0, ("expected a numeric matrix",))
    if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
        messages.append("matrix must have at least one row and one column")
    elif not np.all(np.isfinite(data)):
        messages.append("matrix contains non-finite values")
    return DatasetValidationReport(
        ok=not messages,
        n_used=int(data.shape[0]) if data.ndim == 2 else 0,
        n_dropped_missing=0,
        messages=tuple(messages),
    )
