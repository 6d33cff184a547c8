"""The site (slave) server: private data, gated computation, full logging.

A site holds its data in a workspace on disk and answers only requests for
computations that were explicitly registered with it. Knowing a computation
identifier is not enough: the requesting peer must also be the one the
computation was registered by, which closes the shared-server loophole
where one collaborator could drive a computation set up by another.

Every request -- including denials -- produces exactly one line in an
append-only JSON-lines request log.

Workspace layout::

    workspace/
      defn/<id>/definition.json   canonical shared definition
      defn/<id>/data.csv          the original upload
      defn/<id>/data.npz          re-encoded columns for fast stats passes
      defn/<id>/site.json         site-local registration metadata
      instances/<id>.json         persisted per-computation iteration state
"""

from __future__ import annotations

import configparser
import io
import json
import os
import shutil
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import compdef as compdef_mod
from . import protocol, svd
from .compdef import (
    COX_MODEL,
    RANK_K_SVD,
    ComputationDefinition,
    DatasetValidationReport,
    canonical_json,
    load_csv_matrix,
    load_csv_survival,
    validate_dataset,
)
from .cox import SurvivalDataset, cox_local_stats
from .errors import (
    ComputationNotFoundError,
    ConfigError,
    ConflictError,
    FedfitError,
    IllegalMethodError,
    NotAuthorizedError,
    SchemaViolationError,
    UnauthorizedError,
    ValidationError,
)

DATA_KIND_FOR_TYPE = {COX_MODEL: "survival", RANK_K_SVD: "matrix"}


@dataclass(frozen=True)
class SiteConfig:
    listen: str
    workspace: Path
    log_path: Path
    tokens: dict[str, str]  # token -> peer name
    operators: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if not self.tokens:
            raise ConfigError("allowlist is empty: at least one peer token is required")
        object.__setattr__(self, "workspace", Path(self.workspace))
        object.__setattr__(self, "log_path", Path(self.log_path))

    @property
    def host(self) -> str:
        return self.listen.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        try:
            return int(self.listen.rsplit(":", 1)[1])
        except (IndexError, ValueError):
            raise ConfigError(f"listen address '{self.listen}' is not host:port") from None


def load_config(path: str | Path) -> SiteConfig:
    """Read an INI config file, applying FEDFIT_* environment overrides.

    Sections: [site] with listen/workspace/log, [peers] mapping peer name to
    token, optional [operators] with a comma-separated names list.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    site = parser["site"] if parser.has_section("site") else {}
    listen = os.environ.get("FEDFIT_LISTEN", site.get("listen", "127.0.0.1:8461"))
    workspace = os.environ.get("FEDFIT_WORKSPACE", site.get("workspace", ""))
    log_path = os.environ.get("FEDFIT_LOG", site.get("log", ""))
    if not workspace:
        raise ConfigError("no workspace configured")
    if not log_path:
        log_path = str(Path(workspace) / "requests.log")

    tokens: dict[str, str] = {}
    if parser.has_section("peers"):
        for peer, token in parser["peers"].items():
            tokens[token] = peer
    env_peers = os.environ.get("FEDFIT_PEERS", "")
    for item in filter(None, (s.strip() for s in env_peers.split(","))):
        peer, _, token = item.partition("=")
        if not token:
            raise ConfigError(f"FEDFIT_PEERS entry '{item}' is not name=token")
        tokens[token] = peer

    operators: set[str] = set()
    if parser.has_section("operators"):
        names = parser["operators"].get("names", "")
        operators.update(filter(None, (s.strip() for s in names.split(","))))
    env_ops = os.environ.get("FEDFIT_OPERATORS", "")
    operators.update(filter(None, (s.strip() for s in env_ops.split(","))))

    return SiteConfig(
        listen=listen,
        workspace=Path(workspace),
        log_path=Path(log_path),
        tokens=tokens,
        operators=frozenset(operators),
    )


class Workspace:
    """On-disk area for definitions, data, and persisted iteration state."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        (self.root / "defn").mkdir(parents=True, exist_ok=True)
        (self.root / "instances").mkdir(parents=True, exist_ok=True)

    def defn_dir(self, defn_id: str) -> Path:
        return self.root / "defn" / defn_id

    def instance_path(self, defn_id: str) -> Path:
        return self.root / "instances" / f"{defn_id}.json"

    def has(self, defn_id: str) -> bool:
        return (self.defn_dir(defn_id) / "definition.json").exists()

    def list_ids(self) -> list[str]:
        return sorted(p.name for p in (self.root / "defn").iterdir() if p.is_dir())

    def store(self, defn: ComputationDefinition, data_csv: str, meta: dict,
              arrays: dict[str, np.ndarray]) -> None:
        d = self.defn_dir(defn.id)
        d.mkdir(parents=True, exist_ok=True)
        (d / "definition.json").write_bytes(defn.canonical_bytes())
        (d / "data.csv").write_text(data_csv, encoding="utf-8")
        (d / "site.json").write_bytes(canonical_json(meta))
        with open(d / "data.npz", "wb") as fh:
            np.savez(fh, **arrays)

    def load_defn(self, defn_id: str) -> ComputationDefinition:
        path = self.defn_dir(defn_id) / "definition.json"
        if not path.exists():
            raise ComputationNotFoundError(f"no computation '{defn_id}' at this site")
        return compdef_mod.read_compdef(path)

    def load_meta(self, defn_id: str) -> dict:
        return json.loads(
            (self.defn_dir(defn_id) / "site.json").read_text(encoding="utf-8")
        )

    def load_arrays(self, defn_id: str) -> dict[str, np.ndarray]:
        with np.load(self.defn_dir(defn_id) / "data.npz", allow_pickle=False) as npz:
            return {k: npz[k] for k in npz.files}

    def stored_upload_bytes(self, defn_id: str) -> tuple[bytes, bytes]:
        d = self.defn_dir(defn_id)
        return (d / "definition.json").read_bytes(), (d / "data.csv").read_bytes()

    def store_instance(self, defn_id: str, state: dict) -> None:
        payload = {"defnId": defn_id, "state": state, "lastModified": time.time()}
        path = self.instance_path(defn_id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_bytes(canonical_json(payload))
        tmp.replace(path)

    def load_instance(self, defn_id: str) -> dict | None:
        path = self.instance_path(defn_id)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["state"]

    def remove(self, defn_id: str) -> None:
        if not self.has(defn_id):
            raise ComputationNotFoundError(f"no computation '{defn_id}' at this site")
        shutil.rmtree(self.defn_dir(defn_id))
        self.instance_path(defn_id).unlink(missing_ok=True)


class RequestLog:
    """Append-only JSON-lines log; one line per request, denials included."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def append(self, peer: str, defn_id: str, method: str, outcome: str,
               duration_ms: float) -> None:
        entry = {
            "ts": time.time(),
            "peer": peer,
            "defnId": defn_id,
            "method": method,
            "outcome": outcome,
            "durationMs": round(duration_ms, 3),
        }
        line = json.dumps(entry, sort_keys=True, separators=(",", ":")) + "\n"
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)

    def query(self, defn_id: str | None = None, since: float | None = None,
              until: float | None = None) -> list[dict]:
        if not self.path.exists():
            return []
        out = []
        with self._lock:
            lines = self.path.read_text(encoding="utf-8").splitlines()
        for line in lines:
            if not line.strip():
                continue
            entry = json.loads(line)
            if defn_id is not None and entry.get("defnId") != defn_id:
                continue
            if since is not None and entry["ts"] < since:
                continue
            if until is not None and entry["ts"] > until:
                continue
            out.append(entry)
        return out


class SiteCore:
    """Transport-independent request handling for one site.

    All public ``handle_*`` methods take raw message bytes (or route
    parameters) and return raw response bytes, so the HTTP server and the
    in-process loopback transport exercise exactly the same code path.
    """

    def __init__(self, config: SiteConfig):
        self.config = config
        self.workspace = Workspace(config.workspace)
        self.log = RequestLog(config.log_path)
        self._dataset_cache: dict[str, object] = {}
        self._svd_states: dict[str, svd.SvdSlaveState] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._locks_guard = threading.Lock()

    # -- plumbing -----------------------------------------------------------

    def _lock_for(self, defn_id: str) -> threading.Lock:
        with self._locks_guard:
            return self._locks.setdefault(defn_id, threading.Lock())

    def _authenticate(self, token: str | None) -> str:
        if not token or token not in self.config.tokens:
            raise UnauthorizedError("unknown or missing peer token")
        return self.config.tokens[token]

    def _authorize(self, peer: str, defn_id: str) -> None:
        if not self.workspace.has(defn_id):
            raise ComputationNotFoundError(f"no computation '{defn_id}' at this site")
        meta = self.workspace.load_meta(defn_id)
        if meta.get("uploadedBy") != peer:
            raise NotAuthorizedError(
                f"peer '{peer}' is not authorized for computation '{defn_id}'"
            )

    def _error_bytes(self, defn_id: str, exc: Exception) -> bytes:
        code = getattr(exc, "code", "internal")
        details = {}
        report = getattr(exc, "report", None)
        if report is not None:
            details["report"] = report
        return protocol.encode(
            protocol.ErrorResponse(
                defn_id=defn_id, code=code, message=str(exc), details=details
            )
        )

    def _handle(self, token, fallback_defn_id, method_name, fn) -> bytes:
        """Authenticate, run, log exactly one line, encode errors."""
        started = time.monotonic()
        peer = "unknown"
        defn_id = fallback_defn_id or ""
        outcome = "ok"
        try:
            peer = self._authenticate(token)
            result_bytes, defn_id, method_name = fn(peer)
            return result_bytes
        except FedfitError as exc:
            if isinstance(exc, _RequestContextError):
                defn_id, method_name, exc = exc.defn_id, exc.method, exc.cause
            outcome = (
                "denied"
                if isinstance(exc, (UnauthorizedError, NotAuthorizedError))
                else getattr(exc, "code", "error")
            )
            return self._error_bytes(defn_id, exc)
        except Exception as exc:  # never let a request escape unlogged
            outcome = "internal"
            return self._error_bytes(defn_id, exc)
        finally:
            self.log.append(
                peer, defn_id, method_name, outcome,
                (time.monotonic() - started) * 1000.0,
            )

    # -- upload -------------------------------------------------------------

    def handle_upload(self, token: str | None, body: bytes) -> bytes:
        def run(peer: str):
            msg = protocol.decode(body)
            if not isinstance(msg, protocol.UploadComputation):
                raise SchemaViolationError("expected UploadComputation", "/kind")
            defn = ComputationDefinition.from_json_dict(msg.definition)
            try:
                ack = self._upload(peer, defn, msg)
            except FedfitError as exc:
                raise _RequestContextError(defn.id, "Upload", exc)
            return ack, defn.id, "Upload"

        return self._handle(token, "", "Upload", run)

    def _upload(self, peer: str, defn: ComputationDefinition,
                msg: protocol.UploadComputation) -> bytes:
        expected_kind = DATA_KIND_FOR_TYPE[defn.comp_type]
        if msg.data_kind != expected_kind:
            raise ValidationError(
                f"computation type {defn.comp_type} needs dataKind '{expected_kind}'"
            )
        with self._lock_for(defn.id):
            if self.workspace.has(defn.id):
                stored_defn, stored_csv = self.workspace.stored_upload_bytes(defn.id)
                meta = self.workspace.load_meta(defn.id)
                same = (
                    stored_defn == defn.canonical_bytes()
                    and stored_csv == msg.data_csv.encode("utf-8")
                    and meta.get("dataName") == msg.data_name
                    and meta.get("uploadedBy") == peer
                )
                if not same:
                    raise ConflictError(
                        f"computation '{defn.id}' already registered with different content"
                    )
                report = DatasetValidationReport.from_json_dict(meta["report"])
            else:
                report, arrays = self._validate_upload(defn, msg)
                if not report.ok:
                    exc = ValidationError(
                        "dataset failed validation: " + "; ".join(report.messages)
                    )
                    exc.report = report.to_json_dict()
                    raise exc
                meta = {
                    "uploadedBy": peer,
                    "dataName": msg.data_name,
                    "dataKind": msg.data_kind,
                    "report": report.to_json_dict(),
                }
                self.workspace.store(defn, msg.data_csv, meta, arrays)
        return protocol.encode(
            protocol.ExecuteResponse(
                defn_id=defn.id,
                method="Upload",
                result={"ok": True, "report": report.to_json_dict()},
            )
        )

    def _validate_upload(self, defn, msg):
        if defn.comp_type == COX_MODEL:
            loaded = load_csv_survival(io.StringIO(msg.data_csv), defn.formula)
            report = validate_dataset(defn, loaded.dataset, loaded.n_dropped_missing)
            ds = loaded.dataset
            arrays = {
                "time": ds.time,
                "event": ds.event.astype(np.int64),
                "covariates": ds.covariates,
                "names": np.array(ds.covariate_names),
            }
        else:
            mat = load_csv_matrix(io.StringIO(msg.data_csv))
            report = validate_dataset(defn, mat)
            arrays = {"matrix": mat}
        return report, arrays

    # -- execute ------------------------------------------------------------

    def handle_execute(self, token: str | None, body: bytes,
                       route_defn_id: str | None = None) -> bytes:
        def run(peer: str):
            msg = protocol.decode(body)
            if not isinstance(msg, protocol.ExecuteRequest):
                raise SchemaViolationError("expected ExecuteRequest", "/kind")
            if route_defn_id is not None and route_defn_id != msg.defn_id:
                raise _RequestContextError(
                    msg.defn_id,
                    msg.method,
                    SchemaViolationError(
                        "request defnId does not match the URL", "/defnId"
                    ),
                )
            try:
                response = self._execute(peer, msg)
            except FedfitError as exc:
                raise _RequestContextError(msg.defn_id, msg.method, exc)
            return response, msg.defn_id, msg.method

        return self._handle(token, route_defn_id, "Execute", run)

    def _execute(self, peer: str, msg: protocol.ExecuteRequest) -> bytes:
        self._authorize(peer, msg.defn_id)
        defn = self.workspace.load_defn(msg.defn_id)
        legal = (
            (protocol.METHOD_COX_LOCAL_STATS,)
            if defn.comp_type == COX_MODEL
            else protocol.EXECUTE_METHODS[1:]
        )
        if msg.method not in legal:
            raise IllegalMethodError(
                f"method {msg.method} is not part of a {defn.comp_type} computation"
            )
        with self._lock_for(msg.defn_id):
            if defn.comp_type == COX_MODEL:
                result = self._cox_stats(msg.defn_id, msg.params)
            else:
                result = self._svd_step(msg.defn_id, msg.method, msg.params)
        return protocol.encode(
            protocol.ExecuteResponse(
                defn_id=msg.defn_id, method=msg.method, result=result
            )
        )

    def _survival_data(self, defn_id: str) -> SurvivalDataset:
        cached = self._dataset_cache.get(defn_id)
        if cached is None:
            arrays = self.workspace.load_arrays(defn_id)
            cached = SurvivalDataset(
                time=arrays["time"],
                event=arrays["event"],
                covariates=arrays["covariates"],
                covariate_names=tuple(str(n) for n in arrays["names"]),
            )
            self._dataset_cache[defn_id] = cached
        return cached

    def _matrix_data(self, defn_id: str) -> np.ndarray:
        cached = self._dataset_cache.get(defn_id)
        if cached is None:
            cached = self.workspace.load_arrays(defn_id)["matrix"]
            self._dataset_cache[defn_id] = cached
        return cached

    def _cox_stats(self, defn_id: str, params: dict) -> dict:
        if "beta" not in params:
            raise SchemaViolationError("missing field 'beta'", "/params/beta")
        ties = params.get("ties", "efron")
        data = self._survival_data(defn_id)
        stats = cox_local_stats(data, np.asarray(params["beta"], dtype=np.float64), ties)
        return {
            "loglik": stats.loglik,
            "score": stats.score.tolist(),
            "info": stats.info.tolist(),
            "nEvents": stats.n_events,
            "nSubjects": stats.n_subjects,
        }

    def _svd_state(self, defn_id: str) -> svd.SvdSlaveState:
        state = self._svd_states.get(defn_id)
        if state is None:
            state = svd.SvdSlaveState(self._matrix_data(defn_id))
            persisted = self.workspace.load_instance(defn_id)
            if persisted is not None:
                state.restore_state_dict(persisted)
            self._svd_states[defn_id] = state
        return state

    def _svd_step(self, defn_id: str, method: str, params: dict) -> dict:
        def need(key, types):
            if key not in params or not isinstance(params[key], types):
                raise SchemaViolationError(
                    f"missing or mistyped param '{key}'", f"/params/{key}"
                )
            return params[key]

        state = self._svd_state(defn_id)
        if method == protocol.METHOD_SVD_INIT:
            state.reset()
            result = {"n": state.n, "p": state.p}
        elif method == protocol.METHOD_SVD_V_STEP:
            v = svd.slave_v_step(state, float(need("uNorm", (int, float))))
            result = {"v": v.tolist()}
        elif method == protocol.METHOD_SVD_U_STEP:
            norm_sq = svd.slave_u_step(
                state, np.asarray(need("v", list), dtype=np.float64)
            )
            result = {"uNormSq": norm_sq}
        else:
            svd.slave_finalize_component(
                state,
                float(need("uNorm", (int, float))),
                np.asarray(need("v", list), dtype=np.float64),
                float(need("d", (int, float))),
            )
            result = {"ok": True}
        # Persist before replying so a crash never loses acknowledged state.
        self.workspace.store_instance(defn_id, state.to_state_dict())
        return result

    # -- withdraw and log query ----------------------------------------------

    def handle_withdraw(self, token: str | None, defn_id: str) -> bytes:
        def run(peer: str):
            try:
                if not self.workspace.has(defn_id):
                    raise ComputationNotFoundError(
                        f"no computation '{defn_id}' at this site"
                    )
                meta = self.workspace.load_meta(defn_id)
                if peer not in self.config.operators and meta.get("uploadedBy") != peer:
                    raise NotAuthorizedError(
                        f"peer '{peer}' may not withdraw computation '{defn_id}'"
                    )
                with self._lock_for(defn_id):
                    self.workspace.remove(defn_id)
                    self._dataset_cache.pop(defn_id, None)
                    self._svd_states.pop(defn_id, None)
            except FedfitError as exc:
                raise _RequestContextError(defn_id, "Withdraw", exc)
            response = protocol.encode(
                protocol.ExecuteResponse(
                    defn_id=defn_id, method="Withdraw", result={"ok": True}
                )
            )
            return response, defn_id, "Withdraw"

        return self._handle(token, defn_id, "Withdraw", run)

    def handle_log_query(self, token: str | None, defn_id: str,
                         since: float | None = None,
                         until: float | None = None) -> bytes:
        def run(peer: str):
            try:
                self._authorize(peer, defn_id)
            except FedfitError as exc:
                raise _RequestContextError(defn_id, "LogQuery", exc)
            entries = self.log.query(defn_id=defn_id, since=since, until=until)
            response = protocol.encode(
                protocol.ExecuteResponse(
                    defn_id=defn_id, method="LogQuery", result={"entries": entries}
                )
            )
            return response, defn_id, "LogQuery"

        return self._handle(token, defn_id, "LogQuery", run)


class _RequestContextError(FedfitError):
    """Internal: carries defnId/method context out to the logging wrapper."""

    def __init__(self, defn_id: str, method: str, cause: FedfitError):
        super().__init__(str(cause))
        self.defn_id = defn_id
        self.method = method
        self.cause = cause


_HTTP_STATUS = {
    "unauthenticated": 401,
    "not-authorized": 403,
    "not-found": 404,
    "conflict": 409,
    "validation": 400,
    "schema": 400,
    "protocol-version": 400,
    "bad-request": 400,
    "illegal-method": 400,
    "invalid-rank": 400,
    "numeric": 500,
    "degenerate": 500,
    "internal": 500,
}


def _status_for(body: bytes) -> int:
    try:
        msg = protocol.decode(body)
    except FedfitError:
        return 500
    if isinstance(msg, protocol.ErrorResponse):
        return _HTTP_STATUS.get(msg.code, 500)
    return 200


class _SiteHandler(BaseHTTPRequestHandler):
    server_version = "fedfit-site/1"
    core: SiteCore  # set by the server factory

    def log_message(self, *args):  # request logging goes to the JSONL log
        pass

    def _token(self) -> str | None:
        auth = self.headers.get("Authorization", "")
        return auth[len("Bearer "):] if auth.startswith("Bearer ") else None

    def _reply(self, body: bytes) -> None:
        status = _status_for(body)
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length", 0))
        return self.rfile.read(length) if length else b""

    def do_POST(self):
        parts = urlparse(self.path).path.strip("/").split("/")
        if parts == ["computations"]:
            self._reply(self.core.handle_upload(self._token(), self._body()))
        elif len(parts) == 3 and parts[0] == "computations" and parts[2] == "execute":
            self._reply(
                self.core.handle_execute(self._token(), self._body(), parts[1])
            )
        else:
            self._reply(_not_found_bytes(self.path))

    def do_DELETE(self):
        parts = urlparse(self.path).path.strip("/").split("/")
        if len(parts) == 2 and parts[0] == "computations":
            self._reply(self.core.handle_withdraw(self._token(), parts[1]))
        else:
            self._reply(_not_found_bytes(self.path))

    def do_GET(self):
        url = urlparse(self.path)
        parts = url.path.strip("/").split("/")
        if len(parts) == 3 and parts[0] == "computations" and parts[2] == "log":
            query = parse_qs(url.query)

            def qfloat(key):
                return float(query[key][0]) if key in query else None

            self._reply(
                self.core.handle_log_query(
                    self._token(), parts[1], qfloat("since"), qfloat("until")
                )
            )
        else:
            self._reply(_not_found_bytes(self.path))


def _not_found_bytes(path: str) -> bytes:
    return protocol.encode(
        protocol.ErrorResponse(
            defn_id="", code="not-found", message=f"no such endpoint: {path}"
        )
    )


class SiteServer:
    """HTTP front end over a SiteCore; start/stop is thread-based."""

    def __init__(self, config: SiteConfig, core: SiteCore | None = None):
        self.core = core if core is not None else SiteCore(config)
        handler = type("Handler", (_SiteHandler,), {"core": self.core})
        try:
            self._httpd = ThreadingHTTPServer((config.host, config.port), handler)
        except OSError as exc:
            raise ConfigError(f"cannot bind {config.listen}: {exc}") from exc
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self._httpd.server_address[1]

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> None:
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def serve_forever(self) -> None:
        self._httpd.serve_forever()
