"""The master: site registry, distributed fit loops, result rendering.

The master never sees raw records. For a Cox fit it sends the current
coefficient vector to every site and aggregates the returned (loglik,
score, information) triples; for the rank-k SVD it shuttles p-vectors and
scalar norms per the alternating schedule. Requests within an iteration
fan out concurrently, but reduction order is fixed by sorted site name so
registration order can never change a result.

Transports hide whether a site is a real HTTP server or an in-process
loopback: both move canonical message bytes, and every exchange lands in
the run transcript.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Protocol
from urllib.parse import quote

import numpy as np
import requests

from . import protocol, svd
from .compdef import COX_MODEL, RANK_K_SVD, ComputationDefinition
from .cox import (
    CoxFitResult,
    CoxLocalStats,
    FitOptions,
    cox_aggregate,
    cox_fit,
    cox_summary,
)
from .errors import SiteError, ValidationError
from .protocol import (
    ErrorResponse,
    ExecuteRequest,
    ExecuteResponse,
    Transcript,
    UploadComputation,
)
from .svd import SvdResult


class SiteTransport(Protocol):
    """Byte-level request carrier for one site."""

    def upload_bytes(self, body: bytes) -> bytes: ...

    def execute_bytes(self, defn_id: str, body: bytes) -> bytes: ...

    def withdraw(self, defn_id: str) -> bytes: ...

    def query_log(self, defn_id: str, since: float | None = None,
                  until: float | None = None) -> bytes: ...


class HttpTransport:
    """Transport over the site server's HTTP surface with a bearer token."""

    def __init__(self, base_url: str, token: str, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.token = token
        self.timeout = timeout

    def _headers(self) -> dict:
        return {
            "Authorization": f"Bearer {self.token}",
            "Content-Type": "application/json",
        }

    def upload_bytes(self, body: bytes) -> bytes:
        resp = requests.post(
            f"{self.base_url}/computations",
            data=body, headers=self._headers(), timeout=self.timeout,
        )
        return resp.content

    def execute_bytes(self, defn_id: str, body: bytes) -> bytes:
        resp = requests.post(
            f"{self.base_url}/computations/{quote(defn_id)}/execute",
            data=body, headers=self._headers(), timeout=self.timeout,
        )
        return resp.content

    def withdraw(self, defn_id: str) -> bytes:
        resp = requests.delete(
            f"{self.base_url}/computations/{quote(defn_id)}",
            headers=self._headers(), timeout=self.timeout,
        )
        return resp.content

    def query_log(self, defn_id, since=None, until=None) -> bytes:
        params = {}
        if since is not None:
            params["since"] = repr(since)
        if until is not None:
            params["until"] = repr(until)
        resp = requests.get(
            f"{self.base_url}/computations/{quote(defn_id)}/log",
            params=params, headers=self._headers(), timeout=self.timeout,
        )
        return resp.content


@dataclass
class SiteHandle:
    """A registered site: display name, address, credential, data label."""

    name: str
    url: str
    token: str
    data_file_name: str = ""
    transport: SiteTransport | None = None

    def __post_init__(self):
        if self.transport is None:
            self.transport = HttpTransport(self.url, self.token)


@dataclass
class MasterOptions:
    retry_backoff: float = 2.0
    max_workers: int = 8


class Master:
    """Drives one computation definition across registered sites."""

    def __init__(self, defn: ComputationDefinition, opts: MasterOptions | None = None):
        self.defn = defn
        self.opts = opts or MasterOptions()
        self.sites: list[SiteHandle] = []
        self.transcript = Transcript()

    # -- registry -------------------------------------------------------------

    def add_site(self, handle: SiteHandle) -> None:
        """Register a site after probing it is alive and knows this defn."""
        if any(s.name == handle.name for s in self.sites):
            raise ValidationError(f"a site named '{handle.name}' is already registered")
        try:
            body = handle.transport.query_log(self.defn.id)
        except OSError as exc:
            raise SiteError(handle.name, f"unreachable: {exc}", transport=True) from exc
        msg = protocol.decode(body)
        if isinstance(msg, ErrorResponse):
            raise SiteError(
                handle.name,
                f"computation '{self.defn.id}' not registered: {msg.message}",
            )
        self.sites.append(handle)

    def _ordered_sites(self) -> list[SiteHandle]:
        return sorted(self.sites, key=lambda s: s.name)

    # -- request plumbing -------------------------------------------------------

    def _execute(self, site: SiteHandle, method: str, params: dict) -> ExecuteResponse:
        request = ExecuteRequest(defn_id=self.defn.id, method=method, params=params)
        body = protocol.encode(request)
        reply = None
        for attempt in (0, 1):
            try:
                reply = site.transport.execute_bytes(self.defn.id, body)
                break
            except OSError as exc:
                if attempt == 1:
                    raise SiteError(
                        site.name, f"transport failed: {exc}", transport=True
                    ) from exc
                time.sleep(self.opts.retry_backoff)
        self.transcript.record(protocol.TO_SITE, site.name, body)
        self.transcript.record(protocol.FROM_SITE, site.name, reply)
        msg = protocol.decode(reply)
        if isinstance(msg, ErrorResponse):
            raise SiteError(site.name, f"{msg.code}: {msg.message}")
        if not isinstance(msg, ExecuteResponse):
            raise SiteError(site.name, f"unexpected reply kind {type(msg).__name__}")
        return msg

    def _fan_out(self, method: str, params_for) -> list[ExecuteResponse]:
        """Issue one request per site concurrently; return in sorted-name order."""
        ordered = self._ordered_sites()
        if len(ordered) == 1:
            return [self._execute(ordered[0], method, params_for(ordered[0]))]
        with ThreadPoolExecutor(
            max_workers=min(self.opts.max_workers, len(ordered))
        ) as pool:
            futures = [
                pool.submit(self._execute, site, method, params_for(site))
                for site in ordered
            ]
            return [f.result() for f in futures]

    # -- Cox ---------------------------------------------------------------------

    def run_cox(self, opts: FitOptions = FitOptions()) -> CoxFitResult:
        """Distributed stratified fit; equals the pooled oracle on the same split."""
        if self.defn.comp_type != COX_MODEL:
            raise ValidationError(
                f"definition {self.defn.id} is {self.defn.comp_type}, not a Cox model"
            )
        if not self.sites:
            raise ValidationError("no sites registered")
        names = self.defn.formula.covariates
        p = len(names)

        def provider(beta: np.ndarray) -> CoxLocalStats:
            replies = self._fan_out(
                protocol.METHOD_COX_LOCAL_STATS,
                lambda site: {"beta": beta.tolist(), "ties": opts.ties},
            )
            parts = []
            for site, reply in zip(self._ordered_sites(), replies):
                result = reply.result
                try:
                    part = CoxLocalStats(
                        loglik=float(result["loglik"]),
                        score=np.asarray(result["score"], dtype=np.float64),
                        info=np.asarray(result["info"], dtype=np.float64),
                        n_events=int(result["nEvents"]),
                        n_subjects=int(result["nSubjects"]),
                    )
                except (KeyError, TypeError, ValueError) as exc:
                    raise SiteError(site.name, f"malformed stats reply: {exc}") from exc
                if part.p != p:
                    raise SiteError(
                        site.name, f"returned dimension {part.p}, expected {p}"
                    )
                parts.append(part)
            return cox_aggregate(parts)

        return cox_fit(provider, p, opts, covariate_names=names)

    # -- SVD ---------------------------------------------------------------------

    def run_svd(self, k: int, thr: float = svd.DEFAULT_THR,
                max_iter: int = svd.DEFAULT_MAX_ITER) -> SvdResult:
        """Distributed rank-k SVD over the registered sites."""
        if self.defn.comp_type != RANK_K_SVD:
            raise ValidationError(
                f"definition {self.defn.id} is {self.defn.comp_type}, not an SVD"
            )
        if not self.sites:
            raise ValidationError("no sites registered")
        adapters = [_WireSvdSite(self, site) for site in self._ordered_sites()]
        return svd.master_run_svd(adapters, k, thr=thr, max_iter=max_iter)

    # -- rendering -----------------------------------------------------------------

    def summarize(self, result: CoxFitResult | SvdResult, digits: int = 5) -> str:
        if isinstance(result, CoxFitResult):
            return cox_summary(result).render(digits=digits)
        lines = ["d:"]
        lines.append("  " + "  ".join(f"{x:.{digits}g}" for x in result.d))
        lines.append("v:")
        for row in result.v:
            lines.append("  " + "  ".join(f"{x: .{digits}g}" for x in row))
        return "\n".join(lines)


class _WireSvdSite:
    """Adapter mapping the SVD site-ops interface onto wire requests."""

    def __init__(self, master: Master, site: SiteHandle):
        self._master = master
        self._site = site
        self.name = site.name

    def _call(self, method: str, params: dict) -> dict:
        return self._master._execute(self._site, method, params).result

    def init(self) -> tuple[int, int]:
        result = self._call(protocol.METHOD_SVD_INIT, {})
        return int(result["n"]), int(result["p"])

    def v_step(self, u_norm: float) -> np.ndarray:
        result = self._call(protocol.METHOD_SVD_V_STEP, {"uNorm": u_norm})
        return np.asarray(result["v"], dtype=np.float64)

    def u_step(self, v: np.ndarray) -> float:
        result = self._call(protocol.METHOD_SVD_U_STEP, {"v": v.tolist()})
        return float(result["uNormSq"])

    def finalize_component(self, u_norm: float, v: np.ndarray, d: float) -> None:
        self._call(
            protocol.METHOD_SVD_FINALIZE,
            {"uNorm": u_norm, "v": v.tolist(), "d": d},
        )


def upload_computation(
    transport: SiteTransport,
    defn: ComputationDefinition,
    data_csv: str,
    data_name: str,
) -> ExecuteResponse:
    """Send a definition plus site data to a site; returns the ack.

    Raises SiteError carrying the site's error code on rejection.
    """
    msg = UploadComputation(
        definition=defn.to_json_dict(),
        data_name=data_name,
        data_kind="survival" if defn.comp_type == COX_MODEL else "matrix",
        data_csv=data_csv,
    )
    try:
        reply = transport.upload_bytes(protocol.encode(msg))
    except OSError as exc:
        raise SiteError(data_name or "site", f"unreachable: {exc}", transport=True) from exc
    decoded = protocol.decode(reply)
    if isinstance(decoded, ErrorResponse):
        err = SiteError(data_name or "site", f"{decoded.code}: {decoded.message}")
        err.code = decoded.code
        err.details = decoded.details
        raise err
    return decoded
