"""In-process multi-site transport for tests and local simulation.

A loopback site wraps a real ``SiteCore`` -- same workspace on disk, same
gatekeeping, same request log -- but is addressed by direct calls instead of
sockets. Requests still pass through the canonical encode/decode path, so
whatever holds for a loopback site holds byte-for-byte for an HTTP site;
``conformance_suite`` asserts exactly that over a fixed scenario set.
"""

from __future__ import annotations

import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import protocol
from .compdef import COX_MODEL, ComputationDefinition, parse_formula
from .cox import SurvivalDataset
from .errors import ValidationError
from .master import SiteHandle, upload_computation
from .site import SiteConfig, SiteCore

MASTER_PEER = "master"


class LoopbackTransport:
    """SiteTransport that calls a SiteCore directly, bytes in, bytes out."""

    def __init__(self, core: SiteCore, token: str):
        self.core = core
        self.token = token

    def upload_bytes(self, body: bytes) -> bytes:
        return self.core.handle_upload(self.token, body)

    def execute_bytes(self, defn_id: str, body: bytes) -> bytes:
        return self.core.handle_execute(self.token, body, defn_id)

    def withdraw(self, defn_id: str) -> bytes:
        return self.core.handle_withdraw(self.token, defn_id)

    def query_log(self, defn_id: str, since=None, until=None) -> bytes:
        return self.core.handle_log_query(self.token, defn_id, since, until)


@dataclass
class LoopbackSite:
    name: str
    core: SiteCore
    token: str

    @property
    def transport(self) -> LoopbackTransport:
        return LoopbackTransport(self.core, self.token)

    def handle(self) -> SiteHandle:
        return SiteHandle(
            name=self.name,
            url=f"loopback:{self.name}",
            token=self.token,
            data_file_name=f"{self.name}.csv",
            transport=self.transport,
        )


def make_loopback_site(name: str, root: Path, token: str = "tok-master") -> LoopbackSite:
    """One isolated site with its own workspace under ``root``."""
    ws = Path(root) / name
    config = SiteConfig(
        listen="127.0.0.1:0",
        workspace=ws,
        log_path=ws / "requests.log",
        tokens={token: MASTER_PEER},
    )
    return LoopbackSite(name=name, core=SiteCore(config), token=token)


def survival_to_csv(ds: SurvivalDataset, time_var: str = "time",
                    event_var: str = "event") -> str:
    """Render a survival dataset back to CSV for an upload payload."""
    header = [time_var, event_var, *ds.covariate_names]
    lines = [",".join(header)]
    for i in range(ds.n):
        cells = [repr(float(ds.time[i])), str(int(ds.event[i]))]
        cells += [repr(float(x)) for x in ds.covariates[i]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def matrix_to_csv(x: np.ndarray) -> str:
    header = ",".join(f"c{j + 1}" for j in range(x.shape[1]))
    lines = [header]
    for row in x:
        lines.append(",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def spawn_sites(
    defn: ComputationDefinition,
    datasets: Sequence[SurvivalDataset | np.ndarray],
    root: str | Path | None = None,
    site_names: Sequence[str] | None = None,
) -> list[SiteHandle]:
    """Spin up one isolated loopback site per dataset, registered and loaded.

    Every site validates its upload exactly as a real server would; a
    validation failure surfaces as a SiteError for that site.
    """
    if site_names is None:
        site_names = [f"site{i + 1}" for i in range(len(datasets))]
    if len(site_names) != len(datasets):
        raise ValidationError(
            f"{len(site_names)} site names for {len(datasets)} datasets"
        )
    if root is None:
        root = Path(tempfile.mkdtemp(prefix="fedfit-sim-"))
    handles = []
    for name, data in zip(site_names, datasets):
        lb = make_loopback_site(name, Path(root))
        if isinstance(data, SurvivalDataset):
            csv_text = survival_to_csv(
                data, defn.formula.time_var, defn.formula.event_var
            )
        else:
            csv_text = matrix_to_csv(np.asarray(data))
        upload_computation(lb.transport, defn, csv_text, f"{name}.csv")
        handles.append(lb.handle())
    return handles


# -- conformance -------------------------------------------------------------

CONFORMANCE_FORMULA = "Surv(t, d) ~ x1 + x2"
CONFORMANCE_COX_ID = "00000000000000000000000000000c0a"
CONFORMANCE_SVD_ID = "000000000000000000000000000005bd"
CONFORMANCE_CREATED = "2020-01-01T00:00:00Z"

CONFORMANCE_COX_CSV = (
    "t,d,x1,x2\n"
    "5,1,0.5,1.0\n"
    "3,1,-0.25,0.0\n"
    "3,0,1.5,2.0\n"
    "8,1,0.0,-1.0\n"
    "2,0,2.0,0.5\n"
    "9,1,-1.0,0.25\n"
)

CONFORMANCE_SVD_CSV = (
    "c1,c2,c3\n"
    "1.0,2.0,0.5\n"
    "0.25,-1.0,1.5\n"
    "-0.5,0.75,2.0\n"
    "2.0,0.0,-1.25\n"
)


def _conformance_defns() -> tuple[ComputationDefinition, ComputationDefinition]:
    cox_defn = ComputationDefinition(
        id=CONFORMANCE_COX_ID,
        comp_type=COX_MODEL,
        formula=parse_formula(CONFORMANCE_FORMULA),
        name="conformance-cox",
        title="Conformance Cox",
        created_at=CONFORMANCE_CREATED,
    )
    svd_defn = ComputationDefinition(
        id=CONFORMANCE_SVD_ID,
        comp_type="RankKSVD",
        formula=None,
        name="conformance-svd",
        title="Conformance SVD",
        created_at=CONFORMANCE_CREATED,
    )
    return cox_defn, svd_defn


@dataclass
class ConformanceReport:
    """Per-scenario response bytes from one backend."""

    responses: dict[str, tuple[bytes, ...]]

    def diff(self, other: "ConformanceReport") -> list[str]:
        mismatched = []
        for key in sorted(set(self.responses) | set(other.responses)):
            if self.responses.get(key) != other.responses.get(key):
                mismatched.append(key)
        return mismatched


def conformance_suite(transport_factory: Callable[[], "object"]) -> ConformanceReport:
    """Run the fixed request/response scenario set against a fresh backend.

    ``transport_factory`` returns a SiteTransport-shaped object bound to a
    brand-new site (empty workspace) with the standard master token; the
    suite drives uploads, stats, SVD iterations, denials, and withdrawal,
    recording the exact response bytes per scenario.
    """
    t = transport_factory()
    cox_defn, svd_defn = _conformance_defns()
    out: dict[str, tuple[bytes, ...]] = {}

    def upload_msg(defn, csv_text, name):
        return protocol.encode(
            protocol.UploadComputation(
                definition=defn.to_json_dict(),
                data_name=name,
                data_kind="survival" if defn.comp_type == COX_MODEL else "matrix",
                data_csv=csv_text,
            )
        )

    def execute_msg(defn_id, method, params):
        return protocol.encode(
            protocol.ExecuteRequest(defn_id=defn_id, method=method, params=params)
        )

    out["upload-cox"] = (t.upload_bytes(upload_msg(cox_defn, CONFORMANCE_COX_CSV, "a.csv")),)
    out["upload-cox-idempotent"] = (
        t.upload_bytes(upload_msg(cox_defn, CONFORMANCE_COX_CSV, "a.csv")),
    )
    out["upload-cox-conflict"] = (
        t.upload_bytes(upload_msg(cox_defn, CONFORMANCE_COX_CSV + "1,1,0,0\n", "a.csv")),
    )
    out["cox-stats-beta0"] = (
        t.execute_bytes(
            cox_defn.id,
            execute_msg(
                cox_defn.id, protocol.METHOD_COX_LOCAL_STATS,
                {"beta": [0.0, 0.0], "ties": "efron"},
            ),
        ),
    )
    out["unknown-id"] = (
        t.execute_bytes(
            "ffffffffffffffffffffffffffffffff",
            execute_msg(
                "ffffffffffffffffffffffffffffffff",
                protocol.METHOD_COX_LOCAL_STATS, {"beta": [0.0, 0.0]},
            ),
        ),
    )
    out["illegal-method"] = (
        t.execute_bytes(
            cox_defn.id, execute_msg(cox_defn.id, protocol.METHOD_SVD_INIT, {})
        ),
    )

    out["upload-svd"] = (t.upload_bytes(upload_msg(svd_defn, CONFORMANCE_SVD_CSV, "m.csv")),)
    svd_flow = [t.execute_bytes(svd_defn.id, execute_msg(svd_defn.id, protocol.METHOD_SVD_INIT, {}))]
    u_norm = 2.0
    for _ in range(3):
        svd_flow.append(
            t.execute_bytes(
                svd_defn.id,
                execute_msg(svd_defn.id, protocol.METHOD_SVD_V_STEP, {"uNorm": u_norm}),
            )
        )
        reply = protocol.decode(svd_flow[-1])
        v = np.asarray(reply.result["v"], dtype=np.float64)
        v = (v / np.linalg.norm(v)).tolist()
        svd_flow.append(
            t.execute_bytes(
                svd_defn.id,
                execute_msg(svd_defn.id, protocol.METHOD_SVD_U_STEP, {"v": v}),
            )
        )
        u_norm = float(np.sqrt(protocol.decode(svd_flow[-1]).result["uNormSq"]))
    out["svd-three-iterations"] = tuple(svd_flow)

    out["withdraw"] = (t.withdraw(cox_defn.id),)
    out["execute-after-withdraw"] = (
        t.execute_bytes(
            cox_defn.id,
            execute_msg(
                cox_defn.id, protocol.METHOD_COX_LOCAL_STATS, {"beta": [0.0, 0.0]}
            ),
        ),
    )
    return ConformanceReport(responses=out)
