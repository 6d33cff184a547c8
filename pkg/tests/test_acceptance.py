"""Acceptance suite: one test per criterion, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import make_survival
from fedfit.cli import main as cli_main
from fedfit.compdef import (
    COX_MODEL,
    RANK_K_SVD,
    ComputationDefinition,
    load_csv_survival,
    parse_formula,
)
from fedfit.cox import cox_fit_pooled, cox_local_stats, cox_summary
from fedfit.errors import SiteError
from fedfit.master import Master, MasterOptions, SiteHandle, upload_computation
from fedfit.protocol import (
    FROM_SITE,
    ExecuteResponse,
    Transcript,
    encode,
    transcript_assert_private,
)
from fedfit.simharness import spawn_sites, survival_to_csv
from fedfit.simulate import gen_cox_datasets, gen_matrices, run_svd_scenario
from fedfit.site import SiteConfig, SiteServer
from oracles import fd_gradient, fd_jacobian

DATA = Path(__file__).parent / "data"

# Golden fixture: 2-site synthetic survival data (seed 777), fit frozen below.
GOLDEN_FORMULA = "Surv(time, event) ~ x1 + x2 + x3 + x4"
GOLDEN_BETA = [-0.4765735633780537, -0.2471042098270885,
               0.14570434453237943, 0.4675297697456403]
GOLDEN_SE = [0.07786919663731312, 0.07622787173582073,
             0.07269462947996819, 0.08009204270670166]

# Published stratified-fit reference table: coef, se, exp(coef), z, p per row.
UIS_REFERENCE = {
    "age": (-0.0280495, 0.0081301, 0.97234, -3.4501, 5.6041e-04),
    "becktota": (0.0091441, 0.0049918, 1.00919, 1.8318, 6.6979e-02),
    "ndrugfp1": (-0.5219296, 0.1244240, 0.59337, -4.1948, 2.7315e-05),
    "ndrugfp2": (-0.1941709, 0.0482507, 0.82352, -4.0242, 5.7168e-05),
    "ivhx3": (0.2636376, 0.1082448, 1.30166, 2.4356, 1.4868e-02),
    "race": (-0.2400609, 0.1156319, 0.78658, -2.0761, 3.7887e-02),
    "treat": (-0.2125720, 0.0937466, 0.80850, -2.2675, 2.3359e-02),
}
UIS_FORMULA = (
    "Surv(time, censor) ~ age + becktota + ndrugfp1 + ndrugfp2 + ivhx3 + "
    "race + treat + strata(site)"
)


def report(n: int, label: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    suffix = f" ({detail})" if detail else ""
    print(f"ACCEPTANCE {n} {status}: {label}{suffix}")
    assert ok, f"criterion {n} failed: {label}{suffix}"


def cox_master_over(defn, datasets, tmp_path, names=None):
    handles = spawn_sites(defn, datasets, root=tmp_path, site_names=names)
    m = Master(defn, MasterOptions(retry_backoff=0.0))
    for h in handles:
        m.add_site(h)
    return m


def test_criterion_1_distributed_vs_pooled_cox(tmp_path):
    started = time.monotonic()
    datasets, _ = gen_cox_datasets(3, seed=600, n_per_site=200, p=5)
    defn = ComputationDefinition(
        id="a1" * 16, comp_type=COX_MODEL,
        formula=parse_formula("Surv(time, event) ~ x1 + x2 + x3 + x4 + x5"),
        name="acceptance-1", created_at="2022-01-01T00:00:00Z",
    )
    m = cox_master_over(defn, datasets, tmp_path)
    fit = m.run_cox()
    pooled = cox_fit_pooled(datasets)
    elapsed = time.monotonic() - started
    beta_delta = float(np.max(np.abs(fit.beta - pooled.beta)))
    var_delta = float(np.max(np.abs(fit.variance - pooled.variance)))
    report(
        1, "distributed Cox equals pooled oracle (n=600, p=5, 3 sites)",
        beta_delta < 1e-10 and var_delta < 1e-10 and elapsed < 10.0,
        f"beta delta {beta_delta:.2e}, variance delta {var_delta:.2e}, {elapsed:.2f}s",
    )


def _uis_csv_path():
    env = os.environ.get("FEDFIT_UIS_CSV")
    if env and Path(env).exists():
        return Path(env)
    bundled = DATA / "uis.csv"
    return bundled if bundled.exists() else None


def test_criterion_2_golden_fixture_substitute(tmp_path):
    # With the public UIS dataset unavailable, the criterion substitutes
    # criterion 1 plus this stored synthetic golden fixture.
    formula = parse_formula(GOLDEN_FORMULA)
    loaded = [
        load_csv_survival(DATA / f"golden_site{i}.csv", formula).dataset
        for i in (1, 2)
    ]
    defn = ComputationDefinition(
        id="a2" * 16, comp_type=COX_MODEL, formula=formula,
        name="acceptance-2", created_at="2022-01-01T00:00:00Z",
    )
    m = cox_master_over(defn, loaded, tmp_path)
    fit = m.run_cox()
    beta_delta = float(np.max(np.abs(fit.beta - np.asarray(GOLDEN_BETA))))
    se_delta = float(np.max(np.abs(fit.se - np.asarray(GOLDEN_SE))))
    report(
        2, "golden-fixture 2-site fit (substitute while UIS is unavailable)",
        beta_delta < 1e-10 and se_delta < 1e-10,
        f"beta delta {beta_delta:.2e}, se delta {se_delta:.2e}",
    )


def test_criterion_2_uis_reference_table(tmp_path):
    uis = _uis_csv_path()
    if uis is None:
        pytest.skip(
            "UIS dataset not available in this environment; the golden-fixture "
            "substitute covers criterion 2 (set FEDFIT_UIS_CSV to a local copy "
            "of the dataset to run the published-table comparison)"
        )

    formula = parse_formula(UIS_FORMULA)
    import csv as _csv

    with open(uis, newline="") as fh:
        rows = list(_csv.DictReader(fh))
    # derive the transformed drug-use columns if only raw ones are present
    for row in rows:
        if "ndrugfp1" not in row and row.get("ndrugtx") not in (None, "", "NA"):
            nd = float(row["ndrugtx"])
            row["ndrugfp1"] = repr(10.0 / (nd + 1.0))
            row["ndrugfp2"] = repr((10.0 / (nd + 1.0)) * np.log((nd + 1.0) / 10.0))
        if "ivhx3" not in row and row.get("ivhx") not in (None, "", "NA"):
            row["ivhx3"] = "1" if row["ivhx"] == "3" else "0"

    sites = {"0": [], "1": []}
    for row in rows:
        sites.setdefault(str(row.get("site", "0")), []).append(row)
    header = ["time", "censor", *formula.covariates]
    import io

    datasets = []
    n_used_total = 0
    n_dropped_total = 0
    for key in sorted(sites):
        if not sites[key]:
            continue
        text = ",".join(header) + "\n" + "\n".join(
            ",".join(str(r.get(h, "")) for h in header) for r in sites[key]
        )
        loaded = load_csv_survival(io.StringIO(text), formula)
        n_used_total += loaded.n_used
        n_dropped_total += loaded.n_dropped_missing
        datasets.append(loaded.dataset)
    # the published fit used 575 subjects after dropping 53 incomplete rows
    assert n_used_total == 575, f"expected 575 usable subjects, got {n_used_total}"
    assert n_dropped_total == 53, f"expected 53 dropped rows, got {n_dropped_total}"

    defn = ComputationDefinition(
        id="a2" * 16, comp_type=COX_MODEL, formula=formula,
        name="acceptance-2-uis", created_at="2022-01-01T00:00:00Z",
    )
    m = cox_master_over(defn, datasets, tmp_path)
    fit = m.run_cox()
    table = {r.name: r for r in cox_summary(fit).rows}
    worst = 0.0
    for name, (coef, se, exp_coef, z, p) in UIS_REFERENCE.items():
        row = table[name]
        for got, want in [
            (row.coef, coef), (row.se, se), (row.exp_coef, exp_coef),
            (row.z, z), (row.p_value, p),
        ]:
            worst = max(worst, abs(got - want) / abs(want))
    report(2, "published stratified-fit table reproduced (2-site UIS)",
           worst < 1e-3, f"worst relative cell error {worst:.2e}")


def test_criterion_3_distributed_svd_accuracy():
    # default simulation seed; its singular-value gaps let the alternating
    # iteration settle the vectors within the fixed max_iter budget
    outcome = run_svd_scenario(3, seed=12345, n_per_site=20, p=5, k=5,
                               thr=1e-12, max_iter=200)
    gram = outcome.result.v.T @ outcome.result.v
    ortho = float(np.linalg.norm(gram - np.eye(5)))
    report(
        3, "distributed SVD matches centralized oracle (3x20x5, k=5)",
        outcome.max_d_delta_rel < 1e-8
        and outcome.max_v_delta < 1e-6
        and ortho < 1e-6,
        f"d rel {outcome.max_d_delta_rel:.2e}, v {outcome.max_v_delta:.2e}, "
        f"VtV-I {ortho:.2e}",
    )


def test_criterion_4_gradient_hessian_suite():
    rng = np.random.default_rng(4242)
    worst_grad, worst_hess = 0.0, 0.0
    for i in range(100):
        n = int(rng.integers(10, 31))
        p = int(rng.integers(1, 5))
        ds = make_survival(rng, n=n, p=p, ties=bool(i % 2))
        beta = rng.uniform(-0.5, 0.5, size=p)
        ties = "efron" if i % 2 == 0 else "breslow"

        analytic = cox_local_stats(ds, beta, ties)
        numeric_grad = fd_gradient(
            lambda b: cox_local_stats(ds, b, ties).loglik, beta, h=1e-5
        )
        scale = np.maximum(np.abs(numeric_grad), 1e-8)
        worst_grad = max(worst_grad, float(np.max(np.abs(analytic.score - numeric_grad) / scale)))

        numeric_info = -fd_jacobian(
            lambda b: cox_local_stats(ds, b, ties).score, beta, h=1e-5
        )
        denom = max(np.linalg.norm(numeric_info), 1e-8)
        worst_hess = max(
            worst_hess, float(np.linalg.norm(analytic.info - numeric_info) / denom)
        )
    report(
        4, "score/information match finite differences over 100 instances",
        worst_grad < 1e-6 and worst_hess < 1e-5,
        f"worst score rel {worst_grad:.2e}, worst info rel {worst_hess:.2e}",
    )


def test_criterion_5_privacy_transcripts(tmp_path):
    # full Cox fit, p = 3
    datasets, _ = gen_cox_datasets(2, seed=51, n_per_site=60, p=3)
    cox_defn = ComputationDefinition(
        id="a5" * 16, comp_type=COX_MODEL,
        formula=parse_formula("Surv(time, event) ~ x1 + x2 + x3"),
        name="acceptance-5", created_at="2022-01-01T00:00:00Z",
    )
    m = cox_master_over(cox_defn, datasets, tmp_path / "cox")
    m.run_cox()
    cox_private = transcript_assert_private(m.transcript, 3)

    cox_bound = 1 + 3 + 9 + 2
    max_numbers = 0
    for e in m.transcript:
        if e.direction == FROM_SITE and isinstance(e.message, ExecuteResponse):
            count = _count_numbers(e.message.result)
            max_numbers = max(max_numbers, count)
    bound_ok = max_numbers <= cox_bound

    # full k=3 SVD, p = 4
    svd_defn = ComputationDefinition(
        id="b5" * 16, comp_type=RANK_K_SVD, formula=None,
        name="acceptance-5-svd", created_at="2022-01-01T00:00:00Z",
    )
    matrices = gen_matrices(2, seed=52, n_per_site=15, p=4)
    handles = spawn_sites(svd_defn, matrices, root=tmp_path / "svd")
    ms = Master(svd_defn, MasterOptions(retry_backoff=0.0))
    for h in handles:
        ms.add_site(h)
    ms.run_svd(k=3, thr=1e-10, max_iter=150)
    svd_private = transcript_assert_private(ms.transcript, 4)

    # n_j appears only as a scalar in init replies
    n_scalar_only = all(
        isinstance(e.message.result.get("n"), int)
        for e in ms.transcript
        if e.direction == FROM_SITE
        and isinstance(e.message, ExecuteResponse)
        and e.message.method == "SvdInit"
    )

    # a doctored transcript must fail the assertion
    doctored = Transcript()
    doctored.record(
        FROM_SITE, "site1",
        encode(ExecuteResponse("a5" * 16, "CoxLocalStats",
                               {"leak": [0.0] * 100})),
    )
    doctored_fails = not transcript_assert_private(doctored, 3)

    report(
        5, "privacy transcript suite (Cox + k=3 SVD + doctored case)",
        cox_private and svd_private and bound_ok and n_scalar_only and doctored_fails,
        f"max Cox payload numbers {max_numbers} <= {cox_bound}",
    )


def _count_numbers(value):
    if isinstance(value, bool):
        return 0
    if isinstance(value, (int, float)):
        return 1
    if isinstance(value, list):
        return sum(_count_numbers(v) for v in value)
    if isinstance(value, dict):
        return sum(_count_numbers(v) for v in value.values())
    return 0


def test_criterion_6_governance_suite(tmp_path):
    from fedfit.protocol import ExecuteRequest
    from fedfit.site import SiteCore

    # shared server with two tenants
    ws = tmp_path / "shared"
    config = SiteConfig(
        listen="127.0.0.1:0", workspace=ws, log_path=ws / "req.log",
        tokens={"tok-b": "peerB", "tok-c": "peerC"},
    )
    core = SiteCore(config)

    defn_b = ComputationDefinition(
        id="6b" * 16, comp_type=COX_MODEL,
        formula=parse_formula("Surv(time, event) ~ x1 + x2"),
        name="tenant-b", created_at="2022-01-01T00:00:00Z",
    )
    defn_c = ComputationDefinition(
        id="6c" * 16, comp_type=RANK_K_SVD, formula=None,
        name="tenant-c", created_at="2022-01-01T00:00:00Z",
    )
    rng = np.random.default_rng(6)
    ds = make_survival(rng, n=25, p=2, names=("x1", "x2"))
    from fedfit.protocol import UploadComputation, decode

    core.handle_upload("tok-b", encode(UploadComputation(
        definition=defn_b.to_json_dict(), data_name="b.csv",
        data_kind="survival", data_csv=survival_to_csv(ds),
    )))
    from fedfit.simharness import matrix_to_csv

    core.handle_upload("tok-c", encode(UploadComputation(
        definition=defn_c.to_json_dict(), data_name="c.csv",
        data_kind="matrix", data_csv=matrix_to_csv(rng.standard_normal((8, 3))),
    )))

    def run_execute(token, defn_id, method, params):
        return decode(core.handle_execute(
            token, encode(ExecuteRequest(defn_id, method, params))
        ))

    # unknown id denied and logged
    ghost = "9" * 32
    unknown = run_execute("tok-b", ghost, "CoxLocalStats", {"beta": [0.0, 0.0]})
    unknown_ok = unknown.code == "not-found" and bool(core.log.query(defn_id=ghost))

    # cross-tenant request denied
    cross = run_execute("tok-b", defn_c.id, "SvdInit", {})
    cross_ok = cross.code == "not-authorized"

    # withdraw mid-run aborts with attribution (loopback federation)
    datasets, _ = gen_cox_datasets(2, seed=61, n_per_site=50, p=2)
    defn_run = ComputationDefinition(
        id="6d" * 16, comp_type=COX_MODEL,
        formula=parse_formula("Surv(time, event) ~ x1 + x2"),
        name="withdraw-run", created_at="2022-01-01T00:00:00Z",
    )
    handles = spawn_sites(defn_run, datasets, root=tmp_path / "run")
    victim = handles[1]
    inner = victim.transport
    calls = {"n": 0}

    class WithdrawMidRun:
        def execute_bytes(self, defn_id, body):
            calls["n"] += 1
            if calls["n"] == 3:
                inner.withdraw(defn_id)
            return inner.execute_bytes(defn_id, body)

        def query_log(self, defn_id, since=None, until=None):
            return inner.query_log(defn_id, since, until)

    victim.transport = WithdrawMidRun()
    m = Master(defn_run, MasterOptions(retry_backoff=0.0))
    for h in handles:
        m.add_site(h)
    aborted = False
    attributed = ""
    try:
        m.run_cox()
    except SiteError as exc:
        aborted = True
        attributed = exc.site
    withdraw_ok = aborted and attributed == "site2"

    # request-log line count equals request count including denials
    total_before = len(core.log.path.read_text().splitlines())
    run_execute("bad-token", defn_b.id, "CoxLocalStats", {"beta": [0.0, 0.0]})
    run_execute("tok-b", defn_b.id, "CoxLocalStats", {"beta": [0.0, 0.0]})
    total_after = len(core.log.path.read_text().splitlines())
    log_ok = total_after == total_before + 2

    report(
        6, "governance: unknown id, cross-tenant, withdraw mid-run, log counts",
        unknown_ok and cross_ok and withdraw_ok and log_ok,
        f"abort attributed to '{attributed}'",
    )


def test_criterion_7_determinism(tmp_path, capsys):
    args = ["simulate", "--scenario", "svd", "--sites", "3", "--seed", "12345", "--json"]
    assert cli_main(list(args)) == 0
    first = capsys.readouterr().out
    assert cli_main(list(args)) == 0
    second = capsys.readouterr().out
    bytes_identical = first == second and len(first) > 0

    # site registration order must not move the results
    datasets, _ = gen_cox_datasets(3, seed=71, n_per_site=60, p=3)
    defn = ComputationDefinition(
        id="a7" * 16, comp_type=COX_MODEL,
        formula=parse_formula("Surv(time, event) ~ x1 + x2 + x3"),
        name="acceptance-7", created_at="2022-01-01T00:00:00Z",
    )
    handles = spawn_sites(defn, datasets, root=tmp_path)
    m1 = Master(defn, MasterOptions(retry_backoff=0.0))
    for h in handles:
        m1.add_site(h)
    m2 = Master(defn, MasterOptions(retry_backoff=0.0))
    for h in reversed(handles):
        m2.add_site(h)
    f1, f2 = m1.run_cox(), m2.run_cox()
    beta_shift = float(np.max(np.abs(f1.beta - f2.beta)))

    report(
        7, "seeded simulate is byte-identical; site order shifts results < 1e-9",
        bytes_identical and beta_shift < 1e-9,
        f"json bytes {len(first)}, beta shift {beta_shift:.2e}",
    )


def test_criterion_8_crash_recovery(tmp_path):
    matrices = gen_matrices(2, seed=81, n_per_site=12, p=4)
    defn = ComputationDefinition(
        id="a8" * 16, comp_type=RANK_K_SVD, formula=None,
        name="acceptance-8", created_at="2022-01-01T00:00:00Z",
    )

    def http_federation(root, restart_victim: bool):
        servers = {}
        handles = []
        for i, x in enumerate(matrices):
            ws = root / f"site{i + 1}"
            config = SiteConfig(
                listen="127.0.0.1:0", workspace=ws / "ws",
                log_path=ws / "req.log", tokens={"tok": "master"},
            )
            srv = SiteServer(config)
            srv.start()
            servers[f"site{i + 1}"] = (srv, config, ws)
            from fedfit.master import HttpTransport
            from fedfit.simharness import matrix_to_csv

            upload_computation(
                HttpTransport(srv.url, "tok"), defn, matrix_to_csv(x),
                f"site{i + 1}.csv",
            )
            handles.append(SiteHandle(
                name=f"site{i + 1}", url=srv.url, token="tok",
                data_file_name=f"site{i + 1}.csv",
            ))

        if restart_victim:
            victim = handles[1]
            inner = victim.transport
            seen = {"finalized": 0, "restarted": False}

            class RestartBetweenComponents:
                def execute_bytes(self, defn_id, body):
                    from fedfit.protocol import decode as _dec

                    msg = _dec(body)
                    if (
                        seen["finalized"] == 1
                        and not seen["restarted"]
                        and msg.method != "SvdFinalizeComponent"
                    ):
                        # hard-stop the server and bring up a fresh process
                        # over the same workspace, on the same port
                        old_srv, config, ws = servers["site2"]
                        port = old_srv.port
                        old_srv.stop()
                        new_config = SiteConfig(
                            listen=f"127.0.0.1:{port}", workspace=ws / "ws",
                            log_path=ws / "req.log", tokens={"tok": "master"},
                        )
                        new_srv = SiteServer(new_config)
                        new_srv.start()
                        servers["site2"] = (new_srv, new_config, ws)
                        seen["restarted"] = True
                    out = inner.execute_bytes(defn_id, body)
                    if msg.method == "SvdFinalizeComponent":
                        seen["finalized"] += 1
                    return out

                def query_log(self, defn_id, since=None, until=None):
                    return inner.query_log(defn_id, since, until)

            victim.transport = RestartBetweenComponents()

        m = Master(defn, MasterOptions(retry_backoff=0.1))
        for h in handles:
            m.add_site(h)
        try:
            result = m.run_svd(k=3, thr=1e-11, max_iter=200)
        finally:
            for srv, _, _ in servers.values():
                srv.stop()
        return result

    uninterrupted = http_federation(tmp_path / "base", restart_victim=False)
    recovered = http_federation(tmp_path / "crash", restart_victim=True)
    delta = float(np.max(np.abs(uninterrupted.d - recovered.d)))
    report(
        8, "site restart between SVD components resumes to the same values",
        delta < 1e-10,
        f"max |d| delta {delta:.2e}",
    )
