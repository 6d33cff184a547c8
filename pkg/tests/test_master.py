import json

import numpy as np
import pytest

from conftest import make_survival
from fedfit.compdef import (
    COX_MODEL,
    RANK_K_SVD,
    ComputationDefinition,
    parse_formula,
)
from fedfit.cox import cox_fit_pooled
from fedfit.errors import SiteError, ValidationError
from fedfit.master import Master, MasterOptions, SiteHandle
from fedfit.protocol import METHOD_COX_LOCAL_STATS, TO_SITE
from fedfit.simharness import spawn_sites
from fedfit.svd import svd_oracle


def cox_defn(p=3, defn_id="1" * 32):
    covs = " + ".join(f"x{j + 1}" for j in range(p))
    return ComputationDefinition(
        id=defn_id, comp_type=COX_MODEL,
        formula=parse_formula(f"Surv(time, event) ~ {covs}"),
        name="master-test", created_at="2022-02-02T00:00:00Z",
    )


def svd_defn(defn_id="2" * 32):
    return ComputationDefinition(
        id=defn_id, comp_type=RANK_K_SVD, formula=None,
        name="master-test-svd", created_at="2022-02-02T00:00:00Z",
    )


def fast_master(defn):
    return Master(defn, MasterOptions(retry_backoff=0.0))


class TestAddSite:
    def test_three_sites_registered_in_order(self, rng, tmp_path):
        defn = cox_defn()
        datasets = [make_survival(rng, n=30, p=3) for _ in range(3)]
        handles = spawn_sites(defn, datasets, root=tmp_path)
        m = fast_master(defn)
        for h in handles:
            m.add_site(h)
        assert [s.name for s in m.sites] == ["site1", "site2", "site3"]

    def test_duplicate_name_rejected(self, rng, tmp_path):
        defn = cox_defn()
        handles = spawn_sites(defn, [make_survival(rng, n=30, p=3)], root=tmp_path)
        m = fast_master(defn)
        m.add_site(handles[0])
        with pytest.raises(ValidationError):
            m.add_site(handles[0])

    def test_dead_url_unreachable(self):
        defn = cox_defn()
        m = fast_master(defn)
        handle = SiteHandle(
            name="ghost", url="http://127.0.0.1:1", token="t", data_file_name="g.csv"
        )
        with pytest.raises(SiteError) as err:
            m.add_site(handle)
        assert err.value.transport

    def test_unregistered_defn_rejected(self, rng, tmp_path):
        defn = cox_defn()
        other = cox_defn(defn_id="3" * 32)
        handles = spawn_sites(defn, [make_survival(rng, n=30, p=3)], root=tmp_path)
        m = fast_master(other)  # same site, different computation id
        with pytest.raises(SiteError) as err:
            m.add_site(handles[0])
        assert "not registered" in str(err.value)


class TestRunCox:
    def test_single_site_equals_local_fit(self, rng, tmp_path):
        defn = cox_defn()
        ds = make_survival(rng, n=60, p=3)
        handles = spawn_sites(defn, [ds], root=tmp_path)
        m = fast_master(defn)
        m.add_site(handles[0])
        fit = m.run_cox()
        local = cox_fit_pooled([ds])
        assert np.array_equal(fit.beta, local.beta)
        assert fit.loglik_final == local.loglik_final

    def test_three_sites_equal_pooled_oracle(self, rng, tmp_path):
        defn = cox_defn(p=5)
        datasets = [make_survival(rng, n=70, p=5) for _ in range(3)]
        handles = spawn_sites(defn, datasets, root=tmp_path)
        m = fast_master(defn)
        for h in handles:
            m.add_site(h)
        fit = m.run_cox()
        pooled = cox_fit_pooled(datasets)
        assert np.max(np.abs(fit.beta - pooled.beta)) < 1e-10
        assert np.max(np.abs(fit.variance - pooled.variance)) < 1e-10

    def test_transcript_completeness(self, rng, tmp_path):
        defn = cox_defn()
        datasets = [make_survival(rng, n=40, p=3) for _ in range(2)]
        handles = spawn_sites(defn, datasets, root=tmp_path)
        m = fast_master(defn)
        for h in handles:
            m.add_site(h)
        fit = m.run_cox()
        sent = [
            e for e in m.transcript
            if e.direction == TO_SITE and e.message.method == METHOD_COX_LOCAL_STATS
        ]
        assert len(sent) == fit.evaluations * len(handles)
        assert len(sent) >= fit.iterations * len(handles)

    def test_site_request_logs_cover_every_iteration(self, rng, tmp_path):
        defn = cox_defn()
        datasets = [make_survival(rng, n=40, p=3) for _ in range(2)]
        handles = spawn_sites(defn, datasets, root=tmp_path)
        m = fast_master(defn)
        for h in handles:
            m.add_site(h)
        fit = m.run_cox()
        for h in handles:
            entries = json.loads(
                "[" + ",".join(
                    h.transport.core.log.path.read_text().splitlines()
                ) + "]"
            )
            stats_calls = [
                e for e in entries
                if e["method"] == "CoxLocalStats" and e["outcome"] == "ok"
            ]
            assert len(stats_calls) == fit.evaluations
            assert len(stats_calls) >= fit.iterations

    def test_transport_failure_retried_once_then_aborts(self, rng, tmp_path):
        defn = cox_defn()
        handles = spawn_sites(defn, [make_survival(rng, n=30, p=3)], root=tmp_path)
        inner = handles[0].transport
        fails = {"mode": "once", "count": 0}

        class FlakyTransport:
            def execute_bytes(self, defn_id, body):
                fails["count"] += 1
                if fails["mode"] == "once" and fails["count"] == 1:
                    raise ConnectionError("injected transient failure")
                if fails["mode"] == "always":
                    raise ConnectionError("injected permanent failure")
                return inner.execute_bytes(defn_id, body)

            def query_log(self, defn_id, since=None, until=None):
                return inner.query_log(defn_id, since, until)

        handles[0].transport = FlakyTransport()
        m = fast_master(defn)
        m.add_site(handles[0])
        fit = m.run_cox()  # one transient failure is absorbed by the retry
        assert fit.converged

        fails["mode"] = "always"
        with pytest.raises(SiteError) as err:
            m.run_cox()
        assert err.value.transport and err.value.site == "site1"

    def test_site_order_invariance_is_bitstable(self, rng, tmp_path):
        defn = cox_defn()
        datasets = [make_survival(rng, n=40, p=3) for _ in range(3)]
        handles = spawn_sites(defn, datasets, root=tmp_path)
        m1 = fast_master(defn)
        for h in handles:
            m1.add_site(h)
        m2 = fast_master(defn)
        for h in reversed(handles):
            m2.add_site(h)
        f1, f2 = m1.run_cox(), m2.run_cox()
        assert np.array_equal(f1.beta, f2.beta)
        assert np.array_equal(f1.variance, f2.variance)

    def test_wrong_comp_type(self, rng, tmp_path):
        defn = svd_defn()
        handles = spawn_sites(defn, [rng.standard_normal((10, 3))], root=tmp_path)
        m = fast_master(defn)
        m.add_site(handles[0])
        with pytest.raises(ValidationError):
            m.run_cox()

    def test_no_sites(self):
        with pytest.raises(ValidationError):
            fast_master(cox_defn()).run_cox()

    def test_inconsistent_p_across_sites(self, rng, tmp_path):
        # two sites registered under the same id but different column counts
        defn3 = cox_defn(p=3)
        site_a = spawn_sites(defn3, [make_survival(rng, n=30, p=3)], root=tmp_path / "a")[0]
        # second site: register a 2-covariate variant under the same id by hand
        defn2 = ComputationDefinition(
            id=defn3.id, comp_type=COX_MODEL,
            formula=parse_formula("Surv(time, event) ~ x1 + x2"),
            name="mismatch", created_at="2022-02-02T00:00:00Z",
        )
        site_b = spawn_sites(defn2, [make_survival(rng, n=30, p=2, names=("x1", "x2"))],
                             root=tmp_path / "b", site_names=["siteB"])[0]
        m = fast_master(defn3)
        m.add_site(site_a)
        m.add_site(site_b)
        with pytest.raises(SiteError):
            m.run_cox()


class TestRunSvd:
    def test_k1_shape(self, rng, tmp_path):
        defn = svd_defn()
        handles = spawn_sites(defn, [rng.standard_normal((20, 5))], root=tmp_path)
        m = fast_master(defn)
        m.add_site(handles[0])
        res = m.run_svd(k=1)
        assert res.v.shape == (5, 1) and res.d.shape == (1,)

    def test_matches_oracle_over_wire(self, rng, tmp_path):
        defn = svd_defn()
        parts = [rng.standard_normal((20, 5)) for _ in range(3)]
        handles = spawn_sites(defn, parts, root=tmp_path)
        m = fast_master(defn)
        for h in handles:
            m.add_site(h)
        res = m.run_svd(k=5, thr=1e-12, max_iter=300)
        oracle = svd_oracle(np.vstack(parts), 5)
        assert np.max(np.abs(res.d - oracle.d) / oracle.d) < 1e-8

    def test_withdraw_mid_run_aborts_with_attribution(self, rng, tmp_path):
        defn = svd_defn()
        parts = [rng.standard_normal((12, 4)) for _ in range(2)]
        handles = spawn_sites(defn, parts, root=tmp_path)

        # sabotage site2's transport: withdraw after a few replies
        victim = handles[1]
        inner = victim.transport
        count = {"n": 0}

        class Dropping:
            def execute_bytes(self, defn_id, body):
                count["n"] += 1
                if count["n"] == 5:
                    inner.withdraw(defn_id)
                return inner.execute_bytes(defn_id, body)

            def query_log(self, defn_id, since=None, until=None):
                return inner.query_log(defn_id, since, until)

            upload_bytes = staticmethod(inner.upload_bytes)
            withdraw = staticmethod(inner.withdraw)

        victim.transport = Dropping()
        m = fast_master(defn)
        for h in handles:
            m.add_site(h)
        with pytest.raises(SiteError) as err:
            m.run_svd(k=4, thr=1e-12, max_iter=200)
        assert err.value.site == "site2"

    def test_rerun_after_abort_succeeds(self, rng, tmp_path):
        defn = svd_defn()
        parts = [rng.standard_normal((12, 4)) for _ in range(2)]
        handles = spawn_sites(defn, parts, root=tmp_path)
        flaky = handles[0]
        inner = flaky.transport
        state = {"fail_once": True}

        class FlakyOnce:
            def execute_bytes(self, defn_id, body):
                if state["fail_once"]:
                    state["fail_once"] = False
                    raise SiteError("site1", "boom: injected error")
                return inner.execute_bytes(defn_id, body)

            def query_log(self, defn_id, since=None, until=None):
                return inner.query_log(defn_id, since, until)

        flaky.transport = FlakyOnce()
        m = fast_master(defn)
        for h in handles:
            m.add_site(h)
        with pytest.raises(SiteError):
            m.run_svd(k=2, thr=1e-10, max_iter=100)
        # a fresh run resets site state over the same registrations
        res = m.run_svd(k=2, thr=1e-10, max_iter=100)
        oracle = svd_oracle(np.vstack(parts), 2)
        assert np.max(np.abs(res.d - oracle.d) / oracle.d) < 1e-8

    def test_invalid_rank_via_master(self, rng, tmp_path):
        from fedfit.errors import InvalidRankError

        defn = svd_defn()
        handles = spawn_sites(defn, [rng.standard_normal((6, 3))], root=tmp_path)
        m = fast_master(defn)
        m.add_site(handles[0])
        with pytest.raises(InvalidRankError):
            m.run_svd(k=0)


class TestSummarize:
    def test_cox_table_shape(self, rng, tmp_path):
        defn = cox_defn()
        handles = spawn_sites(defn, [make_survival(rng, n=50, p=3)], root=tmp_path)
        m = fast_master(defn)
        m.add_site(handles[0])
        fit = m.run_cox()
        text = m.summarize(fit)
        lines = text.splitlines()
        assert "coef" in lines[0] and "exp(coef)" in lines[0]
        assert len(lines) == 4  # header + one row per covariate

    def test_svd_rendering(self, rng, tmp_path):
        defn = svd_defn()
        handles = spawn_sites(defn, [rng.standard_normal((10, 3))], root=tmp_path)
        m = fast_master(defn)
        m.add_site(handles[0])
        res = m.run_svd(k=2)
        text = m.summarize(res)
        assert text.startswith("d:")
        assert "v:" in text

    def test_render_parse_recovers_values(self, rng, tmp_path):
        defn = cox_defn()
        handles = spawn_sites(defn, [make_survival(rng, n=50, p=3)], root=tmp_path)
        m = fast_master(defn)
        m.add_site(handles[0])
        fit = m.run_cox()
        lines = m.summarize(fit, digits=5).splitlines()
        for i, row in enumerate(lines[1:]):
            cells = row.split()
            assert float(cells[1]) == pytest.approx(float(fit.beta[i]), rel=1e-4, abs=1e-9)
            assert float(cells[3]) == pytest.approx(float(fit.se[i]), rel=1e-4)
