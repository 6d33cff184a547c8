import numpy as np
import pytest

from conftest import make_survival
from fedfit.compdef import ComputationDefinition
from fedfit.errors import SiteError, ValidationError
from fedfit.master import HttpTransport
from fedfit.protocol import decode
from fedfit.simharness import (
    ConformanceReport,
    conformance_suite,
    make_loopback_site,
    matrix_to_csv,
    spawn_sites,
    survival_to_csv,
)
from fedfit.site import SiteConfig, SiteServer
from test_master import cox_defn, svd_defn


class TestSpawnSites:
    def test_three_matrices(self, rng, tmp_path):
        handles = spawn_sites(
            svd_defn(), [rng.standard_normal((8, 3)) for _ in range(3)], root=tmp_path
        )
        assert [h.name for h in handles] == ["site1", "site2", "site3"]

    def test_single_site_federation(self, rng, tmp_path):
        handles = spawn_sites(svd_defn(), [rng.standard_normal((8, 3))], root=tmp_path)
        assert len(handles) == 1

    def test_mismatched_counts(self, rng, tmp_path):
        with pytest.raises(ValidationError):
            spawn_sites(
                svd_defn(), [rng.standard_normal((8, 3))],
                root=tmp_path, site_names=["a", "b"],
            )

    def test_validation_failure_surfaces_per_site(self, rng, tmp_path):
        bad = np.zeros((0, 3))
        with pytest.raises(SiteError):
            spawn_sites(svd_defn(), [bad], root=tmp_path)

    def test_csv_round_trip_preserves_data(self, rng, tmp_path):
        ds = make_survival(rng, n=20, p=2)
        defn = cox_defn(p=2, defn_id="4" * 32)
        defn = ComputationDefinition(
            id=defn.id, comp_type=defn.comp_type,
            formula=defn.formula, name=defn.name, created_at=defn.created_at,
        )
        handles = spawn_sites(defn, [ds], root=tmp_path)
        # site recovers the exact float64 values from the CSV repr round trip
        from fedfit.protocol import ExecuteRequest, encode

        reply = decode(
            handles[0].transport.execute_bytes(
                defn.id,
                encode(ExecuteRequest(defn.id, "CoxLocalStats", {"beta": [0.0, 0.0]})),
            )
        )
        assert reply.result["nSubjects"] == 20


class TestConformance:
    def test_loopback_vs_http_byte_identical(self, tmp_path):
        def loopback_factory():
            return make_loopback_site("conf-lb", tmp_path / "lb").transport

        servers = []

        def http_factory():
            ws = tmp_path / "http"
            config = SiteConfig(
                listen="127.0.0.1:0", workspace=ws / "ws", log_path=ws / "req.log",
                tokens={"tok-master": "master"},
            )
            srv = SiteServer(config)
            srv.start()
            servers.append(srv)
            return HttpTransport(srv.url, "tok-master")

        try:
            lb_report = conformance_suite(loopback_factory)
            http_report = conformance_suite(http_factory)
            assert lb_report.diff(http_report) == []
        finally:
            for srv in servers:
                srv.stop()

    def test_fresh_loopbacks_agree(self, tmp_path):
        r1 = conformance_suite(
            lambda: make_loopback_site("a", tmp_path / "a").transport
        )
        r2 = conformance_suite(
            lambda: make_loopback_site("b", tmp_path / "b").transport
        )
        assert r1.diff(r2) == []

    def test_diff_reports_mismatches(self):
        a = ConformanceReport(responses={"x": (b"1",)})
        b = ConformanceReport(responses={"x": (b"2",), "y": (b"3",)})
        assert a.diff(b) == ["x", "y"]


class TestCsvHelpers:
    def test_survival_round_trip_exact(self, rng, tmp_path):
        import io

        from fedfit.compdef import load_csv_survival, parse_formula

        ds = make_survival(rng, n=15, p=3)
        text = survival_to_csv(ds)
        formula = parse_formula("Surv(time, event) ~ x1 + x2 + x3")
        back = load_csv_survival(io.StringIO(text), formula).dataset
        assert np.array_equal(back.time, ds.time)
        assert np.array_equal(back.event, ds.event)
        assert np.array_equal(back.covariates, ds.covariates)

    def test_matrix_round_trip_exact(self, rng):
        import io

        from fedfit.compdef import load_csv_matrix

        x = rng.standard_normal((6, 4))
        back = load_csv_matrix(io.StringIO(matrix_to_csv(x)))
        assert np.array_equal(back, x)
