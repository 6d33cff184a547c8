"""Command-line entry points for the full computation lifecycle.

Subcommands: define a computation, serve a site, upload a definition plus
data to a site, run a distributed fit as the master, query a site's request
log, and simulate a whole federation in-process.

Exit codes: 0 success, 1 validation problem, 2 I/O or network problem,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import signal
import sys
from pathlib import Path

from . import report, simulate
from .compdef import (
    COX_MODEL,
    RANK_K_SVD,
    ComputationDefinition,
    load_csv_matrix,
    load_csv_survival,
    new_computation_id,
    parse_formula,
    read_compdef,
    validate_dataset,
    write_compdef,
)
from .cox import FitOptions
from .errors import (
    ConfigError,
    FedfitError,
    NumericError,
    SiteError,
    UnauthorizedError,
    ValidationError,
)
from .master import HttpTransport, Master, SiteHandle, upload_computation
from .protocol import ErrorResponse, decode
from .site import SiteServer, load_config

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_NUMERIC = 3

_TYPE_ALIASES = {
    "cox": COX_MODEL,
    "svd": RANK_K_SVD,
    COX_MODEL: COX_MODEL,
    RANK_K_SVD: RANK_K_SVD,
}


def _emit(args, document: dict, text: str) -> None:
    """One JSON document on stdout in --json mode, otherwise the plain text."""
    if getattr(args, "json", False):
        sys.stdout.write(
            json.dumps(document, sort_keys=True, separators=(",", ":")) + "\n"
        )
    else:
        print(text)


def _fail(args, message: str, code: int, document: dict | None = None) -> int:
    if getattr(args, "json", False):
        doc = {"error": message, **(document or {})}
        sys.stdout.write(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")
    print(message, file=sys.stderr)
    return code


def cmd_define(args) -> int:
    comp_type = _TYPE_ALIASES.get(args.type)
    if comp_type is None:
        return _fail(args, f"unknown computation type '{args.type}'", EXIT_VALIDATION)
    if comp_type == COX_MODEL:
        if not args.formula:
            return _fail(args, "--formula is required for Cox definitions", EXIT_VALIDATION)
        formula = parse_formula(args.formula)
    else:
        formula = None

    defn = ComputationDefinition(
        id=new_computation_id(),
        comp_type=comp_type,
        formula=formula,
        name=args.name or "",
        title=args.title or "",
    )

    if comp_type == COX_MODEL:
        loaded = load_csv_survival(args.data, formula)
        rep = validate_dataset(defn, loaded.dataset, loaded.n_dropped_missing)
    else:
        rep = validate_dataset(defn, load_csv_matrix(args.data))
    if not rep.ok:
        return _fail(
            args,
            "dry run failed: " + "; ".join(rep.messages),
            EXIT_VALIDATION,
            {"report": rep.to_json_dict()},
        )

    out = Path(args.out) if args.out else Path(f"{defn.id}.json")
    write_compdef(defn, out)
    _emit(
        args,
        {"id": defn.id, "out": str(out), "report": rep.to_json_dict()},
        f"{defn.id}\nwrote {out} (n_used={rep.n_used}, "
        f"n_dropped_missing={rep.n_dropped_missing})",
    )
    return EXIT_OK


def cmd_serve(args) -> int:
    config = load_config(args.config)
    server = SiteServer(config)
    print(f"fedfit site listening on {server.url}", file=sys.stderr)

    def stop(_sig, _frame):
        raise KeyboardInterrupt

    signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        server.stop()
    return EXIT_OK


def cmd_upload(args) -> int:
    defn = read_compdef(args.defn)
    data_csv = Path(args.data).read_text(encoding="utf-8")
    transport = HttpTransport(args.site_url, args.token)
    reply = upload_computation(
        transport, defn, data_csv, args.data_name or Path(args.data).name
    )
    rep = reply.result.get("report", {})
    _emit(
        args,
        {"id": defn.id, "ok": True, "report": rep},
        f"uploaded {defn.id} to {args.site_url} "
        f"(n_used={rep.get('nUsed')}, n_dropped_missing={rep.get('nDroppedMissing')})",
    )
    return EXIT_OK


def _parse_site_spec(spec: str) -> SiteHandle:
    name, _, rest = spec.partition("=")
    parts = rest.split(",")
    if not name or len(parts) < 2:
        raise ValidationError(
            f"site spec '{spec}' is not name=url,token[,dataname]"
        )
    url, token = parts[0], parts[1]
    data_name = parts[2] if len(parts) > 2 else ""
    return SiteHandle(name=name, url=url, token=token, data_file_name=data_name)


def cmd_run(args) -> int:
    defn = read_compdef(args.defn)
    if not args.sites:
        return _fail(args, "no sites given (use --sites name=url,token)", EXIT_VALIDATION)
    m = Master(defn)
    for spec in args.sites:
        m.add_site(_parse_site_spec(spec))

    if defn.comp_type == COX_MODEL:
        fit = m.run_cox(FitOptions(max_iter=args.max_iter, tol=args.tol, ties=args.ties))
        document = {
            "compType": defn.comp_type,
            "id": defn.id,
            "beta": fit.beta.tolist(),
            "se": fit.se.tolist(),
            "variance": fit.variance.tolist(),
            "loglik": fit.loglik_final,
            "iterations": fit.iterations,
            "converged": fit.converged,
            "covariates": list(fit.covariate_names),
        }
        text = m.summarize(fit)
        paths = report.write_cox_report(fit, args.report_dir) if args.report_dir else []
    else:
        if args.k is None:
            return _fail(args, "--k is required for an SVD run", EXIT_VALIDATION)
        result = m.run_svd(args.k, thr=args.thr, max_iter=args.max_iter)
        document = {
            "compType": defn.comp_type,
            "id": defn.id,
            "d": result.d.tolist(),
            "v": result.v.tolist(),
            "iterations": list(result.iterations_per_component),
            "converged": list(result.converged),
        }
        text = m.summarize(result)
        paths = report.write_svd_report(result, args.report_dir) if args.report_dir else []

    if args.out:
        Path(args.out).write_text(
            json.dumps(document, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    if paths:
        text += "\nreport files: " + ", ".join(str(p) for p in paths)
    _emit(args, document, text)
    return EXIT_OK


def cmd_log(args) -> int:
    transport = HttpTransport(args.site_url, args.token)
    reply = decode(transport.query_log(args.defn_id, args.since, args.until))
    if isinstance(reply, ErrorResponse):
        raise SiteError(args.site_url, f"{reply.code}: {reply.message}")
    entries = reply.result.get("entries", [])
    text = "\n".join(
        f"{e['ts']:.3f} {e['peer']} {e['defnId']} {e['method']} {e['outcome']} "
        f"{e['durationMs']}ms"
        for e in entries
    )
    _emit(args, {"entries": entries}, text or "(no log entries)")
    return EXIT_OK


def cmd_simulate(args) -> int:
    outcome = simulate.run_scenario(args.scenario, args.sites, args.seed)
    document = outcome.to_json_dict()
    if args.scenario == "cox":
        text = (
            f"distributed vs pooled: max |beta delta| = {outcome.max_beta_delta:.3e}, "
            f"max |variance delta| = {outcome.max_var_delta:.3e}\n"
            f"transcript private: {outcome.transcript_private}, "
            f"requests: {outcome.n_requests}"
        )
        if args.report_dir:
            report.write_cox_report(outcome.fit, args.report_dir)
    else:
        text = (
            f"distributed vs centralized: max rel |d delta| = "
            f"{outcome.max_d_delta_rel:.3e}, max |v delta| = {outcome.max_v_delta:.3e}\n"
            f"transcript private: {outcome.transcript_private}, "
            f"requests: {outcome.n_requests}"
        )
        if args.report_dir:
            report.write_svd_report(outcome.result, args.report_dir)
    _emit(args, document, text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedfit",
        description="Federated model fitting over private per-site data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_define = sub.add_parser("define", help="create a computation definition")
    p_define.add_argument("--type", required=True,
                          help="cox | svd (or the full type name)")
    p_define.add_argument("--formula", help="Surv(time, event) ~ covariates")
    p_define.add_argument("--data", required=True, help="CSV used for the dry run")
    p_define.add_argument("--name", default="")
    p_define.add_argument("--title", default="")
    p_define.add_argument("--out", help="output path (default <id>.json)")
    p_define.add_argument("--json", action="store_true")
    p_define.set_defaults(fn=cmd_define)

    p_serve = sub.add_parser("serve", help="run a site server")
    p_serve.add_argument("--config", required=True, help="INI config file")
    p_serve.set_defaults(fn=cmd_serve)

    p_upload = sub.add_parser("upload", help="register a computation at a site")
    p_upload.add_argument("--site-url", required=True)
    p_upload.add_argument("--token", required=True)
    p_upload.add_argument("--defn", required=True, help="definition JSON file")
    p_upload.add_argument("--data", required=True, help="site data CSV")
    p_upload.add_argument("--data-name", default="")
    p_upload.add_argument("--json", action="store_true")
    p_upload.set_defaults(fn=cmd_upload)

    p_run = sub.add_parser("run", help="run a distributed fit as the master")
    p_run.add_argument("--defn", required=True)
    p_run.add_argument("--sites", dest="sites", action="append", default=[],
                       metavar="NAME=URL,TOKEN[,DATANAME]")
    p_run.add_argument("--k", type=int, help="rank for SVD runs")
    p_run.add_argument("--thr", type=float, default=1e-12)
    p_run.add_argument("--max-iter", type=int, default=100)
    p_run.add_argument("--tol", type=float, default=1e-9)
    p_run.add_argument("--ties", choices=("efron", "breslow"), default="efron")
    p_run.add_argument("--out", help="write the result document to this JSON file")
    p_run.add_argument("--report-dir", help="write CSV + figure report files here")
    p_run.add_argument("--json", action="store_true")
    p_run.set_defaults(fn=cmd_run)

    p_log = sub.add_parser("log", help="query a site's request log")
    p_log.add_argument("--site-url", required=True)
    p_log.add_argument("--token", required=True)
    p_log.add_argument("--defn-id", required=True)
    p_log.add_argument("--since", type=float)
    p_log.add_argument("--until", type=float)
    p_log.add_argument("--json", action="store_true")
    p_log.set_defaults(fn=cmd_log)

    p_sim = sub.add_parser("simulate", help="seeded end-to-end local run")
    p_sim.add_argument("--scenario", choices=("cox", "svd"), required=True)
    p_sim.add_argument("--sites", type=int, default=3)
    p_sim.add_argument("--seed", type=int, default=12345)
    p_sim.add_argument("--report-dir", help="write CSV + figure report files here")
    p_sim.add_argument("--json", action="store_true")
    p_sim.set_defaults(fn=cmd_simulate)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as exc:
        return _fail(args, f"numeric failure: {exc}", EXIT_NUMERIC)
    except UnauthorizedError as exc:
        return _fail(args, f"denied: {exc}", EXIT_IO)
    except SiteError as exc:
        if exc.transport or getattr(exc, "code", "") in ("unauthenticated", "site"):
            return _fail(args, str(exc), EXIT_IO)
        return _fail(args, str(exc), EXIT_VALIDATION)
    except ConfigError as exc:
        return _fail(args, f"configuration error: {exc}", EXIT_IO)
    except FedfitError as exc:
        return _fail(args, str(exc), EXIT_VALIDATION)
    except OSError as exc:
        return _fail(args, str(exc), EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
