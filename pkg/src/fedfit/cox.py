"""Site-local Cox statistics, strata aggregation, and Newton-Raphson fitting.

A site-stratified proportional hazards model keeps one baseline hazard per
stratum (here: per site) while sharing the coefficient vector. The log
partial likelihood, its gradient (score), and the Fisher information all
decompose into per-stratum sums, so a master process only ever needs the
(loglik, score, info) triple from each site.

``cox_local_stats`` computes that triple for one stratum in a single
backward pass over subjects sorted by time, handling tied event times with
either the Breslow or Efron correction. ``cox_fit`` runs damped
Newton-Raphson over any provider of aggregated statistics, which is how the
same code serves both the distributed master and the in-process pooled
oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import linalg
from .errors import (
    DimensionMismatchError,
    NonFiniteValueError,
    NonIdentifiableModelError,
    NumericOverflowError,
    SingularInformationError,
    ValidationError,
)

TIES_METHODS = ("efron", "breslow")


@dataclass(frozen=True)
class SurvivalDataset:
    """Right-censored survival data for one site.

    ``time`` holds event or censoring times, ``event`` the 0/1 indicator,
    and ``covariates`` the n x p design matrix. Missing values must have
    been dropped upstream; construction rejects anything non-finite.
    """

    time: np.ndarray
    event: np.ndarray
    covariates: np.ndarray
    covariate_names: tuple[str, ...]

    def __post_init__(self):
        time = linalg.vector(self.time)
        event = np.asarray(self.event)
        cov = linalg.matrix(self.covariates)
        if event.ndim != 1 or event.shape[0] != time.shape[0]:
            raise DimensionMismatchError("time and event lengths differ")
        if cov.shape[0] != time.shape[0]:
            raise DimensionMismatchError(
                f"covariates have {cov.shape[0]} rows for {time.shape[0]} subjects"
            )
        if not np.all(np.isin(event, (0, 1))):
            raise ValidationError("event indicators must be 0 or 1")
        if np.any(time < 0):
            raise ValidationError("times must be nonnegative")
        if cov.shape[1] != len(self.covariate_names):
            raise DimensionMismatchError(
                f"{len(self.covariate_names)} names for {cov.shape[1]} covariate columns"
            )
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "event", event.astype(np.int8))
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_events(self) -> int:
        return int(self.event.sum())


@dataclass(frozen=True)
class CoxLocalStats:
    """One stratum's (loglik, score, information) triple at a given beta."""

    loglik: float
    score: np.ndarray
    info: np.ndarray
    n_events: int
    n_subjects: int

    def __post_init__(self):
        score = linalg.vector(self.score)
        info = linalg.matrix(self.info)
        p = score.shape[0]
        if info.shape != (p, p):
            raise DimensionMismatchError(
                f"information shape {info.shape} does not match score length {p}"
            )
        scale = float(np.max(np.abs(info))) if info.size else 0.0
        if scale and float(np.max(np.abs(info - info.T))) > 1e-10 * scale:
            raise ValidationError("information matrix is not symmetric")
        if not math.isfinite(self.loglik):
            raise NonFiniteValueError("log-likelihood is not finite")
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "info", info)

    @property
    def p(self) -> int:
        return self.score.shape[0]


@dataclass(frozen=True)
class CoxFitResult:
    beta: np.ndarray
    variance: np.ndarray
    loglik_initial: float
    loglik_final: float
    iterations: int
    converged: bool
    covariate_names: tuple[str, ...] = ()
    evaluations: int = 0  # total stats-provider calls, halvings included

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.variance))


@dataclass(frozen=True)
class FitOptions:
    max_iter: int = 20
    tol: float = 1e-9
    ties: str = "efron"
    init: np.ndarray | None = None
    max_halvings: int = 5

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValidationError("max_iter must be at least 1")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.ties not in TIES_METHODS:
            raise ValidationError(f"ties must be one of {TIES_METHODS}")


def cox_local_stats(
    data: SurvivalDataset, beta: np.ndarray, ties: str = "efron"
) -> CoxLocalStats:
    """Log partial likelihood, score, and information for one stratum.

    Walks unique times in decreasing order, growing the risk-set
    accumulators (sum of risk scores, risk-weighted covariate sum, and
    risk-weighted outer-product sum) group by group, so the whole pass costs
    O(n log n + n p^2).

    Covariates are centered by their column means before exponentiation;
    the partial likelihood is location-invariant, so the returned values are
    unchanged while exp() stays in range for wild linear predictors.
    """
    if ties not in TIES_METHODS:
        raise ValidationError(f"ties must be one of {TIES_METHODS}")
    beta = linalg.vector(beta)
    p = data.p
    if beta.shape[0] != p:
        raise DimensionMismatchError(
            f"beta has length {beta.shape[0]} for {p} covariates"
        )

    xc = data.covariates - data.covariates.mean(axis=0)
    lp = xc @ beta
    with np.errstate(over="ignore"):
        risk = np.exp(lp)
    if not np.all(np.isfinite(risk)):
        bad = int(np.flatnonzero(~np.isfinite(risk))[0])
        raise NumericOverflowError(
            f"risk score overflowed for subject index {bad}", subject_index=bad
        )

    # Descending time order; subjects tied with an event time stay in its risk set.
    order = np.argsort(-data.time, kind="stable")
    time_s = data.time[order]
    event_s = data.event[order]
    xc_s = xc[order]
    lp_s = lp[order]
    risk_s = risk[order]

    loglik = 0.0
    score = np.zeros(p)
    info = np.zeros((p, p))
    xp0 = 0.0
    xp1 = np.zeros(p)
    xp2 = np.zeros((p, p))

    n = data.n
    i = 0
    while i < n:
        j = i
        while j < n and time_s[j] == time_s[i]:
            j += 1
        grp = slice(i, j)
        rg = risk_s[grp]
        xg = xc_s[grp]
        xp0 += float(rg.sum())
        xp1 += rg @ xg
        xp2 += xg.T @ (rg[:, None] * xg)

        deaths = np.flatnonzero(event_s[grp] == 1) + i
        d = deaths.shape[0]
        if d:
            xd = xc_s[deaths]
            loglik += float(lp_s[deaths].sum())
            score += xd.sum(axis=0)
            if ties == "breslow":
                loglik -= d * math.log(xp0)
                score -= d * xp1 / xp0
                info += d * (xp2 / xp0 - np.outer(xp1, xp1) / xp0**2)
            else:
                rd = risk_s[deaths]
                xp0f = float(rd.sum())
                xp1f = rd @ xd
                xp2f = xd.T @ (rd[:, None] * xd)
                frac = np.arange(d) / d
                denom = xp0 - frac * xp0f
                loglik -= float(np.log(denom).sum())
                means = (xp1[None, :] - np.outer(frac, xp1f)) / denom[:, None]
                score -= means.sum(axis=0)
                info += (
                    (xp2[None, :, :] - frac[:, None, None] * xp2f)
                    / denom[:, None, None]
                ).sum(axis=0)
                info -= np.einsum("ki,kj->ij", means, means)
        i = j

    info = 0.5 * (info + info.T)
    return CoxLocalStats(
        loglik=loglik,
        score=score,
        info=info,
        n_events=data.n_events,
        n_subjects=n,
    )


def cox_aggregate(parts: Sequence[CoxLocalStats]) -> CoxLocalStats:
    """Sum per-stratum statistics elementwise, in the given order."""
    if not parts:
        raise ValidationError("cannot aggregate an empty list of statistics")
    p = parts[0].p
    for k, part in enumerate(parts):
        if part.p != p:
            raise DimensionMismatchError(
                f"part {k} has dimension {part.p}, expected {p}"
            )
    loglik = 0.0
    score = np.zeros(p)
    info = np.zeros((p, p))
    n_events = 0
    n_subjects = 0
    for part in parts:
        loglik += part.loglik
        score += part.score
        info += part.info
        n_events += part.n_events
        n_subjects += part.n_subjects
    return CoxLocalStats(loglik, score, info, n_events, n_subjects)


StatsProvider = Callable[[np.ndarray], CoxLocalStats]


def cox_fit(
    stats_provider: StatsProvider,
    p: int,
    opts: FitOptions = FitOptions(),
    covariate_names: Sequence[str] = (),
) -> CoxFitResult:
    """Newton-Raphson maximization of the partial likelihood.

    ``stats_provider`` maps a coefficient vector to aggregated statistics;
    it may be a local closure or a fan-out over remote sites. Each update is
    beta + I^-1 U, halved up to ``max_halvings`` times whenever the
    log-likelihood drops. Non-convergence within ``max_iter`` is reported,
    not raised; a singular information matrix is an error.
    """
    beta = np.zeros(p) if opts.init is None else linalg.vector(opts.init).copy()
    if beta.shape[0] != p:
        raise DimensionMismatchError(f"init has length {beta.shape[0]}, expected {p}")

    evaluations = 1
    stats = stats_provider(beta)
    if stats.p != p:
        raise DimensionMismatchError(
            f"provider returned dimension {stats.p}, expected {p}"
        )
    loglik_initial = stats.loglik
    loglik = loglik_initial
    converged = False
    iterations = 0

    for _ in range(opts.max_iter):
        try:
            step = linalg.solve_spd(stats.info, stats.score)
        except SingularInformationError as exc:
            raise NonIdentifiableModelError(
                f"information matrix is singular at iteration {iterations}: {exc}"
            ) from exc
        new_beta = beta + step
        new_stats = stats_provider(new_beta)
        evaluations += 1
        halvings = 0
        while new_stats.loglik < loglik and halvings < opts.max_halvings:
            step = 0.5 * step
            new_beta = beta + step
            new_stats = stats_provider(new_beta)
            evaluations += 1
            halvings += 1
        iterations += 1
        beta, stats = new_beta, new_stats
        if abs(new_stats.loglik - loglik) <= opts.tol * (abs(new_stats.loglik) + opts.tol):
            loglik = new_stats.loglik
            converged = True
            break
        loglik = new_stats.loglik

    try:
        variance = linalg.invert_spd(stats.info)
    except SingularInformationError as exc:
        raise NonIdentifiableModelError(
            f"information matrix is singular at the final estimate: {exc}"
        ) from exc
    return CoxFitResult(
        beta=beta,
        variance=variance,
        loglik_initial=loglik_initial,
        loglik_final=stats.loglik,
        iterations=iterations,
        converged=converged,
        covariate_names=tuple(covariate_names),
        evaluations=evaluations,
    )


def cox_fit_pooled(
    datasets: Sequence[SurvivalDataset], opts: FitOptions = FitOptions()
) -> CoxFitResult:
    """Stratified fit with each dataset as one stratum, computed in-process.

    This is the centralized oracle the distributed master is checked
    against: same statistics, same aggregation, same fitter, no wire.
    """
    if not datasets:
        raise ValidationError("need at least one dataset")
    names = datasets[0].covariate_names
    for ds in datasets[1:]:
        if ds.covariate_names != names:
            raise ValidationError("datasets disagree on covariate names")

    def provider(beta: np.ndarray) -> CoxLocalStats:
        return cox_aggregate([cox_local_stats(ds, beta, opts.ties) for ds in datasets])

    return cox_fit(provider, len(names), opts, covariate_names=names)


@dataclass(frozen=True)
class SummaryRow:
    name: str
    coef: float
    exp_coef: float
    se: float
    z: float
    p_value: float


@dataclass(frozen=True)
class SummaryTable:
    rows: tuple[SummaryRow, ...] = field(default_factory=tuple)

    def render(self, digits: int = 5) -> str:
        """Fixed-width table: coef, exp(coef), se(coef), z, p per covariate."""
        headers = ("coef", "exp(coef)", "se(coef)", "z", "p")
        cells = [
            [
                _sig(r.coef, digits),
                _sig(r.exp_coef, digits),
                _sig(r.se, digits),
                _sig(r.z, digits),
                _sci(r.p_value, digits),
            ]
            for r in self.rows
        ]
        name_w = max((len(r.name) for r in self.rows), default=0)
        widths = [
            max(len(h), max((len(row[i]) for row in cells), default=0))
            for i, h in enumerate(headers)
        ]
        lines = [
            " " * name_w + "  " + "  ".join(h.rjust(w) for h, w in zip(headers, widths))
        ]
        for r, row in zip(self.rows, cells):
            lines.append(
                r.name.ljust(name_w)
                + "  "
                + "  ".join(c.rjust(w) for c, w in zip(row, widths))
            )
        return "\n".join(lines)


def _sig(x: float, digits: int) -> str:
    return f"{x:.{digits}g}" if x == 0 else f"{x:.{max(digits, 1)}g}"


def _sci(x: float, digits: int) -> str:
    return f"{x:.{max(digits - 1, 0)}e}"


def cox_summary(fit: CoxFitResult) -> SummaryTable:
    """Per-covariate coef, hazard ratio, standard error, z, and p-value."""
    names = fit.covariate_names or tuple(
        str(i + 1) for i in range(fit.beta.shape[0])
    )
    rows = []
    for i, name in enumerate(names):
        coef = float(fit.beta[i])
        se = float(math.sqrt(fit.variance[i, i]))
        z = coef / se if se > 0 else 0.0
        rows.append(
            SummaryRow(
                name=name,
                coef=coef,
                exp_coef=math.exp(coef),
                se=se,
                z=z,
                p_value=2.0 * linalg.normal_sf(abs(z)),
            )
        )
    return SummaryTable(rows=tuple(rows))
