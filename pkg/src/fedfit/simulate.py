"""Seeded end-to-end simulation scenarios over in-process sites.

Data generators are deterministic for a fixed seed: exponential survival
times with a log-linear hazard in a known coefficient vector for the Cox
scenario, standard-normal matrices for the SVD scenario. Each scenario runs
the full distributed fit through the loopback protocol stack and reports
the deltas against the centralized oracle, so a run is self-checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import simharness
from .compdef import (
    COX_MODEL,
    RANK_K_SVD,
    ComputationDefinition,
    parse_formula,
)
from .cox import CoxFitResult, FitOptions, SurvivalDataset, cox_fit_pooled
from .errors import ValidationError
from .master import Master
from .protocol import transcript_assert_private
from .svd import SvdResult, svd_oracle

SIM_CREATED_AT = "2000-01-01T00:00:00Z"


def _sim_id(scenario: str, seed: int) -> str:
    # Deterministic so repeated simulate runs are byte-identical end to end.
    tag = f"{abs(seed) % 10**8:08d}"
    prefix = "c" if scenario == "cox" else "5"
    return (prefix * 24 + tag)[:32]


def gen_cox_datasets(
    n_sites: int, seed: int, n_per_site: int = 200, p: int = 5,
    beta: np.ndarray | None = None,
) -> tuple[list[SurvivalDataset], np.ndarray]:
    """Per-site survival data with a shared log-linear hazard.

    Event times are exponential with rate exp(x @ beta) against an
    independent exponential censoring time, giving roughly 60 percent
    events.
    """
    rng = np.random.default_rng(seed)
    if beta is None:
        beta = np.linspace(-0.5, 0.5, p)
    names = tuple(f"x{j + 1}" for j in range(p))
    datasets = []
    for _ in range(n_sites):
        x = rng.standard_normal((n_per_site, p))
        rate = np.exp(x @ beta)
        event_time = rng.exponential(1.0 / rate)
        censor_time = rng.exponential(1.5, size=n_per_site)
        time = np.minimum(event_time, censor_time)
        event = (event_time <= censor_time).astype(int)
        if event.sum() == 0:  # vanishingly unlikely; keep the dataset fit-able
            event[int(np.argmin(time))] = 1
        datasets.append(
            SurvivalDataset(time=time, event=event, covariates=x, covariate_names=names)
        )
    return datasets, beta


def gen_matrices(
    n_sites: int, seed: int, n_per_site: int = 20, p: int = 5
) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    return [rng.standard_normal((n_per_site, p)) for _ in range(n_sites)]


@dataclass(frozen=True)
class CoxSimOutcome:
    fit: CoxFitResult
    oracle: CoxFitResult
    max_beta_delta: float
    max_var_delta: float
    transcript_private: bool
    n_requests: int

    def to_json_dict(self) -> dict:
        return {
            "scenario": "cox",
            "beta": self.fit.beta.tolist(),
            "se": self.fit.se.tolist(),
            "converged": self.fit.converged,
            "iterations": self.fit.iterations,
            "maxBetaDelta": self.max_beta_delta,
            "maxVarianceDelta": self.max_var_delta,
            "transcriptPrivate": self.transcript_private,
            "nRequests": self.n_requests,
        }


@dataclass(frozen=True)
class SvdSimOutcome:
    result: SvdResult
    oracle: SvdResult
    max_d_delta_rel: float
    max_v_delta: float
    transcript_private: bool
    n_requests: int

    def to_json_dict(self) -> dict:
        return {
            "scenario": "svd",
            "d": self.result.d.tolist(),
            "v": self.result.v.tolist(),
            "converged": list(self.result.converged),
            "iterations": list(self.result.iterations_per_component),
            "maxSingularValueDeltaRel": self.max_d_delta_rel,
            "maxVectorDelta": self.max_v_delta,
            "transcriptPrivate": self.transcript_private,
            "nRequests": self.n_requests,
        }


def sign_aligned_delta(v: np.ndarray, v_ref: np.ndarray) -> float:
    """Columnwise max-norm distance, minimized over per-column sign flips."""
    deltas = []
    for j in range(v.shape[1]):
        deltas.append(
            min(
                float(np.max(np.abs(v[:, j] - v_ref[:, j]))),
                float(np.max(np.abs(v[:, j] + v_ref[:, j]))),
            )
        )
    return max(deltas)


def run_cox_scenario(
    n_sites: int, seed: int, n_per_site: int = 200, p: int = 5,
    workspace_root=None, site_names=None,
) -> CoxSimOutcome:
    datasets, _ = gen_cox_datasets(n_sites, seed, n_per_site, p)
    formula = parse_formula(
        "Surv(time, event) ~ " + " + ".join(f"x{j + 1}" for j in range(p))
    )
    defn = ComputationDefinition(
        id=_sim_id("cox", seed),
        comp_type=COX_MODEL,
        formula=formula,
        name="sim-cox",
        title="Simulated distributed Cox fit",
        created_at=SIM_CREATED_AT,
    )
    handles = simharness.spawn_sites(defn, datasets, root=workspace_root,
                                     site_names=site_names)
    m = Master(defn)
    for handle in handles:
        m.add_site(handle)
    fit = m.run_cox(FitOptions())
    oracle = cox_fit_pooled(datasets, FitOptions())
    return CoxSimOutcome(
        fit=fit,
        oracle=oracle,
        max_beta_delta=float(np.max(np.abs(fit.beta - oracle.beta))),
        max_var_delta=float(np.max(np.abs(fit.variance - oracle.variance))),
        transcript_private=transcript_assert_private(m.transcript, p),
        n_requests=sum(1 for e in m.transcript if e.direction == "to_site"),
    )


def run_svd_scenario(
    n_sites: int, seed: int, n_per_site: int = 20, p: int = 5, k: int | None = None,
    thr: float = 1e-12, max_iter: int = 200, workspace_root=None, site_names=None,
) -> SvdSimOutcome:
    matrices = gen_matrices(n_sites, seed, n_per_site, p)
    k = p if k is None else k
    defn = ComputationDefinition(
        id=_sim_id("svd", seed),
        comp_type=RANK_K_SVD,
        formula=None,
        name="sim-svd",
        title="Simulated distributed SVD",
        created_at=SIM_CREATED_AT,
    )
    handles = simharness.spawn_sites(defn, matrices, root=workspace_root,
                                     site_names=site_names)
    m = Master(defn)
    for handle in handles:
        m.add_site(handle)
    result = m.run_svd(k, thr=thr, max_iter=max_iter)
    oracle = svd_oracle(np.vstack(matrices), k)
    with np.errstate(divide="ignore"):
        rel = np.abs(result.d - oracle.d) / np.where(oracle.d > 0, oracle.d, 1.0)
    return SvdSimOutcome(
        result=result,
        oracle=oracle,
        max_d_delta_rel=float(np.max(rel)),
        max_v_delta=sign_aligned_delta(result.v, oracle.v),
        transcript_private=transcript_assert_private(m.transcript, p),
        n_requests=sum(1 for e in m.transcript if e.direction == "to_site"),
    )


def run_scenario(scenario: str, n_sites: int, seed: int, **kwargs):
    if scenario == "cox":
        return run_cox_scenario(n_sites, seed, **kwargs)
    if scenario == "svd":
        return run_svd_scenario(n_sites, seed, **kwargs)
    raise ValidationError(f"unknown scenario '{scenario}' (expected cox or svd)")
