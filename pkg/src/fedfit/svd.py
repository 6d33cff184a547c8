"""Rank-1 alternating SVD and its privacy-preserving distributed rank-k form.

Each component is extracted by alternating v <- X'u, u <- Xv with
normalization, deflating the already-found components on the v step only.
In the distributed form the matrix is row-partitioned across sites: every
site computes its slice of those products and only p-vectors and scalars
ever travel to the master. Sites transmit squared norms, which the master
aggregates as sqrt(sum of squares) -- the correct Euclidean combination.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import linalg
from .errors import (
    DegenerateInputError,
    DimensionMismatchError,
    InvalidRankError,
    SiteError,
    ValidationError,
)

DEFAULT_THR = 1e-12
DEFAULT_MAX_ITER = 100


@dataclass(frozen=True)
class Rank1Result:
    u: np.ndarray
    v: np.ndarray
    d: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class SvdResult:
    """Right singular vectors (columns of v) and singular values d."""

    v: np.ndarray
    d: np.ndarray
    iterations_per_component: tuple[int, ...]
    converged: tuple[bool, ...]

    def __post_init__(self):
        v = linalg.matrix(self.v)
        d = linalg.vector(self.d)
        if v.shape[1] != d.shape[0]:
            raise DimensionMismatchError(
                f"{v.shape[1]} singular vectors for {d.shape[0]} singular values"
            )
        if np.any(d < 0):
            raise ValidationError("singular values must be nonnegative")
        if d.shape[0] > 1 and np.any(np.diff(d) > 1e-9 * max(1.0, float(d[0]))):
            raise ValidationError("singular values must be non-increasing")
        norms = np.linalg.norm(v, axis=0)
        if norms.size and np.max(np.abs(norms - 1.0)) > 1e-9:
            raise ValidationError("singular vector columns must be unit-norm")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "d", d)

    @property
    def k(self) -> int:
        return self.d.shape[0]


def _v_converged(v_new: np.ndarray, v_old: np.ndarray, thr: float) -> bool:
    # Sign flips between iterations are immaterial; take the better match.
    return min(
        float(np.max(np.abs(v_new - v_old))), float(np.max(np.abs(v_new + v_old)))
    ) < thr


def svd_rank1_dense(
    x: np.ndarray, thr: float = DEFAULT_THR, max_iter: int = DEFAULT_MAX_ITER
) -> Rank1Result:
    """Top singular triple of a dense matrix by alternating iteration.

    Starts from u = (1/sqrt(n), ..., 1/sqrt(n)); stops when v stabilizes to
    within ``thr`` in the max norm (up to sign), or flags the result
    unconverged after ``max_iter`` sweeps.
    """
    x = linalg.matrix(x)
    if not np.any(x):
        raise DegenerateInputError("cannot extract a singular pair from a zero matrix")
    n = x.shape[0]
    u = np.full(n, 1.0 / math.sqrt(n))
    v_old = None
    d = 0.0
    iterations = 0
    converged = False
    for _ in range(max_iter):
        v = x.T @ u
        nv = linalg.norm2(v)
        if nv == 0.0:
            raise DegenerateInputError("iteration collapsed to the zero vector")
        v = v / nv
        u = x @ v
        d = linalg.norm2(u)
        u = u / d
        iterations += 1
        if v_old is not None and _v_converged(v, v_old, thr):
            converged = True
            v_old = v
            break
        v_old = v
    return Rank1Result(u=u, v=v_old, d=d, iterations=iterations, converged=converged)


class SvdSlaveState:
    """One site's private partition plus its per-run iteration state.

    ``u_local`` accumulates this site's slice of the left singular vectors,
    one column per completed component; ``v_master`` and ``d`` mirror what
    the master has broadcast so the deflation (X - U D V')'u can be formed
    locally without ever shipping rows of X anywhere.
    """

    def __init__(self, x: np.ndarray):
        self.x = linalg.matrix(x)
        if self.x.shape[0] < 1:
            raise ValidationError("site partition must have at least one row")
        self.reset()

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def components(self) -> int:
        return self.u_local.shape[1]

    def reset(self) -> None:
        """Start a fresh run: no completed components, u at all-ones."""
        self.u_local = np.zeros((self.n, 0))
        self.v_master = np.zeros((self.p, 0))
        self.d = np.zeros(0)
        self.u_current = np.ones(self.n)

    def to_state_dict(self) -> dict:
        return {
            "uLocal": self.u_local.tolist(),
            "vMaster": self.v_master.tolist(),
            "d": self.d.tolist(),
            "uCurrent": self.u_current.tolist(),
        }

    def restore_state_dict(self, state: dict) -> None:
        r = len(state["d"])
        self.u_local = matrix_from_lists(state["uLocal"], self.n, r)
        self.v_master = matrix_from_lists(state["vMaster"], self.p, r)
        self.d = linalg.vector(state["d"])
        self.u_current = linalg.vector(state["uCurrent"])
        if self.u_current.shape[0] != self.n:
            raise DimensionMismatchError("persisted u has the wrong length")


def matrix_from_lists(values, rows: int, cols: int) -> np.ndarray:
    m = np.asarray(values, dtype=np.float64).reshape(rows, cols)
    return linalg.matrix(m)


def slave_v_step(state: SvdSlaveState, u_norm: float) -> np.ndarray:
    """Normalize the working u by the global norm, return (X - U D V')'u."""
    if not u_norm > 0:
        raise ValidationError("u_norm must be positive")
    state.u_current = state.u_current / u_norm
    u = state.u_current
    v = state.x.T @ u
    if state.components:
        v -= state.v_master @ (state.d * (state.u_local.T @ u))
    return v


def slave_u_step(state: SvdSlaveState, v: np.ndarray) -> float:
    """Set u <- Xv (undeflated) and return the squared norm of the slice."""
    v = linalg.vector(v)
    if v.shape[0] != state.p:
        raise DimensionMismatchError(
            f"v has length {v.shape[0]} for {state.p} columns"
        )
    state.u_current = state.x @ v
    return float(state.u_current @ state.u_current)


def slave_finalize_component(
    state: SvdSlaveState, u_norm: float, v: np.ndarray, d: float
) -> None:
    """Append u/||u|| to the local left block, record (v, d), reset u to ones."""
    if not u_norm > 0:
        raise ValidationError("u_norm must be positive")
    v = linalg.vector(v)
    if v.shape[0] != state.p:
        raise DimensionMismatchError(
            f"v has length {v.shape[0]} for {state.p} columns"
        )
    state.u_local = np.hstack([state.u_local, (state.u_current / u_norm)[:, None]])
    state.v_master = np.hstack([state.v_master, v[:, None]])
    state.d = np.append(state.d, float(d))
    state.u_current = np.ones(state.n)


class SvdSiteOps(Protocol):
    """Per-site operations the rank-k driver needs, however they are carried."""

    name: str

    def init(self) -> tuple[int, int]:
        """Reset run state; return (n_rows, n_cols) of the partition."""

    def v_step(self, u_norm: float) -> np.ndarray: ...

    def u_step(self, v: np.ndarray) -> float: ...

    def finalize_component(self, u_norm: float, v: np.ndarray, d: float) -> None: ...


class LocalSvdSite:
    """In-process adapter putting a bare slave state behind the ops interface."""

    def __init__(self, name: str, x: np.ndarray):
        self.name = name
        self.state = SvdSlaveState(x)

    def init(self) -> tuple[int, int]:
        self.state.reset()
        return self.state.n, self.state.p

    def v_step(self, u_norm: float) -> np.ndarray:
        return slave_v_step(self.state, u_norm)

    def u_step(self, v: np.ndarray) -> float:
        return slave_u_step(self.state, v)

    def finalize_component(self, u_norm: float, v: np.ndarray, d: float) -> None:
        slave_finalize_component(self.state, u_norm, v, d)


def master_run_svd(
    sites: Sequence[SvdSiteOps],
    k: int,
    thr: float = DEFAULT_THR,
    max_iter: int = DEFAULT_MAX_ITER,
) -> SvdResult:
    """Drive the distributed rank-k extraction over a set of site handles.

    Per component: every site starts from all-ones u with the global norm
    seeded as sqrt(sum of site row counts), then the master alternates
    collecting and summing site v-contributions with broadcasting the
    normalized v, aggregating squared u-norms into the singular value.
    Aggregation order is fixed by site position for determinism. Any site
    failure aborts the whole run with that site named.
    """
    if not sites:
        raise ValidationError("need at least one site")
    if k < 1:
        raise InvalidRankError(f"rank k={k} must be at least 1")

    def guarded(site, fn, *args):
        try:
            return fn(*args)
        except SiteError:
            raise
        except Exception as exc:
            raise SiteError(site.name, str(exc)) from exc

    dims = [guarded(s, s.init) for s in sites]
    n_total = sum(n for n, _ in dims)
    p = dims[0][1]
    for (nj, pj), site in zip(dims, sites):
        if pj != p:
            raise SiteError(site.name, f"partition has {pj} columns, expected {p}")
    if k > min(n_total, p):
        raise InvalidRankError(
            f"rank k={k} exceeds min(total rows={n_total}, columns={p})"
        )

    v_cols: list[np.ndarray] = []
    d_vals: list[float] = []
    iters: list[int] = []
    conv: list[bool] = []
    for _ in range(k):
        u_norm = math.sqrt(n_total)
        v_old = None
        d_i = 0.0
        n_iter = 0
        converged = False
        for _ in range(max_iter):
            parts = [guarded(s, s.v_step, u_norm) for s in sites]
            v = np.zeros(p)
            for part in parts:
                part = np.asarray(part, dtype=np.float64)
                if part.shape != (p,):
                    raise ValidationError(f"site returned v of shape {part.shape}")
                v += part
            nv = linalg.norm2(v)
            if nv == 0.0:
                raise DegenerateInputError(
                    "v collapsed to zero; input rank is below the requested k"
                )
            v = v / nv
            norms_sq = [float(guarded(s, s.u_step, v)) for s in sites]
            u_norm = math.sqrt(sum(norms_sq))
            if u_norm == 0.0:
                raise DegenerateInputError("u collapsed to zero")
            d_i = u_norm
            n_iter += 1
            if v_old is not None and _v_converged(v, v_old, thr):
                converged = True
                v_old = v
                break
            v_old = v
        for s in sites:
            guarded(s, s.finalize_component, u_norm, v_old, d_i)
        v_cols.append(v_old)
        d_vals.append(d_i)
        iters.append(n_iter)
        conv.append(converged)

    return SvdResult(
        v=np.column_stack(v_cols),
        d=np.asarray(d_vals),
        iterations_per_component=tuple(iters),
        converged=tuple(conv),
    )


def svd_oracle(x: np.ndarray, k: int) -> SvdResult:
    """Centralized rank-k SVD used as the independent verification path."""
    x = linalg.matrix(x)
    if not np.any(x):
        raise DegenerateInputError("cannot decompose a zero matrix")
    if k < 1 or k > min(x.shape):
        raise InvalidRankError(f"rank k={k} is outside 1..{min(x.shape)}")
    _, d, vt = np.linalg.svd(x, full_matrices=False)
    return SvdResult(
        v=vt[:k].T.copy(),
        d=d[:k].copy(),
        iterations_per_component=(0,) * k,
        converged=(True,) * k,
    )
