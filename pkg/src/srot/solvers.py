"""Alternating dual solvers for entropic transport problems.

All three Sinkhorn variants share one engine. Each side of the problem is
either hard (the marginal is enforced exactly after its update) or relaxed
by a KL penalty of weight ``w``; a relaxed update is the hard one contracted
by ``w / (w + eta)``:

* semi-relaxed Sinkhorn: rows relaxed with weight ``tau``, columns hard;
* standard Sinkhorn: both sides hard;
* unbalanced Sinkhorn: both sides relaxed, weights ``tau1`` and ``tau2``.

Iteration ``k`` counts half-updates. Even ``k`` updates the row potential
``u``, odd ``k`` updates the column potential ``v``, so the state after an
even number of updates has just had its columns refitted.

The potentials are the solver state. Row and column log-sums are evaluated
against a kernel cached at an absorption point ``(u0, v0)``, shifted so that
every row (column) maximum is one; the cache is rebuilt whenever a potential
has moved more than ``ABSORB_LIMIT * eta`` from that point, which keeps every
exponential in range regardless of ``tau`` and ``eta``.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .core import NumericalError, ProblemInstance, TransportPlan, kl_divergence, entropy

ABSORB_LIMIT = 50.0
EXP_LIMIT = 700.0


class Parity(str, enum.Enum):
    INIT = "init"
    U = "u"  # even update, row potential
    V = "v"  # odd update, column potential


@dataclass(frozen=True)
class DualPotentials:
    u: np.ndarray
    v: np.ndarray
    iteration: int = 0
    parity: Parity = Parity.INIT

    def __post_init__(self):
        u = np.array(self.u, dtype=np.float64)
        v = np.array(self.v, dtype=np.float64)
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "parity", Parity(self.parity))
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")
        if self.iteration == 0 and (np.any(u != 0) or np.any(v != 0)):
            raise ValueError("potentials at iteration 0 must be zero")
        if self.iteration > 0 and self.parity is Parity.INIT:
            raise ValueError("parity must be set after the first update")

    @classmethod
    def zeros(cls, n: int, m: int | None = None) -> DualPotentials:
        return cls(np.zeros(n), np.zeros(n if m is None else m))

    def check_shape(self, problem: ProblemInstance):
        if self.u.shape != (problem.n,) or self.v.shape != (problem.m,):
            raise ValueError(
                f"potential shapes {self.u.shape}, {self.v.shape} do not match "
                f"problem {problem.n}x{problem.m}"
            )


@dataclass(frozen=True)
class SolverConfig:
    tau: float = 1.0
    eta: float = 0.1
    max_iterations: int = 1000
    trace_every: int = 1
    convergence_tol: float = 0.0
    record_potentials: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.trace_every < 0 or self.convergence_tol < 0:
            raise ValueError("trace_every and convergence_tol must be nonnegative")


TRACE_COLUMNS = ("iter", "parity", "distance", "f", "g", "row_gap_inf", "col_gap_inf", "dual_obj")


@dataclass
class TraceRecord:
    iteration: int
    parity: Parity
    distance: float
    f: float
    g: float
    row_gap_inf: float
    col_gap_inf: float
    dual_obj: float
    u: np.ndarray | None = None
    v: np.ndarray | None = None

    def row(self) -> list:
        return [
            self.iteration,
            self.parity.value,
            self.distance,
            self.f,
            self.g,
            self.row_gap_inf,
            self.col_gap_inf,
            self.dual_obj,
        ]


def _fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


@dataclass
class SolverTrace:
    records: list[TraceRecord] = field(default_factory=list)

    def append(self, rec: TraceRecord):
        if self.records and rec.iteration <= self.records[-1].iteration:
            raise ValueError("trace iterations must be strictly increasing")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def iterations(self) -> np.ndarray:
        return np.array([r.iteration for r in self.records], dtype=np.int64)

    def series(self, name: str) -> np.ndarray:
        attr = {"iter": "iteration", "parity": "parity"}.get(name, name)
        return np.array([getattr(r, attr) for r in self.records])

    def at_parity(self, parity: Parity | str) -> list[TraceRecord]:
        p = Parity(parity)
        return [r for r in self.records if r.parity is p]

    def to_csv(self) -> str:
        lines = [",".join(TRACE_COLUMNS)]
        lines += [",".join(_fmt(x) for x in r.row()) for r in self.records]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        rows = [dict(zip(TRACE_COLUMNS, r.row())) for r in self.records]
        return json.dumps({"columns": list(TRACE_COLUMNS), "records": rows})


class SolverResult(NamedTuple):
    plan: TransportPlan
    potentials: DualPotentials
    trace: SolverTrace


def plan_from_potentials(problem: ProblemInstance, d: DualPotentials, eta: float) -> TransportPlan:
    """T_ij = exp((u_i + v_j - C_ij) / eta)."""
    if not eta > 0:
        raise ValueError("eta must be positive")
    d.check_shape(problem)
    M = (d.u[:, None] + d.v[None, :] - problem.C) / eta
    if not np.all(np.isfinite(M)):
        i, j = np.argwhere(~np.isfinite(M))[0]
        raise NumericalError(f"non-finite exponent at ({i}, {j})")
    if M.max() > EXP_LIMIT:
        i, j = np.unravel_index(np.argmax(M), M.shape)
        raise NumericalError(f"exponent {M[i, j]:.6g} > {EXP_LIMIT} at ({i}, {j}): plan overflows")
    return TransportPlan(np.exp(M))


class _KernelCache:
    """Row/column log-sums of exp((u + v - C)/eta) near an absorption point."""

    def __init__(self, C: np.ndarray, eta: float):
        self.C = C
        self.eta = eta
        self.u0 = None
        self.absorptions = 0

    def absorb(self, u, v):
        M = (u[:, None] + v[None, :] - self.C) / self.eta
        if not np.all(np.isfinite(M)):
            i, j = np.argwhere(~np.isfinite(M))[0]
            raise NumericalError(f"non-finite exponent at ({i}, {j})")
        self.r = M.max(axis=1)
        self.c = M.max(axis=0)
        self.Kr = np.exp(M - self.r[:, None])
        self.Kc = np.exp(M - self.c[None, :])
        self.CKr = None
        self.u0 = u.copy()
        self.v0 = v.copy()
        self._du = (u, np.zeros_like(u))
        self._dv = (v, np.zeros_like(v))
        self.absorptions += 1

    def _delta(self, x, memo, x0):
        # potentials are replaced, never mutated, so identity marks an unchanged side
        if memo[0] is x:
            return memo[1], True
        d = (x - x0) / self.eta
        return d, np.abs(d).max() <= ABSORB_LIMIT

    def _deltas(self, u, v):
        if self.u0 is not None:
            du, ok_u = self._delta(u, self._du, self.u0)
            dv, ok_v = self._delta(v, self._dv, self.v0)
            if ok_u and ok_v:
                self._du, self._dv = (u, du), (v, dv)
                return du, dv
        self.absorb(u, v)
        return self._du[1], self._dv[1]

    def log_row_sums(self, u, v) -> np.ndarray:
        du, dv = self._deltas(u, v)
        return self.r + du + np.log(self.Kr @ np.exp(dv))

    def log_col_sums(self, u, v) -> np.ndarray:
        du, dv = self._deltas(u, v)
        return self.c + dv + np.log(np.exp(du) @ self.Kc)

    def distance(self, u, v) -> float:
        """<C, T> at the current potentials."""
        du, dv = self._deltas(u, v)
        if self.CKr is None:
            self.CKr = self.C * self.Kr
        return float(np.exp(self.r + du) @ (self.CKr @ np.exp(dv)))


def _finite_log(x: np.ndarray, what: str, k: int) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        idx = int(np.argwhere(~np.isfinite(x))[0][0])
        raise NumericalError(f"log {what}[{idx}] is not finite at iteration {k} (underflow or overflow)")
    return x


def _contraction(weight: float, eta: float) -> float:
    return 1.0 if math.isinf(weight) else weight / (weight + eta)


class _Objective:
    """Primal and dual objectives for given side weights (inf = hard side)."""

    def __init__(self, problem: ProblemInstance, eta: float, row_weight: float, col_weight: float):
        self.p = problem
        self.eta = eta
        self.wr = row_weight
        self.wc = col_weight

    def snapshot(self, cache: _KernelCache, u, v, k: int, parity: Parity, keep: bool) -> TraceRecord:
        p, eta = self.p, self.eta
        a, b = p.a.weights, p.b.weights
        lr = cache.log_row_sums(u, v)
        lc = cache.log_col_sums(u, v)
        ak, bk = np.exp(lr), np.exp(lc)
        dist = cache.distance(u, v)
        mass = float(ak.sum())
        # sum T log T = (u.a_k + v.b_k - <C,T>) / eta since log T = (u + v - C)/eta
        tlogt = (float(u @ ak) + float(v @ bk) - dist) / eta
        H = -(tlogt - mass)
        f = dist
        dual = eta * mass
        for w, marg, target, pot in ((self.wr, ak, a, u), (self.wc, bk, b, v)):
            if math.isinf(w):
                dual -= float(pot @ target)
            else:
                f += w * kl_divergence(marg, target)
                dual += w * float(target @ np.exp(-pot / w))
        return TraceRecord(
            iteration=k,
            parity=parity,
            distance=dist,
            f=f,
            g=f - eta * H,
            row_gap_inf=float(np.abs(ak - a).max()),
            col_gap_inf=float(np.abs(bk - b).max()),
            dual_obj=dual,
            u=u.copy() if keep else None,
            v=v.copy() if keep else None,
        )


def _alternating(
    problem: ProblemInstance,
    eta: float,
    row_weight: float,
    col_weight: float,
    max_iterations: int,
    trace_every: int = 1,
    convergence_tol: float = 0.0,
    record_potentials: bool = False,
    init: DualPotentials | None = None,
    stop_when: Callable[[TraceRecord], bool] | None = None,
) -> SolverResult:
    if not eta > 0:
        raise ValueError("eta must be positive")
    a, b = problem.a.weights, problem.b.weights
    if np.any(a <= 0) or np.any(b <= 0):
        raise ValueError("marginals must be strictly positive")
    if init is None:
        init = DualPotentials.zeros(problem.n, problem.m)
    init.check_shape(problem)
    u = np.array(init.u, dtype=np.float64)
    v = np.array(init.v, dtype=np.float64)
    k0 = init.iteration
    parity = init.parity
    log_a, log_b = np.log(a), np.log(b)
    fr, fc = _contraction(row_weight, eta), _contraction(col_weight, eta)
    cache = _KernelCache(problem.C, eta)
    obj = _Objective(problem, eta, row_weight, col_weight)
    trace = SolverTrace()
    if trace_every:
        trace.append(obj.snapshot(cache, u, v, k0, parity, record_potentials))

    step_u = step_v = math.inf
    k = k0
    for _ in range(max_iterations):
        if k % 2 == 0:
            lak = cache.log_row_sums(u, v)
            u_new = fr * (u + eta * (log_a - lak))
            step_u = float(np.abs(u_new - u).max())
            if not math.isfinite(step_u):
                _finite_log(lak, "a_k", k)
                raise NumericalError(f"row potential became non-finite at iteration {k}")
            u = u_new
            parity = Parity.U
        else:
            lbk = cache.log_col_sums(u, v)
            v_new = fc * (v + eta * (log_b - lbk))
            step_v = float(np.abs(v_new - v).max())
            if not math.isfinite(step_v):
                _finite_log(lbk, "b_k", k)
                raise NumericalError(f"column potential became non-finite at iteration {k}")
            v = v_new
            parity = Parity.V
        k += 1
        done = k - k0 >= max_iterations
        converged = (
            convergence_tol > 0 and k % 2 == 0 and max(step_u, step_v) <= convergence_tol
        )
        record = trace_every and (k % trace_every == 0 or done or converged)
        if record or stop_when is not None:
            snap = obj.snapshot(cache, u, v, k, parity, record_potentials)
            if record:
                trace.append(snap)
            if stop_when is not None and stop_when(snap):
                if not record and trace_every:
                    trace.append(snap)
                break
        if converged:
            break

    pots = DualPotentials(u, v, k, parity)
    return SolverResult(plan_from_potentials(problem, pots, eta), pots, trace)


def sr_sinkhorn(
    problem: ProblemInstance,
    cfg: SolverConfig,
    init: DualPotentials | None = None,
    stop_when: Callable[[TraceRecord], bool] | None = None,
) -> SolverResult:
    """Semi-relaxed Sinkhorn: KL-penalized rows (weight ``tau``), exact columns.

    Even update::

        u <- tau/(tau+eta) * (u + eta * (log a - log a_k))

    odd update::

        v <- v + eta * (log b - log b_k)

    where ``a_k``/``b_k`` are the row/column sums of the current plan. After
    every odd update the plan's column sums equal ``b`` to rounding error.

    Parameters
    ----------
    problem : ProblemInstance
        ``a`` and ``b`` must be strictly positive.
    cfg : SolverConfig
        ``tau``, ``eta``, iteration budget, trace stride and optional early
        stop on the largest potential increment over a full sweep.
    init : DualPotentials, optional
        Warm start; defaults to zero potentials at iteration 0.
    stop_when : callable, optional
        Called with a :class:`TraceRecord` after every half-update; returning
        True stops the run.

    Returns
    -------
    SolverResult
        ``(plan, potentials, trace)``.
    """
    return _alternating(
        problem,
        cfg.eta,
        cfg.tau,
        math.inf,
        cfg.max_iterations,
        cfg.trace_every,
        cfg.convergence_tol,
        cfg.record_potentials,
        init,
        stop_when,
    )


def standard_sinkhorn(
    problem: ProblemInstance,
    eta: float,
    max_iterations: int,
    trace_every: int = 1,
    convergence_tol: float = 0.0,
) -> SolverResult:
    """Classical balanced Sinkhorn in the same potential form (requires alpha == beta)."""
    if abs(problem.alpha - problem.beta) > 1e-10 * max(problem.alpha, problem.beta):
        raise ValueError("standard Sinkhorn needs equal total masses")
    return _alternating(
        problem, eta, math.inf, math.inf, max_iterations, trace_every, convergence_tol
    )


def uot_sinkhorn(
    problem: ProblemInstance,
    tau1: float,
    tau2: float,
    eta: float,
    max_iterations: int,
    trace_every: int = 1,
    convergence_tol: float = 0.0,
) -> SolverResult:
    """Unbalanced Sinkhorn with KL weights ``tau1`` (rows) and ``tau2`` (columns).

    Passing ``math.inf`` for a weight makes that side hard.
    """
    if not (tau1 > 0 and tau2 > 0):
        raise ValueError("tau1 and tau2 must be positive")
    return _alternating(problem, eta, tau1, tau2, max_iterations, trace_every, convergence_tol)


def pot_column_min(problem: ProblemInstance) -> tuple[TransportPlan, float]:
    """Solve min <C,T> s.t. T >= 0, T^T 1 = b by sending each column to its cheapest row.

    Ties go to the smallest row index.
    """
    C, b = problem.C, problem.b.weights
    rows = np.argmin(C, axis=0)
    T = np.zeros_like(C)
    T[rows, np.arange(C.shape[1])] = b
    value = float(np.dot(C[rows, np.arange(C.shape[1])], b))
    return TransportPlan(T), value


def dual_objective(problem: ProblemInstance, d: DualPotentials, tau: float, eta: float) -> float:
    """h(u, v) = eta sum exp((u+v-C)/eta) - v.b + tau a.exp(-u/tau)."""
    T = plan_from_potentials(problem, d, eta).entries
    a, b = problem.a.weights, problem.b.weights
    return float(eta * T.sum() - d.v @ b + tau * (a @ np.exp(-d.u / tau)))


def dual_gradient(
    problem: ProblemInstance, d: DualPotentials, tau: float, eta: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`dual_objective`; zero exactly at the dual optimum."""
    T = plan_from_potentials(problem, d, eta)
    a, b = problem.a.weights, problem.b.weights
    gu = T.row_marginal() - a * np.exp(-d.u / tau)
    gv = T.col_marginal() - b
    return gu, gv


def _entries(T) -> np.ndarray:
    return T.entries if isinstance(T, TransportPlan) else np.asarray(T, dtype=np.float64)


def evaluate_f(problem: ProblemInstance, T, tau: float) -> float:
    """f(T) = <C,T> + tau KL(T 1, a)."""
    X = _entries(T)
    return float(np.sum(problem.C * X) + tau * kl_divergence(X.sum(axis=1), problem.a.weights))


def evaluate_g(problem: ProblemInstance, T, tau: float, eta: float) -> float:
    """g(T) = f(T) - eta H(T)."""
    return evaluate_f(problem, T, tau) - eta * entropy(_entries(T))
