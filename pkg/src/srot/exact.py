"""Exact and high-accuracy reference solutions.

* :func:`solve_ot_exact` solves the balanced transport LP with a network
  simplex on the bipartite graph, pivoting by Bland's rule.
* :func:`brute_force_ot_uniform` enumerates permutations for tiny uniform
  problems (Birkhoff vertices), an oracle independent of the simplex code.
* :func:`kl_srot_reference` approximates min_T <C,T> + tau KL(T1, a) subject
  to T^T 1 = b by running semi-relaxed Sinkhorn along a decreasing eta path.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import ProblemInstance, TransportPlan
from .solvers import SolverConfig, evaluate_f, sr_sinkhorn

BALANCE_TOL = 1e-10


@dataclass
class LpSolution:
    plan: TransportPlan
    objective: float
    iterations: int
    status: str  # optimal | infeasible | iteration-limit
    u: np.ndarray = field(repr=False, default=None)
    v: np.ndarray = field(repr=False, default=None)

    def reduced_costs(self, C: np.ndarray) -> np.ndarray:
        return C - self.u[:, None] - self.v[None, :]

    def dual_infeasibility(self, C: np.ndarray) -> float:
        """max(0, -min reduced cost)."""
        return max(0.0, -float(self.reduced_costs(C).min()))

    def slackness_residual(self, C: np.ndarray) -> float:
        """sum_ij T_ij |C_ij - u_i - v_j|."""
        return float(np.sum(self.plan.entries * np.abs(self.reduced_costs(C))))

    def to_json(self) -> str:
        return json.dumps(
            {"objective": self.objective, "status": self.status, "iterations": self.iterations}
        )


class _Tree:
    """Spanning tree of basic cells; rows are nodes 0..n-1, columns n..n+m-1."""

    def __init__(self, n: int, m: int):
        self.n, self.m = n, m
        self.adj = [set() for _ in range(n + m)]

    def add(self, i, j):
        self.adj[i].add(self.n + j)
        self.adj[self.n + j].add(i)

    def remove(self, i, j):
        self.adj[i].discard(self.n + j)
        self.adj[self.n + j].discard(i)

    def potentials(self, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.n
        pot = np.zeros(n + self.m)
        seen = np.zeros(n + self.m, dtype=bool)
        seen[0] = True
        queue = deque([0])
        while queue:
            x = queue.popleft()
            for y in self.adj[x]:
                if not seen[y]:
                    seen[y] = True
                    # u_i + v_j = C_ij on basic cells
                    pot[y] = C[x, y - n] - pot[x] if x < n else C[y, x - n] - pot[x]
                    queue.append(y)
        if not seen.all():
            raise RuntimeError("basis is not a spanning tree")
        return pot[:n], pot[n:]

    def path(self, src: int, dst: int) -> list[int]:
        parent = {src: None}
        queue = deque([src])
        while queue:
            x = queue.popleft()
            if x == dst:
                break
            for y in self.adj[x]:
                if y not in parent:
                    parent[y] = x
                    queue.append(y)
        out = [dst]
        while out[-1] != src:
            out.append(parent[out[-1]])
        return out[::-1]


def _northwest_corner(a: np.ndarray, b: np.ndarray):
    n, m = a.size, b.size
    s, d = a.copy(), b.copy()
    X = np.zeros((n, m))
    basis = []
    i = j = 0
    while True:
        x = min(s[i], d[j])
        X[i, j] = x
        s[i] -= x
        d[j] -= x
        basis.append((i, j))
        if i == n - 1 and j == m - 1:
            break
        # move exactly one index so the basis stays a spanning tree
        if i == n - 1:
            j += 1
        elif j == m - 1:
            i += 1
        elif s[i] <= d[j]:
            i += 1
        else:
            j += 1
    return X, basis


def solve_ot_exact(problem: ProblemInstance, max_iterations: int = 1_000_000) -> LpSolution:
    """Solve min <C,T> over T >= 0, T 1 = a, T^T 1 = b.

    Starts from the northwest-corner basis and pivots with Bland's rule: the
    entering cell is the first (row-major) cell with negative reduced cost,
    the leaving cell the first among the tied minimizers on the cycle.

    Returns
    -------
    LpSolution
        With the optimal plan, objective, pivot count and the dual potentials
        ``u``, ``v`` (``u_0 = 0``).
    """
    C = problem.C
    a, b = problem.a.weights, problem.b.weights
    n, m = C.shape
    sa, sb = math.fsum(a), math.fsum(b)
    if sa <= 0 or sb <= 0:
        raise ValueError("zero-mass instance")
    if abs(sa - sb) > BALANCE_TOL * max(sa, sb):
        raise ValueError(f"unbalanced totals: {sa!r} vs {sb!r}")
    # spread the rounding residue of the totals onto the last column
    b = b.copy()
    b[-1] += sa - math.fsum(b)
    b[-1] = max(b[-1], 0.0)

    X, basis = _northwest_corner(a, b)
    tree = _Tree(n, m)
    is_basic = np.zeros((n, m), dtype=bool)
    for i, j in basis:
        tree.add(i, j)
        is_basic[i, j] = True
    scale = max(1.0, float(np.abs(C).max()))
    tol = 1e-12 * scale

    status = "iteration-limit"
    it = 0
    while it < max_iterations:
        u, v = tree.potentials(C)
        red = C - u[:, None] - v[None, :]
        red[is_basic] = 0.0
        neg = np.flatnonzero(red.ravel() < -tol)
        if neg.size == 0:
            status = "optimal"
            break
        ei, ej = divmod(int(neg[0]), m)
        nodes = tree.path(ei, n + ej)
        # cycle: entering (+), then alternately - + - ... along the tree path
        cells = []
        for t in range(len(nodes) - 1):
            x, y = nodes[t], nodes[t + 1]
            cells.append((x, y - n) if x < n else (y, x - n))
        minus = cells[0::2]
        plus = cells[1::2]
        theta = min(X[c] for c in minus)
        leave = min((c for c in minus if X[c] == theta), key=lambda c: c[0] * m + c[1])
        for c in minus:
            X[c] -= theta
        for c in plus:
            X[c] += theta
        X[ei, ej] += theta
        X[leave] = 0.0
        tree.remove(*leave)
        is_basic[leave] = False
        tree.add(ei, ej)
        is_basic[ei, ej] = True
        it += 1
    else:
        u, v = tree.potentials(C)

    np.maximum(X, 0.0, out=X)
    return LpSolution(TransportPlan(X), float(np.sum(C * X)), it, status, u, v)


def brute_force_ot_uniform(C, n: int | None = None) -> float:
    """(1/n) min over permutations sigma of sum_i C[i, sigma(i)], for n <= 8."""
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0] if n is None else int(n)
    if C.shape != (n, n):
        raise ValueError(f"expected a {n}x{n} cost matrix")
    if n > 8:
        raise ValueError("brute force limited to n <= 8")
    perms = np.array(list(itertools.permutations(range(n))), dtype=np.intp)
    totals = C[np.arange(n), perms].sum(axis=1)
    return float(totals.min()) / n


REFERENCE_ETAS = (1e-1, 1e-2, 1e-3, 1e-4)


class ContinuationStage(NamedTuple):
    eta: float
    iterations: int  # cumulative half-updates at the end of the stage
    value: float


class KlSrotReference(NamedTuple):
    plan: TransportPlan
    value: float
    error_estimate: float
    monotone: bool
    stages: tuple


def kl_srot_continuation(
    problem: ProblemInstance,
    tau: float,
    etas=REFERENCE_ETAS,
    tol: float = 1e-12,
    max_iterations: int = 100_000,
    monotone_tol: float = 1e-9,
) -> KlSrotReference:
    """Approximate the unregularized optimum f(T_hat) by shrinking eta.

    Each stage warm-starts from the previous potentials and runs until the
    largest potential increment over a sweep is at most ``tol`` or
    ``max_iterations`` half-updates are spent, always stopping right after a
    column update so the endpoint is feasible. Because every endpoint is
    feasible its ``f`` is an upper bound on the optimum; the reported value
    is the smallest one, and ``error_estimate`` is the last successive
    difference. ``monotone`` is False when some stage increased ``f`` by
    more than ``monotone_tol``.
    """
    if max_iterations % 2:
        max_iterations += 1
    init = None
    stages = []
    best = None
    for eta in etas:
        cfg = SolverConfig(tau=tau, eta=eta, max_iterations=max_iterations, trace_every=0, convergence_tol=tol)
        res = sr_sinkhorn(problem, cfg, init=init)
        init = res.potentials
        val = evaluate_f(problem, res.plan, tau)
        stages.append(ContinuationStage(eta, res.potentials.iteration, val))
        if best is None or val < best[1]:
            best = (res.plan, val)
    values = [s.value for s in stages]
    err = abs(values[-1] - values[-2]) if len(values) > 1 else math.nan
    monotone = all(y <= x + monotone_tol for x, y in zip(values, values[1:]))
    return KlSrotReference(best[0], best[1], err, monotone, tuple(stages))


def kl_srot_reference(problem: ProblemInstance, tau: float, **kw) -> tuple[TransportPlan, float]:
    """(plan, value) of :func:`kl_srot_continuation`."""
    ref = kl_srot_continuation(problem, tau, **kw)
    return ref.plan, ref.value
