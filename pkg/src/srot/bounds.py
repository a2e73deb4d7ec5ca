"""Closed-form convergence constants and bounds for semi-relaxed Sinkhorn.

Every bound is a plain function of the problem data ``(C, a, b)``, the
regularization ``(tau, eta)`` and either an iteration index ``k`` or a target
accuracy. Bounds that only hold at one parity of ``k`` refuse the other one
with :class:`~srot.core.ParityError`.

Notation: ``rho = tau / (tau + eta)``, ``alpha = sum(a)``, ``beta = sum(b)``,
``n`` the number of rows of a square problem.

Theorem identifiers used by :func:`evaluate` and :class:`BoundReport`:

=====================  ======  ==========================================
id                     parity  quantity bounded
=====================  ======  ==========================================
log-ratio              even    ``||log(T_k / T*)||_inf``
functional-gap         even    ``f(T_k) - f(T_hat)``
marginal-gap           even    ``||a_k - a||_inf`` (needs ``||u*||_inf``)
marginal-gap-log-b     odd     ``||log b_k - log b||_inf``
marginal-gap-simplex   even    ``||a_k - a||_inf`` for simplex marginals
ot-gap                 even    ``<C, Y> - <C, T_OT>`` after rounding
dual-gap               any     ``max(||u_k - u*||_inf, ||v_k - v*||_inf)``
=====================  ======  ==========================================

"Even" means ``k >= 2`` even, i.e. right after a column update.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .core import CostMatrix, DiscreteMeasure, ParityError, ProblemInstance, SimplexError, vector_entropy

BOUND_SIMPLEX_TOL = 1e-9

EVEN, ODD, ANY = "even", "odd", "any"
THEOREM_PARITY = {
    "log-ratio": EVEN,
    "functional-gap": EVEN,
    "marginal-gap": EVEN,
    "marginal-gap-log-b": ODD,
    "marginal-gap-simplex": EVEN,
    "ot-gap": EVEN,
    "dual-gap": ANY,
}
SIMPLEX_THEOREMS = frozenset({"marginal-gap-simplex", "ot-gap"})


def _vec(x) -> np.ndarray:
    if isinstance(x, DiscreteMeasure):
        return x.weights
    return np.asarray(x, dtype=np.float64)


def _mat(C) -> np.ndarray:
    if isinstance(C, CostMatrix):
        return C.entries
    return np.asarray(C, dtype=np.float64)


def _cinf(C) -> float:
    return C.inf_norm if isinstance(C, CostMatrix) else float(np.abs(_mat(C)).max())


def _c1(C) -> float:
    return C.l1_norm if isinstance(C, CostMatrix) else float(np.abs(_mat(C)).sum())


def _positive(x: np.ndarray, name: str):
    if np.any(x <= 0):
        raise ValueError(f"{name} must be strictly positive")


def _require_simplex(x: np.ndarray, name: str):
    if abs(math.fsum(x) - 1.0) > BOUND_SIMPLEX_TOL:
        raise SimplexError(f"{name} must lie in the probability simplex (sum = {math.fsum(x)!r})")


def check_parity(theorem: str, k: int):
    """Raise :class:`ParityError` unless ``k`` has the parity ``theorem`` needs."""
    want = THEOREM_PARITY[theorem]
    if k < 0:
        raise ParityError(f"iteration must be >= 0, got {k}")
    if want == EVEN and (k % 2 or k < 2):
        raise ParityError(f"{theorem} holds only at even k >= 2 (after a column update), got k={k}")
    if want == ODD and k % 2 == 0:
        raise ParityError(f"{theorem} holds only at odd k (after a row update), got k={k}")


def log_contraction(tau: float, eta: float) -> float:
    """log(tau / (tau + eta)), accurate when eta << tau."""
    return -math.log1p(eta / tau)


def compute_R(a, b, C, eta: float) -> float:
    """R = max(||log a||, ||log b||) + max(log n, ||C||_inf / eta - log n)."""
    a, b = _vec(a), _vec(b)
    _positive(a, "a")
    _positive(b, "b")
    if not eta > 0:
        raise ValueError("eta must be positive")
    n = len(a)
    logn = math.log(n)
    first = max(float(np.abs(np.log(a)).max()), float(np.abs(np.log(b)).max()))
    return first + max(logn, _cinf(C) / eta - logn)


def compute_U(C, eta: float, a) -> float:
    """U = ||C||_inf + eta log(a_max / a_min)."""
    a = _vec(a)
    _positive(a, "a")
    return _cinf(C) + eta * math.log(float(a.max()) / float(a.min()))


def compute_c1_c2(n: int, tau: float, eta: float, R: float, beta: float) -> tuple[float, float]:
    c1 = (2 * n * (tau + eta) * R / tau + 1) * beta
    c2 = 2 * beta * math.log(n)
    return c1, c2


def compute_c3(n: int, a, b) -> float:
    """c3 = 2 log n + 1 - max(H(a), H(b)), with H(x) = -sum x (log x - 1)."""
    a, b = _vec(a), _vec(b)
    return 2 * math.log(n) + 1 - max(vector_entropy(a), vector_entropy(b))


def geometric_term(k: int, tau: float, eta: float, R: float) -> float:
    """(4 tau / eta) R rho^((k-1)/2 - 1), the log-ratio rate shared by most bounds."""
    return 4 * tau / eta * R * math.exp(((k - 1) / 2 - 1) * log_contraction(tau, eta))


def log_ratio_bound(k: int, tau: float, eta: float, R: float) -> float:
    check_parity("log-ratio", k)
    return geometric_term(k, tau, eta, R)


def dual_gap_bound(k: int, tau: float, eta: float, R: float) -> float:
    """2 tau R rho^(k/2 - 1), the distance of the k-th potentials to the optimum."""
    check_parity("dual-gap", k)
    return 2 * tau * R * math.exp((k / 2 - 1) * log_contraction(tau, eta))


def dual_norm_cap(tau: float, eta: float, R: float) -> float:
    """2 (tau + eta) R, valid for any positive marginals."""
    return 2 * (tau + eta) * R


def simplex_dual_cap(C, tau: float, eta: float, a) -> float:
    """tau/(tau+eta) (||C||_inf + eta log(a_max/a_min)); needs a in the simplex."""
    a = _vec(a)
    _require_simplex(a, "a")
    return tau / (tau + eta) * compute_U(C, eta, a)


# functional value gap


def functional_gap_bound(epsilon_prime: float, tau: float, eta: float, C, c1: float, c2: float, beta: float) -> float:
    """(beta ||C||_1 + tau c1) eps' + eta c2, given ||log(T_k/T*)||_inf <= eps'."""
    return (beta * _c1(C) + tau * c1) * epsilon_prime + eta * c2


def functional_gap_bound_at(k: int, tau: float, eta: float, R: float, C, c1: float, c2: float, beta: float) -> float:
    check_parity("functional-gap", k)
    return functional_gap_bound(geometric_term(k, tau, eta, R), tau, eta, C, c1, c2, beta)


def functional_gap_prescription(epsilon_f: float, tau: float, C, c1: float, c2: float, beta: float) -> tuple[float, float]:
    """(eta, eps') = (eps_f / (2 c2), eps_f / (2 (beta ||C||_1 + tau c1))).

    ``c1`` must already be evaluated at the returned ``eta`` for the pair to
    be self-consistent; :func:`prescribe_functional_gap` does that.
    """
    if not epsilon_f > 0:
        raise ValueError("epsilon_f must be positive")
    return epsilon_f / (2 * c2), epsilon_f / (2 * (beta * _c1(C) + tau * c1))


def prescribe_functional_gap(epsilon_f: float, tau: float, a, b, C) -> dict:
    a, b = _vec(a), _vec(b)
    n, beta = len(a), math.fsum(b)
    c2 = 2 * beta * math.log(n)
    if not c2 > 0:
        raise ValueError("c2 = 2 beta log n vanishes (n = 1)")
    eta = epsilon_f / (2 * c2)
    R = compute_R(a, b, C, eta)
    c1, _ = compute_c1_c2(n, tau, eta, R, beta)
    _, eps_prime = functional_gap_prescription(epsilon_f, tau, C, c1, c2, beta)
    return {"epsilon_f": epsilon_f, "tau": tau, "eta": eta, "epsilon_prime": eps_prime, "R": R, "c1": c1, "c2": c2}


def stopping_iteration(epsilon_f: float, tau: float, R: float, c1: float, c2: float, C, beta: float) -> int:
    """Smallest integer k with

    k >= 2 (1 + 2 c2 tau / eps)(log 16 tau R + log c2 (beta ||C||_1 + tau c1) + 2 log(1/eps)) + 3.
    """
    if not epsilon_f > 0:
        raise ValueError("epsilon_f must be positive")
    rhs = (
        2
        * (1 + 2 * c2 * tau / epsilon_f)
        * (math.log(16 * tau * R) + math.log(c2 * (beta * _c1(C) + tau * c1)) + 2 * math.log(1 / epsilon_f))
        + 3
    )
    return int(math.ceil(rhs))


# marginal gap


def marginal_gap_bound_general(k: int, tau: float, eta: float, R: float, gamma: float, u_star_inf: float) -> float:
    """gamma (geometric term + ||u*||_inf / tau) at even k."""
    check_parity("marginal-gap", k)
    return gamma * (geometric_term(k, tau, eta, R) + u_star_inf / tau)


def marginal_gap_log_b_bound(k: int, tau: float, eta: float, R: float) -> float:
    """Bound on ||log b_k - log b||_inf at odd k."""
    check_parity("marginal-gap-log-b", k)
    return geometric_term(k, tau, eta, R)


def marginal_gap_asymptote(tau: float, eta: float, U: float) -> float:
    return U / (tau + eta)


def marginal_gap_bound_simplex(k: int, tau: float, eta: float, R: float, U: float) -> float:
    """Geometric term + U/(tau+eta) at even k; simplex marginals only."""
    check_parity("marginal-gap-simplex", k)
    return geometric_term(k, tau, eta, R) + marginal_gap_asymptote(tau, eta, U)


def prescribe_marginal_gap(epsilon_c: float, C, eta: float, a) -> dict:
    """Parameter recipe for ||a_k - a||_inf <= eps_c.

    With L = log(a_max / a_min), both branches take
    ``tau = 2 ||C||_inf / eps_c + eta (2 L / eps_c - 1)``. For ``eps_c <= 2 L``
    any ``eta > 0`` works and ``eps' = eps_c / 2``. Otherwise ``eta`` must not
    exceed ``2 ||C||_inf / (eps_c - 2 L)`` and the printed recipe reads
    ``eps' = 2 / eps_c``, which is almost surely a typo for ``eps_c / 2``;
    both values are returned so the caller can choose.
    """
    a = _vec(a)
    _require_simplex(a, "a")
    if not (epsilon_c > 0 and eta > 0):
        raise ValueError("epsilon_c and eta must be positive")
    L = math.log(float(a.max()) / float(a.min()))
    cinf = _cinf(C)
    tau = 2 * cinf / epsilon_c + eta * (2 * L / epsilon_c - 1)
    if epsilon_c <= 2 * L:
        branch, eps_prime, eta_max = "small-epsilon", epsilon_c / 2, math.inf
    else:
        branch, eps_prime = "large-epsilon", 2 / epsilon_c
        eta_max = 2 * cinf / (epsilon_c - 2 * L)
        if eta > eta_max:
            raise ValueError(f"eta={eta} exceeds {eta_max} for epsilon_c={epsilon_c}")
    return {
        "epsilon_c": epsilon_c,
        "eta": eta,
        "tau": tau,
        "epsilon_prime": eps_prime,
        "epsilon_prime_consistent": epsilon_c / 2,
        "branch": branch,
        "eta_max": eta_max,
    }


# OT distance gap


def ot_gap_asymptote(tau: float, eta: float, U: float, C, n: int, c3: float) -> float:
    """eta c3 + 2 n ||C||_inf U / tau."""
    return eta * c3 + 2 * n * _cinf(C) * U / tau


def ot_gap_bound(k: int, tau: float, eta: float, R: float, U: float, C, n: int, c3: float) -> float:
    check_parity("ot-gap", k)
    lead = 2 * n * _cinf(C) + _c1(C)
    return lead * geometric_term(k, tau, eta, R) + ot_gap_asymptote(tau, eta, U, C, n, c3)


def prescribe_ot_gap(epsilon_d: float, a, b, C) -> dict:
    """eps' = eps_d / (3 (2n||C||_inf + ||C||_1)), eta = eps_d / (3 c3), tau = 6 n ||C||_inf U / eps_d."""
    a, b = _vec(a), _vec(b)
    _require_simplex(a, "a")
    _require_simplex(b, "b")
    if not epsilon_d > 0:
        raise ValueError("epsilon_d must be positive")
    n = len(a)
    c3 = compute_c3(n, a, b)
    if not c3 > 0:
        raise ValueError(f"c3 = {c3} is not positive")
    cinf = _cinf(C)
    eta = epsilon_d / (3 * c3)
    U = compute_U(C, eta, a)
    return {
        "epsilon_d": epsilon_d,
        "epsilon_prime": epsilon_d / (3 * (2 * n * cinf + _c1(C))),
        "eta": eta,
        "tau": 6 * n * cinf * U / epsilon_d,
        "c3": c3,
        "U": U,
    }


def unregularized_marginal_bound(n: int, C, tau: float) -> float:
    """n ||C||_inf / tau, bounding ||T_hat 1 - a||_1 of the unregularized problem."""
    return n * _cinf(C) / tau


# reports


@dataclass(frozen=True)
class BoundRecord:
    theorem: str
    k: int
    value: float
    asymptote: float


U_STAR_SOURCES = ("reference-run", "dual-norm-cap", "simplex-cap")


@dataclass
class BoundReport:
    cost: CostMatrix = field(repr=False)
    n: int
    tau: float
    eta: float
    R: float
    U: float
    c1: float
    c2: float
    c3: float
    gamma: float
    alpha: float
    beta: float
    dual_norm_cap: float
    simplex_dual_cap: float | None
    u_star_inf: float
    u_star_source: str
    simplex: bool
    records: list[BoundRecord] = field(default_factory=list)

    def constants(self) -> dict:
        keys = (
            "n", "tau", "eta", "R", "U", "c1", "c2", "c3", "gamma", "alpha", "beta",
            "dual_norm_cap", "simplex_dual_cap", "u_star_inf", "u_star_source", "simplex",
        )
        return {key: getattr(self, key) for key in keys}

    @property
    def simplex_cap_vs_U(self) -> float | None:
        """Ratio of the simplex dual cap to U; it is tau/(tau+eta), never 1."""
        return None if self.simplex_dual_cap is None else self.simplex_dual_cap / self.U

    def value(self, theorem: str, k: int) -> float:
        for r in self.records:
            if r.theorem == theorem and r.k == k:
                return r.value
        raise KeyError((theorem, k))

    def evaluate(self, theorem: str, k: int) -> BoundRecord:
        """Evaluate one theorem at iteration ``k`` with this report's constants."""
        if theorem not in THEOREM_PARITY:
            raise ValueError(f"unknown theorem id {theorem!r}; expected one of {sorted(THEOREM_PARITY)}")
        if theorem in SIMPLEX_THEOREMS and not self.simplex:
            raise SimplexError(f"{theorem} requires simplex marginals")
        tau, eta, R = self.tau, self.eta, self.R
        inf = 0.0
        if theorem == "log-ratio":
            val = log_ratio_bound(k, tau, eta, R)
        elif theorem == "functional-gap":
            val = functional_gap_bound_at(k, tau, eta, R, self.cost, self.c1, self.c2, self.beta)
            inf = eta * self.c2
        elif theorem == "marginal-gap":
            val = marginal_gap_bound_general(k, tau, eta, R, self.gamma, self.u_star_inf)
            inf = self.gamma * self.u_star_inf / tau
        elif theorem == "marginal-gap-log-b":
            val = marginal_gap_log_b_bound(k, tau, eta, R)
        elif theorem == "marginal-gap-simplex":
            val = marginal_gap_bound_simplex(k, tau, eta, R, self.U)
            inf = marginal_gap_asymptote(tau, eta, self.U)
        elif theorem == "ot-gap":
            val = ot_gap_bound(k, tau, eta, R, self.U, self.cost, self.n, self.c3)
            inf = ot_gap_asymptote(tau, eta, self.U, self.cost, self.n, self.c3)
        else:
            val = dual_gap_bound(k, tau, eta, R)
        return BoundRecord(theorem, int(k), float(val), float(inf))

    def add(self, theorem: str, k: int) -> BoundRecord:
        rec = self.evaluate(theorem, k)
        self.records.append(rec)
        return rec

    def to_dict(self) -> dict:
        return {
            "constants": self.constants(),
            "records": [r.__dict__ for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=_json_float)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["theorem", "k", "value", "asymptote"])
        for r in self.records:
            w.writerow([r.theorem, r.k, format(r.value, ".17g"), format(r.asymptote, ".17g")])
        return buf.getvalue()


def _json_float(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(type(x).__name__)


def bound_report(
    problem: ProblemInstance,
    tau: float,
    eta: float,
    ks=(),
    theorems=None,
    u_star_inf: float | None = None,
    strict: bool = False,
) -> BoundReport:
    """Evaluate all constants and the requested bounds for ``problem``.

    Parameters
    ----------
    ks : iterable of int
        Iterations at which to evaluate the bounds.
    theorems : iterable of str, optional
        Theorem ids; defaults to every id that applies to the problem.
    u_star_inf : float, optional
        ``||u*||_inf`` from a reference run. Without it the simplex cap is used
        for simplex marginals and ``2 (tau + eta) R`` otherwise.
    strict : bool
        If True, a (theorem, k) pair with the wrong parity raises
        :class:`ParityError`; otherwise it is skipped.
    """
    if problem.n != problem.m:
        raise ValueError("bounds are stated for square problems")
    if not (tau > 0 and eta > 0):
        raise ValueError("tau and eta must be positive")
    a, b, C = problem.a.weights, problem.b.weights, problem.cost
    n = problem.n
    simplex = problem.a.is_simplex(BOUND_SIMPLEX_TOL) and problem.b.is_simplex(BOUND_SIMPLEX_TOL)
    R = compute_R(a, b, C, eta)
    U = compute_U(C, eta, a)
    c1, c2 = compute_c1_c2(n, tau, eta, R, problem.beta)
    c3 = compute_c3(n, a, b)
    cap = dual_norm_cap(tau, eta, R)
    scap = simplex_dual_cap(C, tau, eta, a) if simplex else None
    if u_star_inf is not None:
        source, ustar = "reference-run", float(u_star_inf)
    elif scap is not None:
        source, ustar = "simplex-cap", scap
    else:
        source, ustar = "dual-norm-cap", cap
    report = BoundReport(
        cost=C, n=n, tau=tau, eta=eta, R=R, U=U, c1=c1, c2=c2, c3=c3,
        gamma=max(problem.alpha, problem.beta), alpha=problem.alpha, beta=problem.beta,
        dual_norm_cap=cap, simplex_dual_cap=scap, u_star_inf=ustar, u_star_source=source,
        simplex=simplex,
    )
    if theorems is None:
        theorems = [t for t in THEOREM_PARITY if simplex or t not in SIMPLEX_THEOREMS]
    for k in ks:
        for t in theorems:
            try:
                report.add(t, int(k))
            except ParityError:
                if strict:
                    raise
    return report
