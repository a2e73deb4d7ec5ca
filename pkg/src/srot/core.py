"""Numeric building blocks shared by every solver: measures, cost matrices,
transport plans, divergences and seeded problem generation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

SIMPLEX_TOL = 1e-12


class SrotError(Exception):
    """Base class for errors raised by this package."""


class NumericalError(SrotError, ArithmeticError):
    """Overflow or underflow detected while evaluating plans or potentials."""


class ParityError(SrotError, ValueError):
    """A bound was requested at an iteration parity where it does not hold."""


class SimplexError(SrotError, ValueError):
    """Input measures are required to lie in the probability simplex."""


def _frozen(x, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiscreteMeasure:
    """Nonnegative weight vector.

    ``simplex=True`` additionally asserts that the weights sum to one.
    """

    weights: np.ndarray
    simplex: bool = False
    total: float = field(init=False)

    def __post_init__(self):
        w = _frozen(self.weights, 1)
        if not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "total", float(math.fsum(w)))
        if self.simplex and abs(self.total - 1.0) > SIMPLEX_TOL:
            raise SimplexError(f"simplex measure sums to {self.total!r}")

    def __len__(self):
        return self.weights.shape[0]

    @classmethod
    def normalized(cls, weights) -> DiscreteMeasure:
        w = np.asarray(weights, dtype=np.float64)
        return cls(w / math.fsum(w), simplex=True)

    def is_simplex(self, tol: float = 1e-9) -> bool:
        return abs(self.total - 1.0) <= tol

    @property
    def positive(self) -> bool:
        return bool(np.all(self.weights > 0))


@dataclass(frozen=True)
class CostMatrix:
    entries: np.ndarray
    inf_norm: float = field(init=False)
    l1_norm: float = field(init=False)

    def __post_init__(self):
        c = _frozen(self.entries, 2)
        if not np.all(np.isfinite(c)):
            raise ValueError("cost entries must be finite")
        object.__setattr__(self, "entries", c)
        object.__setattr__(self, "inf_norm", float(np.abs(c).max()) if c.size else 0.0)
        object.__setattr__(self, "l1_norm", float(np.abs(c).sum()))

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    @property
    def rows(self) -> int:
        return self.entries.shape[0]

    @property
    def cols(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class TransportPlan:
    entries: np.ndarray

    def __post_init__(self):
        t = _frozen(self.entries, 2)
        if np.any(np.isnan(t)):
            raise ValueError("plan contains NaN")
        if np.any(t < 0):
            raise ValueError("plan entries must be nonnegative")
        object.__setattr__(self, "entries", t)

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape

    def row_marginal(self) -> np.ndarray:
        return self.entries.sum(axis=1)

    def col_marginal(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    @property
    def mass(self) -> float:
        return float(self.entries.sum())

    def cost(self, cost: CostMatrix | np.ndarray) -> float:
        c = cost.entries if isinstance(cost, CostMatrix) else np.asarray(cost)
        return float(np.sum(c * self.entries))

    def to_csv(self) -> str:
        return matrix_to_csv(self.entries)


@dataclass(frozen=True)
class ProblemInstance:
    cost: CostMatrix
    a: DiscreteMeasure
    b: DiscreteMeasure
    rng_seed: int | None = None
    generator_params: dict[str, Any] | None = None

    def __post_init__(self):
        if len(self.a) != self.cost.rows or len(self.b) != self.cost.cols:
            raise ValueError(
                f"measure sizes ({len(self.a)}, {len(self.b)}) do not match "
                f"cost shape {self.cost.shape}"
            )

    @classmethod
    def from_arrays(cls, C, a, b, **kw) -> ProblemInstance:
        return cls(CostMatrix(C), DiscreteMeasure(a), DiscreteMeasure(b), **kw)

    @property
    def n(self) -> int:
        return self.cost.rows

    @property
    def m(self) -> int:
        return self.cost.cols

    @property
    def C(self) -> np.ndarray:
        return self.cost.entries

    @property
    def alpha(self) -> float:
        return self.a.total

    @property
    def beta(self) -> float:
        return self.b.total

    def to_dict(self) -> dict[str, Any]:
        return {
            "n": self.n,
            "m": self.m,
            "cost": self.C.tolist(),
            "a": self.a.weights.tolist(),
            "b": self.b.weights.tolist(),
            "seed": self.rng_seed,
            "generator_params": self.generator_params,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> ProblemInstance:
        C = np.asarray(d["cost"], dtype=np.float64)
        if C.ndim != 2 or C.shape[0] != d.get("n", C.shape[0]):
            raise ValueError("cost array does not match declared n")
        return cls.from_arrays(
            C, d["a"], d["b"], rng_seed=d.get("seed"), generator_params=d.get("generator_params")
        )

    @classmethod
    def from_json(cls, text: str) -> ProblemInstance:
        return cls.from_dict(json.loads(text))


def matrix_to_csv(M: np.ndarray) -> str:
    """Row-major ``i,j,value`` export."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["i", "j", "value"])
    rows, cols = M.shape
    for i in range(rows):
        for j in range(cols):
            w.writerow([i, j, format(float(M[i, j]), ".17g")])
    return buf.getvalue()


def matrix_from_csv(text: str) -> np.ndarray:
    reader = csv.DictReader(io.StringIO(text))
    items = [(int(r["i"]), int(r["j"]), float(r["value"])) for r in reader]
    if not items:
        return np.zeros((0, 0))
    n = max(i for i, _, _ in items) + 1
    m = max(j for _, j, _ in items) + 1
    M = np.zeros((n, m))
    for i, j, val in items:
        M[i, j] = val
    return M


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def xlogx(x: np.ndarray) -> np.ndarray:
    """Elementwise x*log(x) with 0*log(0) = 0."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def kl_divergence(x, y) -> float:
    """Generalized KL divergence sum_i x_i log(x_i/y_i) - x_i + y_i.

    Zero entries of ``x`` contribute ``y_i`` (0 log 0 = 0).
    """
    x, y = _check_pair(x, y)
    if np.any(x < 0):
        raise ValueError("x must be nonnegative")
    if np.any(y <= 0):
        raise ValueError("y must be strictly positive")
    pos = x > 0
    val = np.sum(x[pos] * np.log(x[pos] / y[pos])) - x.sum() + y.sum()
    return float(val)


def entropy(T) -> float:
    """H(T) = -sum T_ij (log T_ij - 1); zero entries contribute nothing."""
    arr = T.entries if isinstance(T, TransportPlan) else np.asarray(T, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("entropy of a matrix with negative entries")
    return float(-(xlogx(arr).sum() - arr.sum()))


def vector_entropy(x) -> float:
    """The matrix entropy formula applied to a weight vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a vector")
    return entropy(x[None, :])


def entropy_upper_bound(total_mass: float, n: int) -> float:
    """2 t log n + t - t log t, the largest entropy of an n x n plan of mass t."""
    t = float(total_mass)
    return 2 * t * math.log(n) + t - (t * math.log(t) if t > 0 else 0.0)


def log_mean_value_check(x: float, y: float, b: float) -> bool:
    """Return whether log x - log y >= (x - y) / b for 0 < y < x < b.

    The inequality always holds; the function exists so property tests can
    exercise it.
    """
    if not (0 < y < x < b):
        raise ValueError(f"require 0 < y < x < b, got y={y}, x={x}, b={b}")
    return math.log(x) - math.log(y) >= (x - y) / b


def log_mean_value_check_vec(x, y, b: float) -> bool:
    """Max-norm form: ||log x - log y||_inf >= ||x - y||_inf / b for x, y in (0, b)."""
    x, y = _check_pair(x, y)
    if np.any(x <= 0) or np.any(y <= 0) or np.any(x >= b) or np.any(y >= b):
        raise ValueError("entries must lie in (0, b)")
    lhs = np.max(np.abs(np.log(x) - np.log(y)))
    rhs = np.max(np.abs(x - y)) / b
    return bool(lhs >= rhs)


# Stream layout for SeedSequence.spawn: child 0 draws C, child 1 draws a,
# child 2 draws b. Each draw uses its own PCG64 stream so changing one shape
# parameter never shifts the others.
_STREAMS = ("cost", "a", "b")


def instance_streams(seed: int) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(int(seed)).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.PCG64(ss)) for name, ss in zip(_STREAMS, children)}


def generate_instance(
    n: int,
    cost_lo: float = 1.0,
    cost_hi: float = 10.0,
    weight_lo: float = 1.0,
    weight_hi: float = 5.0,
    normalize: bool = True,
    seed: int = 0,
    m: int | None = None,
) -> ProblemInstance:
    """Draw a random dense instance.

    Cost entries are i.i.d. uniform on ``[cost_lo, cost_hi]`` and the weights
    uniform on ``[weight_lo, weight_hi]``, divided by their sums when
    ``normalize`` is set. The same seed always gives the same arrays.
    """
    m = n if m is None else m
    if n < 1 or m < 1:
        raise ValueError("n must be >= 1")
    if not cost_lo <= cost_hi:
        raise ValueError("invalid cost interval")
    if not (0 < weight_lo <= weight_hi):
        raise ValueError("invalid weight interval")
    rng = instance_streams(seed)
    C = cost_lo + (cost_hi - cost_lo) * rng["cost"].random((n, m))
    a = weight_lo + (weight_hi - weight_lo) * rng["a"].random(n)
    b = weight_lo + (weight_hi - weight_lo) * rng["b"].random(m)
    params = {
        "n": n,
        "m": m,
        "cost_lo": cost_lo,
        "cost_hi": cost_hi,
        "weight_lo": weight_lo,
        "weight_hi": weight_hi,
        "normalize": normalize,
    }
    if normalize:
        ma, mb = DiscreteMeasure.normalized(a), DiscreteMeasure.normalized(b)
    else:
        ma, mb = DiscreteMeasure(a), DiscreteMeasure(b)
    return ProblemInstance(CostMatrix(C), ma, mb, rng_seed=int(seed), generator_params=params)
