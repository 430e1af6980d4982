"""Input-dependent affine constraint systems and sub-constraint enumeration.

A constraint system is the evaluated pair (A, b) with A of shape (m, n_out)
and b of shape (m,), encoding A y <= b.  Sub-constraints are selected by
index combinations gamma = (j_1 < ... < j_k), 1-based, with
k <= min(m, n_out).  The combination family comes in two flavours:

* full  - every strictly increasing sequence of length 1..min(m, n_out)
* lite  - singletons plus the sequences of length exactly min(m, n_out)

Both are ordered by plain tuple comparison (lexicographic; prefixes sort
before their extensions), which also fixes the tie-break order used during
output selection.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterator, Sequence

import numpy as np

from .linalg import as_matrix, as_vector

# Combination families are materialized eagerly up to this many constraint
# rows and streamed lazily above it, keeping memory bounded at large m.
EAGER_COMBO_LIMIT = 24


@dataclass(frozen=True)
class ConstraintSystem:
    """One evaluated affine system A y <= b."""

    a_matrix: np.ndarray
    b_vector: np.ndarray

    def __post_init__(self):
        a = as_matrix(self.a_matrix)
        b = as_vector(self.b_vector)
        if a.shape[0] != b.shape[0]:
            raise ValueError(
                f"row mismatch: A has {a.shape[0]} rows, b has {b.shape[0]} entries"
            )
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_vector", b)

    @property
    def m(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def n_out(self) -> int:
        return self.a_matrix.shape[1]

    def to_json(self) -> str:
        return json.dumps({"A": self.a_matrix.tolist(), "b": self.b_vector.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ConstraintSystem":
        doc = json.loads(text)
        return cls(np.asarray(doc["A"], dtype=float), np.asarray(doc["b"], dtype=float))


def select_sub(sys: ConstraintSystem, gamma: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Rows of (A, b) picked by the 1-based index sequence gamma, in order."""
    idx = np.asarray(gamma, dtype=int)
    if idx.size == 0:
        raise ValueError("gamma must select at least one constraint")
    if idx.min() < 1 or idx.max() > sys.m:
        raise IndexError(f"gamma indices must lie in 1..{sys.m}, got {tuple(gamma)}")
    rows = idx - 1
    return sys.a_matrix[rows, :], sys.b_vector[rows]


def violation(sys: ConstraintSystem, y) -> np.ndarray:
    """Per-constraint residual max(0, A y - b)."""
    y = as_vector(y)
    if y.shape[0] != sys.n_out:
        raise ValueError(f"y has dim {y.shape[0]}, expected {sys.n_out}")
    return np.maximum(0.0, sys.a_matrix @ y - sys.b_vector)


@dataclass(frozen=True)
class ViolationStats:
    """Summary of a residual vector for reporting."""

    max: float
    mean: float
    frac_violated: float


def violation_stats(residual: np.ndarray, threshold: float = 0.0) -> ViolationStats:
    """max/mean residual plus fraction of entries strictly above `threshold`."""
    r = np.asarray(residual, dtype=float)
    if r.size == 0:
        return ViolationStats(0.0, 0.0, 0.0)
    return ViolationStats(
        max=float(r.max()),
        mean=float(r.mean()),
        frac_violated=float(np.mean(r > threshold)),
    )


class ComboMode(str, Enum):
    FULL = "full"
    LITE = "lite"


def combination_count(m: int, n_out: int, mode: ComboMode = ComboMode.FULL) -> int:
    """Family size, computed from binomials without enumeration."""
    _check_dims(m, n_out)
    kmax = min(m, n_out)
    if mode is ComboMode.FULL:
        return sum(math.comb(m, k) for k in range(1, kmax + 1))
    if kmax == 1:
        return m
    return m + math.comb(m, kmax)


def _check_dims(m: int, n_out: int):
    if m < 1 or n_out < 1:
        raise ValueError(f"need m >= 1 and n_out >= 1, got m={m}, n_out={n_out}")


def _iter_full(m: int, kmax: int, prefix: tuple[int, ...] = (), start: int = 1) -> Iterator[tuple[int, ...]]:
    # Depth-first with extension-before-next-sibling yields exact tuple order.
    for j in range(start, m + 1):
        seq = prefix + (j,)
        yield seq
        if len(seq) < kmax:
            yield from _iter_full(m, kmax, seq, j + 1)


def _iter_lite(m: int, kmax: int) -> Iterator[tuple[int, ...]]:
    if kmax == 1:
        for j in range(1, m + 1):
            yield (j,)
        return
    for j in range(1, m + 1):
        yield (j,)
        for rest in itertools.combinations(range(j + 1, m + 1), kmax - 1):
            yield (j,) + rest


@dataclass(frozen=True)
class CombinationSet:
    """Ordered family of sub-constraint index combinations for (m, n_out)."""

    m: int
    n_out: int
    mode: ComboMode
    _materialized: tuple[tuple[int, ...], ...] | None = field(default=None, repr=False)

    @property
    def k_max(self) -> int:
        return min(self.m, self.n_out)

    @property
    def size(self) -> int:
        return combination_count(self.m, self.n_out, self.mode)

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        if self._materialized is not None:
            return iter(self._materialized)
        if self.mode is ComboMode.FULL:
            return _iter_full(self.m, self.k_max)
        return _iter_lite(self.m, self.k_max)

    def __len__(self) -> int:
        return self.size

    @property
    def combos(self) -> tuple[tuple[int, ...], ...]:
        """Materialized combination list; avoid above the eager limit."""
        if self._materialized is not None:
            return self._materialized
        return tuple(iter(self))


def enumerate_combinations(m: int, n_out: int, mode: ComboMode = ComboMode.FULL) -> CombinationSet:
    """Build the combination family for an (m, n_out) system.

    The family is materialized when m <= EAGER_COMBO_LIMIT and streamed
    lazily otherwise; iteration order is identical either way.
    """
    _check_dims(m, n_out)
    materialized = None
    if m <= EAGER_COMBO_LIMIT:
        kmax = min(m, n_out)
        source = _iter_full(m, kmax) if mode is ComboMode.FULL else _iter_lite(m, kmax)
        materialized = tuple(source)
    return CombinationSet(m=m, n_out=n_out, mode=mode, _materialized=materialized)


class ConstraintProvider:
    """Evaluation contract mapping an input x to its constraint system.

    Subclasses fix (n_in, m, n_out) and must return systems of those
    dimensions for every x.  Providers whose A matrix does not depend on x
    set `constant_a`, which lets callers factor the sub-constraint
    pseudoinverses once and reuse them across samples.  Providers must be
    safe to call concurrently for distinct x.
    """

    n_in: int
    m: int
    n_out: int

    def system(self, x: np.ndarray) -> ConstraintSystem:
        raise NotImplementedError

    @property
    def constant_a(self) -> np.ndarray | None:
        """The shared A matrix, or None when A varies with x."""
        return None

    def b_batch(self, xs: np.ndarray) -> np.ndarray:
        """b vectors for a (S, n_in) batch; default loops over system()."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return np.stack([self.system(x).b_vector for x in xs])


class FixedAProvider(ConstraintProvider):
    """Provider with a constant A matrix and an input-dependent b vector."""

    def __init__(self, a_matrix: np.ndarray, n_in: int):
        self._a = as_matrix(a_matrix)
        self.n_in = n_in
        self.m, self.n_out = self._a.shape

    @property
    def constant_a(self) -> np.ndarray:
        return self._a

    def b_of(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def system(self, x: np.ndarray) -> ConstraintSystem:
        return ConstraintSystem(self._a, self.b_of(np.asarray(x, dtype=float)))

    def b_batch(self, xs: np.ndarray) -> np.ndarray:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        return np.stack([self.b_of(x) for x in xs])
