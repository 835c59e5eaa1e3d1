"""Count data, Rosner's constant-R model and its log-likelihood.

A group contributes ``m`` bilateral subjects (two organs, 0/1/2 responses)
and ``n`` unilateral subjects (one organ, 0/1 response).  Under Rosner's
model every organ responds with probability ``pi_i`` and the conditional
probability of a response given a response in the fellow organ is
``R * pi_i``, with one ``R`` shared by all groups.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.special import xlogy

from .exceptions import (
    DomainError,
    EmptyGroup,
    EmptyStudy,
    InfeasibleParams,
    NegativeCount,
)

#: Slack allowed on cell probabilities before they are clamped to [0, 1].
FEASIBILITY_TOL = 1e-12

COUNT_FIELDS = ("m0", "m1", "m2", "n0", "n1")


@dataclass(frozen=True)
class GroupCounts:
    """Observed counts for one group.

    ``m0, m1, m2`` count bilateral subjects with 0, 1 or 2 responding organs;
    ``n0, n1`` count unilateral subjects without / with a response.
    """

    m0: int
    m1: int
    m2: int
    n0: int
    n1: int

    @property
    def m(self) -> int:
        return self.m0 + self.m1 + self.m2

    @property
    def n(self) -> int:
        return self.n0 + self.n1

    def as_array(self) -> np.ndarray:
        return np.array([self.m0, self.m1, self.m2, self.n0, self.n1], dtype=float)

    @classmethod
    def from_sequence(cls, values: Sequence[int]) -> "GroupCounts":
        if len(values) != 5:
            raise ValueError(f"expected 5 counts (m0, m1, m2, n0, n1), got {len(values)}")
        return cls(*(int(v) for v in values))


@dataclass(frozen=True)
class StudyData:
    """An ordered collection of groups with cached column totals."""

    groups: tuple[GroupCounts, ...]
    labels: tuple[str, ...] | None = None
    counts: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        groups = tuple(
            g if isinstance(g, GroupCounts) else GroupCounts.from_sequence(g)
            for g in self.groups
        )
        object.__setattr__(self, "groups", groups)
        if self.labels is not None:
            labels = tuple(str(lab) for lab in self.labels)
            if len(labels) != len(groups):
                raise ValueError("labels and groups differ in length")
            object.__setattr__(self, "labels", labels)
        arr = np.array([g.as_array() for g in groups], dtype=float).reshape(-1, 5)
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    @classmethod
    def from_array(cls, counts, labels=None) -> "StudyData":
        """Build from a ``(g, 5)`` array-like with columns m0, m1, m2, n0, n1."""
        arr = np.asarray(counts)
        if arr.ndim != 2 or arr.shape[1] != 5:
            raise ValueError(f"counts must have shape (g, 5), got {arr.shape}")
        if not np.all(np.isfinite(arr)) or np.any(arr != np.round(arr)):
            raise ValueError("counts must be whole numbers")
        return cls(tuple(GroupCounts.from_sequence(row) for row in arr.astype(np.int64)), labels)

    @property
    def g(self) -> int:
        return len(self.groups)

    @property
    def m(self) -> np.ndarray:
        """Bilateral subjects per group."""
        return self.counts[:, :3].sum(axis=1)

    @property
    def n(self) -> np.ndarray:
        """Unilateral subjects per group."""
        return self.counts[:, 3:].sum(axis=1)

    S0 = property(lambda self: float(self.counts[:, 0].sum()))
    S1 = property(lambda self: float(self.counts[:, 1].sum()))
    S2 = property(lambda self: float(self.counts[:, 2].sum()))
    N0 = property(lambda self: float(self.counts[:, 3].sum()))
    N1 = property(lambda self: float(self.counts[:, 4].sum()))

    @property
    def M(self) -> float:
        return float(self.counts[:, :3].sum())

    @property
    def N(self) -> float:
        return float(self.counts[:, 3:].sum())

    def pooled(self) -> GroupCounts:
        """All groups collapsed into a single group (the null-hypothesis view)."""
        return GroupCounts.from_sequence(self.counts.sum(axis=0))

    def subset(self, indices: Sequence[int]) -> "StudyData":
        labels = None if self.labels is None else tuple(self.labels[i] for i in indices)
        return StudyData(tuple(self.groups[i] for i in indices), labels)


def validate_study(data) -> StudyData:
    """Check counts and return the data as a :class:`StudyData`.

    Accepts a :class:`StudyData` or anything :meth:`StudyData.from_array`
    understands.
    """
    if not isinstance(data, StudyData):
        arr = np.asarray(data, dtype=float)
        if arr.size == 0:
            raise EmptyStudy("study has no groups")
        if np.any(arr < 0):
            raise NegativeCount("counts must be nonnegative")
        data = StudyData.from_array(arr)
    if data.g == 0:
        raise EmptyStudy("study has no groups")
    counts = data.counts
    if np.any(counts < 0):
        i, j = np.argwhere(counts < 0)[0]
        raise NegativeCount(f"group {i + 1}: {COUNT_FIELDS[j]} = {int(counts[i, j])} is negative")
    empty = np.flatnonzero(counts.sum(axis=1) == 0)
    if empty.size:
        raise EmptyGroup(f"group {empty[0] + 1} has no subjects")
    return data


@dataclass(frozen=True)
class ModelParams:
    """Group proportions ``pi`` and the shared dependence parameter ``R``."""

    pi: tuple[float, ...]
    R: float

    def __post_init__(self):
        object.__setattr__(self, "pi", tuple(float(p) for p in np.atleast_1d(self.pi)))
        object.__setattr__(self, "R", float(self.R))

    @property
    def rho(self) -> tuple[float, ...]:
        return tuple(rho_from(p, self.R) for p in self.pi)

    def is_feasible(self, tol: float = FEASIBILITY_TOL) -> bool:
        if not self.R > 0:
            return False
        for p in self.pi:
            if not 0.0 < p < 1.0:
                return False
            cells = _raw_cells(p, self.R)
            if min(cells) < -tol or max(cells) > 1 + tol:
                return False
        return True


class CellProbabilities(NamedTuple):
    """Probabilities of 0, 1, 2 responses for a bilateral subject; ``q1`` for a unilateral one."""

    p0: float
    p1: float
    p2: float
    q1: float


def _raw_cells(pi, R):
    return (R * pi * pi - 2.0 * pi + 1.0, 2.0 * pi * (1.0 - R * pi), R * pi * pi)


def cell_probabilities(pi: float, R: float) -> CellProbabilities:
    cells = _raw_cells(float(pi), float(R))
    if not (0.0 <= pi <= 1.0) or any(
        c < -FEASIBILITY_TOL or c > 1.0 + FEASIBILITY_TOL or math.isnan(c) for c in cells
    ):
        raise InfeasibleParams(f"(pi={pi}, R={R}) gives cell probabilities {cells}")
    p0, p1, p2 = (min(max(c, 0.0), 1.0) for c in cells)
    return CellProbabilities(p0, p1, p2, float(pi))


def pi_upper(R: float) -> float:
    """Largest ``pi`` for which all bilateral cells are valid at this ``R``.

    For ``R > 1`` the binding constraint is ``R*pi <= 1``; for ``R < 1`` it is
    ``R*pi**2 - 2*pi + 1 >= 0``.
    """
    if R <= 0:
        raise InfeasibleParams(f"R must be positive, got {R}")
    if R >= 1.0:
        return 1.0 / R
    return 1.0 / (1.0 + math.sqrt(1.0 - R))


def group_log_likelihood(counts: np.ndarray, pi, R: float) -> np.ndarray:
    """Per-group log-likelihood for a ``(g, 5)`` count array (constant dropped)."""
    counts = np.asarray(counts, dtype=float).reshape(-1, 5)
    pi = np.broadcast_to(np.asarray(pi, dtype=float), counts.shape[:1])
    args = np.stack(
        [R * pi**2 - 2 * pi + 1, 2 * pi * (1 - R * pi), R * pi**2, 1 - pi, pi], axis=1
    )
    args = np.where((args < 0) & (args > -FEASIBILITY_TOL), 0.0, args)
    bad = (counts > 0) & (args <= 0)
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise DomainError(
            f"group {i + 1}: {COUNT_FIELDS[j]} > 0 but its probability is {args[i, j]:.3g}"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = xlogy(counts, np.maximum(args, 0.0))
    # the 0*log 0 := 0 convention also covers 0*log(negative)
    terms = np.where(counts == 0, 0.0, terms)
    return terms.sum(axis=1)


def log_likelihood(data: StudyData, params: ModelParams) -> float:
    """Rosner-model log-likelihood, additive constant omitted."""
    if len(params.pi) != data.g:
        raise ValueError(f"{len(params.pi)} proportions for {data.g} groups")
    return float(group_log_likelihood(data.counts, np.array(params.pi), params.R).sum())


def rho_from(pi: float, R: float) -> float:
    """Intraclass correlation between the two organs of one subject."""
    if not 0.0 < pi < 1.0:
        raise InfeasibleParams(f"pi must lie in (0, 1), got {pi}")
    return pi * (R - 1.0) / (1.0 - pi)


def R_from(pi: float, rho: float) -> float:
    """Dependence parameter giving correlation ``rho`` at proportion ``pi``."""
    if not 0.0 < pi < 1.0:
        raise InfeasibleParams(f"pi must lie in (0, 1), got {pi}")
    R = (1.0 - pi) * rho / pi + 1.0
    if not R > 0 or not ModelParams((pi,), R).is_feasible():
        raise InfeasibleParams(f"rho={rho} is not attainable at pi={pi}")
    return R
