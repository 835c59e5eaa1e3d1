"""Seeded Monte Carlo estimation of type I error and power.

Every replicate ``r`` of scenario ``s`` draws from its own generator,
``np.random.default_rng(SeedSequence(seed, spawn_key=(s, r)))``, so any
replicate can be regenerated on its own and the results do not depend on
how replicates are split across workers.
"""
from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InfeasibleParams
from .inference import METHODS, batch_statistics, chi_square_sf
from .mle import DOMAINS
from .model import ModelParams, R_from, StudyData, cell_probabilities

DEFAULT_REPLICATES = 10_000
CHUNK_SIZE = 1000
#: Scenarios whose skipped fraction exceeds this are flagged in the report.
SKIP_FLAG_FRACTION = 0.01
ALL_METHODS = ("lr", "wald", "score", "donner")
SWEEP_HEADER = ("pair_index", "pi0", "rho0", "method", "rejection_rate", "mc_se", "skipped")
# spawn key used for the (pi0, rho0) draws of a sweep; replicate keys have length 2
_PAIR_STREAM = (0xFFFF_FFFF,)


def thread_count(requested: int | None = None) -> int:
    """Worker count from ``requested`` or ``CORRTEST_THREADS`` (0 means all cores)."""
    if requested is None:
        requested = int(os.environ.get("CORRTEST_THREADS", "0") or 0)
    if requested < 0:
        raise ValueError("thread count must be >= 0")
    return requested or (os.cpu_count() or 1)


@dataclass(frozen=True)
class SimConfig:
    """One simulation scenario.

    Give the dependence either as ``R0`` or as ``rho0`` (defined at
    ``pi_true[0]``, as in a null scenario).
    """

    m_sizes: tuple[int, ...]
    n_sizes: tuple[int, ...]
    pi_true: tuple[float, ...]
    R0: float | None = None
    rho0: float | None = None
    replicates: int = DEFAULT_REPLICATES
    alpha: float = 0.05
    seed: int = 0
    methods: tuple[str, ...] = ALL_METHODS
    domain: str = "feasible"
    scenario: int = 0

    def __post_init__(self):
        for name in ("m_sizes", "n_sizes", "pi_true", "methods"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "methods", tuple(str(m).lower() for m in self.methods))
        g = len(self.pi_true)
        if g < 2:
            raise ValueError("need at least 2 groups")
        if len(self.m_sizes) != g or len(self.n_sizes) != g:
            raise ValueError(f"m_sizes and n_sizes must have {g} entries")
        if any(int(v) != v or v < 0 for v in self.m_sizes + self.n_sizes):
            raise ValueError("group sizes must be nonnegative integers")
        if any(m + n == 0 for m, n in zip(self.m_sizes, self.n_sizes)):
            raise ValueError("every group needs at least one subject")
        if not any(self.m_sizes):
            raise ValueError("at least one group needs bilateral subjects")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods: {sorted(unknown)}")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be one of {DOMAINS}")
        if (self.R0 is None) == (self.rho0 is None):
            raise ValueError("give exactly one of R0 and rho0")
        if self.R0 is None:
            object.__setattr__(self, "R0", R_from(self.pi_true[0], self.rho0))
        if not ModelParams(self.pi_true, self.R0).is_feasible():
            raise InfeasibleParams(f"R0={self.R0} is infeasible for pi={self.pi_true}")

    @property
    def g(self) -> int:
        return len(self.pi_true)

    def as_dict(self) -> dict:
        out = asdict(self)
        for key in ("m_sizes", "n_sizes", "pi_true", "methods"):
            out[key] = list(out[key])
        out["g"] = self.g
        return out


@dataclass
class SimReport:
    """Rejection rates per method; skipped replicates are excluded from the rates."""

    config: SimConfig
    rejections: dict
    evaluated: dict
    skipped: dict
    wall_clock: float = 0.0
    statistics: dict = field(default_factory=dict, repr=False)

    @property
    def rejection_rate(self) -> dict:
        return {k: self.rejections[k] / self.evaluated[k] if self.evaluated[k] else math.nan
                for k in self.rejections}

    @property
    def mc_se(self) -> dict:
        out = {}
        for k, rate in self.rejection_rate.items():
            n = self.evaluated[k]
            out[k] = math.sqrt(rate * (1 - rate) / n) if n else math.nan
        return out

    @property
    def flagged(self) -> list[str]:
        """Methods whose skipped fraction reaches :data:`SKIP_FLAG_FRACTION`."""
        reps = self.config.replicates
        return [k for k, s in self.skipped.items() if s / reps >= SKIP_FLAG_FRACTION]

    def as_dict(self) -> dict:
        return {
            "config": self.config.as_dict(),
            "rejection_rate": self.rejection_rate,
            "mc_se": self.mc_se,
            "rejections": dict(self.rejections),
            "skipped": dict(self.skipped),
            "flagged": self.flagged,
            "wall_clock": self.wall_clock,
        }


def replicate_rng(seed: int, scenario: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(scenario, replicate)))


def _draw(rng, m_sizes, n_sizes, cells, pi):
    bil = rng.multinomial(m_sizes, cells)
    n1 = rng.binomial(n_sizes, pi)
    return np.column_stack([bil, n_sizes - n1, n1])


def _cells(pi_true, R0):
    return np.array([cell_probabilities(p, R0)[:3] for p in pi_true])


def generate_study(m_sizes, n_sizes, pi_true, R0, rng) -> StudyData:
    """Draw one study: multinomial bilateral triples and binomial unilateral counts."""
    m_sizes = np.asarray(m_sizes, dtype=np.int64)
    n_sizes = np.asarray(n_sizes, dtype=np.int64)
    pi = np.asarray(pi_true, dtype=float)
    return StudyData.from_array(_draw(rng, m_sizes, n_sizes, _cells(pi, R0), pi))


def generate_counts(config: SimConfig, start: int, stop: int) -> np.ndarray:
    """Counts for replicates ``start..stop-1`` of a scenario, shape ``(B, g, 5)``."""
    m_sizes = np.asarray(config.m_sizes, dtype=np.int64)
    n_sizes = np.asarray(config.n_sizes, dtype=np.int64)
    pi = np.asarray(config.pi_true, dtype=float)
    cells = _cells(pi, config.R0)
    out = np.empty((stop - start, config.g, 5))
    for k, r in enumerate(range(start, stop)):
        out[k] = _draw(replicate_rng(config.seed, config.scenario, r), m_sizes, n_sizes, cells, pi)
    return out


def _run_chunk(config: SimConfig, start: int, stop: int):
    counts = generate_counts(config, start, stop)
    return batch_statistics(counts, config.methods, domain=config.domain)


def simulate(config: SimConfig, threads: int | None = None, keep_statistics: bool = False) -> SimReport:
    """Run every replicate of ``config`` and tally rejections at ``p <= alpha``."""
    t0 = time.perf_counter()
    bounds = [(s, min(s + CHUNK_SIZE, config.replicates))
              for s in range(0, config.replicates, CHUNK_SIZE)]
    workers = min(thread_count(threads), len(bounds))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(lambda b: _run_chunk(config, *b), bounds))
    else:
        chunks = [_run_chunk(config, *b) for b in bounds]
    df = config.g - 1
    rejections, evaluated, skipped, statistics = {}, {}, {}, {}
    for name in config.methods:
        key = METHODS[name].value
        stat = np.concatenate([c.stats[key] for c in chunks])
        ok = np.concatenate([c.valid[key] for c in chunks])
        p = np.array([chi_square_sf(x, df) if v else math.nan for x, v in zip(stat, ok)])
        rejections[key] = int(np.sum(ok & (p <= config.alpha)))
        evaluated[key] = int(ok.sum())
        skipped[key] = int((~ok).sum())
        if keep_statistics:
            statistics[key] = stat
    return SimReport(config, rejections, evaluated, skipped,
                     time.perf_counter() - t0, statistics)


def estimate_type_I_error(config: SimConfig, threads: int | None = None, **kwargs) -> SimReport:
    if len(set(config.pi_true)) != 1:
        raise ValueError("type I error needs equal proportions in every group")
    return simulate(config, threads, **kwargs)


def estimate_power(config: SimConfig, threads: int | None = None, **kwargs) -> SimReport:
    if len(set(config.pi_true)) == 1:
        raise ValueError("power needs unequal proportions")
    return simulate(config, threads, **kwargs)


@dataclass
class SweepResult:
    rows: list
    redrawn: int
    seed: int

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_HEADER)
        for row in self.rows:
            writer.writerow([row[0], repr(row[1]), repr(row[2]), row[3], repr(row[4]),
                             repr(row[5]), row[6]])
        return buf.getvalue()


def sweep_uniform(g: int, m_sizes, n_sizes, n_pairs: int, replicates: int, seed: int,
                  methods=ALL_METHODS, alpha: float = 0.05, threads: int | None = None,
                  domain: str = "feasible") -> SweepResult:
    """Type I error at ``n_pairs`` null scenarios with ``(pi0, rho0)`` uniform on the unit square.

    Pair ``k`` is scenario ``k``.  Draws whose implied ``R0`` is infeasible
    are redrawn and counted.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    if len(m_sizes) != g or len(n_sizes) != g:
        raise ValueError(f"m_sizes and n_sizes must have {g} entries")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=_PAIR_STREAM))
    rows, redrawn = [], 0
    for k in range(n_pairs):
        while True:
            pi0, rho0 = rng.uniform(0.0, 1.0, size=2)
            if pi0 <= 0.0:
                redrawn += 1
                continue
            try:
                config = SimConfig(tuple(m_sizes), tuple(n_sizes), (float(pi0),) * g,
                                   rho0=float(rho0), replicates=replicates, alpha=alpha,
                                   seed=seed, methods=tuple(methods), domain=domain, scenario=k)
                break
            except InfeasibleParams:
                redrawn += 1
        report = simulate(config, threads)
        for name in config.methods:
            key = METHODS[name].value
            rows.append((k, float(pi0), float(rho0), key, report.rejection_rate[key],
                         report.mc_se[key], report.skipped[key]))
    return SweepResult(rows, redrawn, seed)
