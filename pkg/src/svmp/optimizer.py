"""Training loops: full VB coordinate ascent and the stochastic variants.

All loops share one update kernel (:func:`svmp.model.temp_raw`), so a
stochastic run whose samples cover every child and whose step size is one
reproduces coordinate ascent bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Literal, Optional

import numpy as np

from .data import RunLogEntry, SparseRatings
from .expfam import GaussianNatural, blend
from .model import FactorAddress, FactorState, Side, elbo, sweep_order, temp_raw
from .rng import Stream, stream

log = logging.getLogger(__name__)

MEAN_LIMIT = 1e6
INIT_MEAN_SD = 0.1

Algorithm = Literal["full_vb", "alg1", "alg2"]
Option = Literal["a", "b"]


@dataclass(frozen=True)
class ScheduleParams:
    """Step sizes ``rho_t = min(1, scale * (t - warm_hold + tau) ** -kappa)``.

    For ``t <= warm_hold`` the step is pinned to ``scale``.
    """

    kappa: float = 0.6
    tau: float = 0.0
    scale: float = 1.0
    warm_hold: int = 0

    def __post_init__(self):
        if not (0.5 < self.kappa <= 1.0):
            raise ValueError(f"kappa must lie in (1/2, 1], got {self.kappa!r}")
        if not (self.tau >= 0.0 and math.isfinite(self.tau)):
            raise ValueError(f"tau must be non-negative, got {self.tau!r}")
        if not (0.0 < self.scale <= 1.0):
            raise ValueError(f"scale must lie in (0, 1], got {self.scale!r}")
        if self.warm_hold < 0:
            raise ValueError(f"warm_hold must be non-negative, got {self.warm_hold!r}")


@dataclass(frozen=True)
class RunConfig:
    algorithm: Algorithm = "alg1"
    option: Option = "a"
    C: int = 1
    C_global: int = 100
    K: int = 5
    t_max: int = 100
    seed: int = 0
    eval_every: int = 1
    schedule: ScheduleParams = field(default_factory=ScheduleParams)

    def __post_init__(self):
        if self.algorithm not in ("full_vb", "alg1", "alg2"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.option not in ("a", "b"):
            raise ValueError(f"unknown option {self.option!r}")
        for name in ("C", "C_global", "K", "t_max", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass
class RunLog:
    entries: list[RunLogEntry]
    config: RunConfig
    final_state: FactorState

    @property
    def diverged(self) -> bool:
        return bool(self.entries) and self.entries[-1].diverged

    @property
    def initial_elbo(self) -> float:
        return self.entries[0].elbo

    @property
    def final_elbo(self) -> float:
        return self.entries[-1].elbo

    @property
    def ratings_accessed(self) -> int:
        return self.entries[-1].ratings_accessed


def schedule_rho(t: int, p: ScheduleParams) -> float:
    if t < 1:
        raise ValueError("iterations start at t = 1")
    if t <= p.warm_hold:
        return p.scale
    return min(1.0, p.scale * (t - p.warm_hold + p.tau) ** (-p.kappa))


def init_state(M: int, N: int, K: int, seed, mean_sd: float = INIT_MEAN_SD) -> FactorState:
    """Unit precisions with small random means; zero means are a fixed point of VB."""
    if min(M, N, K) < 1:
        raise ValueError("dimensions must be positive")
    rng = stream(seed, Stream.INIT)
    u_mean = mean_sd * rng.standard_normal((M, K))
    v_mean = mean_sd * rng.standard_normal((N, K))
    return FactorState(np.ones((M, K)), u_mean, np.ones((N, K)), v_mean)


def sample_without_replacement(rng: np.random.Generator, population_size: int, C: int) -> np.ndarray:
    """Sorted indices of a uniform ``min(C, population_size)``-subset."""
    if population_size < 1:
        raise ValueError("population must be non-empty")
    if C >= population_size:
        return np.arange(population_size)
    if C == 1:
        return rng.integers(population_size, size=1)
    return np.sort(rng.choice(population_size, size=C, replace=False))


def detect_divergence(elbo_now: float, elbo_initial: float, state: FactorState) -> bool:
    if not math.isfinite(elbo_now):
        return True
    with np.errstate(all="ignore"):
        u_mean, v_mean = state.means()
        for means in (u_mean, v_mean):
            if not np.all(np.abs(means) <= MEAN_LIMIT):
                return True
    return elbo_now < elbo_initial - 10.0 * abs(elbo_initial) - 100.0


def _children(addr: FactorAddress, data: SparseRatings) -> np.ndarray:
    return data.user_children[addr.row] if addr.side is Side.USER else data.item_children[addr.row]


def sweep_full_vb(
    state: FactorState,
    data: SparseRatings,
    callback: Optional[Callable[[FactorAddress, FactorState], None]] = None,
) -> tuple[FactorState, int]:
    """One in-place coordinate-ascent pass over every factor.

    Each factor is replaced by its exact target computed from the current
    state.  ``callback(addr, state)`` runs after every single update.
    Returns the state and the number of ratings touched.
    """
    accessed = 0
    for addr in sweep_order(state.M, state.N, state.K):
        ch = _children(addr, data)
        p, h, c = temp_raw(addr, state, data, ch, len(ch))
        prec, mtp = state.grids(addr.side)
        prec[addr.row, addr.coordinate] = p
        mtp[addr.row, addr.coordinate] = h
        accessed += c
        if callback is not None:
            callback(addr, state)
    return state, accessed


class _Recorder:
    def __init__(self, state: FactorState, data: SparseRatings, config: RunConfig):
        self.data = data
        self.config = config
        self.initial = elbo(state, data)
        self.entries = [RunLogEntry(0, 0, self.initial, 0.0, detect_divergence(self.initial, self.initial, state))]

    def due(self, t: int) -> bool:
        return t % self.config.eval_every == 0 or t == self.config.t_max

    def record(self, t: int, accessed: int, rho: float, state: FactorState) -> bool:
        value = elbo(state, self.data)
        diverged = detect_divergence(value, self.initial, state)
        self.entries.append(RunLogEntry(t, accessed, value, rho, diverged))
        if diverged:
            log.info("divergence flagged at t=%d (elbo=%r)", t, value)
        return diverged


def run_full_vb(state: FactorState, data: SparseRatings, config: RunConfig,
                callback: Optional[Callable[[int, FactorState], None]] = None) -> RunLog:
    state = state.copy()
    rec = _Recorder(state, data, config)
    accessed = 0
    for t in range(1, config.t_max + 1):
        _, n = sweep_full_vb(state, data)
        accessed += n
        if callback is not None:
            callback(t, state)
        if rec.due(t) and rec.record(t, accessed, 1.0, state):
            break
    return RunLog(rec.entries, config, state)


def run_alg1(state: FactorState, data: SparseRatings, config: RunConfig,
             callback: Optional[Callable[[int, FactorState], None]] = None) -> RunLog:
    """Per-factor child subsampling with option (a) or (b) blending.

    Option (a) blends each factor as soon as its target is formed.  Option
    (b) forms every target from the iteration-start state and blends all
    factors together at the end of the iteration.
    """
    rng = stream(config.seed, Stream.UPDATES)
    state = state.copy()
    rec = _Recorder(state, data, config)
    interleaved = config.option == "a"
    accessed = 0
    with np.errstate(all="ignore"):
        for t in range(1, config.t_max + 1):
            rho = schedule_rho(t, config.schedule)
            keep = 1.0 - rho
            if not interleaved:
                temp = FactorState.at_prior(state.M, state.N, state.K)
            for addr in sweep_order(state.M, state.N, state.K):
                ch = _children(addr, data)
                n_i = len(ch)
                sample = ch[sample_without_replacement(rng, n_i, config.C)] if n_i else ch
                p, h, c = temp_raw(addr, state, data, sample, n_i)
                accessed += c
                r, k = addr.row, addr.coordinate
                if interleaved:
                    prec, mtp = state.grids(addr.side)
                    prec[r, k] = keep * prec[r, k] + rho * p
                    mtp[r, k] = keep * mtp[r, k] + rho * h
                else:
                    prec, mtp = temp.grids(addr.side)
                    prec[r, k] = p
                    mtp[r, k] = h
            if not interleaved:
                _blend_all(state, temp, rho)
            if callback is not None:
                callback(t, state)
            if rec.due(t) and rec.record(t, accessed, rho, state):
                break
    return RunLog(rec.entries, config, state)


def _blend_all(state: FactorState, temp: FactorState, rho: float, mask=None) -> None:
    keep = 1.0 - rho
    for side in (Side.USER, Side.ITEM):
        for cur, new in zip(state.grids(side), temp.grids(side)):
            if mask is None:
                cur[...] = keep * cur + rho * new
            else:
                m = mask[side]
                cur[m] = keep * cur[m] + rho * new[m]


def _group(index: np.ndarray, batch: np.ndarray) -> list[tuple[int, np.ndarray]]:
    """Split the (sorted) batch by parent row, rows ascending."""
    parents = index[batch]
    order = np.argsort(parents, kind="stable")
    rows, starts = np.unique(parents[order], return_index=True)
    bounds = list(starts) + [len(batch)]
    return [(int(rows[j]), batch[order[bounds[j]:bounds[j + 1]]]) for j in range(len(rows))]


def run_alg2(state: FactorState, data: SparseRatings, config: RunConfig,
             callback: Optional[Callable[[int, FactorState], None]] = None) -> RunLog:
    """Global batch sampling: one batch of ratings per iteration.

    Only factors with a child in the batch are updated; each uses the batch
    children it owns, rescaled by ``N_i / |D_i|``.
    """
    rng = stream(config.seed, Stream.UPDATES)
    state = state.copy()
    rec = _Recorder(state, data, config)
    interleaved = config.option == "a"
    n_ratings = len(data)
    accessed = 0
    K = state.K
    with np.errstate(all="ignore"):
        for t in range(1, config.t_max + 1):
            rho = schedule_rho(t, config.schedule)
            keep = 1.0 - rho
            batch = sample_without_replacement(rng, n_ratings, config.C_global)
            if not interleaved:
                temp = FactorState.at_prior(state.M, state.N, K)
                mask = {Side.USER: np.zeros((state.M, K), bool), Side.ITEM: np.zeros((state.N, K), bool)}
            for side, index, children in ((Side.USER, data.users, data.user_children),
                                          (Side.ITEM, data.items, data.item_children)):
                for row, d_i in _group(index, batch):
                    n_i = len(children[row])
                    for k in range(K):
                        addr = FactorAddress(side, row, k)
                        p, h, c = temp_raw(addr, state, data, d_i, n_i)
                        accessed += c
                        if interleaved:
                            prec, mtp = state.grids(side)
                            prec[row, k] = keep * prec[row, k] + rho * p
                            mtp[row, k] = keep * mtp[row, k] + rho * h
                        else:
                            prec, mtp = temp.grids(side)
                            prec[row, k] = p
                            mtp[row, k] = h
                            mask[side][row, k] = True
            if not interleaved:
                _blend_all(state, temp, rho, mask)
            if callback is not None:
                callback(t, state)
            if rec.due(t) and rec.record(t, accessed, rho, state):
                break
    return RunLog(rec.entries, config, state)


def run(state: FactorState, data: SparseRatings, config: RunConfig, callback=None) -> RunLog:
    runner = {"full_vb": run_full_vb, "alg1": run_alg1, "alg2": run_alg2}[config.algorithm]
    return runner(state, data, config, callback)


def blend_stream(initial: GaussianNatural, temps: Iterable[GaussianNatural],
                 schedule: ScheduleParams) -> GaussianNatural:
    """Apply option (a) steps for one factor against a fixed stream of targets."""
    lam = initial
    for t, temp in enumerate(temps, start=1):
        lam = blend(lam, temp, schedule_rho(t, schedule))
    return lam


def with_schedule(config: RunConfig, **changes) -> RunConfig:
    return replace(config, schedule=replace(config.schedule, **changes))
