"""Independent numerical checks of the update mathematics.

The checks compare the closed-form updates against quantities computed
another way: finite differences of the ELBO, Monte Carlo covariances and
exhaustive enumeration of child subsets.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from . import model
from .data import SparseRatings, generate_synthetic
from .expfam import GaussianNatural, fisher, moments
from .model import FactorAddress, FactorState, Side
from .optimizer import RunConfig, ScheduleParams, blend_stream, init_state, run_alg1, run_full_vb
from .rng import Stream, stream

FD_STEP = 1e-5
GRADIENT_TOL = 1e-4
FISHER_MC_TOL = 0.02
SUBSET_TOL = 1e-12
MAX_ENUMERATION_CHILDREN = 12
CONDITION_WARN = 1e8

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GradientCheckReport:
    factor: FactorAddress
    analytic: np.ndarray
    numeric: np.ndarray
    relative_error: float
    condition: float = 1.0


@dataclass(frozen=True)
class CheckResult:
    check: str
    value: float
    tolerance: float
    passed: bool


def _children(addr: FactorAddress, data: SparseRatings) -> np.ndarray:
    return data.user_children[addr.row] if addr.side is Side.USER else data.item_children[addr.row]


def finite_diff_gradient(state: FactorState, data: SparseRatings, addr: FactorAddress,
                         h: float = FD_STEP, full: bool = False) -> np.ndarray:
    """Central-difference gradient of the ELBO w.r.t. one factor's natural parameters.

    By default only the ELBO terms touching the factor are evaluated, which
    changes the objective by a constant and avoids cancellation in large
    sums.  ``full=True`` differentiates :func:`svmp.model.elbo` itself.
    """
    if h <= 0:
        raise ValueError("step must be positive")
    prec, mtp = state.grids(addr.side)
    r, k = addr.row, addr.coordinate
    if prec[r, k] - h <= 0:
        raise ValueError(f"step {h} would make the precision of {addr} non-positive")

    def objective():
        return model.elbo(state, data) if full else model.local_elbo(state, data, addr)

    grad = np.empty(2)
    for j, grid in enumerate((prec, mtp)):
        saved = grid[r, k]
        grid[r, k] = saved + h
        up = objective()
        grid[r, k] = saved - h
        down = objective()
        grid[r, k] = saved
        grad[j] = (up - down) / (2.0 * h)
    return grad


def analytic_gradient(state: FactorState, data: SparseRatings, addr: FactorAddress) -> np.ndarray:
    """``cov[phi] @ (target - lambda)`` for one factor."""
    lam = state.get(addr)
    target = model.full_vb_target(addr, state, data)
    return fisher(lam) @ (target.as_array() - lam.as_array())


def _inv2(a: np.ndarray) -> tuple[np.ndarray, float]:
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    inv = np.array([[a[1, 1], -a[0, 1]], [-a[1, 0], a[0, 0]]]) / det
    return inv, float(np.linalg.norm(a, 2) * np.linalg.norm(inv, 2))


def natural_gradient_check(state: FactorState, data: SparseRatings, addr: FactorAddress,
                           h: float = FD_STEP) -> GradientCheckReport:
    lam = state.get(addr)
    analytic = model.full_vb_target(addr, state, data).as_array() - lam.as_array()
    g_inv, cond = _inv2(fisher(lam))
    if cond > CONDITION_WARN:
        log.warning("Fisher matrix of %s is ill-conditioned (condition number %.3g)", addr, cond)
    numeric = g_inv @ finite_diff_gradient(state, data, addr, h)
    err = float(np.linalg.norm(analytic - numeric) / max(1.0, np.linalg.norm(analytic)))
    return GradientCheckReport(addr, analytic, numeric, err, cond)


def gradient_check(state: FactorState, data: SparseRatings, addr: FactorAddress,
                   h: float = FD_STEP) -> GradientCheckReport:
    analytic = analytic_gradient(state, data, addr)
    numeric = finite_diff_gradient(state, data, addr, h)
    err = float(np.linalg.norm(analytic - numeric) / max(1.0, np.linalg.norm(analytic)))
    return GradientCheckReport(addr, analytic, numeric, err)


def sufficient_stats(x: np.ndarray) -> np.ndarray:
    return np.stack([-0.5 * x * x, x], axis=-1)


def mc_fisher(lam: GaussianNatural, n: int, seed) -> np.ndarray:
    """Sample covariance of ``phi(x)`` over ``n`` draws from ``q``."""
    if n < 10_000:
        raise ValueError("use at least 10^4 samples")
    m = moments(lam)
    rng = stream(seed, Stream.DIAGNOSTICS)
    x = m.mean + math.sqrt(m.variance) * rng.standard_normal(n)
    cov = np.cov(sufficient_stats(x), rowvar=False)
    return 0.5 * (cov + cov.T)


def fisher_relative_error(estimate: np.ndarray, exact: np.ndarray, zero_abs: float = FISHER_MC_TOL) -> float:
    """Worst entrywise error: relative for non-zero entries, absolute (scaled
    so that ``zero_abs`` maps onto ``FISHER_MC_TOL``) for exact zeros."""
    worst = 0.0
    for e, x in zip(estimate.ravel(), exact.ravel()):
        if x == 0.0:
            worst = max(worst, float(abs(e)) * FISHER_MC_TOL / zero_abs)
        else:
            worst = max(worst, float(abs(e - x) / abs(x)))
    return worst


def cross_covariance_z(lam_i: GaussianNatural, lam_j: GaussianNatural, n: int, rng) -> np.ndarray:
    """z-scores of the sample cross-covariance between ``phi(x_i)`` and ``phi(x_j)``.

    The two factors are drawn independently, as under the factorized q.
    """
    mi, mj = moments(lam_i), moments(lam_j)
    si = sufficient_stats(mi.mean + math.sqrt(mi.variance) * rng.standard_normal(n))
    sj = sufficient_stats(mj.mean + math.sqrt(mj.variance) * rng.standard_normal(n))
    ci = si - si.mean(axis=0)
    cj = sj - sj.mean(axis=0)
    cross = ci.T @ cj / (n - 1)
    se = np.sqrt(np.outer((ci ** 2).mean(axis=0), (cj ** 2).mean(axis=0)) / n)
    return cross / se


def subset_expectation_check(addr: FactorAddress, state: FactorState, data: SparseRatings, C: int) -> float:
    """Max deviation between the mean of all C-subset targets and the exact target."""
    ch = _children(addr, data)
    n_i = len(ch)
    if n_i > MAX_ENUMERATION_CHILDREN:
        raise ValueError(f"{addr} has {n_i} children; enumeration is capped at {MAX_ENUMERATION_CHILDREN}")
    if n_i == 0:
        return 0.0
    c = min(C, n_i)
    total = np.zeros(2)
    count = 0
    for subset in itertools.combinations(ch, c):
        p, h, _ = model.temp_raw(addr, state, data, np.array(subset), n_i)
        total += (p, h)
        count += 1
    exact = model.full_vb_target(addr, state, data).as_array()
    return float(np.max(np.abs(total / count - exact)))


@dataclass(frozen=True)
class BatchExpectation:
    conditional_mean: np.ndarray
    exact: np.ndarray
    p_touched: float

    @property
    def bias(self) -> np.ndarray:
        return self.conditional_mean - self.exact


def alg2_batch_expectation(addr: FactorAddress, state: FactorState, data: SparseRatings,
                           C_global: int) -> BatchExpectation:
    """Enumerate all global batches and average the batch target over those touching ``addr``.

    Every batch of a given size is equally likely, so the conditional mean is
    a plain average over the touching batches.
    """
    n = len(data)
    if n > 20:
        raise ValueError("batch enumeration is limited to 20 ratings")
    ch = _children(addr, data)
    own = set(int(c) for c in ch)
    c_global = min(C_global, n)
    total = np.zeros(2)
    touched = 0
    batches = 0
    for batch in itertools.combinations(range(n), c_global):
        batches += 1
        d_i = np.array([b for b in batch if b in own], dtype=np.int64)
        if len(d_i) == 0:
            continue
        p, h, _ = model.temp_raw(addr, state, data, d_i, len(ch))
        total += (p, h)
        touched += 1
    exact = model.full_vb_target(addr, state, data).as_array()
    return BatchExpectation(total / touched, exact, touched / batches)


def random_state(M: int, N: int, K: int, rng: np.random.Generator) -> FactorState:
    """Arbitrary valid state: precisions in [1, 20], means roughly N(0, 1)."""
    def grid(rows):
        prec = rng.uniform(1.0, 20.0, (rows, K))
        return prec, rng.standard_normal((rows, K)) * prec
    up, uh = grid(M)
    vp, vh = grid(N)
    return FactorState(up, uh, vp, vh)


def random_address(state: FactorState, rng: np.random.Generator) -> FactorAddress:
    side = Side.USER if rng.random() < 0.5 else Side.ITEM
    rows = state.M if side is Side.USER else state.N
    return FactorAddress(side, int(rng.integers(rows)), int(rng.integers(state.K)))


def desk_instance(seed: int = 0):
    """The default desk-scale synthetic problem (200 x 300, K = 5, density 0.08)."""
    return generate_synthetic(200, 300, 5, 0.08, 1.0, seed)


def run_checks(seed: int = 0, trials: int = 100) -> list[CheckResult]:
    """The full verification suite behind ``svmp verify``."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = stream(seed, Stream.DIAGNOSTICS)
    data, _ = desk_instance(seed)
    results = []

    grad_err = nat_err = 0.0
    for _ in range(trials):
        state = random_state(data.M, data.N, 5, rng)
        addr = random_address(state, rng)
        grad_err = max(grad_err, gradient_check(state, data, addr).relative_error)
        nat_err = max(nat_err, natural_gradient_check(state, data, addr).relative_error)
    results.append(CheckResult("gradient", grad_err, GRADIENT_TOL, grad_err <= GRADIENT_TOL))
    results.append(CheckResult("natural_gradient", nat_err, GRADIENT_TOL, nat_err <= GRADIENT_TOL))

    fisher_err = 0.0
    for lam in (GaussianNatural(1.0, 0.0), GaussianNatural(4.0, 4.0)):
        est = mc_fisher(lam, 1_000_000, seed)
        fisher_err = max(fisher_err, float(fisher_relative_error(est, fisher(lam))))
    results.append(CheckResult("fisher_mc", fisher_err, FISHER_MC_TOL, fisher_err <= FISHER_MC_TOL))

    small, _ = generate_synthetic(12, 16, 2, 0.35, 1.0, seed)
    sub_dev = 0.0
    candidates = [a for a in model.sweep_order(small.M, small.N, 2) if 1 <= len(_children(a, small)) <= 8]
    for _ in range(trials):
        state = random_state(small.M, small.N, 2, rng)
        addr = candidates[int(rng.integers(len(candidates)))]
        n_i = len(_children(addr, small))
        for c in range(1, n_i + 1):
            sub_dev = max(sub_dev, subset_expectation_check(addr, state, small, c))
    results.append(CheckResult("subset_expectation", sub_dev, SUBSET_TOL, sub_dev <= SUBSET_TOL))

    avg_err = 0.0
    harmonic = ScheduleParams(kappa=1.0, tau=0.0, scale=1.0)
    for _ in range(trials):
        temps = [GaussianNatural(p, h) for p, h in zip(rng.uniform(1, 50, 50), rng.normal(0, 20, 50))]
        final = blend_stream(GaussianNatural(1.0, 0.0), temps, harmonic)
        mean = np.mean([t.as_array() for t in temps], axis=0)
        avg_err = max(avg_err, float(np.max(np.abs(final.as_array() - mean))))
    results.append(CheckResult("running_average", avg_err, 1e-12, avg_err <= 1e-12))

    eq_data, _ = generate_synthetic(50, 80, 3, 0.1, 1.0, seed)
    start = init_state(50, 80, 3, seed)
    sweeps = 10
    full_traj, stoch_traj = [], []
    base = dict(K=3, t_max=sweeps, seed=seed)
    run_full_vb(start, eq_data, RunConfig("full_vb", **base), lambda t, s: full_traj.append(s.copy()))
    pinned = ScheduleParams(kappa=0.6, scale=1.0, warm_hold=sweeps)
    run_alg1(start, eq_data, RunConfig("alg1", "a", C=eq_data.max_children(), schedule=pinned, **base),
             lambda t, s: stoch_traj.append(s.copy()))
    mismatches = sum(not a.equals(b) for a, b in zip(full_traj, stoch_traj))
    mismatches += abs(len(full_traj) - len(stoch_traj))
    results.append(CheckResult("full_vb_equivalence", float(mismatches), 0.0, mismatches == 0))

    worst_z = 0.0
    pairs = max(10, min(trials, 50))
    # family-wise 1% bound over all 4 * pairs cross-covariance entries
    z_tol = NormalDist().inv_cdf(1.0 - 0.005 / (4 * pairs))
    for _ in range(pairs):
        state = random_state(data.M, data.N, 5, rng)
        a, b = random_address(state, rng), random_address(state, rng)
        if a == b:
            continue
        z = cross_covariance_z(state.get(a), state.get(b), 100_000, rng)
        worst_z = max(worst_z, float(np.max(np.abs(z))))
    results.append(CheckResult("fisher_block_diagonal", worst_z, z_tol, worst_z <= z_tol))
    return results
