"""Gaussian bilinear matrix factorization with a fully factorized q.

Ratings follow ``r_mn ~ N(u_m . v_n, 1)`` with ``N(0, 1)`` priors on every
trait coordinate.  Each coordinate ``u_mk`` / ``v_nk`` has its own Gaussian
factor, so a user coordinate's children are the ratings in its row and its
co-parents are the item rows paired with it.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import TYPE_CHECKING, Iterator, Sequence

import numpy as np

from .expfam import HALF_LOG_2PI, GaussianNatural, Moments, kl_to_standard_normal_array

if TYPE_CHECKING:
    from .data import SparseRatings


class Side(str, Enum):
    USER = "user"
    ITEM = "item"


@dataclass(frozen=True)
class FactorAddress:
    side: Side
    row: int
    coordinate: int

    def __str__(self):
        return f"{self.side.value}[{self.row},{self.coordinate}]"


@dataclass(frozen=True)
class ChildContribution:
    precision_add: float
    mtp_add: float


@dataclass
class FactorState:
    """Natural parameters of every factor, stored as four ``(rows, K)`` arrays."""

    u_precision: np.ndarray
    u_mtp: np.ndarray
    v_precision: np.ndarray
    v_mtp: np.ndarray

    def __post_init__(self):
        for name in ("u_precision", "u_mtp", "v_precision", "v_mtp"):
            setattr(self, name, np.array(getattr(self, name), dtype=np.float64, order="C"))
        if self.u_precision.ndim != 2 or self.u_precision.shape != self.u_mtp.shape:
            raise ValueError("user grids must be matching 2-d arrays")
        if self.v_precision.ndim != 2 or self.v_precision.shape != self.v_mtp.shape:
            raise ValueError("item grids must be matching 2-d arrays")
        if self.u_precision.shape[1] != self.v_precision.shape[1]:
            raise ValueError("user and item grids disagree on K")

    @classmethod
    def at_prior(cls, M: int, N: int, K: int) -> "FactorState":
        return cls(np.ones((M, K)), np.zeros((M, K)), np.ones((N, K)), np.zeros((N, K)))

    @property
    def M(self) -> int:
        return self.u_precision.shape[0]

    @property
    def N(self) -> int:
        return self.v_precision.shape[0]

    @property
    def K(self) -> int:
        return self.u_precision.shape[1]

    def copy(self) -> "FactorState":
        return FactorState(self.u_precision, self.u_mtp, self.v_precision, self.v_mtp)

    def grids(self, side: Side) -> tuple[np.ndarray, np.ndarray]:
        if side is Side.USER:
            return self.u_precision, self.u_mtp
        return self.v_precision, self.v_mtp

    def get(self, addr: FactorAddress) -> GaussianNatural:
        prec, mtp = self.grids(addr.side)
        return GaussianNatural(prec[addr.row, addr.coordinate], mtp[addr.row, addr.coordinate])

    def set(self, addr: FactorAddress, lam: GaussianNatural) -> None:
        prec, mtp = self.grids(addr.side)
        prec[addr.row, addr.coordinate] = lam.precision
        mtp[addr.row, addr.coordinate] = lam.mean_times_precision

    def row_moments(self, side: Side, row: int) -> list[Moments]:
        prec, mtp = self.grids(side)
        return [Moments(mtp[row, k] / prec[row, k], 1.0 / prec[row, k]) for k in range(self.K)]

    def means(self) -> tuple[np.ndarray, np.ndarray]:
        return self.u_mtp / self.u_precision, self.v_mtp / self.v_precision

    def transposed(self) -> "FactorState":
        return FactorState(self.v_precision, self.v_mtp, self.u_precision, self.u_mtp)

    def equals(self, other: "FactorState") -> bool:
        """Bit-exact equality of all four grids (NaNs compare by bit pattern)."""
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self._arrays(), other._arrays())
        )

    def _arrays(self):
        return (self.u_precision, self.u_mtp, self.v_precision, self.v_mtp)


def sweep_order(M: int, N: int, K: int) -> Iterator[FactorAddress]:
    """Users row-major by (row, coordinate), then items."""
    for m in range(M):
        for k in range(K):
            yield FactorAddress(Side.USER, m, k)
    for n in range(N):
        for k in range(K):
            yield FactorAddress(Side.ITEM, n, k)


def prior() -> GaussianNatural:
    return GaussianNatural(1.0, 0.0)


def child_contribution(
    addr: FactorAddress,
    rating: float,
    own_row_moments: Sequence[Moments],
    other_row_moments: Sequence[Moments],
) -> ChildContribution:
    """One rating's additive contribution to the factor at ``addr``.

    ``own_row_moments`` are the moments of the row holding ``addr``;
    ``other_row_moments`` those of the row it is paired with through the
    rating.  The formula is the same for users and items.
    """
    K = len(own_row_moments)
    if len(other_row_moments) != K:
        raise ValueError(f"row lengths differ: {K} vs {len(other_row_moments)}")
    k = addr.coordinate
    if not 0 <= k < K:
        raise ValueError(f"coordinate {k} outside [0, {K})")
    other_k = other_row_moments[k]
    rest = 0.0
    for j in range(K):
        if j != k:
            rest += own_row_moments[j].mean * other_row_moments[j].mean
    return ChildContribution(
        other_k.variance + other_k.mean * other_k.mean,
        other_k.mean * (rating - rest),
    )


def row_contributions(
    k: int,
    own_means: np.ndarray,
    other_means: np.ndarray,
    other_var_k: np.ndarray,
    ratings: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`child_contribution` over a set of children.

    ``other_means`` is ``(C, K)``; ``other_var_k`` and ``ratings`` are ``(C,)``.
    Returns the ``(C,)`` precision and mean-times-precision additions.
    """
    mk = other_means[:, k]
    prod = other_means * own_means
    prod[:, k] = 0.0
    return other_var_k + mk * mk, mk * (ratings - prod.sum(axis=1))


def _children(addr: FactorAddress, data: "SparseRatings") -> np.ndarray:
    if addr.side is Side.USER:
        return data.user_children[addr.row]
    return data.item_children[addr.row]


def temp_raw(
    addr: FactorAddress,
    state: FactorState,
    data: "SparseRatings",
    sample: np.ndarray,
    n_children: int,
) -> tuple[float, float, int]:
    """Stochastic target ``prior + (N_i / C) * sum(contributions)`` as floats.

    ``sample`` holds rating indices (children of ``addr``).  An empty sample
    yields the prior.  Returns ``(precision, mtp, ratings_touched)``.
    """
    c = len(sample)
    if c == 0:
        return 1.0, 0.0, 0
    if addr.side is Side.USER:
        own_p, own_h, oth_p, oth_h = state.u_precision, state.u_mtp, state.v_precision, state.v_mtp
        partners = data.items[sample]
    else:
        own_p, own_h, oth_p, oth_h = state.v_precision, state.v_mtp, state.u_precision, state.u_mtp
        partners = data.users[sample]
    k = addr.coordinate
    own_means = own_h[addr.row] / own_p[addr.row]
    p_rows = oth_p[partners]
    other_means = oth_h[partners] / p_rows
    other_var_k = 1.0 / p_rows[:, k]
    pa, ha = row_contributions(k, own_means, other_means, other_var_k, data.values[sample])
    scale = n_children / c
    return 1.0 + scale * pa.sum(), scale * ha.sum(), c


def lambda_temp(
    addr: FactorAddress,
    state: FactorState,
    data: "SparseRatings",
    sampled_children,
    n_children: int,
) -> GaussianNatural:
    sample = np.asarray(sorted(sampled_children), dtype=np.int64)
    if len(sample) == 0:
        raise ValueError("sample of children must be non-empty")
    p, h, _ = temp_raw(addr, state, data, sample, n_children)
    return GaussianNatural(p, h)


def full_vb_target(addr: FactorAddress, state: FactorState, data: "SparseRatings") -> GaussianNatural:
    ch = _children(addr, data)
    p, h, _ = temp_raw(addr, state, data, ch, len(ch))
    return GaussianNatural(p, h)


def expected_residual_sq(rating: float, user_row: Sequence[Moments], item_row: Sequence[Moments]) -> float:
    """``E_q[(r - u.v)**2]`` for one rating under the factorized q."""
    if len(user_row) != len(item_row):
        raise ValueError(f"row lengths differ: {len(user_row)} vs {len(item_row)}")
    pred = 0.0
    extra = 0.0
    for u, v in zip(user_row, item_row):
        pred += u.mean * v.mean
        uu = u.variance + u.mean * u.mean
        vv = v.variance + v.mean * v.mean
        extra += uu * vv - u.mean * u.mean * v.mean * v.mean
    return rating * rating - 2.0 * rating * pred + pred * pred + extra


def predict(user_row: Sequence[Moments], item_row: Sequence[Moments]) -> float:
    if len(user_row) != len(item_row):
        raise ValueError(f"row lengths differ: {len(user_row)} vs {len(item_row)}")
    return sum(u.mean * v.mean for u, v in zip(user_row, item_row))


def _residual_sq_array(r, um, uv, vm, vv):
    pred = (um * vm).sum(axis=-1)
    second = (uv + um * um) * (vv + vm * vm) - (um * vm) ** 2
    return r * r - 2.0 * r * pred + pred * pred + second.sum(axis=-1)


def elbo(state: FactorState, data: "SparseRatings") -> float:
    """Evidence lower bound in nats, including the ``-log(2 pi)/2`` per rating.

    Non-finite results are returned as is; they signal a diverged state.
    """
    with np.errstate(all="ignore"):
        u_var = 1.0 / state.u_precision
        v_var = 1.0 / state.v_precision
        u_mean = state.u_mtp * u_var
        v_mean = state.v_mtp * v_var
        u, i = data.users, data.items
        res = _residual_sq_array(data.values, u_mean[u], u_var[u], v_mean[i], v_var[i])
        lik = -HALF_LOG_2PI * len(res) - 0.5 * np.sum(res)
        kl = np.sum(kl_to_standard_normal_array(state.u_precision, state.u_mtp))
        kl += np.sum(kl_to_standard_normal_array(state.v_precision, state.v_mtp))
        return float(lik - kl)


def local_elbo(state: FactorState, data: "SparseRatings", addr: FactorAddress) -> float:
    """The ELBO terms that depend on the factor at ``addr``.

    Differs from :func:`elbo` by a constant when only that factor changes.
    """
    ch = _children(addr, data)
    u, i = data.users[ch], data.items[ch]
    u_var = 1.0 / state.u_precision[u]
    v_var = 1.0 / state.v_precision[i]
    res = _residual_sq_array(
        data.values[ch], state.u_mtp[u] * u_var, u_var, state.v_mtp[i] * v_var, v_var
    )
    prec, mtp = state.grids(addr.side)
    r, k = addr.row, addr.coordinate
    kl = kl_to_standard_normal_array(prec[r, k], mtp[r, k])
    return float(-0.5 * np.sum(res) - kl)
