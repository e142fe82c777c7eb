"""Fixed-design planning for the three-arm gold standard design.

Power is approximated by a trivariate normal probability of the three
pairwise t statistics; the sample size is the smallest integer total whose
power reaches the target. Smaller outcome values are better throughout.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, Tuple

import numpy as np
from scipy import special

from .errors import DomainError, InfiniteSampleSizeError
from .statcore import Corr3, mvn3_cdf_arrays, t_quantile


@dataclass(frozen=True)
class AllocationRatio:
    """Integer allocation ratio E:R:P, e.g. ``AllocationRatio(3, 2, 1)``."""

    r_E: int = 1
    r_R: int = 1
    r_P: int = 1

    def __post_init__(self):
        for v in (self.r_E, self.r_R, self.r_P):
            if int(v) != v or v < 1:
                raise DomainError(f"allocation entries must be positive integers, got {self}")

    @classmethod
    def parse(cls, text: str) -> "AllocationRatio":
        parts = text.strip().split(":")
        if len(parts) != 3:
            raise DomainError(f"allocation must look like 'a:b:c', got {text!r}")
        return cls(*(int(p) for p in parts))

    def __str__(self):
        return f"{self.r_E}:{self.r_R}:{self.r_P}"

    @property
    def ratios(self) -> Tuple[int, int, int]:
        return (self.r_E, self.r_R, self.r_P)

    @property
    def block_size(self) -> int:
        return self.r_E + self.r_R + self.r_P

    @property
    def weights(self) -> np.ndarray:
        return np.array(self.ratios, dtype=float) / self.block_size

    def apportion(self, n: int) -> Tuple[int, int, int]:
        """Split an integer total over the groups by largest remainder (ties go to E, then R, then P)."""
        n = int(n)
        if n < 0:
            raise DomainError("cannot apportion a negative total")
        exact = self.weights * n
        base = np.floor(exact).astype(int)
        left = n - int(base.sum())
        order = sorted(range(3), key=lambda i: (-(exact[i] - base[i]), i))
        for i in order[:left]:
            base[i] += 1
        return tuple(int(v) for v in base)

    def apportion_many(self, n: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`apportion`; returns an ``(len(n), 3)`` integer array."""
        n = np.asarray(n, dtype=np.int64)
        num = n[:, None] * np.array(self.ratios, dtype=np.int64)
        base = num // self.block_size
        rem = num - base * self.block_size
        left = n - base.sum(axis=1)
        # rank remainders descending, stable on group index
        order = np.argsort(-rem, axis=1, kind="stable")
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.arange(3)[None, :].repeat(len(n), axis=0), axis=1)
        return base + (rank < left[:, None])

    @property
    def min_total(self) -> int:
        """Smallest total whose apportionment gives every group at least two subjects."""
        return _min_total(self)


@lru_cache(maxsize=None)
def _min_total(alloc: AllocationRatio) -> int:
    n = 6
    while min(alloc.apportion(n)) < 2:
        n += 1
    return n


@dataclass(frozen=True)
class GroupSizes:
    n_E: float
    n_R: float
    n_P: float

    def __post_init__(self):
        if min(self.n_E, self.n_R, self.n_P) <= 0:
            raise DomainError(f"group sizes must be positive, got {self}")

    @property
    def total(self) -> float:
        return self.n_E + self.n_R + self.n_P

    def as_tuple(self):
        return (self.n_E, self.n_R, self.n_P)


@dataclass(frozen=True)
class DesignSpec:
    """Margins, planning alternative and error rates of a gold standard trial."""

    mu_P: float
    delta_ER: float = 0.3
    delta_EP: float = 0.0
    delta_RP: float = 0.0
    mu_E: float = 0.0
    mu_R: float = 0.0
    sigma: float = 1.0
    alloc: AllocationRatio = field(default_factory=AllocationRatio)
    alpha: float = 0.025
    target_power: float = 0.8

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError("sigma must be positive")
        if not self.delta_ER > 0:
            raise DomainError("the non-inferiority margin delta_ER must be positive")
        if self.delta_EP < 0 or self.delta_RP < 0:
            raise DomainError("superiority margins must be non-negative")
        if not 0 < self.alpha < 0.5:
            raise DomainError("alpha must lie in (0, 0.5)")
        if not 0.5 < self.target_power < 1:
            raise DomainError("target power must lie in (0.5, 1)")

    @property
    def means(self) -> Tuple[float, float, float]:
        return (self.mu_E, self.mu_R, self.mu_P)

    def in_h1(self) -> bool:
        return (
            self.mu_E - self.mu_R < self.delta_ER
            and self.mu_P - self.mu_E > self.delta_EP
            and self.mu_P - self.mu_R > self.delta_RP
        )

    def with_sigma(self, sigma: float) -> "DesignSpec":
        return replace(self, sigma=float(sigma))


def covariance_matrix(sizes: GroupSizes) -> Corr3:
    """Correlations of the (E-R, R-P, E-P) test statistics."""
    nE, nR, nP = sizes.as_tuple()
    if min(nE, nR, nP) <= 0:
        raise DomainError("group sizes must be positive")
    return Corr3(
        r12=-1.0 / math.sqrt((1 + nR / nE) * (1 + nR / nP)),
        r13=1.0 / math.sqrt((1 + nE / nR) * (1 + nE / nP)),
        r23=1.0 / math.sqrt((1 + nP / nR) * (1 + nP / nE)),
    )


def _power_arrays(spec: DesignSpec, nE, nR, nP, sigma) -> np.ndarray:
    nE, nR, nP, sigma = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (nE, nR, nP, sigma)))
    nu_ER, nu_RP, nu_EP = nE + nR - 2, nR + nP - 2, nE + nP - 2
    if np.any(np.minimum(np.minimum(nu_ER, nu_RP), nu_EP) < 1):
        raise DomainError("every pairwise t-test needs at least one degree of freedom")
    mE, mR, mP = spec.means
    se_ER = sigma * np.sqrt(1 / nE + 1 / nR)
    se_RP = sigma * np.sqrt(1 / nR + 1 / nP)
    se_EP = sigma * np.sqrt(1 / nE + 1 / nP)
    u1 = t_quantile(spec.alpha, nu_ER) - ((mE - mR) - spec.delta_ER) / se_ER
    u2 = t_quantile(spec.alpha, nu_RP) - ((mR - mP) + spec.delta_RP) / se_RP
    u3 = t_quantile(spec.alpha, nu_EP) - ((mE - mP) + spec.delta_EP) / se_EP
    r12 = -1.0 / np.sqrt((1 + nR / nE) * (1 + nR / nP))
    r13 = 1.0 / np.sqrt((1 + nE / nR) * (1 + nE / nP))
    r23 = 1.0 / np.sqrt((1 + nP / nR) * (1 + nP / nE))
    shape = u1.shape
    out = mvn3_cdf_arrays(
        *(np.ravel(v) for v in np.broadcast_arrays(u1, u2, u3, r12, r13, r23)), panels=3
    )
    return out.reshape(shape)


def power(spec: DesignSpec, sizes: GroupSizes) -> float:
    """Approximate probability that all three local null hypotheses are rejected."""
    return float(_power_arrays(spec, sizes.n_E, sizes.n_R, sizes.n_P, spec.sigma))


def power_at_totals(spec: DesignSpec, totals, sigma=None) -> np.ndarray:
    """Power for total sample sizes ``totals`` split continuously as ``w_k * n``."""
    totals = np.asarray(totals, dtype=float)
    w = spec.alloc.weights
    sigma = spec.sigma if sigma is None else sigma
    return _power_arrays(spec, w[0] * totals, w[1] * totals, w[2] * totals, sigma)


def _check_h1(spec: DesignSpec):
    if not spec.in_h1():
        raise InfiniteSampleSizeError(
            "the planning alternative lies outside H1; the required sample size is infinite"
        )


def required_sample_size(spec: DesignSpec) -> Tuple[int, GroupSizes]:
    """Smallest total ``n`` (at least ``alloc.min_total``) with power >= target.

    Power is evaluated with real-valued group sizes ``w_k * n``; the returned
    group sizes are the largest-remainder realization of ``n``.
    """
    _check_h1(spec)
    target = spec.target_power

    def ok(n):
        return power_at_totals(spec, n) >= target

    lo = spec.alloc.min_total
    if ok(lo):
        n = lo
    else:
        hi = lo
        while not ok(hi):
            lo, hi = hi, hi * 2
            if hi > 10**12:
                raise InfiniteSampleSizeError("sample size search diverged")
        # invariant: not ok(lo), ok(hi)
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if ok(mid):
                hi = mid
            else:
                lo = mid
        n = hi
    return n, GroupSizes(*spec.alloc.apportion(n))


# ----------------------------------------------------------------------------
# Sample size as a step function of the variance
# ----------------------------------------------------------------------------


def _sigma_thresholds(spec: DesignSpec, totals: np.ndarray) -> np.ndarray:
    """For each total n, the largest sigma at which power at n still reaches the target.

    Solved per element by Illinois-type regula falsi in log(sigma); every
    element iterates on its own values only, so the result does not depend on
    which other totals are solved alongside it.
    """
    totals = np.asarray(totals, dtype=float)
    target = spec.target_power
    w = spec.alloc.weights
    nE, nR, nP = w[0] * totals, w[1] * totals, w[2] * totals

    def h(log_s, idx):
        return _power_arrays(spec, nE[idx], nR[idx], nP[idx], np.exp(log_s)) - target

    # normal-approximation guess from the weakest pairwise comparison
    mE, mR, mP = spec.means
    effects = np.array([spec.delta_ER - (mE - mR), (mP - mR) - spec.delta_RP, (mP - mE) - spec.delta_EP])
    se = np.stack([np.sqrt(1 / nE + 1 / nR), np.sqrt(1 / nR + 1 / nP), np.sqrt(1 / nE + 1 / nP)])
    z = special.ndtri(1 - spec.alpha) + special.ndtri(target)
    guess = np.min(effects[:, None] / (se * z), axis=0)

    m = len(totals)
    idx = np.arange(m)
    lo = np.log(guess) - 1.0
    hi = np.log(guess) + 0.5
    flo = h(lo, idx)
    fhi = h(hi, idx)
    for _ in range(200):
        bad_lo = flo < 0
        bad_hi = fhi > 0
        if not (bad_lo.any() or bad_hi.any()):
            break
        lo = np.where(bad_lo, lo - 1.0, lo)
        hi = np.where(bad_hi, hi + 1.0, hi)
        if bad_lo.any():
            flo[bad_lo] = h(lo[bad_lo], idx[bad_lo])
        if bad_hi.any():
            fhi[bad_hi] = h(hi[bad_hi], idx[bad_hi])

    side = np.zeros(m, dtype=int)
    active = np.ones(m, dtype=bool)
    x = 0.5 * (lo + hi)
    for _ in range(400):
        active &= (hi - lo) > 1e-13 * np.maximum(1.0, np.abs(lo))
        if not active.any():
            break
        a = np.nonzero(active)[0]
        denom = flo[a] - fhi[a]
        x_new = np.where(denom != 0, (flo[a] * hi[a] - fhi[a] * lo[a]) / np.where(denom != 0, denom, 1), 0.5 * (lo[a] + hi[a]))
        # keep strictly inside the bracket
        inside = (x_new > lo[a]) & (x_new < hi[a])
        x_new = np.where(inside, x_new, 0.5 * (lo[a] + hi[a]))
        fx = h(x_new, a)
        pos = fx >= 0
        x[a] = x_new
        # power decreasing in sigma: f >= 0 means the root is above x
        lo_a, hi_a, flo_a, fhi_a, side_a = lo[a], hi[a], flo[a], fhi[a], side[a]
        lo_a = np.where(pos, x_new, lo_a)
        flo_new = np.where(pos, fx, flo_a)
        hi_a = np.where(pos, hi_a, x_new)
        fhi_new = np.where(pos, fhi_a, fx)
        # Illinois step: halve the stale endpoint's value when the same side moves twice
        fhi_new = np.where(pos & (side_a == 1), fhi_new * 0.5, fhi_new)
        flo_new = np.where(~pos & (side_a == -1), flo_new * 0.5, flo_new)
        side[a] = np.where(pos, 1, -1)
        lo[a], hi[a], flo[a], fhi[a] = lo_a, hi_a, flo_new, fhi_new
    return np.exp(lo)


class SampleSizeCurve:
    """Re-estimated sample size as a function of a variance estimate.

    ``n(x)`` is the smallest total whose power, computed with variance ``x``,
    reaches the target. Since power at a fixed total falls as the variance
    grows, ``n(x)`` is a nondecreasing step function with jumps at
    ``thresholds``: ``n(x) = min{n : x <= thresholds[n - n_min]}``. The table
    grows on demand.
    """

    def __init__(self, spec: DesignSpec, initial_max: int = 2048):
        _check_h1(spec)
        self.spec = spec
        self.n_min = spec.alloc.min_total
        self._lock = threading.Lock()
        self._thr = np.empty(0)
        self._extend_to(max(initial_max, self.n_min + 16))

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()

    @property
    def n_max(self) -> int:
        return self.n_min + len(self._thr) - 1

    @property
    def thresholds(self) -> np.ndarray:
        """Variance thresholds for totals ``n_min .. n_max``."""
        return self._thr

    def _extend_to(self, n_max: int):
        with self._lock:
            start = self.n_min + len(self._thr)
            if n_max < start:
                return
            totals = np.arange(start, n_max + 1)
            sig = _sigma_thresholds(self.spec, totals)
            new = np.concatenate([self._thr, sig * sig])
            self._thr = np.maximum.accumulate(new)

    def ensure(self, x_max: float):
        while self._thr[-1] < x_max:
            self._extend_to(2 * self.n_max)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.size and np.max(x) > self._thr[-1]:
            self.ensure(float(np.max(x)))
        n = self.n_min + np.searchsorted(self._thr, x, side="left")
        return int(n) if n.ndim == 0 else n


class PowerTable:
    """Cached power at the spec's own sigma for integer totals."""

    def __init__(self, spec: DesignSpec):
        self.spec = spec
        self.n_min = spec.alloc.min_total
        self._lock = threading.Lock()
        self._vals = np.empty(0)

    def __call__(self, n):
        n = np.asarray(n, dtype=np.int64)
        if n.size and np.min(n) < self.n_min:
            raise DomainError(f"totals below {self.n_min} are not admissible")
        top = int(np.max(n)) if n.size else self.n_min
        if top >= self.n_min + len(self._vals):
            with self._lock:
                start = self.n_min + len(self._vals)
                stop = max(top, 2 * start)
                more = power_at_totals(self.spec, np.arange(start, stop + 1))
                self._vals = np.concatenate([self._vals, more])
        return self._vals[n - self.n_min]


_CACHE_LOCK = threading.Lock()
_CURVES: Dict[DesignSpec, SampleSizeCurve] = {}
_POWER_TABLES: Dict[DesignSpec, PowerTable] = {}


def sample_size_curve(spec: DesignSpec) -> SampleSizeCurve:
    """Shared :class:`SampleSizeCurve` for ``spec``; the curve does not depend on ``spec.sigma``."""
    key = replace(spec, sigma=1.0)
    with _CACHE_LOCK:
        curve = _CURVES.get(key)
        if curve is None:
            curve = _CURVES[key] = SampleSizeCurve(key)
    return curve


def power_table(spec: DesignSpec) -> PowerTable:
    with _CACHE_LOCK:
        table = _POWER_TABLES.get(spec)
        if table is None:
            table = _POWER_TABLES[spec] = PowerTable(spec)
    return table


def install_curves(curves):
    """Seed the curve cache, e.g. in a worker process, with curves built elsewhere."""
    with _CACHE_LOCK:
        for curve in curves:
            _CURVES.setdefault(curve.spec, curve)
