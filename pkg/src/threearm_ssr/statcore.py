"""Numerical kernel: t quantiles, chi-squared densities, the trivariate normal CDF,
quadrature against a density, and bracketed root finding.

Everything here is a pure function of its arguments, so it is safe to call
from several threads or processes at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Optional, Protocol

import numpy as np
from scipy import optimize, special

from .errors import DomainError, IntegrationError, RootFindingError

# ----------------------------------------------------------------------------
# Quadrature rules
# ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Quadrature:
    """Gauss-Legendre rule on [-1, 1].

    ``degree`` is the highest polynomial degree integrated exactly (2n - 1).
    """

    nodes: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    degree: int

    def __post_init__(self):
        if len(self.nodes) < 16:
            raise DomainError("a quadrature rule needs at least 16 nodes")
        if np.any(self.weights <= 0):
            raise DomainError("quadrature weights must be positive")

    def mapped(self, a, b):
        """Nodes and weights transformed to the intervals ``[a, b]``.

        ``a`` and ``b`` may be arrays of shape ``(p,)``; the result then has
        shape ``(p, n)``.
        """
        a = np.asarray(a, dtype=float)[..., None]
        b = np.asarray(b, dtype=float)[..., None]
        half = 0.5 * (b - a)
        return a + half * (self.nodes + 1.0), half * self.weights

    def integrate(self, f: Callable[[np.ndarray], np.ndarray], a: float, b: float) -> float:
        x, w = self.mapped(a, b)
        return float(np.sum(w * f(x)))


@lru_cache(maxsize=None)
def gauss_legendre(n: int = 16) -> Quadrature:
    x, w = np.polynomial.legendre.leggauss(n)
    return Quadrature(nodes=x, weights=w, degree=2 * n - 1)


# ----------------------------------------------------------------------------
# Univariate distributions
# ----------------------------------------------------------------------------

norm_cdf = special.ndtr


def t_quantile(p, nu):
    """Lower ``p``-quantile of Student's t with ``nu`` (possibly fractional) degrees of freedom."""
    p_arr = np.asarray(p, dtype=float)
    nu_arr = np.asarray(nu, dtype=float)
    if np.any(~((p_arr > 0) & (p_arr < 1))):
        raise DomainError(f"probability must lie in (0, 1), got {p!r}")
    if np.any(~(nu_arr > 0)):
        raise DomainError(f"degrees of freedom must be positive, got {nu!r}")
    q = special.stdtrit(nu_arr, p_arr)
    return float(q) if np.ndim(q) == 0 else q


def _log_chi2_pdf(x, k):
    # x > 0 assumed
    h = 0.5 * k
    return (h - 1.0) * np.log(x) - 0.5 * x - h * math.log(2.0) - special.gammaln(h)


def chisq_pdf(x, k):
    """Central chi-squared density."""
    x = np.asarray(x, dtype=float)
    k = np.asarray(k, dtype=float)
    x, k = np.broadcast_arrays(x, k)
    out = np.zeros(x.shape)
    pos = x > 0
    out[pos] = np.exp(_log_chi2_pdf(x[pos], k[pos]))
    zero = x == 0
    out[zero & (k == 2)] = 0.5
    out[zero & (k < 2)] = np.inf
    return out


_SERIES_EPS = 1e-17


def chisq_noncentral_pdf(x, k, lam):
    """Density of the noncentral chi-squared law with ``k`` degrees of freedom and noncentrality ``lam``.

    Evaluated as the Poisson(lam/2) mixture of central chi-squared densities
    with ``k + 2j`` degrees of freedom. Summation starts at the largest term
    and walks outward in both directions; the sequence of terms is log-concave
    in ``j``, so each one-sided remainder is bounded by a geometric series and
    summation stops once that bound is below ``1e-17`` of the running sum.
    """
    x, k, lam = np.broadcast_arrays(
        np.asarray(x, dtype=float), np.asarray(k, dtype=float), np.asarray(lam, dtype=float)
    )
    if np.any(x < 0) or np.any(k <= 0) or np.any(lam < 0):
        raise DomainError("need x >= 0, k > 0 and lambda >= 0")
    shape = x.shape
    x, k, lam = x.ravel(), k.ravel(), lam.ravel()
    out = np.zeros(x.shape)

    central = lam == 0
    out[central] = chisq_pdf(x[central], k[central])

    at_zero = (~central) & (x == 0)
    # only the j = 0 term survives at the origin
    out[at_zero] = np.exp(-0.5 * lam[at_zero]) * chisq_pdf(0.0, k[at_zero])

    sel = (~central) & (x > 0)
    if np.any(sel):
        out[sel] = _ncx2_series(x[sel], k[sel], lam[sel])
    return out.reshape(shape)


def _ncx2_series(x, k, lam):
    half_lam = 0.5 * lam
    log_half_lam = np.log(half_lam)

    def log_term(j):
        return -half_lam + j * log_half_lam - special.gammaln(j + 1.0) + _log_chi2_pdf(x, k + 2.0 * j)

    def ratio_up(j):
        # t_{j+1} / t_j
        return lam * x / (2.0 * (j + 1.0) * (k + 2.0 * j))

    # modal index: largest j with t_j >= t_{j-1}
    c = lam * x
    disc = (2 * k + 4) ** 2 - 16 * (2 * k - c)
    root = (-(2 * k + 4) + np.sqrt(np.maximum(disc, 0.0))) / 8.0
    mode = np.maximum(np.ceil(root), 0.0)

    log_ref = log_term(mode)
    total = np.ones_like(x)

    # upward sweep
    j = mode.copy()
    term = np.ones_like(x)
    active = np.ones(x.shape, dtype=bool)
    while np.any(active):
        r = ratio_up(j)
        bound = np.where(r < 1, term * r / np.maximum(1 - r, 1e-300), np.inf)
        active &= bound > _SERIES_EPS * total
        if not np.any(active):
            break
        j = np.where(active, j + 1.0, j)
        new = np.exp(log_term(j) - log_ref)
        term = np.where(active, new, term)
        total = total + np.where(active, new, 0.0)

    # downward sweep
    j = mode.copy()
    term = np.ones_like(x)
    active = j > 0
    while np.any(active):
        q = np.where(j > 0, 2.0 * j * (k + 2.0 * j - 2.0) / c, 0.0)
        bound = np.where(q < 1, term * q / np.maximum(1 - q, 1e-300), np.inf)
        active &= (j > 0) & (bound > _SERIES_EPS * total)
        if not np.any(active):
            break
        j = np.where(active, j - 1.0, j)
        new = np.exp(log_term(j) - log_ref)
        term = np.where(active, new, term)
        total = total + np.where(active, new, 0.0)

    return np.exp(log_ref) * total


# ----------------------------------------------------------------------------
# Bivariate and trivariate normal CDF
# ----------------------------------------------------------------------------

_TWOPI = 2.0 * math.pi


def _half_rule(n):
    x, w = np.polynomial.legendre.leggauss(n)
    keep = x > 0
    return x[keep], w[keep]


_BVN_RULES = [_half_rule(6), _half_rule(12), _half_rule(20)]


def _bvn_upper(h, k, r):
    """P(X > h, Y > k) for finite h, k (Drezner-Wesolowsky / Genz), vectorized."""
    out = np.empty(h.shape)
    absr = np.abs(r)
    groups = [absr < 0.3, (absr >= 0.3) & (absr < 0.75), absr >= 0.75]
    for sel, (xg, wg) in zip(groups, _BVN_RULES):
        if not np.any(sel):
            continue
        hh, kk, rr = h[sel], k[sel], r[sel]
        out[sel] = _bvn_upper_rule(hh, kk, rr, xg, wg)
    return out


def _bvn_upper_rule(h, k, r, xg, wg):
    res = np.empty(h.shape)
    hk = h * k
    low = np.abs(r) < 0.925

    if np.any(low):
        hl, kl, rl, hkl = h[low], k[low], r[low], hk[low]
        hs = 0.5 * (hl * hl + kl * kl)
        asr = np.arcsin(rl)[:, None]
        acc = np.zeros(hl.shape)
        for sgn in (-1.0, 1.0):
            sn = np.sin(asr * (1.0 + sgn * xg) / 2.0)
            acc += np.sum(wg * np.exp((sn * hkl[:, None] - hs[:, None]) / (1.0 - sn * sn)), axis=1)
        res[low] = acc * asr[:, 0] / (2.0 * _TWOPI) + special.ndtr(-hl) * special.ndtr(-kl)

    high = ~low
    if np.any(high):
        hh, kk, rr = h[high], k[high].copy(), r[high]
        hkh = hk[high].copy()
        neg = rr < 0
        kk[neg] = -kk[neg]
        hkh[neg] = -hkh[neg]
        bvn = np.zeros(hh.shape)
        inner = np.abs(rr) < 1
        if np.any(inner):
            h_, k_, r_, hk_ = hh[inner], kk[inner], rr[inner], hkh[inner]
            as_ = (1.0 - r_) * (1.0 + r_)
            a = np.sqrt(as_)
            bs = (h_ - k_) ** 2
            c = (4.0 - hk_) / 8.0
            d = (12.0 - hk_) / 16.0
            v = a * np.exp(-(bs / as_ + hk_) / 2.0) * (
                1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0
            )
            b = np.sqrt(bs)
            with np.errstate(over="ignore", invalid="ignore"):
                tail = np.exp(-hk_ / 2.0) * math.sqrt(_TWOPI) * special.ndtr(-b / a) * b * (
                    1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0
                )
            v = v - np.where(hk_ > -160.0, tail, 0.0)
            a2 = (a / 2.0)[:, None]
            for sgn in (-1.0, 1.0):
                xs = (a2 * (sgn * xg + 1.0)) ** 2
                rs = np.sqrt(1.0 - xs)
                with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                    t1 = np.exp(-bs[:, None] / (2.0 * xs) - hk_[:, None] / (1.0 + rs)) / rs
                    t2 = np.exp(-(bs[:, None] / xs + hk_[:, None]) / 2.0) * (
                        1.0 + c[:, None] * xs * (1.0 + d[:, None] * xs)
                    )
                v = v + np.sum(a2 * wg * np.nan_to_num(t1 - t2), axis=1)
            bvn[inner] = -v / _TWOPI
        pos = rr > 0
        bvn[pos] = bvn[pos] + special.ndtr(-np.maximum(hh[pos], kk[pos]))
        bvn[~pos] = -bvn[~pos]
        fix = (~pos) & (kk > hh)
        hf, kf = hh[fix], kk[fix]
        bvn[fix] = bvn[fix] + np.where(
            hf < 0, special.ndtr(kf) - special.ndtr(hf), special.ndtr(-hf) - special.ndtr(-kf)
        )
        res[high] = bvn
    return res


def bvn_cdf(h, k, r):
    """Lower bivariate normal probability P(X <= h, Y <= k) with correlation ``r``.

    Infinite limits are allowed. Accurate to about 1e-15 absolute.
    """
    h, k, r = np.broadcast_arrays(
        np.asarray(h, dtype=float), np.asarray(k, dtype=float), np.asarray(r, dtype=float)
    )
    if np.any(np.abs(r) > 1):
        raise DomainError("correlation must lie in [-1, 1]")
    shape = h.shape
    h, k, r = h.ravel(), k.ravel(), np.clip(r.ravel(), -1.0, 1.0)
    out = np.zeros(h.shape)
    fin = np.isfinite(h) & np.isfinite(k)
    if np.any(fin):
        out[fin] = _bvn_upper(-h[fin], -k[fin], r[fin])
    # with an infinite limit the probability collapses to a univariate one
    hinf = ~np.isfinite(h)
    kinf = ~np.isfinite(k)
    out[hinf & (h > 0)] = special.ndtr(k[hinf & (h > 0)])
    out[kinf & (k > 0)] = special.ndtr(h[kinf & (k > 0)])
    out[(hinf & (h < 0)) | (kinf & (k < 0))] = 0.0
    out = np.clip(out, 0.0, 1.0)
    return float(out[0]) if shape == () else out.reshape(shape)


@dataclass(frozen=True)
class Corr3:
    """Off-diagonal entries of a 3x3 correlation matrix (unit diagonal implied)."""

    r12: float
    r13: float
    r23: float

    def __post_init__(self):
        for name in ("r12", "r13", "r23"):
            v = getattr(self, name)
            if not (-1.0 <= v <= 1.0):
                raise DomainError(f"{name}={v!r} is not a correlation")
        if np.linalg.eigvalsh(self.matrix()).min() < -1e-10:
            raise DomainError(f"correlation matrix {self} is not positive semidefinite")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[1.0, self.r12, self.r13], [self.r12, 1.0, self.r23], [self.r13, self.r23, 1.0]]
        )


_Z_LIMIT = 9.0  # Phi(-9) ~ 1e-19
_DEGENERATE = 1e-14


def mvn3_cdf(upper, corr: Corr3):
    """P(Z1 <= u1, Z2 <= u2, Z3 <= u3) for a standard trivariate normal with correlation ``corr``.

    ``upper`` may have shape ``(3,)`` or ``(..., 3)``; entries may be infinite.
    """
    if not isinstance(corr, Corr3):
        corr = Corr3(*corr)
    u = np.asarray(upper, dtype=float)
    if u.shape[-1] != 3:
        raise DomainError("upper limits must have a trailing dimension of 3")
    flat = u.reshape(-1, 3)
    n = flat.shape[0]
    res = mvn3_cdf_arrays(
        flat[:, 0],
        flat[:, 1],
        flat[:, 2],
        np.full(n, corr.r12),
        np.full(n, corr.r13),
        np.full(n, corr.r23),
    )
    return float(res[0]) if u.ndim == 1 else res.reshape(u.shape[:-1])


def mvn3_cdf_arrays(u1, u2, u3, r12, r13, r23, panels: int = 4, rule: Optional[Quadrature] = None):
    """Vectorized trivariate normal CDF over equal-length arrays; no validation of the correlations.

    The first step picks, per element, the coordinate least correlated with
    the others and conditions on it. The remaining bivariate probability is
    integrated over the conditioning coordinate with composite Gauss-Legendre,
    splitting at the points where the integrand has kinks or steep transitions.
    """
    rule = rule or gauss_legendre(16)
    u = np.stack([np.asarray(u1, float), np.asarray(u2, float), np.asarray(u3, float)], axis=1)
    r12, r13, r23 = (np.asarray(v, dtype=float) for v in (r12, r13, r23))
    n = u.shape[0]

    # per-element conditioning coordinate c with the two others a, b
    worst = np.stack(
        [np.maximum(abs(r12), abs(r13)), np.maximum(abs(r12), abs(r23)), np.maximum(abs(r13), abs(r23))],
        axis=1,
    )
    c = np.argmin(worst, axis=1)
    ua = np.where(c == 0, u[:, 1], u[:, 0])
    ub = np.where(c == 2, u[:, 1], u[:, 2])
    uc = u[np.arange(n), c]
    rca = np.where(c == 0, r12, np.where(c == 1, r12, r13))
    rcb = np.where(c == 0, r13, np.where(c == 1, r23, r23))
    rab = np.where(c == 0, r23, np.where(c == 1, r13, r12))

    out = np.zeros(n)
    dead = (ua == -np.inf) | (ub == -np.inf) | (uc < -_Z_LIMIT)
    live = ~dead
    if not np.any(live):
        return out
    ua, ub, uc, rca, rcb, rab = (v[live] for v in (ua, ub, uc, rca, rcb, rab))
    m = ua.shape[0]

    sa = np.sqrt(np.maximum(1.0 - rca * rca, 0.0))
    sb = np.sqrt(np.maximum(1.0 - rcb * rcb, 0.0))
    if np.any(sa == 0) or np.any(sb == 0):
        raise DomainError("conditioning on a perfectly correlated coordinate is not supported")
    rho = np.clip((rab - rca * rcb) / (sa * sb), -1.0, 1.0)

    lo = np.full(m, -_Z_LIMIT)
    hi = np.minimum(uc, _Z_LIMIT)

    # candidate breakpoints: centre of each conditional sigmoid, and the kink for |rho| ~ 1
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        za = np.where(rca != 0, ua / rca, np.nan)
        zb = np.where(rcb != 0, ub / rcb, np.nan)
        slope_a, slope_b = rca / sa, rcb / sb
        kink_pos = (ub / sb - ua / sa) / (slope_b - slope_a)
        kink_neg = (ua / sa + ub / sb) / (slope_a + slope_b)
    kink = np.where(rho > 0.9, kink_pos, np.where(rho < -0.9, kink_neg, np.nan))
    cuts = np.stack([za, zb, kink], axis=1)
    cuts = np.where(np.isfinite(cuts), cuts, np.nan)
    cuts = np.clip(cuts, lo[:, None], hi[:, None])
    cuts = np.where(np.isnan(cuts), hi[:, None], cuts)
    edges = np.sort(np.concatenate([lo[:, None], cuts, hi[:, None]], axis=1), axis=1)

    # each of the 4 segments split into `panels` equal panels
    frac = np.linspace(0.0, 1.0, panels + 1)
    seg_lo, seg_hi = edges[:, :-1], edges[:, 1:]
    pa = seg_lo[:, :, None] + (seg_hi - seg_lo)[:, :, None] * frac[:-1]
    pb = seg_lo[:, :, None] + (seg_hi - seg_lo)[:, :, None] * frac[1:]
    z, w = rule.mapped(pa.reshape(m, -1), pb.reshape(m, -1))
    z = z.reshape(m, -1)
    w = w.reshape(m, -1)

    with np.errstate(invalid="ignore", over="ignore"):
        a = (ua[:, None] - rca[:, None] * z) / sa[:, None]
        b = (ub[:, None] - rcb[:, None] * z) / sb[:, None]
    rr = np.broadcast_to(rho[:, None], z.shape)
    inner = np.empty(z.shape)
    deg_pos = rr >= 1.0 - _DEGENERATE
    deg_neg = rr <= -1.0 + _DEGENERATE
    gen = ~(deg_pos | deg_neg)
    inner[deg_pos] = special.ndtr(np.minimum(a[deg_pos], b[deg_pos]))
    inner[deg_neg] = np.maximum(special.ndtr(a[deg_neg]) - special.ndtr(-b[deg_neg]), 0.0)
    if np.any(gen):
        inner[gen] = bvn_cdf(a[gen], b[gen], rr[gen])
    dens = np.exp(-0.5 * z * z) / math.sqrt(_TWOPI)
    out[live] = np.clip(np.sum(w * dens * inner, axis=1), 0.0, 1.0)
    return out


# ----------------------------------------------------------------------------
# Integration against a density
# ----------------------------------------------------------------------------


class Density(Protocol):
    def pdf(self, x): ...

    def ppf(self, q): ...


def integrate(
    f: Callable[[np.ndarray], np.ndarray],
    weight: Density,
    *,
    breakpoints: Optional[Iterable[float]] = None,
    tail: float = 1e-9,
    tol: float = 1e-7,
    max_rounds: int = 80,
) -> float:
    """Integral of ``f(x) * weight.pdf(x)`` over (0, inf).

    The domain is truncated to the ``tail`` and ``1 - tail`` quantiles of
    ``weight``. ``f`` must accept an array of abscissae. Known jump locations
    of ``f`` should be passed as ``breakpoints``; any others are found by
    adaptive bisection of panels whose 16-point and split 2x16-point
    estimates disagree.
    """
    rule = gauss_legendre(16)
    lo = float(weight.ppf(tail))
    hi = float(weight.ppf(1.0 - tail))
    if not (hi > lo):
        raise IntegrationError("degenerate integration range", 0.0, float("inf"))
    edges = [lo, hi]
    if breakpoints is not None:
        bp = np.asarray(list(breakpoints) if not isinstance(breakpoints, np.ndarray) else breakpoints, float)
        bp = bp[(bp > lo) & (bp < hi)]
        edges = np.unique(np.concatenate([[lo], bp, [hi]]))
    edges = np.asarray(edges, dtype=float)
    if len(edges) < 9:
        edges = np.unique(np.concatenate([edges, np.linspace(lo, hi, 9)]))
    a, b = edges[:-1], edges[1:]

    def panel(a, b):
        x, w = rule.mapped(a, b)
        coarse = np.sum(w * f(x) * weight.pdf(x), axis=1)
        mid = 0.5 * (a + b)
        xl, wl = rule.mapped(a, mid)
        xr, wr = rule.mapped(mid, b)
        fine = np.sum(wl * f(xl) * weight.pdf(xl), axis=1) + np.sum(wr * f(xr) * weight.pdf(xr), axis=1)
        return fine, np.abs(fine - coarse)

    est, err = panel(a, b)
    done_val = 0.0
    done_err = 0.0
    for _ in range(max_rounds):
        total_err = done_err + err.sum()
        if total_err <= tol:
            return float(done_val + est.sum())
        npan = len(est)
        split = err > tol / (2.0 * max(npan, 1))
        done_val += est[~split].sum()
        done_err += err[~split].sum()
        a, b = a[split], b[split]
        mid = 0.5 * (a + b)
        a, b = np.concatenate([a, mid]), np.concatenate([mid, b])
        est, err = panel(a, b)
    raise IntegrationError(
        "adaptive quadrature did not converge", float(done_val + est.sum()), float(done_err + err.sum())
    )


# ----------------------------------------------------------------------------
# Root finding
# ----------------------------------------------------------------------------


def find_root(
    g: Callable[[float], float],
    lo: float,
    hi: float,
    tol: float = 1e-10,
    limits: Optional[tuple] = None,
    max_expand: int = 60,
) -> float:
    """Root of a monotone function inside ``[lo, hi]``.

    If ``g(lo)`` and ``g(hi)`` have the same sign the bracket is widened
    geometrically (halving ``lo``, doubling ``hi``) but never past
    ``limits``. Raises :class:`RootFindingError` if no sign change is found.
    """
    if not hi > lo:
        raise DomainError("bracket must satisfy lo < hi")
    glo, ghi = g(lo), g(hi)
    min_lo, max_hi = limits if limits is not None else (-np.inf, np.inf)
    for _ in range(max_expand):
        if glo == 0:
            return lo
        if ghi == 0:
            return hi
        if np.sign(glo) != np.sign(ghi):
            break
        # move the end that is on the same side as the root is likely to be
        moved = False
        if abs(glo) < abs(ghi) and lo > min_lo:
            lo = max(min_lo, lo / 2.0 if lo > 0 else lo - (hi - lo))
            glo, moved = g(lo), True
        elif hi < max_hi:
            hi = min(max_hi, hi * 2.0 if hi > 0 else hi + (hi - lo))
            ghi, moved = g(hi), True
        elif lo > min_lo:
            lo = max(min_lo, lo / 2.0 if lo > 0 else lo - (hi - lo))
            glo, moved = g(lo), True
        if not moved:
            break
    if np.sign(glo) == np.sign(ghi):
        raise RootFindingError(f"no sign change on [{lo}, {hi}]: g={glo:.3g}, {ghi:.3g}")
    return float(optimize.brentq(g, lo, hi, xtol=tol, rtol=4 * np.finfo(float).eps, maxiter=500))
