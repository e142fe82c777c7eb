"""Variance estimators for the internal pilot study and their sampling laws.

Blinded estimators (OS, OSU, XG) see only the pooled outcomes, plus block
membership for XG. The pooled estimator needs treatment labels and is
included as the unblinded benchmark.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .errors import DomainError
from .statcore import chisq_noncentral_pdf

EPS = 1e-12
GROUPS = ("E", "R", "P")


class Method(str, enum.Enum):
    POOLED = "POOLED"
    OS = "OS"
    OSU = "OSU"
    XG = "XG"
    # no pilot estimate; the trial runs at the fixed-design size
    FIXED = "FIXED"


@dataclass(frozen=True)
class TrialData:
    """Outcomes of a (pilot) trial with optional group labels and block indices.

    ``labels`` holds group codes 0, 1, 2 for E, R, P (strings ``"E"``, ``"R"``,
    ``"P"`` are converted on construction).
    """

    outcomes: np.ndarray
    labels: Optional[np.ndarray] = None
    blocks: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        object.__setattr__(self, "outcomes", y)
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.dtype.kind in "US":
                lookup = {g: i for i, g in enumerate(GROUPS)}
                try:
                    lab = np.array([lookup[str(v)] for v in lab], dtype=int)
                except KeyError as exc:
                    raise DomainError(f"unknown group label {exc.args[0]!r}") from None
            lab = lab.astype(int)
            if lab.shape != y.shape or np.any((lab < 0) | (lab > 2)):
                raise DomainError("labels must be one of E/R/P per outcome")
            object.__setattr__(self, "labels", lab)
        if self.blocks is not None:
            blk = np.asarray(self.blocks).astype(int)
            if blk.shape != y.shape:
                raise DomainError("one block index per outcome is required")
            object.__setattr__(self, "blocks", blk)

    @property
    def n1(self) -> int:
        return len(self.outcomes)

    def blinded(self) -> "TrialData":
        """The same data with treatment labels removed."""
        return TrialData(self.outcomes, None, self.blocks)

    def group_counts(self) -> np.ndarray:
        if self.labels is None:
            raise DomainError("group counts need labels")
        return np.bincount(self.labels, minlength=3)


@dataclass(frozen=True)
class VarianceEstimate:
    value: float
    method: Method
    meta: dict = field(default_factory=dict, compare=False)


def _floored(v: float) -> float:
    return max(float(v), EPS)


def pooled_variance(data: TrialData) -> VarianceEstimate:
    """Unblinded pooled within-group variance."""
    if data.labels is None:
        raise DomainError("the pooled estimator is unblinded and needs group labels")
    counts = data.group_counts()
    if np.any(counts < 2) or data.n1 <= 3:
        raise DomainError(f"every group needs at least two observations, got counts {counts.tolist()}")
    ss = 0.0
    for g in range(3):
        yg = data.outcomes[data.labels == g]
        ss += np.sum((yg - yg.mean()) ** 2)
    return VarianceEstimate(_floored(ss / (data.n1 - 3)), Method.POOLED, {"n1": data.n1})


def one_sample_variance(data: TrialData) -> VarianceEstimate:
    """Sample variance of the blinded outcomes."""
    if data.n1 < 2:
        raise DomainError("need at least two observations")
    return VarianceEstimate(_floored(np.var(data.outcomes, ddof=1)), Method.OS, {"n1": data.n1})


def os_bias(means: Sequence[float], pilot_alloc: Sequence[float], n1: int) -> float:
    """Bias of the one-sample variance under group means ``means`` and pilot weights ``pilot_alloc``.

    The prefactor is ``n1 / (n1 - 1)``, which is what the expectation of the
    noncentral chi-squared law gives. When ``mu_P == mu_R`` the equivalent
    between-group form is used instead of the ratio parametrization.
    """
    mu_E, mu_R, mu_P = (float(m) for m in means)
    w = np.asarray(pilot_alloc, dtype=float)
    if w.shape != (3,) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
        raise DomainError("pilot allocation must be three nonnegative weights summing to 1")
    if n1 < 2:
        raise DomainError("n1 must be at least 2")
    lead = n1 / (n1 - 1.0)
    d_pr = mu_P - mu_R
    if d_pr != 0:
        ratio = (mu_P - mu_E) / d_pr
        spread = d_pr**2 * (w[0] * ratio**2 + w[1] - (w[0] * ratio + w[1]) ** 2)
    else:
        mu = np.array([mu_E, mu_R, mu_P])
        spread = float(np.sum(w * (mu - np.sum(w * mu)) ** 2))
    return lead * max(spread, 0.0)


def adjusted_one_sample(
    data: TrialData, means: Sequence[float], pilot_alloc: Sequence[float], n1: Optional[int] = None
) -> VarianceEstimate:
    """One-sample variance minus its bias under the assumed means, floored at ``EPS``."""
    os = one_sample_variance(data)
    n1 = data.n1 if n1 is None else n1
    bias = os_bias(means, pilot_alloc, n1)
    return VarianceEstimate(
        _floored(os.value - bias), Method.OSU, {"n1": n1, "bias": bias, "assumed_means": tuple(means)}
    )


def xing_ganju(data: TrialData) -> VarianceEstimate:
    """Blinded estimator from the sums of complete randomization blocks."""
    if data.blocks is None:
        raise DomainError("the Xing-Ganju estimator needs block membership")
    ids, inverse, sizes = np.unique(data.blocks, return_inverse=True, return_counts=True)
    if len(ids) < 2:
        raise DomainError("need at least two blocks")
    m = int(sizes[0])
    if np.any(sizes != m):
        raise DomainError(f"blocks must all have the same size, got sizes {sorted(set(sizes.tolist()))}")
    if data.labels is not None:
        comp = np.zeros((len(ids), 3), dtype=int)
        np.add.at(comp, (inverse, data.labels), 1)
        if np.any(comp != comp[0]):
            raise DomainError("blocks do not share a common composition")
    sums = np.bincount(inverse, weights=data.outcomes)
    value = np.sum((sums - sums.mean()) ** 2) / (data.n1 - m)
    return VarianceEstimate(_floored(value), Method.XG, {"m": m, "b": len(ids), "n1": data.n1})


@dataclass(frozen=True)
class EstimatorDensity:
    """Law of ``scale * X`` with ``X`` chi-squared on ``df`` degrees of freedom and noncentrality ``lam``."""

    family: str
    scale: float
    df: float
    lam: float = 0.0

    def __post_init__(self):
        if not (self.scale > 0 and self.df > 0 and self.lam >= 0):
            raise DomainError(f"invalid density parameters {self}")

    def pdf(self, x):
        x = np.asarray(x, dtype=float)
        y = np.where(x > 0, x, 0.0) / self.scale
        out = chisq_noncentral_pdf(y, self.df, self.lam) / self.scale
        return np.where(x >= 0, out, 0.0)

    def _dist(self):
        if self.lam == 0:
            return stats.chi2(self.df, scale=self.scale)
        return stats.ncx2(self.df, self.lam, scale=self.scale)

    def cdf(self, x):
        return self._dist().cdf(x)

    def ppf(self, q):
        return self._dist().ppf(q)

    @property
    def mean(self) -> float:
        return self.scale * (self.df + self.lam)

    @property
    def var(self) -> float:
        return self.scale**2 * 2 * (self.df + 2 * self.lam)


def density_os(sigma2: float, n1: int, means: Sequence[float], pilot_alloc: Sequence[float]) -> EstimatorDensity:
    """Sampling law of the one-sample variance for a pilot of size ``n1``."""
    if not sigma2 > 0 or n1 < 2:
        raise DomainError("need sigma2 > 0 and n1 >= 2")
    w = np.asarray(pilot_alloc, dtype=float)
    mu = np.asarray(means, dtype=float)
    lam = n1 * float(np.sum(w * (mu - np.sum(w * mu)) ** 2)) / sigma2
    family = "stretched-noncentral-chisq" if lam > 0 else "stretched-central-chisq"
    return EstimatorDensity(family, sigma2 / (n1 - 1), n1 - 1, lam)


def density_xg(sigma2: float, n1: int, m: int) -> EstimatorDensity:
    """Sampling law of the Xing-Ganju estimator; does not depend on the group means."""
    if not sigma2 > 0:
        raise DomainError("sigma2 must be positive")
    if m < 2 or n1 % m != 0 or n1 // m < 2:
        raise DomainError(f"n1={n1} is not a whole number (>= 2) of blocks of size {m}")
    b = n1 // m
    return EstimatorDensity("stretched-central-chisq", m * sigma2 / (n1 - m), b - 1, 0.0)


def estimate(data: TrialData, method: Method, **kwargs) -> VarianceEstimate:
    """Dispatch to the estimator named by ``method``.

    ``OSU`` needs ``means`` and ``pilot_alloc`` keyword arguments.
    """
    method = Method(method)
    if method is Method.POOLED:
        return pooled_variance(data)
    if method is Method.OS:
        return one_sample_variance(data)
    if method is Method.OSU:
        return adjusted_one_sample(data, kwargs["means"], kwargs["pilot_alloc"])
    if method is Method.XG:
        return xing_ganju(data)
    raise DomainError(f"{method.value} is not a variance estimator")


def read_trial_data(path) -> TrialData:
    """Read a data file: one outcome per line, optionally followed by a group label and a block index.

    Columns may be separated by whitespace or commas. A label of ``-`` marks
    a blinded record, which allows block indices without labels. Labels must
    be given for all records or for none.
    """
    outcomes, labels, blocks = [], [], []
    widths = set()
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        if len(parts) > 3:
            raise DomainError(f"{path}:{lineno}: expected at most 3 columns, got {len(parts)}")
        widths.add(len(parts))
        try:
            outcomes.append(float(parts[0]))
            if len(parts) >= 2:
                if parts[1] not in GROUPS + ("-",):
                    raise ValueError(f"label {parts[1]!r} is not one of E/R/P or -")
                labels.append(parts[1])
            if len(parts) == 3:
                blocks.append(int(parts[2]))
        except ValueError as exc:
            raise DomainError(f"{path}:{lineno}: {exc}") from None
    if len(widths) > 1:
        raise DomainError(f"{path}: lines have differing column counts {sorted(widths)}")
    if labels and "-" in labels:
        if set(labels) != {"-"}:
            raise DomainError(f"{path}: labels are given for some records but not others")
        labels = []
    return TrialData(
        np.array(outcomes),
        np.array(labels) if labels else None,
        np.array(blocks) if blocks else None,
    )
