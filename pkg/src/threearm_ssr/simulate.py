"""Monte Carlo evaluation of re-estimation designs.

Replications are processed in chunks of ``CHUNK`` trials. Chunk ``c`` of a
scenario draws from a Philox generator seeded with
``SeedSequence(seed, spawn_key=(scenario_key, c))``, where ``scenario_key``
is taken from a SHA-256 digest of the scenario id. A chunk is always drawn
in full and the surplus discarded, so every replication's draws depend only
on (seed, scenario id, replication index) and not on the replication count
or on how chunks are spread over worker processes.

Within a replication the pilot is simulated subject by subject. The second
stage only enters the analysis through per-group sums and sums of squares,
so those are drawn directly from their normal and scaled chi-squared laws.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
from scipy import special

from .design import (
    AllocationRatio,
    DesignSpec,
    GroupSizes,
    install_curves,
    required_sample_size,
    sample_size_curve,
)
from .errors import DomainError
from .estimators import EPS, Method, TrialData, os_bias
from .reestimate import ReestimationPolicy, final_sample_size

CHUNK = 1000
HYPOTHESES = ("ER", "EP", "RP", "global")
DEFAULT_POWER_REPS = 15000
DEFAULT_T1E_REPS = 50000


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulated scenario.

    ``truth`` holds the means (E, R, P) used to generate data; the planning
    alternative in ``spec`` drives re-estimation and the margins drive the
    tests. ``target`` names the null hypothesis whose rejection rate is the
    quantity of interest in a type I error run (``None`` for power runs).
    """

    spec: DesignSpec
    policy: ReestimationPolicy
    truth: Optional[Tuple[float, float, float]] = None
    reps: int = DEFAULT_POWER_REPS
    seed: int = 1
    target: Optional[str] = None

    def __post_init__(self):
        truth = self.spec.means if self.truth is None else tuple(float(v) for v in self.truth)
        if len(truth) != 3:
            raise DomainError("truth needs three means (E, R, P)")
        object.__setattr__(self, "truth", truth)
        if self.reps < 1:
            raise DomainError("reps must be positive")
        if not 0 <= int(self.seed) < 2**64:
            raise DomainError("seed must be an unsigned 64-bit integer")
        if self.target is not None and self.target not in HYPOTHESES[:3]:
            raise DomainError(f"target must be one of ER, EP, RP, got {self.target!r}")
        self.policy.check(self.spec)

    @property
    def scenario_id(self) -> str:
        """Canonical text form of every input except ``reps`` and ``seed``."""
        s, p = self.spec, self.policy
        parts = [
            ("kind", "t1e_" + self.target if self.target else "power"),
            ("method", p.method.value),
            ("n1", str(p.n1)),
            ("m", "" if p.m is None else str(p.m)),
            ("zeta", _fmt(p.zeta)),
            ("alloc", str(s.alloc)),
            ("plan", "/".join(_fmt(v) for v in s.means)),
            ("truth", "/".join(_fmt(v) for v in self.truth)),
            ("margins", "/".join(_fmt(v) for v in (s.delta_ER, s.delta_EP, s.delta_RP))),
            ("sigma", _fmt(s.sigma)),
            ("alpha", _fmt(s.alpha)),
            ("power", _fmt(s.target_power)),
        ]
        return ";".join(f"{k}={v}" for k, v in parts)

    @classmethod
    def from_id(cls, scenario_id: str, reps: int, seed: int) -> "ScenarioConfig":
        """Inverse of :attr:`scenario_id`."""
        try:
            kv = dict(item.split("=", 1) for item in scenario_id.split(";"))
            mu_E, mu_R, mu_P = (float(v) for v in kv["plan"].split("/"))
            d_ER, d_EP, d_RP = (float(v) for v in kv["margins"].split("/"))
            spec = DesignSpec(
                mu_P=mu_P, mu_E=mu_E, mu_R=mu_R, delta_ER=d_ER, delta_EP=d_EP, delta_RP=d_RP,
                sigma=float(kv["sigma"]), alloc=AllocationRatio.parse(kv["alloc"]),
                alpha=float(kv["alpha"]), target_power=float(kv["power"]),
            )
            policy = ReestimationPolicy(
                Method(kv["method"]), int(kv["n1"]), int(kv["m"]) if kv["m"] else None, float(kv["zeta"])
            )
            truth = tuple(float(v) for v in kv["truth"].split("/"))
            kind = kv["kind"]
            target = kind[4:] if kind.startswith("t1e_") else None
        except (KeyError, ValueError) as exc:
            raise DomainError(f"malformed scenario id {scenario_id!r}: {exc}") from None
        return cls(spec, policy, truth, reps, seed, target)

    def block_composition(self) -> Tuple[int, int, int]:
        """Per-group counts in one randomization block."""
        alloc = self.spec.alloc
        m = self.policy.m if self.policy.m is not None else alloc.block_size
        k = m // alloc.block_size
        return tuple(k * r for r in alloc.ratios)


@dataclass(frozen=True)
class SimulationReport:
    scenario_id: str
    reps: int
    seed: int
    rates: Dict[str, float]
    n_final_median: float
    n_final_q1: float
    n_final_q3: float
    n_final_mean: float
    mean_estimate: float = float("nan")
    target: Optional[str] = None
    extra: dict = field(default_factory=dict, compare=False)

    def mc_error(self, key: str = "global") -> float:
        p = self.rates[key]
        return math.sqrt(p * (1 - p) / self.reps)

    @property
    def power(self) -> float:
        return self.rates["global"]

    @property
    def t1e(self) -> Optional[float]:
        return None if self.target is None else self.rates[self.target]

    @property
    def mc_err(self) -> float:
        """Monte Carlo error of the headline rate (targeted local rate for type I error runs)."""
        return self.mc_error(self.target or "global")


# ---------------------------------------------------------------- trial generation


def generate_trial(
    truth: Sequence[float],
    sigma: float,
    sizes: GroupSizes,
    block: Sequence[int],
    rng: np.random.Generator,
    strict: bool = False,
) -> TrialData:
    """Subject-level trial with permuted-block allocation.

    Each block holds ``block[k]`` subjects of group ``k`` in random order. If
    the sizes are not a whole number of blocks, the leftover subjects form
    a truncated last block, unless ``strict`` is set, in which case this is
    an error (needed for block-based estimation).
    """
    counts = np.array([int(v) for v in sizes.as_tuple()])
    if np.any(counts != np.array(sizes.as_tuple())):
        raise DomainError("group sizes must be integers")
    comp = np.array([int(v) for v in block])
    if comp.shape != (3,) or np.any(comp < 1):
        raise DomainError("block composition needs a positive count per group")
    nb = int(np.min(counts // comp))
    rest = counts - nb * comp
    if strict and (np.any(rest != 0) or np.any(counts % comp != 0)):
        raise DomainError(f"sizes {tuple(counts)} are not a whole number of blocks {tuple(comp)}")
    unit = np.repeat(np.arange(3), comp)
    labels = [rng.permutation(unit) for _ in range(nb)]
    blocks = [np.full(len(unit), i) for i in range(nb)]
    if rest.sum():
        labels.append(rng.permutation(np.repeat(np.arange(3), rest)))
        blocks.append(np.full(int(rest.sum()), nb))
    lab = np.concatenate(labels) if labels else np.empty(0, dtype=int)
    blk = np.concatenate(blocks) if blocks else np.empty(0, dtype=int)
    y = np.asarray(truth, dtype=float)[lab] + sigma * rng.standard_normal(len(lab))
    return TrialData(y, lab, blk)


# ---------------------------------------------------------------- testing


@dataclass(frozen=True)
class IUTResult:
    reject_ER: bool
    reject_EP: bool
    reject_RP: bool
    reject_global: bool
    p_ER: float
    p_EP: float
    p_RP: float


def _pairwise_tests(spec: DesignSpec, means: np.ndarray, ss: np.ndarray, counts: np.ndarray):
    """Statistics, p-values and rejections of the three local tests, vectorized over rows.

    ``means``, ``ss`` (within-group sums of squares) and ``counts`` have
    shape ``(..., 3)`` in group order E, R, P.
    """

    def stat(i, j, shift):
        df = counts[..., i] + counts[..., j] - 2
        s2 = (ss[..., i] + ss[..., j]) / df
        se = np.sqrt(s2 * (1.0 / counts[..., i] + 1.0 / counts[..., j]))
        return (means[..., i] - means[..., j] + shift) / se, df

    t_er, df_er = stat(0, 1, -spec.delta_ER)
    t_ep, df_ep = stat(0, 2, spec.delta_EP)
    t_rp, df_rp = stat(1, 2, spec.delta_RP)
    out = {}
    for key, t, df in (("ER", t_er, df_er), ("EP", t_ep, df_ep), ("RP", t_rp, df_rp)):
        crit = special.stdtrit(df, spec.alpha)
        out[key] = (t, special.stdtr(df, t), t < crit)
    return out


def iut_test(data: TrialData, spec: DesignSpec) -> IUTResult:
    """One-sided pooled two-sample t-tests of the three local hypotheses and their intersection-union test."""
    if data.labels is None:
        raise DomainError("testing needs group labels")
    counts = data.group_counts()
    if np.any(counts < 2):
        raise DomainError(f"every group needs at least two observations, got {counts.tolist()}")
    means = np.array([data.outcomes[data.labels == g].mean() for g in range(3)])
    ss = np.array([np.sum((data.outcomes[data.labels == g] - means[g]) ** 2) for g in range(3)])
    res = _pairwise_tests(spec, means, ss, counts.astype(float))
    rej = {k: bool(v[2]) for k, v in res.items()}
    return IUTResult(
        rej["ER"], rej["EP"], rej["RP"], rej["ER"] and rej["EP"] and rej["RP"],
        float(res["ER"][1]), float(res["EP"][1]), float(res["RP"][1]),
    )


# ---------------------------------------------------------------- chunk engine


def _scenario_key(scenario_id: str) -> int:
    return int.from_bytes(hashlib.sha256(scenario_id.encode("utf-8")).digest()[:8], "little")


def _chunk_rng(config: ScenarioConfig, chunk: int) -> np.random.Generator:
    seq = np.random.SeedSequence(int(config.seed), spawn_key=(_scenario_key(config.scenario_id), int(chunk)))
    return np.random.Generator(np.random.Philox(seq))


def _pilot_estimates(config: ScenarioConfig, pilot: Sequence[np.ndarray], sums, ss) -> np.ndarray:
    policy, spec = config.policy, config.spec
    n1 = policy.n1
    method = policy.method
    counts = np.array([g.shape[1] for g in pilot], dtype=float)
    grand = sums.sum(axis=1) / n1
    total_ss = ss.sum(axis=1) + np.sum(counts * (sums / counts - grand[:, None]) ** 2, axis=1)
    if method is Method.POOLED:
        est = ss.sum(axis=1) / (n1 - 3)
    elif method is Method.OS:
        est = total_ss / (n1 - 1)
    elif method is Method.OSU:
        est = total_ss / (n1 - 1) - os_bias(spec.means, counts / n1, n1)
    elif method is Method.XG:
        m = policy.m
        b = n1 // m
        comp = config.block_composition()
        block_sums = sum(g.reshape(g.shape[0], b, mk).sum(axis=2) for g, mk in zip(pilot, comp))
        est = np.sum((block_sums - block_sums.mean(axis=1, keepdims=True)) ** 2, axis=1) / (n1 - m)
    else:
        return np.full(len(grand), np.nan)
    return np.maximum(est, EPS)


def _simulate_chunk(config: ScenarioConfig, chunk: int):
    """Simulate replications ``chunk*CHUNK .. (chunk+1)*CHUNK - 1``.

    Returns final totals, the ``(CHUNK, 4)`` rejection flags (ER, EP, RP,
    global) and the pilot variance estimates.
    """
    spec, policy = config.spec, config.policy
    rng = _chunk_rng(config, chunk)
    sigma = spec.sigma
    truth = np.array(config.truth)
    n1k = np.array(spec.alloc.apportion(policy.n1))

    pilot = [truth[k] + sigma * rng.standard_normal((CHUNK, int(n1k[k]))) for k in range(3)]
    sums1 = np.stack([g.sum(axis=1) for g in pilot], axis=1)
    ss1 = np.stack([np.sum((g - g.mean(axis=1, keepdims=True)) ** 2, axis=1) for g in pilot], axis=1)
    est = _pilot_estimates(config, pilot, sums1, ss1)

    if policy.method is Method.FIXED:
        n_fixed, _ = required_sample_size(spec)
        n_final = np.full(CHUNK, max(policy.n1, n_fixed), dtype=np.int64)
    else:
        n_final = np.asarray(final_sample_size(policy, sample_size_curve(spec)(est)), dtype=np.int64)

    n2k = spec.alloc.apportion_many(n_final - policy.n1).astype(float)
    z = rng.standard_normal((CHUNK, 3))
    g = rng.standard_gamma(np.maximum(n2k - 1, 0) / 2.0)
    sums2 = n2k * truth + sigma * np.sqrt(n2k) * z
    ss2 = 2.0 * sigma * sigma * g

    n1f = n1k.astype(float)
    counts = n1f + n2k
    mean1 = sums1 / n1f
    mean2 = np.divide(sums2, n2k, out=np.zeros_like(sums2), where=n2k > 0)
    ss = ss1 + ss2 + n1f * n2k / counts * (mean1 - mean2) ** 2
    means = (sums1 + sums2) / counts

    res = _pairwise_tests(spec, means, ss, counts)
    rej = np.stack([res["ER"][2], res["EP"][2], res["RP"][2]], axis=1)
    rej = np.concatenate([rej, rej.all(axis=1, keepdims=True)], axis=1)
    return n_final, rej, est


def run_adaptive_trial(config: ScenarioConfig, index: int) -> Tuple[int, Tuple[bool, bool, bool, bool]]:
    """Final total and rejection flags (ER, EP, RP, global) of replication ``index``."""
    if index < 0:
        raise DomainError("replication index must be nonnegative")
    chunk, pos = divmod(int(index), CHUNK)
    n_final, rej, _ = _simulate_chunk(config, chunk)
    return int(n_final[pos]), tuple(bool(v) for v in rej[pos])


def _chunk_task(config: ScenarioConfig, chunk: int, curve):
    if curve is not None:
        install_curves([curve])
    return _simulate_chunk(config, chunk)


def _run(config: ScenarioConfig, workers: int = 1, executor: Optional[Executor] = None):
    n_chunks = -(-config.reps // CHUNK)
    if executor is None and workers > 1 and n_chunks > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return _run(config, workers, pool)
    if executor is None or n_chunks == 1:
        parts = [_simulate_chunk(config, c) for c in range(n_chunks)]
    else:
        # ship the threshold table so workers need not rebuild it
        curve = None if config.policy.method is Method.FIXED else sample_size_curve(config.spec)
        parts = list(executor.map(_chunk_task, [config] * n_chunks, range(n_chunks), [curve] * n_chunks))
    n_final = np.concatenate([p[0] for p in parts])[: config.reps]
    rej = np.concatenate([p[1] for p in parts])[: config.reps]
    est = np.concatenate([p[2] for p in parts])[: config.reps]
    return n_final, rej, est


def simulate(
    config: ScenarioConfig, workers: int = 1, executor: Optional[Executor] = None
) -> SimulationReport:
    """Run all replications of ``config`` and summarize them."""
    n_final, rej, est = _run(config, workers, executor)
    rates = {k: float(np.mean(rej[:, i])) for i, k in enumerate(HYPOTHESES)}
    q1, med, q3 = np.percentile(n_final, [25, 50, 75])
    return SimulationReport(
        scenario_id=config.scenario_id,
        reps=config.reps,
        seed=int(config.seed),
        rates=rates,
        n_final_median=float(med),
        n_final_q1=float(q1),
        n_final_q3=float(q3),
        n_final_mean=float(np.mean(n_final)),
        mean_estimate=float(np.mean(est)),
        target=config.target,
        extra={"estimate_sd": float(np.std(est, ddof=1)) if len(est) > 1 else float("nan")},
    )


def simulate_power(
    config: ScenarioConfig, workers: int = 1, executor: Optional[Executor] = None
) -> SimulationReport:
    """Global and local rejection rates when data follow ``config.truth`` (normally the planning alternative)."""
    if config.target is not None:
        config = replace(config, target=None)
    return simulate(config, workers, executor)


def null_boundary(spec: DesignSpec, hypothesis: str) -> Tuple[float, float, float]:
    """Means on the boundary of a local null hypothesis.

    For ER the experimental mean sits exactly at the margin above the
    reference, with the reference mean at zero and placebo as planned. For EP
    and RP, experimental treatment and reference share the placebo mean.
    """
    if hypothesis == "ER":
        return (spec.mu_R + spec.delta_ER, spec.mu_R, spec.mu_P)
    if hypothesis in ("EP", "RP"):
        return (spec.mu_P, spec.mu_P, spec.mu_P)
    raise DomainError(f"unknown hypothesis {hypothesis!r}")


def simulate_type1(
    config: ScenarioConfig, workers: int = 1, executor: Optional[Executor] = None
) -> SimulationReport:
    """Rejection rate of ``config.target`` with data generated at ``config.truth``."""
    if config.target is None:
        raise DomainError("a type I error run needs a target hypothesis")
    return simulate(config, workers, executor)


def sample_size_distribution(
    config: ScenarioConfig, workers: int = 1, executor: Optional[Executor] = None
) -> SimulationReport:
    """Distribution summary of the final total (median, quartiles, mean)."""
    return simulate(config, workers, executor)
