"""Ready-made scenario grids for the standard simulation study."""

from __future__ import annotations

from .config import RunConfig
from .design import AllocationRatio
from .errors import DomainError
from .estimators import Method

ALLOCATIONS = (AllocationRatio(1, 1, 1), AllocationRatio(3, 2, 1))
MU_P = (0.6, 0.9)
POWER_N1 = tuple(range(30, 391, 30))
T1E_N1 = tuple(range(30, 391, 60))
T1E_DELTA_ER = (0.2, 0.3, 0.4, 0.5)
ESTIMATORS = (Method.OS, Method.OSU, Method.POOLED, Method.XG)
SMOKE_REPS = 2000

BASE = {
    "alpha": 0.025, "target_power": 0.8, "delta_ER": 0.3, "delta_EP": 0.0, "delta_RP": 0.0,
    "mu_E": 0.0, "mu_R": 0.0, "sigma": 1.0,
}

PRESETS = ("table4", "fig2", "fig3", "fig5", "t1e")


def preset(name: str) -> RunConfig:
    """Scenario grid of a named preset.

    ``table4`` lists fixed designs (used with the sample size command);
    the others are simulation grids. Block sizes default to the smallest
    whole block of each allocation (3 for 1:1:1, 6 for 3:2:1).
    """
    grid = {"mu_P": list(MU_P), "alloc": list(ALLOCATIONS)}
    if name == "table4":
        pass
    elif name in ("fig2", "fig3"):
        grid.update(method=list(ESTIMATORS), n1=list(POWER_N1))
    elif name == "fig5":
        grid.update(method=[Method.XG], n1=list(POWER_N1), zeta=[1.0, "auto"])
    elif name == "t1e":
        grid.update(
            kind=["t1e_ER", "t1e_EP", "t1e_RP"], delta_ER=list(T1E_DELTA_ER), method=list(ESTIMATORS), n1=list(T1E_N1)
        )
    else:
        raise DomainError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return RunConfig(base=dict(BASE), grid=grid, source=f"<preset {name}>")
