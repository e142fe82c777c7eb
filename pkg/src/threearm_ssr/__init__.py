"""Planning, blinded sample size re-estimation and simulation for three-arm
non-inferiority trials with experimental treatment, reference and placebo."""

from .design import (
    AllocationRatio,
    DesignSpec,
    GroupSizes,
    covariance_matrix,
    power,
    required_sample_size,
)
from .errors import (
    DomainError,
    InfiniteSampleSizeError,
    IntegrationError,
    RootFindingError,
    UndefinedFactorError,
)
from .estimators import (
    EstimatorDensity,
    Method,
    TrialData,
    VarianceEstimate,
    adjusted_one_sample,
    density_os,
    density_xg,
    estimate,
    one_sample_variance,
    os_bias,
    pooled_variance,
    read_trial_data,
    xing_ganju,
)
from .reestimate import (
    ReestimationPolicy,
    expected_power,
    final_sample_size,
    inflation_factor,
    reestimate_sample_size,
    reference_zeta,
    zeta_scan,
)
from .simulate import (
    ScenarioConfig,
    SimulationReport,
    generate_trial,
    iut_test,
    run_adaptive_trial,
    sample_size_distribution,
    simulate_power,
    simulate_type1,
)
from .statcore import Corr3, bvn_cdf, mvn3_cdf

__version__ = "0.1.0"
