"""Non-stationary spatio-temporal Hawkes process toolkit.

Fits, simulates and evaluates a self-exciting point process whose
spatial influence kernel is parameterized by small neural networks
(location-dependent focus points and mixture weights) and whose
background intensity is driven by regional covariates.
"""

from .background import BackgroundParams, background_integral, background_intensity, region_weights
from .data import (
    CovariateStats,
    Event,
    EventSequence,
    load_events,
    save_events,
    split,
    standardize,
)
from .geo import IntensityGrid, RegionSet, build_grid, load_regions, region_of
from .kernel import (
    KernelParams,
    covariance_from_focus,
    influence_kernel,
    integral_error_bound,
    spatial_kernel,
    temporal_kernel,
    triggering_integral,
)
from .model import (
    FitConfig,
    FitResult,
    ModelParams,
    NonstationaryHawkes,
    conditional_intensity,
    fit,
    gradient,
    load_checkpoint,
    log_likelihood,
    make_initial_params,
    save_checkpoint,
)
from .neural import FeatureNet, init_feature_net, net_forward, net_gradient
from .simulate import SimConfig, box_domain, simulate

__version__ = "0.1.0"

__all__ = [
    "BackgroundParams",
    "CovariateStats",
    "Event",
    "EventSequence",
    "FeatureNet",
    "FitConfig",
    "FitResult",
    "IntensityGrid",
    "KernelParams",
    "ModelParams",
    "NonstationaryHawkes",
    "RegionSet",
    "SimConfig",
    "background_integral",
    "background_intensity",
    "box_domain",
    "build_grid",
    "conditional_intensity",
    "covariance_from_focus",
    "fit",
    "gradient",
    "influence_kernel",
    "init_feature_net",
    "integral_error_bound",
    "load_checkpoint",
    "load_events",
    "load_regions",
    "log_likelihood",
    "make_initial_params",
    "net_forward",
    "net_gradient",
    "region_of",
    "region_weights",
    "save_checkpoint",
    "save_events",
    "simulate",
    "spatial_kernel",
    "split",
    "standardize",
    "temporal_kernel",
    "triggering_integral",
]
