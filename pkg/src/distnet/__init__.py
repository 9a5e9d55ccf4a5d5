"""Distribution networks for open set learning.

A small embedding network maps inputs to a latent space where every class
is a diagonal Gaussian. Training compacts the known classes; validation
turns the learned Gaussians into conjugate posteriors and picks per-class
acceptance thresholds off precision-recall curves; at test time a sample
rejected by every current class founds a new one whose parameters are
transferred from the classes first seen at validation.
"""

from .distributions import (
    VAR_FLOOR,
    ClassDistribution,
    CovarianceMode,
    DistributionRegistry,
    NIWParams,
    class_log_likelihood,
    log_density,
    loss,
    loss_gradients,
    map_estimate,
    niw_update,
    rank1_update,
    scale_prior_from_learned,
    transfer_parameters,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    DistNetError,
    IdxParseError,
    NumericError,
    OptimizerError,
)
from .net import (
    AdamState,
    GradientBundle,
    NetworkParams,
    NetworkSpec,
    adam_step,
    backward,
    forward,
    init_params,
)

__version__ = "0.1.0"
