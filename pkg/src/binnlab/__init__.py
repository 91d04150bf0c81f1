"""binnlab: gradient estimators for stochastic binary and spiking networks."""

from .core import InvalidParameter, RngStream, rng_substream
from .estimators import EstimatorConfig, EstimatorKind, PPolicy
from .networks import LayerSpec, Network, NetworkSpec, Variant, network_backward, network_forward
from .variational import Granularity, KLMode

__version__ = "0.1.0"

__all__ = [
    "EstimatorConfig",
    "EstimatorKind",
    "Granularity",
    "InvalidParameter",
    "KLMode",
    "LayerSpec",
    "Network",
    "NetworkSpec",
    "PPolicy",
    "RngStream",
    "Variant",
    "network_backward",
    "network_forward",
    "rng_substream",
]
