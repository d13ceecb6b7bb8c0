"""Learning spatiotemporal multi-vehicle interaction patterns in highway
lane-change scenarios: acceleration-sensitive Gaussian velocity fields, a
convolutional autoencoder for dimension reduction, and sticky HDP-HMM
segmentation of the resulting feature sequences."""

__version__ = "0.1.0"

from .core import (FEATURE_DIM, FeatureSequence, FieldParams, FieldTensor,
                   RoiConfig, Scene, VehicleState, in_roi, relative_state)
from .errors import LanescopeError

__all__ = [
    "FEATURE_DIM", "FeatureSequence", "FieldParams", "FieldTensor",
    "RoiConfig", "Scene", "VehicleState", "in_roi", "relative_state",
    "LanescopeError", "__version__",
]
