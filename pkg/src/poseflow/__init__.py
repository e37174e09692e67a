"""Two-stage pose-guided person image synthesis with an unsupervised pose-flow estimator."""
from .types import (
    FlowPyramid,
    GarmentParsing,
    Image,
    PoseMap,
    Residues,
    SamplePair,
    ValidationError,
)
from .warp import inverse_warp, resize_flow

__version__ = "0.1.0"
