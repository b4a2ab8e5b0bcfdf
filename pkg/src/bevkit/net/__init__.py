"""Forward-only detector: blocks, backbone/neck/head wiring, decoding, loss values."""

from .blocks import ablock_forward, b_a2c2f_forward, c3k2_forward, n_a2c2f_forward
from .checks import check_structure
from .head import DecodedDetection, dfl_expectation, head_decode
from .loss import (
    LossValues,
    MatchedPredictions,
    MatchedTargets,
    loss_values,
    weighted_total,
)
from .model import (
    BASELINE_HEAD,
    FULL_HEAD,
    BevDetector,
    NetConfig,
    backbone_forward,
    head_forward,
    init_weights,
    neck_forward,
    param_shapes,
    parameter_count,
)
from .ops import FeatureMap, activation_disabled, conv
from .weights_io import load_weights, save_weights
